//! Monte-Carlo simulation of the randomization distribution: structure-preserving
//! random permutations per tier, responses built through the design maps, and
//! empirical mean squares and estimator variances against their expectations.

use crate::anova::{AnovaTable, ComponentId};
use crate::balance::{Decomposition, Step};
use crate::chain::ExperimentChain;
use crate::error::{Error, Result};
use crate::estimation::{quadratic_values, treatment_vector, ComponentMap};
use crate::structure::PosetBlockStructure;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::{BTreeSet, HashMap};

/// Draws per independently seeded chunk.
const CHUNK: usize = 1000;

/// One step of a recipe: permute the levels of `factor` independently within
/// each class of the meet of `within`.
#[derive(Clone, Debug)]
pub struct PermuteStep {
    pub factor: usize,
    pub within: BTreeSet<usize>,
}

/// Permutation recipe for a simple orthogonal block structure.
#[derive(Clone, Debug)]
pub struct RandomizationScheme {
    pub structure: PosetBlockStructure,
    pub recipe: Vec<PermuteStep>,
    /// Unit lookup by the codes of the permuted factors.
    index: HashMap<Vec<usize>, usize>,
    /// Class of every unit in the meet of each step's `within` set.
    classes: Vec<Vec<usize>>,
}

impl RandomizationScheme {
    /// Recipe read off the nesting relation; fails when the generalized factors
    /// are not exactly the nest-closed sets of the randomized factors.
    pub fn from_structure(structure: &PosetBlockStructure) -> Result<Self> {
        let factors = structure.factors();
        let real: Vec<usize> = (0..factors.len()).filter(|&f| !factors[f].pseudo).collect();
        let anc = structure.ancestors();
        let m = real.len();
        if m > 24 {
            return Err(Error::Unsupported("randomization of more than 24 factors".into()));
        }
        let mut partitions = BTreeSet::new();
        for mask in 0u64..(1u64 << m) {
            let set: BTreeSet<usize> = (0..m).filter(|i| mask >> i & 1 == 1).map(|i| real[i]).collect();
            if !set.iter().all(|f| anc[*f].is_subset(&set)) {
                continue;
            }
            let h = structure.gf_index_by_partition(&set).ok_or_else(|| {
                Error::Unsupported(format!(
                    "structure lacks {} and needs a user-supplied permutation recipe",
                    structure.label_of_set(&set)
                ))
            })?;
            partitions.insert(h);
        }
        if partitions.len() != structure.generalized_factors().len() {
            return Err(Error::Unsupported(
                "generalized factors beyond the nesting tree need a user-supplied permutation recipe".into(),
            ));
        }
        let recipe: Vec<PermuteStep> = real
            .iter()
            .map(|&f| PermuteStep {
                factor: f,
                within: anc[f].clone(),
            })
            .collect();
        let n = structure.unit_count();
        let mut index = HashMap::with_capacity(n);
        for u in 0..n {
            let key: Vec<usize> = real.iter().map(|&f| factors[f].codes[u]).collect();
            if index.insert(key, u).is_some() {
                return Err(Error::Unsupported(
                    "units are not identified by their factor levels".into(),
                ));
            }
        }
        let classes = recipe.iter().map(|s| structure.meet(&s.within).0).collect();
        Ok(RandomizationScheme {
            structure: structure.clone(),
            recipe,
            index,
            classes,
        })
    }

    /// A uniformly random group element as `perm[u]` = image of unit `u`.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        let factors = self.structure.factors();
        let n = self.structure.unit_count();
        let mut maps: Vec<HashMap<(usize, usize), usize>> = Vec::with_capacity(self.recipe.len());
        for (s, step) in self.recipe.iter().enumerate() {
            let codes = &factors[step.factor].codes;
            let mut by_class: HashMap<usize, BTreeSet<usize>> = HashMap::new();
            for u in 0..n {
                by_class.entry(self.classes[s][u]).or_default().insert(codes[u]);
            }
            let mut keys: Vec<usize> = by_class.keys().copied().collect();
            keys.sort_unstable();
            let mut map = HashMap::new();
            for c in keys {
                let levels: Vec<usize> = by_class[&c].iter().copied().collect();
                let mut shuffled = levels.clone();
                shuffled.shuffle(rng);
                for (a, b) in levels.into_iter().zip(shuffled) {
                    map.insert((c, a), b);
                }
            }
            maps.push(map);
        }
        (0..n)
            .map(|u| {
                let key: Vec<usize> = self
                    .recipe
                    .iter()
                    .enumerate()
                    .map(|(s, step)| maps[s][&(self.classes[s][u], factors[step.factor].codes[u])])
                    .collect();
                self.index[&key]
            })
            .collect()
    }
}

/// Reproducible draw from the scheme.
pub fn random_permutation(scheme: &RandomizationScheme, seed: u64) -> Vec<usize> {
    scheme.sample(&mut ChaCha20Rng::seed_from_u64(seed))
}

/// Streaming mean and variance with Chan's merge for parallel chunks.
#[derive(Clone, Copy, Debug, Default)]
pub struct Welford {
    pub n: f64,
    pub mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, o: &Welford) {
        if o.n == 0.0 {
            return;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        self.mean += d * o.n / n;
        self.m2 += o.m2 + d * d * self.n * o.n / n;
        self.n = n;
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2.0 {
            0.0
        } else {
            self.m2 / (self.n - 1.0)
        }
    }

    pub fn std_error(&self) -> f64 {
        (self.variance() / self.n).sqrt()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RowCheck {
    pub row: usize,
    pub source: String,
    pub df: usize,
    pub empirical: f64,
    pub std_error: f64,
    pub theoretical: f64,
    pub pass: bool,
}

/// Single-stratum estimator `R D y / λ` of one treatment-bearing part.
#[derive(Clone, Debug, Serialize)]
pub struct EstimatorCheck {
    pub row: usize,
    pub source: String,
    pub treatment: String,
    /// Mean over draws of `B_R'(estimate − R X τ)`, averaged over coordinates.
    pub bias: f64,
    pub bias_std_error: f64,
    pub empirical_variance: f64,
    pub theoretical_variance: f64,
    pub relative_error: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SimulationReport {
    pub draws: usize,
    pub seed: u64,
    pub rows: Vec<RowCheck>,
    pub estimators: Vec<EstimatorCheck>,
    pub pass: bool,
}

/// Acceptance bounds for [`simulate`].
#[derive(Clone, Copy, Debug)]
pub struct Tolerances {
    /// Allowed distance of an empirical mean square from its EMS, in standard errors.
    pub ms_std_errors: f64,
    /// Allowed relative error of an estimator variance; widened to four
    /// Monte-Carlo standard errors when the run is too short for it.
    pub variance_relative: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            ms_std_errors: 3.0,
            variance_relative: 0.02,
        }
    }
}

struct Estimator {
    row: usize,
    treatment: usize,
    /// `B_R' B_D / λ`, applied to `B_D' y`.
    map: DMatrix<f64>,
    parent: usize,
    target: DVector<f64>,
    variance: f64,
}

/// Simulate `N` draws of `y = Σ_k X_k g_k(W_k) + X τ` where `W_k` has covariance
/// `Σ η_Q Q` on the units of tier `k` and `g_k` is a random element of the
/// tier's randomization group.
#[allow(clippy::too_many_arguments)]
pub fn simulate(
    chain: &ExperimentChain,
    d: &Decomposition,
    table: &AnovaTable,
    comps: &ComponentMap,
    tau: &[f64],
    draws: usize,
    seed: u64,
    tol: Tolerances,
) -> Result<SimulationReport> {
    for (id, &v) in comps {
        if v < 0.0 {
            return Err(Error::Estimation(format!(
                "component {} is negative ({})",
                table.component(*id).spectral,
                v
            )));
        }
    }
    let p = chain.random_tiers();
    let xt = treatment_vector(chain, tau)?;
    let q = quadratic_values(chain, tau)?;
    let schemes: Vec<RandomizationScheme> = (0..p)
        .map(|k| RandomizationScheme::from_structure(&chain.tiers[k].structure))
        .collect::<Result<_>>()?;
    // Square roots Σ √η_Q Q of each tier's variance on its own units.
    let roots: Vec<DMatrix<f64>> = (0..p)
        .map(|k| {
            let m = chain.tiers[k].unit_count();
            let mut s = DMatrix::zeros(m, m);
            for idem in &chain.families[k] {
                let eta = comps
                    .get(&ComponentId {
                        tier: k,
                        gf: idem.stratum,
                    })
                    .copied()
                    .unwrap_or(0.0);
                if eta > 0.0 {
                    let b = idem.projector.basis();
                    s += b * b.transpose() * eta.sqrt();
                }
            }
            s
        })
        .collect();
    let parts = d.parts();
    let parent_bases: Vec<DMatrix<f64>> = d.levels[p - 1].iter().map(|x| x.projector.basis().clone()).collect();
    let nq = chain.pushed[p].len();
    let mut estimators = Vec::new();
    for (i, part) in parts.iter().enumerate() {
        if let Some(Step::Into { idem, .. }) = part.steps.last() {
            let parent = part.parent.unwrap();
            let r = &chain.pushed[p][*idem];
            let c = r.basis().transpose() * &parent_bases[parent];
            let lambda = c.norm_squared() / r.rank as f64;
            let var = table.rows[i].ems.evaluate(comps, &vec![0.0; nq]) / lambda;
            estimators.push(Estimator {
                row: i,
                treatment: *idem,
                map: c / lambda,
                parent,
                target: r.basis().transpose() * &xt,
                variance: var,
            });
        }
    }
    let chunks = draws.div_ceil(CHUNK);
    let partials: Vec<(Vec<Welford>, Vec<Welford>, Vec<Welford>)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let mut ms = vec![Welford::default(); parts.len()];
            let mut bias = vec![Welford::default(); estimators.len()];
            let mut var = vec![Welford::default(); estimators.len()];
            let count = CHUNK.min(draws - c * CHUNK);
            for _ in 0..count {
                let mut y = xt.clone();
                for k in 0..p {
                    let m = chain.tiers[k].unit_count();
                    let eps = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let w = &roots[k] * eps;
                    let g = schemes[k].sample(&mut rng);
                    // Unit u of tier k receives the effect of its image g(u).
                    for (o, &u) in chain.composite[k].iter().enumerate() {
                        y[o] += w[g[u]];
                    }
                }
                for (i, part) in parts.iter().enumerate() {
                    ms[i].push(part.projector.quadratic(&y) / part.rank() as f64);
                }
                let proj: Vec<DVector<f64>> = parent_bases.iter().map(|b| b.transpose() * &y).collect();
                for (e, est) in estimators.iter().enumerate() {
                    let dev = &est.map * &proj[est.parent] - &est.target;
                    for v in dev.iter() {
                        bias[e].push(*v);
                        var[e].push(v * v);
                    }
                }
            }
            (ms, bias, var)
        })
        .collect();
    let mut ms = vec![Welford::default(); parts.len()];
    let mut bias = vec![Welford::default(); estimators.len()];
    let mut var = vec![Welford::default(); estimators.len()];
    for (a, b, c) in &partials {
        for (x, y) in ms.iter_mut().zip(a) {
            x.merge(y);
        }
        for (x, y) in bias.iter_mut().zip(b) {
            x.merge(y);
        }
        for (x, y) in var.iter_mut().zip(c) {
            x.merge(y);
        }
    }
    let rows: Vec<RowCheck> = parts
        .iter()
        .enumerate()
        .map(|(i, part)| {
            let theoretical = table.rows[i].ems.evaluate(comps, &q);
            let se = ms[i].std_error();
            RowCheck {
                row: i,
                source: part.projector.label.clone(),
                df: part.rank(),
                empirical: ms[i].mean,
                std_error: se,
                theoretical,
                pass: (ms[i].mean - theoretical).abs() <= tol.ms_std_errors * se.max(1e-12 * theoretical.abs()),
            }
        })
        .collect();
    let est_checks: Vec<EstimatorCheck> = estimators
        .iter()
        .enumerate()
        .map(|(e, est)| {
            // The deviation has known mean zero, so its mean square is the variance.
            let emp = var[e].mean;
            let rel = (emp - est.variance).abs() / est.variance.abs().max(1e-300);
            let bias_ok = bias[e].mean.abs() <= 4.0 * bias[e].std_error().max(1e-12);
            let allowed = tol
                .variance_relative
                .max(4.0 * var[e].std_error() / est.variance.abs().max(1e-300));
            EstimatorCheck {
                row: est.row,
                source: parts[est.row].projector.label.clone(),
                treatment: chain.pushed[p][est.treatment].label.clone(),
                bias: bias[e].mean,
                bias_std_error: bias[e].std_error(),
                empirical_variance: emp,
                theoretical_variance: est.variance,
                relative_error: rel,
                pass: bias_ok && rel <= allowed,
            }
        })
        .collect();
    let pass = rows.iter().all(|r| r.pass) && est_checks.iter().all(|e| e.pass);
    Ok(SimulationReport {
        draws,
        seed,
        rows,
        estimators: est_checks,
        pass,
    })
}

/// Empirical covariance of the first tier's effects after randomization, for
/// checking against `Σ ξ_P P`.
pub fn sample_tier_covariance(
    chain: &ExperimentChain,
    comps: &ComponentMap,
    tier: usize,
    draws: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let scheme = RandomizationScheme::from_structure(&chain.tiers[tier].structure)?;
    let m = chain.tiers[tier].unit_count();
    let mut root = DMatrix::zeros(m, m);
    for idem in &chain.families[tier] {
        let eta = comps
            .get(&ComponentId { tier, gf: idem.stratum })
            .copied()
            .unwrap_or(0.0);
        let b = idem.projector.basis();
        root += b * b.transpose() * eta.max(0.0).sqrt();
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut sum = DMatrix::zeros(m, m);
    let mut sum_sq = DMatrix::zeros(m, m);
    for _ in 0..draws {
        let eps = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let w = &root * eps;
        let g = scheme.sample(&mut rng);
        let wp = DVector::from_fn(m, |u, _| w[g[u]]);
        let outer = &wp * wp.transpose();
        sum_sq += outer.component_mul(&outer);
        sum += outer;
    }
    let nd = draws as f64;
    let mean = &sum / nd;
    let se = (sum_sq / nd - mean.component_mul(&mean)).map(|v| (v.max(0.0) / nd).sqrt());
    Ok((mean, se))
}
