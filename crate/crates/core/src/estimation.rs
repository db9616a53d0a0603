//! Estimation from data: mean squares per part, equate-EMS and gamma-GLM
//! component fits with nonnegativity, single-stratum and combined treatment
//! estimates, and closed-form generalized least squares.

use crate::anova::{AnovaTable, ComponentId, LinearCombination};
use crate::balance::{AnovaKind, Decomposition, Step};
use crate::chain::ExperimentChain;
use crate::error::{Error, Result};
use crate::linalg::{max_abs, orthonormal_complement, orthonormal_range, row_space};
use crate::rational::Coef;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use std::collections::BTreeMap;

/// Spectral components keyed by tier and generalized factor.
pub type ComponentMap = BTreeMap<ComponentId, f64>;

const MAX_ITER: usize = 200;
const CONVERGENCE: f64 = 1e-8;

#[derive(Clone, Debug, Serialize)]
pub struct MeanSquare {
    /// Index of the final part (equal to the anova row).
    pub part: usize,
    pub source: String,
    pub ss: f64,
    pub df: usize,
    pub ms: f64,
}

/// Sums of squares `y'My` for every final part `M`.
pub fn project_mean_squares(y: &DVector<f64>, d: &Decomposition) -> Result<Vec<MeanSquare>> {
    let n = d.parts().first().map(|p| p.projector.unit_count()).unwrap_or(0);
    if y.len() != n {
        return Err(Error::Data(format!(
            "response has {} values, the design has {} units",
            y.len(),
            n
        )));
    }
    Ok(d.parts()
        .iter()
        .enumerate()
        .map(|(i, part)| {
            let ss = part.projector.quadratic(y);
            let df = part.rank();
            MeanSquare {
                part: i,
                source: part.projector.label.clone(),
                ss,
                df,
                ms: ss / df as f64,
            }
        })
        .collect())
}

/// `q(R) = ‖R X τ‖² / rank R` for each treatment idempotent, on the observational units.
pub fn quadratic_values(chain: &ExperimentChain, tau: &[f64]) -> Result<Vec<f64>> {
    let xt = treatment_vector(chain, tau)?;
    Ok(chain
        .pushed
        .last()
        .unwrap()
        .iter()
        .map(|r| (r.basis().transpose() * &xt).norm_squared() / r.rank as f64)
        .collect())
}

/// `X τ` on the observational units.
pub fn treatment_vector(chain: &ExperimentChain, tau: &[f64]) -> Result<DVector<f64>> {
    let t = chain.treatment_tier().unit_count();
    if tau.len() != t {
        return Err(Error::Data(format!(
            "{} treatment values given for {} treatments",
            tau.len(),
            t
        )));
    }
    let a = chain.treatment_assignment();
    Ok(DVector::from_iterator(a.len(), a.iter().map(|&i| tau[i])))
}

/// Dense `V = Σ_k r_k Σ_Q η_Q Q` on the observational units.
pub fn covariance_matrix(chain: &ExperimentChain, comps: &ComponentMap) -> DMatrix<f64> {
    let n = chain.unit_count();
    let mut v = DMatrix::zeros(n, n);
    for k in 0..chain.random_tiers() {
        let r = chain.replication[k] as f64;
        for (q, idem) in chain.pushed[k].iter().zip(&chain.families[k]) {
            let eta = comps
                .get(&ComponentId {
                    tier: k,
                    gf: idem.stratum,
                })
                .copied()
                .unwrap_or(0.0);
            if eta != 0.0 {
                let b = q.basis();
                v += (b * b.transpose()) * (r * eta);
            }
        }
    }
    v
}

/// One observed mean square with the coefficients of its expectation.
#[derive(Clone, Debug)]
pub struct EmsRow {
    pub label: String,
    /// Spectral coefficients in the order of `EmsSystem::components`.
    pub spectral: Vec<f64>,
    pub canonical: Vec<f64>,
    pub ss: f64,
    pub df: f64,
}

impl EmsRow {
    pub fn ms(&self) -> f64 {
        self.ss / self.df
    }
}

/// Linear system relating observed mean squares to components.
#[derive(Clone, Debug)]
pub struct EmsSystem {
    pub components: Vec<ComponentId>,
    pub spectral_names: Vec<String>,
    pub canonical_names: Vec<String>,
    pub rows: Vec<EmsRow>,
}

impl EmsSystem {
    pub fn empty(table: &AnovaTable) -> Self {
        EmsSystem {
            components: table.components.iter().map(|c| c.id).collect(),
            spectral_names: table.components.iter().map(|c| c.spectral.clone()).collect(),
            canonical_names: table.components.iter().map(|c| c.canonical.clone()).collect(),
            rows: Vec::new(),
        }
    }

    /// Rows of `table` with their observed sums of squares.
    pub fn from_table(table: &AnovaTable, rows: &[usize], ms: &[MeanSquare]) -> Self {
        let mut s = EmsSystem::empty(table);
        for &i in rows {
            let (spectral, canonical) = row_coefficients(table, i);
            s.rows.push(EmsRow {
                label: row_label(table, i),
                spectral,
                canonical,
                ss: ms[i].ss,
                df: ms[i].df as f64,
            });
        }
        s
    }
}

fn row_label(table: &AnovaTable, i: usize) -> String {
    let r = &table.rows[i];
    r.sources
        .iter()
        .filter(|s| !s.is_empty())
        .cloned()
        .collect::<Vec<_>>()
        .join(" / ")
}

fn row_coefficients(table: &AnovaTable, i: usize) -> (Vec<f64>, Vec<f64>) {
    let ids: Vec<ComponentId> = table.components.iter().map(|c| c.id).collect();
    let mut s = vec![0.0; ids.len()];
    let mut c = vec![0.0; ids.len()];
    for t in &table.rows[i].ems.spectral {
        s[ids.iter().position(|&x| x == t.component).unwrap()] += t.coef.value;
    }
    for t in &table.rows[i].ems.canonical {
        c[ids.iter().position(|&x| x == t.component).unwrap()] += t.coef.value;
    }
    (s, c)
}

#[derive(Clone, Debug, Serialize)]
pub struct ComponentValue {
    pub id: ComponentId,
    pub symbol: String,
    pub value: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EstimatedSum {
    pub combination: LinearCombination,
    pub value: f64,
}

/// Linear relation among observed mean squares that the model forces to zero.
#[derive(Clone, Debug, Serialize)]
pub struct Defect {
    pub relation: Vec<(String, f64)>,
    pub value: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct ComponentEstimates {
    /// Individually estimable spectral components, including those held at zero.
    pub spectral: Vec<ComponentValue>,
    pub canonical: Vec<ComponentValue>,
    /// Estimable sums of components that are not separately estimable.
    pub sums: Vec<EstimatedSum>,
    pub constrained_zero: Vec<ComponentId>,
    pub effective_df: BTreeMap<String, f64>,
    /// Inconsistencies among the observed mean squares (dependent EMS vectors).
    pub defects: Vec<Defect>,
    pub converged: bool,
    pub iterations: usize,
    /// Stratum variances per iteration of the combined fit.
    pub trajectory: Vec<Vec<f64>>,
    /// Strata fitted with fewer than one effective degree of freedom.
    pub low_df: Vec<String>,
}

impl ComponentEstimates {
    pub fn get(&self, id: ComponentId) -> Option<f64> {
        self.spectral.iter().find(|c| c.id == id).map(|c| c.value)
    }

    pub fn spectral_map(&self) -> ComponentMap {
        self.spectral.iter().map(|c| (c.id, c.value)).collect()
    }

    pub fn by_symbol(&self, symbol: &str) -> Option<f64> {
        self.spectral
            .iter()
            .chain(&self.canonical)
            .find(|c| c.symbol == symbol)
            .map(|c| c.value)
    }
}

/// Internal state of one solve, kept for estimability queries.
struct Solved {
    x: DVector<f64>,
    /// Row space of the pooled active system, over all components.
    space: DMatrix<f64>,
    estimates: ComponentEstimates,
}

impl Solved {
    fn estimable(&self, v: &DVector<f64>) -> bool {
        let nv = v.norm();
        if nv == 0.0 {
            return true;
        }
        (v - &self.space * (self.space.transpose() * v)).norm() <= 1e-8 * nv
    }
}

/// Groups rows whose active coefficient vectors coincide, pooling SS and df.
fn pool(system: &EmsSystem, active: &[bool]) -> Vec<(Vec<usize>, DVector<f64>, f64, f64)> {
    let mut groups: Vec<(Vec<usize>, DVector<f64>, f64, f64)> = Vec::new();
    for (i, row) in system.rows.iter().enumerate() {
        if row.df <= 1e-9 {
            continue;
        }
        let v = DVector::from_iterator(
            active.len(),
            row.spectral.iter().zip(active).map(|(&c, &a)| if a { c } else { 0.0 }),
        );
        if v.iter().all(|x| x.abs() < 1e-12) {
            continue;
        }
        match groups.iter_mut().find(|g| (&g.1 - &v).amax() < 1e-9) {
            Some(g) => {
                g.0.push(i);
                g.2 += row.ss;
                g.3 += row.df;
            }
            None => groups.push((vec![i], v, row.ss, row.df)),
        }
    }
    groups
}

fn weighted_solve(g: &DMatrix<f64>, m: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
    let sw = w.map(f64::sqrt);
    let a = DMatrix::from_fn(g.nrows(), g.ncols(), |i, j| g[(i, j)] * sw[i]);
    let b = m.component_mul(&sw);
    a.svd(true, true).solve(&b, 1e-12).expect("thin svd solve")
}

/// Gamma GLM with identity link on the pooled mean squares, started from the
/// df-weighted least-squares fit.
fn glm_fit(g: &DMatrix<f64>, ms: &DVector<f64>, df: &DVector<f64>) -> DVector<f64> {
    let mut x = weighted_solve(g, ms, df);
    if g.nrows() <= crate::linalg::numerical_rank(g, 1e-9) {
        return x;
    }
    for _ in 0..100 {
        let mu = g * &x;
        if mu.iter().any(|&m| m <= 0.0) {
            break;
        }
        let w = DVector::from_iterator(df.len(), df.iter().zip(mu.iter()).map(|(d, m)| d / (m * m)));
        let next = weighted_solve(g, ms, &w);
        let change = (&next - &x).amax() / x.amax().max(1e-300);
        x = next;
        if change < 1e-13 {
            break;
        }
    }
    x
}

fn solve(system: &EmsSystem, active: &[bool]) -> Solved {
    let nc = system.components.len();
    let groups = pool(system, active);
    let g = DMatrix::from_fn(groups.len(), nc, |i, j| groups[i].1[j]);
    let ms = DVector::from_iterator(groups.len(), groups.iter().map(|g| g.2 / g.3));
    let df = DVector::from_iterator(groups.len(), groups.iter().map(|g| g.3));
    let (x, space) = if groups.is_empty() {
        (DVector::zeros(nc), DMatrix::zeros(nc, 0))
    } else {
        (glm_fit(&g, &ms, &df), row_space(&g, 1e-9))
    };
    let est_mask: Vec<bool> = (0..nc)
        .map(|j| {
            active[j] && g.column(j).iter().any(|v| v.abs() > 1e-12) && (1.0 - space.row(j).norm_squared()).abs() < 1e-8
        })
        .collect();
    let mut estimates = ComponentEstimates::default();
    for j in 0..nc {
        if !active[j] {
            estimates.constrained_zero.push(system.components[j]);
        }
        if est_mask[j] || !active[j] {
            estimates.spectral.push(ComponentValue {
                id: system.components[j],
                symbol: system.spectral_names[j].clone(),
                value: if active[j] { x[j] } else { 0.0 },
            });
        }
    }
    estimates.sums = confounded_sums(&g, &x, &est_mask, &system.spectral_names);
    estimates.canonical = canonical_values(system, active, &x);
    estimates.defects = defects(&groups, system);
    estimates.converged = true;
    Solved { x, space, estimates }
}

fn confounded_sums(g: &DMatrix<f64>, x: &DVector<f64>, est: &[bool], names: &[String]) -> Vec<EstimatedSum> {
    let nc = g.ncols();
    let mut reduced: Vec<DVector<f64>> = Vec::new();
    for i in 0..g.nrows() {
        let mut v: DVector<f64> = g.row(i).transpose();
        for j in 0..nc {
            if est[j] {
                v[j] = 0.0;
            }
        }
        if v.iter().all(|c| c.abs() < 1e-12) || reduced.iter().any(|u| (u - &v).amax() < 1e-9) {
            continue;
        }
        let mut trial = reduced.clone();
        trial.push(v.clone());
        if crate::linalg::numerical_rank(&DMatrix::from_columns(&trial), 1e-9) == trial.len() {
            reduced.push(v);
        }
    }
    reduced
        .into_iter()
        .map(|mut v| {
            let first = v.iter().copied().find(|c| c.abs() > 1e-12).unwrap();
            v /= first;
            EstimatedSum {
                combination: LinearCombination {
                    terms: (0..nc)
                        .filter(|&j| v[j].abs() > 1e-12)
                        .map(|j| (names[j].clone(), Coef::new(v[j])))
                        .collect(),
                },
                value: v.dot(x),
            }
        })
        .collect()
}

/// Canonical components from the fitted expectations of the original rows.
fn canonical_values(system: &EmsSystem, active: &[bool], x: &DVector<f64>) -> Vec<ComponentValue> {
    let nc = system.components.len();
    let rows: Vec<&EmsRow> = system.rows.iter().filter(|r| r.df > 1e-9).collect();
    if rows.is_empty() {
        return Vec::new();
    }
    let a_s = DMatrix::from_fn(rows.len(), nc, |i, j| rows[i].spectral[j]);
    let a_c = DMatrix::from_fn(rows.len(), nc, |i, j| rows[i].canonical[j]);
    let mut xa = x.clone();
    for j in 0..nc {
        if !active[j] {
            xa[j] = 0.0;
        }
    }
    let fitted = &a_s * &xa;
    let space = row_space(&a_c, 1e-9);
    let sol = a_c
        .clone()
        .svd(true, true)
        .solve(&fitted, 1e-12)
        .expect("thin svd solve");
    (0..nc)
        .filter(|&j| a_c.column(j).iter().any(|v| v.abs() > 1e-12) && (1.0 - space.row(j).norm_squared()).abs() < 1e-8)
        .map(|j| ComponentValue {
            id: system.components[j],
            symbol: system.canonical_names[j].clone(),
            value: sol[j],
        })
        .collect()
}

/// Relations `c` with `c'G = 0` among distinct pooled rows, in reduced echelon form
/// with leading coefficient one, and their values on the observed mean squares.
fn defects(groups: &[(Vec<usize>, DVector<f64>, f64, f64)], system: &EmsSystem) -> Vec<Defect> {
    if groups.is_empty() {
        return Vec::new();
    }
    let nc = system.components.len();
    let g = DMatrix::from_fn(groups.len(), nc, |i, j| groups[i].1[j]);
    let range = orthonormal_range(&g, 1e-9);
    if range.ncols() == g.nrows() {
        return Vec::new();
    }
    let null = orthonormal_complement(&range);
    let rel = rref(&null.transpose());
    let labels: Vec<String> = groups
        .iter()
        .map(|gr| {
            gr.0.iter()
                .map(|&i| system.rows[i].label.clone())
                .collect::<Vec<_>>()
                .join(" + ")
        })
        .collect();
    (0..rel.nrows())
        .map(|k| {
            let c = rel.row(k);
            Defect {
                relation: (0..c.len())
                    .filter(|&i| c[i].abs() > 1e-10)
                    .map(|i| (labels[i].clone(), c[i]))
                    .collect(),
                value: (0..c.len()).map(|i| c[i] * groups[i].2 / groups[i].3).sum(),
            }
        })
        .collect()
}

fn rref(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut a = m.clone();
    let (rows, cols) = a.shape();
    let mut r = 0;
    for c in 0..cols {
        if r == rows {
            break;
        }
        let piv = (r..rows)
            .max_by(|&i, &j| a[(i, c)].abs().total_cmp(&a[(j, c)].abs()))
            .unwrap();
        if a[(piv, c)].abs() < 1e-10 {
            continue;
        }
        a.swap_rows(r, piv);
        let lead = a[(r, c)];
        for j in 0..cols {
            a[(r, j)] /= lead;
        }
        for i in 0..rows {
            if i != r {
                let f = a[(i, c)];
                if f != 0.0 {
                    for j in 0..cols {
                        a[(i, j)] -= f * a[(r, j)];
                    }
                }
            }
        }
        r += 1;
    }
    a.rows(0, r).into_owned()
}

/// Equate observed to expected mean squares, fitted as a gamma GLM with identity
/// link (df-weighted least squares when the system is square). Components that are
/// not separately estimable are reported only through estimable sums.
pub fn ems_solver(system: &EmsSystem) -> ComponentEstimates {
    let active = vec![true; system.components.len()];
    solve(system, &active).estimates
}

/// Zero the most negative estimable component, pool mean squares whose
/// expectations then coincide, and re-solve until no estimate is negative.
pub fn enforce_nonnegativity(system: &EmsSystem, est: ComponentEstimates) -> ComponentEstimates {
    let mut active: Vec<bool> = system
        .components
        .iter()
        .map(|c| !est.constrained_zero.contains(c))
        .collect();
    if !est.spectral.iter().any(|c| c.value < -negative_tol(system)) {
        return est;
    }
    solve_nonnegative(system, &mut active).estimates
}

fn negative_tol(system: &EmsSystem) -> f64 {
    1e-12 * system.rows.iter().map(|r| r.ms().abs()).fold(1e-300, f64::max)
}

fn solve_nonnegative(system: &EmsSystem, active: &mut [bool]) -> Solved {
    let tol = negative_tol(system);
    loop {
        let s = solve(system, active);
        let worst = s
            .estimates
            .spectral
            .iter()
            .filter(|c| c.value < -tol)
            .min_by(|a, b| a.value.total_cmp(&b.value))
            .map(|c| c.id);
        match worst {
            Some(id) => {
                let j = system.components.iter().position(|&c| c == id).unwrap();
                active[j] = false;
            }
            None => return s,
        }
    }
}

/// Which generalized-least-squares route produced a fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    SingleStratum,
    Combined,
    GlsKnownV,
    GlsEgls,
}

/// Estimate of `R X τ` for one treatment idempotent.
#[derive(Clone, Debug, Serialize)]
pub struct EffectEstimate {
    pub treatment: String,
    pub rank: usize,
    /// The estimated vector on the observational units.
    pub estimate: Vec<f64>,
    /// Scalar `v` with variance matrix `v R`; absent when it involves
    /// inestimable components.
    pub variance: Option<f64>,
    /// Part the estimate was taken from, for single-stratum fits.
    pub source: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct FitResult {
    pub method: Method,
    pub effects: Vec<EffectEstimate>,
    /// Fitted value for each treatment.
    pub treatment_values: Vec<f64>,
    pub mean_squares: Vec<MeanSquare>,
    pub components: ComponentEstimates,
}

fn treatment_values(chain: &ExperimentChain, effects: &[EffectEstimate]) -> Vec<f64> {
    let t = chain.treatment_tier().unit_count();
    let a = chain.treatment_assignment();
    let mut sum = vec![0.0; t];
    let mut count = vec![0usize; t];
    for (u, &tr) in a.iter().enumerate() {
        sum[tr] += effects.iter().map(|e| e.estimate[u]).sum::<f64>();
        count[tr] += 1;
    }
    sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect()
}

/// Estimate from a single final part carrying treatment information.
#[derive(Clone, Debug)]
pub struct StratumEstimate {
    pub treatment: usize,
    pub estimate: DVector<f64>,
    /// Efficiency of the treatment idempotent in the parent part.
    pub efficiency: f64,
    /// Variance scalar, when the part's components are available.
    pub variance: Option<f64>,
}

/// `R D y / λ` for the final part `D ▷ R`, with variance `(EMS variance of D ▷ R) / λ`.
pub fn stratum_estimate(
    y: &DVector<f64>,
    chain: &ExperimentChain,
    d: &Decomposition,
    table: &AnovaTable,
    part: usize,
    comps: Option<&ComponentMap>,
) -> Result<StratumEstimate> {
    let p = chain.random_tiers();
    let fin = &d.parts()[part];
    let idem = match fin.steps.last() {
        Some(Step::Into { idem, .. }) => *idem,
        _ => {
            return Err(Error::Estimation(format!(
                "part {} carries no treatment information",
                fin.projector.label
            )))
        }
    };
    let parent = &d.levels[p - 1][fin.parent.unwrap()];
    let r = &chain.pushed[p][idem];
    let c = r.basis().transpose() * parent.projector.basis();
    let lambda = c.norm_squared() / r.rank as f64;
    if lambda <= chain.options.tol {
        return Err(Error::Estimation(format!(
            "efficiency of {} in {} is zero",
            r.label, parent.projector.label
        )));
    }
    let estimate = r.basis() * (&c * (parent.projector.basis().transpose() * y)) / lambda;
    let variance = comps.and_then(|m| {
        let ems = &table.rows[part].ems;
        ems.spectral
            .iter()
            .all(|t| m.contains_key(&t.component))
            .then(|| ems.evaluate(m, &vec![0.0; chain.pushed[p].len()]) / lambda)
    });
    Ok(StratumEstimate {
        treatment: idem,
        estimate,
        efficiency: lambda,
        variance,
    })
}

/// Anova fit: components by equating residual mean squares to their
/// expectations, and each treatment estimated from the part where it has the
/// largest efficiency.
pub fn anova_fit(
    y: &DVector<f64>,
    chain: &ExperimentChain,
    d: &Decomposition,
    table: &AnovaTable,
) -> Result<FitResult> {
    if !d.anova_applicable() {
        return Err(Error::NotApplicable(
            "treatment information lies in parts that are not eigenspaces of the variance matrix; use the GLS fit"
                .into(),
        ));
    }
    let ms = project_mean_squares(y, d)?;
    let rows: Vec<usize> = (0..table.rows.len())
        .filter(|&i| table.rows[i].is_residual_type())
        .collect();
    let system = EmsSystem::from_table(table, &rows, &ms);
    let components = enforce_nonnegativity(&system, ems_solver(&system));
    let map = components.spectral_map();
    let p = chain.random_tiers();
    let mut effects = Vec::new();
    for (ri, r) in chain.pushed[p].iter().enumerate() {
        let best = d
            .parts()
            .iter()
            .enumerate()
            .filter(|(_, f)| matches!(f.steps.last(), Some(Step::Into { idem, .. }) if *idem == ri))
            .max_by(|a, b| {
                let ea = a.1.steps.last().and_then(Step::eff).map(|e| e.value).unwrap_or(0.0);
                let eb = b.1.steps.last().and_then(Step::eff).map(|e| e.value).unwrap_or(0.0);
                ea.total_cmp(&eb)
            })
            .map(|(i, _)| i);
        let Some(part) = best else { continue };
        let s = stratum_estimate(y, chain, d, table, part, Some(&map))?;
        effects.push(EffectEstimate {
            treatment: r.label.clone(),
            rank: r.rank,
            estimate: s.estimate.iter().copied().collect(),
            variance: s.variance,
            source: Some(d.parts()[part].projector.label.clone()),
        });
    }
    Ok(FitResult {
        method: Method::SingleStratum,
        treatment_values: treatment_values(chain, &effects),
        effects,
        mean_squares: ms,
        components,
    })
}

/// Starting point or fixed values for [`combine_information`].
#[derive(Clone, Debug)]
pub enum CombineMode {
    /// Components held at the given values; only treatments are estimated.
    Fixed(ComponentMap),
    /// Iterate from the given values, or from the anova fit when `None`.
    Estimate(Option<ComponentMap>),
}

/// Level-(p−1) parts in `𝓟*𝓠` with their EMS coefficients and overlaps with the
/// treatment idempotents.
struct Strata {
    parts: Vec<usize>,
    labels: Vec<String>,
    ranks: Vec<f64>,
    spectral: Vec<DVector<f64>>,
    canonical: Vec<Vec<f64>>,
    /// `B_R' B_D` per stratum and treatment idempotent.
    cross: Vec<Vec<DMatrix<f64>>>,
    /// `λ_DR = tr(R D) / rank R`.
    lambda: Vec<Vec<f64>>,
    /// `B_D' y`.
    projected: Vec<DVector<f64>>,
}

fn strata(y: &DVector<f64>, chain: &ExperimentChain, d: &Decomposition, table: &AnovaTable) -> Strata {
    let p = chain.random_tiers();
    let level = &d.levels[p - 1];
    let treat = &chain.pushed[p];
    let mut s = Strata {
        parts: Vec::new(),
        labels: Vec::new(),
        ranks: Vec::new(),
        spectral: Vec::new(),
        canonical: Vec::new(),
        cross: Vec::new(),
        lambda: Vec::new(),
        projected: Vec::new(),
    };
    for &j in &d.applicability.pstar_q {
        let row = (0..table.rows.len())
            .find(|&i| table.rows[i].ancestors[p - 1] == j)
            .unwrap();
        let (sp, ca) = row_coefficients(table, row);
        let b = level[j].projector.basis();
        let cross: Vec<DMatrix<f64>> = treat.iter().map(|r| r.basis().transpose() * b).collect();
        s.lambda.push(
            cross
                .iter()
                .zip(treat)
                .map(|(c, r)| c.norm_squared() / r.rank as f64)
                .collect(),
        );
        s.cross.push(cross);
        s.projected.push(b.transpose() * y);
        s.parts.push(j);
        s.labels.push(level[j].projector.label.clone());
        s.ranks.push(level[j].rank() as f64);
        s.spectral.push(DVector::from_vec(sp));
        s.canonical.push(ca);
    }
    s
}

/// Information-weighted combination over strata: `R X τ̂ = θ_R⁻¹ Σ_D γ_D⁻¹ R D y` with
/// `θ_R = Σ_D λ_DR / γ_D`.
fn combined_effects(st: &Strata, gamma: &[f64], chain: &ExperimentChain) -> (Vec<DVector<f64>>, Vec<f64>) {
    let treat = chain.pushed.last().unwrap();
    let mut est = Vec::with_capacity(treat.len());
    let mut theta = Vec::with_capacity(treat.len());
    for (ri, r) in treat.iter().enumerate() {
        let th: f64 = (0..st.parts.len()).map(|j| st.lambda[j][ri] / gamma[j]).sum();
        let mut acc = DVector::zeros(r.rank);
        for j in 0..st.parts.len() {
            if st.lambda[j][ri] > chain.options.tol {
                acc += &st.cross[j][ri] * &st.projected[j] / gamma[j];
            }
        }
        est.push(if th > 0.0 {
            r.basis() * acc / th
        } else {
            DVector::zeros(r.unit_count())
        });
        theta.push(th);
    }
    (est, theta)
}

/// Residual sums of squares and effective degrees of freedom per stratum.
fn stratum_updates(
    st: &Strata,
    gamma: &[f64],
    theta: &[f64],
    est: &[DVector<f64>],
    y: &DVector<f64>,
    chain: &ExperimentChain,
    d: &Decomposition,
) -> (Vec<f64>, Vec<f64>) {
    let p = chain.random_tiers();
    let treat = &chain.pushed[p];
    let fitted: DVector<f64> = est.iter().fold(DVector::zeros(y.len()), |a, e| a + e);
    let resid = y - fitted;
    let mut ss = Vec::new();
    let mut dfe = Vec::new();
    for j in 0..st.parts.len() {
        let b = d.levels[p - 1][st.parts[j]].projector.basis();
        ss.push((b.transpose() * &resid).norm_squared());
        let used: f64 = treat
            .iter()
            .enumerate()
            .filter(|(ri, _)| theta[*ri] > 0.0)
            .map(|(ri, r)| st.lambda[j][ri] * r.rank as f64 / (theta[ri] * gamma[j]))
            .sum();
        dfe.push(st.ranks[j] - used);
    }
    (ss, dfe)
}

fn effect_records(chain: &ExperimentChain, est: &[DVector<f64>], variance: &[Option<f64>]) -> Vec<EffectEstimate> {
    chain
        .pushed
        .last()
        .unwrap()
        .iter()
        .zip(est)
        .zip(variance)
        .map(|((r, e), v)| EffectEstimate {
            treatment: r.label.clone(),
            rank: r.rank,
            estimate: e.iter().copied().collect(),
            variance: *v,
            source: None,
        })
        .collect()
}

/// Combined intra- and inter-stratum estimation. With fixed components this is
/// generalized least squares; otherwise treatment and component updates
/// alternate until the stratum variances settle.
pub fn combine_information(
    y: &DVector<f64>,
    chain: &ExperimentChain,
    d: &Decomposition,
    table: &AnovaTable,
    mode: CombineMode,
) -> Result<FitResult> {
    let ms = project_mean_squares(y, d)?;
    let init = match mode {
        CombineMode::Fixed(comps) => {
            let fit = if d.applicability.kind == AnovaKind::NotApplicable {
                dense_gls(y, chain, &comps)?
            } else {
                let st = strata(y, chain, d, table);
                let gamma: Vec<f64> = st.spectral.iter().map(|v| dot_map(v, table, &comps)).collect();
                if let Some(j) = gamma.iter().position(|&g| g <= 0.0) {
                    return Err(Error::Estimation(format!(
                        "stratum {} has nonpositive variance {}",
                        st.labels[j], gamma[j]
                    )));
                }
                let (est, theta) = combined_effects(&st, &gamma, chain);
                let var: Vec<Option<f64>> = theta.iter().map(|&t| (t > 0.0).then(|| 1.0 / t)).collect();
                effect_records(chain, &est, &var)
            };
            let components = ComponentEstimates {
                spectral: table
                    .components
                    .iter()
                    .filter_map(|c| {
                        comps.get(&c.id).map(|&v| ComponentValue {
                            id: c.id,
                            symbol: c.spectral.clone(),
                            value: v,
                        })
                    })
                    .collect(),
                converged: true,
                ..Default::default()
            };
            return Ok(FitResult {
                method: Method::GlsKnownV,
                treatment_values: treatment_values(chain, &fit),
                effects: fit,
                mean_squares: ms,
                components,
            });
        }
        CombineMode::Estimate(init) => init,
    };
    if !d.anova_applicable() {
        return Err(Error::NotApplicable(
            "combined estimation needs every treatment-bearing part inside 𝓟*𝓠; use the GLS fit with given components"
                .into(),
        ));
    }
    let st = strata(y, chain, d, table);
    let start: ComponentMap = match init {
        Some(m) => m,
        None => {
            let a = anova_fit(y, chain, d, table)?;
            // Equate-EMS values where estimable, one elsewhere.
            let mut m = a.components.spectral_map();
            for c in &table.components {
                m.entry(c.id).or_insert(1.0);
            }
            m
        }
    };
    let n = y.len() as f64;
    let mean = y.mean();
    let floor = 1e-10 * (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).max(1e-300);
    let mut gamma: Vec<f64> = st
        .spectral
        .iter()
        .map(|v| {
            let g = dot_map(v, table, &start);
            if g > floor {
                g
            } else {
                v.sum().max(1.0)
            }
        })
        .collect();
    let mut system = EmsSystem::empty(table);
    let mut trajectory = vec![gamma.clone()];
    let mut converged = false;
    let mut iterations = 0;
    let mut solved = None;
    let mut last_df = vec![0.0; st.parts.len()];
    for it in 1..=MAX_ITER {
        iterations = it;
        let (est, theta) = combined_effects(&st, &gamma, chain);
        let (ss, dfe) = stratum_updates(&st, &gamma, &theta, &est, y, chain, d);
        system.rows = (0..st.parts.len())
            .filter(|&j| dfe[j] > 1e-9)
            .map(|j| EmsRow {
                label: st.labels[j].clone(),
                spectral: st.spectral[j].iter().copied().collect(),
                canonical: st.canonical[j].clone(),
                ss: ss[j],
                df: dfe[j],
            })
            .collect();
        let mut active = vec![true; system.components.len()];
        let s = solve_nonnegative(&system, &mut active);
        let next: Vec<f64> = (0..st.parts.len())
            .map(|j| {
                if s.estimable(&st.spectral[j]) {
                    let g = st.spectral[j].dot(&s.x_active(&active));
                    // Step halving guards against collapse onto zero.
                    g.max(0.5 * gamma[j]).max(floor)
                } else {
                    gamma[j]
                }
            })
            .collect();
        let change = next
            .iter()
            .zip(&gamma)
            .map(|(a, b)| (a - b).abs() / b.abs().max(floor))
            .fold(0.0, f64::max);
        gamma = next;
        trajectory.push(gamma.clone());
        last_df = dfe;
        solved = Some(s);
        if change < CONVERGENCE {
            converged = true;
            break;
        }
    }
    let (est, theta) = combined_effects(&st, &gamma, chain);
    let var: Vec<Option<f64>> = theta.iter().map(|&t| (t > 0.0).then(|| 1.0 / t)).collect();
    let effects = effect_records(chain, &est, &var);
    let mut components = solved.map(|s| s.estimates).unwrap_or_default();
    components.converged = converged;
    components.iterations = iterations;
    components.trajectory = trajectory;
    for (j, l) in st.labels.iter().enumerate() {
        components.effective_df.insert(l.clone(), last_df[j]);
        if last_df[j] < 1.0 && last_df[j] > 1e-9 {
            components.low_df.push(l.clone());
        }
    }
    Ok(FitResult {
        method: Method::Combined,
        treatment_values: treatment_values(chain, &effects),
        effects,
        mean_squares: ms,
        components,
    })
}

impl Solved {
    fn x_active(&self, active: &[bool]) -> DVector<f64> {
        DVector::from_iterator(
            self.x.len(),
            self.x.iter().zip(active).map(|(&v, &a)| if a { v } else { 0.0 }),
        )
    }
}

fn dot_map(v: &DVector<f64>, table: &AnovaTable, comps: &ComponentMap) -> f64 {
    table
        .components
        .iter()
        .enumerate()
        .map(|(j, c)| v[j] * comps.get(&c.id).copied().unwrap_or(0.0))
        .sum()
}

fn check_admissible(chain: &ExperimentChain, comps: &ComponentMap) -> Result<()> {
    for (id, &v) in comps {
        if id.tier == 0 && v <= 0.0 {
            return Err(Error::Estimation(format!(
                "first-tier component {:?} must be positive, got {}",
                id, v
            )));
        }
        if v < 0.0 {
            return Err(Error::Estimation(format!("component {:?} is negative ({})", id, v)));
        }
    }
    for idem in &chain.families[0] {
        let id = ComponentId {
            tier: 0,
            gf: idem.stratum,
        };
        if !comps.contains_key(&id) {
            return Err(Error::Estimation(format!(
                "no value for the first-tier component of {}",
                idem.label()
            )));
        }
    }
    Ok(())
}

/// Dense generalized least squares through a Cholesky factor of `V`.
fn dense_gls(y: &DVector<f64>, chain: &ExperimentChain, comps: &ComponentMap) -> Result<Vec<EffectEstimate>> {
    let v = covariance_matrix(chain, comps);
    let chol = v
        .cholesky()
        .ok_or_else(|| Error::Estimation("variance matrix is not positive definite".into()))?;
    let t = chain.treatment_tier().unit_count();
    let x = crate::structure::incidence_matrix(chain.treatment_assignment(), t);
    let vx = chol.solve(&x);
    let info = x.transpose() * &vx;
    let c = crate::linalg::sym_pinv(&info, 1e-12);
    let tau = &c * (vx.transpose() * y);
    let mu = &x * &tau;
    let cov = &x * &c * x.transpose();
    let treat = chain.pushed.last().unwrap();
    let est: Vec<DVector<f64>> = treat
        .iter()
        .map(|r| r.basis() * (r.basis().transpose() * &mu))
        .collect();
    let var: Vec<Option<f64>> = treat
        .iter()
        .map(|r| Some((r.basis().transpose() * &cov * r.basis()).trace() / r.rank as f64))
        .collect();
    Ok(effect_records(chain, &est, &var))
}

/// Closed-form `V⁻¹` for one or two random tiers:
/// `V⁻¹ = A⁻¹ − Σ_Q rη_Q (1 + rη_Q α_Q)⁻¹ A⁻¹ Q A⁻¹` with `A⁻¹ = Σ_P ξ_P⁻¹ P`.
pub fn closed_form_inverse(chain: &ExperimentChain, d: &Decomposition, comps: &ComponentMap) -> Result<DMatrix<f64>> {
    check_admissible(chain, comps)?;
    let p = chain.random_tiers();
    if p > 2 {
        return Err(Error::Unsupported(format!(
            "closed-form inverse for {} random tiers",
            p
        )));
    }
    let n = chain.unit_count();
    let xi = tier_values(chain, comps, 0);
    let mut a_inv = DMatrix::zeros(n, n);
    for (q, x) in chain.pushed[0].iter().zip(&xi) {
        a_inv += q.basis() * q.basis().transpose() / *x;
    }
    if p == 1 {
        return Ok(a_inv);
    }
    let eta = tier_values(chain, comps, 1);
    let alpha = alphas(d, &xi, chain.pushed[1].len());
    let r = chain.replication[1] as f64;
    let mut out = a_inv.clone();
    for (qi, q) in chain.pushed[1].iter().enumerate() {
        let c = r * eta[qi] / (1.0 + r * eta[qi] * alpha[qi]);
        if c != 0.0 {
            let aq = &a_inv * q.basis();
            out -= &aq * aq.transpose() * c;
        }
    }
    Ok(out)
}

fn tier_values(chain: &ExperimentChain, comps: &ComponentMap, tier: usize) -> Vec<f64> {
    chain.families[tier]
        .iter()
        .map(|i| comps.get(&ComponentId { tier, gf: i.stratum }).copied().unwrap_or(0.0))
        .collect()
}

/// `α_Q = Σ_P λ_PQ / ξ_P`.
fn alphas(d: &Decomposition, xi: &[f64], nq: usize) -> Vec<f64> {
    (0..nq)
        .map(|q| (0..xi.len()).map(|pi| d.pair_tables[0].get(pi, q).value / xi[pi]).sum())
        .collect()
}

/// Generalized least squares at given components using the closed-form
/// inverse; the inverse is checked against the dense `V`. Chains with more
/// than two random tiers fall back to a dense Cholesky solve.
pub fn gls_fit(
    y: &DVector<f64>,
    chain: &ExperimentChain,
    d: &Decomposition,
    table: &AnovaTable,
    comps: &ComponentMap,
    method: Method,
) -> Result<FitResult> {
    let ms = project_mean_squares(y, d)?;
    check_admissible(chain, comps)?;
    let p = chain.random_tiers();
    let effects = if p > 2 {
        dense_gls(y, chain, comps)?
    } else {
        let vinv = closed_form_inverse(chain, d, comps)?;
        let v = covariance_matrix(chain, comps);
        let n = v.nrows();
        let dev = max_abs(&(&v * &vinv - DMatrix::identity(n, n)));
        if dev > 1e-8 {
            return Err(Error::Estimation(format!(
                "closed-form inverse misses V by {:.2e}; the chain lacks the required orthogonality",
                dev
            )));
        }
        closed_form_effects(y, chain, d, comps)
    };
    let components = ComponentEstimates {
        spectral: table
            .components
            .iter()
            .filter_map(|c| {
                comps.get(&c.id).map(|&v| ComponentValue {
                    id: c.id,
                    symbol: c.spectral.clone(),
                    value: v,
                })
            })
            .collect(),
        converged: true,
        ..Default::default()
    };
    Ok(FitResult {
        method,
        treatment_values: treatment_values(chain, &effects),
        effects,
        mean_squares: ms,
        components,
    })
}

/// `θ_R = Σ_Q α_Q λ_QR (1 + rη_Q α_Q)⁻¹` and
/// `R X τ̂ = θ_R⁻¹ Σ_P Σ_Q ξ_P⁻¹ (1 + rη_Q α_Q)⁻¹ R Q P y`.
fn closed_form_effects(
    y: &DVector<f64>,
    chain: &ExperimentChain,
    d: &Decomposition,
    comps: &ComponentMap,
) -> Vec<EffectEstimate> {
    let p = chain.random_tiers();
    let xi = tier_values(chain, comps, 0);
    let treat = &chain.pushed[p];
    let py: Vec<DVector<f64>> = chain.pushed[0].iter().map(|q| q.basis().transpose() * y).collect();
    let mut est = Vec::new();
    let mut var = Vec::new();
    if p == 1 {
        for (ri, r) in treat.iter().enumerate() {
            let theta: f64 = (0..xi.len())
                .map(|pi| d.pair_tables[0].get(pi, ri).value / xi[pi])
                .sum();
            let mut acc = DVector::zeros(r.rank);
            for (pi, q) in chain.pushed[0].iter().enumerate() {
                acc += r.basis().transpose() * q.basis() * &py[pi] / xi[pi];
            }
            est.push(r.basis() * acc / theta);
            var.push(Some(1.0 / theta));
        }
        return effect_records(chain, &est, &var);
    }
    let eta = tier_values(chain, comps, 1);
    let qs = &chain.pushed[1];
    let alpha = alphas(d, &xi, qs.len());
    let r = chain.replication[1] as f64;
    let w: Vec<f64> = (0..qs.len()).map(|q| 1.0 / (1.0 + r * eta[q] * alpha[q])).collect();
    // Q P y summed over P with weights 1/ξ_P, in the basis of Q.
    let qpy: Vec<DVector<f64>> = qs
        .iter()
        .map(|q| {
            let mut acc = DVector::zeros(q.rank);
            for (pi, pp) in chain.pushed[0].iter().enumerate() {
                acc += q.basis().transpose() * pp.basis() * &py[pi] / xi[pi];
            }
            acc
        })
        .collect();
    for (ri, rr) in treat.iter().enumerate() {
        let theta: f64 = (0..qs.len())
            .map(|q| alpha[q] * d.pair_tables[1].get(q, ri).value * w[q])
            .sum();
        let mut acc = DVector::zeros(rr.rank);
        for (q, qq) in qs.iter().enumerate() {
            if d.pair_tables[1].get(q, ri).value > chain.options.tol {
                acc += rr.basis().transpose() * qq.basis() * &qpy[q] * w[q];
            }
        }
        est.push(rr.basis() * acc / theta);
        var.push(Some(1.0 / theta));
    }
    effect_records(chain, &est, &var)
}
