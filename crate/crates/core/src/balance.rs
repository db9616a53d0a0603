//! Efficiency factors, structure balance and the chained decomposition
//! `P ▷ Q ▷ R` of the observational space.

use crate::chain::ExperimentChain;
use crate::error::{Error, Result};
use crate::linalg::orthonormal_complement;
use crate::rational::Coef;
use crate::structure::Projector;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

/// First pair found to break balance, with the eigenvalues of `R Q R`
/// restricted to `R` (distinct values suggest a pseudofactor split).
#[derive(Clone, Debug, Serialize)]
pub struct BalanceFailure {
    pub upper: String,
    pub lower: String,
    /// Present when the failure is `R₁ Q R₂ ≠ 0` rather than `R Q R ≠ λR`.
    pub other_lower: Option<String>,
    pub deviation: f64,
    pub spectrum: Vec<f64>,
}

/// `λ_QR` for every upper `Q` and lower `R`, with `R Q R = λ_QR R`.
#[derive(Clone, Debug, Serialize)]
pub struct EfficiencyTable {
    pub upper: Vec<String>,
    pub lower: Vec<String>,
    /// `entries[q][r]`.
    pub entries: Vec<Vec<Coef>>,
    pub balanced: bool,
    pub failure: Option<BalanceFailure>,
}

impl EfficiencyTable {
    pub fn get(&self, upper: usize, lower: usize) -> &Coef {
        &self.entries[upper][lower]
    }

    pub fn lookup(&self, upper: &str, lower: &str) -> Option<&Coef> {
        let q = self.upper.iter().position(|l| l == upper)?;
        let r = self.lower.iter().position(|l| l == lower)?;
        Some(&self.entries[q][r])
    }
}

struct Local {
    /// `B_U' B_R` per lower idempotent.
    cross: Vec<DMatrix<f64>>,
    lambda: Vec<f64>,
    failure: Option<(usize, Option<usize>, f64, Vec<f64>)>,
}

fn local_balance(bu: &DMatrix<f64>, lower: &[Projector], tol: f64) -> Local {
    let cross: Vec<DMatrix<f64>> = lower.iter().map(|r| bu.transpose() * r.basis()).collect();
    let mut lambda = Vec::with_capacity(lower.len());
    let mut failure = None;
    for (i, c) in cross.iter().enumerate() {
        let g = c.transpose() * c;
        let k = g.nrows();
        let lam = if k == 0 { 0.0 } else { g.trace() / k as f64 };
        let mut dev = 0.0_f64;
        for a in 0..k {
            for b in 0..k {
                let target = if a == b { lam } else { 0.0 };
                dev = dev.max((g[(a, b)] - target).abs());
            }
        }
        if dev > tol && failure.is_none() {
            let mut spec: Vec<f64> = crate::linalg::symmetric_eigen(&g).eigenvalues.iter().copied().collect();
            spec.sort_by(|a, b| b.partial_cmp(a).unwrap());
            failure = Some((i, None, dev, spec));
        }
        lambda.push(lam.clamp(0.0, 1.0));
    }
    if failure.is_none() {
        'outer: for i in 0..cross.len() {
            for j in (i + 1)..cross.len() {
                let m = cross[i].transpose() * &cross[j];
                let dev = m.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
                if dev > tol {
                    let sv: Vec<f64> = m.svd(false, false).singular_values.iter().copied().collect();
                    failure = Some((i, Some(j), dev, sv));
                    break 'outer;
                }
            }
        }
    }
    Local { cross, lambda, failure }
}

fn table_from_locals(upper: &[Projector], lower: &[Projector], locals: &[Local], max_den: i64) -> EfficiencyTable {
    let entries = locals
        .iter()
        .map(|l| l.lambda.iter().map(|&v| Coef::with_bound(v, max_den)).collect())
        .collect();
    let failure = upper.iter().zip(locals).find_map(|(u, l)| {
        l.failure.as_ref().map(|(i, j, dev, spec)| BalanceFailure {
            upper: u.label.clone(),
            lower: lower[*i].label.clone(),
            other_lower: j.map(|j| lower[j].label.clone()),
            deviation: *dev,
            spectrum: spec.clone(),
        })
    });
    EfficiencyTable {
        upper: upper.iter().map(|u| u.label.clone()).collect(),
        lower: lower.iter().map(|r| r.label.clone()).collect(),
        entries,
        balanced: failure.is_none(),
        failure,
    }
}

/// Efficiency factors of every lower idempotent in every upper one, with a
/// residual check of `R Q R = λR` and `R₁ Q R₂ = 0`.
pub fn efficiency_factors(upper: &[Projector], lower: &[Projector], tol: f64, max_den: i64) -> EfficiencyTable {
    let locals: Vec<Local> = upper.par_iter().map(|u| local_balance(u.basis(), lower, tol)).collect();
    table_from_locals(upper, lower, &locals, max_den)
}

/// A piece of `Q` produced by [`refine`]: `Q ▷ R` when `lower` is set, else `Q ⊢ 𝓡`.
#[derive(Clone, Debug)]
pub struct RefinedPart {
    pub projector: Projector,
    pub upper: usize,
    pub lower: Option<usize>,
    pub eff: Coef,
}

fn split_one(
    bu: &DMatrix<f64>,
    local: &Local,
    lower: &[Projector],
    upper_label: &str,
    tol: f64,
    max_den: i64,
) -> (Vec<(usize, Coef, Projector)>, Option<Projector>) {
    let ru = bu.ncols();
    let mut children = Vec::new();
    let mut coords: Vec<DMatrix<f64>> = Vec::new();
    for (i, c) in local.cross.iter().enumerate() {
        let lam = local.lambda[i];
        if lam <= tol {
            continue;
        }
        let w = c / lam.sqrt();
        let label = format!("{} ▷ {}", upper_label, lower[i].label);
        children.push((i, Coef::with_bound(lam, max_den), Projector::from_basis(label, bu * &w)));
        coords.push(w);
    }
    let used: usize = coords.iter().map(|w| w.ncols()).sum();
    if used == 0 {
        return (children, None);
    }
    if used >= ru {
        return (children, None);
    }
    let mut all = DMatrix::zeros(ru, used);
    let mut at = 0;
    for w in coords {
        all.view_mut((0, at), (ru, w.ncols())).copy_from(&w);
        at += w.ncols();
    }
    let rest = orthonormal_complement(&all);
    let residual = Projector::from_basis(format!("{} ⊢", upper_label), bu * rest);
    (children, Some(residual))
}

/// `Q ▷ R = λ⁻¹ Q R Q` for nonzero `λ_QR` and the residual `Q ⊢ 𝓡` per upper `Q`.
pub fn refine(upper: &[Projector], lower: &[Projector], eff: &EfficiencyTable, tol: f64) -> Result<Vec<RefinedPart>> {
    if let Some(f) = &eff.failure {
        return Err(balance_error("refine", f));
    }
    let mut out = Vec::new();
    for (qi, q) in upper.iter().enumerate() {
        let local = local_balance(q.basis(), lower, tol);
        let (children, residual) = split_one(
            q.basis(),
            &local,
            lower,
            &q.label,
            tol,
            crate::rational::MAX_DENOMINATOR,
        );
        if children.is_empty() {
            out.push(RefinedPart {
                projector: q.clone(),
                upper: qi,
                lower: None,
                eff: Coef::new(0.0),
            });
            continue;
        }
        for (ri, e, p) in children {
            out.push(RefinedPart {
                projector: p,
                upper: qi,
                lower: Some(ri),
                eff: e,
            });
        }
        if let Some(p) = residual {
            out.push(RefinedPart {
                projector: p,
                upper: qi,
                lower: None,
                eff: Coef::new(0.0),
            });
        }
    }
    Ok(out)
}

fn balance_error(stage: &str, f: &BalanceFailure) -> Error {
    let detail = match &f.other_lower {
        None => format!(
            "{} is not uniformly confounded with {} (deviation {:.2e}, eigenvalues {}); declare a pseudofactor split",
            f.lower,
            f.upper,
            f.deviation,
            fmt_spectrum(&f.spectrum)
        ),
        Some(o) => format!(
            "{} and {} are not orthogonal within {} (deviation {:.2e}); declare a pseudofactor split",
            f.lower, o, f.upper, f.deviation
        ),
    };
    Error::Balance {
        stage: stage.to_string(),
        detail,
    }
}

fn fmt_spectrum(s: &[f64]) -> String {
    let mut v: Vec<String> = Vec::new();
    for x in s {
        let t = format!("{:.4}", x);
        if v.last() != Some(&t) {
            v.push(t);
        }
    }
    v.join(", ")
}

/// Provenance of a part at one tier.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Step {
    /// Member of the observational tier's family.
    Stratum(usize),
    /// Refined into the tier's idempotent `idem` with cumulative efficiency `eff`.
    Into { idem: usize, eff: Coef },
    /// Residual after refinement at this tier.
    Residual,
    /// Orthogonal to the whole tier (blank in tables).
    Absent,
}

impl Step {
    pub fn eff(&self) -> Option<&Coef> {
        match self {
            Step::Into { eff, .. } => Some(eff),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Part {
    pub projector: Projector,
    /// One step per tier up to this part's level.
    pub steps: Vec<Step>,
    /// Index of the part in the previous level.
    pub parent: Option<usize>,
}

impl Part {
    pub fn rank(&self) -> usize {
        self.projector.rank
    }

    /// Set when every refinement step so far has efficiency one (or is residual).
    pub fn orthogonal_so_far(&self) -> bool {
        self.steps.iter().all(|s| match s {
            Step::Into { eff, .. } => eff.is_one(),
            _ => true,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum AnovaKind {
    Full,
    Partial,
    NotApplicable,
}

/// Whether the anova estimators of the variance components are the REML ones.
#[derive(Clone, Debug, Serialize)]
pub struct Applicability {
    pub kind: AnovaKind,
    /// Idempotents of the last random tier lying wholly in one part above.
    pub q1: Vec<String>,
    /// Confounding map `c(Q)` for members of `q1`.
    pub c_map: Vec<(String, String)>,
    /// Level-(p−1) parts forming `𝓟*𝓠`.
    pub pstar_q: Vec<usize>,
    /// Treatment idempotents whose information is spread over several final parts.
    pub split_treatments: Vec<(String, Vec<usize>)>,
    /// Final parts descending from a level-(p−1) part outside `𝓟*𝓠`.
    pub outside_pstar: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Decomposition {
    /// `levels[k]` refines level `k − 1` by tier `k`; the last level is final.
    pub levels: Vec<Vec<Part>>,
    /// `stage_tables[k − 1]`: level `k − 1` parts against tier `k`.
    pub stage_tables: Vec<EfficiencyTable>,
    /// `pair_tables[k]`: tier `k` against tier `k + 1`, both on the observational units.
    pub pair_tables: Vec<EfficiencyTable>,
    pub applicability: Applicability,
}

impl Decomposition {
    pub fn parts(&self) -> &[Part] {
        self.levels.last().unwrap()
    }

    pub fn anova_applicable(&self) -> bool {
        self.applicability.kind != AnovaKind::NotApplicable
    }

    /// Level-(p−1) ancestor of a final part.
    pub fn penultimate_ancestor(&self, part: usize) -> usize {
        let last = self.levels.len() - 1;
        if last == 0 {
            return part;
        }
        self.levels[last][part].parent.unwrap()
    }
}

/// Full chained decomposition with the product rule for efficiencies checked at
/// every stage.
pub fn chain_decompose(chain: &ExperimentChain) -> Result<Decomposition> {
    let tol = chain.options.tol;
    let max_den = chain.options.max_denominator;
    let tiers = chain.tiers.len();
    let mut pair_tables = Vec::new();
    for k in 0..tiers - 1 {
        let t = efficiency_factors(&chain.pushed[k], &chain.pushed[k + 1], tol, max_den);
        pair_tables.push(t);
    }
    let mut levels: Vec<Vec<Part>> = vec![chain.pushed[0]
        .iter()
        .enumerate()
        .map(|(i, q)| Part {
            projector: q.clone(),
            steps: vec![Step::Stratum(i)],
            parent: None,
        })
        .collect()];
    let mut stage_tables = Vec::new();
    for k in 1..tiers {
        let prev = levels.last().unwrap();
        let lower = &chain.pushed[k];
        let uppers: Vec<Projector> = prev.iter().map(|p| p.projector.clone()).collect();
        let locals: Vec<Local> = prev
            .par_iter()
            .map(|u| local_balance(u.projector.basis(), lower, tol))
            .collect();
        let table = table_from_locals(&uppers, lower, &locals, max_den);
        if let Some(f) = &table.failure {
            return Err(balance_error(
                &format!("{} within {}", chain.tiers[k].name, chain.tiers[k - 1].name),
                f,
            ));
        }
        // Product rule: λ(U ▷ Q, R) = λ(U, Q) λ(Q, R).
        if k >= 2 {
            for (ui, u) in prev.iter().enumerate() {
                if let Some(Step::Into { idem, eff }) = u.steps.last() {
                    for ri in 0..lower.len() {
                        let expected = eff.value * pair_tables[k - 1].get(*idem, ri).value;
                        let measured = locals[ui].lambda[ri];
                        if (expected - measured).abs() > tol.max(1e-9) * 10.0 {
                            return Err(Error::Balance {
                                stage: format!("{} within {}", chain.tiers[k].name, chain.tiers[k - 1].name),
                                detail: format!(
                                    "efficiency of {} in {} is {:.6} but λ-product gives {:.6}",
                                    lower[ri].label, u.projector.label, measured, expected
                                ),
                            });
                        }
                    }
                }
            }
        }
        let mut next = Vec::new();
        for (ui, u) in prev.iter().enumerate() {
            let after_gap = matches!(u.steps.last(), Some(Step::Residual) | Some(Step::Absent));
            let (children, residual) = if after_gap {
                (Vec::new(), None)
            } else {
                split_one(
                    u.projector.basis(),
                    &locals[ui],
                    lower,
                    &u.projector.label,
                    tol,
                    max_den,
                )
            };
            if children.is_empty() {
                let mut steps = u.steps.clone();
                steps.push(Step::Absent);
                next.push(Part {
                    projector: u.projector.clone(),
                    steps,
                    parent: Some(ui),
                });
                continue;
            }
            for (ri, eff, p) in children {
                let mut steps = u.steps.clone();
                steps.push(Step::Into { idem: ri, eff });
                next.push(Part {
                    projector: p,
                    steps,
                    parent: Some(ui),
                });
            }
            if let Some(p) = residual {
                let mut steps = u.steps.clone();
                steps.push(Step::Residual);
                next.push(Part {
                    projector: p,
                    steps,
                    parent: Some(ui),
                });
            }
        }
        stage_tables.push(table);
        levels.push(next);
    }
    let applicability = assess(&levels, chain);
    Ok(Decomposition {
        levels,
        stage_tables,
        pair_tables,
        applicability,
    })
}

fn assess(levels: &[Vec<Part>], chain: &ExperimentChain) -> Applicability {
    let p = levels.len() - 1;
    let pen = &levels[p - 1];
    let pstar_q: Vec<usize> = (0..pen.len()).filter(|&i| pen[i].orthogonal_so_far()).collect();
    let mut q1 = Vec::new();
    let mut c_map = Vec::new();
    let last_random = &chain.families[p - 1];
    for &i in &pstar_q {
        let part = &pen[i];
        let idem = match part.steps.last() {
            Some(Step::Into { idem, .. }) | Some(Step::Stratum(idem)) => *idem,
            _ => continue,
        };
        let label = last_random[idem].label().to_string();
        let above = match part.parent {
            Some(pi) => levels[p - 2][pi].projector.label.clone(),
            None => label.clone(),
        };
        q1.push(label.clone());
        c_map.push((label, above));
    }
    let finals = &levels[p];
    let mut outside = Vec::new();
    let mut applicable = true;
    let mut carriers: Vec<Vec<usize>> = vec![Vec::new(); chain.families[p].len()];
    for (fi, f) in finals.iter().enumerate() {
        let anc = if p == 0 { fi } else { f.parent.unwrap() };
        let inside = pstar_q.contains(&anc);
        if !inside {
            outside.push(fi);
        }
        if let Some(Step::Into { idem, .. }) = f.steps.last() {
            carriers[*idem].push(fi);
            if !inside {
                applicable = false;
            }
        }
    }
    let split_treatments = carriers
        .into_iter()
        .enumerate()
        .filter(|(_, c)| c.len() > 1)
        .map(|(i, c)| (chain.families[p][i].label().to_string(), c))
        .collect();
    let kind = if !applicable {
        AnovaKind::NotApplicable
    } else if pstar_q.len() == pen.len() {
        AnovaKind::Full
    } else {
        AnovaKind::Partial
    };
    Applicability {
        kind,
        q1,
        c_map,
        pstar_q,
        split_treatments,
        outside_pstar: outside,
    }
}

/// Classification of an already-built decomposition.
pub fn anova_applicability(d: &Decomposition) -> &Applicability {
    &d.applicability
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs;
    use crate::structure::{FactorDecl, PosetBlockStructure};

    fn strata(decls: &[FactorDecl]) -> Vec<Projector> {
        PosetBlockStructure::from_declarations(decls)
            .unwrap()
            .strata_projectors(1e-9)
            .unwrap()
            .into_iter()
            .map(|s| s.projector)
            .collect()
    }

    #[test]
    fn orthogonal_upper_is_its_own_residual() {
        let rows = strata(&[
            FactorDecl::new("Rows", "R", 3, &[]),
            FactorDecl::new("Cols", "C", 3, &[]),
        ]);
        // Only the mean as lower: rows and columns are orthogonal to it.
        let mean = vec![rows[0].clone()];
        let t = efficiency_factors(&rows, &mean, 1e-9, 64);
        assert!(t.balanced);
        let parts = refine(&rows, &mean, &t, 1e-9).unwrap();
        assert_eq!(parts.len(), 4);
        assert!(parts[1].lower.is_none());
        assert!(max_abs(&(parts[1].projector.matrix() - rows[1].matrix())) < 1e-12);
    }

    #[test]
    fn efficiencies_sum_to_one_over_complete_upper_family() {
        let up = strata(&[FactorDecl::new("B", "B", 2, &[]), FactorDecl::new("P", "P", 3, &["B"])]);
        let t = efficiency_factors(&up, &up, 1e-9, 64);
        for r in 0..up.len() {
            let s: f64 = (0..up.len()).map(|q| t.get(q, r).value).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
