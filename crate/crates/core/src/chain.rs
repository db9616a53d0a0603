//! Design maps between tiers, pseudofactor splits and the push-forward of
//! idempotents onto the observational units.

use crate::error::{Error, Result};
use crate::linalg::{
    gather_rows, max_abs, orthonormal_complement, orthonormal_range_against, psd_sqrt_factor, sym_pinv, DEFAULT_TOL,
};
use crate::rational::MAX_DENOMINATOR;
use crate::structure::{incidence_matrix, PosetBlockStructure, Projector};
use nalgebra::DMatrix;
use std::collections::BTreeSet;

/// Assignment of every source unit to one target unit.
#[derive(Clone, Debug)]
pub struct DesignMap {
    pub name: String,
    pub source_units: usize,
    pub target_units: usize,
    pub assignment: Vec<usize>,
}

/// Replication of a design map.
#[derive(Clone, Debug, PartialEq)]
pub enum Replication {
    Equal(usize),
    Unequal(Vec<usize>),
}

impl DesignMap {
    pub fn new(name: impl Into<String>, target_units: usize, assignment: Vec<usize>) -> Result<Self> {
        let name = name.into();
        if let Some(&bad) = assignment.iter().find(|&&t| t >= target_units) {
            return Err(Error::Chain(format!(
                "map {} assigns target {} outside 0..{}",
                name, bad, target_units
            )));
        }
        Ok(DesignMap {
            name,
            source_units: assignment.len(),
            target_units,
            assignment,
        })
    }

    pub fn identity(n: usize) -> Self {
        DesignMap {
            name: "identity".into(),
            source_units: n,
            target_units: n,
            assignment: (0..n).collect(),
        }
    }

    /// Diagonal of `D = X'X`.
    pub fn replication_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.target_units];
        for &t in &self.assignment {
            c[t] += 1;
        }
        c
    }

    pub fn replication(&self) -> Replication {
        let c = self.replication_counts();
        if c.iter().all(|&v| v == c[0]) && c[0] > 0 {
            Replication::Equal(c[0])
        } else {
            Replication::Unequal(c)
        }
    }

    /// Scalar `r` with `D = rI`, or an error naming the map.
    pub fn check_equireplicate(&self) -> Result<usize> {
        match self.replication() {
            Replication::Equal(r) => Ok(r),
            Replication::Unequal(c) => Err(Error::Chain(format!(
                "map {} is not equireplicate (replications {:?})",
                self.name,
                c.iter().copied().collect::<BTreeSet<_>>()
            ))),
        }
    }

    pub fn design_matrix(&self) -> DMatrix<f64> {
        incidence_matrix(&self.assignment, self.target_units)
    }
}

/// `Q^f = r⁻¹ X_f Q X_f'` for an equireplicate map.
pub fn push_idempotent(q: &Projector, m: &DesignMap, r: usize) -> Result<Projector> {
    let actual = m.check_equireplicate()?;
    if actual != r {
        return Err(Error::Chain(format!(
            "map {} has replication {} not {}",
            m.name, actual, r
        )));
    }
    if q.unit_count() != m.target_units {
        return Err(Error::Chain(format!(
            "idempotent {} lives on {} units but map {} targets {}",
            q.label,
            q.unit_count(),
            m.name,
            m.target_units
        )));
    }
    Ok(push_basis(q, &m.assignment, r))
}

fn push_basis(q: &Projector, index: &[usize], r: usize) -> Projector {
    let b = gather_rows(q.basis(), index) / (r as f64).sqrt();
    Projector::from_basis(q.label.clone(), b)
}

/// `R^h = X_h R (R D_h R)⁻ R X_h'` for each member of an orthogonal family on the
/// treatments, checked to be mutually orthogonal on the units.
pub fn treatment_idempotents(family: &[Projector], h: &DesignMap, tol: f64) -> Result<Vec<Projector>> {
    let d = h.replication_counts();
    let g = h.target_units;
    let mut out: Vec<Projector> = Vec::with_capacity(family.len());
    for r in family {
        if r.unit_count() != g {
            return Err(Error::Chain(format!(
                "treatment idempotent {} has {} rows, expected {}",
                r.label,
                r.unit_count(),
                g
            )));
        }
        let rm = r.matrix();
        let rdr = DMatrix::from_fn(g, g, |i, j| (0..g).map(|k| rm[(i, k)] * d[k] as f64 * rm[(k, j)]).sum());
        let core = &rm * sym_pinv(&rdr, 1e-9) * &rm;
        // X_h C X_h' is idempotent when C D C = C, so X_h W Λ^{1/2} is orthonormal.
        let factor = psd_sqrt_factor(&core, 1e-9);
        let basis = gather_rows(&factor, &h.assignment);
        if basis.ncols() == 0 {
            return Err(Error::Chain(format!(
                "treatment idempotent {} vanishes on the units",
                r.label
            )));
        }
        let gram_err = max_abs(&(basis.transpose() * &basis - DMatrix::identity(basis.ncols(), basis.ncols())));
        if gram_err > 1e3 * tol {
            return Err(Error::Chain(format!(
                "pushed treatment idempotent {} is not idempotent (deviation {:.2e})",
                r.label, gram_err
            )));
        }
        for prev in &out {
            let cross = max_abs(&(prev.basis().transpose() * &basis));
            if cross > 1e3 * tol {
                return Err(Error::Chain(format!(
                    "treatment decomposition not orthogonal on units: {} and {} (deviation {:.2e}); refine the treatment family",
                    prev.label, r.label, cross
                )));
            }
        }
        out.push(Projector::from_basis(r.label.clone(), basis));
    }
    Ok(out)
}

/// One piece of a split: the span of the listed generalized factors (each a set of
/// factor indices, closed under nesting) inside the parent stratum.
#[derive(Clone, Debug)]
pub struct PseudoTerm {
    pub label: Option<String>,
    pub sets: Vec<BTreeSet<usize>>,
}

/// User-declared refinement of one stratum by pseudofactor terms, fitted sequentially.
#[derive(Clone, Debug)]
pub struct SplitDecl {
    /// Generalized-factor index of the parent stratum.
    pub parent: usize,
    pub terms: Vec<PseudoTerm>,
    pub residual_label: Option<String>,
}

/// Result of a split: the sub-idempotents share the parent's variance component.
#[derive(Clone, Debug)]
pub struct PseudofactorSplit {
    pub parent_source: String,
    pub parent: usize,
    pub sub_idempotents: Vec<Projector>,
    pub shared_component: bool,
}

/// A tier: its block structure and any declared splits.
#[derive(Clone, Debug)]
pub struct Tier {
    pub name: String,
    pub structure: PosetBlockStructure,
    pub splits: Vec<SplitDecl>,
}

impl Tier {
    pub fn new(name: impl Into<String>, structure: PosetBlockStructure) -> Self {
        Tier {
            name: name.into(),
            structure,
            splits: Vec::new(),
        }
    }

    pub fn unit_count(&self) -> usize {
        self.structure.unit_count()
    }
}

/// A member of a tier's idempotent family (strata, with split strata replaced by
/// their pieces).
#[derive(Clone, Debug)]
pub struct Idempotent {
    pub projector: Projector,
    /// Generalized factor whose component this idempotent carries.
    pub stratum: usize,
    /// Set for pieces of a split stratum.
    pub pseudo: bool,
}

impl Idempotent {
    pub fn label(&self) -> &str {
        &self.projector.label
    }
}

/// Engine tolerances.
#[derive(Clone, Copy, Debug)]
pub struct Options {
    pub tol: f64,
    pub max_denominator: i64,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            tol: DEFAULT_TOL,
            max_denominator: MAX_DENOMINATOR,
        }
    }
}

impl Options {
    /// Defaults, with the tolerance overridable through `MULTITIER_TOL`.
    pub fn from_env() -> Self {
        let mut o = Options::default();
        if let Some(t) = std::env::var("MULTITIER_TOL").ok().and_then(|v| v.parse::<f64>().ok()) {
            if t > 0.0 {
                o.tol = t;
            }
        }
        o
    }
}

/// Split one stratum basis by sequential pseudo-terms.
pub fn split_stratum(
    structure: &PosetBlockStructure,
    parent_label: &str,
    parent_basis: &DMatrix<f64>,
    decl: &SplitDecl,
) -> Result<PseudofactorSplit> {
    let r = parent_basis.ncols();
    let mut taken = DMatrix::<f64>::zeros(r, 0);
    let mut subs = Vec::new();
    for term in &decl.terms {
        let label = match (&term.label, term.sets.as_slice()) {
            (Some(l), _) => l.clone(),
            (None, [one]) => structure.label_of_set(&structure.nest_closure(one)),
            (None, _) => {
                return Err(Error::Chain(format!(
                    "a pseudo-term of {} spanning several factors needs a label",
                    parent_label
                )))
            }
        };
        let mut cols: Vec<DMatrix<f64>> = Vec::new();
        for set in &term.sets {
            let (codes, levels) = structure.meet(set);
            cols.push(parent_basis.transpose() * incidence_matrix(&codes, levels));
        }
        let total: usize = cols.iter().map(|c| c.ncols()).sum();
        let mut c = DMatrix::zeros(r, total);
        let mut at = 0;
        for block in cols {
            c.view_mut((0, at), (r, block.ncols())).copy_from(&block);
            at += block.ncols();
        }
        let w = orthonormal_range_against(&c, Some(&taken), 1e-8);
        if w.ncols() == 0 {
            return Err(Error::Chain(format!(
                "pseudo-term {} adds nothing to {}",
                label, parent_label
            )));
        }
        subs.push(Projector::from_basis(label, parent_basis * &w));
        let mut grown = DMatrix::zeros(r, taken.ncols() + w.ncols());
        grown.view_mut((0, 0), (r, taken.ncols())).copy_from(&taken);
        grown.view_mut((0, taken.ncols()), (r, w.ncols())).copy_from(&w);
        taken = grown;
    }
    if taken.ncols() < r {
        let rest = orthonormal_complement(&taken);
        let label = decl.residual_label.clone().unwrap_or_else(|| {
            if subs.len() == 1 {
                format!("{}⊢{}", parent_label, subs[0].label)
            } else {
                format!("{}⊢", parent_label)
            }
        });
        subs.push(Projector::from_basis(label, parent_basis * rest));
    }
    Ok(PseudofactorSplit {
        parent_source: parent_label.to_string(),
        parent: decl.parent,
        sub_idempotents: subs,
        shared_component: true,
    })
}

/// A chain of randomizations from the observational tier (index 0) to the
/// treatments (last tier).
#[derive(Clone, Debug)]
pub struct ExperimentChain {
    pub tiers: Vec<Tier>,
    /// `maps[i]` sends units of tier `i` to units of tier `i + 1`.
    pub maps: Vec<DesignMap>,
    /// Cumulative replication `r_i` of the random tiers; `r_0 = 1`.
    pub replication: Vec<usize>,
    /// Composite assignment `s_i` from observational units to tier `i`.
    pub composite: Vec<Vec<usize>>,
    /// Idempotent family of each tier on its own units.
    pub families: Vec<Vec<Idempotent>>,
    /// The same families pushed onto the observational units.
    pub pushed: Vec<Vec<Projector>>,
    pub options: Options,
}

impl ExperimentChain {
    pub fn new(tiers: Vec<Tier>, maps: Vec<DesignMap>, options: Options) -> Result<Self> {
        if tiers.len() < 2 {
            return Err(Error::Chain("a chain needs units and treatments".into()));
        }
        if maps.len() != tiers.len() - 1 {
            return Err(Error::Chain(format!(
                "{} tiers need {} maps, found {}",
                tiers.len(),
                tiers.len() - 1,
                maps.len()
            )));
        }
        for (i, m) in maps.iter().enumerate() {
            if m.source_units != tiers[i].unit_count() || m.target_units != tiers[i + 1].unit_count() {
                return Err(Error::Chain(format!(
                    "map {} goes {} → {} units but tiers {} and {} have {} and {}",
                    m.name,
                    m.source_units,
                    m.target_units,
                    tiers[i].name,
                    tiers[i + 1].name,
                    tiers[i].unit_count(),
                    tiers[i + 1].unit_count()
                )));
            }
        }
        let p = tiers.len() - 1;
        let mut replication = vec![1usize];
        for m in maps.iter().take(p - 1) {
            let r = m.check_equireplicate()?;
            replication.push(replication.last().unwrap() * r);
        }
        let n = tiers[0].unit_count();
        let mut composite = vec![(0..n).collect::<Vec<usize>>()];
        for m in &maps {
            let prev = composite.last().unwrap();
            composite.push(prev.iter().map(|&u| m.assignment[u]).collect());
        }
        let mut families = Vec::with_capacity(tiers.len());
        for t in &tiers {
            families.push(tier_family(t, options.tol)?);
        }
        let mut pushed = Vec::with_capacity(tiers.len());
        for i in 0..p {
            pushed.push(
                families[i]
                    .iter()
                    .map(|q| push_basis(&q.projector, &composite[i], replication[i]))
                    .collect(),
            );
        }
        let treat: Vec<Projector> = families[p].iter().map(|q| q.projector.clone()).collect();
        let on_last = treatment_idempotents(&treat, &maps[p - 1], options.tol)?;
        pushed.push(
            on_last
                .iter()
                .map(|q| push_basis(q, &composite[p - 1], replication[p - 1]))
                .collect(),
        );
        Ok(ExperimentChain {
            tiers,
            maps,
            replication,
            composite,
            families,
            pushed,
            options,
        })
    }

    /// Number of random tiers `p`.
    pub fn random_tiers(&self) -> usize {
        self.tiers.len() - 1
    }

    pub fn unit_count(&self) -> usize {
        self.tiers[0].unit_count()
    }

    pub fn treatment_tier(&self) -> &Tier {
        self.tiers.last().unwrap()
    }

    /// Composite design matrix `X_s X_h` from observational units to treatments.
    pub fn treatment_assignment(&self) -> &[usize] {
        self.composite.last().unwrap()
    }

    /// Per-tier pseudofactor splits as declared.
    pub fn splits(&self, tier: usize) -> Result<Vec<PseudofactorSplit>> {
        let t = &self.tiers[tier];
        let strata = t.structure.strata_projectors(self.options.tol)?;
        t.splits
            .iter()
            .map(|d| {
                let s = strata.iter().find(|s| s.factor == d.parent).unwrap();
                split_stratum(&t.structure, &s.projector.label, s.projector.basis(), d)
            })
            .collect()
    }
}

fn tier_family(t: &Tier, tol: f64) -> Result<Vec<Idempotent>> {
    let strata = t.structure.strata_projectors(tol)?;
    let mut seen = BTreeSet::new();
    for d in &t.splits {
        if !seen.insert(d.parent) {
            return Err(Error::Chain(format!(
                "stratum {} of tier {} is split twice",
                t.structure.label(&t.structure.generalized_factors()[d.parent]),
                t.name
            )));
        }
    }
    let mut out = Vec::new();
    for s in strata {
        match t.splits.iter().find(|d| d.parent == s.factor) {
            None => out.push(Idempotent {
                projector: s.projector,
                stratum: s.factor,
                pseudo: false,
            }),
            Some(d) => {
                let split = split_stratum(&t.structure, &s.projector.label, s.projector.basis(), d)?;
                for q in split.sub_idempotents {
                    out.push(Idempotent {
                        projector: q,
                        stratum: s.factor,
                        pseudo: true,
                    });
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structure::FactorDecl;

    #[test]
    fn equireplicate_map() {
        let m = DesignMap::new("f", 4, vec![0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3]).unwrap();
        assert_eq!(m.check_equireplicate().unwrap(), 3);
        assert_eq!(DesignMap::identity(5).check_equireplicate().unwrap(), 1);
    }

    #[test]
    fn unequal_replication_names_map() {
        let m = DesignMap::new("plots->units", 2, vec![0, 0, 0, 0, 1, 1, 1, 1, 1, 1]).unwrap();
        let e = m.check_equireplicate().unwrap_err().to_string();
        assert!(e.contains("plots->units") && e.contains('4') && e.contains('6'));
    }

    #[test]
    fn unequal_treatment_replication() {
        // Two treatments replicated 1 and 3 times: mean and contrast are no longer
        // orthogonal on the units, but the whole treatment space pushes to X D⁻¹ X'.
        let s = PosetBlockStructure::from_declarations(&[FactorDecl::new("T", "T", 2, &[])]).unwrap();
        let fam: Vec<Projector> = s
            .strata_projectors(1e-9)
            .unwrap()
            .into_iter()
            .map(|q| q.projector)
            .collect();
        let h = DesignMap::new("h", 2, vec![0, 1, 1, 1]).unwrap();
        let e = treatment_idempotents(&fam, &h, 1e-9).unwrap_err().to_string();
        assert!(e.contains("not orthogonal"));
        let whole = Projector::from_basis("all", DMatrix::identity(2, 2));
        let r = treatment_idempotents(&[whole], &h, 1e-9).unwrap();
        assert_eq!(r[0].rank, 2);
        let d = h.design_matrix();
        let dinv = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 1.0 / 3.0]));
        let ir = &d * dinv * d.transpose();
        assert!(max_abs(&(r[0].matrix() - ir)) < 1e-12);
    }
}
