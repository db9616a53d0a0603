//! Factors, generalized factors and poset block structures on a single tier.

use crate::error::{Error, Result};
use crate::linalg::{max_abs, orthonormal_range};
use nalgebra::{DMatrix, DVector};
use std::collections::{BTreeSet, HashMap};

/// A factor on the units of a tier.
#[derive(Clone, Debug)]
pub struct Factor {
    pub name: String,
    pub abbrev: String,
    pub levels: usize,
    /// Indices of the factors this one is declared as nested in.
    pub nested_in: Vec<usize>,
    /// Pseudofactors take part in splits only, never in the strata.
    pub pseudo: bool,
    /// Level code of every unit; nested factors carry the code within their nest.
    pub codes: Vec<usize>,
}

/// Declaration of a factor before units are enumerated.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorDecl {
    pub name: String,
    pub abbrev: String,
    pub levels: usize,
    pub nested_in: Vec<String>,
}

impl FactorDecl {
    pub fn new(name: &str, abbrev: &str, levels: usize, nested_in: &[&str]) -> Self {
        FactorDecl {
            name: name.to_string(),
            abbrev: abbrev.to_string(),
            levels,
            nested_in: nested_in.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// The meet of a set of factors. The empty set is the mean factor.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GeneralizedFactor {
    pub factors: BTreeSet<usize>,
}

impl GeneralizedFactor {
    pub fn mean() -> Self {
        GeneralizedFactor {
            factors: BTreeSet::new(),
        }
    }

    pub fn of(factors: impl IntoIterator<Item = usize>) -> Self {
        GeneralizedFactor {
            factors: factors.into_iter().collect(),
        }
    }

    pub fn is_mean(&self) -> bool {
        self.factors.is_empty()
    }
}

/// An orthogonal idempotent held as an orthonormal basis of its range.
#[derive(Clone, Debug)]
pub struct Projector {
    pub label: String,
    pub rank: usize,
    basis: DMatrix<f64>,
}

impl Projector {
    /// Wrap an orthonormal basis; the caller guarantees `B'B = I`.
    pub fn from_basis(label: impl Into<String>, basis: DMatrix<f64>) -> Self {
        Projector {
            label: label.into(),
            rank: basis.ncols(),
            basis,
        }
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn unit_count(&self) -> usize {
        self.basis.nrows()
    }

    /// Dense `n × n` matrix `B B'`.
    pub fn matrix(&self) -> DMatrix<f64> {
        &self.basis * self.basis.transpose()
    }

    pub fn apply(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.basis * (self.basis.transpose() * y)
    }

    /// `y' M y`.
    pub fn quadratic(&self, y: &DVector<f64>) -> f64 {
        (self.basis.transpose() * y).norm_squared()
    }
}

/// 0/1 same-level indicator for a generalized factor.
#[derive(Clone, Debug)]
pub struct RelationshipMatrix {
    pub matrix: DMatrix<f64>,
    pub factor: GeneralizedFactor,
}

/// A stratum of a poset block structure.
#[derive(Clone, Debug)]
pub struct Stratum {
    pub factor: usize,
    pub projector: Projector,
}

/// A set of equireplicate generalized factors closed under the marginality order,
/// always containing the mean and the full factor.
#[derive(Clone, Debug)]
pub struct PosetBlockStructure {
    unit_count: usize,
    factors: Vec<Factor>,
    /// In a linear extension of the marginality order, mean first.
    generalized: Vec<GeneralizedFactor>,
    gf_codes: Vec<Vec<usize>>,
    gf_levels: Vec<usize>,
    /// `below[h][f]` is true iff `h < f`.
    below: Vec<Vec<bool>>,
    /// True when every structural factor came from a nesting declaration.
    declared: bool,
}

/// Contiguous codes of the meet of the given factors.
fn meet_codes(unit_count: usize, factors: &[Factor], set: &BTreeSet<usize>) -> (Vec<usize>, usize) {
    let mut index: HashMap<Vec<usize>, usize> = HashMap::new();
    let mut codes = Vec::with_capacity(unit_count);
    for u in 0..unit_count {
        let key: Vec<usize> = set.iter().map(|&f| factors[f].codes[u]).collect();
        let next = index.len();
        codes.push(*index.entry(key).or_insert(next));
    }
    let levels = index.len();
    (codes, levels)
}

/// True iff every class of `fine` lies inside a class of `coarse`.
fn refines(fine: &[usize], coarse: &[usize]) -> bool {
    let mut map: HashMap<usize, usize> = HashMap::new();
    fine.iter().zip(coarse).all(|(&f, &c)| *map.entry(f).or_insert(c) == c)
}

fn level_counts(codes: &[usize], levels: usize) -> Vec<usize> {
    let mut counts = vec![0; levels];
    for &c in codes {
        counts[c] += 1;
    }
    counts
}

/// `marginal(H, F)`: true iff `H`'s partition is strictly coarser than `F`'s.
pub fn marginal(h_codes: &[usize], f_codes: &[usize]) -> Result<bool> {
    if h_codes.len() != f_codes.len() {
        return Err(Error::Structure(format!(
            "unit counts differ ({} vs {})",
            h_codes.len(),
            f_codes.len()
        )));
    }
    let h_levels = h_codes.iter().copied().collect::<BTreeSet<_>>().len();
    let f_levels = f_codes.iter().copied().collect::<BTreeSet<_>>().len();
    Ok(refines(f_codes, h_codes) && h_levels < f_levels)
}

impl PosetBlockStructure {
    /// Enumerate units as the product of the declared factors' levels (standard
    /// order: lexicographic in declaration order) and take every ancestral set of
    /// factors as a generalized factor.
    pub fn from_declarations(decls: &[FactorDecl]) -> Result<Self> {
        if decls.is_empty() {
            return Err(Error::Structure("a tier needs at least one factor".into()));
        }
        let mut names: HashMap<&str, usize> = HashMap::new();
        let mut factors: Vec<Factor> = Vec::new();
        for (i, d) in decls.iter().enumerate() {
            if d.levels == 0 {
                return Err(Error::Structure(format!("factor {} has no levels", d.name)));
            }
            let mut nested = Vec::new();
            for n in &d.nested_in {
                let j = *names.get(n.as_str()).ok_or_else(|| {
                    Error::Structure(format!(
                        "factor {} is nested in {}, which is not declared before it",
                        d.name, n
                    ))
                })?;
                nested.push(j);
            }
            if names.insert(&d.name, i).is_some() {
                return Err(Error::Structure(format!("factor {} declared twice", d.name)));
            }
            factors.push(Factor {
                name: d.name.clone(),
                abbrev: d.abbrev.clone(),
                levels: d.levels,
                nested_in: nested,
                pseudo: false,
                codes: Vec::new(),
            });
        }
        let unit_count: usize = factors.iter().map(|f| f.levels).product();
        let mut stride = unit_count;
        for f in factors.iter_mut() {
            stride /= f.levels;
            let levels = f.levels;
            f.codes = (0..unit_count).map(|u| (u / stride) % levels).collect();
        }
        let ancestors = ancestor_sets(&factors);
        let m = factors.len();
        if m > 24 {
            return Err(Error::Structure(format!(
                "{} factors in one tier is more than supported (24)",
                m
            )));
        }
        let mut sets: BTreeSet<BTreeSet<usize>> = BTreeSet::new();
        for mask in 0u64..(1u64 << m) {
            let set: BTreeSet<usize> = (0..m).filter(|i| mask >> i & 1 == 1).collect();
            if set.iter().all(|&f| ancestors[f].is_subset(&set)) {
                sets.insert(set);
            }
        }
        let mut s = Self::build(unit_count, factors, sets.into_iter().collect(), true)?;
        s.declared = true;
        Ok(s)
    }

    /// Build from explicit factors and generalized factors; the mean and the full
    /// factor are inserted when absent.
    pub fn from_factors(unit_count: usize, factors: Vec<Factor>, generalized: Vec<BTreeSet<usize>>) -> Result<Self> {
        for f in &factors {
            if f.codes.len() != unit_count {
                return Err(Error::Structure(format!(
                    "factor {} has {} codes for {} units",
                    f.name,
                    f.codes.len(),
                    unit_count
                )));
            }
        }
        Self::build(unit_count, factors, generalized, false)
    }

    fn build(
        unit_count: usize,
        mut factors: Vec<Factor>,
        mut sets: Vec<BTreeSet<usize>>,
        declaration_order: bool,
    ) -> Result<Self> {
        if !sets.iter().any(|s| s.is_empty()) {
            sets.push(BTreeSet::new());
        }
        let has_full = sets.iter().any(|s| meet_codes(unit_count, &factors, s).1 == unit_count);
        if !has_full {
            factors.push(Factor {
                name: "Units".into(),
                abbrev: "U".into(),
                levels: unit_count,
                nested_in: Vec::new(),
                pseudo: false,
                codes: (0..unit_count).collect(),
            });
            sets.push(BTreeSet::from([factors.len() - 1]));
        }
        let mut entries: Vec<(BTreeSet<usize>, Vec<usize>, usize)> = sets
            .into_iter()
            .map(|s| {
                let (codes, levels) = meet_codes(unit_count, &factors, &s);
                (s, codes, levels)
            })
            .collect();
        // Linear extension: strictly coarser partitions have fewer levels.
        // Ancestral sets ordered by their bitmask over declaration order are also
        // a linear extension, and follow the declaration order of the factors.
        if declaration_order {
            let mask = |s: &BTreeSet<usize>| s.iter().map(|&f| 1u128 << f).sum::<u128>();
            entries.sort_by_key(|e| mask(&e.0));
        } else {
            entries.sort_by(|a, b| a.2.cmp(&b.2).then(a.0.len().cmp(&b.0.len())).then(a.0.cmp(&b.0)));
        }
        // A set that only adds one-level factors to a smaller set is the same
        // generalized factor; any other coincidence is an error.
        let mut kept: Vec<(BTreeSet<usize>, Vec<usize>, usize)> = Vec::with_capacity(entries.len());
        for e in entries {
            match kept.iter().find(|k| k.2 == e.2 && refines(&e.1, &k.1)) {
                Some(k) if k.0.is_subset(&e.0) => continue,
                Some(k) => {
                    return Err(Error::Structure(format!(
                        "generalized factors {:?} and {:?} induce the same partition",
                        e.0, k.0
                    )))
                }
                None => kept.push(e),
            }
        }
        let entries = kept;
        let n = entries.len();
        let mut below = vec![vec![false; n]; n];
        for h in 0..n {
            for f in 0..n {
                below[h][f] = entries[h].2 < entries[f].2 && refines(&entries[f].1, &entries[h].1);
            }
        }
        let s = PosetBlockStructure {
            unit_count,
            factors,
            generalized: entries
                .iter()
                .map(|e| GeneralizedFactor { factors: e.0.clone() })
                .collect(),
            gf_codes: entries.iter().map(|e| e.1.clone()).collect(),
            gf_levels: entries.iter().map(|e| e.2).collect(),
            below,
            declared: false,
        };
        for h in 0..n {
            let counts = level_counts(&s.gf_codes[h], s.gf_levels[h]);
            if counts.iter().any(|&c| c != counts[0]) {
                return Err(Error::Structure(format!(
                    "generalized factor {} is not equireplicate (class sizes {:?})",
                    s.label(&s.generalized[h]),
                    counts.iter().copied().collect::<BTreeSet<_>>()
                )));
            }
        }
        Ok(s)
    }

    /// Add a pseudofactor with explicit per-unit codes.
    pub fn add_pseudofactor(
        &mut self,
        name: &str,
        abbrev: &str,
        nested_in: &[usize],
        codes: Vec<usize>,
    ) -> Result<usize> {
        if codes.len() != self.unit_count {
            return Err(Error::Structure(format!(
                "pseudofactor {} has {} codes for {} units",
                name,
                codes.len(),
                self.unit_count
            )));
        }
        if self.factor_index(name).is_some() {
            return Err(Error::Structure(format!("factor {} declared twice", name)));
        }
        let levels = codes.iter().copied().max().map(|m| m + 1).unwrap_or(0);
        self.factors.push(Factor {
            name: name.to_string(),
            abbrev: abbrev.to_string(),
            levels,
            nested_in: nested_in.to_vec(),
            pseudo: true,
            codes,
        });
        Ok(self.factors.len() - 1)
    }

    pub fn unit_count(&self) -> usize {
        self.unit_count
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn generalized_factors(&self) -> &[GeneralizedFactor] {
        &self.generalized
    }

    pub fn is_declared(&self) -> bool {
        self.declared
    }

    /// Look up a factor by name or abbreviation.
    pub fn factor_index(&self, name: &str) -> Option<usize> {
        self.factors
            .iter()
            .position(|f| f.name == name)
            .or_else(|| self.factors.iter().position(|f| f.abbrev == name))
    }

    /// Index of the generalized factor with exactly this factor set.
    pub fn gf_index(&self, set: &BTreeSet<usize>) -> Option<usize> {
        self.generalized.iter().position(|g| &g.factors == set)
    }

    /// Index of the generalized factor whose partition equals the meet of `set`.
    pub fn gf_index_by_partition(&self, set: &BTreeSet<usize>) -> Option<usize> {
        let (codes, levels) = meet_codes(self.unit_count, &self.factors, set);
        (0..self.generalized.len()).find(|&h| self.gf_levels[h] == levels && refines(&codes, &self.gf_codes[h]))
    }

    pub fn mean_index(&self) -> usize {
        0
    }

    /// Codes of generalized factor `h`.
    pub fn codes(&self, h: usize) -> &[usize] {
        &self.gf_codes[h]
    }

    pub fn levels(&self, h: usize) -> usize {
        self.gf_levels[h]
    }

    /// Replication `k_H` of the levels of generalized factor `h`.
    pub fn replication(&self, h: usize) -> usize {
        self.unit_count / self.gf_levels[h]
    }

    /// `H < F` in the marginality order.
    pub fn is_marginal(&self, h: usize, f: usize) -> bool {
        self.below[h][f]
    }

    /// Meet codes of an arbitrary factor set (closed under declared nesting).
    pub fn meet(&self, set: &BTreeSet<usize>) -> (Vec<usize>, usize) {
        meet_codes(self.unit_count, &self.factors, &self.nest_closure(set))
    }

    /// Close a factor set under the declared nesting relation.
    pub fn nest_closure(&self, set: &BTreeSet<usize>) -> BTreeSet<usize> {
        let anc = ancestor_sets(&self.factors);
        let mut out = set.clone();
        for &f in set {
            out.extend(anc[f].iter().copied());
        }
        out
    }

    /// Ancestors (transitive nesting factors) of every factor.
    pub fn ancestors(&self) -> Vec<BTreeSet<usize>> {
        ancestor_sets(&self.factors)
    }

    /// Source label in the conventional rendering: a single crossed factor by its
    /// name, several by abbreviations joined with `#`, nesting factors in brackets.
    pub fn label_of_set(&self, set: &BTreeSet<usize>) -> String {
        if set.is_empty() {
            return "Mean".into();
        }
        let anc = ancestor_sets(&self.factors);
        let nest: BTreeSet<usize> = set.iter().flat_map(|&f| anc[f].iter().copied()).collect();
        let crossed: Vec<usize> = set.iter().copied().filter(|f| !nest.contains(f)).collect();
        let head = if crossed.len() == 1 {
            self.factors[crossed[0]].name.clone()
        } else {
            crossed
                .iter()
                .map(|&f| self.factors[f].abbrev.as_str())
                .collect::<Vec<_>>()
                .join("#")
        };
        if nest.is_empty() {
            head
        } else {
            let inner: Vec<&str> = nest.iter().map(|&f| self.factors[f].abbrev.as_str()).collect();
            format!("{}[{}]", head, inner.join("∧"))
        }
    }

    pub fn label(&self, gf: &GeneralizedFactor) -> String {
        self.label_of_set(&gf.factors)
    }

    /// Component subscript: abbreviations concatenated in declaration order, `0` for the mean.
    pub fn subscript(&self, h: usize) -> String {
        let gf = &self.generalized[h];
        if gf.is_mean() {
            "0".into()
        } else {
            gf.factors.iter().map(|&f| self.factors[f].abbrev.as_str()).collect()
        }
    }

    /// Incidence matrix of generalized factor `h` (units × levels).
    pub fn incidence(&self, h: usize) -> DMatrix<f64> {
        incidence_matrix(&self.gf_codes[h], self.gf_levels[h])
    }

    pub fn relationship_matrix(&self, h: usize) -> RelationshipMatrix {
        let codes = &self.gf_codes[h];
        let n = self.unit_count;
        RelationshipMatrix {
            matrix: DMatrix::from_fn(n, n, |u, v| if codes[u] == codes[v] { 1.0 } else { 0.0 }),
            factor: self.generalized[h].clone(),
        }
    }

    /// Stratum projectors `Q_H = k_H⁻¹ S_H − Σ_{F<H} Q_F` in the stored linear
    /// extension, each validated as an idempotent within `tol`.
    pub fn strata_projectors(&self, tol: f64) -> Result<Vec<Stratum>> {
        let n = self.unit_count;
        let mut dense: Vec<DMatrix<f64>> = Vec::with_capacity(self.generalized.len());
        let mut out = Vec::with_capacity(self.generalized.len());
        for h in 0..self.generalized.len() {
            let k = self.replication(h) as f64;
            let codes = &self.gf_codes[h];
            let mut q = DMatrix::from_fn(n, n, |u, v| if codes[u] == codes[v] { 1.0 / k } else { 0.0 });
            for f in 0..h {
                if self.below[f][h] {
                    q -= &dense[f];
                }
            }
            // range(Q_H) ⊆ range(X_H); take the basis from Q_H X_H.
            let mut qx = DMatrix::zeros(n, self.gf_levels[h]);
            for u in 0..n {
                let mut col = qx.column_mut(codes[u]);
                col += q.column(u);
            }
            let basis = orthonormal_range(&qx, 1e-8);
            let trace = q.trace();
            let label = self.label(&self.generalized[h]);
            if (trace - basis.ncols() as f64).abs() > 1e-6 {
                return Err(Error::Structure(format!(
                    "stratum {} has trace {} but rank {}; not a poset block structure",
                    label,
                    trace,
                    basis.ncols()
                )));
            }
            let err = max_abs(&(&basis * basis.transpose() - &q));
            if err > tol {
                return Err(Error::Structure(format!(
                    "stratum {} is not idempotent (deviation {:.2e}); not a poset block structure",
                    label, err
                )));
            }
            if basis.ncols() == 0 {
                return Err(Error::Structure(format!("stratum {} is empty", label)));
            }
            dense.push(q);
            out.push(Stratum {
                factor: h,
                projector: Projector::from_basis(label, basis),
            });
        }
        Ok(out)
    }

    /// `η_H = Σ_{F≥H} k_F ψ_F` for coefficients indexed like the generalized factors.
    pub fn spectral_from_canonical(&self, psi: &[f64]) -> Vec<f64> {
        let n = self.generalized.len();
        (0..n)
            .map(|h| {
                (0..n)
                    .filter(|&f| f == h || self.below[h][f])
                    .map(|f| self.replication(f) as f64 * psi[f])
                    .sum()
            })
            .collect()
    }

    /// Inverse of [`spectral_from_canonical`](Self::spectral_from_canonical) by back-substitution.
    pub fn canonical_from_spectral(&self, eta: &[f64]) -> Vec<f64> {
        let n = self.generalized.len();
        let mut psi = vec![0.0; n];
        for h in (0..n).rev() {
            let above: f64 = (h + 1..n)
                .filter(|&f| self.below[h][f])
                .map(|f| self.replication(f) as f64 * psi[f])
                .sum();
            psi[h] = (eta[h] - above) / self.replication(h) as f64;
        }
        psi
    }
}

fn ancestor_sets(factors: &[Factor]) -> Vec<BTreeSet<usize>> {
    let mut anc: Vec<BTreeSet<usize>> = factors.iter().map(|f| f.nested_in.iter().copied().collect()).collect();
    loop {
        let mut changed = false;
        for i in 0..anc.len() {
            let extra: BTreeSet<usize> = anc[i].iter().flat_map(|&j| anc[j].clone()).collect();
            let before = anc[i].len();
            anc[i].extend(extra);
            changed |= anc[i].len() != before;
        }
        if !changed {
            return anc;
        }
    }
}

/// Units × levels 0/1 matrix with one 1 per row.
pub fn incidence_matrix(codes: &[usize], levels: usize) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(codes.len(), levels);
    for (u, &c) in codes.iter().enumerate() {
        x[(u, c)] = 1.0;
    }
    x
}
