//! Skeleton analysis of variance: sources per tier, degrees of freedom,
//! efficiency factors and expected mean squares, plus estimability of the
//! variance components.

use crate::balance::{Decomposition, Step};
use crate::chain::ExperimentChain;
use crate::linalg::{numerical_rank, orthonormal_range, row_space};
use crate::rational::Coef;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Variance component of generalized factor `gf` in random tier `tier`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct ComponentId {
    pub tier: usize,
    pub gf: usize,
}

/// Whether a component is a stratum eigenvalue or a relationship-matrix coefficient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Basis {
    Spectral,
    Canonical,
}

const SPECTRAL: [&str; 4] = ["ξ", "η", "ζ", "κ"];
const CANONICAL: [&str; 4] = ["φ", "ψ", "ω", "χ"];
const ASCII: [(&str, &str); 8] = [
    ("xi", "ξ"),
    ("eta", "η"),
    ("zeta", "ζ"),
    ("kappa", "κ"),
    ("phi", "φ"),
    ("psi", "ψ"),
    ("omega", "ω"),
    ("chi", "χ"),
];

/// Greek letter for tier `tier` of a chain with `p` random tiers: a single random
/// tier uses the second letter (η or ψ).
pub fn letter(tier: usize, p: usize, basis: Basis) -> &'static str {
    let set = match basis {
        Basis::Spectral => &SPECTRAL,
        Basis::Canonical => &CANONICAL,
    };
    let i = if p == 1 { 1 } else { tier };
    set[i.min(set.len() - 1)]
}

#[derive(Clone, Debug, Serialize)]
pub struct Term {
    pub component: ComponentId,
    pub symbol: String,
    pub coef: Coef,
    /// Efficiency factor and replication whose product is `coef`, kept for display.
    #[serde(skip)]
    pub factored: Option<(Coef, usize)>,
}

impl Term {
    fn render(&self) -> String {
        match &self.factored {
            Some((eff, r)) if !eff.is_one() && eff.exact.is_some() => {
                let rep = if *r == 1 { String::new() } else { r.to_string() };
                format!("{}·{}{}", eff, rep, self.symbol)
            }
            _ => format!("{}{}", coef_prefix(&self.coef), self.symbol),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct QuadraticTerm {
    /// Index into the treatment tier's idempotent family.
    pub idempotent: usize,
    pub symbol: String,
    pub coef: Coef,
}

#[derive(Clone, Debug, Serialize)]
pub struct EmsExpression {
    pub spectral: Vec<Term>,
    pub canonical: Vec<Term>,
    pub quadratic: Vec<QuadraticTerm>,
}

impl EmsExpression {
    /// Expected mean square at the given spectral components and treatment
    /// quadratic forms `q(R) = ‖R X τ‖² / rank(R)`.
    pub fn evaluate(&self, components: &BTreeMap<ComponentId, f64>, q: &[f64]) -> f64 {
        let v: f64 = self
            .spectral
            .iter()
            .map(|t| t.coef.value * components.get(&t.component).copied().unwrap_or(0.0))
            .sum();
        v + self
            .quadratic
            .iter()
            .map(|t| t.coef.value * q[t.idempotent])
            .sum::<f64>()
    }

    /// Variance part only, evaluated in canonical components.
    pub fn evaluate_canonical(&self, components: &BTreeMap<ComponentId, f64>) -> f64 {
        self.canonical
            .iter()
            .map(|t| t.coef.value * components.get(&t.component).copied().unwrap_or(0.0))
            .sum()
    }

    pub fn terms(&self, basis: Basis) -> &[Term] {
        match basis {
            Basis::Spectral => &self.spectral,
            Basis::Canonical => &self.canonical,
        }
    }

    pub fn render(&self, basis: Basis) -> String {
        let mut parts: Vec<String> = self.terms(basis).iter().map(Term::render).collect();
        parts.extend(
            self.quadratic
                .iter()
                .map(|t| format!("{}{}", coef_prefix(&t.coef), t.symbol)),
        );
        parts.join(" + ")
    }
}

fn coef_prefix(c: &Coef) -> String {
    match c.exact {
        _ if c.is_one() => String::new(),
        Some(r) if r.is_integer() => c.to_string(),
        _ => format!("{}·", c),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AnovaRow {
    /// Source label per tier; empty where the part is orthogonal to that tier.
    pub sources: Vec<String>,
    /// Degrees of freedom of the source in each tier column.
    pub dfs: Vec<Option<usize>>,
    /// Cumulative efficiency per tier (none for the first tier).
    pub effs: Vec<Option<Coef>>,
    pub df: usize,
    pub ems: EmsExpression,
    /// Ancestor part index at each level of the decomposition.
    #[serde(skip)]
    pub ancestors: Vec<usize>,
    /// The row's penultimate-level part lies outside `𝓟*𝓠`.
    pub outside_pstar: bool,
}

impl AnovaRow {
    pub fn is_residual_type(&self) -> bool {
        self.ems.quadratic.is_empty()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ComponentInfo {
    pub id: ComponentId,
    pub spectral: String,
    pub canonical: String,
    /// Replication of the generalized factor within its own tier.
    pub replication: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct AnovaTable {
    pub tiers: Vec<String>,
    pub rows: Vec<AnovaRow>,
    pub components: Vec<ComponentInfo>,
    pub treatments: Vec<String>,
}

impl AnovaTable {
    pub fn component(&self, id: ComponentId) -> &ComponentInfo {
        self.components.iter().find(|c| c.id == id).unwrap()
    }

    /// Resolve a symbol such as `ξ_BP`, `xi_BP` or `psi_0`.
    pub fn parse_component(&self, name: &str) -> Option<(ComponentId, Basis)> {
        let mut s = name.trim().to_string();
        for (a, g) in ASCII {
            if let Some(rest) = s.strip_prefix(a) {
                if rest.starts_with('_') {
                    s = format!("{}{}", g, rest);
                    break;
                }
            }
        }
        self.components.iter().find_map(|c| {
            if c.spectral == s {
                Some((c.id, Basis::Spectral))
            } else if c.canonical == s {
                Some((c.id, Basis::Canonical))
            } else {
                None
            }
        })
    }

    pub fn random_tiers(&self) -> usize {
        self.tiers.len() - 1
    }

    /// Aligned plain-text table; upper-tier sources are printed once per group.
    pub fn render_text(&self, basis: Basis) -> String {
        let k = self.tiers.len();
        let show_eff: Vec<bool> = (0..k)
            .map(|t| {
                self.rows
                    .iter()
                    .any(|r| r.effs[t].map(|e| !e.is_one()).unwrap_or(false))
            })
            .collect();
        let mut cells: Vec<Vec<String>> = Vec::new();
        let mut header = Vec::new();
        for t in 0..k {
            if show_eff[t] {
                header.push("eff.".to_string());
            }
            header.push(self.tiers[t].clone());
            header.push("d.f.".to_string());
        }
        header.push("E.M.S.".to_string());
        cells.push(header);
        for (i, r) in self.rows.iter().enumerate() {
            let mut row = Vec::new();
            for t in 0..k {
                let new_group = i == 0 || self.rows[i - 1].ancestors[t] != r.ancestors[t];
                if show_eff[t] {
                    row.push(match (&r.effs[t], new_group) {
                        (Some(e), true) => e.to_string(),
                        _ => String::new(),
                    });
                }
                if new_group {
                    row.push(r.sources[t].clone());
                    row.push(r.dfs[t].map(|d| d.to_string()).unwrap_or_default());
                } else {
                    row.push(String::new());
                    row.push(String::new());
                }
            }
            row.push(r.ems.render(basis));
            cells.push(row);
        }
        let cols = cells[0].len();
        let widths: Vec<usize> = (0..cols)
            .map(|c| cells.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (ri, row) in cells.iter().enumerate() {
            let mut line = String::new();
            for (c, cell) in row.iter().enumerate() {
                let pad = widths[c] - cell.chars().count();
                if c + 1 == cols {
                    line.push_str(cell);
                } else if cell.chars().all(|ch| ch.is_ascii_digit() || ch == '/') && !cell.is_empty() {
                    let _ = write!(line, "{}{}  ", " ".repeat(pad), cell);
                } else {
                    let _ = write!(line, "{}{}  ", cell, " ".repeat(pad));
                }
            }
            out.push_str(line.trim_end());
            out.push('\n');
            if ri == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (cols - 1)));
                out.push('\n');
            }
        }
        out
    }

    /// One structured record per row.
    pub fn records(&self) -> Vec<serde_json::Value> {
        self.rows
            .iter()
            .map(|r| {
                serde_json::json!({
                    "record": "row",
                    "sources": r.sources,
                    "dfs": r.dfs,
                    "effs": r.effs,
                    "df": r.df,
                    "ems_spectral": r.ems.spectral.iter().map(|t| serde_json::json!({"component": t.symbol, "coef": t.coef})).collect::<Vec<_>>(),
                    "ems_canonical": r.ems.canonical.iter().map(|t| serde_json::json!({"component": t.symbol, "coef": t.coef})).collect::<Vec<_>>(),
                    "ems_quadratic": r.ems.quadratic.iter().map(|t| serde_json::json!({"term": t.symbol, "coef": t.coef})).collect::<Vec<_>>(),
                    "outside_pstar": r.outside_pstar,
                })
            })
            .collect()
    }
}

/// Ancestor indices of final part `i` at every level.
fn ancestry(d: &Decomposition, i: usize) -> Vec<usize> {
    let mut out = vec![i];
    let mut cur = i;
    for level in (1..d.levels.len()).rev() {
        cur = d.levels[level][cur].parent.unwrap();
        out.push(cur);
    }
    out.reverse();
    out
}

/// Skeleton anova with spectral and canonical expected mean squares.
pub fn skeleton_table(d: &Decomposition, chain: &ExperimentChain) -> AnovaTable {
    let p = chain.random_tiers();
    let max_den = chain.options.max_denominator;
    let mut components = Vec::new();
    for k in 0..p {
        let s = &chain.tiers[k].structure;
        for h in 0..s.generalized_factors().len() {
            let sub = s.subscript(h);
            components.push(ComponentInfo {
                id: ComponentId { tier: k, gf: h },
                spectral: format!("{}_{}", letter(k, p, Basis::Spectral), sub),
                canonical: format!("{}_{}", letter(k, p, Basis::Canonical), sub),
                replication: s.replication(h),
            });
        }
    }
    let symbol = |id: ComponentId, b: Basis| {
        let c = components.iter().find(|c| c.id == id).unwrap();
        match b {
            Basis::Spectral => c.spectral.clone(),
            Basis::Canonical => c.canonical.clone(),
        }
    };
    let treat = &chain.families[p];
    let mut rows = Vec::new();
    for (i, part) in d.parts().iter().enumerate() {
        let anc = ancestry(d, i);
        let mut spectral: Vec<Term> = Vec::new();
        let mut quadratic = Vec::new();
        let mut sources = Vec::new();
        let mut dfs = Vec::new();
        let mut effs = Vec::new();
        let mut live = true;
        for (k, step) in part.steps.iter().enumerate() {
            let rank_here = d.levels[k][anc[k]].rank();
            match step {
                Step::Stratum(idx) => {
                    let q = &chain.families[0][*idx];
                    sources.push(q.label().to_string());
                    dfs.push(Some(rank_here));
                    effs.push(None);
                    if p > 0 {
                        let id = ComponentId { tier: 0, gf: q.stratum };
                        spectral.push(Term {
                            component: id,
                            symbol: symbol(id, Basis::Spectral),
                            coef: Coef::with_bound(1.0, max_den),
                            factored: None,
                        });
                    }
                }
                Step::Into { idem, eff } => {
                    sources.push(chain.families[k][*idem].label().to_string());
                    dfs.push(Some(rank_here));
                    effs.push(Some(*eff));
                    if !live {
                        continue;
                    }
                    if k < p {
                        let id = ComponentId {
                            tier: k,
                            gf: chain.families[k][*idem].stratum,
                        };
                        let c = chain.replication[k] as f64 * eff.value;
                        spectral.push(Term {
                            component: id,
                            symbol: symbol(id, Basis::Spectral),
                            coef: Coef::with_bound(c, max_den),
                            factored: Some((*eff, chain.replication[k])),
                        });
                    } else {
                        let r = &treat[*idem];
                        let c = eff.value * r.projector.rank as f64 / part.rank() as f64;
                        let sym = if r.stratum == chain.tiers[p].structure.mean_index() && !r.pseudo {
                            "q_0".to_string()
                        } else {
                            format!("q({})", r.label())
                        };
                        quadratic.push(QuadraticTerm {
                            idempotent: *idem,
                            symbol: sym,
                            coef: Coef::with_bound(c, max_den),
                        });
                    }
                }
                Step::Residual => {
                    sources.push("Residual".to_string());
                    dfs.push(Some(rank_here));
                    effs.push(None);
                    live = false;
                }
                Step::Absent => {
                    sources.push(String::new());
                    dfs.push(None);
                    effs.push(None);
                    live = false;
                }
            }
        }
        let canonical = to_canonical(&spectral, chain, &components, max_den);
        let pen = d.penultimate_ancestor(i);
        rows.push(AnovaRow {
            sources,
            dfs,
            effs,
            df: part.rank(),
            ems: EmsExpression {
                spectral,
                canonical,
                quadratic,
            },
            ancestors: anc,
            outside_pstar: !d.applicability.pstar_q.contains(&pen),
        });
    }
    AnovaTable {
        tiers: chain.tiers.iter().map(|t| t.name.clone()).collect(),
        rows,
        components,
        treatments: treat.iter().map(|q| q.label().to_string()).collect(),
    }
}

/// `c η_H = Σ_{F ≥ H} c k_F ψ_F`, with `k_F` the replication of `F` in its own tier.
fn to_canonical(spectral: &[Term], chain: &ExperimentChain, comps: &[ComponentInfo], max_den: i64) -> Vec<Term> {
    let mut acc: BTreeMap<ComponentId, f64> = BTreeMap::new();
    for t in spectral {
        let s = &chain.tiers[t.component.tier].structure;
        for f in 0..s.generalized_factors().len() {
            if f == t.component.gf || s.is_marginal(t.component.gf, f) {
                *acc.entry(ComponentId {
                    tier: t.component.tier,
                    gf: f,
                })
                .or_insert(0.0) += t.coef.value * s.replication(f) as f64;
            }
        }
    }
    // Finest generalized factor first within a tier, as in the usual layout.
    let mut out: Vec<Term> = acc
        .into_iter()
        .filter(|(_, v)| v.abs() > 1e-12)
        .map(|(id, v)| Term {
            component: id,
            symbol: comps.iter().find(|c| c.id == id).unwrap().canonical.clone(),
            coef: Coef::with_bound(v, max_den),
            factored: None,
        })
        .collect();
    out.sort_by(|a, b| {
        a.component
            .tier
            .cmp(&b.component.tier)
            .then(b.component.gf.cmp(&a.component.gf))
    });
    out
}

/// Canonical form of the variance part of every row.
pub fn canonical_ems(table: &AnovaTable) -> Vec<Vec<Term>> {
    table.rows.iter().map(|r| r.ems.canonical.clone()).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct LinearCombination {
    pub terms: Vec<(String, Coef)>,
}

impl LinearCombination {
    pub fn render(&self) -> String {
        self.terms
            .iter()
            .map(|(s, c)| format!("{}{}", coef_prefix(c), s))
            .collect::<Vec<_>>()
            .join(" + ")
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Estimability {
    pub basis: Basis,
    pub estimable: Vec<String>,
    pub confounded_sums: Vec<LinearCombination>,
    pub never_estimable: Vec<String>,
}

/// Linear dependence among the variance parts of distinct rows in `𝓟*𝓠`.
#[derive(Clone, Debug, Serialize)]
pub struct Ldcvs {
    /// Table rows taking part in the relations.
    pub rows: Vec<usize>,
    /// Each relation lists `(row, coefficient)` with the first coefficient `+1`.
    pub relations: Vec<Vec<(usize, f64)>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EstimabilityReport {
    pub spectral: Estimability,
    pub canonical: Estimability,
    pub ldcvs: Option<Ldcvs>,
    /// Penultimate-level parts carrying treatment information but no residual.
    pub negative_risk: Vec<String>,
    /// Components whose relationship matrix lies in the treatment space.
    pub absorbed: Vec<String>,
}

fn coefficient_matrix(table: &AnovaTable, rows: &[usize], basis: Basis) -> DMatrix<f64> {
    let ids: Vec<ComponentId> = table.components.iter().map(|c| c.id).collect();
    let mut m = DMatrix::zeros(rows.len(), ids.len());
    for (i, &r) in rows.iter().enumerate() {
        for t in table.rows[r].ems.terms(basis) {
            let j = ids.iter().position(|&c| c == t.component).unwrap();
            m[(i, j)] = t.coef.value;
        }
    }
    m
}

fn analyse(table: &AnovaTable, rows: &[usize], basis: Basis, max_den: i64) -> Estimability {
    let names: Vec<&str> = table
        .components
        .iter()
        .map(|c| match basis {
            Basis::Spectral => c.spectral.as_str(),
            Basis::Canonical => c.canonical.as_str(),
        })
        .collect();
    let m = coefficient_matrix(table, rows, basis);
    let nc = names.len();
    let rs = row_space(&m, 1e-9);
    let mut estimable = Vec::new();
    let mut never = Vec::new();
    let mut est_idx = Vec::new();
    for j in 0..nc {
        if m.column(j).iter().all(|v| v.abs() < 1e-12) {
            never.push(names[j].to_string());
            continue;
        }
        let row = rs.row(j);
        if (1.0 - row.norm_squared()).abs() < 1e-9 {
            estimable.push(names[j].to_string());
            est_idx.push(j);
        }
    }
    let mut reduced: Vec<DVector<f64>> = Vec::new();
    for i in 0..m.nrows() {
        let mut v: DVector<f64> = m.row(i).transpose();
        for &j in &est_idx {
            v[j] = 0.0;
        }
        if v.iter().all(|x| x.abs() < 1e-12) {
            continue;
        }
        if !reduced.iter().any(|u| (u - &v).amax() < 1e-9) {
            reduced.push(v);
        }
    }
    let mut chosen: Vec<DVector<f64>> = Vec::new();
    for v in reduced {
        let mut trial = chosen.clone();
        trial.push(v.clone());
        let cols = DMatrix::from_columns(&trial);
        if numerical_rank(&cols, 1e-9) == trial.len() {
            chosen.push(v);
        }
    }
    for v in chosen.iter_mut() {
        let first = v.iter().copied().find(|x| x.abs() > 1e-12).unwrap();
        *v /= first;
    }
    let confounded_sums = chosen
        .iter()
        .map(|v| LinearCombination {
            terms: (0..nc)
                .filter(|&j| v[j].abs() > 1e-12)
                .map(|j| (names[j].to_string(), Coef::with_bound(v[j], max_den)))
                .collect(),
        })
        .collect();
    Estimability {
        basis,
        estimable,
        confounded_sums,
        never_estimable: never,
    }
}

/// Which components, or combinations of them, have unbiased anova estimators.
pub fn estimability_report(table: &AnovaTable, d: &Decomposition, chain: &ExperimentChain) -> EstimabilityReport {
    let max_den = chain.options.max_denominator;
    let residual_rows: Vec<usize> = (0..table.rows.len())
        .filter(|&r| table.rows[r].is_residual_type())
        .collect();
    let spectral = analyse(table, &residual_rows, Basis::Spectral, max_den);
    let canonical = analyse(table, &residual_rows, Basis::Canonical, max_den);

    // Dependence among distinct EMS vectors of residual rows inside 𝓟*𝓠.
    let mut inside: Vec<usize> = Vec::new();
    let m_all = coefficient_matrix(table, &residual_rows, Basis::Spectral);
    let mut seen: Vec<DVector<f64>> = Vec::new();
    for (i, &r) in residual_rows.iter().enumerate() {
        if table.rows[r].outside_pstar {
            continue;
        }
        let v: DVector<f64> = m_all.row(i).transpose();
        if !seen.iter().any(|u| (u - &v).amax() < 1e-9) {
            seen.push(v);
            inside.push(r);
        }
    }
    let ldcvs = if seen.is_empty() {
        None
    } else {
        let a = DMatrix::from_columns(&seen);
        // Left null space of the (rows × components) matrix = null space of `a`.
        let rank = numerical_rank(&a, 1e-9);
        if rank == seen.len() {
            None
        } else {
            let rs = row_space(&a, 1e-9);
            let null = if rs.ncols() == 0 {
                DMatrix::identity(seen.len(), seen.len())
            } else {
                let proj = DMatrix::identity(seen.len(), seen.len()) - &rs * rs.transpose();
                orthonormal_range(&proj, 1e-8)
            };
            let mut relations = Vec::new();
            let mut rows = std::collections::BTreeSet::new();
            for c in 0..null.ncols() {
                let v = null.column(c);
                let first = v.iter().copied().find(|x| x.abs() > 1e-8).unwrap();
                let rel: Vec<(usize, f64)> = v
                    .iter()
                    .enumerate()
                    .filter(|(_, x)| x.abs() > 1e-8)
                    .map(|(i, x)| {
                        let c = x / first;
                        (
                            inside[i],
                            crate::rational::snap(c, max_den, 1e-9)
                                .map(|r| *r.numer() as f64 / *r.denom() as f64)
                                .unwrap_or(c),
                        )
                    })
                    .collect();
                rows.extend(rel.iter().map(|(r, _)| *r));
                relations.push(rel);
            }
            Some(Ldcvs {
                rows: rows.into_iter().collect(),
                relations,
            })
        }
    };

    let p = d.levels.len() - 1;
    let mut negative_risk = Vec::new();
    {
        for (i, part) in d.levels[p - 1].iter().enumerate() {
            let kids: Vec<&Step> = d.levels[p]
                .iter()
                .filter(|c| c.parent == Some(i))
                .map(|c| c.steps.last().unwrap())
                .collect();
            let treated = kids.iter().any(|s| matches!(s, Step::Into { .. }));
            let has_res = kids.iter().any(|s| matches!(s, Step::Residual | Step::Absent));
            let mean_only = part
                .steps
                .iter()
                .all(|s| matches!(s, Step::Stratum(0) | Step::Into { idem: 0, .. }));
            if treated && !has_res && !mean_only {
                negative_risk.push(part.projector.label.clone());
            }
        }
    }

    // A relationship matrix lying in the treatment space absorbs its component.
    let n = chain.unit_count();
    let mut treat_cols = DMatrix::zeros(n, 0);
    for q in &chain.pushed[p] {
        let b = q.basis();
        let mut grown = DMatrix::zeros(n, treat_cols.ncols() + b.ncols());
        grown.view_mut((0, 0), (n, treat_cols.ncols())).copy_from(&treat_cols);
        grown.view_mut((0, treat_cols.ncols()), (n, b.ncols())).copy_from(b);
        treat_cols = grown;
    }
    let mut absorbed = Vec::new();
    for c in &table.components {
        let s = &chain.tiers[c.id.tier].structure;
        let codes: Vec<usize> = chain.composite[c.id.tier]
            .iter()
            .map(|&u| s.codes(c.id.gf)[u])
            .collect();
        let x = crate::structure::incidence_matrix(&codes, s.levels(c.id.gf));
        let resid = &x - &treat_cols * (treat_cols.transpose() * &x);
        if resid.amax() < 1e-8 {
            absorbed.push(c.spectral.clone());
        }
    }
    EstimabilityReport {
        spectral,
        canonical,
        ldcvs,
        negative_risk,
        absorbed,
    }
}
