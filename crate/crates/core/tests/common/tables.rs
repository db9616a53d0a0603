//! Skeleton tables of the five worked designs, frozen as exact rationals.

use super::*;
use multitier::anova::{estimability_report, Basis};

/// Sources, per-tier d.f. (0 = blank), efficiencies of tiers 2 and 3 ("" = blank), E.M.S.
pub type Row = ([&'static str; 3], [usize; 3], [&'static str; 2], &'static str);

type Key = (Vec<Vec<String>>, Vec<usize>, Vec<Option<Q>>, Vec<(String, Q)>);

fn expected_rows(l: &Loaded, rows: &[Row]) -> Vec<Key> {
    let tiers = &l.chain.tiers;
    let tr = &tiers[2].structure;
    let mut out: Vec<Key> = rows
        .iter()
        .map(|(src, dfs, effs, ems)| {
            let s = (0..3)
                .map(|t| {
                    if src[t].is_empty() {
                        vec![]
                    } else {
                        norm_source(src[t], &tiers[t].structure)
                    }
                })
                .collect();
            let e = std::iter::once(None)
                .chain(effs.iter().map(|e| if e.is_empty() { None } else { Some(parse_q(e)) }))
                .collect();
            (s, dfs.to_vec(), e, parse_ems(ems, tr))
        })
        .collect();
    out.sort();
    out
}

fn actual_rows(l: &Loaded, basis: Basis) -> Vec<Key> {
    let tiers = &l.chain.tiers;
    let tr = &tiers[2].structure;
    let mut out: Vec<Key> = l
        .table
        .rows
        .iter()
        .map(|r| {
            let s = (0..3)
                .map(|t| {
                    if r.sources[t].is_empty() {
                        vec![]
                    } else {
                        norm_source(&r.sources[t], &tiers[t].structure)
                    }
                })
                .collect();
            let dfs = r.dfs.iter().map(|d| d.unwrap_or(0)).collect();
            (s, dfs, row_effs(r), row_ems(r, r.ems.terms(basis), tr))
        })
        .collect();
    out.sort();
    out
}

/// Every expected row present and nothing else.
pub fn check_table(name: &str, basis: Basis, rows: &[Row]) -> Result<(), String> {
    let l = load(name);
    let want = expected_rows(&l, rows);
    let got = actual_rows(&l, basis);
    if let Some(w) = want.iter().find(|w| !got.contains(w)) {
        return Err(format!("{}: missing row {:?}", name, w));
    }
    if want.len() != got.len() {
        return Err(format!("{}: {} rows, expected {}", name, got.len(), want.len()));
    }
    Ok(())
}

pub const MEATLOAVES: &[Row] = &[
    (["Mean", "Mean", "Mean"], [1, 1, 1], ["1", "1"], "ξ_0 + 12η_0 + q_0"),
    (["Sessions", "Blocks", ""], [2, 2, 0], ["1", ""], "ξ_S + 12η_B"),
    (["Panellists[S]", "", ""], [33, 0, 0], ["", ""], "ξ_SP"),
    (["Time-orders[S]", "", ""], [15, 0, 0], ["", ""], "ξ_ST"),
    (
        ["P#T[S]", "Meatloaves[B]", "Rosemary"],
        [165, 15, 1],
        ["1", "1"],
        "ξ_STP + 12η_BM + q(R)",
    ),
    (
        ["P#T[S]", "Meatloaves[B]", "Irradiation"],
        [165, 15, 2],
        ["1", "1"],
        "ξ_STP + 12η_BM + q(I)",
    ),
    (
        ["P#T[S]", "Meatloaves[B]", "R#I"],
        [165, 15, 2],
        ["1", "1"],
        "ξ_STP + 12η_BM + q(R#I)",
    ),
    (
        ["P#T[S]", "Meatloaves[B]", "Residual"],
        [165, 15, 10],
        ["1", ""],
        "ξ_STP + 12η_BM",
    ),
    (["P#T[S]", "Residual", ""], [165, 150, 0], ["", ""], "ξ_STP"),
];

pub const COTTON: &[Row] = &[
    (["Mean", "Mean", "Mean"], [1, 1, 1], ["1", "1"], "ξ_0 + η_0 + q_0"),
    (["Operatives", "F1", ""], [1, 1, 0], ["1", ""], "ξ_O + η_BPF"),
    (["Tests[O]", "Blocks", ""], [28, 2, 0], ["1", ""], "ξ_OT + η_B"),
    (
        ["Tests[O]", "Plots[B]", "K"],
        [28, 12, 4],
        ["1", "1"],
        "ξ_OT + η_BP + q(K)",
    ),
    (
        ["Tests[O]", "Plots[B]", "Residual"],
        [28, 12, 8],
        ["1", ""],
        "ξ_OT + η_BP",
    ),
    (
        ["Tests[O]", "Fibres[P∧B]⊢F1", ""],
        [28, 14, 0],
        ["1", ""],
        "ξ_OT + η_BPF",
    ),
];

pub const COTTON_CANONICAL: &[Row] = &[
    (
        ["Mean", "Mean", "Mean"],
        [1, 1, 1],
        ["1", "1"],
        "φ_OT + 15φ_O + 30φ_0 + ψ_BPF + 2ψ_BP + 10ψ_B + 30ψ_0 + q_0",
    ),
    (["Operatives", "F1", ""], [1, 1, 0], ["1", ""], "φ_OT + 15φ_O + ψ_BPF"),
    (
        ["Tests[O]", "Blocks", ""],
        [28, 2, 0],
        ["1", ""],
        "φ_OT + ψ_BPF + 2ψ_BP + 10ψ_B",
    ),
    (
        ["Tests[O]", "Plots[B]", "K"],
        [28, 12, 4],
        ["1", "1"],
        "φ_OT + ψ_BPF + 2ψ_BP + q(K)",
    ),
    (
        ["Tests[O]", "Plots[B]", "Residual"],
        [28, 12, 8],
        ["1", ""],
        "φ_OT + ψ_BPF + 2ψ_BP",
    ),
    (
        ["Tests[O]", "Fibres[P∧B]⊢F1", ""],
        [28, 14, 0],
        ["1", ""],
        "φ_OT + ψ_BPF",
    ),
];

pub const SENSORY: &[Row] = &[
    (["Mean", "Mean", "Mean"], [1, 1, 1], ["1", "1"], "ξ_0 + 12η_0 + q_0"),
    (["O", "Q", ""], [1, 1, 0], ["1", ""], "ξ_O + 12η_Q"),
    (["I[O]", "", ""], [4, 0, 0], ["", ""], "ξ_OI"),
    (
        ["S[O∧I]", "C[Q]", "T"],
        [18, 6, 3],
        ["1/3", "1/27"],
        "ξ_OIS + 1/3·12η_QC + 1/27q(T)",
    ),
    (
        ["S[O∧I]", "C[Q]", "Residual"],
        [18, 6, 3],
        ["1/3", ""],
        "ξ_OIS + 1/3·12η_QC",
    ),
    (["S[O∧I]", "Residual", ""], [18, 12, 0], ["", ""], "ξ_OIS"),
    (["J", "", ""], [5, 0, 0], ["", ""], "ξ_J"),
    (["O#J", "", ""], [5, 0, 0], ["", ""], "ξ_OJ"),
    (["I#J[O]", "R", ""], [20, 2, 0], ["1", ""], "ξ_OIJ + 12η_R"),
    (["I#J[O]", "R#Q", ""], [20, 2, 0], ["1", ""], "ξ_OIJ + 12η_QR"),
    (["I#J[O]", "Residual", ""], [20, 16, 0], ["", ""], "ξ_OIJ"),
    (
        ["S#J[O∧I]", "C[Q]", "T"],
        [90, 6, 3],
        ["2/3", "2/27"],
        "ξ_OISJ + 2/3·12η_QC + 2/27q(T)",
    ),
    (
        ["S#J[O∧I]", "C[Q]", "Residual"],
        [90, 6, 3],
        ["2/3", ""],
        "ξ_OISJ + 2/3·12η_QC",
    ),
    (
        ["S#J[O∧I]", "R#C[Q]", "T"],
        [90, 12, 3],
        ["1", "8/9"],
        "ξ_OISJ + 12η_QRC + 8/9q(T)",
    ),
    (
        ["S#J[O∧I]", "R#C[Q]", "Residual"],
        [90, 12, 9],
        ["1", ""],
        "ξ_OISJ + 12η_QRC",
    ),
    (["S#J[O∧I]", "Residual", ""], [90, 72, 0], ["", ""], "ξ_OISJ"),
    (
        ["P[O∧I∧S∧J]", "H[Q∧R∧C]", "M"],
        [432, 24, 1],
        ["1", "1"],
        "ξ_OISJP + 12η_QRCH + q(M)",
    ),
    (
        ["P[O∧I∧S∧J]", "H[Q∧R∧C]", "T#M"],
        [432, 24, 3],
        ["1", "1"],
        "ξ_OISJP + 12η_QRCH + q(T#M)",
    ),
    (
        ["P[O∧I∧S∧J]", "H[Q∧R∧C]", "Residual"],
        [432, 24, 20],
        ["1", ""],
        "ξ_OISJP + 12η_QRCH",
    ),
    (["P[O∧I∧S∧J]", "Residual", ""], [432, 408, 0], ["", ""], "ξ_OISJP"),
];

pub const WHEAT: &[Row] = &[
    (["Mean", "Mean", "Mean"], [1, 1, 1], ["1", "1"], "ξ_0 + η_0 + q_0"),
    (["Occasions", "S1", ""], [1, 1, 0], ["1", ""], "ξ_O + η_BPS"),
    (["Intervals[O]", "Blocks", ""], [6, 3, 0], ["1", ""], "ξ_OI + η_B"),
    (["Intervals[O]", "S1#B", ""], [6, 3, 0], ["1", ""], "ξ_OI + η_BPS"),
    (
        ["Runs[O∧I]", "P1[B]", "Lines_R"],
        [48, 24, 24],
        ["1", "1/4"],
        "ξ_OIR + η_BP + 1/4q(Lines_R)",
    ),
    (["Runs[O∧I]", "S1#P1[B]", ""], [48, 24, 0], ["1", ""], "ξ_OIR + η_BPS"),
    (
        ["Times[O∧I]", "P2[B]", "Lines_T"],
        [48, 24, 24],
        ["1", "1/4"],
        "ξ_OIT + η_BP + 1/4q(Lines_T)",
    ),
    (["Times[O∧I]", "S1#P2[B]", ""], [48, 24, 0], ["1", ""], "ξ_OIT + η_BPS"),
    (
        ["R#T[O∧I]", "Plots[B]⊢", "Lines_R"],
        [288, 144, 24],
        ["1", "3/4"],
        "ξ_OIRT + η_BP + 3/4q(Lines_R)",
    ),
    (
        ["R#T[O∧I]", "Plots[B]⊢", "Lines_T"],
        [288, 144, 24],
        ["1", "3/4"],
        "ξ_OIRT + η_BP + 3/4q(Lines_T)",
    ),
    (
        ["R#T[O∧I]", "Plots[B]⊢", "Residual"],
        [288, 144, 96],
        ["1", ""],
        "ξ_OIRT + η_BP",
    ),
    (
        ["R#T[O∧I]", "Samples[B∧P]⊢", ""],
        [288, 144, 0],
        ["1", ""],
        "ξ_OIRT + η_BPS",
    ),
];

pub const SMALL: &[Row] = &[
    (["Mean", "Mean", "Mean"], [1, 1, 1], ["1", "1"], "ξ_0 + 3η_0 + q_0"),
    (
        ["Blocks", "U1", "Treatments"],
        [3, 1, 1],
        ["1/9", "1/9"],
        "ξ_B + 1/9·3η_U + 1/9q(Treatments)",
    ),
    (["Blocks", "U⊢U1", ""], [3, 2, 0], ["5/9", ""], "ξ_B + 5/9·3η_U"),
    (
        ["Plots[B]", "U1", "Treatments"],
        [8, 1, 1],
        ["8/9", "8/9"],
        "ξ_BP + 8/9·3η_U + 8/9q(Treatments)",
    ),
    (["Plots[B]", "U⊢U1", ""], [8, 2, 0], ["4/9", ""], "ξ_BP + 4/9·3η_U"),
    (["Plots[B]", "Residual", ""], [8, 5, 0], ["", ""], "ξ_BP"),
];

fn sum_key(terms: &[(String, multitier::rational::Coef)]) -> Vec<(String, Q)> {
    let mut v: Vec<(String, Q)> = terms
        .iter()
        .map(|(s, c)| {
            let r = c.exact.unwrap();
            (norm_symbol(s), (*r.numer(), *r.denom()))
        })
        .collect();
    v.sort();
    v
}

fn expected_sum(terms: &[(&str, Q)]) -> Vec<(String, Q)> {
    let mut v: Vec<(String, Q)> = terms.iter().map(|(s, q)| (norm_symbol(s), *q)).collect();
    v.sort();
    v
}

fn symbols<S: AsRef<str>>(v: &[S]) -> Vec<String> {
    let mut v: Vec<String> = v.iter().map(|s| norm_symbol(s.as_ref())).collect();
    v.sort();
    v
}

fn same<T: PartialEq + std::fmt::Debug>(what: &str, got: T, want: T) -> Result<(), String> {
    if got == want {
        Ok(())
    } else {
        Err(format!("{}: got {:?}, expected {:?}", what, got, want))
    }
}

/// Session and block components are estimable only as `ξ_S + 12η_B`.
pub fn check_meatloaf_estimability() -> Result<(), String> {
    let l = load("meatloaves");
    let e = estimability_report(&l.table, &l.d, &l.chain);
    same(
        "estimable",
        symbols(&e.spectral.estimable),
        symbols(&["ξ_SP", "ξ_ST", "ξ_STP", "η_BM"]),
    )?;
    let sums: Vec<_> = e.spectral.confounded_sums.iter().map(|c| sum_key(&c.terms)).collect();
    same("sums", sums, vec![expected_sum(&[("ξ_S", (1, 1)), ("η_B", (12, 1))])])?;
    same("never", symbols(&e.spectral.never_estimable), symbols(&["ξ_0", "η_0"]))
}

/// No spectral component alone; canonical ones except `φ_OT + ψ_BPF` and the means.
pub fn check_cotton_estimability() -> Result<(), String> {
    let l = load("cotton");
    let e = estimability_report(&l.table, &l.d, &l.chain);
    same("spectral estimable", symbols(&e.spectral.estimable), vec![])?;
    same(
        "canonical estimable",
        symbols(&e.canonical.estimable),
        symbols(&["φ_O", "ψ_B", "ψ_BP"]),
    )?;
    let sums: Vec<_> = e.canonical.confounded_sums.iter().map(|c| sum_key(&c.terms)).collect();
    same("sums", sums, vec![expected_sum(&[("φ_OT", (1, 1)), ("ψ_BPF", (1, 1))])])?;
    same("never", symbols(&e.canonical.never_estimable), symbols(&["φ_0", "ψ_0"]))
}
