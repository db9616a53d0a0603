#![allow(dead_code)]

pub mod checks;
pub mod tables;

use multitier::anova::{skeleton_table, AnovaRow, AnovaTable, Term};
use multitier::balance::{chain_decompose, Decomposition};
use multitier::chain::ExperimentChain;
use multitier::spec::parse_design_spec;
use multitier::structure::PosetBlockStructure;
use std::collections::BTreeMap;
use std::path::PathBuf;

pub struct Loaded {
    pub chain: ExperimentChain,
    pub d: Decomposition,
    pub table: AnovaTable,
}

pub fn design_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../designs")
        .join(format!("{}.spec", name))
}

pub fn load(name: &str) -> Loaded {
    let chain = parse_design_spec(&design_path(name)).expect("spec parses");
    let d = chain_decompose(&chain).expect("chain decomposes");
    let table = skeleton_table(&d, &chain);
    Loaded { chain, d, table }
}

/// Exact rational as (numerator, denominator).
pub type Q = (i64, i64);

pub fn parse_q(s: &str) -> Q {
    let mut acc: Q = (1, 1);
    for f in s.split('·').filter(|f| !f.is_empty()) {
        let (n, d) = match f.split_once('/') {
            Some((n, d)) => (n.parse::<i64>().unwrap(), d.parse::<i64>().unwrap()),
            None => (f.parse::<i64>().unwrap(), 1),
        };
        acc = (acc.0 * n, acc.1 * d);
    }
    let g = gcd(acc.0.abs(), acc.1);
    (acc.0 / g, acc.1 / g)
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Source label as a sorted list of factor abbreviations; full names are
/// mapped through the tier's factor list so that `Units⊢U1` equals `U⊢U1`.
pub fn norm_source(label: &str, s: &PosetBlockStructure) -> Vec<String> {
    let abbrev: BTreeMap<&str, &str> = s
        .factors()
        .iter()
        .map(|f| (f.name.as_str(), f.abbrev.as_str()))
        .collect();
    let mut toks: Vec<String> = label
        .split(|c: char| !(c.is_alphanumeric() || c == '_' || c == '-'))
        .filter(|t| !t.is_empty())
        .map(|t| abbrev.get(t).copied().unwrap_or(t).to_string())
        .collect();
    toks.sort();
    toks
}

/// Component symbol with its subscript letters sorted (`ξ_SPT` equals `ξ_STP`).
pub fn norm_symbol(sym: &str) -> String {
    match sym.split_once('_') {
        Some((g, sub)) if sub != "0" => {
            let mut c: Vec<char> = sub.chars().collect();
            c.sort();
            format!("{}_{}", g, c.into_iter().collect::<String>())
        }
        _ => sym.to_string(),
    }
}

/// Terms of an EMS written as `ξ_S + 1/3·12η_QC + 1/27q(T)`, normalized.
pub fn parse_ems(text: &str, treatments: &PosetBlockStructure) -> Vec<(String, Q)> {
    let mut out: Vec<(String, Q)> = text
        .split(" + ")
        .map(|t| {
            let start = t.find(|c: char| !(c.is_ascii_digit() || c == '/' || c == '·')).unwrap();
            let coef = if start == 0 { (1, 1) } else { parse_q(&t[..start]) };
            let sym = &t[start..];
            (norm_term(sym, treatments), coef)
        })
        .collect();
    out.sort();
    out
}

fn norm_term(sym: &str, treatments: &PosetBlockStructure) -> String {
    if let Some(inner) = sym.strip_prefix("q(").and_then(|s| s.strip_suffix(')')) {
        format!("q({})", norm_source(inner, treatments).join(","))
    } else {
        norm_symbol(sym)
    }
}

fn exact(c: &multitier::rational::Coef) -> Q {
    let r = c.exact.expect("coefficient snaps to a rational");
    (*r.numer(), *r.denom())
}

pub fn row_ems(row: &AnovaRow, terms: &[Term], treatments: &PosetBlockStructure) -> Vec<(String, Q)> {
    let mut out: Vec<(String, Q)> = terms.iter().map(|t| (norm_symbol(&t.symbol), exact(&t.coef))).collect();
    out.extend(
        row.ems
            .quadratic
            .iter()
            .map(|t| (norm_term(&t.symbol, treatments), exact(&t.coef))),
    );
    out.sort();
    out
}

pub fn row_effs(row: &AnovaRow) -> Vec<Option<Q>> {
    row.effs.iter().map(|e| e.as_ref().map(exact)).collect()
}

/// Deterministic pseudo-random response for tests that only need "some data".
pub fn test_response(n: usize, seed: u64) -> nalgebra::DVector<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    nalgebra::DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))
}

/// Random admissible spectral components: tier-0 values in `[0.5, 3)`, later
/// tiers in `[0, 2)`.
pub fn random_components<R: rand::Rng>(table: &AnovaTable, rng: &mut R) -> multitier::estimation::ComponentMap {
    table
        .components
        .iter()
        .map(|c| {
            (
                c.id,
                if c.id.tier == 0 {
                    rng.gen_range(0.5..3.0)
                } else {
                    rng.gen_range(0.0..2.0)
                },
            )
        })
        .collect()
}

/// `V` assembled from relationship matrices in canonical form, independently
/// of any projector: `Σ_k X_k (Σ_h ψ_h S_h) X_k'`.
pub fn reference_covariance(
    chain: &ExperimentChain,
    comps: &multitier::estimation::ComponentMap,
) -> nalgebra::DMatrix<f64> {
    use multitier::anova::ComponentId;
    let n = chain.unit_count();
    let mut v = nalgebra::DMatrix::zeros(n, n);
    for k in 0..chain.random_tiers() {
        let s = &chain.tiers[k].structure;
        let eta: Vec<f64> = (0..s.generalized_factors().len())
            .map(|gf| comps.get(&ComponentId { tier: k, gf }).copied().unwrap_or(0.0))
            .collect();
        let psi = s.canonical_from_spectral(&eta);
        let a = &chain.composite[k];
        for (h, w) in psi.iter().enumerate() {
            let codes = s.codes(h);
            for u in 0..n {
                for t in 0..n {
                    if codes[a[u]] == codes[a[t]] {
                        v[(u, t)] += w;
                    }
                }
            }
        }
    }
    v
}

/// One draw `X τ + L ε` with `L L' = V`.
pub fn sample_response<R: rand::Rng>(
    chain: &ExperimentChain,
    v: &nalgebra::DMatrix<f64>,
    tau: &[f64],
    rng: &mut R,
) -> nalgebra::DVector<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let l = v.clone().cholesky().expect("V positive definite").l();
    let e = nalgebra::DVector::from_fn(v.nrows(), |_, _| StandardNormal.sample(rng));
    multitier::estimation::treatment_vector(chain, tau).unwrap() + l * e
}
