//! Property checks shared by the suites and the acceptance run. Each returns a
//! description of the first violation.

use super::*;
use multitier::linalg::{subspace_angle, symmetric_eigen};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};

pub const TOL: f64 = 1e-9;
pub const DESIGNS: [&str; 6] = ["meatloaves", "cotton", "sensory", "wheat", "small", "ldcvs"];

/// Largest deviation from idempotency, symmetry, orthogonality and completeness.
pub fn family_defect(bases: &[&DMatrix<f64>], n: usize) -> f64 {
    let mut worst: f64 = 0.0;
    let mut sum = DMatrix::<f64>::zeros(n, n);
    for (i, b) in bases.iter().enumerate() {
        let p = *b * b.transpose();
        worst = worst.max((&p * &p - &p).amax());
        worst = worst.max((&p - p.transpose()).amax());
        for c in &bases[i + 1..] {
            worst = worst.max((b.transpose() * *c).amax());
        }
        sum += p;
    }
    worst.max((sum - DMatrix::<f64>::identity(n, n)).amax())
}

pub fn check_family(what: &str, bases: &[&DMatrix<f64>], n: usize) -> Result<(), String> {
    let ranks: usize = bases.iter().map(|b| b.ncols()).sum();
    if ranks != n {
        return Err(format!("{}: ranks sum to {} of {}", what, ranks, n));
    }
    let e = family_defect(bases, n);
    if e >= TOL {
        return Err(format!("{}: projector defect {:.2e}", what, e));
    }
    Ok(())
}

/// Strata of every tier and every level of the decomposition, for all designs.
pub fn check_shipped_families() -> Result<(), String> {
    for name in DESIGNS {
        let l = load(name);
        for t in &l.chain.tiers {
            let s = &t.structure;
            let strata = s.strata_projectors(1e-10).map_err(|e| e.to_string())?;
            let bases: Vec<&DMatrix<f64>> = strata.iter().map(|q| q.projector.basis()).collect();
            check_family(&format!("{} / {}", name, t.name), &bases, s.unit_count())?;
        }
        for (lv, parts) in l.d.levels.iter().enumerate() {
            let bases: Vec<&DMatrix<f64>> = parts.iter().map(|p| p.projector.basis()).collect();
            check_family(&format!("{} level {}", name, lv), &bases, l.chain.unit_count())?;
        }
    }
    Ok(())
}

/// Eigenvalue clusters of a symmetric matrix as (value, orthonormal basis).
pub fn eigen_clusters(m: &DMatrix<f64>) -> Vec<(f64, DMatrix<f64>)> {
    let e = symmetric_eigen(m);
    let mut order: Vec<usize> = (0..m.nrows()).collect();
    order.sort_by(|&a, &b| e.eigenvalues[a].total_cmp(&e.eigenvalues[b]));
    let scale = e.eigenvalues.amax().max(1.0);
    let mut out: Vec<(f64, Vec<usize>)> = Vec::new();
    for i in order {
        let v = e.eigenvalues[i];
        match out.last_mut() {
            Some((w, idx)) if (v - *w).abs() < 1e-6 * scale => idx.push(i),
            _ => out.push((v, vec![i])),
        }
    }
    out.into_iter()
        .map(|(v, idx)| (v, e.eigenvectors.select_columns(&idx)))
        .collect()
}

/// Each eigenspace of `m` must be the span of the pieces with that Rayleigh
/// value; returns the largest principal angle seen.
pub fn check_eigenspaces(what: &str, m: &DMatrix<f64>, pieces: &[DMatrix<f64>]) -> Result<f64, String> {
    let scale = m.amax().max(1.0);
    let mut worst: f64 = 0.0;
    for (value, space) in eigen_clusters(m) {
        let matched: Vec<&DMatrix<f64>> = pieces
            .iter()
            .filter(|w| {
                let mu = (w.transpose() * m * *w).trace() / w.ncols() as f64;
                (mu - value).abs() < 1e-6 * scale
            })
            .collect();
        let cols: usize = matched.iter().map(|w| w.ncols()).sum();
        if cols != space.ncols() {
            return Err(format!(
                "{}: eigenvalue {} has multiplicity {}, pieces give {}",
                what,
                value,
                space.ncols(),
                cols
            ));
        }
        let joined = DMatrix::from_columns(
            &matched
                .iter()
                .flat_map(|w| w.column_iter().map(|c| c.into_owned()))
                .collect::<Vec<_>>(),
        );
        let angle = subspace_angle(&space, &joined);
        if angle >= 1e-7 {
            return Err(format!("{}: angle {:.2e} at eigenvalue {}", what, angle, value));
        }
        worst = worst.max(angle);
    }
    Ok(worst)
}

/// `Σ_h ψ_h S_h` over the generalized factors of one structure.
pub fn canonical_covariance(s: &PosetBlockStructure, psi: &[f64]) -> DMatrix<f64> {
    let n = s.unit_count();
    let mut v = DMatrix::zeros(n, n);
    for (h, w) in psi.iter().enumerate() {
        v += s.relationship_matrix(h).matrix * *w;
    }
    v
}

pub fn check_strata_eigenspaces(s: &PosetBlockStructure, what: &str, seed: u64) -> Result<f64, String> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let psi: Vec<f64> = (0..s.generalized_factors().len())
        .map(|_| rng.gen_range(0.5..3.0))
        .collect();
    let v = canonical_covariance(s, &psi);
    let strata = s.strata_projectors(1e-10).map_err(|e| e.to_string())?;
    let pieces: Vec<DMatrix<f64>> = strata.into_iter().map(|q| q.projector.basis().clone()).collect();
    check_eigenspaces(what, &v, &pieces)
}

/// Parts below each observational stratum `P` are the eigenspaces of `P V P`,
/// with `V` assembled from relationship matrices of every random tier.
pub fn check_chain_eigenspaces(l: &Loaded, seed: u64) -> Result<f64, String> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let comps = random_components(&l.table, &mut rng);
    let v = reference_covariance(&l.chain, &comps);
    let level = &l.d.levels[l.chain.random_tiers() - 1];
    let mut worst: f64 = 0.0;
    for (pi, p) in l.d.levels[0].iter().enumerate() {
        let bp = p.projector.basis();
        let m = bp.transpose() * &v * bp;
        let pieces: Vec<DMatrix<f64>> = level
            .iter()
            .filter(|q| q.parent == Some(pi) || (l.d.levels.len() == 1))
            .map(|q| bp.transpose() * q.projector.basis())
            .collect();
        worst = worst.max(check_eigenspaces(
            &format!("stratum {}", p.projector.label),
            &m,
            &pieces,
        )?);
    }
    Ok(worst)
}

/// Every structure and chain with at most 24 units.
pub fn check_small_eigenspaces() -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for name in DESIGNS {
        let l = load(name);
        for (k, t) in l.chain.tiers.iter().enumerate() {
            if t.structure.unit_count() <= 24 {
                worst = worst.max(check_strata_eigenspaces(
                    &t.structure,
                    &format!("{} / {}", name, t.name),
                    k as u64,
                )?);
            }
        }
        if l.chain.unit_count() <= 24 {
            for seed in 0..5 {
                worst = worst.max(check_chain_eigenspaces(&l, seed)?);
            }
        }
    }
    Ok(worst)
}

/// Distinct nonzero eigenvalue of `W' M W` with the matching subspace; `None`
/// when that is zero, an error when the pair is not balanced.
fn single_eigenvalue(w: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<Option<(f64, DMatrix<f64>)>, String> {
    let c = w.transpose() * m * w;
    let e = symmetric_eigen(&c);
    let nz: Vec<usize> = (0..e.eigenvalues.len()).filter(|&i| e.eigenvalues[i] > 1e-9).collect();
    let Some(&first) = nz.first() else {
        return Ok(None);
    };
    let v = e.eigenvalues[first];
    if let Some(&i) = nz.iter().find(|&&i| (e.eigenvalues[i] - v).abs() >= 1e-9) {
        return Err(format!("unbalanced pair: eigenvalues {} and {}", v, e.eigenvalues[i]));
    }
    Ok(Some((v, w * e.eigenvectors.select_columns(&nz))))
}

/// `λ_{P▷Q,R}` recomputed from eigenvalues against `λ_PQ λ_QR` from the
/// engine's tables, and `Σ_{P,Q} λ_{P▷Q,R} = 1` per treatment idempotent.
/// Returns the number of nonzero triples and the largest deviation.
pub fn check_product_law(name: &str) -> Result<(usize, f64), String> {
    let l = load(name);
    let ch = &l.chain;
    let (ps, qs, rs) = (&ch.pushed[0], &ch.pushed[1], &ch.pushed[2]);
    let mut sums = vec![0.0; rs.len()];
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for (pi, p) in ps.iter().enumerate() {
        for (qi, q) in qs.iter().enumerate() {
            let lam_pq = l.d.pair_tables[0].get(pi, qi).value;
            let Some((direct_pq, pq)) = single_eigenvalue(p.basis(), &q.matrix())? else {
                if lam_pq.abs() >= TOL {
                    return Err(format!("{}: λ({}, {}) should vanish", name, p.label, q.label));
                }
                continue;
            };
            worst = worst.max((direct_pq - lam_pq).abs());
            for (ri, r) in rs.iter().enumerate() {
                let lam_qr = l.d.pair_tables[1].get(qi, ri).value;
                let direct = single_eigenvalue(&pq, &r.matrix())?.map(|x| x.0).unwrap_or(0.0);
                let dev = (direct - lam_pq * lam_qr).abs();
                if dev >= TOL {
                    return Err(format!(
                        "{}: λ({}▷{}, {}) = {} but λ_PQ λ_QR = {}",
                        name,
                        p.label,
                        q.label,
                        r.label,
                        direct,
                        lam_pq * lam_qr
                    ));
                }
                worst = worst.max(dev);
                sums[ri] += direct;
                checked += usize::from(direct > 0.0);
            }
        }
    }
    for (ri, s) in sums.iter().enumerate() {
        if (s - 1.0).abs() >= TOL {
            return Err(format!("{}: efficiencies of {} sum to {}", name, rs[ri].label, s));
        }
        worst = worst.max((s - 1.0).abs());
    }
    Ok((checked, worst))
}
