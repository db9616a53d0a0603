mod common;

use common::*;
use multitier::anova::{estimability_report, ComponentId};
use multitier::estimation::*;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn id(l: &Loaded, sym: &str) -> ComponentId {
    l.table.parse_component(sym).unwrap().0
}

fn max_diff(a: &FitResult, b: &FitResult) -> f64 {
    a.treatment_values
        .iter()
        .zip(&b.treatment_values)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn closed_form_inverse_matches_reference_covariance() {
    let l = load("small");
    let n = l.chain.unit_count();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..100 {
        let comps = random_components(&l.table, &mut rng);
        let vinv = closed_form_inverse(&l.chain, &l.d, &comps).unwrap();
        let v = reference_covariance(&l.chain, &comps);
        let dev = (&vinv * &v - DMatrix::<f64>::identity(n, n)).amax();
        assert!(dev < 1e-8, "trial {}: |V⁻¹V − I| = {:.2e}", trial, dev);
    }
}

#[test]
fn reference_covariance_agrees_with_engine() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for name in ["small", "cotton", "ldcvs"] {
        let l = load(name);
        let comps = random_components(&l.table, &mut rng);
        let dev = (covariance_matrix(&l.chain, &comps) - reference_covariance(&l.chain, &comps)).amax();
        assert!(dev < 1e-10, "{}: {:.2e}", name, dev);
    }
}

/// Closed-form GLS against combined estimation with the components held at
/// their true values (a dense solve on chains where the anova does not apply).
#[test]
fn gls_equals_combined_estimate_at_true_components() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for name in ["small", "meatloaves", "cotton", "wheat", "sensory"] {
        let l = load(name);
        let comps = random_components(&l.table, &mut rng);
        let v = reference_covariance(&l.chain, &comps);
        let tau: Vec<f64> = (0..l.chain.treatment_tier().unit_count()).map(|i| i as f64).collect();
        let y = sample_response(&l.chain, &v, &tau, &mut rng);
        let g = gls_fit(&y, &l.chain, &l.d, &l.table, &comps, Method::GlsKnownV).unwrap();
        let c = combine_information(&y, &l.chain, &l.d, &l.table, CombineMode::Fixed(comps.clone())).unwrap();
        assert!(max_diff(&g, &c) < 1e-8, "{}: {:.2e}", name, max_diff(&g, &c));
    }
}

/// Plain GLS on a dense `V`, solved in the test.
#[test]
fn gls_matches_textbook_formula() {
    let l = load("small");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let comps = random_components(&l.table, &mut rng);
    let v = reference_covariance(&l.chain, &comps);
    let y = sample_response(&l.chain, &v, &[1.0, 3.0], &mut rng);
    let a = l.chain.treatment_assignment();
    let x = DMatrix::from_fn(a.len(), 2, |u, j| if a[u] == j { 1.0 } else { 0.0 });
    let vi = v.clone().try_inverse().unwrap();
    let xtv = x.transpose() * &vi;
    let tau = (&xtv * &x).try_inverse().unwrap() * (xtv * &y);
    let g = gls_fit(&y, &l.chain, &l.d, &l.table, &comps, Method::GlsKnownV).unwrap();
    for j in 0..2 {
        assert!((g.treatment_values[j] - tau[j]).abs() < 1e-9);
    }
}

#[test]
fn sums_of_squares_are_complete() {
    let l = load("small");
    let y = test_response(l.chain.unit_count(), 5);
    let ms = project_mean_squares(&y, &l.d).unwrap();
    let total: f64 = ms.iter().map(|m| m.ss).sum();
    assert!((total - y.norm_squared()).abs() < 1e-9 * y.norm_squared());
    let c = DVector::from_element(l.chain.unit_count(), 2.0);
    let ms = project_mean_squares(&c, &l.d).unwrap();
    for m in &ms {
        let want = if m.source.starts_with("Mean") { 4.0 * 12.0 } else { 0.0 };
        assert!((m.ss - want).abs() < 1e-9, "{}: {}", m.source, m.ss);
    }
}

#[test]
fn within_blocks_estimate_variance() {
    let l = load("small");
    let row = l
        .table
        .rows
        .iter()
        .position(|r| r.sources[0] == "Plots[B]" && !r.ems.quadratic.is_empty())
        .unwrap();
    let mut comps = ComponentMap::new();
    for c in &l.table.components {
        comps.insert(c.id, 1.0);
    }
    comps.insert(id(&l, "ξ_BP"), 2.0);
    comps.insert(id(&l, "η_U"), 0.75);
    let tau = [1.5, -0.5];
    let y = treatment_vector(&l.chain, &tau).unwrap();
    let e = stratum_estimate(&y, &l.chain, &l.d, &l.table, row, Some(&comps)).unwrap();
    assert!((e.efficiency - 8.0 / 9.0).abs() < 1e-12);
    assert!((e.variance.unwrap() - (2.0 + 8.0 / 3.0 * 0.75) / (8.0 / 9.0)).abs() < 1e-12);
    // Noise-free data: the estimate is R X τ itself, a contrast of ±1.
    let a = l.chain.treatment_assignment();
    for (u, &t) in a.iter().enumerate() {
        assert!((e.estimate[u] - if t == 0 { 1.0 } else { -1.0 }).abs() < 1e-12);
    }
}

#[test]
fn orthogonal_anova_estimates_are_projections() {
    let l = load("meatloaves");
    let y = test_response(l.chain.unit_count(), 6);
    let fit = anova_fit(&y, &l.chain, &l.d, &l.table).unwrap();
    let p = l.chain.random_tiers();
    for (e, r) in fit.effects.iter().zip(&l.chain.pushed[p]) {
        let ry = r.apply(&y);
        let dev = e
            .estimate
            .iter()
            .zip(ry.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dev < 1e-10, "{}: {:.2e}", e.treatment, dev);
    }
}

/// Data whose 10-d.f. residual mean square is below the 150-d.f. one.
fn engineered_meatloaves() -> (Loaded, DVector<f64>, usize, usize) {
    let l = load("meatloaves");
    let y0 = test_response(l.chain.unit_count(), 7);
    let small = l.table.rows.iter().position(|r| r.df == 10).unwrap();
    let big = l.table.rows.iter().position(|r| r.df == 150).unwrap();
    let m = &l.d.parts()[small].projector;
    let y = &y0 - m.apply(&y0) * 0.8;
    (l, y, small, big)
}

#[test]
fn negative_component_is_zeroed_and_residuals_pooled() {
    let (l, y, small, big) = engineered_meatloaves();
    let ms = project_mean_squares(&y, &l.d).unwrap();
    assert!(ms[small].ms < ms[big].ms);
    let fit = anova_fit(&y, &l.chain, &l.d, &l.table).unwrap();
    let eta_bm = id(&l, "η_BM");
    assert!(fit.components.constrained_zero.contains(&eta_bm));
    assert_eq!(fit.components.get(eta_bm), Some(0.0));
    let pooled = (ms[small].ss + ms[big].ss) / 160.0;
    let got = fit.components.get(id(&l, "ξ_SPT")).unwrap();
    assert!(
        (got - pooled).abs() <= 4.0 * f64::EPSILON * pooled,
        "{} vs {}",
        got,
        pooled
    );
}

#[test]
fn positive_components_are_left_alone() {
    let l = load("meatloaves");
    let y = test_response(l.chain.unit_count(), 8);
    let m = &l.d.parts()[l.table.rows.iter().position(|r| r.df == 10).unwrap()].projector;
    let y = &y + m.apply(&y) * 3.0;
    let ms = project_mean_squares(&y, &l.d).unwrap();
    let fit = anova_fit(&y, &l.chain, &l.d, &l.table).unwrap();
    let s10 = ms.iter().find(|m| m.df == 10).unwrap().ms;
    let s150 = ms.iter().find(|m| m.df == 150).unwrap().ms;
    assert!(fit.components.constrained_zero.is_empty());
    assert!((fit.components.get(id(&l, "ξ_SPT")).unwrap() - s150).abs() < 1e-12);
    assert!((fit.components.get(id(&l, "η_BM")).unwrap() - (s10 - s150) / 12.0).abs() < 1e-12);
}

#[test]
fn ldcvs_defect_is_reported() {
    let l = load("ldcvs");
    let rep = estimability_report(&l.table, &l.d, &l.chain);
    let ld = rep.ldcvs.expect("dependent EMS flagged");
    assert_eq!(ld.relations.len(), 1);
    let y = test_response(l.chain.unit_count(), 9);
    let ms = project_mean_squares(&y, &l.d).unwrap();
    let expected: f64 = ld.relations[0].iter().map(|(row, c)| c * ms[*row].ms).sum();
    let mut coefs: Vec<f64> = ld.relations[0].iter().map(|x| x.1).collect();
    coefs.sort_by(f64::total_cmp);
    assert_eq!(coefs, vec![-1.0, -1.0, 1.0, 1.0]);
    let fit = anova_fit(&y, &l.chain, &l.d, &l.table).unwrap();
    assert_eq!(fit.components.defects.len(), 1);
    assert!((fit.components.defects[0].value.abs() - expected.abs()).abs() < 1e-10);
}

#[test]
fn ldcvs_flag_absent_on_shipped_designs() {
    for name in ["meatloaves", "cotton", "sensory"] {
        let l = load(name);
        assert!(
            estimability_report(&l.table, &l.d, &l.chain).ldcvs.is_none(),
            "{}",
            name
        );
    }
}

#[test]
fn anova_refuses_non_applicable_chain() {
    let l = load("small");
    let y = test_response(l.chain.unit_count(), 10);
    assert!(matches!(
        anova_fit(&y, &l.chain, &l.d, &l.table),
        Err(multitier::Error::NotApplicable(_))
    ));
}

#[test]
fn combined_estimation_converges_where_information_is_split() {
    let l = load("wheat");
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let comps = random_components(&l.table, &mut rng);
    let v = reference_covariance(&l.chain, &comps);
    let tau = vec![0.0; l.chain.treatment_tier().unit_count()];
    let y = sample_response(&l.chain, &v, &tau, &mut rng);
    let fit = combine_information(&y, &l.chain, &l.d, &l.table, CombineMode::Estimate(None)).unwrap();
    assert!(fit.components.converged, "{} iterations", fit.components.iterations);
    assert!(fit.components.iterations < 200);
    // The last step moved the stratum variances by less than the tolerance.
    let tr = &fit.components.trajectory;
    let (a, b) = (&tr[tr.len() - 2], &tr[tr.len() - 1]);
    let rel = a.iter().zip(b).map(|(x, y)| ((x - y) / y).abs()).fold(0.0, f64::max);
    assert!(rel < 1e-7, "{:.2e}", rel);
}

#[test]
fn single_tier_gls_reduces_to_stratum_weighting() {
    // With η = 0 the second tier drops out and GLS on an orthogonal design is
    // the anova estimate.
    let l = load("meatloaves");
    let mut comps: ComponentMap = l
        .table
        .components
        .iter()
        .map(|c| (c.id, if c.id.tier == 0 { 1.3 } else { 0.0 }))
        .collect();
    comps.insert(id(&l, "ξ_SPT"), 0.7);
    let y = test_response(l.chain.unit_count(), 12);
    let g = gls_fit(&y, &l.chain, &l.d, &l.table, &comps, Method::GlsKnownV).unwrap();
    let a = anova_fit(&y, &l.chain, &l.d, &l.table).unwrap();
    assert!(max_diff(&g, &a) < 1e-10);
}
