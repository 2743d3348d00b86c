use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qcface_core::geometry::{dot, norm, scaled, FeatureVector, ProxyMatrix};
use qcface_core::grad::*;
use qcface_core::margin::{class_probabilities, BatchNormState, MarginSpec};
use qcface_core::reg::{expected_magnitude, BMode, RegParams};
use qcface_core::rng::unit_vector;

fn fv(v: &[f64]) -> FeatureVector {
    FeatureVector::new(v.to_vec()).unwrap()
}

fn bn0() -> BatchNormState {
    BatchNormState::new(0.0, 1.0)
}

fn random_instance(seed: u64, classes: usize, dim: usize, mag: f64) -> (FeatureVector, usize, ProxyMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..classes)
        .map(|_| fv(&scaled(&unit_vector(&mut rng, dim), rng.gen_range(0.5..2.0))))
        .collect();
    let proxies = ProxyMatrix::new(rows).unwrap();
    let z = fv(&scaled(&unit_vector(&mut rng, dim), mag));
    let label = rng.gen_range(0..classes);
    (z, label, proxies)
}

#[test]
fn finite_difference_calibration_on_quadratic() {
    let a = [2.0, -1.0, 0.5, 3.0];
    let b = [1.0, 0.0, -2.0, 0.25];
    let f = |x: &[f64]| {
        Ok(x.iter()
            .zip(&a)
            .zip(&b)
            .map(|((xi, ai), bi)| ai * xi * xi + bi * xi)
            .sum())
    };
    let point = [0.3, -1.2, 2.0, 0.7];
    let analytic: Vec<f64> = point
        .iter()
        .zip(&a)
        .zip(&b)
        .map(|((xi, ai), bi)| 2.0 * ai * xi + bi)
        .collect();
    let rep = finite_difference_check(f, &point, &analytic).unwrap();
    assert!(rep.max_rel_error < 1e-9, "calibration error {}", rep.max_rel_error);
    assert!(rep.step > 0.0);
}

#[test]
fn suite_passes_on_a_quick_pass() {
    for outcome in gradient_check_suite(11, 10, 0.0).unwrap() {
        assert!(
            outcome.worst.max_rel_error < 1e-6,
            "{}: {}",
            outcome.name,
            outcome.worst.max_rel_error
        );
    }
}

#[test]
fn suite_detects_a_broken_analytic_gradient() {
    let outcomes = gradient_check_suite(11, 3, 10.0).unwrap();
    assert!(
        outcomes.iter().any(|o| o.worst.max_rel_error > 1e-6),
        "perturbed gradients slipped through"
    );
}

#[test]
fn suite_rejects_zero_instances() {
    assert!(gradient_check_suite(1, 0, 0.0).is_err());
}

#[test]
fn constant_margin_has_no_radial_softmax_gradient() {
    let spec = MarginSpec::arcface(16.0, 0.5);
    let (z, label, proxies) = random_instance(5, 4, 6, 2.0);
    let (_, g_mag_minus) = grad_sm_wrt_feature(&spec, &z, label, &proxies, &bn0()).unwrap();
    assert!(g_mag_minus.as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn magnitude_ramp_produces_radial_softmax_gradient() {
    let spec = MarginSpec::magface(16.0, 0.4, 0.8, 10.0, 110.0);
    let (z, label, proxies) = random_instance(5, 4, 6, 60.0);
    let (_, g_mag_minus) = grad_sm_wrt_feature(&spec, &z, label, &proxies, &bn0()).unwrap();
    assert!(norm(g_mag_minus.as_slice()) > 1e-10);
}

#[test]
fn regularizer_gradient_vanishes_at_target_and_pulls_toward_it() {
    let p = RegParams::new(1.0, 100.0, BMode::TrackingOffset, 1.0).unwrap();
    let pd = 0.7;
    let target = expected_magnitude(&p, pd).unwrap();
    let dir = fv(&[0.6, 0.0, 0.8]);

    let at = fv(&scaled(dir.as_slice(), target));
    let g = grad_reg_wrt_feature(&p, &at, pd).unwrap();
    assert!(norm(g.as_slice()) < 1e-9);

    let below = fv(&scaled(dir.as_slice(), target * 0.4));
    let g = grad_reg_wrt_feature(&p, &below, pd).unwrap();
    assert!(dot(g.as_slice(), below.as_slice()) < 0.0);

    let above = fv(&scaled(dir.as_slice(), target * 2.5));
    let g = grad_reg_wrt_feature(&p, &above, pd).unwrap();
    assert!(dot(g.as_slice(), above.as_slice()) > 0.0);
}

#[test]
fn symmetric_two_class_proxy_gradients_balance() {
    let spec = MarginSpec::margin_free(2.0);
    let proxies = ProxyMatrix::new(vec![fv(&[1.0, 0.0]), fv(&[-1.0, 0.0])]).unwrap();
    let t = 0.8f64;
    let z = fv(&[4.0 * t.cos(), 4.0 * t.sin()]);
    let (g_ac, g_mc) = grad_sm_wrt_proxies(&spec, &z, 0, &proxies, &bn0()).unwrap();
    assert_eq!(g_mc.len(), 1);
    let (na, nm) = (norm(g_ac.as_slice()), norm(g_mc[0].1.as_slice()));
    assert!((na - nm).abs() < 1e-12 * na.max(nm));
}

#[test]
fn converged_sample_has_vanishing_actual_proxy_gradient() {
    let spec = MarginSpec::margin_free(64.0);
    let proxies = ProxyMatrix::new(vec![fv(&[1.0, 0.0]), fv(&[-1.0, 0.0])]).unwrap();
    let z = fv(&[3.0, 0.001]);
    let (g_ac, _) = grad_sm_wrt_proxies(&spec, &z, 0, &proxies, &bn0()).unwrap();
    assert!(norm(g_ac.as_slice()) < 1e-10);
}

#[test]
fn direction_gradient_scales_inversely_with_magnitude() {
    let spec = MarginSpec::arcface(16.0, 0.5);
    let (z, label, proxies) = random_instance(9, 5, 8, 3.0);
    let r2 = lemma1_scaling_check(&spec, &z, label, &proxies, 2.0).unwrap();
    assert!((r2 - 0.5).abs() < 1e-9, "c=2 ratio {r2}");
    let r10 = lemma1_scaling_check(&spec, &z, label, &proxies, 10.0).unwrap();
    assert!((r10 - 0.1).abs() < 1e-9, "c=10 ratio {r10}");
    let rh = lemma1_scaling_check(&spec, &z, label, &proxies, 0.5).unwrap();
    assert!((rh - 2.0).abs() < 1e-9, "c=0.5 ratio {rh}");
}

#[test]
fn aligned_feature_reports_nan_ratio() {
    let spec = MarginSpec::margin_free(16.0);
    let proxies = ProxyMatrix::new(vec![fv(&[1.0, 0.0]), fv(&[-1.0, 0.0])]).unwrap();
    let z = fv(&[5.0, 0.0]);
    let r = lemma1_scaling_check(&spec, &z, 0, &proxies, 2.0).unwrap();
    assert!(r.is_nan());
}

#[test]
fn scaling_check_requires_constant_margin() {
    let spec = MarginSpec::magface(16.0, 0.4, 0.8, 10.0, 110.0);
    let (z, label, proxies) = random_instance(2, 3, 4, 50.0);
    assert!(lemma1_scaling_check(&spec, &z, label, &proxies, 2.0).is_err());
}

#[test]
fn probe_confirms_decoupling_for_the_guided_loss() {
    let spec = MarginSpec::qcface(10.0, 0.5);
    let reg = RegParams::new(1.0, 100.0, BMode::TrackingOffset, 8.0).unwrap();
    let (z, label, proxies) = random_instance(21, 5, 8, 40.0);
    let probe = coupling_probe(&spec, Some(&reg), &z, label, &proxies).unwrap();
    assert!(probe.sm_scale_invariant);
    assert!(probe.reg_rotation_invariant);
    assert!(probe.cross_partial.abs() < 1e-6);
}

#[test]
fn probe_flags_coupling_for_the_magnitude_ramp() {
    let spec = MarginSpec::magface(16.0, 0.4, 0.8, 10.0, 110.0);
    let (z, label, proxies) = random_instance(21, 5, 8, 60.0);
    let probe = coupling_probe(&spec, None, &z, label, &proxies).unwrap();
    assert!(!probe.sm_scale_invariant);
    assert!(probe.cross_partial.abs() > 1e-6);
}

#[test]
fn probe_passes_plain_softmax() {
    let spec = MarginSpec::margin_free(16.0);
    let (z, label, proxies) = random_instance(33, 4, 6, 7.0);
    let probe = coupling_probe(&spec, None, &z, label, &proxies).unwrap();
    assert!(probe.sm_scale_invariant);
    assert!(probe.reg_rotation_invariant);
}

#[test]
fn probability_weights_sum_to_zero() {
    let (z, label, proxies) = random_instance(40, 7, 9, 12.0);
    for spec in [
        MarginSpec::margin_free(32.0),
        MarginSpec::arcface(32.0, 0.5),
        MarginSpec::mv_arc_softmax(32.0, 0.5, 1.2),
    ] {
        let p = class_probabilities(&spec, &z, label, &proxies, &bn0()).unwrap();
        let total: f64 = p
            .iter()
            .enumerate()
            .map(|(k, v)| v - if k == label { 1.0 } else { 0.0 })
            .sum();
        assert!(total.abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn breakdown_split_is_orthogonal_and_consistent(seed in 0u64..300) {
        let classes = 2 + (seed % 7) as usize;
        let dim = 2 + (seed % 15) as usize;
        let mag = 2.0 + (seed % 50) as f64;
        let (z, label, proxies) = random_instance(seed, classes, dim, mag);
        let reg = RegParams::new(1.0, 100.0, BMode::TrackingOffset, 3.0).unwrap();
        let spec = MarginSpec::arcface(16.0, 0.5);
        let bd = gradient_breakdown(&spec, Some(&reg), &z, label, &proxies, &bn0()).unwrap();

        let nt = norm(bd.g_theta.as_slice());
        let nz = z.magnitude();
        prop_assert!(dot(bd.g_theta.as_slice(), z.as_slice()).abs() <= 1e-9 * nt * nz + 1e-30);

        // Radial parts have no tangential residue.
        for g in [&bd.g_mag_minus, &bd.g_mag_plus] {
            let gn = norm(g.as_slice());
            if gn > 0.0 {
                let radial = dot(g.as_slice(), z.as_slice()) / nz;
                let mut tangential = g.as_slice().to_vec();
                for (t, zi) in tangential.iter_mut().zip(z.as_slice()) {
                    *t -= radial * zi / nz;
                }
                prop_assert!(norm(&tangential) <= 1e-9 * gn);
            }
        }

        // The assembled split reproduces the component sum.
        let (g_theta, g_mag_minus) = grad_sm_wrt_feature(&spec, &z, label, &proxies, &bn0()).unwrap();
        let p_d = qcface_core::margin::guidance_value(&z, label, &proxies, spec.s).unwrap();
        let g_reg = grad_reg_wrt_feature(&reg, &z, p_d).unwrap();
        for i in 0..z.dim() {
            let full = g_theta.as_slice()[i] + g_mag_minus.as_slice()[i]
                + reg.lambda_g * g_reg.as_slice()[i];
            let split = bd.g_theta.as_slice()[i] + bd.g_mag.as_slice()[i];
            prop_assert!((full - split).abs() <= 1e-12 * full.abs().max(1.0));
        }
    }
}
