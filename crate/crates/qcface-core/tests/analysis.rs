use proptest::prelude::*;

use qcface_core::analysis::*;
use qcface_core::error::Error;
use qcface_core::geometry::{norm, FeatureBatch, FeatureVector, ProxyMatrix, SampleMeta};

fn batch_of(points: &[(Vec<f64>, usize, f64)]) -> FeatureBatch {
    let features = points
        .iter()
        .map(|(v, _, _)| FeatureVector::new(v.clone()).unwrap())
        .collect();
    let labels = points.iter().map(|&(_, l, _)| l).collect();
    let meta = points
        .iter()
        .map(|&(_, _, sigma)| SampleMeta {
            noise_sigma: sigma,
            mislabeled: false,
        })
        .collect();
    FeatureBatch::new(features, labels, meta).unwrap()
}

#[test]
fn bin_counts_places_and_clips() {
    let (counts, clipped) = bin_counts(&[1.0, 2.5, 3.0, 10.0, -5.0], &[0.0, 2.0, 4.0]).unwrap();
    assert_eq!(counts, vec![2, 3]);
    assert_eq!(clipped, 2);
    assert_eq!(counts.iter().sum::<usize>(), 5);
}

#[test]
fn bin_counts_boundary_conventions() {
    let (counts, clipped) = bin_counts(&[0.0, 2.0, 4.0], &[0.0, 2.0, 4.0]).unwrap();
    assert_eq!(counts, vec![1, 2]);
    assert_eq!(clipped, 0);
}

#[test]
fn bad_edges_are_rejected() {
    assert_eq!(bin_counts(&[1.0], &[0.0]), Err(Error::BadEdges));
    assert_eq!(bin_counts(&[1.0], &[0.0, 0.0]), Err(Error::BadEdges));
    assert_eq!(bin_counts(&[1.0], &[1.0, 0.0]), Err(Error::BadEdges));
    assert_eq!(bin_counts(&[1.0], &[0.0, f64::NAN]), Err(Error::BadEdges));
}

#[test]
fn histograms_split_by_noise_level_in_ascending_order() {
    let batch = batch_of(&[
        (vec![1.5, 0.0], 0, 0.5),
        (vec![2.5, 0.0], 0, 0.0),
        (vec![1.2, 0.0], 1, 0.0),
        (vec![3.5, 0.0], 1, 0.5),
    ]);
    let hists = magnitude_histogram(&batch, &[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(hists.len(), 2);
    assert_eq!(hists[0].group_key, "sigma=0");
    assert_eq!(hists[1].group_key, "sigma=0.5");
    assert_eq!(hists[0].counts, vec![1, 1, 0]);
    assert_eq!(hists[1].counts, vec![1, 0, 1]);
    for h in &hists {
        assert_eq!(h.counts.iter().sum::<usize>(), 2);
        assert_eq!(h.clipped, 0);
    }
}

#[test]
fn pearson_interleaved_fixture() {
    let r = pearson(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0]).unwrap();
    assert!((r.pearson_r - 0.6).abs() < 1e-15, "{}", r.pearson_r);
    assert_eq!(r.n, 4);
}

#[test]
fn pearson_perfect_lines() {
    let x = [0.3, 1.1, 2.7, 5.0];
    let up: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
    let down: Vec<f64> = x.iter().map(|v| -0.5 * v + 3.0).collect();
    assert!((pearson(&x, &up).unwrap().pearson_r - 1.0).abs() < 1e-12);
    assert!((pearson(&x, &down).unwrap().pearson_r + 1.0).abs() < 1e-12);
}

#[test]
fn pearson_degenerate_inputs() {
    assert_eq!(
        pearson(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]),
        Err(Error::DegenerateVariance)
    );
    assert_eq!(
        pearson(&[1.0, 2.0], &[1.0, 2.0]),
        Err(Error::DegenerateVariance)
    );
    assert!(matches!(
        pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0]),
        Err(Error::DimensionMismatch { .. })
    ));
}

#[test]
fn verification_fixture_is_exact() {
    let genuine = [0.9, 0.8, 0.7];
    let impostor = [0.6, 0.4, 0.2];
    let report = verification_metrics(&genuine, &impostor, &[1.0 / 3.0, 0.1]).unwrap();
    assert_eq!(report.threshold_at_far[0].1, 0.6);
    assert_eq!(report.tar_at_far[0].1, 1.0);
    assert_eq!(report.threshold_at_far[1].1, 0.7);
    assert_eq!(report.tar_at_far[1].1, 1.0);
    assert_eq!(report.auc, 1.0);
}

#[test]
fn unreachable_far_yields_infinite_threshold_and_zero_tar() {
    let report = verification_metrics(&[0.1], &[0.9, 0.9], &[0.5]).unwrap();
    assert_eq!(report.threshold_at_far[0].1, f64::INFINITY);
    assert_eq!(report.tar_at_far[0].1, 0.0);
}

#[test]
fn empty_scores_are_rejected() {
    assert_eq!(
        verification_metrics(&[], &[0.5], &[0.1]),
        Err(Error::EmptyScores)
    );
    assert_eq!(auc_threshold_sweep(&[0.5], &[]), Err(Error::EmptyScores));
    assert_eq!(auc_pair_count(&[], &[]), Err(Error::EmptyScores));
}

/// Scan every candidate threshold by brute force and pick the smallest one
/// whose false-accept rate stays at or under the target.
fn oracle_threshold(genuine: &[f64], impostor: &[f64], target: f64) -> (f64, f64) {
    let mut cands: Vec<f64> = genuine.iter().chain(impostor).cloned().collect();
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    for t in cands {
        let far = impostor.iter().filter(|&&s| s >= t).count() as f64 / impostor.len() as f64;
        if far <= target {
            let tar = genuine.iter().filter(|&&s| s >= t).count() as f64 / genuine.len() as f64;
            return (t, tar);
        }
    }
    (f64::INFINITY, 0.0)
}

fn lcg_scores(seed: &mut u64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((*seed >> 33) % 9) as f64 / 8.0
        })
        .collect()
}

#[test]
fn thresholds_match_brute_force_scan() {
    let mut seed = 17u64;
    for trial in 0..50 {
        let genuine = lcg_scores(&mut seed, 12);
        let impostor = lcg_scores(&mut seed, 15);
        let grid = [0.5, 0.2, 0.05, 0.0];
        let report = verification_metrics(&genuine, &impostor, &grid).unwrap();
        for (slot, &target) in grid.iter().enumerate() {
            let (t, tar) = oracle_threshold(&genuine, &impostor, target);
            assert_eq!(
                report.threshold_at_far[slot].1, t,
                "trial {trial}, target {target}"
            );
            assert_eq!(report.tar_at_far[slot].1, tar);
        }
    }
}

#[test]
fn auc_extremes_and_symmetry() {
    let low = [0.1, 0.2, 0.3];
    let high = [0.7, 0.8, 0.9];
    assert_eq!(auc_threshold_sweep(&high, &low).unwrap(), 1.0);
    assert_eq!(auc_threshold_sweep(&low, &high).unwrap(), 0.0);
    assert_eq!(auc_pair_count(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.5);
    assert_eq!(auc_threshold_sweep(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.5);

    let mut seed = 5u64;
    let g = lcg_scores(&mut seed, 9);
    let i = lcg_scores(&mut seed, 7);
    let fwd = auc_threshold_sweep(&g, &i).unwrap();
    let rev = auc_threshold_sweep(&i, &g).unwrap();
    assert!((fwd + rev - 1.0).abs() < 1e-12);
}

#[test]
fn identification_fixture() {
    let gallery = batch_of(&[(vec![1.0, 0.0], 0, 0.0), (vec![0.0, 1.0], 1, 0.0)]);
    let probes = batch_of(&[
        (vec![0.9, 0.1], 0, 0.0),
        (vec![0.1, 0.9], 0, 0.0),
        (vec![0.2, 0.8], 1, 0.0),
    ]);
    let acc = identification_metrics(&gallery, &probes, &[1, 2]).unwrap();
    assert_eq!(acc[0], (1, 2.0 / 3.0));
    assert_eq!(acc[1], (2, 1.0));
}

#[test]
fn identification_uses_best_gallery_exemplar_per_class() {
    let gallery = batch_of(&[
        (vec![1.0, 0.0], 0, 0.0),
        (vec![0.7, 0.7], 0, 0.0),
        (vec![0.0, 1.0], 1, 0.0),
    ]);
    let probes = batch_of(&[(vec![0.6, 0.8], 0, 0.0)]);
    let acc = identification_metrics(&gallery, &probes, &[1]).unwrap();
    assert_eq!(acc[0], (1, 1.0));
}

#[test]
fn score_ties_resolve_in_favor_of_the_probe() {
    let gallery = batch_of(&[(vec![1.0, 0.0], 0, 0.0), (vec![0.0, 1.0], 1, 0.0)]);
    let probes = batch_of(&[(vec![1.0, 1.0], 0, 0.0)]);
    let acc = identification_metrics(&gallery, &probes, &[1]).unwrap();
    assert_eq!(acc[0], (1, 1.0));
}

#[test]
fn rank_equal_to_class_count_is_always_a_hit() {
    let gallery = batch_of(&[
        (vec![1.0, 0.0, 0.0], 0, 0.0),
        (vec![0.0, 1.0, 0.0], 1, 0.0),
        (vec![0.0, 0.0, 1.0], 2, 0.0),
    ]);
    let probes = batch_of(&[
        (vec![0.3, 0.5, 0.9], 0, 0.0),
        (vec![0.9, 0.1, 0.4], 1, 0.0),
        (vec![0.2, 0.9, 0.1], 2, 0.0),
    ]);
    let acc = identification_metrics(&gallery, &probes, &[3]).unwrap();
    assert_eq!(acc[0], (3, 1.0));
}

#[test]
fn probe_class_missing_from_gallery_is_an_error() {
    let gallery = batch_of(&[(vec![1.0, 0.0], 0, 0.0), (vec![0.0, 1.0], 1, 0.0)]);
    let probes = batch_of(&[(vec![0.5, 0.5], 2, 0.0)]);
    assert_eq!(
        identification_metrics(&gallery, &probes, &[1]),
        Err(Error::EmptyGallery)
    );
}

#[test]
fn projection_fixture_in_the_proxy_plane() {
    let sqrt_half = 0.5f64.sqrt();
    let proxies = ProxyMatrix::new(vec![
        FeatureVector::new(vec![1.0, 0.0, 0.0]).unwrap(),
        FeatureVector::new(vec![sqrt_half, sqrt_half, 0.0]).unwrap(),
        FeatureVector::new(vec![0.0, 0.0, 1.0]).unwrap(),
    ])
    .unwrap();
    let batch = batch_of(&[(vec![2.0, 2.0, 2.0], 0, 0.0), (vec![5.0, 5.0, 5.0], 2, 0.0)]);
    let rows = projection_export(&batch, &proxies, (0, 1), 1.0).unwrap();
    assert_eq!(rows.len(), 3);

    assert_eq!(rows[0].sample_id, "0");
    assert!((rows[0].x - 2.0).abs() < 1e-12);
    assert!((rows[0].y - 2.0).abs() < 1e-12);
    assert!((rows[0].magnitude - 12.0f64.sqrt()).abs() < 1e-12);
    assert!(rows[0].p_d > 0.0 && rows[0].p_d < 1.0);

    assert_eq!(rows[1].sample_id, "proxy_0");
    assert!((rows[1].x - 1.0).abs() < 1e-12);
    assert!(rows[1].y.abs() < 1e-12);

    assert_eq!(rows[2].sample_id, "proxy_1");
    assert!((rows[2].x - sqrt_half).abs() < 1e-12);
    assert!((rows[2].y - sqrt_half).abs() < 1e-12);
}

#[test]
fn projection_rejects_bad_pairs_and_collinear_proxies() {
    let proxies = ProxyMatrix::new(vec![
        FeatureVector::new(vec![1.0, 0.0]).unwrap(),
        FeatureVector::new(vec![2.0, 0.0]).unwrap(),
    ])
    .unwrap();
    let batch = batch_of(&[(vec![1.0, 1.0], 0, 0.0)]);
    assert!(matches!(
        projection_export(&batch, &proxies, (0, 0), 1.0),
        Err(Error::InvalidLabel { .. })
    ));
    assert!(matches!(
        projection_export(&batch, &proxies, (0, 5), 1.0),
        Err(Error::InvalidLabel { .. })
    ));
    assert_eq!(
        projection_export(&batch, &proxies, (0, 1), 1.0),
        Err(Error::CollinearProxies)
    );
}

proptest! {
    #[test]
    fn auc_routes_agree_even_with_ties(
        gi in prop::collection::vec(0usize..5, 1..20),
        ii in prop::collection::vec(0usize..5, 1..20),
    ) {
        let levels = [0.0, 0.25, 0.5, 0.75, 1.0];
        let genuine: Vec<f64> = gi.iter().map(|&i| levels[i]).collect();
        let impostor: Vec<f64> = ii.iter().map(|&i| levels[i]).collect();
        let sweep = auc_threshold_sweep(&genuine, &impostor).unwrap();
        let pairs = auc_pair_count(&genuine, &impostor).unwrap();
        prop_assert!((sweep - pairs).abs() < 1e-12, "sweep {sweep} vs pairs {pairs}");
    }

    #[test]
    fn tar_is_monotone_in_the_far_target(
        gi in prop::collection::vec(0usize..9, 2..15),
        ii in prop::collection::vec(0usize..9, 2..15),
    ) {
        let genuine: Vec<f64> = gi.iter().map(|&i| i as f64 / 8.0).collect();
        let impostor: Vec<f64> = ii.iter().map(|&i| i as f64 / 8.0).collect();
        let grid = [1.0, 0.5, 0.25, 0.1, 0.0];
        let report = verification_metrics(&genuine, &impostor, &grid).unwrap();
        for w in report.tar_at_far.windows(2) {
            prop_assert!(w[0].1 >= w[1].1, "{:?}", report.tar_at_far);
        }
        for w in report.threshold_at_far.windows(2) {
            prop_assert!(w[0].1 <= w[1].1, "{:?}", report.threshold_at_far);
        }
    }

    #[test]
    fn projection_never_grows_the_norm(
        z in prop::collection::vec(-5.0f64..5.0, 3),
    ) {
        let proxies = ProxyMatrix::new(vec![
            FeatureVector::new(vec![1.0, 0.0, 0.0]).unwrap(),
            FeatureVector::new(vec![0.5, 0.8, 0.0]).unwrap(),
        ]).unwrap();
        prop_assume!(norm(&z) > 1e-6);
        let batch = batch_of(&[(z.clone(), 0, 0.0)]);
        let rows = projection_export(&batch, &proxies, (0, 1), 4.0).unwrap();
        let planar = (rows[0].x * rows[0].x + rows[0].y * rows[0].y).sqrt();
        prop_assert!(planar <= norm(&z) + 1e-9);
        prop_assert!((rows[0].magnitude - norm(&z)).abs() < 1e-12);
    }
}
