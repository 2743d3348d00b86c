use qcface_core::error::Error;
use qcface_core::geometry::{dot, norm};
use qcface_core::synth::*;

fn base_spec() -> SyntheticSpec {
    SyntheticSpec {
        classes: 4,
        dim: 8,
        n_per_class: 20,
        noise_levels: vec![
            NoiseLevel {
                sigma: 0.0,
                fraction: 0.5,
            },
            NoiseLevel {
                sigma: 0.3,
                fraction: 0.5,
            },
        ],
        mislabel_rate: 0.0,
        input_dim: 8,
        seed: 42,
    }
}

#[test]
fn noiseless_samples_sit_exactly_on_their_prototype() {
    let data = generate_synthetic(&base_spec()).unwrap();
    for i in 0..data.skeleton.len() {
        if data.skeleton.meta(i).noise_sigma == 0.0 {
            let class = data.skeleton.label(i);
            assert_eq!(data.directions[i], data.prototypes[class]);
        }
    }
}

#[test]
fn directions_are_unit_and_noise_tilts_them() {
    let data = generate_synthetic(&base_spec()).unwrap();
    let mut saw_tilt = false;
    for i in 0..data.skeleton.len() {
        assert!((norm(&data.directions[i]) - 1.0).abs() < 1e-12);
        let m = data.skeleton.meta(i);
        if m.noise_sigma > 0.0 {
            let c = dot(&data.directions[i], &data.prototypes[data.skeleton.label(i)]);
            if c < 1.0 - 1e-9 {
                saw_tilt = true;
            }
        }
    }
    assert!(saw_tilt);
}

#[test]
fn same_seed_is_bit_identical() {
    let a = generate_synthetic(&base_spec()).unwrap();
    let b = generate_synthetic(&base_spec()).unwrap();
    assert_eq!(a, b);
    let mut other = base_spec();
    other.seed = 43;
    let c = generate_synthetic(&other).unwrap();
    assert_ne!(a.directions, c.directions);
}

#[test]
fn two_prototypes_in_the_plane_stay_separated() {
    let mut spec = base_spec();
    spec.classes = 2;
    spec.dim = 2;
    spec.input_dim = 2;
    for seed in 0..20 {
        spec.seed = seed;
        let data = generate_synthetic(&spec).unwrap();
        let c = dot(&data.prototypes[0], &data.prototypes[1]);
        assert!(
            c <= 30.0f64.to_radians().cos() + 1e-12,
            "seed {seed}: cos {c}"
        );
    }
}

#[test]
fn impossible_packing_fails_cleanly() {
    let mut spec = base_spec();
    spec.classes = 20;
    spec.dim = 2;
    spec.input_dim = 2;
    assert!(matches!(
        generate_synthetic(&spec),
        Err(Error::PrototypeSeparationFailure { .. })
    ));
}

#[test]
fn mislabeled_samples_get_a_different_class() {
    let mut spec = base_spec();
    spec.mislabel_rate = 0.5;
    spec.n_per_class = 200;
    let data = generate_synthetic(&spec).unwrap();
    let mut flipped = 0usize;
    for i in 0..data.skeleton.len() {
        let true_class = i / spec.n_per_class;
        if data.skeleton.meta(i).mislabeled {
            flipped += 1;
            assert_ne!(data.skeleton.label(i), true_class);
        } else {
            assert_eq!(data.skeleton.label(i), true_class);
        }
    }
    let frac = flipped as f64 / data.skeleton.len() as f64;
    assert!((0.4..0.6).contains(&frac), "flip fraction {frac}");
}

#[test]
fn idiosyncrasy_block_is_appended_when_input_dim_exceeds_dim() {
    let mut spec = base_spec();
    spec.input_dim = 20;
    let data = generate_synthetic(&spec).unwrap();
    for (i, x) in data.inputs.iter().enumerate() {
        assert_eq!(x.len(), 20);
        assert_eq!(&x[..8], &data.directions[i][..]);
        let tail = norm(&x[8..]);
        assert!(tail > 1.0, "idiosyncrasy block too small: {tail}");
    }
}

#[test]
fn spec_validation_catches_bad_fields() {
    let mut s = base_spec();
    s.noise_levels[0].fraction = 0.4;
    assert!(generate_synthetic(&s).is_err());

    let mut s = base_spec();
    s.mislabel_rate = 1.0;
    assert!(s.validate().is_err());

    let mut s = base_spec();
    s.input_dim = 4;
    assert!(s.validate().is_err());

    let mut s = base_spec();
    s.classes = 1;
    assert!(s.validate().is_err());
}

#[test]
fn stratum_sizes_follow_fractions() {
    let mut spec = base_spec();
    spec.noise_levels = vec![
        NoiseLevel {
            sigma: 0.0,
            fraction: 0.4,
        },
        NoiseLevel {
            sigma: 0.2,
            fraction: 0.4,
        },
        NoiseLevel {
            sigma: 0.5,
            fraction: 0.2,
        },
    ];
    spec.n_per_class = 50;
    let data = generate_synthetic(&spec).unwrap();
    let count = |sigma: f64| {
        (0..data.skeleton.len())
            .filter(|&i| data.skeleton.meta(i).noise_sigma == sigma)
            .count()
    };
    assert_eq!(count(0.0), 4 * 20);
    assert_eq!(count(0.2), 4 * 20);
    assert_eq!(count(0.5), 4 * 10);
}
