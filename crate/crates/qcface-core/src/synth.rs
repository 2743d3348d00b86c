use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{axpy, dot, normalized, scaled, FeatureBatch, FeatureVector, SampleMeta};
use crate::rng::{normal_vector, unit_vector};

/// Minimum pairwise prototype separation.
const MIN_PROTO_ANGLE_DEG: f64 = 30.0;

/// Weight of the per-sample idiosyncrasy block relative to the unit
/// direction block in the raw inputs. Large enough that the encoder must
/// actively denoise, which is what lets per-sample magnitudes decouple from
/// class geometry (and lets mislabeled copies of clean samples sink).
const IDIO_SCALE: f64 = 2.5;

/// One noise stratum: perturbation strength and its share of each class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseLevel {
    pub sigma: f64,
    pub fraction: f64,
}

/// Recipe for the synthetic identity dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub noise_levels: Vec<NoiseLevel>,
    pub mislabel_rate: f64,
    pub input_dim: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim < 2 || self.n_per_class < 1 {
            return Err(Error::InvalidConfig {
                reason: format!(
                    "need classes >= 2, dim >= 2, n_per_class >= 1; got {}, {}, {}",
                    self.classes, self.dim, self.n_per_class
                ),
            });
        }
        if self.noise_levels.is_empty() {
            return Err(Error::InvalidConfig {
                reason: "need at least one noise level".into(),
            });
        }
        let mut total = 0.0;
        for nl in &self.noise_levels {
            if !(nl.sigma >= 0.0) || !(0.0..=1.0).contains(&nl.fraction) {
                return Err(Error::InvalidConfig {
                    reason: format!(
                        "bad noise level: sigma {}, fraction {}",
                        nl.sigma, nl.fraction
                    ),
                });
            }
            total += nl.fraction;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig {
                reason: format!("noise fractions sum to {total}, expected 1"),
            });
        }
        if !(0.0..1.0).contains(&self.mislabel_rate) {
            return Err(Error::InvalidConfig {
                reason: format!("mislabel_rate {} outside [0, 1)", self.mislabel_rate),
            });
        }
        if self.input_dim < self.dim {
            return Err(Error::InvalidConfig {
                reason: format!(
                    "input_dim {} smaller than embedding dim {}",
                    self.input_dim, self.dim
                ),
            });
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.classes * self.n_per_class
    }
}

/// Generated dataset: raw inputs for the encoder mode, a batch skeleton
/// whose features are the ground-truth unit directions, and the class
/// prototypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticData {
    pub inputs: Vec<Vec<f64>>,
    pub skeleton: FeatureBatch,
    pub directions: Vec<Vec<f64>>,
    pub prototypes: Vec<Vec<f64>>,
}

fn stratum_counts(n: usize, levels: &[NoiseLevel]) -> Result<Vec<usize>> {
    let mut counts: Vec<usize> = levels[..levels.len() - 1]
        .iter()
        .map(|nl| (nl.fraction * n as f64).round() as usize)
        .collect();
    let used: usize = counts.iter().sum();
    if used > n {
        return Err(Error::InvalidConfig {
            reason: "noise fractions round above n_per_class".into(),
        });
    }
    counts.push(n - used);
    Ok(counts)
}

fn draw_prototypes(rng: &mut ChaCha8Rng, classes: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
    let cos_limit = (MIN_PROTO_ANGLE_DEG.to_radians()).cos();
    let budget = 1000 * classes;
    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut attempts = 0;
    while protos.len() < classes {
        if attempts >= budget {
            return Err(Error::PrototypeSeparationFailure {
                classes,
                min_deg: MIN_PROTO_ANGLE_DEG,
                attempts,
            });
        }
        attempts += 1;
        let cand = unit_vector(rng, dim);
        if protos.iter().all(|p| dot(p, &cand) <= cos_limit) {
            protos.push(cand);
        }
    }
    Ok(protos)
}

/// Draws the dataset. Everything is a pure function of the spec: the seed
/// fixes prototypes, sample noise, mislabel flips, and idiosyncrasy
/// coordinates in one stream.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prototypes = draw_prototypes(&mut rng, spec.classes, spec.dim)?;
    let counts = stratum_counts(spec.n_per_class, &spec.noise_levels)?;
    let extra = spec.input_dim - spec.dim;

    let n_total = spec.total_samples();
    let mut inputs = Vec::with_capacity(n_total);
    let mut directions = Vec::with_capacity(n_total);
    let mut features = Vec::with_capacity(n_total);
    let mut labels = Vec::with_capacity(n_total);
    let mut meta = Vec::with_capacity(n_total);

    for class in 0..spec.classes {
        let proto = &prototypes[class];
        for (level, &count) in spec.noise_levels.iter().zip(&counts) {
            for _ in 0..count {
                let g = normal_vector(&mut rng, spec.dim);
                let dir = if level.sigma == 0.0 {
                    proto.clone()
                } else {
                    let mut t = g;
                    let radial = dot(&t, proto);
                    axpy(&mut t, -radial, proto);
                    let mut dir = proto.clone();
                    axpy(&mut dir, level.sigma, &t);
                    normalized(&dir)?
                };
                let mislabeled = rng.gen::<f64>() < spec.mislabel_rate;
                let label = if mislabeled {
                    (class + 1 + rng.gen_range(0..spec.classes - 1)) % spec.classes
                } else {
                    class
                };
                let mut input = dir.clone();
                if extra > 0 {
                    let idio = unit_vector(&mut rng, extra);
                    input.extend(scaled(&idio, IDIO_SCALE));
                }
                inputs.push(input);
                features.push(FeatureVector::new(dir.clone())?);
                directions.push(dir);
                labels.push(label);
                meta.push(SampleMeta {
                    noise_sigma: level.sigma,
                    mislabeled,
                });
            }
        }
    }

    Ok(SyntheticData {
        inputs,
        skeleton: FeatureBatch::new(features, labels, meta)?,
        directions,
        prototypes,
    })
}
