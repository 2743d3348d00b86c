use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{cosine_similarity, FeatureBatch, FeatureVector, ProxyMatrix};

/// How the additive-angle margin m2 is produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum M2Mode {
    Constant { m2: f64 },
    /// Linear ramp in feature magnitude between the anchors, clamped outside.
    MagLinear { l_m: f64, u_m: f64, l_a: f64, u_a: f64 },
    /// m2 = -m * zhat with zhat the batch-normalized magnitude.
    AdaNorm { m: f64 },
}

/// How the cosine-shift margin m3 is produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum M3Mode {
    Constant { m3: f64 },
    /// m3 = m * (zhat + 1).
    AdaNorm { m: f64 },
}

/// Transform applied to non-target cosines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum NegMode {
    Identity,
    MvSoftmax { t: f64 },
    Curricular { t: f64 },
}

/// Full description of one margin-softmax loss:
/// target logit cos(m1*theta + m2(|z|)) - m3(|z|), scaled by s,
/// with non-target logits passed through `neg_mode`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginSpec {
    pub m1: f64,
    pub m2_mode: M2Mode,
    pub m3_mode: M3Mode,
    pub s: f64,
    pub neg_mode: NegMode,
}

impl MarginSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0) || !self.s.is_finite() {
            return Err(Error::InvalidConfig {
                reason: format!("scale s must be positive, got {}", self.s),
            });
        }
        if !(self.m1 >= 0.0) || !self.m1.is_finite() {
            return Err(Error::InvalidConfig {
                reason: format!("m1 must be >= 0, got {}", self.m1),
            });
        }
        match self.m2_mode {
            M2Mode::Constant { m2 } => {
                if !(0.0..std::f64::consts::FRAC_PI_2).contains(&m2) {
                    return Err(Error::InvalidConfig {
                        reason: format!("constant m2 must lie in [0, pi/2), got {m2}"),
                    });
                }
            }
            M2Mode::MagLinear { l_m, u_m, l_a, u_a } => {
                if !(l_a < u_a) || !(l_a > 0.0) {
                    return Err(Error::InvalidBounds { l_a, u_a });
                }
                if !(l_m < u_m) {
                    return Err(Error::InvalidConfig {
                        reason: format!("MagLinear needs l_m < u_m, got {l_m} >= {u_m}"),
                    });
                }
            }
            M2Mode::AdaNorm { .. } => {}
        }
        if let M3Mode::Constant { m3 } = self.m3_mode {
            if !(m3 >= 0.0) {
                return Err(Error::InvalidConfig {
                    reason: format!("constant m3 must be >= 0, got {m3}"),
                });
            }
        }
        Ok(())
    }

    pub fn margin_free(s: f64) -> Self {
        Self {
            m1: 1.0,
            m2_mode: M2Mode::Constant { m2: 0.0 },
            m3_mode: M3Mode::Constant { m3: 0.0 },
            s,
            neg_mode: NegMode::Identity,
        }
    }

    /// Multiplicative angle margin only.
    pub fn sphereface(s: f64, m1: f64) -> Self {
        Self {
            m1,
            ..Self::margin_free(s)
        }
    }

    /// Additive cosine margin only.
    pub fn cosface(s: f64, m3: f64) -> Self {
        Self {
            m3_mode: M3Mode::Constant { m3 },
            ..Self::margin_free(s)
        }
    }

    /// Additive angle margin only.
    pub fn arcface(s: f64, m2: f64) -> Self {
        Self {
            m2_mode: M2Mode::Constant { m2 },
            ..Self::margin_free(s)
        }
    }

    /// ArcFace positive margin with hard-example emphasis on negatives.
    pub fn mv_arc_softmax(s: f64, m2: f64, t: f64) -> Self {
        Self {
            neg_mode: NegMode::MvSoftmax { t },
            ..Self::arcface(s, m2)
        }
    }

    pub fn curricular(s: f64, m2: f64, t: f64) -> Self {
        Self {
            neg_mode: NegMode::Curricular { t },
            ..Self::arcface(s, m2)
        }
    }

    /// Magnitude-ramped angle margin (pairs with a magnitude regularizer).
    pub fn magface(s: f64, l_m: f64, u_m: f64, l_a: f64, u_a: f64) -> Self {
        Self {
            m2_mode: M2Mode::MagLinear { l_m, u_m, l_a, u_a },
            ..Self::margin_free(s)
        }
    }

    /// Batch-normalized-magnitude adaptive margins on both m2 and m3.
    pub fn adaface(s: f64, m: f64) -> Self {
        Self {
            m2_mode: M2Mode::AdaNorm { m },
            m3_mode: M3Mode::AdaNorm { m },
            ..Self::margin_free(s)
        }
    }

    /// Constant additive angle margin; the guidance regularizer rides along
    /// separately.
    pub fn qcface(s: f64, m2: f64) -> Self {
        Self::arcface(s, m2)
    }

    /// Resolved m2 at a given feature magnitude.
    pub fn m2_at(&self, z_mag: f64, bn: &BatchNormState) -> f64 {
        match self.m2_mode {
            M2Mode::Constant { m2 } => m2,
            M2Mode::MagLinear { l_m, u_m, l_a, u_a } => {
                let z = z_mag.clamp(l_a, u_a);
                l_m + (u_m - l_m) / (u_a - l_a) * (z - l_a)
            }
            M2Mode::AdaNorm { m } => -m * bn.normalized(z_mag),
        }
    }

    /// Resolved m3 at a given feature magnitude.
    pub fn m3_at(&self, z_mag: f64, bn: &BatchNormState) -> f64 {
        match self.m3_mode {
            M3Mode::Constant { m3 } => m3,
            M3Mode::AdaNorm { m } => m * (bn.normalized(z_mag) + 1.0),
        }
    }

    /// d m2 / d|z| with the batch statistics held fixed. The magnitude ramp
    /// contributes its slope on the interior; the batch-normalized margin
    /// contributes -m/std until its clamp saturates.
    pub fn m2_slope(&self, z_mag: f64, bn: &BatchNormState) -> f64 {
        match self.m2_mode {
            M2Mode::MagLinear { l_m, u_m, l_a, u_a } if z_mag > l_a && z_mag < u_a => {
                (u_m - l_m) / (u_a - l_a)
            }
            M2Mode::AdaNorm { m } if ((z_mag - bn.mean) / bn.std).abs() < 1.0 => -m / bn.std,
            _ => 0.0,
        }
    }

    /// d m3 / d|z| with the batch statistics held fixed.
    pub fn m3_slope(&self, z_mag: f64, bn: &BatchNormState) -> f64 {
        match self.m3_mode {
            M3Mode::AdaNorm { m } if ((z_mag - bn.mean) / bn.std).abs() < 1.0 => m / bn.std,
            _ => 0.0,
        }
    }

    /// True when the target logit depends on the angle only.
    pub fn is_constant_margin(&self) -> bool {
        matches!(self.m2_mode, M2Mode::Constant { .. })
            && matches!(self.m3_mode, M3Mode::Constant { .. })
    }

    /// The spec used during planner warm-up: same scale, additive angle
    /// margin, plain negatives, no magnitude coupling.
    pub fn warmup_form(&self) -> Self {
        let m2 = match self.m2_mode {
            M2Mode::Constant { m2 } => m2,
            _ => 0.5,
        };
        Self::arcface(self.s, m2)
    }
}

/// Batch statistics of feature magnitude used by the adaptive margins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchNormState {
    pub mean: f64,
    pub std: f64,
}

impl BatchNormState {
    pub fn new(mean: f64, std: f64) -> Self {
        Self {
            mean,
            std: std.max(1e-6),
        }
    }

    pub fn from_magnitudes(mags: &[f64]) -> Self {
        if mags.is_empty() {
            return Self::new(0.0, 0.0);
        }
        let n = mags.len() as f64;
        let mean = mags.iter().sum::<f64>() / n;
        let var = mags.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n;
        Self::new(mean, var.sqrt())
    }

    /// Normalized magnitude, clamped to [-1, 1].
    pub fn normalized(&self, z_mag: f64) -> f64 {
        ((z_mag - self.mean) / self.std).clamp(-1.0, 1.0)
    }
}

/// Taxonomy of margin strategies by how the decision boundary moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StrategyClass {
    ConstantMargin,
    SoftMarginNoMvp,
    SoftMarginMvp,
    HardMargin,
}

/// Classifies a spec by margin-magnitude coupling and whether a magnitude
/// pressure (MVP) regularizer accompanies it.
pub fn classify_margin_strategy(spec: &MarginSpec, has_mvp_reg: bool) -> StrategyClass {
    match (spec.is_constant_margin(), has_mvp_reg) {
        (true, false) => StrategyClass::ConstantMargin,
        (false, false) => StrategyClass::SoftMarginNoMvp,
        (false, true) => StrategyClass::SoftMarginMvp,
        (true, true) => StrategyClass::HardMargin,
    }
}

/// Modulated target logit cos(m1*theta + m2(|z|)) - m3(|z|), before scaling.
pub fn positive_modulation(
    spec: &MarginSpec,
    theta: f64,
    z_mag: f64,
    bn: &BatchNormState,
) -> Result<f64> {
    if !(0.0..=std::f64::consts::PI).contains(&theta) {
        return Err(Error::InvalidTheta { theta });
    }
    if !(z_mag > 0.0) {
        return Err(Error::NonPositiveMagnitude { value: z_mag });
    }
    let m2 = spec.m2_at(z_mag, bn);
    let m3 = spec.m3_at(z_mag, bn);
    Ok((spec.m1 * theta + m2).cos() - m3)
}

/// Transformed non-target logit. `gated` says whether the sample counts as
/// misclassified against this class (positive modulated logit below this
/// cosine); the hard-negative transforms only fire then.
pub fn negative_modulation(spec: &MarginSpec, cos_theta: f64, gated: bool) -> f64 {
    match spec.neg_mode {
        NegMode::Identity => cos_theta,
        NegMode::MvSoftmax { t } if gated => t * cos_theta + t - 1.0,
        NegMode::Curricular { t } if gated => (t + cos_theta) * cos_theta,
        _ => cos_theta,
    }
}

/// Numerically stable softmax. A single-entry input maps to [1.0]; with two
/// or more entries the outputs are nudged off exact 0 and 1, which saturated
/// scales would otherwise round onto, so the open-interval contract holds.
pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    if logits.len() == 1 {
        return vec![1.0];
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let cap = 1.0 - f64::EPSILON / 2.0;
    exps.iter()
        .map(|e| (e / z).clamp(f64::MIN_POSITIVE, cap))
        .collect()
}

/// log(sum(exp(logits))), stable.
fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}

/// Forward pass of one sample against all proxies.
#[derive(Debug, Clone)]
pub(crate) struct SampleEval {
    pub cos: Vec<f64>,
    pub theta_y: f64,
    /// Modulated target logit before scaling by s.
    pub f_pos: f64,
    /// s * Fnc_k for every class.
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// Misclassification gate per class (false at the target).
    pub gates: Vec<bool>,
}

impl SampleEval {
    pub fn loss(&self, label: usize) -> f64 {
        log_sum_exp(&self.logits) - self.logits[label]
    }
}

pub(crate) fn eval_sample(
    spec: &MarginSpec,
    z: &[f64],
    label: usize,
    proxies: &ProxyMatrix,
    bn: &BatchNormState,
) -> Result<SampleEval> {
    let c_count = proxies.class_count();
    if label >= c_count {
        return Err(Error::InvalidLabel {
            label,
            classes: c_count,
        });
    }
    let mut cos = Vec::with_capacity(c_count);
    for k in 0..c_count {
        cos.push(cosine_similarity(z, proxies.row(k).as_slice())?);
    }
    let z_mag = crate::geometry::norm(z);
    let theta_y = cos[label].acos();
    let f_pos = positive_modulation(spec, theta_y, z_mag, bn)?;
    let mut logits = Vec::with_capacity(c_count);
    let mut gates = vec![false; c_count];
    for k in 0..c_count {
        if k == label {
            logits.push(spec.s * f_pos);
        } else {
            gates[k] = f_pos < cos[k];
            logits.push(spec.s * negative_modulation(spec, cos[k], gates[k]));
        }
    }
    let probs = softmax(&logits);
    Ok(SampleEval {
        cos,
        theta_y,
        f_pos,
        logits,
        probs,
        gates,
    })
}

/// Per-class probabilities under the modulated logits.
pub fn class_probabilities(
    spec: &MarginSpec,
    z: &FeatureVector,
    label: usize,
    proxies: &ProxyMatrix,
    bn: &BatchNormState,
) -> Result<Vec<f64>> {
    Ok(eval_sample(spec, z.as_slice(), label, proxies, bn)?.probs)
}

/// Per-sample cross-entropy under the modulated logits, plus the batch mean.
/// Batch statistics for the adaptive margins come from this batch.
pub fn softmax_loss(
    spec: &MarginSpec,
    batch: &FeatureBatch,
    proxies: &ProxyMatrix,
) -> Result<(Vec<f64>, f64)> {
    batch.validate_against(proxies)?;
    let bn = batch_norm_state(batch);
    let mut losses = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let ev = eval_sample(spec, batch.feature(i).as_slice(), batch.label(i), proxies, &bn)?;
        let l = ev.loss(batch.label(i));
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { value: l });
        }
        losses.push(l);
    }
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok((losses, mean))
}

pub fn batch_norm_state(batch: &FeatureBatch) -> BatchNormState {
    let mags: Vec<f64> = (0..batch.len()).map(|i| batch.feature(i).magnitude()).collect();
    BatchNormState::from_magnitudes(&mags)
}

/// Margin-free probability of the true class. Downstream losses treat this
/// as a constant (stop-gradient semantics): it steers magnitude targets but
/// is never differentiated through.
pub fn guidance_value(
    z: &FeatureVector,
    label: usize,
    proxies: &ProxyMatrix,
    s: f64,
) -> Result<f64> {
    if !(s > 0.0) {
        return Err(Error::InvalidConfig {
            reason: format!("scale s must be positive, got {s}"),
        });
    }
    let spec = MarginSpec::margin_free(s);
    let bn = BatchNormState::new(0.0, 1.0);
    let ev = eval_sample(&spec, z.as_slice(), label, proxies, &bn)?;
    Ok(ev.probs[label])
}
