use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{axpy, dot, norm, scaled, FeatureBatch, FeatureVector, ProxyMatrix};
use crate::grad::{grad_reg_wrt_feature, grad_sm_wrt_feature, grad_sm_wrt_proxies};
use crate::margin::{guidance_value, softmax_loss, MarginSpec};
use crate::reg::{reg_loss, RegParams};
use crate::rng::{rotation_matrix, unit_vector};
use crate::synth::SyntheticData;

/// What the trainer optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamMode {
    /// Directions stay at their generated values; only per-sample
    /// magnitudes learn. Isolates the magnitude-planning mechanism.
    FrozenDirection,
    /// A shared linear map from raw inputs to embeddings; hard samples stay
    /// genuinely hard, so guidance stratifies by noise.
    LinearEncoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: ParamMode,
    pub warmup_epochs: usize,
    pub main_epochs: usize,
    pub lr: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub spec: MarginSpec,
    pub reg: RegParams,
    pub seed: u64,
}

impl TrainConfig {
    pub fn total_epochs(&self) -> usize {
        self.warmup_epochs + self.main_epochs
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.reg.validate()?;
        if self.main_epochs < 1 {
            return Err(Error::InvalidConfig {
                reason: "main_epochs must be >= 1".into(),
            });
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig {
                reason: "batch_size must be >= 1".into(),
            });
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidConfig {
                reason: format!("lr must be finite and >= 0, got {}", self.lr),
            });
        }
        if !(self.lr_decay > 0.0) || !self.lr_decay.is_finite() {
            return Err(Error::InvalidConfig {
                reason: format!("lr_decay must be positive, got {}", self.lr_decay),
            });
        }
        for w in self.lr_milestones.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::InvalidConfig {
                    reason: "lr_milestones must be strictly increasing".into(),
                });
            }
        }
        if let Some(&last) = self.lr_milestones.last() {
            if last >= self.total_epochs() {
                return Err(Error::InvalidConfig {
                    reason: format!(
                        "milestone {last} not below total epochs {}",
                        self.total_epochs()
                    ),
                });
            }
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        let hits = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.lr_decay.powi(hits as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Main,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Main => "main",
        }
    }
}

/// End-of-epoch evaluation over the full dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub phase: Phase,
    pub mean_lsm: f64,
    pub mean_lreg: f64,
    pub mean_pd: f64,
    pub lr: f64,
}

/// Learnable parameters in either mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelParams {
    Frozen {
        directions: Vec<Vec<f64>>,
        magnitudes: Vec<f64>,
    },
    Encoder {
        /// d rows by input_dim columns.
        weight: Vec<Vec<f64>>,
        bias: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanState {
    pub proxies: ProxyMatrix,
    pub params: ModelParams,
    pub epoch: usize,
    pub history: Vec<HistoryRow>,
}

impl PlanState {
    pub fn embedding(&self, data: &SyntheticData, i: usize) -> Vec<f64> {
        match &self.params {
            ModelParams::Frozen {
                directions,
                magnitudes,
            } => scaled(&directions[i], magnitudes[i]),
            ModelParams::Encoder { weight, bias } => {
                let x = &data.inputs[i];
                weight
                    .iter()
                    .zip(bias)
                    .map(|(row, b)| dot(row, x) + b)
                    .collect()
            }
        }
    }

    /// Current embeddings of the whole dataset, with the skeleton's labels
    /// and metadata.
    pub fn embeddings(&self, data: &SyntheticData) -> Result<FeatureBatch> {
        let features = (0..data.skeleton.len())
            .map(|i| FeatureVector::new(self.embedding(data, i)))
            .collect::<Result<Vec<_>>>()?;
        FeatureBatch::new(
            features,
            data.skeleton.labels().to_vec(),
            (0..data.skeleton.len())
                .map(|i| *data.skeleton.meta(i))
                .collect(),
        )
    }
}

/// Fresh state: random unit proxies, magnitudes pinned at the anchor
/// midpoint. The encoder starts as that midpoint times a random rotation on
/// the direction block and zero on the idiosyncrasy block, so initial
/// magnitudes equal the midpoint exactly in both modes.
pub fn init_state(cfg: &TrainConfig, data: &SyntheticData, rng: &mut ChaCha8Rng) -> Result<PlanState> {
    let d = data.skeleton.dim();
    let classes = data.prototypes.len();
    let rows = (0..classes.max(2))
        .map(|_| FeatureVector::new(unit_vector(rng, d)))
        .collect::<Result<Vec<_>>>()?;
    let proxies = ProxyMatrix::new(rows)?;
    let mid = 0.5 * (cfg.reg.l_a + cfg.reg.u_a);
    let params = match cfg.mode {
        ParamMode::FrozenDirection => ModelParams::Frozen {
            directions: data.directions.clone(),
            magnitudes: vec![mid; data.skeleton.len()],
        },
        ParamMode::LinearEncoder => {
            let input_dim = data.inputs[0].len();
            let rot = rotation_matrix(rng, d);
            let weight = rot
                .iter()
                .map(|row| {
                    let mut w = scaled(row, mid);
                    w.resize(input_dim, 0.0);
                    w
                })
                .collect();
            ModelParams::Encoder {
                weight,
                bias: vec![0.0; d],
            }
        }
    };
    Ok(PlanState {
        proxies,
        params,
        epoch: 0,
        history: Vec::new(),
    })
}

fn effective(cfg: &TrainConfig, phase: Phase) -> (MarginSpec, f64) {
    match phase {
        Phase::Warmup => (cfg.spec.warmup_form(), 0.0),
        Phase::Main => (cfg.spec, cfg.reg.lambda_g),
    }
}

/// One SGD step over the given batch indices. Gradients are batch means;
/// in FrozenDirection mode only the radial component reaches the
/// magnitudes. During warm-up the regularizer is off and the spec drops to
/// its constant-margin form.
pub fn train_step(
    state: &mut PlanState,
    cfg: &TrainConfig,
    data: &SyntheticData,
    indices: &[usize],
    phase: Phase,
    lr: f64,
) -> Result<()> {
    if indices.is_empty() {
        return Err(Error::InvalidConfig {
            reason: "empty batch".into(),
        });
    }
    let (spec, lambda) = effective(cfg, phase);
    let feats: Vec<FeatureVector> = indices
        .iter()
        .map(|&i| {
            FeatureVector::new(state.embedding(data, i)).map_err(|_| Error::NonFiniteGradient {
                context: format!("epoch {}, sample {i}: embedding not finite", state.epoch),
            })
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mags: Vec<f64> = feats.iter().map(|f| f.magnitude()).collect();
    let bn = crate::margin::BatchNormState::from_magnitudes(&mags);
    let b = indices.len() as f64;
    let d = data.skeleton.dim();
    let c_count = state.proxies.class_count();

    let mut g_proxies = vec![vec![0.0; d]; c_count];
    let mut g_feats: Vec<Vec<f64>> = Vec::with_capacity(indices.len());
    for (slot, &i) in indices.iter().enumerate() {
        let z = &feats[slot];
        let label = data.skeleton.label(i);
        let context = || format!("epoch {}, sample {i}", state.epoch);
        let (g_theta, g_mag_minus) = grad_sm_wrt_feature(&spec, z, label, &state.proxies, &bn)
            .map_err(|e| lift_nonfinite(e, context()))?;
        let mut gz = g_theta.as_slice().to_vec();
        axpy(&mut gz, 1.0, g_mag_minus.as_slice());
        if lambda > 0.0 {
            let p_d = guidance_value(z, label, &state.proxies, cfg.spec.s)
                .map_err(|e| lift_nonfinite(e, context()))?;
            let g_reg = grad_reg_wrt_feature(&cfg.reg, z, p_d)
                .map_err(|e| lift_nonfinite(e, context()))?;
            axpy(&mut gz, lambda, g_reg.as_slice());
        }
        let (g_ac, g_mc) = grad_sm_wrt_proxies(&spec, z, label, &state.proxies, &bn)
            .map_err(|e| lift_nonfinite(e, context()))?;
        if gz.iter().any(|v| !v.is_finite())
            || g_ac.as_slice().iter().any(|v| !v.is_finite())
            || g_mc
                .iter()
                .any(|(_, g)| g.as_slice().iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFiniteGradient { context: context() });
        }
        axpy(&mut g_proxies[label], 1.0, g_ac.as_slice());
        for (k, g) in &g_mc {
            axpy(&mut g_proxies[*k], 1.0, g.as_slice());
        }
        g_feats.push(gz);
    }

    let mut new_rows = Vec::with_capacity(c_count);
    for k in 0..c_count {
        let mut row = state.proxies.row(k).as_slice().to_vec();
        axpy(&mut row, -lr / b, &g_proxies[k]);
        if norm(&row) < 1e-9 {
            return Err(Error::NonFiniteGradient {
                context: format!("proxy {k} collapsed to zero"),
            });
        }
        new_rows.push(FeatureVector::new(row)?);
    }
    state.proxies = ProxyMatrix::new(new_rows)?;

    match &mut state.params {
        ModelParams::Frozen {
            directions,
            magnitudes,
        } => {
            for (slot, &i) in indices.iter().enumerate() {
                let radial = dot(&g_feats[slot], &directions[i]);
                magnitudes[i] -= lr / b * radial;
            }
        }
        ModelParams::Encoder { weight, bias } => {
            for (slot, &i) in indices.iter().enumerate() {
                let x = &data.inputs[i];
                for r in 0..d {
                    let coef = -lr / b * g_feats[slot][r];
                    axpy(&mut weight[r], coef, x);
                    bias[r] += coef;
                }
            }
        }
    }
    Ok(())
}

fn lift_nonfinite(e: Error, context: String) -> Error {
    match e {
        Error::NonFiniteLoss { .. }
        | Error::ZeroVector
        | Error::NonPositiveMagnitude { .. } => Error::NonFiniteGradient { context },
        other => other,
    }
}

/// Full-dataset evaluation with the phase's active spec; the regularizer
/// and guidance are always reported, optimized or not.
fn evaluate(
    state: &PlanState,
    cfg: &TrainConfig,
    data: &SyntheticData,
    phase: Phase,
    lr: f64,
) -> Result<HistoryRow> {
    let (spec, _) = effective(cfg, phase);
    let batch = state.embeddings(data)?;
    let (_, mean_lsm) = softmax_loss(&spec, &batch, &state.proxies)?;
    let mut mean_lreg = 0.0;
    let mut mean_pd = 0.0;
    for i in 0..batch.len() {
        let p_d = guidance_value(batch.feature(i), batch.label(i), &state.proxies, cfg.spec.s)?;
        mean_lreg += reg_loss(&cfg.reg, batch.feature(i).magnitude(), p_d)?;
        mean_pd += p_d;
    }
    let n = batch.len() as f64;
    Ok(HistoryRow {
        epoch: state.epoch,
        phase,
        mean_lsm,
        mean_lreg: mean_lreg / n,
        mean_pd: mean_pd / n,
        lr,
    })
}

/// Outcome of a full schedule. A mid-run gradient blow-up is reported in
/// `failure` together with the state at the point of abort, so callers can
/// dump diagnostics.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub state: PlanState,
    pub history: Vec<HistoryRow>,
    pub failure: Option<Error>,
}

/// Warm-up epochs under the constant-margin form, then main epochs under
/// the full objective, with step decay at the milestones and a fresh data
/// permutation per epoch.
pub fn run_schedule(cfg: &TrainConfig, data: &SyntheticData) -> Result<RunReport> {
    cfg.validate()?;
    if matches!(cfg.mode, ParamMode::LinearEncoder) && data.inputs.is_empty() {
        return Err(Error::InvalidConfig {
            reason: "encoder mode needs raw inputs".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut state = init_state(cfg, data, &mut rng)?;
    let n = data.skeleton.len();
    for epoch in 0..cfg.total_epochs() {
        let phase = if epoch < cfg.warmup_epochs {
            Phase::Warmup
        } else {
            Phase::Main
        };
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if let Err(e) = train_step(&mut state, cfg, data, chunk, phase, lr) {
                if matches!(e, Error::NonFiniteGradient { .. }) {
                    state.epoch = epoch;
                    let history = state.history.clone();
                    return Ok(RunReport {
                        state,
                        history,
                        failure: Some(e),
                    });
                }
                return Err(e);
            }
        }
        state.epoch = epoch + 1;
        let row = match evaluate(&state, cfg, data, phase, lr) {
            Ok(row) => row,
            Err(e) => {
                let history = state.history.clone();
                return Ok(RunReport {
                    state,
                    history,
                    failure: Some(Error::NonFiniteGradient {
                        context: format!("evaluation after epoch {epoch}: {e}"),
                    }),
                });
            }
        };
        state.history.push(row);
    }
    let history = state.history.clone();
    Ok(RunReport {
        state,
        history,
        failure: None,
    })
}
