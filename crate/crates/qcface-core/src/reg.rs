use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FeatureBatch, ProxyMatrix};
use crate::margin::{guidance_value, softmax_loss, MarginSpec};

/// Offset policy for the magnitude regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BMode {
    Zero,
    /// b = 2*sqrt(A*B), which zeroes the loss exactly at its minimizer, so
    /// the reported regularizer reads as distance-from-target.
    TrackingOffset,
}

/// Guidance-driven magnitude regularizer
///   L_reg(|z|, p) = A(p)/|z| + B(p)*|z| - b(p)
/// with A = k*p + (1-p), B = k*p/u_a^2 + (1-p)/l_a^2. The weight k is
/// calibrated so the magnitude target sits at the anchor midpoint for
/// p = 1/2; the target interpolates l_a -> u_a as guidance goes 0 -> 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegParams {
    pub l_a: f64,
    pub u_a: f64,
    pub k: f64,
    pub b_mode: BMode,
    pub lambda_g: f64,
}

impl RegParams {
    /// Builds params for the anchor pair, solving for k.
    pub fn new(l_a: f64, u_a: f64, b_mode: BMode, lambda_g: f64) -> Result<Self> {
        let k = solve_k(l_a, u_a)?;
        let p = Self {
            l_a,
            u_a,
            k,
            b_mode,
            lambda_g,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.l_a > 0.0 && self.l_a < self.u_a && self.u_a.is_finite()) {
            return Err(Error::InvalidBounds {
                l_a: self.l_a,
                u_a: self.u_a,
            });
        }
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::InvalidConfig {
                reason: format!("k must be positive and finite, got {}", self.k),
            });
        }
        if !(self.lambda_g >= 0.0 && self.lambda_g.is_finite()) {
            return Err(Error::InvalidConfig {
                reason: format!("lambda_g must be >= 0, got {}", self.lambda_g),
            });
        }
        Ok(())
    }

    fn coefficients(&self, p: f64) -> Result<(f64, f64)> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidGuidance { p });
        }
        let a = self.k * p + (1.0 - p);
        let b = self.k * p / (self.u_a * self.u_a) + (1.0 - p) / (self.l_a * self.l_a);
        Ok((a, b))
    }
}

fn check_bounds(l_a: f64, u_a: f64) -> Result<()> {
    if !(l_a > 0.0 && l_a < u_a && u_a.is_finite()) {
        return Err(Error::InvalidBounds { l_a, u_a });
    }
    Ok(())
}

fn zstar_for_k(l_a: f64, u_a: f64, k: f64, p: f64) -> f64 {
    let a = k * p + (1.0 - p);
    let b = k * p / (u_a * u_a) + (1.0 - p) / (l_a * l_a);
    (a / b).sqrt()
}

/// Closed-form k that puts the p = 1/2 magnitude target at (l_a + u_a)/2.
pub fn closed_form_k(l_a: f64, u_a: f64) -> Result<f64> {
    check_bounds(l_a, u_a)?;
    let s = l_a + u_a;
    let num = u_a * u_a * (s * s - 4.0 * l_a * l_a);
    let den = l_a * l_a * (4.0 * u_a * u_a - s * s);
    Ok(num / den)
}

/// Solves z*(1/2) = (l_a + u_a)/2 for k by bisection, then cross-checks the
/// closed form against it to 1e-9 relative. Bisection is the ground truth;
/// the closed form guards against algebra drift.
pub fn solve_k(l_a: f64, u_a: f64) -> Result<f64> {
    check_bounds(l_a, u_a)?;
    let target = 0.5 * (l_a + u_a);
    let f = |k: f64| zstar_for_k(l_a, u_a, k, 0.5) - target;
    let mut lo = 1e-12;
    let mut hi = 1.0;
    while f(hi) < 0.0 {
        hi *= 2.0;
        if hi > 1e300 {
            return Err(Error::InvalidConfig {
                reason: format!("no bracket for k with l_a={l_a}, u_a={u_a}"),
            });
        }
    }
    for _ in 0..500 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    let k = 0.5 * (lo + hi);
    let k_closed = closed_form_k(l_a, u_a)?;
    if (k - k_closed).abs() > 1e-9 * k_closed.abs() {
        return Err(Error::InvalidConfig {
            reason: format!(
                "k solver disagreement: bisection {k}, closed form {k_closed}"
            ),
        });
    }
    Ok(k)
}

/// Magnitude target z*(p) = sqrt(A/B): the unique minimizer of the
/// regularizer at guidance p. Hits l_a at p = 0 and u_a at p = 1.
pub fn expected_magnitude(params: &RegParams, p: f64) -> Result<f64> {
    let (a, b) = params.coefficients(p)?;
    Ok((a / b).sqrt())
}

/// Offset b(p): zero, or 2*sqrt(A*B) so the minimum of the loss is exactly 0.
pub fn offset_b(params: &RegParams, p: f64) -> Result<f64> {
    let (a, b) = params.coefficients(p)?;
    Ok(match params.b_mode {
        BMode::Zero => 0.0,
        BMode::TrackingOffset => 2.0 * (a * b).sqrt(),
    })
}

/// Regularizer value at a given magnitude and guidance.
pub fn reg_loss(params: &RegParams, z_mag: f64, p: f64) -> Result<f64> {
    if !(z_mag > 0.0) || !z_mag.is_finite() {
        return Err(Error::NonPositiveMagnitude { value: z_mag });
    }
    let (a, b) = params.coefficients(p)?;
    Ok(a / z_mag + b * z_mag - offset_b(params, p)?)
}

/// d L_reg / d|z| = -A/|z|^2 + B. Negative below the target, positive above.
pub fn reg_loss_slope(params: &RegParams, z_mag: f64, p: f64) -> Result<f64> {
    if !(z_mag > 0.0) || !z_mag.is_finite() {
        return Err(Error::NonPositiveMagnitude { value: z_mag });
    }
    let (a, b) = params.coefficients(p)?;
    Ok(-a / (z_mag * z_mag) + b)
}

/// One sample's loss decomposition under the full objective
/// L = L_sm + lambda_g * L_reg.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TotalLossRow {
    pub l_sm: f64,
    pub l_reg: f64,
    pub p_d: f64,
    pub total: f64,
}

/// Full objective over a batch: per-sample rows plus the componentwise mean.
/// Guidance p_d is the margin-free true-class probability at the same scale,
/// evaluated per sample and held constant inside the regularizer.
pub fn qcface_total_loss(
    spec: &MarginSpec,
    params: &RegParams,
    batch: &FeatureBatch,
    proxies: &ProxyMatrix,
) -> Result<(Vec<TotalLossRow>, TotalLossRow)> {
    let (lsm, _) = softmax_loss(spec, batch, proxies)?;
    let mut rows = Vec::with_capacity(batch.len());
    let mut mean = TotalLossRow {
        l_sm: 0.0,
        l_reg: 0.0,
        p_d: 0.0,
        total: 0.0,
    };
    for i in 0..batch.len() {
        let p_d = guidance_value(batch.feature(i), batch.label(i), proxies, spec.s)?;
        let l_reg = reg_loss(params, batch.feature(i).magnitude(), p_d)?;
        let total = lsm[i] + params.lambda_g * l_reg;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { value: total });
        }
        rows.push(TotalLossRow {
            l_sm: lsm[i],
            l_reg,
            p_d,
            total,
        });
        mean.l_sm += lsm[i];
        mean.l_reg += l_reg;
        mean.p_d += p_d;
        mean.total += total;
    }
    let n = rows.len() as f64;
    mean.l_sm /= n;
    mean.l_reg /= n;
    mean.p_d /= n;
    mean.total /= n;
    Ok((rows, mean))
}
