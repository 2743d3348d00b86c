use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{axpy, dot, norm, normalized, scaled, FeatureVector, ProxyMatrix};
use crate::margin::{eval_sample, BatchNormState, MarginSpec, NegMode, SampleEval};
use crate::reg::{reg_loss, reg_loss_slope, RegParams};

/// Analytic gradient of the full objective at one sample, split the way the
/// update rules consume it: tangential (direction) and radial (magnitude)
/// parts of d/dz, plus per-proxy gradients.
#[derive(Debug, Clone)]
pub struct GradientBreakdown {
    /// dL_sm/dw at the actual class proxy.
    pub g_ac: FeatureVector,
    /// dL_sm/dw at every other proxy, keyed by class.
    pub g_mc: Vec<(usize, FeatureVector)>,
    /// Tangential part of dL_sm/dz.
    pub g_theta: FeatureVector,
    /// Radial part of dL_sm/dz; nonzero only when m2 rides on the magnitude.
    pub g_mag_minus: FeatureVector,
    /// Radial gradient of the weighted regularizer, lambda_g included.
    pub g_mag_plus: FeatureVector,
    /// g_mag_minus + g_mag_plus.
    pub g_mag: FeatureVector,
}

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FDReport {
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub step: f64,
}

/// Per-class derivative chain shared by the feature and proxy gradients.
struct Chain {
    ev: SampleEval,
    /// dF/dcos(theta_y) at the target class.
    dpos_dcos: f64,
    /// dF/d|z| at the target class (margin-ramp term).
    dpos_dmag: f64,
    /// dN/dcos per class; the target slot is unused.
    dneg_dcos: Vec<f64>,
}

fn chain(
    spec: &MarginSpec,
    z: &[f64],
    label: usize,
    proxies: &ProxyMatrix,
    bn: &BatchNormState,
) -> Result<Chain> {
    let ev = eval_sample(spec, z, label, proxies, bn)?;
    let z_mag = norm(z);
    let theta = ev.theta_y;
    let sin_theta = (1.0 - ev.cos[label] * ev.cos[label]).sqrt();
    if spec.m1 != 1.0 {
        let s_m1 = (spec.m1 * theta).sin();
        if s_m1.abs() < 1e-8 {
            return Err(Error::GradientPole { sin_abs: s_m1.abs() });
        }
    }
    let inner = spec.m1 * theta + spec.m2_at(z_mag, bn);
    let dpos_dcos = spec.m1 * inner.sin() / sin_theta;
    let dpos_dmag = -inner.sin() * spec.m2_slope(z_mag, bn) - spec.m3_slope(z_mag, bn);
    let dneg_dcos = (0..proxies.class_count())
        .map(|k| match spec.neg_mode {
            NegMode::MvSoftmax { t } if ev.gates[k] => t,
            NegMode::Curricular { t } if ev.gates[k] => t + 2.0 * ev.cos[k],
            _ => 1.0,
        })
        .collect();
    Ok(Chain {
        ev,
        dpos_dcos,
        dpos_dmag,
        dneg_dcos,
    })
}

/// dL_sm/dw per proxy: s*(P_k - 1{k=y}) * dFnc_k/dcos * dcos/dw_k.
pub fn grad_sm_wrt_proxies(
    spec: &MarginSpec,
    z: &FeatureVector,
    label: usize,
    proxies: &ProxyMatrix,
    bn: &BatchNormState,
) -> Result<(FeatureVector, Vec<(usize, FeatureVector)>)> {
    let ch = chain(spec, z.as_slice(), label, proxies, bn)?;
    let u = normalized(z.as_slice())?;
    let mut g_ac = FeatureVector::new(vec![0.0; z.dim()])?;
    let mut g_mc = Vec::with_capacity(proxies.class_count() - 1);
    for k in 0..proxies.class_count() {
        let is_y = k == label;
        let weight = spec.s
            * (ch.ev.probs[k] - if is_y { 1.0 } else { 0.0 })
            * if is_y { ch.dpos_dcos } else { ch.dneg_dcos[k] };
        let w = proxies.row(k).as_slice();
        let w_mag = norm(w);
        let w_hat = scaled(w, 1.0 / w_mag);
        let mut g = scaled(&u, weight / w_mag);
        axpy(&mut g, -weight * ch.ev.cos[k] / w_mag, &w_hat);
        let g = FeatureVector::new(g)?;
        if is_y {
            g_ac = g;
        } else {
            g_mc.push((k, g));
        }
    }
    Ok((g_ac, g_mc))
}

/// dL_sm/dz split into the tangential cosine chain and the radial margin
/// chain. Their sum is the full softmax-loss feature gradient.
pub fn grad_sm_wrt_feature(
    spec: &MarginSpec,
    z: &FeatureVector,
    label: usize,
    proxies: &ProxyMatrix,
    bn: &BatchNormState,
) -> Result<(FeatureVector, FeatureVector)> {
    let ch = chain(spec, z.as_slice(), label, proxies, bn)?;
    let z_mag = z.magnitude();
    let u = normalized(z.as_slice())?;
    let mut g_theta = vec![0.0; z.dim()];
    for k in 0..proxies.class_count() {
        let is_y = k == label;
        let weight = spec.s
            * (ch.ev.probs[k] - if is_y { 1.0 } else { 0.0 })
            * if is_y { ch.dpos_dcos } else { ch.dneg_dcos[k] };
        let w = proxies.row(k).as_slice();
        let w_hat = scaled(w, 1.0 / norm(w));
        axpy(&mut g_theta, weight / z_mag, &w_hat);
        axpy(&mut g_theta, -weight * ch.ev.cos[k] / z_mag, &u);
    }
    let radial = spec.s * (ch.ev.probs[label] - 1.0) * ch.dpos_dmag;
    let g_mag_minus = scaled(&u, radial);
    Ok((FeatureVector::new(g_theta)?, FeatureVector::new(g_mag_minus)?))
}

/// d L_reg/dz with the guidance treated as a constant: purely radial,
/// vanishing at the magnitude target and pointing away from it.
pub fn grad_reg_wrt_feature(
    params: &RegParams,
    z: &FeatureVector,
    p_d: f64,
) -> Result<FeatureVector> {
    let z_mag = z.magnitude();
    let slope = reg_loss_slope(params, z_mag, p_d)?;
    let u = normalized(z.as_slice())?;
    FeatureVector::new(scaled(&u, slope))
}

/// Assembles the full decomposition; `params` adds the weighted regularizer
/// term with its own freshly evaluated (then frozen) guidance.
pub fn gradient_breakdown(
    spec: &MarginSpec,
    params: Option<&RegParams>,
    z: &FeatureVector,
    label: usize,
    proxies: &ProxyMatrix,
    bn: &BatchNormState,
) -> Result<GradientBreakdown> {
    let (g_ac, g_mc) = grad_sm_wrt_proxies(spec, z, label, proxies, bn)?;
    let (g_theta, g_mag_minus) = grad_sm_wrt_feature(spec, z, label, proxies, bn)?;
    let g_mag_plus = match params {
        Some(p) => {
            let p_d = crate::margin::guidance_value(z, label, proxies, spec.s)?;
            let raw = grad_reg_wrt_feature(p, z, p_d)?;
            FeatureVector::new(scaled(raw.as_slice(), p.lambda_g))?
        }
        None => FeatureVector::new(vec![0.0; z.dim()])?,
    };
    let mut g_mag = g_mag_minus.as_slice().to_vec();
    axpy(&mut g_mag, 1.0, g_mag_plus.as_slice());
    Ok(GradientBreakdown {
        g_ac,
        g_mc,
        g_theta,
        g_mag_minus,
        g_mag_plus,
        g_mag: FeatureVector::new(g_mag)?,
    })
}

/// Ratio |g_theta(c*z)| / |g_theta(z)| for a constant-margin spec.
///
/// The direction gradient scales as 1/|z|, so the contract value is 1/c.
/// Returns NaN when the base gradient vanishes (feature aligned with its
/// proxy in a symmetric geometry).
pub fn lemma1_scaling_check(
    spec: &MarginSpec,
    z: &FeatureVector,
    label: usize,
    proxies: &ProxyMatrix,
    c: f64,
) -> Result<f64> {
    if !spec.is_constant_margin() {
        return Err(Error::NonConstantMargin);
    }
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::InvalidConfig {
            reason: format!("scale factor must be positive, got {c}"),
        });
    }
    let bn = BatchNormState::new(0.0, 1.0);
    let (g1, _) = grad_sm_wrt_feature(spec, z, label, proxies, &bn)?;
    let zc = FeatureVector::new(scaled(z.as_slice(), c))?;
    let (gc, _) = grad_sm_wrt_feature(spec, &zc, label, proxies, &bn)?;
    let n1 = norm(g1.as_slice());
    if n1 < 1e-9 {
        return Ok(f64::NAN);
    }
    Ok(norm(gc.as_slice()) / n1)
}

/// What the magnitude/direction coupling probe reports.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CouplingProbe {
    /// L_sm unchanged (< 1e-9) under feature rescaling by {0.5, 2, 5}.
    pub sm_scale_invariant: bool,
    /// L_reg bit-identical under exact isometries of z at fixed guidance.
    pub reg_rotation_invariant: bool,
    /// Central-difference d^2 L_sm / (d|z| d theta) along a tangential
    /// direction; nonzero means the margin couples magnitude into angles.
    pub cross_partial: f64,
}

fn sample_loss(
    spec: &MarginSpec,
    z: &[f64],
    label: usize,
    proxies: &ProxyMatrix,
    bn: &BatchNormState,
) -> Result<f64> {
    Ok(eval_sample(spec, z, label, proxies, bn)?.loss(label))
}

/// Probes whether the angular loss leaks into magnitude and whether the
/// regularizer leaks into direction.
pub fn coupling_probe(
    spec: &MarginSpec,
    params: Option<&RegParams>,
    z: &FeatureVector,
    label: usize,
    proxies: &ProxyMatrix,
) -> Result<CouplingProbe> {
    let bn = BatchNormState::from_magnitudes(&[z.magnitude()]);
    let base = sample_loss(spec, z.as_slice(), label, proxies, &bn)?;
    let mut worst = 0.0f64;
    for c in [0.5, 2.0, 5.0] {
        let zc = scaled(z.as_slice(), c);
        worst = worst.max((sample_loss(spec, &zc, label, proxies, &bn)? - base).abs());
    }
    let sm_scale_invariant = worst < 1e-9;

    let reg_rotation_invariant = match params {
        Some(p) => {
            let p_d = crate::margin::guidance_value(z, label, proxies, spec.s)?;
            let l0 = reg_loss(p, norm(z.as_slice()), p_d)?;
            let mut same = true;
            for variant in isometry_variants(z.as_slice()) {
                same &= reg_loss(p, norm(&variant), p_d)? == l0;
            }
            same
        }
        None => true,
    };

    let cross_partial = cross_partial_estimate(spec, z, label, proxies, &bn)?;
    Ok(CouplingProbe {
        sm_scale_invariant,
        reg_rotation_invariant,
        cross_partial,
    })
}

/// Exact-in-floating-point isometries: a quarter turn in the (0,1) plane,
/// a half turn there, and global negation. Each preserves the accumulated
/// sum of squares bit for bit.
fn isometry_variants(z: &[f64]) -> Vec<Vec<f64>> {
    let mut quarter = z.to_vec();
    quarter[0] = -z[1];
    quarter[1] = z[0];
    let mut half = z.to_vec();
    half[0] = -z[0];
    half[1] = -z[1];
    let negated = scaled(z, -1.0);
    vec![quarter, half, negated]
}

fn cross_partial_estimate(
    spec: &MarginSpec,
    z: &FeatureVector,
    label: usize,
    proxies: &ProxyMatrix,
    bn: &BatchNormState,
) -> Result<f64> {
    let r0 = z.magnitude();
    let u = normalized(z.as_slice())?;
    let w_hat = normalized(proxies.row(label).as_slice())?;
    let mut t = w_hat.clone();
    let c = dot(&t, &u);
    axpy(&mut t, -c, &u);
    let t = match normalized(&t) {
        Ok(t) => t,
        Err(_) => {
            // Feature sits on its proxy ray; fall back to the coordinate
            // axis least aligned with it.
            let (i, _) = u
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .unwrap();
            let mut e = vec![0.0; u.len()];
            e[i] = 1.0;
            let c = dot(&e, &u);
            axpy(&mut e, -c, &u);
            normalized(&e)?
        }
    };
    let h_r = 1e-4 * r0.max(1.0);
    let h_phi = 1e-4;
    let eval = |r: f64, phi: f64| -> Result<f64> {
        let mut p = scaled(&u, r * phi.cos());
        axpy(&mut p, r * phi.sin(), &t);
        sample_loss(spec, &p, label, proxies, bn)
    };
    let f_pp = eval(r0 + h_r, h_phi)?;
    let f_pm = eval(r0 + h_r, -h_phi)?;
    let f_mp = eval(r0 - h_r, h_phi)?;
    let f_mm = eval(r0 - h_r, -h_phi)?;
    Ok((f_pp - f_pm - f_mp + f_mm) / (4.0 * h_r * h_phi))
}

/// Central-difference check of `analytic` against the scalar map `f` at
/// `point`, step 1e-6 * max(1, |coordinate|) per coordinate. Relative error
/// is measured against the largest gradient entry either side reports.
pub fn finite_difference_check<F>(f: F, point: &[f64], analytic: &[f64]) -> Result<FDReport>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if point.len() != analytic.len() {
        return Err(Error::DimensionMismatch {
            expected: point.len(),
            got: analytic.len(),
        });
    }
    let base = f(point)?;
    if !base.is_finite() {
        return Err(Error::NonFiniteLoss { value: base });
    }
    let mut fd = vec![0.0; point.len()];
    let mut steps = vec![0.0; point.len()];
    for i in 0..point.len() {
        let h = 1e-6 * point[i].abs().max(1.0);
        let mut hi = point.to_vec();
        hi[i] += h;
        let mut lo = point.to_vec();
        lo[i] -= h;
        fd[i] = (f(&hi)? - f(&lo)?) / (2.0 * h);
        steps[i] = h;
    }
    let scale = fd
        .iter()
        .chain(analytic)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    let mut report = FDReport {
        max_rel_error: 0.0,
        worst_coordinate: 0,
        step: steps[0],
    };
    for i in 0..fd.len() {
        let rel = (fd[i] - analytic[i]).abs() / scale;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coordinate = i;
            report.step = steps[i];
        }
    }
    Ok(report)
}

/// One row of the randomized gradient verification table.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub instances: usize,
    pub worst: FDReport,
}

struct Instance {
    z: FeatureVector,
    label: usize,
    proxies: ProxyMatrix,
    bn: BatchNormState,
}

fn sample_instance(
    rng: &mut ChaCha8Rng,
    spec: &MarginSpec,
    mag_range: (f64, f64),
) -> Result<Instance> {
    'outer: for _ in 0..1000 {
        let c_count = rng.gen_range(2..=8usize);
        let d = rng.gen_range(2..=16usize);
        let mut rows = Vec::with_capacity(c_count);
        for _ in 0..c_count {
            let scale = rng.gen_range(0.5..2.0);
            rows.push(FeatureVector::new(scaled(
                &crate::rng::unit_vector(rng, d),
                scale,
            ))?);
        }
        let proxies = ProxyMatrix::new(rows)?;
        let z_mag = rng.gen_range(mag_range.0..mag_range.1);
        let z = FeatureVector::new(scaled(&crate::rng::unit_vector(rng, d), z_mag))?;
        let label = rng.gen_range(0..c_count);
        let bn = BatchNormState::new(
            z_mag * rng.gen_range(0.9..1.1),
            (z_mag * rng.gen_range(0.2..0.5)).max(1e-3),
        );
        // Keep clear of the analytic kinks and flats: near-pole angles,
        // near-boundary hard-negative gates, margin-ramp clamps, the
        // normalized-magnitude clamp, and vanishing gradients.
        let ev = match eval_sample(spec, z.as_slice(), label, &proxies, &bn) {
            Ok(ev) => ev,
            Err(_) => continue,
        };
        if ev.theta_y < 0.1 || ev.theta_y > std::f64::consts::PI - 0.1 {
            continue;
        }
        if spec.m1 != 1.0 && (spec.m1 * ev.theta_y).sin().abs() < 1e-3 {
            continue;
        }
        if !matches!(spec.neg_mode, NegMode::Identity) {
            for k in 0..c_count {
                if k != label && (ev.f_pos - ev.cos[k]).abs() < 1e-3 {
                    continue 'outer;
                }
            }
        }
        if let crate::margin::M2Mode::MagLinear { l_a, u_a, .. } = spec.m2_mode {
            if (z_mag - l_a).abs() < 1e-2 || (z_mag - u_a).abs() < 1e-2 {
                continue;
            }
        }
        if matches!(spec.m2_mode, crate::margin::M2Mode::AdaNorm { .. })
            || matches!(spec.m3_mode, crate::margin::M3Mode::AdaNorm { .. })
        {
            if ((z_mag - bn.mean) / bn.std).abs() > 0.9 {
                continue;
            }
        }
        // The finite-difference floor is eps*|L|/(2h); a healthy gradient
        // norm keeps the normalized comparison well above it.
        let (g_theta, _) = grad_sm_wrt_feature(spec, &z, label, &proxies, &bn)?;
        if norm(g_theta.as_slice()) < 5e-2 {
            continue;
        }
        return Ok(Instance {
            z,
            label,
            proxies,
            bn,
        });
    }
    Err(Error::InvalidConfig {
        reason: "could not sample a well-conditioned gradient instance".into(),
    })
}

fn stack(z: &[f64], proxies: &ProxyMatrix) -> Vec<f64> {
    let mut v = z.to_vec();
    for r in proxies.rows() {
        v.extend_from_slice(r.as_slice());
    }
    v
}

fn unstack(v: &[f64], d: usize, c_count: usize) -> Result<(Vec<f64>, ProxyMatrix)> {
    let z = v[..d].to_vec();
    let mut rows = Vec::with_capacity(c_count);
    for k in 0..c_count {
        rows.push(FeatureVector::new(v[d * (k + 1)..d * (k + 2)].to_vec())?);
    }
    Ok((z, ProxyMatrix::new(rows)?))
}

fn analytic_stacked(
    spec: &MarginSpec,
    reg: Option<&RegParams>,
    inst: &Instance,
) -> Result<Vec<f64>> {
    let bd = gradient_breakdown(spec, reg, &inst.z, inst.label, &inst.proxies, &inst.bn)?;
    let mut g = bd.g_theta.as_slice().to_vec();
    axpy(&mut g, 1.0, bd.g_mag.as_slice());
    let mut stacked = g;
    for k in 0..inst.proxies.class_count() {
        if k == inst.label {
            stacked.extend_from_slice(bd.g_ac.as_slice());
        } else {
            let (_, gk) = bd
                .g_mc
                .iter()
                .find(|(idx, _)| *idx == k)
                .expect("non-target class present");
            stacked.extend_from_slice(gk.as_slice());
        }
    }
    Ok(stacked)
}

/// Runs the finite-difference verification over the whole loss family on
/// randomized instances. `analytic_perturb` shifts the first analytic
/// coordinate and exists so tests can prove the check actually bites.
pub fn gradient_check_suite(
    seed: u64,
    instances: usize,
    analytic_perturb: f64,
) -> Result<Vec<SuiteOutcome>> {
    if instances == 0 {
        return Err(Error::InvalidConfig {
            reason: "instance count must be at least 1".into(),
        });
    }
    let reg = RegParams::new(1.0, 100.0, crate::reg::BMode::TrackingOffset, 2.0)?;
    let cases: Vec<(&'static str, MarginSpec, Option<RegParams>, (f64, f64))> = vec![
        ("margin_free", MarginSpec::margin_free(16.0), None, (0.5, 3.0)),
        ("sphereface", MarginSpec::sphereface(16.0, 1.5), None, (0.5, 3.0)),
        ("cosface", MarginSpec::cosface(16.0, 0.35), None, (0.5, 3.0)),
        ("arcface", MarginSpec::arcface(16.0, 0.5), None, (0.5, 3.0)),
        (
            "mv_arc_softmax",
            MarginSpec::mv_arc_softmax(16.0, 0.5, 1.2),
            None,
            (0.5, 3.0),
        ),
        (
            "curricular",
            MarginSpec::curricular(16.0, 0.5, 0.3),
            None,
            (0.5, 3.0),
        ),
        (
            "magface",
            MarginSpec::magface(16.0, 0.4, 0.8, 10.0, 110.0),
            None,
            (12.0, 108.0),
        ),
        ("adaface", MarginSpec::adaface(16.0, 0.4), None, (0.5, 3.0)),
        (
            "qcface_total",
            MarginSpec::qcface(10.0, 0.5),
            Some(reg),
            (2.0, 120.0),
        ),
    ];
    let mut out = Vec::with_capacity(cases.len());
    for (name, spec, reg, mag_range) in cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fxhash(name));
        let mut worst = FDReport {
            max_rel_error: 0.0,
            worst_coordinate: 0,
            step: 1e-6,
        };
        for _ in 0..instances {
            let inst = sample_instance(&mut rng, &spec, mag_range)?;
            let d = inst.z.dim();
            let c_count = inst.proxies.class_count();
            let point = stack(inst.z.as_slice(), &inst.proxies);
            let mut analytic = analytic_stacked(&spec, reg.as_ref(), &inst)?;
            analytic[0] += analytic_perturb;
            let bn = inst.bn;
            let spec_c = spec;
            let label = inst.label;
            let p_frozen = match reg.as_ref() {
                Some(_) => Some(crate::margin::guidance_value(
                    &inst.z,
                    label,
                    &inst.proxies,
                    spec.s,
                )?),
                None => None,
            };
            let reg_c = reg;
            let f = move |v: &[f64]| -> Result<f64> {
                let (z, proxies) = unstack(v, d, c_count)?;
                let mut l = sample_loss(&spec_c, &z, label, &proxies, &bn)?;
                if let (Some(rp), Some(p_d)) = (reg_c.as_ref(), p_frozen) {
                    l += rp.lambda_g * reg_loss(rp, norm(&z), p_d)?;
                }
                Ok(l)
            };
            let rep = finite_difference_check(f, &point, &analytic)?;
            if rep.max_rel_error > worst.max_rel_error {
                worst = rep;
            }
        }
        out.push(SuiteOutcome {
            name,
            instances,
            worst,
        });
    }
    Ok(out)
}

/// Tiny stable string hash for deriving per-case streams.
fn fxhash(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
