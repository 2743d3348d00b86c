use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{cosine_similarity, gram_schmidt_project, FeatureBatch, ProxyMatrix};
use crate::margin::guidance_value;

/// Magnitude distribution of one subset of the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeHistogram {
    pub group_key: String,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// How many values fell outside the edges; they are counted in the
    /// nearest edge bin, so counts always sum to the subset size.
    pub clipped: usize,
}

fn check_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2 || edges.iter().any(|e| !e.is_finite()) {
        return Err(Error::BadEdges);
    }
    for w in edges.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::BadEdges);
        }
    }
    Ok(())
}

/// Histogram of raw values over the edges; out-of-range values land in the
/// first or last bin and are tallied separately.
pub fn bin_counts(values: &[f64], edges: &[f64]) -> Result<(Vec<usize>, usize)> {
    check_edges(edges)?;
    let bins = edges.len() - 1;
    let mut counts = vec![0usize; bins];
    let mut clipped = 0usize;
    for &v in values {
        let idx = if v < edges[0] {
            clipped += 1;
            0
        } else if v > edges[bins] {
            clipped += 1;
            bins - 1
        } else {
            match edges[..bins].iter().rposition(|&e| v >= e) {
                Some(i) => i,
                None => 0,
            }
        };
        counts[idx] += 1;
    }
    Ok((counts, clipped))
}

/// One histogram per noise level, ascending in sigma.
pub fn magnitude_histogram(batch: &FeatureBatch, edges: &[f64]) -> Result<Vec<MagnitudeHistogram>> {
    check_edges(edges)?;
    let mut sigmas: Vec<f64> = (0..batch.len()).map(|i| batch.meta(i).noise_sigma).collect();
    sigmas.sort_by(f64::total_cmp);
    sigmas.dedup();
    let mut out = Vec::with_capacity(sigmas.len());
    for sigma in sigmas {
        let values: Vec<f64> = (0..batch.len())
            .filter(|&i| batch.meta(i).noise_sigma == sigma)
            .map(|i| batch.feature(i).magnitude())
            .collect();
        let (counts, clipped) = bin_counts(&values, edges)?;
        out.push(MagnitudeHistogram {
            group_key: format!("sigma={sigma}"),
            bin_edges: edges.to_vec(),
            counts,
            clipped,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub pearson_r: f64,
    pub n: usize,
    pub x_name: String,
    pub y_name: String,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<CorrelationReport> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(Error::DegenerateVariance);
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateVariance);
    }
    Ok(CorrelationReport {
        pearson_r: sxy / (sxx.sqrt() * syy.sqrt()),
        n: x.len(),
        x_name: "x".into(),
        y_name: "y".into(),
    })
}

pub const DEFAULT_FAR_GRID: [f64; 6] = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6];

/// Verification summary over genuine/impostor similarity scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    /// (FAR target, TAR) pairs in the grid's order.
    pub tar_at_far: Vec<(f64, f64)>,
    /// (FAR target, accepted-similarity threshold); infinity when even
    /// rejecting everything observed cannot reach the target.
    pub threshold_at_far: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Acceptance convention: a pair is accepted when score >= threshold. The
/// reported threshold is the smallest observed score whose empirical FAR
/// does not exceed the target, i.e. the most permissive compliant one.
pub fn verification_metrics(
    genuine: &[f64],
    impostor: &[f64],
    far_grid: &[f64],
) -> Result<VerificationReport> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::EmptyScores);
    }
    let mut candidates: Vec<f64> = genuine.iter().chain(impostor).cloned().collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut imp_sorted = impostor.to_vec();
    imp_sorted.sort_by(f64::total_cmp);
    let far_of = |threshold: f64| -> f64 {
        let below = imp_sorted.partition_point(|&s| s < threshold);
        (imp_sorted.len() - below) as f64 / imp_sorted.len() as f64
    };
    let mut tar_at_far = Vec::with_capacity(far_grid.len());
    let mut threshold_at_far = Vec::with_capacity(far_grid.len());
    for &target in far_grid {
        let threshold = candidates
            .iter()
            .cloned()
            .find(|&t| far_of(t) <= target)
            .unwrap_or(f64::INFINITY);
        let tar = genuine.iter().filter(|&&g| g >= threshold).count() as f64
            / genuine.len() as f64;
        tar_at_far.push((target, tar));
        threshold_at_far.push((target, threshold));
    }
    Ok(VerificationReport {
        tar_at_far,
        threshold_at_far,
        auc: auc_threshold_sweep(genuine, impostor)?,
    })
}

/// Area under the ROC by sweeping the threshold across all distinct scores,
/// trapezoidal in FPR, with tied scores advanced together.
pub fn auc_threshold_sweep(genuine: &[f64], impostor: &[f64]) -> Result<f64> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::EmptyScores);
    }
    let mut merged: Vec<(f64, bool)> = genuine
        .iter()
        .map(|&s| (s, true))
        .chain(impostor.iter().map(|&s| (s, false)))
        .collect();
    merged.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (np, nn) = (genuine.len() as f64, impostor.len() as f64);
    let mut area = 0.0;
    let (mut tp, mut fp) = (0.0f64, 0.0f64);
    let (mut tp_prev, mut fp_prev) = (0.0f64, 0.0f64);
    let mut prev_score = f64::INFINITY;
    for (score, is_genuine) in merged {
        if score != prev_score {
            area += (fp - fp_prev) * (tp + tp_prev) / 2.0;
            fp_prev = fp;
            tp_prev = tp;
            prev_score = score;
        }
        if is_genuine {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
    }
    area += (fp - fp_prev) * (tp + tp_prev) / 2.0;
    Ok(area / (np * nn))
}

/// Same quantity by direct pair counting (ties at half weight). Kept as an
/// independent estimator; tests require the two to agree.
pub fn auc_pair_count(genuine: &[f64], impostor: &[f64]) -> Result<f64> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::EmptyScores);
    }
    let mut wins = 0.0f64;
    for &g in genuine {
        for &i in impostor {
            if g > i {
                wins += 1.0;
            } else if g == i {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (genuine.len() as f64 * impostor.len() as f64))
}

/// Rank-k identification accuracy by cosine to the best gallery exemplar of
/// each class. Ranks use strict dominance, so score ties do not hurt.
pub fn identification_metrics(
    gallery: &FeatureBatch,
    probes: &FeatureBatch,
    ranks: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let mut classes: Vec<usize> = gallery.labels().to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut hits = vec![0usize; ranks.len()];
    for p in 0..probes.len() {
        let label = probes.label(p);
        if !classes.contains(&label) {
            return Err(Error::EmptyGallery);
        }
        let mut own_score = f64::NEG_INFINITY;
        let mut scores = Vec::with_capacity(classes.len());
        for &c in &classes {
            let mut best = f64::NEG_INFINITY;
            for g in 0..gallery.len() {
                if gallery.label(g) == c {
                    let s = cosine_similarity(
                        probes.feature(p).as_slice(),
                        gallery.feature(g).as_slice(),
                    )?;
                    best = best.max(s);
                }
            }
            if c == label {
                own_score = best;
            }
            scores.push((c, best));
        }
        let rank = 1 + scores
            .iter()
            .filter(|(c, s)| *c != label && *s > own_score)
            .count();
        for (slot, &k) in ranks.iter().enumerate() {
            if rank <= k {
                hits[slot] += 1;
            }
        }
    }
    Ok(ranks
        .iter()
        .zip(hits)
        .map(|(&k, h)| (k, h as f64 / probes.len() as f64))
        .collect())
}

/// One point of the two-proxy plane scatter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRow {
    pub sample_id: String,
    pub x: f64,
    pub y: f64,
    pub magnitude: f64,
    pub p_d: f64,
}

/// Projects every sample labeled with either class of the pair onto the
/// plane the two proxies span, plus the proxy rays themselves. The margin
/// scale `s` is needed for the guidance column.
pub fn projection_export(
    batch: &FeatureBatch,
    proxies: &ProxyMatrix,
    class_pair: (usize, usize),
    s: f64,
) -> Result<Vec<ProjectionRow>> {
    let (a, b) = class_pair;
    if a == b || a >= proxies.class_count() || b >= proxies.class_count() {
        return Err(Error::InvalidLabel {
            label: a.max(b),
            classes: proxies.class_count(),
        });
    }
    let w1 = proxies.row(a).as_slice();
    let w2 = proxies.row(b).as_slice();
    let mut rows = Vec::new();
    for i in 0..batch.len() {
        if batch.label(i) != a && batch.label(i) != b {
            continue;
        }
        let z = batch.feature(i);
        let (x, y) = gram_schmidt_project(z.as_slice(), w1, w2)?;
        rows.push(ProjectionRow {
            sample_id: i.to_string(),
            x,
            y,
            magnitude: z.magnitude(),
            p_d: guidance_value(z, batch.label(i), proxies, s)?,
        });
    }
    for &class in &[a, b] {
        let w = proxies.row(class);
        let (x, y) = gram_schmidt_project(w.as_slice(), w1, w2)?;
        rows.push(ProjectionRow {
            sample_id: format!("proxy_{class}"),
            x,
            y,
            magnitude: w.magnitude(),
            p_d: guidance_value(w, class, proxies, s)?,
        });
    }
    Ok(rows)
}
