use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cosine values are clamped to [-1 + COS_EPS, 1 - COS_EPS] so that acos and
/// the sin terms derived from it stay away from the poles.
pub const COS_EPS: f64 = 1e-12;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn scaled(a: &[f64], c: f64) -> Vec<f64> {
    a.iter().map(|x| c * x).collect()
}

pub fn axpy(acc: &mut [f64], c: f64, v: &[f64]) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += c * x;
    }
}

/// Unit vector in the direction of `a`, or ZeroVector if it has no direction.
pub fn normalized(a: &[f64]) -> Result<Vec<f64>> {
    let n = norm(a);
    if !n.is_finite() || n == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(scaled(a, 1.0 / n))
}

/// An embedding in R^d, d >= 2, all entries finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureVector {
    values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::ZeroVector);
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn magnitude(&self) -> f64 {
        norm(&self.values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// One proxy (class anchor) per class, as rows. C >= 2, no zero rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxyMatrix {
    rows: Vec<FeatureVector>,
}

impl ProxyMatrix {
    pub fn new(rows: Vec<FeatureVector>) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::InvalidConfig {
                reason: format!("need at least 2 proxies, got {}", rows.len()),
            });
        }
        let d = rows[0].dim();
        for r in &rows {
            if r.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: r.dim(),
                });
            }
            if r.magnitude() == 0.0 {
                return Err(Error::ZeroVector);
            }
        }
        Ok(Self { rows })
    }

    pub fn class_count(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.rows[0].dim()
    }

    pub fn row(&self, class: usize) -> &FeatureVector {
        &self.rows[class]
    }

    pub fn rows(&self) -> &[FeatureVector] {
        &self.rows
    }
}

/// Per-sample generation metadata carried alongside the embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    pub noise_sigma: f64,
    pub mislabeled: bool,
}

/// Embeddings with labels and metadata, all three aligned by index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureBatch {
    features: Vec<FeatureVector>,
    labels: Vec<usize>,
    meta: Vec<SampleMeta>,
}

impl FeatureBatch {
    pub fn new(
        features: Vec<FeatureVector>,
        labels: Vec<usize>,
        meta: Vec<SampleMeta>,
    ) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::InvalidConfig {
                reason: "batch must contain at least one sample".into(),
            });
        }
        if features.len() != labels.len() || features.len() != meta.len() {
            return Err(Error::DimensionMismatch {
                expected: features.len(),
                got: labels.len().max(meta.len()),
            });
        }
        let d = features[0].dim();
        for f in &features {
            if f.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: f.dim(),
                });
            }
        }
        Ok(Self {
            features,
            labels,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features[0].dim()
    }

    pub fn feature(&self, i: usize) -> &FeatureVector {
        &self.features[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn meta(&self, i: usize) -> &SampleMeta {
        &self.meta[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn set_feature(&mut self, i: usize, f: FeatureVector) -> Result<()> {
        if f.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: f.dim(),
            });
        }
        self.features[i] = f;
        Ok(())
    }

    /// Checks every label addresses a proxy row and dimensions line up.
    pub fn validate_against(&self, proxies: &ProxyMatrix) -> Result<()> {
        if self.dim() != proxies.dim() {
            return Err(Error::DimensionMismatch {
                expected: proxies.dim(),
                got: self.dim(),
            });
        }
        for &l in &self.labels {
            if l >= proxies.class_count() {
                return Err(Error::InvalidLabel {
                    label: l,
                    classes: proxies.class_count(),
                });
            }
        }
        Ok(())
    }
}

/// Clamped cosine of the angle between two vectors.
///
/// The clamp keeps downstream acos/sin expressions finite: two identical
/// directions report 1 - 1e-12, not 1.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::ZeroVector);
    }
    let c = dot(a, b) / (na * nb);
    Ok(c.clamp(-1.0 + COS_EPS, 1.0 - COS_EPS))
}

/// Angle between two vectors, strictly inside (0, pi) thanks to the clamp.
pub fn angle(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(cosine_similarity(a, b)?.acos())
}

/// Coordinates of `z` in the orthonormal frame spanned by two proxies:
/// e1 along w1, e2 the component of w2 orthogonal to w1.
///
/// This is an orthogonal projection, so the returned point never has a
/// larger norm than `z`, and vectors already in span(w1, w2) are mapped
/// isometrically. Fails if the proxies do not span a plane.
pub fn gram_schmidt_project(z: &[f64], w1: &[f64], w2: &[f64]) -> Result<(f64, f64)> {
    let c = cosine_similarity(w1, w2)?;
    if c.abs() >= 1.0 - 1e-9 {
        return Err(Error::CollinearProxies);
    }
    if z.len() != w1.len() {
        return Err(Error::DimensionMismatch {
            expected: w1.len(),
            got: z.len(),
        });
    }
    let e1 = normalized(w1)?;
    let mut e2 = normalized(w2)?;
    let proj = dot(&e2, &e1);
    axpy(&mut e2, -proj, &e1);
    let e2 = normalized(&e2)?;
    Ok((dot(z, &e1), dot(z, &e2)))
}
