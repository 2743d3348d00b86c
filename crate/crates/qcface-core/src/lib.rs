//! Margin-softmax losses on the hypersphere with a guidance-driven feature
//! magnitude regularizer, their analytic gradients, a desk-scale planning
//! trainer, and the analysis metrics used to inspect the trained geometry.
//!
//! The crate is organized bottom-up: `geometry` holds the vector types and
//! cosine/projection primitives; `margin` the loss family (additive and
//! multiplicative angle margins, cosine margins, magnitude- and
//! batch-norm-adaptive variants, hard-negative reweighting); `reg` the
//! magnitude regularizer whose target interpolates between anchors as the
//! detached guidance probability rises; `grad` the closed-form gradients
//! plus finite-difference verification; `synth`/`train` the synthetic data
//! and two-phase trainer; `analysis` histograms, correlations, and
//! verification/identification metrics.

pub mod analysis;
pub mod error;
pub mod geometry;
pub mod grad;
pub mod margin;
pub mod reg;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
