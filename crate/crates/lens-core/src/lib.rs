//! Implicit deep ensembles on a micro vision transformer.
//!
//! Ensemble members share one frozen backbone and differ through small
//! trainable attachments: low-rank adapter pairs on the attention
//! projections, rank-one weight factorizations, independent heads, dropout
//! samples, epistemic-index networks, cyclic snapshots or full copies. The
//! crate provides the reverse-mode tape the models train on, the training
//! loop, calibration and OOD metrics, weight-space diversity diagnostics and
//! a synthetic data harness, all reproducible from a single run seed.

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod diversity;
pub mod ensemble;
pub mod metrics;
pub mod rng;
pub mod tensor;
pub mod train;
