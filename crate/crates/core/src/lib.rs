//! Graph attention network that maps molecular graphs to Antoine
//! vapor-pressure parameters, together with the data curation, training
//! and evaluation pipeline around it.

// NaN-rejecting guards are written as negated comparisons.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod antoine;
pub mod dataio;
pub mod gnn;
pub mod metrics;
pub mod model;
pub mod molgraph;
pub mod pooling;
pub mod tensor;
pub mod train;
