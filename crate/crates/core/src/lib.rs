#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clutter;
pub mod detectors;
pub mod metrics;
pub mod rank;
pub mod rng;
pub mod sim;
pub mod special;
pub mod window;
