#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod flow;
pub mod model;
pub mod montecarlo;
pub mod noise;
pub mod schemes;
