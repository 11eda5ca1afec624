#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod cli;
pub mod dncs;
pub mod grid_model;
pub mod linalg;
pub mod sampled;
pub mod sim_eval;
pub mod synthesis;
