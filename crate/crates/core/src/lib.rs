//! Sparse spatial weight matrix estimation for spatiotemporal dynamic panels.
// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops mirror the matrix formulas; segment lists are often one range.
#![allow(clippy::needless_range_loop, clippy::single_range_in_vec_init)]

pub mod error;
pub mod evaluate;
pub mod inference;
pub mod io;
pub mod model;
pub mod cli;
pub mod cv;
pub mod optimize;
pub mod simulate;

pub use error::{Error, Result};
pub use model::{ModelParams, PanelData, ParamLayout, ParamVector, StationarityReport};
pub use optimize::{fit, FitResult, PenaltyConfig, SolverOptions, Support};
