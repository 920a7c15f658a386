//! Statistical comparison of pruning curves and curve smoothing.

mod mwu;
mod polyfit;

pub use mwu::{
    compare_curves, mann_whitney_u, mann_whitney_u_with, read_mwu_csv, u_distribution, write_mwu_csv,
    MwuMethod, MwuMode, MwuResult, MwuRow, EXACT_LIMIT,
};
pub use polyfit::{polyfit, PolyFit, DEFAULT_DEGREE};
