//! Differentiable primitives, the Adam update, gradient verification, and
//! weight persistence. All math is 64-bit and single-threaded per model
//! instance, so training is bitwise deterministic given (seed, data, config).

pub mod adam;
pub mod fastexp;
pub mod fdcheck;
pub mod mat;
pub mod params;
pub mod tape;
pub mod weights_io;

pub use adam::{AdamHyper, AdamState};
pub use fdcheck::{finite_diff_check, FdReport};
pub use mat::Mat;
pub use params::{ParamSet, ParamTensor};
pub use tape::{dense, NodeId, Tape};
