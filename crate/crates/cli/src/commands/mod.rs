//! The five batch commands.

mod eval;
mod heatmap;
mod matrix;
mod synth;
mod train;

pub use eval::cmd_eval;
pub use heatmap::cmd_heatmap;
pub use matrix::cmd_matrix;
pub use synth::cmd_synth;
pub use train::cmd_train;
