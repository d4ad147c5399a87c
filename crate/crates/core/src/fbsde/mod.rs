//! Fixed-coefficient solver: value heads for the McKean–Vlasov FBSDE,
//! path simulation, the losses `l_MKV`, `l_HJB`, `l_T` and the alternating
//! training loop.

mod losses;
mod paths;
mod train;
mod value;

pub use losses::{loss_hjb, loss_terminal};
pub use paths::{loss_mkv, simulate_paths, PathBatch, StepMeasures};
pub use train::{train_fixed, train_fixed_with, FixedConfig, FixedSolution, RoundRecord, WarmStart};
pub use value::{Head, HeadLayout, ValueField, ValuePath};
