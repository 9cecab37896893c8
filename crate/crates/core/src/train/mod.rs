//! Training regimes, the training loop and the full regime matrix.

mod matrix;
mod regime;
mod trainer;

pub use matrix::{regime_matrix, train_regimes, TrainedRegime};
pub use regime::{matrix_regimes, Mode, Regime, RegimeKind};
pub use trainer::{dev_loss, encode_examples, loss_csv, train, write_loss_csv, EpochRecord, TrainConfig, TrainOutcome};
