//! Loss terms, the multitask objective and the training loops.

mod losses;
mod trainer;

pub use losses::{cls, loss_cls, loss_pnlty, loss_recst, pnlty, recst, LossBreakdown};
pub use trainer::{ar_from_nat, nat_step, train, train_ar, LogRow, Objective, StepResult, TrainConfig, TrainLog};
