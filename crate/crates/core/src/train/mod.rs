//! Optimisation: Rectified Adam, plateau schedule, early stopping,
//! stratified splits, class balancing and the training loop.

pub mod balance;
pub mod radam;
pub mod schedule;
pub mod split;
pub mod trainer;

pub use balance::{balance, class_weights, Strategy, TrainItem};
pub use radam::RAdam;
pub use schedule::{early_stopping, EarlyStopping, PlateauScheduler, StopDecision};
pub use split::{make_splits, SplitPlan};
pub use trainer::{evaluate, train, EpochLog, TrainConfig, TrainOutcome};
