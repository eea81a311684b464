//! Loss, optimisers, gradient checking, the training loop and few-shot
//! episode sampling.

mod fewshot;
mod gradcheck;
mod loss;
mod optim;
mod train;

pub use fewshot::{few_shot_episodes, mean_std, FewShotEpisode, TEST_PER_CLASS};
pub use gradcheck::{
    check_case, grad_check, gradcheck_suite, relative_error, BlockReport, CaseReport, CheckKind, GradCheckOptions,
    GradCheckReport,
};
pub use loss::cross_entropy;
pub use optim::{CosineSchedule, Optimizer, OptimizerKind};
pub use train::{accuracy, evaluate, predict_all, train, Accuracy, Augment, Dataset, EpochLog, Prepared, TrainConfig};
