//! Optimizers and the adversarial training loop.

mod optim;
mod session;
mod trainer;

pub use optim::{trust_ratio, warmup_lr, Optimizer, OptimizerKind, ADAM_EPS, BETA1, BETA2, MAX_TRUST};
pub use session::{train_from_config, Session};
pub use trainer::{load_generator, LogRecord, TrainConfig, Trainer};
