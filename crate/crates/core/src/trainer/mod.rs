//! Optimizers, schedules, checkpoints and the pretraining and fine-tuning loops.

pub mod checkpoint;
pub mod ema;
pub mod eval;
pub mod finetune;
pub mod metrics;
pub mod optim;
pub mod prefetch;
pub mod pretrain;
pub mod schedule;
pub mod ssl;

pub use checkpoint::Checkpoint;
pub use ema::ema_update;
pub use eval::{evaluate, predict_volume, SegReport};
pub use finetune::{finetune, EncoderInit, FinetuneOutcome, FinetunePlan, SegLoss};
pub use optim::{Lars, LarsConfig, Sgd};
pub use pretrain::{pretrain, PretrainOutcome, PretrainPlan};
pub use schedule::{cosine_lr, ema_omega};
pub use ssl::{ssl_train_step, SslModel, SslState, StepMetrics, StepMode};
