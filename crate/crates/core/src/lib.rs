//! Long-tailed dataset distillation by fair batch-norm statistics alignment.
//!
//! The pipeline trains debiased observer/teacher networks on a long-tailed
//! dataset, rebuilds class-balanced BN statistics with a count-weighted pass,
//! initializes a class-balanced synthetic set from teacher-scored crops,
//! optimizes its pixels to match the BN statistics, relabels it with teacher
//! soft labels, and evaluates it by training students from scratch.

pub mod augment;
pub mod codec;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod expert;
pub mod gradcheck;
pub mod init;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod recalib;
pub mod recovery;
pub mod tape;
pub mod tensor;

pub use data::{LongTailDataset, LongTailSpec};
pub use error::{Error, Result};
pub use model::{ConvNetSpec, Forward, Layer, Mode, Model};
pub use optim::{Optimizer, OptimizerConfig};
pub use tape::{Real, Tape, Var};
pub use tensor::Tensor;
