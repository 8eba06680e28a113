//! Teacher/student training workflow, checkpoints, silver annotations and
//! single/fusion inference.

mod checkpoint;
mod infer;
mod optim;
mod silver;
mod train;

pub use checkpoint::{Checkpoint, NamedTensor, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use infer::{infer_fusion, infer_single, pseudo_document, relation_margins};
pub use optim::{clip_gradients, linear_schedule, Adam};
pub use silver::{infer_silver, PairSilver, SilverAnnotation, SilverDocument};
pub use train::{
    finetune_student, pair_supervision, read_log, train, train_student, train_teacher, write_log, LogRecord,
    Supervision,
};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Training stage, each with its own defaults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainPhase {
    Teacher,
    StudentDistill,
    StudentFinetune,
}

impl TrainPhase {
    pub fn loss_phase(self) -> crate::losses::Phase {
        match self {
            TrainPhase::StudentDistill => crate::losses::Phase::Student,
            _ => crate::losses::Phase::Teacher,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: TrainPhase,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    /// Learning rate of the context encoder.
    pub lr_encoder: f64,
    /// Learning rate of the layers on top of the encoder.
    pub lr_added: f64,
    pub warmup_ratio: f64,
    pub max_grad_norm: f64,
    pub lambda: f64,
    pub seed: u64,
    /// Rayon threads for per-document work; 0 uses the global pool.
    pub workers: usize,
}

impl TrainConfig {
    /// Defaults of each stage.
    pub fn for_phase(phase: TrainPhase) -> Self {
        let base = Self {
            phase,
            epochs: 30,
            batch_size: 4,
            grad_accum: 1,
            lr_encoder: 5e-5,
            lr_added: 5e-5,
            warmup_ratio: 0.06,
            max_grad_norm: 1.0,
            lambda: 0.1,
            seed: 66,
            workers: 0,
        };
        match phase {
            TrainPhase::Teacher => base,
            TrainPhase::StudentDistill => Self {
                epochs: 2,
                grad_accum: 2,
                lr_encoder: 3e-5,
                lr_added: 3e-5,
                max_grad_norm: 5.0,
                ..base
            },
            TrainPhase::StudentFinetune => Self {
                epochs: 10,
                lr_encoder: 1e-6,
                lr_added: 3e-6,
                max_grad_norm: 2.0,
                ..base
            },
        }
    }

    /// Checks every field, naming the first bad one.
    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if self.batch_size == 0 {
            return err("batch_size", "must be positive".into());
        }
        if self.grad_accum == 0 {
            return err("grad_accum", "must be positive".into());
        }
        for (name, v) in [("lr_encoder", self.lr_encoder), ("lr_added", self.lr_added)] {
            if !(v.is_finite() && v >= 0.0) {
                return err(name, format!("{v} is not a nonnegative number"));
            }
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return err("warmup_ratio", format!("{} outside [0, 1]", self.warmup_ratio));
        }
        if !(self.max_grad_norm > 0.0) {
            return err("max_grad_norm", format!("{} must be positive", self.max_grad_norm));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return err("lambda", format!("{} outside [0, 1]", self.lambda));
        }
        Ok(())
    }
}

/// Optional dedicated thread pool; `0` workers means the global pool.
pub(crate) struct Workers(Option<rayon::ThreadPool>);

impl Workers {
    pub(crate) fn new(workers: usize) -> Result<Self> {
        if workers == 0 {
            return Ok(Self(None));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map(|p| Self(Some(p)))
            .map_err(|e| Error::Config(format!("workers: {e}")))
    }

    pub(crate) fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        match &self.0 {
            Some(pool) => pool.install(f),
            None => f(),
        }
    }
}
