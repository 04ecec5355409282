//! Fine-tuning of sequence classifiers and the staged hyperparameter sweep.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::artifact::ArtifactError;
use crate::corpus::CorpusError;
use crate::metrics::{ClassificationReport, MetricsError};

pub mod registry;
pub mod sweep;
mod trainer;

pub use flicc_nn::loss::{cross_entropy, focal_loss, LossError};
pub use registry::{resolve_checkpoint, CheckpointSource, ScratchSize};
pub use sweep::{select_best, sweep, DiskExecutor, GridRow, RunExecutor, StageKind, StagePlan, StagedRun, SweepOutcome};
pub use trainer::{estimate_memory_bytes, evaluate, fine_tune, fine_tune_lora, TrainOptions, TrainedRun};

pub const LEARNING_RATES: [f64; 3] = [1.0e-5, 5.0e-5, 1.0e-4];
pub const GAMMAS: [f64; 4] = [2.0, 4.0, 8.0, 12.0];
pub const WEIGHT_DECAYS: [f64; 2] = [0.01, 0.1];
pub const LORA_GRID: [(usize, usize); 4] = [(8, 8), (8, 16), (16, 8), (16, 16)];

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("checkpoint `{id}` is unavailable: {hint}")]
    CheckpointUnavailable { id: String, hint: String },
    #[error("checkpoint `{id}` is not supported: {reason}")]
    UnsupportedCheckpoint { id: String, reason: String },
    #[error(
        "estimated {required_mb} MiB needed but only {available_mb} MiB available; try batch_size = {suggested_batch_size}"
    )]
    OutOfMemory {
        required_mb: u64,
        available_mb: u64,
        suggested_batch_size: usize,
    },
    #[error("loss became {loss} at epoch {epoch}, step {step}")]
    DivergedLoss { epoch: usize, step: usize, loss: f64 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty input")]
    EmptyInput,
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] flicc_nn::NnError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Focal { gamma: f64 },
}

impl Default for LossKind {
    fn default() -> Self {
        LossKind::CrossEntropy
    }
}

impl LossKind {
    /// Focal loss with γ = 0 is cross-entropy.
    pub fn gamma(&self) -> f64 {
        match self {
            LossKind::CrossEntropy => 0.0,
            LossKind::Focal { gamma } => *gamma,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraSettings {
    pub rank: usize,
    pub alpha: usize,
}

fn default_batch_size() -> usize {
    32
}

fn default_max_epochs() -> usize {
    30
}

fn default_patience() -> usize {
    3
}

fn default_grad_norm() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub checkpoint_id: String,
    pub learning_rate: f64,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora: Option<LoraSettings>,
    /// Token budget per input; defaults to the checkpoint's position limit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_seq_len: Option<usize>,
    #[serde(default = "default_grad_norm")]
    pub max_grad_norm: f64,
    #[serde(default)]
    pub warmup_ratio: f64,
}

impl TrainConfig {
    pub fn new(checkpoint_id: impl Into<String>, learning_rate: f64) -> Self {
        Self {
            checkpoint_id: checkpoint_id.into(),
            learning_rate,
            loss: LossKind::CrossEntropy,
            weight_decay: 0.0,
            batch_size: default_batch_size(),
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            seed: 0,
            lora: None,
            max_seq_len: None,
            max_grad_norm: default_grad_norm(),
            warmup_ratio: 0.0,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.checkpoint_id.trim().is_empty() {
            return bad("checkpoint_id is empty".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.loss.gamma().is_finite() && self.loss.gamma() >= 0.0) {
            return bad(format!("gamma {} must be non-negative", self.loss.gamma()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be at least 1".into());
        }
        if let Some(l) = self.lora {
            if l.rank == 0 || l.alpha == 0 {
                return bad("lora rank and alpha must be at least 1".into());
            }
        }
        if self.max_seq_len.is_some_and(|m| m < 3) {
            return bad("max_seq_len must leave room for [CLS], one token and [SEP]".into());
        }
        if !(self.max_grad_norm > 0.0) || !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad("max_grad_norm must be positive and warmup_ratio in [0, 1)".into());
        }
        Ok(())
    }

    /// Ways this config leaves the published grid.
    pub fn protocol_deviations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let member = |v: f64, grid: &[f64]| grid.iter().any(|g| (g - v).abs() <= 1e-12 * g.abs().max(1.0));
        if !member(self.learning_rate, &LEARNING_RATES) {
            out.push(format!("learning_rate {} not in {LEARNING_RATES:?}", self.learning_rate));
        }
        if let LossKind::Focal { gamma } = self.loss {
            if !member(gamma, &GAMMAS) {
                out.push(format!("gamma {gamma} not in {GAMMAS:?}"));
            }
        }
        if self.weight_decay != 0.0 && !member(self.weight_decay, &WEIGHT_DECAYS) {
            out.push(format!("weight_decay {} not in 0, 0.01, 0.1", self.weight_decay));
        }
        if let Some(l) = self.lora {
            if ![8, 16].contains(&l.rank) || ![8, 16].contains(&l.alpha) {
                out.push(format!("lora rank {} alpha {} outside 8/16", l.rank, l.alpha));
            }
        }
        if self.batch_size != 32 {
            out.push(format!("batch_size {} (published: 32)", self.batch_size));
        }
        if self.max_epochs != 30 {
            out.push(format!("max_epochs {} (published: 30)", self.max_epochs));
        }
        if self.patience != 3 {
            out.push(format!("patience {} (published: 3)", self.patience));
        }
        out
    }

    /// Short human-readable tag, e.g. `lr=1e-5 focal(4) wd=0.01`.
    pub fn describe(&self) -> String {
        let mut s = format!("{} lr={:e}", self.checkpoint_id, self.learning_rate);
        match self.loss {
            LossKind::CrossEntropy => s.push_str(" ce"),
            LossKind::Focal { gamma } => s.push_str(&format!(" focal({gamma})")),
        }
        if self.weight_decay > 0.0 {
            s.push_str(&format!(" wd={}", self.weight_decay));
        }
        if let Some(l) = self.lora {
            s.push_str(&format!(" lora(r={},a={})", l.rank, l.alpha));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1_macro: f64,
    pub val_accuracy: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub total: usize,
    pub trainable: usize,
}

impl ParamCounts {
    pub fn trainable_ratio(&self) -> f64 {
        self.trainable as f64 / self.total.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config: TrainConfig,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_f1_macro: f64,
    pub stopped_early: bool,
    pub params: ParamCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_artifact: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_report: Option<ClassificationReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Continue { improved: bool },
    Stop,
}

/// Stops after `patience` consecutive epochs without a strictly better score.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, score: f64) -> Decision {
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.best_epoch = epoch;
            self.stale = 0;
            return Decision::Continue { improved: true };
        }
        self.stale += 1;
        if self.stale >= self.patience {
            Decision::Stop
        } else {
            Decision::Continue { improved: false }
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

/// Replays a sequence of validation scores through the stopping rule.
/// Returns `(epochs run, best epoch)`.
pub fn simulate_early_stopping(scores: &[f64], patience: usize, max_epochs: usize) -> (usize, usize) {
    let mut stopper = EarlyStopping::new(patience);
    let mut run = 0;
    for (i, &s) in scores.iter().take(max_epochs).enumerate() {
        run = i + 1;
        if stopper.observe(run, s) == Decision::Stop {
            break;
        }
    }
    (run, stopper.best_epoch())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stopping_rule_by_hand() {
        assert_eq!(simulate_early_stopping(&[0.50, 0.60, 0.59, 0.58, 0.57], 3, 30), (5, 2));
        // Equal scores are not improvements.
        assert_eq!(simulate_early_stopping(&[0.5, 0.5, 0.5, 0.5, 0.9], 3, 30), (4, 1));
        assert_eq!(simulate_early_stopping(&[0.1, 0.2, 0.3], 3, 2), (2, 2));
    }

    #[test]
    fn config_toml_round_trip() {
        let text = r#"
checkpoint_id = "bert-base-uncased"
learning_rate = 1e-5
weight_decay = 0.01
seed = 7
loss = { kind = "focal", gamma = 4.0 }
lora = { rank = 8, alpha = 16 }
"#;
        let c = TrainConfig::from_toml(text).unwrap();
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.max_epochs, 30);
        assert_eq!(c.patience, 3);
        assert_eq!(c.loss, LossKind::Focal { gamma: 4.0 });
        assert!(c.protocol_deviations().is_empty());
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn invalid_configs() {
        let mut c = TrainConfig::new("scratch:tiny", 1e-5);
        c.weight_decay = -1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::new("scratch:tiny", 0.0);
        assert!(c.validate().is_err());
        c.learning_rate = 3e-4;
        c.loss = LossKind::Focal { gamma: 6.0 };
        assert_eq!(c.protocol_deviations().len(), 2);
        assert!(TrainConfig::from_toml("learning_rate = 1e-5").is_err());
    }

    #[test]
    fn cross_entropy_is_focal_with_zero_gamma() {
        assert_eq!(LossKind::CrossEntropy.gamma(), 0.0);
        let probs = [0.25, 0.75];
        assert!((focal_loss(&probs, 1, 0.0).unwrap() - cross_entropy(&probs, 1).unwrap()).abs() < 1e-15);
    }
}
