//! Trained-model artifacts: a checkpoint directory (config, weights,
//! vocabulary) plus `flicc_artifact.json` describing how to use it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use flicc_nn::{checkpoint, safetensors, Batch, LoraSpec, NnError, SequenceClassifier, WordPiece};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::taxonomy::{Fallacy, NUM_LABELS};

pub const ARTIFACT_FORMAT_VERSION: u32 = 1;
pub const META_FILE: &str = "flicc_artifact.json";

/// Sequences per forward pass when scoring many texts.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum ArtifactError {
    #[error("artifact at {path} is corrupt: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("artifact format {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("cannot write artifact to {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] NnError),
}

pub type Result<T, E = ArtifactError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub format_version: u32,
    /// `<checkpoint id>@<first 12 hex digits of the weights hash>`.
    pub model_version: String,
    pub checkpoint_id: String,
    /// Output classes in logit order.
    pub labels: Vec<String>,
    /// Inputs are cut to this many tokens, `[CLS]` and `[SEP]` included.
    pub max_seq_len: usize,
    #[serde(default)]
    pub lora: Option<LoraSpec>,
    pub weights_sha256: String,
    pub created_by: String,
}

/// A classifier with its tokenizer and truncation policy.
#[derive(Debug, Clone)]
pub struct Artifact {
    pub model: SequenceClassifier,
    pub tokenizer: WordPiece,
    pub meta: ArtifactMeta,
}

fn weights_bytes(model: &mut SequenceClassifier) -> Result<Vec<u8>> {
    Ok(safetensors::serialize(&checkpoint::state_dict(model), &BTreeMap::new())?)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Artifact {
    pub fn new(
        mut model: SequenceClassifier,
        tokenizer: WordPiece,
        checkpoint_id: &str,
        max_seq_len: usize,
        lora: Option<LoraSpec>,
    ) -> Result<Self> {
        let hash = sha256_hex(&weights_bytes(&mut model)?);
        let meta = ArtifactMeta {
            format_version: ARTIFACT_FORMAT_VERSION,
            model_version: format!("{checkpoint_id}@{}", &hash[..12]),
            checkpoint_id: checkpoint_id.to_string(),
            labels: Fallacy::ALL.iter().map(|f| f.canonical_name().to_string()).collect(),
            max_seq_len,
            lora,
            weights_sha256: hash,
            created_by: format!("flicc-core {}", env!("CARGO_PKG_VERSION")),
        };
        Ok(Self { model, tokenizer, meta })
    }

    pub fn save(&mut self, dir: &Path) -> Result<()> {
        checkpoint::save_classifier(dir, &mut self.model, &self.tokenizer, &BTreeMap::new())?;
        let path = dir.join(META_FILE);
        let json = serde_json::to_string_pretty(&self.meta).expect("meta serializes");
        fs::write(&path, json).map_err(|source| ArtifactError::Io { path, source })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let corrupt = |reason: String| ArtifactError::Corrupt {
            path: dir.to_path_buf(),
            reason,
        };
        let meta_text = fs::read_to_string(dir.join(META_FILE)).map_err(|e| corrupt(format!("{META_FILE}: {e}")))?;
        let probe: serde_json::Value =
            serde_json::from_str(&meta_text).map_err(|e| corrupt(format!("{META_FILE}: {e}")))?;
        let found = probe.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != ARTIFACT_FORMAT_VERSION {
            return Err(ArtifactError::VersionMismatch {
                found,
                expected: ARTIFACT_FORMAT_VERSION,
            });
        }
        let meta: ArtifactMeta = serde_json::from_value(probe).map_err(|e| corrupt(format!("{META_FILE}: {e}")))?;
        let expected: Vec<&str> = Fallacy::ALL.iter().map(|f| f.canonical_name()).collect();
        if meta.labels != expected {
            return Err(corrupt(format!("label set {:?} differs from the taxonomy", meta.labels)));
        }
        let weights = fs::read(dir.join(checkpoint::WEIGHTS_FILE))
            .map_err(|e| corrupt(format!("{}: {e}", checkpoint::WEIGHTS_FILE)))?;
        if sha256_hex(&weights) != meta.weights_sha256 {
            return Err(corrupt("weights do not match the recorded hash".into()));
        }
        let (model, tokenizer, report) =
            checkpoint::load_adapted_classifier(dir, NUM_LABELS, 0, meta.lora.as_ref()).map_err(|e| corrupt(e.to_string()))?;
        if !report.initialized.is_empty() {
            return Err(corrupt(format!("missing tensors: {}", report.initialized.join(", "))));
        }
        Ok(Self { model, tokenizer, meta })
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.tokenizer.encode(text, self.meta.max_seq_len)
    }

    pub fn logits(&self, texts: &[&str]) -> Result<Array2<f32>> {
        batched_logits(&self.model, &self.tokenizer, self.meta.max_seq_len, texts)
    }
}

/// Logits for many texts, evaluated in fixed-size chunks.
pub fn batched_logits(
    model: &SequenceClassifier,
    tokenizer: &WordPiece,
    max_seq_len: usize,
    texts: &[&str],
) -> Result<Array2<f32>> {
    let mut out = Array2::zeros((texts.len(), model.num_labels()));
    for (c, chunk) in texts.chunks(EVAL_CHUNK).enumerate() {
        let ids: Vec<Vec<u32>> = chunk.iter().map(|t| tokenizer.encode(t, max_seq_len)).collect();
        let logits = model.logits(&Batch::from_sequences(&ids))?;
        out.slice_mut(ndarray::s![c * EVAL_CHUNK..c * EVAL_CHUNK + chunk.len(), ..])
            .assign(&logits);
    }
    Ok(out)
}

/// Index of the largest value; the earliest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predicted_labels(logits: &Array2<f32>) -> Vec<Fallacy> {
    logits
        .rows()
        .into_iter()
        .map(|r| {
            let row: Vec<f64> = r.iter().map(|&x| x as f64).collect();
            Fallacy::ALL[argmax(&row)]
        })
        .collect()
}
