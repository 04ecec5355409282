//! Resolves checkpoint ids to loadable weights.
//!
//! Ids are looked up, in order, as
//! 1. `scratch:tiny|small|base`: a randomly initialised BERT of that size whose
//!    vocabulary is built from the training texts;
//! 2. a path to an existing checkpoint directory;
//! 3. `<root>/<id>` for every root in `FLICC_MODEL_DIR` (colon-separated);
//! 4. the Hugging Face hub cache (`$HF_HOME/hub` or `~/.cache/huggingface/hub`).
//!
//! Only BERT-family checkpoints with safetensors weights can be loaded.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use flicc_nn::{checkpoint, BertConfig, LoraSpec, SequenceClassifier, WordPiece};

use super::{Result, TrainError};

/// Vocabulary size for scratch models.
const SCRATCH_VOCAB: usize = 8192;
/// Position limit of scratch models.
const SCRATCH_MAX_LEN: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScratchSize {
    Tiny,
    Small,
    Base,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CheckpointSource {
    Scratch(ScratchSize),
    Directory(PathBuf),
}

fn hub_cache() -> Option<PathBuf> {
    if let Ok(home) = env::var("HF_HOME") {
        return Some(PathBuf::from(home).join("hub"));
    }
    env::var("HOME").ok().map(|h| PathBuf::from(h).join(".cache/huggingface/hub"))
}

fn hub_snapshot(cache: &Path, id: &str) -> Option<PathBuf> {
    let snapshots = cache.join(format!("models--{}", id.replace('/', "--"))).join("snapshots");
    let mut dirs: Vec<PathBuf> = fs::read_dir(snapshots)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(checkpoint::CONFIG_FILE).exists())
        .collect();
    dirs.sort();
    dirs.pop()
}

pub fn resolve_checkpoint(id: &str) -> Result<CheckpointSource> {
    match id {
        "scratch:tiny" => return Ok(CheckpointSource::Scratch(ScratchSize::Tiny)),
        "scratch:small" => return Ok(CheckpointSource::Scratch(ScratchSize::Small)),
        "scratch:base" => return Ok(CheckpointSource::Scratch(ScratchSize::Base)),
        _ => {}
    }
    let direct = PathBuf::from(id);
    if direct.join(checkpoint::CONFIG_FILE).exists() {
        return Ok(CheckpointSource::Directory(direct));
    }
    if let Ok(roots) = env::var("FLICC_MODEL_DIR") {
        for root in env::split_paths(&roots) {
            let dir = root.join(id);
            if dir.join(checkpoint::CONFIG_FILE).exists() {
                return Ok(CheckpointSource::Directory(dir));
            }
        }
    }
    if let Some(dir) = hub_cache().and_then(|cache| hub_snapshot(&cache, id)) {
        return Ok(CheckpointSource::Directory(dir));
    }
    Err(TrainError::CheckpointUnavailable {
        id: id.to_string(),
        hint: "not a scratch:* id, a checkpoint directory, an entry under FLICC_MODEL_DIR or a cached hub download"
            .into(),
    })
}

/// A freshly loaded classifier with a 12-way head.
pub struct Loaded {
    pub model: SequenceClassifier,
    pub tokenizer: WordPiece,
    pub max_seq_len: usize,
}

fn scratch_config(size: ScratchSize, vocab: usize) -> BertConfig {
    let mut config = match size {
        ScratchSize::Tiny => BertConfig::tiny(vocab),
        ScratchSize::Small => BertConfig::small(vocab),
        ScratchSize::Base => BertConfig::base(vocab),
    };
    config.max_position_embeddings = SCRATCH_MAX_LEN;
    config
}

/// Architecture of a resolved checkpoint without loading weights; scratch
/// configs assume the full scratch vocabulary.
pub fn peek_config(source: &CheckpointSource) -> Result<BertConfig> {
    match source {
        CheckpointSource::Scratch(size) => Ok(scratch_config(*size, SCRATCH_VOCAB)),
        CheckpointSource::Directory(dir) => read_bert_config(dir),
    }
}

fn read_bert_config(dir: &Path) -> Result<BertConfig> {
    let text = fs::read_to_string(dir.join(checkpoint::CONFIG_FILE)).map_err(|e| TrainError::CheckpointUnavailable {
        id: dir.display().to_string(),
        hint: e.to_string(),
    })?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| TrainError::UnsupportedCheckpoint {
        id: dir.display().to_string(),
        reason: format!("config.json: {e}"),
    })?;
    let model_type = raw.get("model_type").and_then(|v| v.as_str()).unwrap_or("bert");
    if model_type != "bert" {
        return Err(TrainError::UnsupportedCheckpoint {
            id: dir.display().to_string(),
            reason: format!("model_type `{model_type}` (only BERT-family encoders are implemented)"),
        });
    }
    checkpoint::read_config(dir).map_err(|e| TrainError::UnsupportedCheckpoint {
        id: dir.display().to_string(),
        reason: e.to_string(),
    })
}

pub fn load(
    source: &CheckpointSource,
    num_labels: usize,
    seed: u64,
    corpus: &[&str],
    lora: Option<&LoraSpec>,
) -> Result<Loaded> {
    let (mut model, tokenizer) = match source {
        CheckpointSource::Scratch(size) => {
            let tokenizer = WordPiece::build_from_corpus(corpus, SCRATCH_VOCAB, true)?;
            let model = SequenceClassifier::new(scratch_config(*size, tokenizer.vocab_size()), num_labels, seed)?;
            (model, tokenizer)
        }
        CheckpointSource::Directory(dir) => {
            read_bert_config(dir)?;
            let (model, tokenizer, _) = checkpoint::load_classifier(dir, num_labels, seed)?;
            (model, tokenizer)
        }
    };
    if let Some(spec) = lora {
        model.attach_lora(spec, seed.wrapping_add(1))?;
    }
    let max_seq_len = model.config().max_position_embeddings;
    Ok(Loaded {
        model,
        tokenizer,
        max_seq_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scratch_ids_resolve() {
        assert_eq!(resolve_checkpoint("scratch:base").unwrap(), CheckpointSource::Scratch(ScratchSize::Base));
        assert!(matches!(
            resolve_checkpoint("no/such-model-anywhere"),
            Err(TrainError::CheckpointUnavailable { .. })
        ));
    }

    #[test]
    fn non_bert_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("config.json"), r#"{"model_type":"deberta-v2","vocab_size":10}"#).unwrap();
        let source = resolve_checkpoint(dir.path().to_str().unwrap()).unwrap();
        assert!(matches!(
            load(&source, 12, 0, &[], None),
            Err(TrainError::UnsupportedCheckpoint { .. })
        ));
    }

    #[test]
    fn hub_layout_is_found() {
        let cache = tempfile::tempdir().unwrap();
        let snap = cache.path().join("models--org--name/snapshots/abc123");
        fs::create_dir_all(&snap).unwrap();
        fs::write(snap.join("config.json"), "{}").unwrap();
        assert_eq!(hub_snapshot(cache.path(), "org/name"), Some(snap));
        assert_eq!(hub_snapshot(cache.path(), "org/other"), None);
    }
}
