//! Checkpoint directories in the Hugging Face layout:
//! `config.json`, `model.safetensors`, `vocab.txt`, `tokenizer_config.json`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{BertConfig, SequenceClassifier};
use crate::error::{NnError, Result};
use crate::lora::LoraSpec;
use crate::param::Parameters;
use crate::safetensors::{self, TensorData};
use crate::tokenizer::WordPiece;

pub const CONFIG_FILE: &str = "config.json";
pub const WEIGHTS_FILE: &str = "model.safetensors";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const TOKENIZER_CONFIG_FILE: &str = "tokenizer_config.json";

#[derive(Debug, Default, Serialize, Deserialize)]
struct TokenizerConfig {
    #[serde(default = "yes")]
    do_lower_case: bool,
}

fn yes() -> bool {
    true
}

/// Which tensors were freshly initialised and which checkpoint tensors went unused.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub initialized: Vec<String>,
    pub unused: Vec<String>,
}

fn candidate_names(name: &str) -> Vec<String> {
    let mut names = vec![name.to_string()];
    if let Some(stripped) = name.strip_prefix("bert.") {
        names.push(stripped.to_string());
    }
    let legacy: Vec<String> = names
        .iter()
        .filter_map(|n| {
            if let Some(base) = n.strip_suffix("LayerNorm.weight") {
                Some(format!("{base}LayerNorm.gamma"))
            } else {
                n.strip_suffix("LayerNorm.bias").map(|base| format!("{base}LayerNorm.beta"))
            }
        })
        .collect();
    names.extend(legacy);
    names
}

pub fn read_config(dir: &Path) -> Result<BertConfig> {
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| NnError::Config(format!("cannot read {}: {e}", path.display())))?;
    let config: BertConfig = serde_json::from_str(&text)?;
    config.validate()?;
    Ok(config)
}

pub fn read_tokenizer(dir: &Path) -> Result<WordPiece> {
    let lowercase = match fs::read_to_string(dir.join(TOKENIZER_CONFIG_FILE)) {
        Ok(text) => serde_json::from_str::<TokenizerConfig>(&text)?.do_lower_case,
        Err(_) => true,
    };
    WordPiece::from_vocab_file(&dir.join(VOCAB_FILE), lowercase)
}

/// Loads encoder weights into a classifier with `num_labels` outputs. Tensors
/// missing from the checkpoint (typically the classification head) keep their
/// seeded random initialisation and are listed in the report.
pub fn load_classifier(dir: &Path, num_labels: usize, seed: u64) -> Result<(SequenceClassifier, WordPiece, LoadReport)> {
    load_adapted_classifier(dir, num_labels, seed, None)
}

/// Like [`load_classifier`], but attaches adapters before loading so saved
/// `lora_A`/`lora_B` tensors are restored too.
pub fn load_adapted_classifier(
    dir: &Path,
    num_labels: usize,
    seed: u64,
    lora: Option<&LoraSpec>,
) -> Result<(SequenceClassifier, WordPiece, LoadReport)> {
    let config = read_config(dir)?;
    let weights = dir.join(WEIGHTS_FILE);
    if !weights.exists() {
        return Err(NnError::Config(format!(
            "{} not found (only safetensors weights are supported)",
            weights.display()
        )));
    }
    let (tensors, _) = safetensors::read(&weights)?;
    let tokenizer = read_tokenizer(dir)?;
    if tokenizer.vocab_size() > config.vocab_size {
        return Err(NnError::Config(format!(
            "tokenizer has {} tokens but the model embeds only {}",
            tokenizer.vocab_size(),
            config.vocab_size
        )));
    }
    let mut model = SequenceClassifier::new(config, num_labels, seed)?;
    if let Some(spec) = lora {
        model.attach_lora(spec, seed)?;
    }
    let mut report = LoadReport::default();
    let mut used = HashSet::new();
    let mut failure = None;
    model.visit_params(&mut |p| {
        if failure.is_some() {
            return;
        }
        let hit = candidate_names(p.name).into_iter().find(|n| tensors.contains_key(n));
        match hit {
            Some(key) => {
                let t = &tensors[&key];
                if t.shape == p.shape {
                    p.value.copy_from_slice(&t.data);
                    used.insert(key);
                } else if p.name.starts_with("classifier.") {
                    // Head trained for a different label set: keep the fresh one.
                    report.initialized.push(p.name.to_string());
                } else {
                    failure = Some(NnError::ShapeMismatch {
                        name: p.name.to_string(),
                        expected: p.shape.to_vec(),
                        found: t.shape.clone(),
                    });
                }
            }
            None => report.initialized.push(p.name.to_string()),
        }
    });
    if let Some(err) = failure {
        return Err(err);
    }
    if report.initialized.iter().any(|n| n.contains(".encoder.") || n.contains("embeddings")) {
        return Err(NnError::MissingTensor(
            report
                .initialized
                .iter()
                .find(|n| n.contains(".encoder.") || n.contains("embeddings"))
                .cloned()
                .unwrap_or_default(),
        ));
    }
    let mut unused: Vec<String> = tensors.keys().filter(|k| !used.contains(*k)).cloned().collect();
    unused.sort();
    report.unused = unused;
    Ok((model, tokenizer, report))
}

pub fn state_dict(model: &mut SequenceClassifier) -> Vec<(String, TensorData)> {
    let mut out = Vec::new();
    model.visit_params(&mut |p| {
        out.push((
            p.name.to_string(),
            TensorData {
                shape: p.shape.to_vec(),
                data: p.value.to_vec(),
            },
        ))
    });
    out
}

/// Writes weights, config and tokenizer so [`load_classifier`] restores the model exactly.
pub fn save_classifier(
    dir: &Path,
    model: &mut SequenceClassifier,
    tokenizer: &WordPiece,
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(model.config())?)?;
    safetensors::write(&dir.join(WEIGHTS_FILE), &state_dict(model), metadata)?;
    tokenizer.save_vocab(&dir.join(VOCAB_FILE))?;
    fs::write(
        dir.join(TOKENIZER_CONFIG_FILE),
        serde_json::to_string_pretty(&TokenizerConfig {
            do_lower_case: tokenizer.lowercase(),
        })?,
    )?;
    Ok(())
}
