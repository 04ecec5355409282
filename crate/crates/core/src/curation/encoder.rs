//! Sentence encoders for curation.

use std::path::PathBuf;
use std::str::FromStr;

use flicc_nn::{checkpoint, Batch, Pooling, SequenceClassifier, WordPiece};

use super::{CurationError, Result};

pub trait Encoder: Send + Sync {
    fn name(&self) -> String;
    fn dim(&self) -> usize;
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>>;
}

/// Which encoder to build, parsed from strings such as `ngram`, `ngram:2048`,
/// `checkpoint:/models/bert-base-uncased` or `checkpoint:/models/x:first`.
#[derive(Debug, Clone, PartialEq)]
pub enum EncoderSpec {
    Ngram { dim: usize },
    Checkpoint { dir: PathBuf, pooling: Pooling },
}

impl FromStr for EncoderSpec {
    type Err = CurationError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "ngram" {
            return Ok(EncoderSpec::Ngram { dim: 1024 });
        }
        if let Some(dim) = s.strip_prefix("ngram:") {
            let dim = dim
                .parse()
                .ok()
                .filter(|&d| d > 0)
                .ok_or_else(|| CurationError::EncoderUnavailable(format!("bad n-gram dimension in `{s}`")))?;
            return Ok(EncoderSpec::Ngram { dim });
        }
        if let Some(rest) = s.strip_prefix("checkpoint:") {
            let (dir, pooling) = match rest.rsplit_once(':') {
                Some((dir, "mean")) => (dir, Pooling::Mean),
                Some((dir, "first")) => (dir, Pooling::FirstToken),
                _ => (rest, Pooling::Mean),
            };
            return Ok(EncoderSpec::Checkpoint {
                dir: PathBuf::from(dir),
                pooling,
            });
        }
        Err(CurationError::EncoderUnavailable(format!(
            "`{s}` (expected `ngram[:dim]` or `checkpoint:<dir>[:mean|first]`)"
        )))
    }
}

pub fn load_encoder(spec: &EncoderSpec) -> Result<Box<dyn Encoder>> {
    Ok(match spec {
        EncoderSpec::Ngram { dim } => Box::new(HashedNgramEncoder::new(*dim)),
        EncoderSpec::Checkpoint { dir, pooling } => Box::new(TransformerEncoder::load(dir.clone(), *pooling)?),
    })
}

/// Signed feature hashing of word unigrams and character trigrams over a
/// normalised text (lowercase, punctuation removed, whitespace collapsed).
/// Needs no model files, so texts that differ only in case, spacing or
/// punctuation map to the same vector.
#[derive(Debug, Clone)]
pub struct HashedNgramEncoder {
    dim: usize,
}

fn fnv1a(bytes: &[u8], salt: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ salt;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub(crate) fn normalize(text: &str) -> String {
    let cleaned: String = text
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl HashedNgramEncoder {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    fn add(&self, v: &mut [f64], feature: &str, salt: u64) {
        let h = fnv1a(feature.as_bytes(), salt);
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[(h % self.dim as u64) as usize] += sign;
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let norm = normalize(text);
        for word in norm.split(' ').filter(|w| !w.is_empty()) {
            self.add(&mut v, word, 1);
        }
        let padded: Vec<char> = format!(" {norm} ").chars().collect();
        for w in padded.windows(3) {
            let gram: String = w.iter().collect();
            self.add(&mut v, &gram, 2);
        }
        v
    }
}

impl Encoder for HashedNgramEncoder {
    fn name(&self) -> String {
        format!("ngram:{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Final-layer token vectors of a local BERT-family checkpoint, pooled per text.
pub struct TransformerEncoder {
    dir: PathBuf,
    model: SequenceClassifier,
    tokenizer: WordPiece,
    pooling: Pooling,
    max_len: usize,
}

impl TransformerEncoder {
    pub fn load(dir: PathBuf, pooling: Pooling) -> Result<Self> {
        if !dir.join(checkpoint::CONFIG_FILE).exists() {
            return Err(CurationError::EncoderUnavailable(format!(
                "{} has no {}",
                dir.display(),
                checkpoint::CONFIG_FILE
            )));
        }
        let (model, tokenizer, _) = checkpoint::load_classifier(&dir, 1, 0)
            .map_err(|e| CurationError::EncoderUnavailable(format!("{}: {e}", dir.display())))?;
        let max_len = model.config().max_position_embeddings;
        Ok(Self {
            dir,
            model,
            tokenizer,
            pooling,
            max_len,
        })
    }
}

impl Encoder for TransformerEncoder {
    fn name(&self) -> String {
        let pooling = match self.pooling {
            Pooling::Mean => "mean",
            Pooling::FirstToken => "first",
        };
        format!("checkpoint:{}:{pooling}", self.dir.display())
    }

    fn dim(&self) -> usize {
        self.model.config().hidden_size
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(32) {
            let ids: Vec<Vec<u32>> = chunk.iter().map(|t| self.tokenizer.encode(t, self.max_len)).collect();
            let pooled = self.model.sentence_embeddings(&Batch::from_sequences(&ids), self.pooling)?;
            out.extend(pooled.rows().into_iter().map(|r| r.iter().map(|&x| x as f64).collect()));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curation::cosine_similarity;

    #[test]
    fn specs_parse() {
        assert_eq!("ngram".parse::<EncoderSpec>().unwrap(), EncoderSpec::Ngram { dim: 1024 });
        assert_eq!("ngram:64".parse::<EncoderSpec>().unwrap(), EncoderSpec::Ngram { dim: 64 });
        assert_eq!(
            "checkpoint:/m/x:first".parse::<EncoderSpec>().unwrap(),
            EncoderSpec::Checkpoint { dir: "/m/x".into(), pooling: Pooling::FirstToken }
        );
        assert_eq!(
            "checkpoint:/m/x".parse::<EncoderSpec>().unwrap(),
            EncoderSpec::Checkpoint { dir: "/m/x".into(), pooling: Pooling::Mean }
        );
        assert!("bert".parse::<EncoderSpec>().is_err());
        assert!("ngram:0".parse::<EncoderSpec>().is_err());
    }

    #[test]
    fn missing_checkpoint_is_unavailable() {
        let dir = tempfile::tempdir().unwrap();
        let spec = EncoderSpec::Checkpoint { dir: dir.path().into(), pooling: Pooling::Mean };
        assert!(matches!(load_encoder(&spec), Err(CurationError::EncoderUnavailable(_))));
    }

    #[test]
    fn ngram_vectors_are_deterministic_and_order_free() {
        let enc = HashedNgramEncoder::new(256);
        let a = enc.embed_batch(&["abc", "abc"]).unwrap();
        assert_eq!(a[0], a[1]);
        let one = enc.embed_batch(&["a"]).unwrap();
        let two = enc.embed_batch(&["a", "b"]).unwrap();
        assert_eq!(one[0], two[0]);
        let sim = cosine_similarity(
            &enc.embed_one("Global warming is a hoax"),
            &enc.embed_one("Global warming is a hoax!"),
        )
        .unwrap();
        assert!(sim > 0.999);
        let far = cosine_similarity(&enc.embed_one("Sea ice is fine"), &enc.embed_one("Experts signed a petition")).unwrap();
        assert!(far < 0.5);
    }

    #[test]
    fn transformer_encoder_pools_hidden_states() {
        let tok = WordPiece::build_from_corpus(&["sea ice is setting records"], 64, true).unwrap();
        let config = flicc_nn::BertConfig::with_dims(tok.vocab_size(), 16, 1, 2, 32);
        let mut model = SequenceClassifier::new(config, 2, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        checkpoint::save_classifier(dir.path(), &mut model, &tok, &Default::default()).unwrap();
        let enc = load_encoder(&EncoderSpec::Checkpoint { dir: dir.path().into(), pooling: Pooling::Mean }).unwrap();
        assert_eq!(enc.dim(), 16);
        let v = enc.embed_batch(&["sea ice", "records", "sea ice"]).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v[0], v[2]);
        assert_ne!(v[0], v[1]);
    }
}
