//! BERT WordPiece tokenizer (basic pre-tokenisation + greedy longest-match pieces).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{NnError, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Clone)]
pub struct WordPiece {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    lowercase: bool,
    unk: u32,
    cls: u32,
    sep: u32,
}

impl WordPiece {
    pub fn from_tokens(tokens: Vec<String>, lowercase: bool) -> Result<Self> {
        let index: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let find = |t: &str| {
            index
                .get(t)
                .copied()
                .ok_or_else(|| NnError::Config(format!("vocabulary lacks special token {t}")))
        };
        let (unk, cls, sep) = (find(UNK)?, find(CLS)?, find(SEP)?);
        Ok(Self {
            tokens,
            index,
            lowercase,
            unk,
            cls,
            sep,
        })
    }

    /// Reads a `vocab.txt` (one token per line, id = line number).
    pub fn from_vocab_file(path: &Path, lowercase: bool) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let tokens = text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect();
        Self::from_tokens(tokens, lowercase)
    }

    pub fn save_vocab(&self, path: &Path) -> Result<()> {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        fs::write(path, out)?;
        Ok(())
    }

    /// Builds a word-level vocabulary from a corpus: special tokens, every
    /// observed character (word-initial and `##` continuation forms), then the
    /// most frequent whole words until `max_size` is reached.
    pub fn build_from_corpus<S: AsRef<str>>(texts: &[S], max_size: usize, lowercase: bool) -> Result<Self> {
        let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP, MASK].iter().map(|s| s.to_string()).collect();
        let mut chars = std::collections::BTreeSet::new();
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for word in basic_tokenize(text.as_ref(), lowercase) {
                chars.extend(word.chars());
                *counts.entry(word).or_default() += 1;
            }
        }
        for c in &chars {
            tokens.push(c.to_string());
        }
        for c in &chars {
            tokens.push(format!("##{c}"));
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().filter(|(w, _)| w.chars().count() > 1).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let room = max_size.saturating_sub(tokens.len());
        tokens.extend(words.into_iter().take(room).map(|(w, _)| w));
        Self::from_tokens(tokens, lowercase)
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    fn word_pieces(&self, word: &str, out: &mut Vec<u32>) {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_WORD_CHARS {
            out.push(self.unk);
            return;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while start < end {
                let mut piece: String = chars[start..end].iter().collect();
                if start > 0 {
                    piece.insert_str(0, "##");
                }
                if let Some(&id) = self.index.get(&piece) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    out.push(self.unk);
                    return;
                }
            }
        }
        out.extend(pieces);
    }

    /// WordPiece ids without special tokens.
    pub fn pieces(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in basic_tokenize(text, self.lowercase) {
            self.word_pieces(&word, &mut out);
        }
        out
    }

    /// `[CLS] pieces [SEP]`, dropping trailing pieces so the result fits in `max_len`.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<u32> {
        let mut pieces = self.pieces(text);
        pieces.truncate(max_len.saturating_sub(2));
        let mut ids = Vec::with_capacity(pieces.len() + 2);
        ids.push(self.cls);
        ids.extend(pieces);
        ids.push(self.sep);
        ids
    }
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c as u32, 0x2000..=0x206F | 0x3000..=0x303F | 0xFF01..=0xFF0F | 0x00A1..=0x00BF)
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x4E00..=0x9FFF | 0x3400..=0x4DBF | 0x20000..=0x2A6DF | 0x2A700..=0x2B73F
        | 0x2B740..=0x2B81F | 0x2B820..=0x2CEAF | 0xF900..=0xFAFF | 0x2F800..=0x2FA1F)
}

/// Whitespace and punctuation splitting with optional lowercasing.
// TODO: strip combining accents after NFD decomposition to match uncased BERT vocabularies on accented input.
pub fn basic_tokenize(text: &str, lowercase: bool) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    let flush = |current: &mut String, words: &mut Vec<String>| {
        if !current.is_empty() {
            words.push(std::mem::take(current));
        }
    };
    for c in text.chars() {
        if c == '\0' || c == '\u{FFFD}' || (c.is_control() && !c.is_whitespace()) {
            continue;
        }
        if c.is_whitespace() {
            flush(&mut current, &mut words);
        } else if is_punctuation(c) || is_cjk(c) {
            flush(&mut current, &mut words);
            words.push(c.to_string());
        } else if lowercase {
            current.extend(c.to_lowercase());
        } else {
            current.push(c);
        }
    }
    flush(&mut current, &mut words);
    words
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> WordPiece {
        let tokens = [PAD, UNK, CLS, SEP, MASK, "sea", "ice", "is", "set", "##ting", "records", ".", "un", "##want", "##ed"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        WordPiece::from_tokens(tokens, true).unwrap()
    }

    #[test]
    fn splits_punctuation_and_lowercases() {
        assert_eq!(basic_tokenize("Hello,  World!", true), vec!["hello", ",", "world", "!"]);
        assert_eq!(basic_tokenize("A\tb", false), vec!["A", "b"]);
    }

    #[test]
    fn greedy_longest_match() {
        let wp = vocab();
        let ids = wp.encode("Sea ice is setting records.", 32);
        let toks: Vec<&str> = ids.iter().map(|&i| wp.token(i).unwrap()).collect();
        assert_eq!(toks, vec![CLS, "sea", "ice", "is", "set", "##ting", "records", ".", SEP]);
        let toks: Vec<&str> = wp.pieces("unwanted").iter().map(|&i| wp.token(i).unwrap()).collect();
        assert_eq!(toks, vec!["un", "##want", "##ed"]);
    }

    #[test]
    fn unknown_words_become_unk() {
        let wp = vocab();
        assert_eq!(wp.pieces("zebra"), vec![wp.id(UNK).unwrap()]);
    }

    #[test]
    fn truncates_tail_but_keeps_special_tokens() {
        let wp = vocab();
        let ids = wp.encode("sea ice is sea ice is", 5);
        assert_eq!(ids.len(), 5);
        assert_eq!(ids[0], wp.id(CLS).unwrap());
        assert_eq!(ids[4], wp.id(SEP).unwrap());
        assert_eq!(wp.token(ids[3]), Some("is"));
    }

    #[test]
    fn corpus_vocab_covers_every_character() {
        let wp = WordPiece::build_from_corpus(&["Global warming is a hoax!", "CO2 lags"], 64, true).unwrap();
        let unk = wp.id(UNK).unwrap();
        assert!(!wp.pieces("a hoax lags co2 warming").contains(&unk));
        // Unseen words still decompose into characters.
        assert!(!wp.pieces("oh").contains(&unk));
    }
}
