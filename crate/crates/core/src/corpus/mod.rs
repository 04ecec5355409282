//! Dataset records, JSONL ingestion, stratified splitting and the
//! fallacy × CARDS claim cross-tabulation.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::taxonomy::{is_claim_code, parse_label, Fallacy, NUM_LABELS};

pub mod synthetic;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown fallacy label `{label}`")]
    UnknownLabel { line: usize, label: String },
    #[error("line {line}: duplicate sample id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: sample `{id}` has empty text")]
    EmptyText { line: usize, id: String },
    #[error("line {line}: `{code}` is not a CARDS claim code (expected D.S)")]
    InvalidClaim { line: usize, code: String },
    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),
    #[error("label `{label}` has {count} samples, too few to place at least one in every partition")]
    InsufficientSamples { label: Fallacy, count: usize },
    #[error("sample `{0}` has no split tag")]
    UntaggedSample(String),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[serde(alias = "validation", alias = "dev")]
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "validation" | "dev" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split `{s}` (expected train, val or test)")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One labelled text. Fields not listed here survive a load/save round trip in `extra`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub text: String,
    pub label: Fallacy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub claim: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl Sample {
    pub fn new(id: impl Into<String>, text: impl Into<String>, label: Fallacy) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            label,
            claim: None,
            split: None,
            extra: serde_json::Map::new(),
        }
    }

    pub fn with_claim(mut self, claim: impl Into<String>) -> Self {
        self.claim = Some(claim.into());
        self
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = Some(split);
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Free-text source notes, stored as leading `#` lines in the file.
    pub provenance: Vec<String>,
}

#[derive(Deserialize)]
struct RawSample {
    id: String,
    text: String,
    label: String,
    #[serde(default)]
    claim: Option<String>,
    #[serde(default)]
    split: Option<Split>,
    #[serde(flatten)]
    extra: serde_json::Map<String, serde_json::Value>,
}

impl Dataset {
    /// Validates id uniqueness, non-empty text and claim codes.
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, s) in samples.iter().enumerate() {
            check_sample(s, i + 1, &mut seen)?;
        }
        Ok(Self {
            samples,
            provenance: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<Fallacy> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.text.as_str()).collect()
    }

    pub fn partition(&self, split: Split) -> Vec<Sample> {
        self.samples.iter().filter(|s| s.split == Some(split)).cloned().collect()
    }

    pub fn label_counts(&self) -> [usize; NUM_LABELS] {
        let mut counts = [0; NUM_LABELS];
        for s in &self.samples {
            counts[s.label.index()] += 1;
        }
        counts
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut samples = Vec::new();
        let mut provenance = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(note) = trimmed.strip_prefix('#') {
                provenance.push(note.trim().to_string());
                continue;
            }
            let raw: RawSample = serde_json::from_str(trimmed).map_err(|e| CorpusError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            let label = parse_label(&raw.label).map_err(|_| CorpusError::UnknownLabel {
                line: line_no,
                label: raw.label.clone(),
            })?;
            let sample = Sample {
                id: raw.id,
                text: raw.text,
                label,
                claim: raw.claim.map(|c| c.trim().to_string()).filter(|c| !c.is_empty()),
                split: raw.split,
                extra: raw.extra,
            };
            check_sample(&sample, line_no, &mut seen)?;
            samples.push(sample);
        }
        Ok(Self { samples, provenance })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for note in &self.provenance {
            let _ = writeln!(out, "# {note}");
        }
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s).expect("samples serialize"));
            out.push('\n');
        }
        out
    }
}

fn check_sample(s: &Sample, line: usize, seen: &mut HashSet<String>) -> Result<()> {
    if s.text.trim().is_empty() {
        return Err(CorpusError::EmptyText { line, id: s.id.clone() });
    }
    if let Some(code) = &s.claim {
        if !is_claim_code(code) {
            return Err(CorpusError::InvalidClaim { line, code: code.clone() });
        }
    }
    if !seen.insert(s.id.clone()) {
        return Err(CorpusError::DuplicateId { line, id: s.id.clone() });
    }
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Dataset::parse(&text)
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| CorpusError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, dataset.to_jsonl()).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// The worked examples bundled with the crate, one per fallacy.
pub fn deconstructions() -> Dataset {
    Dataset::parse(include_str!("../../data/deconstructions.jsonl")).expect("bundled examples are valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Fractions {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let f = Self { train, val, test };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(CorpusError::InvalidFractions(format!(
                "{parts:?} must be finite and non-negative"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(CorpusError::InvalidFractions(format!("{parts:?} sum to {sum}, not 1")));
        }
        Ok(())
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

impl FromStr for Fractions {
    type Err = CorpusError;

    /// Parses `a,b,c`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| CorpusError::InvalidFractions(format!("`{s}`: {e}")))?;
        match parts[..] {
            [a, b, c] => Self::new(a, b, c),
            _ => Err(CorpusError::InvalidFractions(format!("`{s}` needs three comma-separated values"))),
        }
    }
}

/// Per-partition quotas for `n` items by largest remainder. Leftover units go
/// to the largest fractional parts, earlier partitions first on ties.
pub fn largest_remainder(n: usize, fractions: &Fractions) -> [usize; 3] {
    let exact = fractions.as_array().map(|f| f * n as f64);
    let mut quota = exact.map(|q| q.floor() as usize);
    let assigned: usize = quota.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).expect("finite remainders").then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        quota[i] += 1;
    }
    quota
}

/// Tags every sample with a partition, stratified by label. Within a label the
/// samples are shuffled with a stream of `seed` specific to that label, then the
/// first quota goes to train, the next to val, the rest to test.
pub fn stratified_split(dataset: &Dataset, fractions: &Fractions, seed: u64) -> Result<Dataset> {
    fractions.validate()?;
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); NUM_LABELS];
    for (i, s) in dataset.samples.iter().enumerate() {
        by_label[s.label.index()].push(i);
    }
    let mut out = dataset.clone();
    for (label_index, members) in by_label.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        let label = Fallacy::ALL[label_index];
        let quota = largest_remainder(members.len(), fractions);
        if quota.contains(&0) {
            return Err(CorpusError::InsufficientSamples {
                label,
                count: members.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(label_index as u64);
        members.shuffle(&mut rng);
        let mut cursor = 0;
        for (split, take) in Split::ALL.into_iter().zip(quota) {
            for &i in &members[cursor..cursor + take] {
                out.samples[i].split = Some(split);
            }
            cursor += take;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub label: Fallacy,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitSummary {
    pub rows: Vec<SummaryRow>,
    pub totals: [usize; 4],
}

impl SplitSummary {
    pub fn row(&self, label: Fallacy) -> &SummaryRow {
        &self.rows[label.index()]
    }

    pub fn render(&self) -> String {
        let mut out = format!("{:<24} {:>6} {:>6} {:>6} {:>6}\n", "Fallacy", "Train", "Val", "Test", "Total");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<24} {:>6} {:>6} {:>6} {:>6}",
                r.label.canonical_name(),
                r.train,
                r.val,
                r.test,
                r.total
            );
        }
        let [a, b, c, d] = self.totals;
        let _ = writeln!(out, "{:<24} {a:>6} {b:>6} {c:>6} {d:>6}", "Total");
        out
    }
}

pub fn split_summary(dataset: &Dataset) -> Result<SplitSummary> {
    let mut counts = [[0usize; 3]; NUM_LABELS];
    for s in &dataset.samples {
        let split = s.split.ok_or_else(|| CorpusError::UntaggedSample(s.id.clone()))?;
        counts[s.label.index()][split as usize] += 1;
    }
    let mut totals = [0usize; 4];
    let rows = Fallacy::ALL
        .iter()
        .zip(counts)
        .map(|(&label, [train, val, test])| {
            totals[0] += train;
            totals[1] += val;
            totals[2] += test;
            totals[3] += train + val + test;
            SummaryRow {
                label,
                train,
                val,
                test,
                total: train + val + test,
            }
        })
        .collect();
    Ok(SplitSummary { rows, totals })
}

/// Counts of samples per (fallacy, claim). Rows cover all twelve labels;
/// columns are the claim codes present, sorted.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossTab {
    pub claims: Vec<String>,
    pub counts: Vec<Vec<usize>>,
    /// Samples without a claim code.
    pub excluded: usize,
}

impl CrossTab {
    pub fn get(&self, label: Fallacy, claim: &str) -> usize {
        self.claims
            .iter()
            .position(|c| c == claim)
            .map_or(0, |j| self.counts[label.index()][j])
    }

    /// Each row divided by its total; empty rows stay zero.
    pub fn shares(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let total: usize = row.iter().sum();
                row.iter()
                    .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
                    .collect()
            })
            .collect()
    }

    /// Long-format CSV: `label,claim,count,share`, non-zero cells only.
    pub fn to_csv(&self) -> String {
        let shares = self.shares();
        let mut out = String::from("label,claim,count,share\n");
        for label in Fallacy::ALL {
            for (j, claim) in self.claims.iter().enumerate() {
                let count = self.counts[label.index()][j];
                if count > 0 {
                    let _ = writeln!(out, "{label},{claim},{count},{:.4}", shares[label.index()][j]);
                }
            }
        }
        out
    }
}

pub fn cross_tabulate(dataset: &Dataset) -> CrossTab {
    let claims: Vec<String> = dataset
        .samples
        .iter()
        .filter_map(|s| s.claim.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let column: HashMap<&str, usize> = claims.iter().enumerate().map(|(j, c)| (c.as_str(), j)).collect();
    let mut counts = vec![vec![0usize; claims.len()]; NUM_LABELS];
    let mut excluded = 0;
    for s in &dataset.samples {
        match &s.claim {
            Some(c) => counts[s.label.index()][column[c.as_str()]] += 1,
            None => excluded += 1,
        }
    }
    CrossTab {
        claims,
        counts,
        excluded,
    }
}

/// Drops the listed ids. Returns the filtered dataset and the ids that were not present.
pub fn apply_removals(dataset: &Dataset, ids: &[String]) -> (Dataset, Vec<String>) {
    let wanted: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    let present: HashSet<&str> = dataset.samples.iter().map(|s| s.id.as_str()).collect();
    let missing = wanted.iter().filter(|id| !present.contains(*id)).map(|s| s.to_string()).collect();
    let mut out = dataset.clone();
    out.samples.retain(|s| !wanted.contains(s.id.as_str()));
    out.provenance.push(format!("removed {} samples after review", dataset.len() - out.len()));
    (out, missing)
}

/// Reads a removal list: one id per line, blank lines and `#` comments ignored.
pub fn read_id_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

/// Label counts of each partition, for logs.
pub fn partition_sizes(dataset: &Dataset) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for s in &dataset.samples {
        let key = s.split.map_or("untagged", Split::as_str);
        *out.entry(key.to_string()).or_default() += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_label(n: usize) -> Dataset {
        Dataset::new(
            (0..n)
                .map(|i| Sample::new(format!("s{i}"), format!("text {i}"), Fallacy::Anecdote))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn bundled_examples_cover_every_label() {
        let d = deconstructions();
        assert_eq!(d.len(), 12);
        let labels: BTreeSet<Fallacy> = d.labels().into_iter().collect();
        assert_eq!(labels.len(), 12);
        assert!(d.samples[0].extra.contains_key("deconstruction"));
        assert_eq!(d.provenance.len(), 1);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let bad_label = "{\"id\":\"a\",\"text\":\"t\",\"label\":\"anecdote\"}\n{\"id\":\"b\",\"text\":\"t\",\"label\":\"sarcasm\"}";
        assert!(matches!(
            Dataset::parse(bad_label),
            Err(CorpusError::UnknownLabel { line: 2, .. })
        ));
        let dup = "{\"id\":\"x1\",\"text\":\"t\",\"label\":\"anecdote\"}\n{\"id\":\"x1\",\"text\":\"u\",\"label\":\"anecdote\"}";
        assert!(matches!(Dataset::parse(dup), Err(CorpusError::DuplicateId { line: 2, .. })));
        let empty = "{\"id\":\"a\",\"text\":\"   \",\"label\":\"anecdote\"}";
        assert!(matches!(Dataset::parse(empty), Err(CorpusError::EmptyText { line: 1, .. })));
        assert!(matches!(Dataset::parse("{not json"), Err(CorpusError::Parse { line: 1, .. })));
        let claim = "{\"id\":\"a\",\"text\":\"t\",\"label\":\"anecdote\",\"claim\":\"52\"}";
        assert!(matches!(Dataset::parse(claim), Err(CorpusError::InvalidClaim { .. })));
    }

    #[test]
    fn save_then_load_is_identity() {
        let mut d = deconstructions();
        d.samples[3].split = Some(Split::Val);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_dataset(&d, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), d);
    }

    #[test]
    fn largest_remainder_by_hand() {
        let f = Fractions::new(0.5, 0.25, 0.25).unwrap();
        assert_eq!(largest_remainder(12, &f), [6, 3, 3]);
        // 7 × (0.5, 0.25, 0.25) = (3.5, 1.75, 1.75): floors 3/1/1, two leftovers
        // go to val then test (remainder 0.75 beats 0.5).
        assert_eq!(largest_remainder(7, &f), [3, 2, 2]);
        assert_eq!(largest_remainder(0, &f), [0, 0, 0]);
    }

    #[test]
    fn twelve_sample_split_is_six_three_three_and_repeatable() {
        let d = one_label(12);
        let f = Fractions::new(0.5, 0.25, 0.25).unwrap();
        let a = stratified_split(&d, &f, 7).unwrap();
        let b = stratified_split(&d, &f, 7).unwrap();
        assert_eq!(a, b);
        let s = split_summary(&a).unwrap();
        assert_eq!(s.totals, [6, 3, 3, 12]);
        let c = stratified_split(&d, &f, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_fractions_are_rejected() {
        let d = one_label(12);
        let f = Fractions::new(1.0, 0.0, 0.0).unwrap();
        assert!(matches!(
            stratified_split(&d, &f, 0),
            Err(CorpusError::InsufficientSamples { count: 12, .. })
        ));
        assert!(Fractions::new(0.5, 0.5, 0.5).is_err());
        assert!(Fractions::new(1.5, -0.25, -0.25).is_err());
        assert!("0.7,0.2".parse::<Fractions>().is_err());
        assert_eq!("0.5, 0.25,0.25".parse::<Fractions>().unwrap().val, 0.25);
    }

    #[test]
    fn summaries() {
        assert_eq!(split_summary(&Dataset::default()).unwrap().totals, [0; 4]);
        let mut d = deconstructions();
        assert!(matches!(split_summary(&d), Err(CorpusError::UntaggedSample(_))));
        for s in &mut d.samples {
            s.split = Some(Split::Train);
        }
        let summary = split_summary(&d).unwrap();
        assert!(summary.rows.iter().all(|r| r.train == 1 && r.val == 0 && r.test == 0));
        assert!(summary.render().contains("Total"));
    }

    #[test]
    fn cross_tab_of_bundled_examples() {
        let t = cross_tabulate(&deconstructions());
        assert_eq!(t.get(Fallacy::AdHominem, "5.2"), 1);
        assert_eq!(t.get(Fallacy::FalseEquivalence, "5.2"), 1);
        assert_eq!(t.get(Fallacy::AdHominem, "1.1"), 0);
        assert_eq!(t.excluded, 0);
        assert!(t.to_csv().contains("ad hominem,5.2,1,1.0000"));
    }

    #[test]
    fn cross_tab_without_claims() {
        let t = cross_tabulate(&one_label(5));
        assert!(t.claims.is_empty());
        assert_eq!(t.excluded, 5);
        let three = Dataset::new(
            (0..3)
                .map(|i| Sample::new(format!("a{i}"), "cold today", Fallacy::Anecdote).with_claim("1.3"))
                .collect(),
        )
        .unwrap();
        let t = cross_tabulate(&three);
        assert_eq!(t.counts[Fallacy::Anecdote.index()], vec![3]);
        assert_eq!(t.shares()[Fallacy::Anecdote.index()], vec![1.0]);
    }

    #[test]
    fn removals() {
        let d = one_label(4);
        let (kept, missing) = apply_removals(&d, &["s1".into(), "zz".into()]);
        assert_eq!(kept.len(), 3);
        assert_eq!(missing, vec!["zz"]);
    }
}
