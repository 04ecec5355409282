use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;

use serde::{Deserialize, Serialize};

use super::provider::Provider;
use super::{normalize_response, prompt_for, LlmError, NormalizationRule, Normalized, Result};
use crate::corpus::Sample;
use crate::metrics::{self, ClassificationReport};
use crate::taxonomy::Fallacy;

/// One line of the verdict archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveRecord {
    pub id: String,
    pub prompt: String,
    pub raw: String,
    pub normalized: Normalized,
    pub rule: NormalizationRule,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// JSONL archive; existing verdicts are kept and their samples skipped.
    pub archive: PathBuf,
    pub max_inflight: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureCensus {
    pub total: usize,
    pub labeled: usize,
    pub none_marker: usize,
    pub unparseable: usize,
    pub by_rule: BTreeMap<NormalizationRule, usize>,
    /// How often each label was predicted.
    pub predictions: BTreeMap<Fallacy, usize>,
}

impl FailureCensus {
    pub fn unlabeled(&self) -> usize {
        self.none_marker + self.unparseable
    }

    /// Most frequent prediction; the canonical order breaks ties.
    pub fn most_common(&self) -> Option<(Fallacy, usize)> {
        let mut best: Option<(Fallacy, usize)> = None;
        for (&f, &n) in &self.predictions {
            if best.is_none_or(|(_, m)| n > m) {
                best = Some((f, n));
            }
        }
        best
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LlmEvaluation {
    pub report: ClassificationReport,
    pub census: FailureCensus,
}

pub fn read_archive(path: &Path) -> Result<Vec<ArchiveRecord>> {
    let text = fs::read_to_string(path).map_err(|source| LlmError::Archive {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| LlmError::ArchiveCorrupt {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Report and census for `samples` from archived verdicts alone. Samples without
/// a label verdict count as misses for their true class.
pub fn score_archive(samples: &[Sample], records: &[ArchiveRecord]) -> Result<LlmEvaluation> {
    let mut by_id: HashMap<&str, &ArchiveRecord> = HashMap::new();
    for r in records {
        by_id.entry(r.id.as_str()).or_insert(r);
    }
    let mut census = FailureCensus {
        total: samples.len(),
        labeled: 0,
        none_marker: 0,
        unparseable: 0,
        by_rule: BTreeMap::new(),
        predictions: BTreeMap::new(),
    };
    let mut predictions = Vec::with_capacity(samples.len());
    for s in samples {
        let r = by_id.get(s.id.as_str()).ok_or_else(|| LlmError::MissingVerdict(s.id.clone()))?;
        *census.by_rule.entry(r.rule).or_default() += 1;
        match r.normalized {
            Normalized::Label(f) => {
                census.labeled += 1;
                *census.predictions.entry(f).or_default() += 1;
            }
            Normalized::NoneMarker => census.none_marker += 1,
            Normalized::Unparseable => census.unparseable += 1,
        }
        predictions.push(r.normalized.label());
    }
    let truths: Vec<Fallacy> = samples.iter().map(|s| s.label).collect();
    let report = metrics::report(&truths, &predictions)?;
    Ok(LlmEvaluation { report, census })
}

/// Queries every sample not yet in the archive, appending each verdict as it
/// arrives, then scores the whole archive. A failed request stops new work;
/// verdicts already received stay in the archive so a rerun resumes.
pub fn evaluate_llm(samples: &[Sample], provider: &dyn Provider, options: &EvalOptions) -> Result<LlmEvaluation> {
    let archive_err = |source| LlmError::Archive {
        path: options.archive.clone(),
        source,
    };
    let existing = if options.archive.exists() {
        read_archive(&options.archive)?
    } else {
        Vec::new()
    };
    let done: HashSet<&str> = existing.iter().map(|r| r.id.as_str()).collect();
    let pending: Vec<(&str, String)> = samples
        .iter()
        .filter(|s| !done.contains(s.id.as_str()))
        .map(|s| Ok((s.id.as_str(), prompt_for(&s.text)?)))
        .collect::<Result<_>>()?;

    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&options.archive)
        .map_err(archive_err)?;
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let mut completed = 0;
    let mut failure: Option<LlmError> = None;

    thread::scope(|scope| -> Result<()> {
        let (tx, rx) = mpsc::channel();
        for _ in 0..options.max_inflight.max(1).min(pending.len()) {
            let tx = tx.clone();
            let (next, stop, pending) = (&next, &stop, &pending);
            scope.spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some((_, prompt)) = pending.get(i) else { break };
                    if tx.send((i, provider.complete(prompt))).is_err() {
                        break;
                    }
                }
            });
        }
        drop(tx);
        for (i, outcome) in rx {
            match outcome {
                Ok(raw) => {
                    let (id, prompt) = &pending[i];
                    let verdict = normalize_response(&raw, &Fallacy::ALL);
                    let record = ArchiveRecord {
                        id: id.to_string(),
                        prompt: prompt.clone(),
                        raw,
                        normalized: verdict.normalized,
                        rule: verdict.normalization_rule_applied,
                    };
                    let line = serde_json::to_string(&record).expect("record serializes") + "\n";
                    file.write_all(line.as_bytes()).map_err(archive_err)?;
                    completed += 1;
                }
                Err(e) => {
                    stop.store(true, Ordering::SeqCst);
                    failure.get_or_insert(e);
                }
            }
        }
        Ok(())
    })?;
    file.flush().map_err(archive_err)?;
    if let Some(source) = failure {
        return Err(LlmError::Aborted {
            completed,
            source: Box::new(source),
        });
    }
    score_archive(samples, &read_archive(&options.archive)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ReplayProvider;

    struct Constant(&'static str);

    impl Provider for Constant {
        fn id(&self) -> String {
            "constant".into()
        }
        fn complete(&self, _: &str) -> Result<String> {
            Ok(self.0.to_string())
        }
    }

    struct Truthful;

    impl Provider for Truthful {
        fn id(&self) -> String {
            "truthful".into()
        }
        fn complete(&self, prompt: &str) -> Result<String> {
            // Label is encoded in the text as "<label>|...".
            let text = prompt.split("Text: ").nth(1).unwrap();
            Ok(text.split('|').next().unwrap().to_string())
        }
    }

    fn samples() -> Vec<Sample> {
        Fallacy::ALL
            .iter()
            .cycle()
            .take(30)
            .enumerate()
            .map(|(i, &f)| Sample::new(format!("s{i}"), format!("{}|case {i}", f.canonical_name()), f))
            .collect()
    }

    fn options(dir: &Path) -> EvalOptions {
        EvalOptions {
            archive: dir.join("verdicts.jsonl"),
            max_inflight: 3,
        }
    }

    #[test]
    fn truthful_provider_scores_perfectly() {
        let dir = tempfile::tempdir().unwrap();
        let eval = evaluate_llm(&samples(), &Truthful, &options(dir.path())).unwrap();
        assert_eq!(eval.report.accuracy, 1.0);
        assert_eq!(eval.census.labeled, 30);
        assert_eq!(read_archive(&options(dir.path()).archive).unwrap().len(), 30);
    }

    #[test]
    fn constant_provider_matches_constant_classifier() {
        let dir = tempfile::tempdir().unwrap();
        let data = samples();
        let eval = evaluate_llm(&data, &Constant("Oversimplification"), &options(dir.path())).unwrap();
        let truths: Vec<Fallacy> = data.iter().map(|s| s.label).collect();
        let expected = metrics::report(&truths, &vec![Some(Fallacy::Oversimplification); 30]).unwrap();
        assert_eq!(eval.report, expected);
        assert_eq!(eval.census.most_common(), Some((Fallacy::Oversimplification, 30)));
    }

    #[test]
    fn interrupted_runs_resume() {
        let dir = tempfile::tempdir().unwrap();
        let data = samples();
        let partial = ReplayProvider::from_pairs(
            data[..10].iter().map(|s| (prompt_for(&s.text).unwrap(), s.label.canonical_name().to_string())),
        );
        let opts = EvalOptions {
            max_inflight: 1,
            ..options(dir.path())
        };
        let err = evaluate_llm(&data, &partial, &opts).unwrap_err();
        assert!(matches!(err, LlmError::Aborted { completed: 10, .. }), "{err}");
        let eval = evaluate_llm(&data, &Truthful, &opts).unwrap();
        assert_eq!(eval.census.total, 30);
        assert_eq!(read_archive(&opts.archive).unwrap().len(), 30);
    }

    #[test]
    fn census_counts_failures() {
        let data = samples();
        let records: Vec<ArchiveRecord> = data
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let raw = if i < 4 { String::new() } else if i < 6 { "hmm".into() } else { s.label.to_string() };
                let v = normalize_response(&raw, &Fallacy::ALL);
                ArchiveRecord {
                    id: s.id.clone(),
                    prompt: String::new(),
                    raw,
                    normalized: v.normalized,
                    rule: v.normalization_rule_applied,
                }
            })
            .collect();
        let eval = score_archive(&data, &records).unwrap();
        assert_eq!((eval.census.none_marker, eval.census.unparseable, eval.census.labeled), (4, 2, 24));
        assert_eq!(eval.census.unlabeled() + eval.census.labeled, data.len());
        assert_eq!(eval.report.abstentions, 6);
        assert!(matches!(score_archive(&data, &records[1..]), Err(LlmError::MissingVerdict(_))));
    }
}
