//! Data-quality review: exact duplicates, embedding near-duplicates, per-label
//! centroid distances and Isolation Forest outliers, collected into a single
//! report for a human to adjudicate.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::taxonomy::{Fallacy, NUM_LABELS};

mod encoder;
mod forest;

pub use encoder::{load_encoder, Encoder, EncoderSpec, HashedNgramEncoder, TransformerEncoder};
pub use forest::IsolationForest;

#[derive(Debug, thiserror::Error)]
pub enum CurationError {
    #[error("encoder unavailable: {0}")]
    EncoderUnavailable(String),
    #[error("nothing to embed")]
    EmptyInput,
    #[error("embedding of `{0}` is all zeros")]
    ZeroVector(String),
    #[error("embedding of `{0}` contains a non-finite value")]
    NonFinite(String),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("no embedding for sample `{0}`")]
    MissingEmbedding(String),
    #[error("need at least {needed} embeddings, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("contamination {0} is outside (0, 0.5]")]
    InvalidContamination(f64),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] flicc_nn::NnError),
}

pub type Result<T, E = CurationError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub sample_id: String,
    pub vector: Vec<f64>,
}

/// Embeds texts in order. Every vector is checked for finiteness.
pub fn embed(encoder: &dyn Encoder, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
    if texts.is_empty() {
        return Err(CurationError::EmptyInput);
    }
    let vectors = encoder.embed_batch(texts)?;
    for (i, v) in vectors.iter().enumerate() {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(CurationError::NonFinite(format!("text #{i}")));
        }
    }
    Ok(vectors)
}

pub fn embed_dataset(encoder: &dyn Encoder, dataset: &Dataset) -> Result<Vec<Embedding>> {
    let vectors = embed(encoder, &dataset.texts())?;
    Ok(dataset
        .samples
        .iter()
        .zip(vectors)
        .map(|(s, vector)| Embedding {
            sample_id: s.id.clone(),
            vector,
        })
        .collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(a·b) / (‖a‖ ‖b‖)`, clamped to [-1, 1] against rounding.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CurationError::DimensionMismatch(a.len(), b.len()));
    }
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 {
        return Err(CurationError::ZeroVector("a".into()));
    }
    if nb == 0.0 {
        return Err(CurationError::ZeroVector("b".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Euclidean distance through the expansion `√(p·p − 2 p·q + q·q)`.
pub fn expanded_distance(p: &[f64], q: &[f64]) -> f64 {
    (dot(p, p) - 2.0 * dot(p, q) + dot(q, q)).max(0.0).sqrt()
}

pub fn direct_distance(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewKind {
    ExactDup,
    NearDup,
    CentroidOutlier,
    ForestOutlier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub kind: ReviewKind,
    pub sample_ids: Vec<String>,
    pub score: f64,
    /// 1-based within its kind.
    pub rank: usize,
}

/// Groups of ids whose raw text is byte-identical, in order of first appearance.
pub fn exact_duplicates(dataset: &Dataset) -> Vec<Vec<String>> {
    let mut groups: Vec<Vec<String>> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for s in &dataset.samples {
        match index.get(s.text.as_str()) {
            Some(&g) => groups[g].push(s.id.clone()),
            None => {
                index.insert(&s.text, groups.len());
                groups.push(vec![s.id.clone()]);
            }
        }
    }
    groups.retain(|g| g.len() > 1);
    groups
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NearDupQuery {
    TopK(usize),
    Threshold(f64),
}

impl Default for NearDupQuery {
    fn default() -> Self {
        NearDupQuery::TopK(100)
    }
}

#[derive(PartialEq)]
struct Candidate {
    sim: f64,
    i: usize,
    j: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    // "Greater" means ranked higher: larger similarity, then earlier pair.
    fn cmp(&self, other: &Self) -> Ordering {
        self.sim
            .total_cmp(&other.sim)
            .then_with(|| (other.i, other.j).cmp(&(self.i, self.j)))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn unit_vectors(embeddings: &[Embedding]) -> Result<Vec<Vec<f64>>> {
    let dim = embeddings.first().map_or(0, |e| e.vector.len());
    embeddings
        .iter()
        .map(|e| {
            if e.vector.len() != dim {
                return Err(CurationError::DimensionMismatch(dim, e.vector.len()));
            }
            let norm = dot(&e.vector, &e.vector).sqrt();
            if norm == 0.0 {
                return Err(CurationError::ZeroVector(e.sample_id.clone()));
            }
            Ok(e.vector.iter().map(|x| x / norm).collect())
        })
        .collect()
}

/// Unordered pairs ranked by descending cosine similarity.
pub fn near_duplicate_pairs(embeddings: &[Embedding], query: NearDupQuery) -> Result<Vec<ReviewItem>> {
    if embeddings.len() < 2 {
        return Err(CurationError::TooFewSamples {
            needed: 2,
            got: embeddings.len(),
        });
    }
    let units = unit_vectors(embeddings)?;
    let mut kept: Vec<Candidate> = Vec::new();
    // Min-heap of the best k seen so far.
    let mut heap: BinaryHeap<std::cmp::Reverse<Candidate>> = BinaryHeap::new();
    for i in 0..units.len() {
        for j in i + 1..units.len() {
            let sim = dot(&units[i], &units[j]).clamp(-1.0, 1.0);
            let c = Candidate { sim, i, j };
            match query {
                NearDupQuery::Threshold(t) => {
                    if sim >= t {
                        kept.push(c);
                    }
                }
                NearDupQuery::TopK(k) => {
                    if k == 0 {
                        continue;
                    }
                    if heap.len() < k {
                        heap.push(std::cmp::Reverse(c));
                    } else if heap.peek().is_some_and(|worst| c > worst.0) {
                        heap.pop();
                        heap.push(std::cmp::Reverse(c));
                    }
                }
            }
        }
    }
    if let NearDupQuery::TopK(_) = query {
        kept = heap.into_iter().map(|r| r.0).collect();
    }
    kept.sort_by(|a, b| b.cmp(a));
    Ok(kept
        .into_iter()
        .enumerate()
        .map(|(r, c)| ReviewItem {
            kind: ReviewKind::NearDup,
            sample_ids: vec![embeddings[c.i].sample_id.clone(), embeddings[c.j].sample_id.clone()],
            score: c.sim,
            rank: r + 1,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidDistance {
    pub sample_id: String,
    pub label: Fallacy,
    pub distance: f64,
}

/// Distance of every sample to the mean embedding of its label, largest first.
pub fn centroid_distances(dataset: &Dataset, embeddings: &[Embedding]) -> Result<Vec<CentroidDistance>> {
    let by_id: HashMap<&str, &Embedding> = embeddings.iter().map(|e| (e.sample_id.as_str(), e)).collect();
    let mut vectors = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let e = by_id
            .get(s.id.as_str())
            .ok_or_else(|| CurationError::MissingEmbedding(s.id.clone()))?;
        vectors.push(&e.vector);
    }
    let dim = vectors.first().map_or(0, |v| v.len());
    let mut sums = vec![vec![0.0; dim]; NUM_LABELS];
    let mut counts = [0usize; NUM_LABELS];
    for (s, v) in dataset.samples.iter().zip(&vectors) {
        if v.len() != dim {
            return Err(CurationError::DimensionMismatch(dim, v.len()));
        }
        let k = s.label.index();
        counts[k] += 1;
        for (acc, x) in sums[k].iter_mut().zip(v.iter()) {
            *acc += x;
        }
    }
    let means: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(counts)
        .map(|(sum, n)| sum.into_iter().map(|x| if n == 0 { 0.0 } else { x / n as f64 }).collect())
        .collect();
    let mut out: Vec<CentroidDistance> = dataset
        .samples
        .iter()
        .zip(&vectors)
        .map(|(s, v)| CentroidDistance {
            sample_id: s.id.clone(),
            label: s.label,
            distance: expanded_distance(v, &means[s.label.index()]),
        })
        .collect();
    out.sort_by(|a, b| b.distance.total_cmp(&a.distance));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestOutlier {
    pub sample_id: String,
    pub score: f64,
}

/// Number of items flagged at a contamination level.
pub fn flag_count(contamination: f64, n: usize) -> usize {
    (contamination * n as f64).round() as usize
}

/// Fits an Isolation Forest (100 trees, subsample 256) and returns the
/// `round(contamination × n)` highest-scoring samples, most anomalous first.
pub fn forest_outliers(embeddings: &[Embedding], contamination: f64, seed: u64) -> Result<Vec<ForestOutlier>> {
    if !(contamination > 0.0 && contamination <= 0.5) {
        return Err(CurationError::InvalidContamination(contamination));
    }
    if embeddings.len() < 10 {
        return Err(CurationError::TooFewSamples {
            needed: 10,
            got: embeddings.len(),
        });
    }
    let data: Vec<&[f64]> = embeddings.iter().map(|e| e.vector.as_slice()).collect();
    let forest = IsolationForest::fit(&data, 100, 256, seed);
    let scores = forest.score_all(&data);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .take(flag_count(contamination, data.len()))
        .map(|i| ForestOutlier {
            sample_id: embeddings[i].sample_id.clone(),
            score: scores[i],
        })
        .collect())
}

/// Everything a reviewer needs to look at, in reading order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReviewReport {
    pub exact: Vec<ReviewItem>,
    pub near: Vec<ReviewItem>,
    pub centroid: Vec<ReviewItem>,
    pub forest: Vec<ReviewItem>,
}

impl ReviewReport {
    pub fn new(
        exact_groups: &[Vec<String>],
        near: Vec<ReviewItem>,
        centroid: &[CentroidDistance],
        forest: &[ForestOutlier],
    ) -> Self {
        let exact = exact_groups
            .iter()
            .enumerate()
            .map(|(r, g)| ReviewItem {
                kind: ReviewKind::ExactDup,
                sample_ids: g.clone(),
                score: 1.0,
                rank: r + 1,
            })
            .collect();
        let centroid = centroid
            .iter()
            .enumerate()
            .map(|(r, c)| ReviewItem {
                kind: ReviewKind::CentroidOutlier,
                sample_ids: vec![c.sample_id.clone()],
                score: c.distance,
                rank: r + 1,
            })
            .collect();
        let forest = forest
            .iter()
            .enumerate()
            .map(|(r, f)| ReviewItem {
                kind: ReviewKind::ForestOutlier,
                sample_ids: vec![f.sample_id.clone()],
                score: f.score,
                rank: r + 1,
            })
            .collect();
        Self {
            exact,
            near,
            centroid,
            forest,
        }
    }

    /// Ids flagged by both outlier methods.
    pub fn overlap(&self) -> BTreeSet<String> {
        let c: BTreeSet<&String> = self.centroid.iter().flat_map(|i| &i.sample_ids).collect();
        self.forest
            .iter()
            .flat_map(|i| &i.sample_ids)
            .filter(|id| c.contains(id))
            .cloned()
            .collect()
    }

    /// All items in report order: exact, near, then the outlier union
    /// (overlap first, then forest-only, then centroid-only).
    pub fn items(&self) -> Vec<&ReviewItem> {
        let overlap = self.overlap();
        let mut out: Vec<&ReviewItem> = self.exact.iter().chain(&self.near).collect();
        let forest_first = self.forest.iter().filter(|i| overlap.contains(&i.sample_ids[0]));
        let forest_only = self.forest.iter().filter(|i| !overlap.contains(&i.sample_ids[0]));
        let centroid_only = self.centroid.iter().filter(|i| !overlap.contains(&i.sample_ids[0]));
        out.extend(forest_first.chain(forest_only).chain(centroid_only));
        out
    }

    pub fn render(&self, dataset: Option<&Dataset>) -> String {
        let texts: HashMap<&str, &str> = dataset
            .map(|d| d.samples.iter().map(|s| (s.id.as_str(), s.text.as_str())).collect())
            .unwrap_or_default();
        let quote = |id: &str| texts.get(id).map(|t| format!(" \"{}\"", t.replace('\n', " "))).unwrap_or_default();
        let overlap = self.overlap();
        let centroid_rank: HashMap<&str, &ReviewItem> =
            self.centroid.iter().map(|i| (i.sample_ids[0].as_str(), i)).collect();
        let forest_rank: HashMap<&str, &ReviewItem> =
            self.forest.iter().map(|i| (i.sample_ids[0].as_str(), i)).collect();

        let mut out = String::from("# Curation review\n\n");
        let _ = writeln!(
            out,
            "exact duplicate groups: {} | near-duplicate pairs: {} | centroid outliers: {} | forest outliers: {} | flagged by both: {}\n",
            self.exact.len(),
            self.near.len(),
            self.centroid.len(),
            self.forest.len(),
            overlap.len()
        );
        out.push_str("## Exact duplicates\n\n");
        for item in &self.exact {
            let _ = writeln!(out, "{}. {}{}", item.rank, item.sample_ids.join(", "), quote(&item.sample_ids[0]));
        }
        out.push_str("\n## Near duplicates\n\n");
        for item in &self.near {
            let _ = writeln!(
                out,
                "{}. cosine {:.4}: {}{} / {}{}",
                item.rank,
                item.score,
                item.sample_ids[0],
                quote(&item.sample_ids[0]),
                item.sample_ids[1],
                quote(&item.sample_ids[1])
            );
        }
        let line = |out: &mut String, id: &str, mark: &str| {
            let c = centroid_rank
                .get(id)
                .map(|i| format!("centroid #{} ({:.4})", i.rank, i.score));
            let f = forest_rank.get(id).map(|i| format!("forest #{} ({:.4})", i.rank, i.score));
            let sources: Vec<String> = [c, f].into_iter().flatten().collect();
            let _ = writeln!(out, "- {mark}{id}: {}{}", sources.join(", "), quote(id));
        };
        let _ = writeln!(out, "\n## Outliers\n\n### Flagged by both ({})\n", overlap.len());
        for item in self.forest.iter().filter(|i| overlap.contains(&i.sample_ids[0])) {
            line(&mut out, &item.sample_ids[0], "[both] ");
        }
        let forest_only: Vec<&ReviewItem> =
            self.forest.iter().filter(|i| !overlap.contains(&i.sample_ids[0])).collect();
        let _ = writeln!(out, "\n### Isolation Forest only ({})\n", forest_only.len());
        for item in forest_only {
            line(&mut out, &item.sample_ids[0], "");
        }
        let centroid_only: Vec<&ReviewItem> =
            self.centroid.iter().filter(|i| !overlap.contains(&i.sample_ids[0])).collect();
        let _ = writeln!(out, "\n### Centroid distance only ({})\n", centroid_only.len());
        for item in centroid_only {
            line(&mut out, &item.sample_ids[0], "");
        }
        out
    }
}

pub fn review_report(report: &ReviewReport, dataset: Option<&Dataset>, out: &Path) -> Result<()> {
    fs::write(out, report.render(dataset)).map_err(|source| CurationError::Io {
        path: out.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Sample;

    fn emb(id: &str, v: &[f64]) -> Embedding {
        Embedding {
            sample_id: id.into(),
            vector: v.to_vec(),
        }
    }

    #[test]
    fn cosine_by_hand() {
        assert!((cosine_similarity(&[3.0, 4.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, 2.0], &[2.0, 1.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(CurationError::ZeroVector(_))));
        assert!(matches!(cosine_similarity(&[1.0], &[1.0, 0.0]), Err(CurationError::DimensionMismatch(1, 2))));
    }

    #[test]
    fn distance_by_hand() {
        assert_eq!(expanded_distance(&[0.0, 0.0], &[3.0, 4.0]), 5.0);
        assert_eq!(direct_distance(&[0.0, 0.0], &[3.0, 4.0]), 5.0);
    }

    #[test]
    fn exact_duplicate_groups() {
        let d = Dataset::new(vec![
            Sample::new("a", "Global warming is a hoax", Fallacy::ConspiracyTheory),
            Sample::new("b", "Global warming is a hoax ", Fallacy::ConspiracyTheory),
            Sample::new("c", "Global warming is a hoax", Fallacy::ConspiracyTheory),
            Sample::new("d", "It snowed", Fallacy::Anecdote),
        ])
        .unwrap();
        assert_eq!(exact_duplicates(&d), vec![vec!["a".to_string(), "c".to_string()]]);
    }

    #[test]
    fn near_duplicate_ranking() {
        let e = vec![
            emb("x", &[1.0, 0.0, 0.0]),
            emb("y", &[0.0, 1.0, 0.0]),
            emb("z", &[0.9, 0.1, 0.0]),
            emb("w", &[0.0, 0.0, 1.0]),
        ];
        let top = near_duplicate_pairs(&e, NearDupQuery::TopK(3)).unwrap();
        assert_eq!(top.len(), 3);
        assert_eq!(top[0].sample_ids, vec!["x", "z"]);
        assert_eq!(top[0].rank, 1);
        assert!(top.windows(2).all(|w| w[0].score >= w[1].score));
        let orth = near_duplicate_pairs(&e[..2], NearDupQuery::Threshold(0.5)).unwrap();
        assert!(orth.is_empty());
    }

    #[test]
    fn centroid_of_single_sample_is_itself() {
        let d = Dataset::new(vec![Sample::new("a", "t", Fallacy::Anecdote)]).unwrap();
        let r = centroid_distances(&d, &[emb("a", &[1.0, 2.0])]).unwrap();
        assert_eq!(r[0].distance, 0.0);
        assert!(matches!(centroid_distances(&d, &[]), Err(CurationError::MissingEmbedding(_))));
    }

    #[test]
    fn forest_preconditions() {
        let e: Vec<Embedding> = (0..9).map(|i| emb(&i.to_string(), &[i as f64])).collect();
        assert!(matches!(forest_outliers(&e, 0.1, 0), Err(CurationError::TooFewSamples { .. })));
        let e: Vec<Embedding> = (0..20).map(|i| emb(&i.to_string(), &[i as f64])).collect();
        assert!(matches!(forest_outliers(&e, 0.6, 0), Err(CurationError::InvalidContamination(_))));
        assert!(matches!(forest_outliers(&e, 0.0, 0), Err(CurationError::InvalidContamination(_))));
        assert_eq!(forest_outliers(&e, 0.1, 0).unwrap().len(), 2);
    }

    #[test]
    fn report_order_and_overlap() {
        let near = vec![
            ReviewItem { kind: ReviewKind::NearDup, sample_ids: vec!["a".into(), "b".into()], score: 0.99, rank: 1 },
            ReviewItem { kind: ReviewKind::NearDup, sample_ids: vec!["c".into(), "d".into()], score: 0.97, rank: 2 },
        ];
        let centroid = vec![CentroidDistance { sample_id: "o1".into(), label: Fallacy::Anecdote, distance: 3.0 }];
        let forest = vec![
            ForestOutlier { sample_id: "o2".into(), score: 0.7 },
            ForestOutlier { sample_id: "o1".into(), score: 0.6 },
        ];
        let r = ReviewReport::new(&[vec!["e".into(), "f".into()]], near, &centroid, &forest);
        let kinds: Vec<ReviewKind> = r.items().iter().map(|i| i.kind).collect();
        assert_eq!(
            kinds,
            vec![ReviewKind::ExactDup, ReviewKind::NearDup, ReviewKind::NearDup, ReviewKind::ForestOutlier, ReviewKind::ForestOutlier]
        );
        assert_eq!(r.items()[3].sample_ids[0], "o1");
        let text = r.render(None);
        assert!(text.contains("### Flagged by both (1)"));
        assert!(text.contains("[both] o1"));
        let empty = ReviewReport::default().render(None);
        assert!(empty.contains("## Exact duplicates\n\n\n## Near duplicates"));
    }
}
