//! Accuracy, per-class precision/recall/F1, confusion matrices and the ZeroR baseline.
//!
//! Predictions are `Option<Fallacy>`: `None` stands for an abstention (an LLM
//! that answered "None" or nothing usable). An abstention is never correct and
//! adds a false negative to the true class without a false positive anywhere.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::taxonomy::{Fallacy, NUM_LABELS};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("{truths} truths but {predictions} predictions")]
    LengthMismatch { truths: usize, predictions: usize },
    #[error("empty input")]
    EmptyInput,
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl MetricCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn support(&self) -> usize {
        self.tp + self.fn_
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn check(truths: usize, predictions: usize) -> Result<()> {
    if truths != predictions {
        return Err(MetricsError::LengthMismatch { truths, predictions });
    }
    Ok(())
}

pub fn accuracy(truths: &[Fallacy], predictions: &[Option<Fallacy>]) -> Result<f64> {
    check(truths.len(), predictions.len())?;
    if truths.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let correct = truths.iter().zip(predictions).filter(|(t, p)| Some(**t) == **p).count();
    Ok(correct as f64 / truths.len() as f64)
}

/// One-vs-rest counts per class, in canonical order.
pub fn per_class_counts(truths: &[Fallacy], predictions: &[Option<Fallacy>]) -> Result<[MetricCounts; NUM_LABELS]> {
    check(truths.len(), predictions.len())?;
    let mut counts = [MetricCounts::default(); NUM_LABELS];
    for (t, p) in truths.iter().zip(predictions) {
        if Some(*t) == *p {
            counts[t.index()].tp += 1;
        } else {
            counts[t.index()].fn_ += 1;
            if let Some(p) = p {
                counts[p.index()].fp += 1;
            }
        }
    }
    let n = truths.len();
    for c in &mut counts {
        c.tn = n - c.tp - c.fp - c.fn_;
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

pub fn per_class_scores(
    truths: &[Fallacy],
    predictions: &[Option<Fallacy>],
) -> Result<Vec<(Fallacy, MetricCounts, ClassScores)>> {
    let counts = per_class_counts(truths, predictions)?;
    Ok(Fallacy::ALL
        .iter()
        .zip(counts)
        .map(|(&label, c)| {
            (
                label,
                c,
                ClassScores {
                    precision: c.precision(),
                    recall: c.recall(),
                    f1: c.f1(),
                    support: c.support(),
                },
            )
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub label: Fallacy,
    #[serde(flatten)]
    pub scores: ClassScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub schema_version: u32,
    pub classes: Vec<ClassRow>,
    pub accuracy: f64,
    pub macro_avg: Averages,
    pub weighted_avg: Averages,
    pub total: usize,
    /// Predictions that named no label.
    pub abstentions: usize,
}

pub fn report(truths: &[Fallacy], predictions: &[Option<Fallacy>]) -> Result<ClassificationReport> {
    let acc = accuracy(truths, predictions)?;
    let rows = per_class_scores(truths, predictions)?;
    let n = truths.len() as f64;
    let mut macro_avg = Averages { precision: 0.0, recall: 0.0, f1: 0.0 };
    let mut weighted_avg = macro_avg;
    for (_, _, s) in &rows {
        macro_avg.precision += s.precision;
        macro_avg.recall += s.recall;
        macro_avg.f1 += s.f1;
        let w = s.support as f64;
        weighted_avg.precision += w * s.precision;
        weighted_avg.recall += w * s.recall;
        weighted_avg.f1 += w * s.f1;
    }
    let k = NUM_LABELS as f64;
    macro_avg = Averages {
        precision: macro_avg.precision / k,
        recall: macro_avg.recall / k,
        f1: macro_avg.f1 / k,
    };
    weighted_avg = Averages {
        precision: weighted_avg.precision / n,
        recall: weighted_avg.recall / n,
        f1: weighted_avg.f1 / n,
    };
    Ok(ClassificationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        classes: rows.into_iter().map(|(label, _, scores)| ClassRow { label, scores }).collect(),
        accuracy: acc,
        macro_avg,
        weighted_avg,
        total: truths.len(),
        abstentions: predictions.iter().filter(|p| p.is_none()).count(),
    })
}

impl ClassificationReport {
    pub fn class(&self, label: Fallacy) -> &ClassScores {
        &self.classes[label.index()].scores
    }

    /// Text table with two decimals.
    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<24} {:>9} {:>9} {:>9} {:>9}\n",
            "", "precision", "recall", "f1-score", "support"
        );
        for row in &self.classes {
            let s = &row.scores;
            let _ = writeln!(
                out,
                "{:<24} {:>9.2} {:>9.2} {:>9.2} {:>9}",
                row.label.canonical_name(),
                s.precision,
                s.recall,
                s.f1,
                s.support
            );
        }
        out.push('\n');
        let _ = writeln!(out, "{:<24} {:>9} {:>9} {:>9.2} {:>9}", "accuracy", "", "", self.accuracy, self.total);
        for (name, a) in [("macro avg", &self.macro_avg), ("weighted avg", &self.weighted_avg)] {
            let _ = writeln!(
                out,
                "{:<24} {:>9.2} {:>9.2} {:>9.2} {:>9}",
                name, a.precision, a.recall, a.f1, self.total
            );
        }
        if self.abstentions > 0 {
            let _ = writeln!(out, "{:<24} {:>39}", "unlabelled", self.abstentions);
        }
        out
    }
}

/// Rows are actual labels, columns predicted labels, both in canonical order.
/// Abstentions are tallied per actual label outside the matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<Fallacy>,
    pub counts: [[usize; NUM_LABELS]; NUM_LABELS],
    pub abstained: [usize; NUM_LABELS],
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[usize; NUM_LABELS]; NUM_LABELS]) -> Self {
        Self {
            labels: Fallacy::ALL.to_vec(),
            counts,
            abstained: [0; NUM_LABELS],
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum::<usize>() + self.abstained.iter().sum::<usize>()
    }

    pub fn row_sums(&self) -> [usize; NUM_LABELS] {
        std::array::from_fn(|i| self.counts[i].iter().sum::<usize>() + self.abstained[i])
    }

    pub fn column_sums(&self) -> [usize; NUM_LABELS] {
        std::array::from_fn(|j| self.counts.iter().map(|row| row[j]).sum())
    }
}

pub fn confusion(truths: &[Fallacy], predictions: &[Option<Fallacy>]) -> Result<ConfusionMatrix> {
    check(truths.len(), predictions.len())?;
    let mut m = ConfusionMatrix::from_counts([[0; NUM_LABELS]; NUM_LABELS]);
    for (t, p) in truths.iter().zip(predictions) {
        match p {
            Some(p) => m.counts[t.index()][p.index()] += 1,
            None => m.abstained[t.index()] += 1,
        }
    }
    Ok(m)
}

/// Divides each row by its support (abstentions included); empty rows stay zero.
pub fn row_normalize(matrix: &ConfusionMatrix) -> [[f64; NUM_LABELS]; NUM_LABELS] {
    let sums = matrix.row_sums();
    std::array::from_fn(|i| {
        std::array::from_fn(|j| {
            if sums[i] == 0 {
                0.0
            } else {
                matrix.counts[i][j] as f64 / sums[i] as f64
            }
        })
    })
}

/// Two-decimal cell text, halves rounded away from zero; exact zeros render as blank.
pub fn render_cell(value: f64) -> String {
    if value == 0.0 {
        String::new()
    } else {
        format!("{:.2}", (value * 100.0).round() / 100.0)
    }
}

pub fn render_row(row: &[f64]) -> Vec<String> {
    row.iter().map(|&v| render_cell(v)).collect()
}

/// Row-normalized matrix as a text grid with blank zeros.
pub fn render_normalized(matrix: &ConfusionMatrix) -> String {
    let norm = row_normalize(matrix);
    let mut out = format!("{:<24}", "actual \\ predicted");
    for label in Fallacy::ALL {
        let short: String = label.canonical_name().chars().take(6).collect();
        let _ = write!(out, " {short:>6}");
    }
    out.push('\n');
    for label in Fallacy::ALL {
        let _ = write!(out, "{:<24}", label.canonical_name());
        for cell in render_row(&norm[label.index()]) {
            let _ = write!(out, " {cell:>6}");
        }
        out.push('\n');
    }
    out
}

/// Sum of the two-decimal rounded cells of a row, as a reader of the rendered table would add them.
pub fn rounded_row_sum(row: &[f64]) -> f64 {
    row.iter().map(|v| (v * 100.0).round()).sum::<f64>() / 100.0
}

/// Constant classifier predicting the most frequent training label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZeroR {
    pub label: Fallacy,
}

impl ZeroR {
    pub fn predict(&self, n: usize) -> Vec<Option<Fallacy>> {
        vec![Some(self.label); n]
    }
}

/// Fits ZeroR; ties go to the label earliest in canonical order.
pub fn zero_r(train_labels: &[Fallacy]) -> Result<ZeroR> {
    if train_labels.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut counts = [0usize; NUM_LABELS];
    for l in train_labels {
        counts[l.index()] += 1;
    }
    let mut best = 0;
    for i in 1..NUM_LABELS {
        if counts[i] > counts[best] {
            best = i;
        }
    }
    Ok(ZeroR { label: Fallacy::ALL[best] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use Fallacy::*;

    fn some(v: &[Fallacy]) -> Vec<Option<Fallacy>> {
        v.iter().copied().map(Some).collect()
    }

    #[test]
    fn accuracy_by_hand() {
        let t = [AdHominem, AdHominem, Anecdote, CherryPicking];
        let p = some(&[AdHominem, Anecdote, Anecdote, Anecdote]);
        assert_eq!(accuracy(&t, &p).unwrap(), 0.5);
        assert_eq!(accuracy(&t, &some(&t)).unwrap(), 1.0);
        assert_eq!(accuracy(&[], &[]), Err(MetricsError::EmptyInput));
        assert!(matches!(accuracy(&t, &p[..2]), Err(MetricsError::LengthMismatch { .. })));
    }

    #[test]
    fn perfect_predictions() {
        let t = [AdHominem, FakeExperts, FakeExperts, SingleCause];
        let r = report(&t, &some(&t)).unwrap();
        for label in [AdHominem, FakeExperts, SingleCause] {
            assert_eq!(r.class(label).f1, 1.0);
        }
        assert_eq!(r.class(Anecdote).f1, 0.0);
        assert_eq!(r.weighted_avg.f1, 1.0);
        let m = confusion(&t, &some(&t)).unwrap();
        assert_eq!(m.counts[FakeExperts.index()][FakeExperts.index()], 2);
        assert_eq!(m.total(), 4);
    }

    #[test]
    fn abstentions_only_add_false_negatives() {
        let t = [AdHominem, Anecdote];
        let p = vec![None, Some(Anecdote)];
        let c = per_class_counts(&t, &p).unwrap();
        assert_eq!(c[0], MetricCounts { tp: 0, tn: 1, fp: 0, fn_: 1 });
        assert_eq!(c[1], MetricCounts { tp: 1, tn: 1, fp: 0, fn_: 0 });
        let r = report(&t, &p).unwrap();
        assert_eq!(r.abstentions, 1);
        let m = confusion(&t, &p).unwrap();
        assert_eq!(m.row_sums()[0], 1);
        assert_eq!(row_normalize(&m)[0], [0.0; 12]);
    }

    #[test]
    fn row_normalization() {
        let mut counts = [[0; 12]; 12];
        counts[0][0] = 2;
        counts[0][1] = 2;
        counts[FakeExperts.index()][FakeExperts.index()] = 7;
        let norm = row_normalize(&ConfusionMatrix::from_counts(counts));
        assert_eq!(&norm[0][..2], &[0.5, 0.5]);
        assert_eq!(render_cell(norm[FakeExperts.index()][FakeExperts.index()]), "1.00");
        assert_eq!(norm[3], [0.0; 12]);
        assert_eq!(render_cell(0.0), "");
    }

    #[test]
    fn zero_r_ties_use_canonical_order() {
        assert_eq!(zero_r(&[CherryPicking, Anecdote, CherryPicking, Anecdote]).unwrap().label, Anecdote);
        assert_eq!(zero_r(&[SlothfulInduction]).unwrap().label, SlothfulInduction);
        assert_eq!(zero_r(&[]), Err(MetricsError::EmptyInput));
    }

    #[test]
    fn report_json_round_trip() {
        let t = [AdHominem, Anecdote, Anecdote];
        let r = report(&t, &some(&[Anecdote, Anecdote, Anecdote])).unwrap();
        let back: ClassificationReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(r.render().contains("macro avg"));
    }
}
