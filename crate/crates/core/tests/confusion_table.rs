//! Rebuilds the published normalised confusion matrix from integer counts.

use flicc_core::metrics::{render_row, row_normalize, rounded_row_sum, ConfusionMatrix};
use flicc_core::Fallacy;

const COUNTS: [[usize; 12]; 12] = [
    [29, 0, 1, 4, 0, 0, 0, 1, 1, 0, 0, 1],
    [0, 22, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1],
    [1, 0, 24, 0, 0, 1, 0, 0, 1, 1, 1, 2],
    [3, 0, 0, 18, 0, 0, 1, 0, 0, 0, 0, 0],
    [0, 0, 0, 0, 7, 0, 0, 0, 0, 0, 0, 0],
    [1, 0, 0, 0, 0, 5, 0, 0, 0, 0, 0, 1],
    [1, 0, 0, 0, 0, 0, 3, 2, 0, 0, 2, 0],
    [0, 0, 0, 0, 0, 0, 0, 18, 2, 0, 0, 1],
    [0, 0, 0, 1, 0, 0, 0, 3, 15, 2, 0, 1],
    [0, 0, 1, 0, 0, 0, 0, 0, 1, 14, 0, 4],
    [0, 3, 2, 0, 0, 0, 2, 1, 0, 0, 21, 3],
    [1, 0, 3, 0, 0, 2, 0, 1, 2, 1, 1, 14],
];

const PRINTED: [&str; 12] = [
    "0.78||0.03|0.11||||0.03|0.03|||0.03",
    "|0.92|||||||||0.04|0.04",
    "0.03||0.77|||0.03|||0.03|0.03|0.03|0.06",
    "0.14|||0.82|||0.05|||||",
    "||||1.00|||||||",
    "0.14|||||0.71||||||0.14",
    "0.13||||||0.38|0.25|||0.25|",
    "|||||||0.86|0.10|||0.05",
    "|||0.05||||0.14|0.68|0.09||0.05",
    "||0.05||||||0.05|0.70||0.20",
    "|0.09|0.06||||0.06|0.03|||0.66|0.09",
    "0.04||0.12|||0.08||0.04|0.08|0.04|0.04|0.56",
];

#[test]
fn all_rows_render_as_printed() {
    let norm = row_normalize(&ConfusionMatrix::from_counts(COUNTS));
    for (label, want) in Fallacy::ALL.iter().zip(PRINTED) {
        let got = render_row(&norm[label.index()]).join("|");
        assert_eq!(got, want, "{label}");
    }
}

#[test]
fn unrounded_rows_sum_to_one() {
    let norm = row_normalize(&ConfusionMatrix::from_counts(COUNTS));
    for row in &norm {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn rounded_sums_drift_by_at_most_two_hundredths() {
    let norm = row_normalize(&ConfusionMatrix::from_counts(COUNTS));
    let sums: Vec<f64> = norm.iter().map(|r| rounded_row_sum(r)).collect();
    assert!((sums[Fallacy::AdHominem.index()] - 1.01).abs() < 1e-9);
    assert!((sums[Fallacy::CherryPicking.index()] - 0.98).abs() < 1e-9);
    assert!(sums.iter().all(|s| (s - 1.0).abs() <= 0.02 + 1e-9), "{sums:?}");
}
