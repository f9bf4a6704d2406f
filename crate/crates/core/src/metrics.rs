//! Evaluation metrics: accuracy, ten-bin expected calibration error, and the
//! instance-level uncertainty measures (prediction interval width and
//! prediction variance) over the retained ensemble samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::percentile;
use crate::numerics::{Scalar, Tensor};

/// One evaluated instance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRecord {
    pub true_class: usize,
    pub predicted_class: usize,
    /// `max_c proba_c`; always in (0, 1] downstream of a softmax.
    pub confidence: f64,
}

impl EvalRecord {
    pub fn correct(&self) -> bool {
        self.true_class == self.predicted_class
    }
}

/// Statistics of one confidence bin on (0, 1].
#[derive(Clone, Debug, Serialize)]
pub struct BinStats {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub accuracy: f64,
    pub mean_confidence: f64,
}

/// Bin index under the edges (0, 0.1], (0.1, 0.2], ..., (0.9, 1.0].
fn bin_of(confidence: f64) -> usize {
    for i in 0..10 {
        if confidence <= (i + 1) as f64 / 10.0 {
            return i;
        }
    }
    9
}

/// Per-bin counts, accuracies, and mean confidences over ten equal-width
/// bins. Bin counts sum to the record count.
pub fn bin_stats(records: &[EvalRecord]) -> Result<Vec<BinStats>> {
    if records.is_empty() {
        return Err(Error::numeric("no records to bin"));
    }
    let mut count = [0usize; 10];
    let mut correct = [0usize; 10];
    let mut conf = [0.0f64; 10];
    for r in records {
        let b = bin_of(r.confidence);
        count[b] += 1;
        conf[b] += r.confidence;
        if r.correct() {
            correct[b] += 1;
        }
    }
    Ok((0..10)
        .map(|i| BinStats {
            lo: i as f64 / 10.0,
            hi: (i + 1) as f64 / 10.0,
            count: count[i],
            accuracy: if count[i] > 0 {
                correct[i] as f64 / count[i] as f64
            } else {
                0.0
            },
            mean_confidence: if count[i] > 0 { conf[i] / count[i] as f64 } else { 0.0 },
        })
        .collect())
}

/// Expected calibration error with ten bins:
/// `sum_i |B_i|/u * |acc(B_i) - conf(B_i)|`; empty bins contribute zero.
pub fn ece10(records: &[EvalRecord]) -> Result<f64> {
    let bins = bin_stats(records)?;
    let u = records.len() as f64;
    Ok(bins
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / u * (b.accuracy - b.mean_confidence).abs())
        .sum())
}

/// Fraction of correct predictions.
pub fn accuracy(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::numeric("no records"));
    }
    Ok(records.iter().filter(|r| r.correct()).count() as f64 / records.len() as f64)
}

/// Prediction interval width for class `c`: the 97.5th minus the 2.5th
/// percentile (linear interpolation) of the c-th coordinate over all
/// retained samples.
pub fn piw<T: Scalar>(samples: &[Tensor<T>], class: usize) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::numeric("piw needs at least two samples"));
    }
    let coords: Vec<f64> = samples.iter().map(|s| s.data()[class].to_f64_val()).collect();
    Ok(percentile(&coords, 97.5)? - percentile(&coords, 2.5)?)
}

/// Prediction variance for class `c`: population variance (divide by the
/// sample count) of the c-th coordinate about the sample mean.
pub fn pv<T: Scalar>(samples: &[Tensor<T>], class: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::numeric("pv needs at least one sample"));
    }
    let coords: Vec<f64> = samples.iter().map(|s| s.data()[class].to_f64_val()).collect();
    let n = coords.len() as f64;
    // shifted two-pass: exact zero for identical samples, less cancellation
    let shift = coords[0];
    let mean = coords.iter().map(|x| x - shift).sum::<f64>() / n;
    Ok(coords
        .iter()
        .map(|x| {
            let d = (x - shift) - mean;
            d * d
        })
        .sum::<f64>()
        / n)
}

/// One row of the per-class, per-correctness uncertainty table.
#[derive(Clone, Debug, Serialize)]
pub struct UncertaintyRow {
    pub class: usize,
    pub correct: bool,
    pub count: usize,
    pub mean_piw: f64,
    pub mean_pv: f64,
}

/// Mean PIW/PV per (predicted class, correctness) cell.
pub fn uncertainty_table(
    cells: &[(usize, bool, f64, f64)],
    classes: usize,
) -> Vec<UncertaintyRow> {
    let mut rows = Vec::new();
    for class in 0..classes {
        for correct in [true, false] {
            let matching: Vec<&(usize, bool, f64, f64)> = cells
                .iter()
                .filter(|(c, ok, _, _)| *c == class && *ok == correct)
                .collect();
            let n = matching.len();
            let (sp, sv) = matching
                .iter()
                .fold((0.0, 0.0), |(p, v), (_, _, pw, pvv)| (p + pw, v + pvv));
            rows.push(UncertaintyRow {
                class,
                correct,
                count: n,
                mean_piw: if n > 0 { sp / n as f64 } else { 0.0 },
                mean_pv: if n > 0 { sv / n as f64 } else { 0.0 },
            });
        }
    }
    rows
}
