//! Post-hoc analysis of learned embeddings.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::domain::TaskKind;
use crate::error::{Error, Result};
use crate::linalg;
use crate::parallelogram::{
    self, full_permissible_set, nonabelian_closure, predicted_acc, realized_within, MatrixNorm, Representation,
    DEFAULT_DELTA,
};
use crate::trainer::RunRecord;

#[derive(Clone, Debug)]
pub struct PcaResult {
    pub mean: Vec<f64>,
    /// Unit principal directions, one per row, by decreasing variance.
    pub components: Array2<f64>,
    /// Explained-variance ratios, descending, summing to 1.
    pub ratios: Vec<f64>,
    /// Coordinates of each centered row in the component basis.
    pub projections: Array2<f64>,
    /// `−Σ r ln r` over the ratios, with `0 ln 0 = 0`.
    pub entropy: f64,
    /// `exp(entropy)`.
    pub effective_dim: f64,
}

/// Mean-centered PCA of the rows of `data` (`p × d`).
pub fn pca(data: &Array2<f64>) -> Result<PcaResult> {
    let (p, d) = data.dim();
    if p < 2 || d == 0 {
        return Err(Error::Shape(format!("pca needs at least 2 rows and 1 column, got {p}×{d}")));
    }
    let mean = data.mean_axis(Axis(0)).expect("nonempty");
    let centered = data - &mean;
    let dec = linalg::svd(&centered);
    let order: Vec<usize> = (0..d).rev().collect();
    let total: f64 = dec.singular_values.iter().map(|s| s * s).sum();
    let smax = dec.singular_values.last().copied().unwrap_or(0.0);
    let scale = data.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    if total == 0.0 || smax <= 1e-14 * scale {
        return Err(Error::ZeroVariance);
    }
    let ratios: Vec<f64> = order.iter().map(|&k| dec.singular_values[k].powi(2) / total).collect();
    let mut components = Array2::zeros((d, d));
    for (row, &k) in order.iter().enumerate() {
        components.row_mut(row).assign(&dec.v.column(k));
    }
    let projections = centered.dot(&components.t());
    let entropy = entropy(&ratios);
    Ok(PcaResult {
        mean: mean.to_vec(),
        components,
        ratios,
        projections,
        entropy,
        effective_dim: entropy.exp(),
    })
}

/// Shannon entropy (natural log) of a probability vector.
pub fn entropy(ratios: &[f64]) -> f64 {
    let s: f64 = ratios.iter().filter(|&&r| r > 0.0).map(|&r| -r * r.ln()).sum();
    s.max(0.0)
}

/// One row of the accuracy comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub fraction: String,
    pub seed: u64,
    /// Full-dataset accuracy of the trained model.
    pub acc: f64,
    /// Accuracy predicted from the realized parallelograms.
    pub acc_pred: f64,
    pub rqi: f64,
    pub rqi_upper: f64,
    pub acc_upper: f64,
    /// Whether every label occurs in the training set.
    pub labels_covered: bool,
}

pub const ACCURACY_CSV_HEADER: &str = "fraction,seed,acc,acc_pred,rqi,rqi_upper,acc_upper";

/// Join trained runs with the parallelogram bounds.
///
/// Vector tasks use the rank closure for the upper bounds. S3 runs use the
/// group-deduction closure, which is a valid (possibly loose) stand-in.
pub fn rqi_accuracy_table(runs: &[RunRecord]) -> Result<Vec<AccuracyRow>> {
    runs.iter().map(accuracy_row).collect()
}

pub fn accuracy_row(run: &RunRecord) -> Result<AccuracyRow> {
    let task = run.split.task;
    let train = &run.split.train;
    let p0 = full_permissible_set(&task);
    if p0.is_empty() {
        return Err(Error::DegenerateTask);
    }
    let realized = realized_within(&run.embeddings, &p0, DEFAULT_DELTA, MatrixNorm::default());
    let closure = match task.kind() {
        TaskKind::PermutationS3 => nonabelian_closure(train, &task)?,
        _ => parallelogram::ideal_closure(train, &task)?,
    };
    let mut labels = vec![false; task.num_labels()];
    for s in train {
        labels[s.label] = true;
    }
    Ok(AccuracyRow {
        fraction: run.split.fraction.to_string(),
        seed: run.optim.seed,
        acc: run.full_acc,
        acc_pred: predicted_acc(train, &realized),
        rqi: realized.len() as f64 / p0.len() as f64,
        rqi_upper: closure.len() as f64 / p0.len() as f64,
        acc_upper: predicted_acc(train, &closure),
        labels_covered: labels.iter().all(|&x| x),
    })
}

pub fn accuracy_csv(rows: &[AccuracyRow]) -> String {
    let mut out = String::from(ACCURACY_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.fraction, r.seed, r.acc, r.acc_pred, r.rqi, r.rqi_upper, r.acc_upper
        ));
    }
    out
}

/// PCA of a trained representation's embedding rows.
pub fn representation_pca(r: &Representation) -> Result<PcaResult> {
    pca(r.data())
}
