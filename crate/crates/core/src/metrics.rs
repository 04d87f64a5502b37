//! Overlap and regression metrics, fold splitting, and evaluation reports.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::BinaryMask;
use crate::measure::ols;

/// `(|A ∩ B|, |A|, |B|)` over the layer class.
fn overlap_counts(a: &BinaryMask, b: &BinaryMask) -> Result<(usize, usize, usize)> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch {
            expected: a.dims(),
            actual: b.dims(),
        });
    }
    let mut counts = (0, 0, 0);
    for (&x, &y) in a.cells().iter().zip(b.cells()) {
        counts.0 += usize::from(x && y);
        counts.1 += usize::from(x);
        counts.2 += usize::from(y);
    }
    Ok(counts)
}

/// `2|A ∩ B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let (inter, na, nb) = overlap_counts(a, b)?;
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// `|A ∩ B| / |A ∪ B|`; two empty masks score 1.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let (inter, na, nb) = overlap_counts(a, b)?;
    let union = na + nb - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Mean squared error between predictions and reference values.
pub fn mse(pred: &[f64], reference: &[f64]) -> Result<f64> {
    if pred.len() != reference.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: reference.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptySeries);
    }
    let ss: f64 = pred.iter().zip(reference).map(|(p, r)| (p - r).powi(2)).sum();
    Ok(ss / pred.len() as f64)
}

/// Fold assignment for k-fold cross-validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub k: usize,
    pub assignment: Vec<usize>,
    pub seed: u64,
}

impl FoldSplit {
    /// Sample indices held out in `fold`, ascending.
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == fold)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] != fold)
            .collect()
    }
}

/// Seeded shuffle followed by round-robin assignment.
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 || k > n {
        return Err(Error::InvalidFolds { k, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        assignment[i] = pos % k;
    }
    Ok(FoldSplit { k, assignment, seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// OLS of `y` on `x` with the coefficient of determination.
pub fn comparison_fit(x: &[f64], y: &[f64]) -> Result<ComparisonFit> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    let points: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    let (slope, intercept) = ols(&points)?;
    let my = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let ss_res: f64 = points.iter().map(|&(a, b)| (b - (slope * a + intercept)).powi(2)).sum();
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };
    Ok(ComparisonFit { slope, intercept, r2 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub dice: f64,
    pub iou: f64,
}

/// Segmentation scores with optional thickness agreement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_image: Vec<ImageScore>,
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub mse: Option<f64>,
    pub fit: Option<ComparisonFit>,
}

/// Paired thickness series: `predicted` are the `Y_i`, `reference` the `Ŷ_i`.
#[derive(Debug, Clone, Copy)]
pub struct ThicknessPairs<'a> {
    pub predicted: &'a [f64],
    pub reference: &'a [f64],
}

/// Scores `(id, truth, prediction)` triples. Aggregates are plain means in
/// the given order.
pub fn evaluate<'a, I>(items: I, thickness: Option<ThicknessPairs<'_>>) -> Result<EvalReport>
where
    I: IntoIterator<Item = (&'a str, &'a BinaryMask, &'a BinaryMask)>,
{
    let per_image = items
        .into_iter()
        .map(|(id, truth, pred)| {
            Ok(ImageScore {
                id: id.to_owned(),
                dice: dice(truth, pred)?,
                iou: iou(truth, pred)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if per_image.is_empty() {
        return Err(Error::EmptySeries);
    }
    let n = per_image.len() as f64;
    let mean_dice = per_image.iter().map(|s| s.dice).sum::<f64>() / n;
    let mean_iou = per_image.iter().map(|s| s.iou).sum::<f64>() / n;
    let (mse, fit) = match thickness {
        Some(t) => (
            Some(mse(t.predicted, t.reference)?),
            Some(comparison_fit(t.reference, t.predicted)?),
        ),
        None => (None, None),
    };
    Ok(EvalReport {
        per_image,
        mean_dice,
        mean_iou,
        mse,
        fit,
    })
}
