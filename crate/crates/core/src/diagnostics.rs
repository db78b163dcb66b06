//! Plug-in entropy and mutual-information estimates over segment scores,
//! and a collapse detector based on batch-marginal attribute usage.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::NumericArray;
use crate::jemloss::{joint_distribution, JointDistribution, LossError, SegmentScores};

pub const DEFAULT_COLLAPSE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("invalid probability block: {0}")]
    InvalidBlock(String),
    #[error("collapse threshold must lie in (0, 1), got {0}")]
    InvalidThreshold(f64),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// Plug-in entropy with `0 ln 0 = 0`.
fn entropy(p: impl IntoIterator<Item = f64>) -> f64 {
    -p.into_iter().filter(|&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

fn check_block(block: &NumericArray) -> Result<(), DiagnosticsError> {
    if block.rank() != 2 {
        return Err(DiagnosticsError::InvalidBlock(format!(
            "expected a matrix, got shape {:?}",
            block.shape()
        )));
    }
    if let Some(v) = block.data().iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(DiagnosticsError::InvalidBlock(format!("entry {v} is not a probability")));
    }
    let s: f64 = block.data().iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(DiagnosticsError::InvalidBlock(format!("entries sum to {s}")));
    }
    Ok(())
}

fn marginal(block: &NumericArray, axis: Axis) -> Vec<f64> {
    let (r, c) = (block.shape()[0], block.shape()[1]);
    match axis {
        Axis::Rows => (0..r).map(|i| block.row(i).iter().sum()).collect(),
        Axis::Cols => (0..c).map(|j| (0..r).map(|i| block.at2(i, j)).sum()).collect(),
    }
}

/// `-sum P ln P` over every nonzero entry of the block.
pub fn block_joint_entropy(block: &NumericArray) -> Result<f64, DiagnosticsError> {
    check_block(block)?;
    Ok(entropy(block.data().iter().copied()))
}

/// Entropy of the row-sum (`Rows`) or column-sum (`Cols`) marginal.
pub fn marginal_entropy(block: &NumericArray, axis: Axis) -> Result<f64, DiagnosticsError> {
    check_block(block)?;
    Ok(entropy(marginal(block, axis)))
}

/// `H(rows) + H(cols) - H(joint)`; values within 1e-9 of zero clamp to 0.
pub fn mutual_information(block: &NumericArray) -> Result<f64, DiagnosticsError> {
    let mi = marginal_entropy(block, Axis::Rows)? + marginal_entropy(block, Axis::Cols)?
        - block_joint_entropy(block)?;
    Ok(if mi.abs() < 1e-9 { 0.0 } else { mi })
}

/// Pairwise segment mutual information and per-segment usage entropy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MutualInfoReport {
    /// `K x K`, row-major.
    pub mi: Vec<Vec<f64>>,
    pub marginal_entropy: Vec<f64>,
    pub mean_offdiag_mi: f64,
}

/// Block `(a, b)` averaged with the transpose of block `(b, a)`, which is
/// the same block estimated with the branches swapped.
fn symmetrized_block(p: &JointDistribution, a: usize, b: usize) -> NumericArray {
    let m = p.segment_size();
    let data = (0..m)
        .flat_map(|r| (0..m).map(move |c| (r, c)))
        .map(|(r, c)| 0.5 * (p.get(a, b, r, c) + p.get(b, a, c, r)))
        .collect();
    NumericArray::new(vec![m, m], data).expect("square block")
}

/// Estimates segment MI from the empirical joint of two branches,
/// averaged over both branch orders.
pub fn mutual_info_report(q1: &SegmentScores, q2: &SegmentScores) -> Result<MutualInfoReport, DiagnosticsError> {
    let p = joint_distribution(q1, q2)?;
    let k = p.segments();
    let mut mi = vec![vec![0.0; k]; k];
    let mut marginal_entropy = Vec::with_capacity(k);
    for a in 0..k {
        for b in a..k {
            let v = mutual_information(&symmetrized_block(&p, a, b))?;
            mi[a][b] = v;
            mi[b][a] = v;
        }
        marginal_entropy.push(self::marginal_entropy(&symmetrized_block(&p, a, a), Axis::Rows)?);
    }
    let mean_offdiag_mi = if k > 1 {
        let s: f64 = (0..k)
            .flat_map(|a| (0..k).filter(move |&b| b != a).map(move |b| (a, b)))
            .map(|(a, b)| mi[a][b])
            .sum();
        s / (k * (k - 1)) as f64
    } else {
        0.0
    };
    Ok(MutualInfoReport {
        mi,
        marginal_entropy,
        mean_offdiag_mi,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub segment_entropy: Vec<f64>,
    pub min_segment_entropy: f64,
    pub collapsed_segments: Vec<usize>,
    /// Mean over `(k, m)` of the across-sample variance of `q_i(k, m)`.
    pub batch_variance_of_scores: f64,
    pub threshold: f64,
}

/// Flags segments whose batch-marginal entropy falls below
/// `threshold_fraction * ln M`.
pub fn collapse_report(q: &SegmentScores, threshold_fraction: f64) -> Result<CollapseReport, DiagnosticsError> {
    if !(threshold_fraction > 0.0 && threshold_fraction < 1.0) {
        return Err(DiagnosticsError::InvalidThreshold(threshold_fraction));
    }
    let (n, k, m) = (q.samples(), q.segments(), q.segment_size());
    let threshold = threshold_fraction * (m as f64).ln();
    let mut segment_entropy = Vec::with_capacity(k);
    let mut var_sum = 0.0;
    for seg in 0..k {
        let mut mean = vec![0.0; m];
        for i in 0..n {
            for (acc, v) in mean.iter_mut().zip(q.get(i, seg)) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= n as f64);
        for i in 0..n {
            for (mu, v) in mean.iter().zip(q.get(i, seg)) {
                var_sum += (v - mu) * (v - mu);
            }
        }
        segment_entropy.push(entropy(mean));
    }
    let collapsed_segments = (0..k).filter(|&s| segment_entropy[s] < threshold).collect();
    Ok(CollapseReport {
        min_segment_entropy: segment_entropy.iter().copied().fold(f64::INFINITY, f64::min),
        segment_entropy,
        collapsed_segments,
        batch_variance_of_scores: var_sum / (n * k * m) as f64,
        threshold,
    })
}

/// The serialized diagnostic summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub mi_matrix: Vec<Vec<f64>>,
    pub marginal_entropies: Vec<f64>,
    pub mean_offdiag_mi: f64,
    pub min_segment_entropy: f64,
    pub collapsed_segments: Vec<usize>,
}

impl DiagnosticReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// MI between the branches plus a collapse check over both branches' rows.
pub fn diagnose(q1: &SegmentScores, q2: &SegmentScores, threshold_fraction: f64) -> Result<DiagnosticReport, DiagnosticsError> {
    let mi = mutual_info_report(q1, q2)?;
    let (n, k, m) = (q1.samples(), q1.segments(), q1.segment_size());
    let mut both = q1.array().data().to_vec();
    both.extend_from_slice(q2.array().data());
    let union = SegmentScores::new(NumericArray::new(vec![2 * n, k, m], both).expect("stacked scores"))?;
    let collapse = collapse_report(&union, threshold_fraction)?;
    Ok(DiagnosticReport {
        mi_matrix: mi.mi,
        marginal_entropies: mi.marginal_entropy,
        mean_offdiag_mi: mi.mean_offdiag_mi,
        min_segment_entropy: collapse.min_segment_entropy,
        collapsed_segments: collapse.collapsed_segments,
    })
}
