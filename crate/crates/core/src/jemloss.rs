//! The segmented joint-entropy objective.
//!
//! Each of the `K` segments of a raw embedding is softmax-normalized into
//! a distribution over `M` attribute values. For two views the empirical
//! joint distribution `P` is the batch mean of outer products of their
//! score vectors, arranged as a `K x K` grid of `M x M` blocks. The loss
//! combines
//!
//! * `l_jed`: `sum P ln P` over the diagonal entries of diagonal blocks, / K
//! * `l_jeo`: `sum P ln P` over every entry of off-diagonal blocks, / K(K-1)
//! * `l_ti`: mean over samples and segments of `-ln <q'_ik, q''_ik>`
//!
//! as `l_jed + l_jeo + lambda * l_ti`. All logarithms are natural and take
//! `ln(x + eps_log)`.
//!
//! Values are available two ways: the direct functions here and the tape
//! graph from [`build_loss`]. The tape graph is what training
//! differentiates; the direct functions serve reporting and cross-checks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, NumericArray, Tape, Var, DEFAULT_EPS_LOG};
use crate::model::SegmentLayout;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("off-diagonal loss needs at least 2 segments, got {0}")]
    TooFewSegments(usize),
    #[error("invalid scores: {0}")]
    InvalidScores(String),
    #[error("invalid joint distribution: {0}")]
    InvalidJoint(String),
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

fn xlogx(p: f64) -> f64 {
    p * (p + DEFAULT_EPS_LOG).ln()
}

/// Per-sample, per-segment probability vectors, shape `[N, K, M]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentScores {
    q: NumericArray,
}

impl SegmentScores {
    /// Validates that every `(i, k)` row is a probability simplex.
    pub fn new(q: NumericArray) -> Result<Self, LossError> {
        if q.rank() != 3 {
            return Err(LossError::Shape(format!(
                "scores must be [N, K, M], got {:?}",
                q.shape()
            )));
        }
        for (r, row) in q.data().chunks(q.last_dim()).enumerate() {
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(LossError::InvalidScores(format!("row {r} has entries outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(LossError::InvalidScores(format!("row {r} sums to {s}")));
            }
        }
        Ok(Self { q })
    }

    pub fn array(&self) -> &NumericArray {
        &self.q
    }

    pub fn samples(&self) -> usize {
        self.q.shape()[0]
    }

    pub fn segments(&self) -> usize {
        self.q.shape()[1]
    }

    pub fn segment_size(&self) -> usize {
        self.q.shape()[2]
    }

    /// Score vector of sample `i`, segment `k`.
    pub fn get(&self, i: usize, k: usize) -> &[f64] {
        let m = self.segment_size();
        let start = (i * self.segments() + k) * m;
        &self.q.data()[start..start + m]
    }

    fn check_pair(&self, other: &Self) -> Result<(), LossError> {
        if self.q.shape() != other.q.shape() {
            return Err(LossError::Shape(format!(
                "branches disagree: {:?} vs {:?}",
                self.q.shape(),
                other.q.shape()
            )));
        }
        Ok(())
    }
}

/// Softmax within each segment of raw embeddings `z` (`[N, K*M]`).
pub fn segment_softmax(z: &NumericArray, layout: SegmentLayout) -> Result<SegmentScores, LossError> {
    if z.rank() != 2 || z.last_dim() != layout.dim() {
        return Err(LossError::Shape(format!(
            "embeddings {:?} do not match layout K={} M={}",
            z.shape(),
            layout.segments(),
            layout.segment_size()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(z.clone());
    let q = segment_scores_on_tape(&mut tape, x, layout)?;
    Ok(SegmentScores {
        q: tape.value(q).clone(),
    })
}

/// `[N, K*M]` raw embeddings to `[N, K, M]` scores.
pub fn segment_scores_on_tape(tape: &mut Tape, z: Var, layout: SegmentLayout) -> Result<Var, DiffError> {
    let n = tape.value(z).shape()[0];
    let r = tape.reshape(z, &[n, layout.segments(), layout.segment_size()])?;
    tape.row_softmax(r)
}

/// The `(K*M) x (K*M)` empirical joint distribution of two branches.
#[derive(Clone, Debug, PartialEq)]
pub struct JointDistribution {
    k: usize,
    m: usize,
    p: NumericArray,
}

impl JointDistribution {
    /// Wraps a full matrix; entries must be non-negative and each block
    /// must sum to 1 within 1e-6.
    pub fn new(k: usize, m: usize, p: NumericArray) -> Result<Self, LossError> {
        if p.shape() != [k * m, k * m] {
            return Err(LossError::Shape(format!(
                "joint matrix {:?} does not match K={k} M={m}",
                p.shape()
            )));
        }
        if p.data().iter().any(|&v| !(v >= 0.0)) {
            return Err(LossError::InvalidJoint("negative or NaN entry".into()));
        }
        let jd = Self { k, m, p };
        for a in 0..k {
            for b in 0..k {
                let s: f64 = jd.block(a, b).data().iter().sum();
                if (s - 1.0).abs() > 1e-6 {
                    return Err(LossError::InvalidJoint(format!("block ({a},{b}) sums to {s}")));
                }
            }
        }
        Ok(jd)
    }

    pub fn segments(&self) -> usize {
        self.k
    }

    pub fn segment_size(&self) -> usize {
        self.m
    }

    pub fn matrix(&self) -> &NumericArray {
        &self.p
    }

    pub fn get(&self, k1: usize, k2: usize, m1: usize, m2: usize) -> f64 {
        self.p.at2(k1 * self.m + m1, k2 * self.m + m2)
    }

    /// Block `(k1, k2)` as an `M x M` array.
    pub fn block(&self, k1: usize, k2: usize) -> NumericArray {
        let m = self.m;
        let data = (0..m)
            .flat_map(|r| (0..m).map(move |c| (r, c)))
            .map(|(r, c)| self.get(k1, k2, r, c))
            .collect();
        NumericArray::from_parts(vec![m, m], data)
    }
}

/// `P(k', k'', m', m'') = (1/N) sum_i q'_i(k', m') q''_i(k'', m'')`.
pub fn joint_distribution(q1: &SegmentScores, q2: &SegmentScores) -> Result<JointDistribution, LossError> {
    q1.check_pair(q2)?;
    let (n, k, m) = (q1.samples(), q1.segments(), q1.segment_size());
    if n == 0 {
        return Err(LossError::EmptyBatch);
    }
    let d = k * m;
    let mut p = vec![0.0; d * d];
    for i in 0..n {
        let a = &q1.q.data()[i * d..(i + 1) * d];
        let b = &q2.q.data()[i * d..(i + 1) * d];
        for (r, &x) in a.iter().enumerate() {
            for (t, &y) in p[r * d..(r + 1) * d].iter_mut().zip(b) {
                *t += x * y;
            }
        }
    }
    let inv = 1.0 / n as f64;
    p.iter_mut().for_each(|v| *v *= inv);
    Ok(JointDistribution {
        k,
        m,
        p: NumericArray::from_parts(vec![d, d], p),
    })
}

/// Diagonal-block, diagonal-entry term; lies in `[-ln M, 0]` for `M >= 3`
/// and in `[-2/e, 0]` for `M = 2`.
pub fn loss_jed(p: &JointDistribution) -> f64 {
    let mut s = 0.0;
    for k in 0..p.k {
        for m in 0..p.m {
            s += xlogx(p.get(k, k, m, m));
        }
    }
    s / p.k as f64
}

/// Off-diagonal-block term over all `M^2` entries; lies in `[-2 ln M, 0]`.
pub fn loss_jeo(p: &JointDistribution) -> Result<f64, LossError> {
    if p.k < 2 {
        return Err(LossError::TooFewSegments(p.k));
    }
    let mut s = 0.0;
    for a in 0..p.k {
        for b in 0..p.k {
            if a == b {
                continue;
            }
            for r in 0..p.m {
                for c in 0..p.m {
                    s += xlogx(p.get(a, b, r, c));
                }
            }
        }
    }
    Ok(s / (p.k * (p.k - 1)) as f64)
}

/// Transformation-invariance term: mean of `-ln <q'_ik, q''_ik>`.
pub fn loss_ti(q1: &SegmentScores, q2: &SegmentScores) -> Result<f64, LossError> {
    q1.check_pair(q2)?;
    let (n, k) = (q1.samples(), q1.segments());
    let mut s = 0.0;
    for i in 0..n {
        for seg in 0..k {
            let dot: f64 = q1.get(i, seg).iter().zip(q2.get(i, seg)).map(|(a, b)| a * b).sum();
            s += (dot + DEFAULT_EPS_LOG).ln();
        }
    }
    Ok(-s / (n * k) as f64)
}

/// Which terms enter the total, and the weight on `l_ti`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ti: f64,
    pub use_jed: bool,
    pub use_jeo: bool,
    pub use_ti: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ti: 1.0,
            use_jed: true,
            use_jeo: true,
            use_ti: true,
        }
    }
}

impl LossWeights {
    pub fn with_lambda(lambda_ti: f64) -> Self {
        Self {
            lambda_ti,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.lambda_ti >= 0.0) || !self.lambda_ti.is_finite() {
            return Err(LossError::InvalidWeights(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda_ti
            )));
        }
        if !(self.use_jed || self.use_jeo || self.use_ti) {
            return Err(LossError::InvalidWeights("no loss term enabled".into()));
        }
        Ok(())
    }

    fn combine(&self, jed: f64, jeo: f64, ti: f64) -> f64 {
        let mut total = 0.0;
        if self.use_jed {
            total += jed;
        }
        if self.use_jeo {
            total += jeo;
        }
        if self.use_ti {
            total += self.lambda_ti * ti;
        }
        total
    }
}

/// The three terms, their weighted total, and the weight used.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_jed: f64,
    pub l_jeo: f64,
    pub l_ti: f64,
    pub total: f64,
    pub lambda: f64,
}

/// Direct evaluation of every term from two branches' scores.
pub fn loss_breakdown(q1: &SegmentScores, q2: &SegmentScores, weights: &LossWeights) -> Result<LossBreakdown, LossError> {
    weights.validate()?;
    let p = joint_distribution(q1, q2)?;
    let (l_jed, l_jeo, l_ti) = (loss_jed(&p), loss_jeo(&p)?, loss_ti(q1, q2)?);
    Ok(LossBreakdown {
        l_jed,
        l_jeo,
        l_ti,
        total: weights.combine(l_jed, l_jeo, l_ti),
        lambda: weights.lambda_ti,
    })
}

/// Tape handles of the loss graph.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub q1: Var,
    pub q2: Var,
    pub l_jed: Var,
    pub l_jeo: Var,
    pub l_ti: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape, lambda: f64) -> LossBreakdown {
        LossBreakdown {
            l_jed: tape.value(self.l_jed).item(),
            l_jeo: tape.value(self.l_jeo).item(),
            l_ti: tape.value(self.l_ti).item(),
            total: tape.value(self.total).item(),
            lambda,
        }
    }
}

fn block_masks(layout: SegmentLayout) -> (NumericArray, NumericArray) {
    let (k, m) = (layout.segments(), layout.segment_size());
    let d = k * m;
    let mut diag = vec![0.0; d * d];
    let mut off = vec![0.0; d * d];
    for r in 0..d {
        for c in 0..d {
            if r / m != c / m {
                off[r * d + c] = 1.0;
            } else if r == c {
                diag[r * d + c] = 1.0;
            }
        }
    }
    (
        NumericArray::from_parts(vec![d, d], diag),
        NumericArray::from_parts(vec![d, d], off),
    )
}

/// Records the full objective on `tape` for raw embeddings `z1`, `z2`
/// (each `[N, K*M]`). Every term is recorded even when excluded from the
/// total.
pub fn build_loss(
    tape: &mut Tape,
    z1: Var,
    z2: Var,
    layout: SegmentLayout,
    weights: &LossWeights,
) -> Result<LossVars, LossError> {
    weights.validate()?;
    let (s1, s2) = (tape.value(z1).shape().to_vec(), tape.value(z2).shape().to_vec());
    if s1 != s2 || s1.len() != 2 || s1[1] != layout.dim() {
        return Err(LossError::Shape(format!(
            "branch embeddings {s1:?} and {s2:?} do not match layout dim {}",
            layout.dim()
        )));
    }
    let n = s1[0];
    let (k, d) = (layout.segments(), layout.dim());

    let q1 = segment_scores_on_tape(tape, z1, layout)?;
    let q2 = segment_scores_on_tape(tape, z2, layout)?;

    let q1_flat = tape.reshape(q1, &[n, d])?;
    let q2_flat = tape.reshape(q2, &[n, d])?;
    let q1_t = tape.transpose(q1_flat)?;
    let counts = tape.matmul(q1_t, q2_flat)?;
    let p = tape.scalar_mul(counts, 1.0 / n as f64)?;
    let log_p = tape.log_eps(p)?;
    let plogp = tape.mul(p, log_p)?;

    let (diag_mask, off_mask) = block_masks(layout);
    let diag_mask = tape.constant(diag_mask);
    let off_mask = tape.constant(off_mask);
    let diag_terms = tape.mul(plogp, diag_mask)?;
    let diag_sum = tape.sum_all(diag_terms)?;
    let l_jed = tape.scalar_mul(diag_sum, 1.0 / k as f64)?;
    let off_terms = tape.mul(plogp, off_mask)?;
    let off_sum = tape.sum_all(off_terms)?;
    let l_jeo = tape.scalar_mul(off_sum, 1.0 / (k * (k - 1)) as f64)?;

    let agree = tape.mul(q1, q2)?;
    let inner = tape.sum_axis(agree, 2)?;
    let log_inner = tape.log_eps(inner)?;
    let ti_sum = tape.sum_all(log_inner)?;
    let l_ti = tape.scalar_mul(ti_sum, -1.0 / (n * k) as f64)?;

    let mut terms = Vec::new();
    if weights.use_jed {
        terms.push(l_jed);
    }
    if weights.use_jeo {
        terms.push(l_jeo);
    }
    if weights.use_ti {
        terms.push(if weights.lambda_ti == 1.0 {
            l_ti
        } else {
            tape.scalar_mul(l_ti, weights.lambda_ti)?
        });
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    if terms.len() == 1 {
        // Keep `total` a distinct node so its value is never aliased.
        total = tape.scalar_mul(total, 1.0)?;
    }
    Ok(LossVars {
        q1,
        q2,
        l_jed,
        l_jeo,
        l_ti,
        total,
    })
}

/// Loss terms and `(dL/dz1, dL/dz2)` for raw embeddings of two views.
pub fn total_loss(
    z1: &NumericArray,
    z2: &NumericArray,
    layout: SegmentLayout,
    weights: &LossWeights,
) -> Result<(LossBreakdown, NumericArray, NumericArray), LossError> {
    let mut tape = Tape::new();
    let v1 = tape.parameter(z1.clone());
    let v2 = tape.parameter(z2.clone());
    let vars = build_loss(&mut tape, v1, v2, layout, weights)?;
    let breakdown = vars.breakdown(&tape, weights.lambda_ti);
    let mut grads = tape.backward(vars.total)?.take_ordered(&[v1, v2]);
    let g2 = grads.pop().unwrap();
    let g1 = grads.pop().unwrap();
    Ok((breakdown, g1, g2))
}
