//! Frozen-encoder evaluation: embedding extraction, linear and k-NN
//! probes, limited-label subsets and embedding export.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, NumericArray, Tape};
use crate::model::{encode, ModelError, ParameterStore};
use crate::pointcloud::PointCloud;
use crate::seed::rng_for;
use crate::train::{adam_step, AdamState, TrainError};

const SUBSET_STREAM: u64 = 0x5355_4253;
const EXTRACT_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid probe config: {0}")]
    InvalidConfig(String),
    #[error("no labeled training samples for class {0}")]
    MissingClass(usize),
    #[error("cloud {0} has no label")]
    Unlabeled(usize),
    #[error("empty {0} set")]
    Empty(&'static str),
    #[error("feature width mismatch: train {train}, test {test}")]
    WidthMismatch { train: usize, test: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Labeled feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub features: NumericArray,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Embeddings {
    pub fn new(features: NumericArray, labels: Vec<usize>, num_classes: usize) -> Result<Self, EvalError> {
        if features.rank() != 2 || features.shape()[0] != labels.len() {
            return Err(EvalError::InvalidConfig(format!(
                "features {:?} do not match {} labels",
                features.shape(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(EvalError::InvalidConfig(format!("label {l} >= class count {num_classes}")));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.last_dim()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    fn subset(&self, idx: &[usize]) -> Self {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        idx.iter().for_each(|&i| data.extend_from_slice(self.row(i)));
        Self {
            features: NumericArray::new(vec![idx.len(), d], data).expect("subset shape"),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// CSV rows `label,h_0,...`; values carry 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label");
        for j in 0..self.dim() {
            let _ = write!(out, ",h{j}");
        }
        out.push('\n');
        for (i, l) in self.labels.iter().enumerate() {
            let _ = write!(out, "{l}");
            for v in self.row(i) {
                let _ = write!(out, ",{v:.16e}");
            }
            out.push('\n');
        }
        out
    }
}

/// Representations of labeled clouds, no augmentation, in input order.
pub fn extract_embeddings(params: &ParameterStore, clouds: &[PointCloud], num_classes: usize) -> Result<Embeddings, EvalError> {
    if clouds.is_empty() {
        return Err(EvalError::Empty("cloud"));
    }
    let labels = clouds
        .iter()
        .enumerate()
        .map(|(i, c)| c.label().ok_or(EvalError::Unlabeled(i)))
        .collect::<Result<Vec<_>, _>>()?;
    let d = params.encoder_config().repr_dim();
    let mut data = Vec::with_capacity(clouds.len() * d);
    for chunk in clouds.chunks(EXTRACT_CHUNK) {
        data.extend_from_slice(encode(params, chunk)?.array().data());
    }
    Embeddings::new(NumericArray::new(vec![clouds.len(), d], data)?, labels, num_classes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeMode {
    Linear,
    Knn,
}

impl std::str::FromStr for ProbeMode {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(Self::Linear),
            "knn" => Ok(Self::Knn),
            _ => Err(EvalError::InvalidConfig(format!("unknown probe mode `{s}` (linear|knn)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub mode: ProbeMode,
    pub label_fraction: f64,
    pub epochs: usize,
    pub lr: f64,
    pub k: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            mode: ProbeMode::Linear,
            label_fraction: 1.0,
            epochs: 200,
            lr: 1e-2,
            k: 5,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(EvalError::InvalidConfig(format!(
                "label_fraction must lie in (0, 1], got {}",
                self.label_fraction
            )));
        }
        if self.epochs == 0 || !(self.lr > 0.0) || self.k == 0 {
            return Err(EvalError::InvalidConfig("epochs, lr and k must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub mode: ProbeMode,
    pub label_fraction: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub accuracy: f64,
    /// Zero for classes with no test samples.
    pub per_class_accuracy: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl ProbeResult {
    fn from_predictions(mode: ProbeMode, label_fraction: f64, train_samples: usize, truth: &[usize], pred: &[usize], c: usize) -> Self {
        let mut confusion = vec![vec![0; c]; c];
        for (&t, &p) in truth.iter().zip(pred) {
            confusion[t][p] += 1;
        }
        let correct: usize = (0..c).map(|i| confusion[i][i]).sum();
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: usize = row.iter().sum();
                if n == 0 {
                    0.0
                } else {
                    row[i] as f64 / n as f64
                }
            })
            .collect();
        Self {
            mode,
            label_fraction,
            train_samples,
            test_samples: truth.len(),
            accuracy: correct as f64 / truth.len() as f64,
            per_class_accuracy,
            confusion,
        }
    }
}

/// Per class, the first `max(1, round(fraction * n_c))` members of a
/// seeded permutation. Subsets for a shared seed are nested in `fraction`.
pub fn select_labeled(labels: &[usize], num_classes: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let mut chosen = Vec::new();
    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng_for(seed, &[SUBSET_STREAM, class as u64]));
        let take = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len());
        chosen.extend_from_slice(&members[..take]);
    }
    chosen.sort_unstable();
    chosen
}

fn standardizer(x: &Embeddings) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.len() as f64, x.dim());
    let mut mean = vec![0.0; d];
    for i in 0..x.len() {
        mean.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += v / n);
    }
    let mut sd = vec![0.0; d];
    for i in 0..x.len() {
        for ((s, v), m) in sd.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let sd = sd.into_iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    (mean, sd)
}

fn standardize(x: &Embeddings, mean: &[f64], sd: &[f64]) -> NumericArray {
    let data = (0..x.len())
        .flat_map(|i| x.row(i).iter().zip(mean).zip(sd).map(|((v, m), s)| (v - m) / s))
        .collect();
    NumericArray::new(vec![x.len(), x.dim()], data).expect("standardized shape")
}

/// Softmax regression on standardized frozen features, trained full-batch
/// with Adam; evaluated on every test row.
pub fn linear_probe(train: &Embeddings, test: &Embeddings, config: &ProbeConfig) -> Result<ProbeResult, EvalError> {
    config.validate()?;
    check_pair(train, test)?;
    let idx = select_labeled(&train.labels, train.num_classes, config.label_fraction, config.seed);
    let sub = train.subset(&idx);
    let c = train.num_classes;
    if c < 2 {
        return Err(EvalError::InvalidConfig("need at least 2 classes".into()));
    }
    if let Some(missing) = (0..c).find(|k| !sub.labels.contains(k)) {
        return Err(EvalError::MissingClass(missing));
    }
    let (mean, sd) = standardizer(&sub);
    let x = standardize(&sub, &mean, &sd);
    let mut onehot = vec![0.0; sub.len() * c];
    sub.labels.iter().enumerate().for_each(|(i, &l)| onehot[i * c + l] = 1.0);
    let onehot = NumericArray::new(vec![sub.len(), c], onehot)?;

    let mut w = NumericArray::zeros(&[sub.dim(), c]);
    let mut b = NumericArray::zeros(&[c]);
    let mut state = AdamState::new([&w, &b]);
    for _ in 0..config.epochs {
        let mut tape = Tape::new();
        let (xv, yv) = (tape.constant(x.clone()), tape.constant(onehot.clone()));
        let (wv, bv) = (tape.parameter(w.clone()), tape.parameter(b.clone()));
        let logits = tape.matmul(xv, wv)?;
        let logits = tape.add(logits, bv)?;
        let p = tape.row_softmax(logits)?;
        let picked = tape.mul(p, yv)?;
        let p_true = tape.sum_axis(picked, 1)?;
        let logp = tape.log_eps(p_true)?;
        let total = tape.sum_all(logp)?;
        let loss = tape.scalar_mul(total, -1.0 / sub.len() as f64)?;
        let grads = tape.backward(loss)?.take_ordered(&[wv, bv]);
        adam_step([("probe.weight", &mut w), ("probe.bias", &mut b)], &grads, &mut state, config.lr, 0.0)?;
    }

    let xt = standardize(test, &mean, &sd);
    let pred: Vec<usize> = (0..test.len())
        .map(|i| {
            let row = xt.row(i);
            let score = |k: usize| b.data()[k] + row.iter().enumerate().map(|(j, v)| v * w.at2(j, k)).sum::<f64>();
            argmax((0..c).map(score))
        })
        .collect();
    Ok(ProbeResult::from_predictions(ProbeMode::Linear, config.label_fraction, sub.len(), &test.labels, &pred, c))
}

/// First index of the maximum.
fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn check_pair(train: &Embeddings, test: &Embeddings) -> Result<(), EvalError> {
    if train.is_empty() {
        return Err(EvalError::Empty("train"));
    }
    if test.is_empty() {
        return Err(EvalError::Empty("test"));
    }
    if train.dim() != test.dim() {
        return Err(EvalError::WidthMismatch {
            train: train.dim(),
            test: test.dim(),
        });
    }
    Ok(())
}

fn cosine(a: &[f64], b: &[f64], na: f64, nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

fn l2(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Majority vote among the `k` most cosine-similar training rows. Equal
/// similarities rank by training index; tied votes go to the class of the
/// most similar neighbor among the tied classes.
pub fn knn_probe(train: &Embeddings, test: &Embeddings, k: usize) -> Result<ProbeResult, EvalError> {
    check_pair(train, test)?;
    if k == 0 || k > train.len() {
        return Err(EvalError::InvalidConfig(format!("k={k} must lie in 1..={}", train.len())));
    }
    let c = train.num_classes;
    let train_norms: Vec<f64> = (0..train.len()).map(|i| l2(train.row(i))).collect();
    let pred: Vec<usize> = (0..test.len())
        .map(|t| {
            let q = test.row(t);
            let nq = l2(q);
            let mut sims: Vec<(f64, usize)> = (0..train.len())
                .map(|i| (cosine(q, train.row(i), nq, train_norms[i]), i))
                .collect();
            sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut votes = vec![0usize; c];
            for &(_, i) in &sims[..k] {
                votes[train.labels[i]] += 1;
            }
            let top = *votes.iter().max().unwrap();
            sims[..k]
                .iter()
                .map(|&(_, i)| train.labels[i])
                .find(|&l| votes[l] == top)
                .unwrap()
        })
        .collect();
    Ok(ProbeResult::from_predictions(ProbeMode::Knn, 1.0, train.len(), &test.labels, &pred, c))
}

/// Dispatches on `config.mode`; k-NN uses the labeled subset as its
/// reference set.
pub fn run_probe(train: &Embeddings, test: &Embeddings, config: &ProbeConfig) -> Result<ProbeResult, EvalError> {
    config.validate()?;
    match config.mode {
        ProbeMode::Linear => linear_probe(train, test, config),
        ProbeMode::Knn => {
            let idx = select_labeled(&train.labels, train.num_classes, config.label_fraction, config.seed);
            let sub = train.subset(&idx);
            let mut r = knn_probe(&sub, test, config.k.min(sub.len()))?;
            r.label_fraction = config.label_fraction;
            Ok(r)
        }
    }
}
