//! Two-view pre-training: augmentation, a shared encoder/projector pass,
//! the joint-entropy objective, and Adam with a per-epoch cosine schedule.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::diagnostics::{diagnose, DiagnosticsError, DEFAULT_COLLAPSE_THRESHOLD};
use crate::diffcore::{DiffError, NumericArray, Tape};
use crate::jemloss::{build_loss, LossBreakdown, LossError, LossVars, LossWeights, SegmentScores};
use crate::model::{
    encode_on_tape, init_parameters, project_on_tape, stack_clouds, BoundModel, EncoderConfig, ModelError,
    ParameterStore, SegmentLayout,
};
use crate::pointcloud::{augment_view, AugmentationConfig, PointCloud, PointCloudError};
use crate::seed::{derive_seed, rng_for};

const INIT_STREAM: u64 = 0x494e_4954;
const SHUFFLE_STREAM: u64 = 0x5348_5546;
const VIEW_STREAM: u64 = 0x5649_4557;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("dataset has {size} clouds, fewer than one batch of {batch}")]
    DatasetTooSmall { size: usize, batch: usize },
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("gradient count {found} does not match parameter count {expected}")]
    GradientCount { expected: usize, found: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    PointCloud(#[from] PointCloudError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub layout: SegmentLayout,
    pub encoder: EncoderConfig,
    pub proj_hidden: Vec<usize>,
    pub aug1: AugmentationConfig,
    pub aug2: AugmentationConfig,
    pub collapse_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 100,
            lr0: 1e-3,
            weight_decay: 1e-6,
            weights: LossWeights::default(),
            seed: 0,
            layout: SegmentLayout::default(),
            encoder: EncoderConfig::default(),
            proj_hidden: vec![1024],
            aug1: AugmentationConfig::default(),
            aug2: AugmentationConfig::default(),
            collapse_threshold: DEFAULT_COLLAPSE_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.collapse_threshold > 0.0 && self.collapse_threshold < 1.0) {
            return bad(format!("collapse threshold must lie in (0, 1), got {}", self.collapse_threshold));
        }
        self.weights.validate()?;
        self.encoder.validate()?;
        self.aug1.validate()?;
        self.aug2.validate()?;
        Ok(())
    }

    /// Fresh parameters for this configuration.
    pub fn init_store(&self) -> Result<ParameterStore, TrainError> {
        Ok(init_parameters(
            &self.encoder,
            self.layout,
            &self.proj_hidden,
            derive_seed(self.seed, &[INIT_STREAM]),
        )?)
    }
}

/// `lr0 * (1 + cos(pi * epoch / total)) / 2`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64) -> f64 {
    assert!(total_epochs > 0 && epoch <= total_epochs, "epoch {epoch} outside 0..={total_epochs}");
    lr0 * 0.5 * (1.0 + (PI * epoch as f64 / total_epochs as f64).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<NumericArray>,
    pub v: Vec<NumericArray>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a NumericArray>) -> Self {
        let m: Vec<NumericArray> = shapes.into_iter().map(|a| NumericArray::zeros(a.shape())).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_store(store: &ParameterStore) -> Self {
        Self::new(store.values())
    }
}

/// One bias-corrected Adam update with L2 weight decay folded into the
/// gradient. Nothing is modified if any gradient is non-finite.
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = (&'a str, &'a mut NumericArray)>,
    grads: &[NumericArray],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    let mut params: Vec<(&str, &mut NumericArray)> = params.into_iter().collect();
    if params.len() != grads.len() || state.m.len() != grads.len() {
        return Err(TrainError::GradientCount {
            expected: params.len(),
            found: grads.len(),
        });
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(TrainError::InvalidConfig(format!(
                "gradient for `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(TrainError::NonFiniteGradient(name.to_string()));
        }
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, (_, p)) in params.iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (w, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            let g = g + weight_decay * *w;
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Two augmented views of every cloud in `batch`, keyed by `view_seed`.
pub fn make_views(
    batch: &[PointCloud],
    aug1: &AugmentationConfig,
    aug2: &AugmentationConfig,
    view_seed: u64,
) -> Result<(Vec<PointCloud>, Vec<PointCloud>), TrainError> {
    let mut v1 = Vec::with_capacity(batch.len());
    let mut v2 = Vec::with_capacity(batch.len());
    for (j, cloud) in batch.iter().enumerate() {
        v1.push(augment_view(cloud, aug1, derive_seed(view_seed, &[j as u64, 1]))?);
        v2.push(augment_view(cloud, aug2, derive_seed(view_seed, &[j as u64, 2]))?);
    }
    Ok((v1, v2))
}

/// Records the two-view objective: both views go through one shared
/// encoder/projector pass, then the loss compares the two halves.
pub fn two_view_loss(
    tape: &mut Tape,
    model: &BoundModel,
    views1: &[PointCloud],
    views2: &[PointCloud],
    layout: SegmentLayout,
    weights: &LossWeights,
) -> Result<LossVars, TrainError> {
    let n = views1.len();
    if n != views2.len() {
        return Err(TrainError::InvalidConfig(format!(
            "view batches differ in size: {n} vs {}",
            views2.len()
        )));
    }
    let points = stack_clouds(views1.iter().chain(views2))?;
    let x = tape.constant(points);
    let h = encode_on_tape(tape, model, x)?;
    let z = project_on_tape(tape, model, h)?;
    let z1 = tape.slice(z, 0, 0, n)?;
    let z2 = tape.slice(z, 0, n, n)?;
    Ok(build_loss(tape, z1, z2, layout, weights)?)
}

/// Loss, gradients in store order, and both branches' scores.
pub struct StepOutcome {
    pub loss: LossBreakdown,
    pub grads: Vec<NumericArray>,
    pub q1: SegmentScores,
    pub q2: SegmentScores,
}

/// Forward and backward for one batch without updating anything.
pub fn loss_and_grads(
    store: &ParameterStore,
    views1: &[PointCloud],
    views2: &[PointCloud],
    weights: &LossWeights,
) -> Result<StepOutcome, TrainError> {
    let mut tape = Tape::new();
    let model = store.bind(&mut tape, true);
    let vars = two_view_loss(&mut tape, &model, views1, views2, store.layout(), weights)?;
    let loss = vars.breakdown(&tape, weights.lambda_ti);
    let q1 = SegmentScores::new(tape.value(vars.q1).clone())?;
    let q2 = SegmentScores::new(tape.value(vars.q2).clone())?;
    let grads = tape.backward(vars.total)?.take_ordered(model.vars());
    Ok(StepOutcome { loss, grads, q1, q2 })
}

/// One optimization step on `batch`: fresh views, forward, backward, Adam.
pub fn train_step(
    store: &mut ParameterStore,
    state: &mut AdamState,
    batch: &[PointCloud],
    config: &TrainConfig,
    lr: f64,
    view_seed: u64,
) -> Result<StepOutcome, TrainError> {
    if batch.len() < 2 {
        return Err(TrainError::InvalidConfig(format!("batch of {} clouds; need >= 2", batch.len())));
    }
    let (v1, v2) = make_views(batch, &config.aug1, &config.aug2, view_seed)?;
    let outcome = loss_and_grads(store, &v1, &v2, &config.weights)?;
    adam_step(store.values_mut(), &outcome.grads, state, lr, config.weight_decay)?;
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_jed: f64,
    pub loss_jeo: f64,
    pub loss_ti: f64,
    pub lr: f64,
    pub mean_offdiag_mi: f64,
    pub min_segment_entropy: f64,
    pub collapsed_segments: Vec<usize>,
}

pub const LOG_HEADER: &str = "epoch,loss_total,loss_jed,loss_jeo,loss_ti,lr,mean_offdiag_mi,min_segment_entropy";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn first(&self) -> Option<&LogRow> {
        self.rows.first()
    }

    pub fn last(&self) -> Option<&LogRow> {
        self.rows.last()
    }

    /// CSV text; each `preamble` line is written first as a `# ` comment.
    pub fn to_csv(&self, preamble: &[String]) -> String {
        let mut out = String::new();
        for line in preamble {
            let _ = writeln!(out, "# {line}");
        }
        out.push_str(LOG_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.epoch,
                r.loss_total,
                r.loss_jed,
                r.loss_jeo,
                r.loss_ti,
                r.lr,
                r.mean_offdiag_mi,
                r.min_segment_entropy
            );
        }
        out
    }
}

/// Pre-trains from freshly initialized parameters.
pub fn pretrain(train_set: &[PointCloud], config: &TrainConfig) -> Result<(ParameterStore, TrainLog), TrainError> {
    pretrain_with(train_set, config, |_| {})
}

/// [`pretrain`] with a callback after every epoch.
pub fn pretrain_with(
    train_set: &[PointCloud],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&LogRow),
) -> Result<(ParameterStore, TrainLog), TrainError> {
    config.validate()?;
    if train_set.len() < config.batch_size {
        return Err(TrainError::DatasetTooSmall {
            size: train_set.len(),
            batch: config.batch_size,
        });
    }
    let mut store = config.init_store()?;
    let mut state = AdamState::for_store(&store);
    let mut log = TrainLog::default();
    let batches = train_set.len() / config.batch_size;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..config.epochs {
        let lr = cosine_lr(epoch, config.epochs, config.lr0);
        order.sort_unstable();
        order.shuffle(&mut rng_for(config.seed, &[SHUFFLE_STREAM, epoch as u64]));
        let mut sums = [0.0; 4];
        let mut last = None;
        for b in 0..batches {
            let batch: Vec<PointCloud> = order[b * config.batch_size..(b + 1) * config.batch_size]
                .iter()
                .map(|&i| train_set[i].clone())
                .collect();
            let view_seed = derive_seed(config.seed, &[VIEW_STREAM, epoch as u64, b as u64]);
            let out = train_step(&mut store, &mut state, &batch, config, lr, view_seed)?;
            for (s, v) in sums.iter_mut().zip([out.loss.total, out.loss.l_jed, out.loss.l_jeo, out.loss.l_ti]) {
                *s += v;
            }
            last = Some((out.q1, out.q2));
        }
        let (q1, q2) = last.expect("at least one batch");
        let diag = diagnose(&q1, &q2, config.collapse_threshold)?;
        let mean = sums.map(|s| s / batches as f64);
        let row = LogRow {
            epoch: epoch + 1,
            loss_total: mean[0],
            loss_jed: mean[1],
            loss_jeo: mean[2],
            loss_ti: mean[3],
            lr,
            mean_offdiag_mi: diag.mean_offdiag_mi,
            min_segment_entropy: diag.min_segment_entropy,
            collapsed_segments: diag.collapsed_segments,
        };
        on_epoch(&row);
        log.rows.push(row);
    }
    Ok((store, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::{generate_primitive, ShapeKind};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            epochs: 2,
            layout: SegmentLayout::new(3, 4).unwrap(),
            encoder: EncoderConfig { widths: vec![8, 8] },
            proj_hidden: vec![16],
            seed: 11,
            ..TrainConfig::default()
        }
    }

    fn clouds(n: usize) -> Vec<PointCloud> {
        (0..n)
            .map(|i| generate_primitive(ShapeKind::ALL[i % 8], 16, i as u64).unwrap())
            .collect()
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 10, 0.5), 0.5);
        assert!(cosine_lr(10, 10, 0.5).abs() < 1e-17);
        assert!((cosine_lr(5, 10, 0.5) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn adam_null_update() {
        let mut p = NumericArray::vector(vec![1.0, -2.0]);
        let mut st = AdamState::new([&p]);
        st.m[0] = NumericArray::vector(vec![0.5, 0.5]);
        adam_step([("p", &mut p)], &[NumericArray::zeros(&[2])], &mut st, 0.1, 0.0).unwrap();
        assert_eq!(st.m[0].data(), &[0.45, 0.45]);
        let mut q = NumericArray::vector(vec![1.0, -2.0]);
        let mut st = AdamState::new([&q]);
        adam_step([("q", &mut q)], &[NumericArray::zeros(&[2])], &mut st, 0.1, 0.0).unwrap();
        assert_eq!(q.data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_hand_value() {
        let mut p = NumericArray::vector(vec![3.0]);
        let mut st = AdamState::new([&p]);
        adam_step([("p", &mut p)], &[NumericArray::vector(vec![1.0])], &mut st, 0.1, 0.0).unwrap();
        let expected = 3.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert!((st.m[0].data()[0] / (1.0 - 0.9) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_non_finite_by_name() {
        let mut p = NumericArray::vector(vec![3.0]);
        let mut st = AdamState::new([&p]);
        let err = adam_step([("encoder.0.bias", &mut p)], &[NumericArray::vector(vec![f64::NAN])], &mut st, 0.1, 0.0)
            .unwrap_err();
        assert!(err.to_string().contains("encoder.0.bias"));
        assert_eq!(p.data(), &[3.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.batch_size = 1;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.epochs = 0;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.lr0 = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn too_small_dataset_rejected() {
        let err = pretrain(&clouds(3), &tiny_config()).unwrap_err();
        assert!(matches!(err, TrainError::DatasetTooSmall { size: 3, batch: 4 }));
    }

    #[test]
    fn one_row_per_epoch_and_deterministic() {
        let data = clouds(10);
        let mut cfg = tiny_config();
        cfg.epochs = 1;
        let (s1, log1) = pretrain(&data, &cfg).unwrap();
        assert_eq!(log1.rows.len(), 1);
        let (s2, log2) = pretrain(&data, &cfg).unwrap();
        assert!(s1.bit_eq(&s2));
        assert_eq!(log1.to_csv(&[]), log2.to_csv(&[]));
    }

    #[test]
    fn lambda_zero_reports_ti() {
        let data = clouds(4);
        let mut cfg = tiny_config();
        cfg.weights = LossWeights::with_lambda(0.0);
        let mut store = cfg.init_store().unwrap();
        let mut st = AdamState::for_store(&store);
        let out = train_step(&mut store, &mut st, &data, &cfg, 1e-3, 5).unwrap();
        assert!(out.loss.l_ti > 0.0);
        assert_eq!(out.loss.total, out.loss.l_jed + out.loss.l_jeo);
    }

    #[test]
    fn csv_layout() {
        let log = TrainLog {
            rows: vec![LogRow {
                epoch: 1,
                loss_total: -1.5,
                loss_jed: -1.0,
                loss_jeo: -1.0,
                loss_ti: 0.5,
                lr: 0.001,
                mean_offdiag_mi: 0.25,
                min_segment_entropy: 2.0,
                collapsed_segments: vec![],
            }],
        };
        let csv = log.to_csv(&["seed=3".into()]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "# seed=3");
        assert_eq!(lines[1], LOG_HEADER);
        assert_eq!(lines[2], "1,-1.5,-1,-1,0.5,0.001,0.25,2");
    }
}
