//! Shared point-wise encoder with max pooling, the MLP projector, and the
//! parameter store both are read from.

mod checkpoint;

use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, NumericArray, Tape, Var};
use crate::pointcloud::PointCloud;
use crate::seed::rng_for;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Coordinates per input point.
pub const POINT_DIM: usize = 3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("cloud {index} has {found} points, expected {expected}")]
    MixedPointCounts {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("checkpoint checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Output widths of the shared per-point layers; the last is the
/// representation dimension.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub widths: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            widths: vec![64, 128, 256],
        }
    }
}

impl EncoderConfig {
    pub fn repr_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(ModelError::InvalidConfig(format!(
                "encoder widths must be non-empty and positive, got {:?}",
                self.widths
            )));
        }
        Ok(())
    }
}

/// `K` segments of `M` entries each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentLayout {
    k: usize,
    m: usize,
}

impl SegmentLayout {
    pub fn new(k: usize, m: usize) -> Result<Self, ModelError> {
        if k < 2 || m < 2 {
            return Err(ModelError::InvalidConfig(format!(
                "segment layout needs K >= 2 and M >= 2, got K={k}, M={m}"
            )));
        }
        Ok(Self { k, m })
    }

    pub fn segments(&self) -> usize {
        self.k
    }

    pub fn segment_size(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.k * self.m
    }
}

impl Default for SegmentLayout {
    fn default() -> Self {
        Self { k: 16, m: 32 }
    }
}

/// Named encoder and projector parameters plus the configuration that
/// fixes their shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    encoder: EncoderConfig,
    proj_hidden: Vec<usize>,
    layout: SegmentLayout,
    params: Vec<(String, NumericArray)>,
}

fn layer_shapes(widths: &[usize]) -> impl Iterator<Item = (usize, usize)> + '_ {
    widths.windows(2).map(|w| (w[0], w[1]))
}

/// Glorot-uniform weights, zero biases.
pub fn init_parameters(
    encoder: &EncoderConfig,
    layout: SegmentLayout,
    proj_hidden: &[usize],
    seed: u64,
) -> Result<ParameterStore, ModelError> {
    encoder.validate()?;
    if proj_hidden.contains(&0) {
        return Err(ModelError::InvalidConfig("projector widths must be positive".into()));
    }
    let mut params = Vec::new();
    let mut layer = 0u64;
    let mut add_stack = |prefix: &str, widths: &[usize], params: &mut Vec<(String, NumericArray)>| {
        for (i, (fan_in, fan_out)) in layer_shapes(widths).enumerate() {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut rng = rng_for(seed, &[layer]);
            layer += 1;
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            params.push((
                format!("{prefix}.{i}.weight"),
                NumericArray::from_parts(vec![fan_in, fan_out], w),
            ));
            params.push((format!("{prefix}.{i}.bias"), NumericArray::zeros(&[fan_out])));
        }
    };
    add_stack("encoder", &encoder_chain(encoder), &mut params);
    add_stack(
        "projector",
        &projector_chain(encoder.repr_dim(), proj_hidden, layout),
        &mut params,
    );
    Ok(ParameterStore {
        encoder: encoder.clone(),
        proj_hidden: proj_hidden.to_vec(),
        layout,
        params,
    })
}

fn encoder_chain(encoder: &EncoderConfig) -> Vec<usize> {
    std::iter::once(POINT_DIM).chain(encoder.widths.iter().copied()).collect()
}

fn projector_chain(repr_dim: usize, hidden: &[usize], layout: SegmentLayout) -> Vec<usize> {
    std::iter::once(repr_dim)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(layout.dim()))
        .collect()
}

impl ParameterStore {
    pub fn encoder_config(&self) -> &EncoderConfig {
        &self.encoder
    }

    pub fn layout(&self) -> SegmentLayout {
        self.layout
    }

    pub fn proj_hidden(&self) -> &[usize] {
        &self.proj_hidden
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &NumericArray)> {
        self.params.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn get(&self, name: &str) -> Option<&NumericArray> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn values(&self) -> impl Iterator<Item = &NumericArray> {
        self.params.iter().map(|(_, a)| a)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = (&str, &mut NumericArray)> {
        self.params.iter_mut().map(|(n, a)| (n.as_str(), a))
    }

    /// Bitwise equality of configuration and every parameter.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.encoder == other.encoder
            && self.proj_hidden == other.proj_hidden
            && self.layout == other.layout
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }

    /// Expected (name, shape) list for this configuration.
    fn expected_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (prefix, chain) in [
            ("encoder", encoder_chain(&self.encoder)),
            (
                "projector",
                projector_chain(self.encoder.repr_dim(), &self.proj_hidden, self.layout),
            ),
        ] {
            for (i, (a, b)) in layer_shapes(&chain).enumerate() {
                out.push((format!("{prefix}.{i}.weight"), vec![a, b]));
                out.push((format!("{prefix}.{i}.bias"), vec![b]));
            }
        }
        out
    }

    /// Puts every parameter on `tape`, as parameter leaves when `trainable`
    /// and as constants otherwise.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|(_, a)| {
                if trainable {
                    tape.parameter(a.clone())
                } else {
                    tape.constant(a.clone())
                }
            })
            .collect();
        self.bound_from_vars(vars)
    }

    /// Wraps vars already on a tape, one per parameter in store order.
    pub fn bound_from_vars(&self, vars: Vec<Var>) -> BoundModel {
        assert_eq!(vars.len(), self.params.len(), "one var per parameter");
        let n_enc = self.encoder.widths.len();
        let layers: Vec<(Var, Var)> = vars.chunks(2).map(|c| (c[0], c[1])).collect();
        BoundModel {
            encoder: layers[..n_enc].to_vec(),
            projector: layers[n_enc..].to_vec(),
            vars,
        }
    }
}

/// Tape handles for a [`ParameterStore`], in store order.
#[derive(Clone, Debug)]
pub struct BoundModel {
    encoder: Vec<(Var, Var)>,
    projector: Vec<(Var, Var)>,
    vars: Vec<Var>,
}

impl BoundModel {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Per-cloud representation vectors `h`, one row per cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Representation(NumericArray);

impl Representation {
    pub fn new(h: NumericArray) -> Self {
        Self(h)
    }

    pub fn array(&self) -> &NumericArray {
        &self.0
    }

    pub fn into_array(self) -> NumericArray {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.0.last_dim()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }
}

/// Stacks clouds into an `[N, P, 3]` array; all clouds must share `P`.
pub fn stack_clouds<'a>(clouds: impl IntoIterator<Item = &'a PointCloud>) -> Result<NumericArray, ModelError> {
    let mut data = Vec::new();
    let mut n = 0;
    let mut p = 0;
    for (i, c) in clouds.into_iter().enumerate() {
        if i == 0 {
            p = c.len();
        } else if c.len() != p {
            return Err(ModelError::MixedPointCounts {
                index: i,
                expected: p,
                found: c.len(),
            });
        }
        data.extend(c.flat());
        n += 1;
    }
    if n == 0 {
        return Err(ModelError::EmptyBatch);
    }
    Ok(NumericArray::from_parts(vec![n, p, POINT_DIM], data))
}

fn affine(tape: &mut Tape, x: Var, (w, b): (Var, Var)) -> Result<Var, DiffError> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// `[N, P, 3]` points to `[N, D_h]`: shared affine+relu layers, then a
/// max over the point axis.
pub fn encode_on_tape(tape: &mut Tape, model: &BoundModel, points: Var) -> Result<Var, DiffError> {
    let mut x = points;
    for &layer in &model.encoder {
        let y = affine(tape, x, layer)?;
        x = tape.relu(y)?;
    }
    tape.max_axis(x, 1)
}

/// `[N, D_h]` to raw embeddings `[N, D_z]`; relu between layers only.
pub fn project_on_tape(tape: &mut Tape, model: &BoundModel, h: Var) -> Result<Var, DiffError> {
    let mut x = h;
    let last = model.projector.len() - 1;
    for (i, &layer) in model.projector.iter().enumerate() {
        x = affine(tape, x, layer)?;
        if i < last {
            x = tape.relu(x)?;
        }
    }
    Ok(x)
}

/// Representations of a batch of clouds sharing one point count.
pub fn encode(params: &ParameterStore, clouds: &[PointCloud]) -> Result<Representation, ModelError> {
    let points = stack_clouds(clouds)?;
    let mut tape = Tape::new();
    let model = params.bind(&mut tape, false);
    let x = tape.constant(points);
    let h = encode_on_tape(&mut tape, &model, x)?;
    Ok(Representation(tape.value(h).clone()))
}

/// Raw embeddings `z` for representations `h`.
pub fn project(params: &ParameterStore, h: &Representation, layout: SegmentLayout) -> Result<NumericArray, ModelError> {
    if layout != params.layout {
        return Err(ModelError::LayoutMismatch(format!(
            "store has K={} M={}, requested K={} M={}",
            params.layout.k, params.layout.m, layout.k, layout.m
        )));
    }
    if h.dim() != params.encoder.repr_dim() {
        return Err(ModelError::LayoutMismatch(format!(
            "representation width {} does not match encoder output {}",
            h.dim(),
            params.encoder.repr_dim()
        )));
    }
    let mut tape = Tape::new();
    let model = params.bind(&mut tape, false);
    let x = tape.constant(h.0.clone());
    let z = project_on_tape(&mut tape, &model, x)?;
    Ok(tape.value(z).clone())
}
