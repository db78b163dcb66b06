use serde::{Deserialize, Serialize};

use super::augment::{random_rotation, rotate, RotationMode};
use super::{generate_primitive, PointCloud, PointCloudError, ShapeKind};
use crate::seed::{derive_seed, rng_for};

const SPLIT_STREAM: u64 = 0x5350_4c54;
const POSE_STREAM: u64 = 0x504f_5345;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Orientation given to each generated instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseMode {
    Canonical,
    Z,
    Full,
}

/// Labelled clouds with a fixed train/test split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub train: Vec<PointCloud>,
    pub test: Vec<PointCloud>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn train_labels(&self) -> Vec<usize> {
        self.train.iter().map(|c| c.label().unwrap_or(0)).collect()
    }

    pub fn test_labels(&self) -> Vec<usize> {
        self.test.iter().map(|c| c.label().unwrap_or(0)).collect()
    }

    pub fn all(&self) -> impl Iterator<Item = &PointCloud> {
        self.train.iter().chain(&self.test)
    }
}

/// Parameters of the synthetic shape benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub classes: usize,
    pub per_class: usize,
    pub points: usize,
    pub seed: u64,
    pub pose: PoseMode,
    pub test_fraction: f64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            classes: ShapeKind::ALL.len(),
            per_class: 125,
            points: 256,
            seed: 7,
            pose: PoseMode::Full,
            test_fraction: 0.2,
        }
    }
}

/// Indices of `n` items held out for testing, as a per-class seeded draw.
pub(crate) fn held_out(n: usize, fraction: f64, seed: u64, class: usize) -> Vec<bool> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &[SPLIT_STREAM, class as u64]));
    let n_test = ((n as f64) * fraction).round() as usize;
    let mut test = vec![false; n];
    for &i in order.iter().take(n_test.min(n.saturating_sub(1))) {
        test[i] = true;
    }
    test
}

/// Generates `per_class` instances of each of the first `classes` shape
/// kinds and splits each class with the configured held-out fraction.
pub fn generate_benchmark(spec: &BenchmarkSpec) -> Result<Dataset, PointCloudError> {
    if spec.classes == 0 || spec.classes > ShapeKind::ALL.len() {
        return Err(PointCloudError::InvalidConfig(format!(
            "classes must be in 1..={}, got {}",
            ShapeKind::ALL.len(),
            spec.classes
        )));
    }
    if spec.per_class == 0 {
        return Err(PointCloudError::InvalidConfig("per_class must be positive".into()));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, kind) in ShapeKind::ALL.iter().take(spec.classes).enumerate() {
        let is_test = held_out(spec.per_class, spec.test_fraction, spec.seed, class);
        for (i, &held) in is_test.iter().enumerate() {
            let instance_seed = derive_seed(spec.seed, &[class as u64, i as u64]);
            let cloud = generate_primitive(*kind, spec.points, instance_seed)?;
            let mut pts = cloud.points().to_vec();
            let mode = match spec.pose {
                PoseMode::Canonical => RotationMode::None,
                PoseMode::Z => RotationMode::Z,
                PoseMode::Full => RotationMode::Full,
            };
            if let Some(r) = random_rotation(&mut rng_for(instance_seed, &[POSE_STREAM]), mode) {
                rotate(&mut pts, &r);
            }
            let cloud = PointCloud::new(pts, Some(class))?;
            if held {
                test.push(cloud);
            } else {
                train.push(cloud);
            }
        }
    }
    Ok(Dataset {
        class_names: ShapeKind::ALL[..spec.classes].iter().map(|k| k.name().to_string()).collect(),
        train,
        test,
    })
}
