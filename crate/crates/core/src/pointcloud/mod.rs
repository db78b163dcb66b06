//! Point-cloud data model, synthetic shapes, normalization, augmentation
//! and on-disk ingestion.

mod augment;
mod dataset;
mod io;
mod shapes;

use std::path::PathBuf;

use thiserror::Error;

pub use augment::{augment_view, AugmentationConfig, RotationMode};
pub use dataset::{generate_benchmark, BenchmarkSpec, Dataset, PoseMode, Split};
pub use io::{
    load_dataset, read_points_file, write_dataset, write_points_file, Manifest, ManifestItem,
    MANIFEST_FILE, MANIFEST_VERSION,
};
pub use shapes::{generate_primitive, ShapeKind};

pub type Point = [f64; 3];

#[derive(Debug, Error)]
pub enum PointCloudError {
    #[error("point cloud is empty")]
    Empty,
    #[error("at least {min} points required, got {got}")]
    TooFewPoints { min: usize, got: usize },
    #[error("unknown shape kind `{0}`")]
    UnknownKind(String),
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
}

/// A set of 3-D points with an optional class label.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    label: Option<usize>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>, label: Option<usize>) -> Result<Self, PointCloudError> {
        if points.is_empty() {
            return Err(PointCloudError::Empty);
        }
        Ok(Self { points, label })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }

    pub fn with_label(mut self, label: Option<usize>) -> Self {
        self.label = label;
        self
    }

    pub fn centroid(&self) -> Point {
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        let n = self.points.len() as f64;
        c.map(|v| v / n)
    }

    pub fn max_norm(&self) -> f64 {
        self.points.iter().map(|p| norm(p)).fold(0.0, f64::max)
    }

    /// Points as a flat row-major `[P * 3]` buffer.
    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().flat_map(|p| p.iter().copied())
    }
}

pub(crate) fn norm(p: &Point) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

/// Centers the cloud on its centroid and scales the farthest point to
/// norm 1. A cloud whose points all coincide maps to the origin.
pub fn normalize_unit_sphere(cloud: &PointCloud) -> PointCloud {
    let c = cloud.centroid();
    let extent = cloud
        .points
        .iter()
        .flat_map(|p| p.iter().map(|v| v.abs()))
        .fold(1.0, f64::max);
    let centered: Vec<Point> = cloud
        .points
        .iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    let scale = centered.iter().map(norm).fold(0.0, f64::max);
    let points = if scale <= 1e-12 * extent {
        vec![[0.0; 3]; centered.len()]
    } else {
        centered
            .into_iter()
            .map(|p| p.map(|v| v / scale))
            .collect()
    };
    PointCloud {
        points,
        label: cloud.label,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: Vec<Point>) -> PointCloud {
        PointCloud::new(points, None).unwrap()
    }

    #[test]
    fn empty_cloud_rejected() {
        assert!(matches!(PointCloud::new(vec![], None), Err(PointCloudError::Empty)));
    }

    #[test]
    fn normalized_cloud_is_centered_and_bounded() {
        let c = cloud(vec![[1.0, 2.0, 3.0], [4.0, -1.0, 0.5], [0.0, 0.0, 7.0], [2.0, 2.0, 2.0]]);
        let n = normalize_unit_sphere(&c);
        let cen = n.centroid();
        assert!(cen.iter().all(|v| v.abs() < 1e-9));
        assert!((n.max_norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn normalization_is_idempotent() {
        let c = cloud(vec![[1.0, 2.0, 3.0], [4.0, -1.0, 0.5], [0.0, 0.0, 7.0]]);
        let once = normalize_unit_sphere(&c);
        let twice = normalize_unit_sphere(&once);
        for (a, b) in once.points().iter().zip(twice.points()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn translation_does_not_change_result() {
        let base = vec![[0.3, -0.2, 0.9], [1.0, 0.0, 0.0], [-0.5, 0.5, 0.25]];
        let shifted = base.iter().map(|p| p.map(|v| v + 5.0)).collect();
        let a = normalize_unit_sphere(&cloud(base));
        let b = normalize_unit_sphere(&cloud(shifted));
        for (p, q) in a.points().iter().zip(b.points()) {
            for k in 0..3 {
                assert!((p[k] - q[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn repeated_point_goes_to_origin() {
        let n = normalize_unit_sphere(&cloud(vec![[0.1, 0.2, 0.3]; 7]));
        assert!(n.points().iter().all(|p| *p == [0.0; 3]));
    }
}
