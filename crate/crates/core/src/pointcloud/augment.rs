use std::f64::consts::TAU;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Point, PointCloud, PointCloudError};
use crate::seed::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RotationMode {
    None,
    /// Uniform angle about the z-axis.
    Z,
    /// Uniform over SO(3).
    Full,
}

/// Parameters of the random view transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub rotation: RotationMode,
    /// Per-axis half-width of the uniform translation.
    pub translate: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
    pub cutout: bool,
    pub cutout_radius: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            rotation: RotationMode::Z,
            translate: 0.2,
            scale_min: 0.8,
            scale_max: 1.25,
            jitter_sigma: 0.01,
            jitter_clip: 0.05,
            cutout: true,
            cutout_radius: 0.3,
        }
    }
}

impl AugmentationConfig {
    /// The transform that leaves every cloud unchanged.
    pub fn identity() -> Self {
        Self {
            rotation: RotationMode::None,
            translate: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            jitter_sigma: 0.0,
            jitter_clip: 0.0,
            cutout: false,
            cutout_radius: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), PointCloudError> {
        let bad = |m: &str| Err(PointCloudError::InvalidConfig(m.to_string()));
        if !(self.translate >= 0.0) {
            return bad("translate must be >= 0");
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return bad("scale range must satisfy 0 < min <= max");
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_clip >= 0.0) {
            return bad("jitter sigma and clip must be >= 0");
        }
        if !(self.cutout_radius >= 0.0) {
            return bad("cutout radius must be >= 0");
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn rotation_matrix(rng: &mut ChaCha8Rng, mode: RotationMode) -> Option<[[f64; 3]; 3]> {
    match mode {
        RotationMode::None => None,
        RotationMode::Z => {
            let t = rng.random::<f64>() * TAU;
            let (s, c) = t.sin_cos();
            Some([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        }
        RotationMode::Full => {
            // Normalized Gaussian quaternion is uniform on SO(3).
            let mut q = [0.0f64; 4];
            loop {
                for v in q.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 1e-9 {
                    q.iter_mut().for_each(|v| *v /= n);
                    break;
                }
            }
            let [w, x, y, z] = q;
            Some([
                [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
                [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
                [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
            ])
        }
    }
}

pub(crate) fn rotate(points: &mut [Point], r: &[[f64; 3]; 3]) {
    for p in points.iter_mut() {
        *p = [0, 1, 2].map(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2]);
    }
}

pub(crate) fn random_rotation(rng: &mut ChaCha8Rng, mode: RotationMode) -> Option<[[f64; 3]; 3]> {
    rotation_matrix(rng, mode)
}

/// One random view of `cloud`: rotation, scale, translation, jitter, then
/// optional cutout. The point count is preserved and the result is not
/// re-normalized.
pub fn augment_view(
    cloud: &PointCloud,
    config: &AugmentationConfig,
    seed: u64,
) -> Result<PointCloud, PointCloudError> {
    config.validate()?;
    let mut rng = rng_for(seed, &[]);
    let mut pts = cloud.points().to_vec();

    if let Some(r) = rotation_matrix(&mut rng, config.rotation) {
        rotate(&mut pts, &r);
    }
    let scale = uniform(&mut rng, config.scale_min, config.scale_max);
    let shift = [0; 3].map(|_| uniform(&mut rng, -config.translate, config.translate));
    for p in pts.iter_mut() {
        for a in 0..3 {
            p[a] = p[a] * scale + shift[a];
        }
    }
    if config.jitter_sigma > 0.0 {
        let normal = Normal::new(0.0, config.jitter_sigma)
            .map_err(|e| PointCloudError::InvalidConfig(e.to_string()))?;
        let clip = config.jitter_clip;
        for p in pts.iter_mut() {
            for c in p.iter_mut() {
                *c += normal.sample(&mut rng).clamp(-clip, clip);
            }
        }
    }
    if config.cutout {
        let center = pts[rng.random_range(0..pts.len())];
        let r2 = config.cutout_radius * config.cutout_radius;
        let survivors: Vec<Point> = pts
            .iter()
            .copied()
            .filter(|p| (0..3).map(|a| (p[a] - center[a]).powi(2)).sum::<f64>() > r2)
            .collect();
        // An empty survivor set skips the cutout for this draw.
        if !survivors.is_empty() && survivors.len() < pts.len() {
            let missing = pts.len() - survivors.len();
            let mut restored = survivors.clone();
            for _ in 0..missing {
                restored.push(survivors[rng.random_range(0..survivors.len())]);
            }
            pts = restored;
        }
    }
    PointCloud::new(pts, cloud.label())
}
