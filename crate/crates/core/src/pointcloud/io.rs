use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::held_out;
use super::{normalize_unit_sphere, BenchmarkSpec, Dataset, Point, PointCloud, PointCloudError, Split};
use crate::seed::rng_for;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const RESAMPLE_STREAM: u64 = 0x5253_4d50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    /// Relative to the manifest's directory.
    pub path: String,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub classes: Vec<String>,
    pub items: Vec<ManifestItem>,
    /// Generator parameters, present when the dataset was synthesized.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<BenchmarkSpec>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PointCloudError + '_ {
    move |source| PointCloudError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads one point per line (`x y z`); blank lines and `#` lines are skipped.
pub fn read_points_file(path: &Path) -> Result<Vec<Point>, PointCloudError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| PointCloudError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 values, found {}", fields.len())));
        }
        let mut p = [0.0; 3];
        for (slot, f) in p.iter_mut().zip(&fields) {
            *slot = f
                .parse::<f64>()
                .map_err(|e| parse_err(format!("`{f}`: {e}")))?;
            if !slot.is_finite() {
                return Err(parse_err(format!("non-finite coordinate `{f}`")));
            }
        }
        points.push(p);
    }
    Ok(points)
}

pub fn write_points_file(path: &Path, points: &[Point]) -> Result<(), PointCloudError> {
    let mut out = String::with_capacity(points.len() * 64);
    for p in points {
        out.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    fs::write(path, out).map_err(io_err(path))
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self, PointCloudError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| PointCloudError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        manifest.validate(path)?;
        Ok(manifest)
    }

    fn validate(&self, path: &Path) -> Result<(), PointCloudError> {
        let fail = |message: String| PointCloudError::Manifest {
            path: path.to_path_buf(),
            message,
        };
        if self.version != MANIFEST_VERSION {
            return Err(fail(format!("unsupported version {}", self.version)));
        }
        if self.classes.is_empty() {
            return Err(fail("no classes".into()));
        }
        if let Some(item) = self.items.iter().find(|it| it.label >= self.classes.len()) {
            return Err(fail(format!(
                "item {} has label {} but only {} classes exist",
                item.path,
                item.label,
                self.classes.len()
            )));
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<(), PointCloudError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        let mut f = fs::File::create(path).map_err(io_err(path))?;
        f.write_all(text.as_bytes())
            .and_then(|_| f.write_all(b"\n"))
            .map_err(io_err(path))
    }
}

/// Writes every cloud as a points file under `dir` plus `dir/manifest.json`.
pub fn write_dataset(dir: &Path, dataset: &Dataset, generator: Option<&BenchmarkSpec>) -> Result<PathBuf, PointCloudError> {
    let mut items = Vec::new();
    for (split, clouds) in [(Split::Train, &dataset.train), (Split::Test, &dataset.test)] {
        let tag = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        for (i, cloud) in clouds.iter().enumerate() {
            let label = cloud.label().unwrap_or(0);
            let class_dir = dir.join(&dataset.class_names[label]);
            fs::create_dir_all(&class_dir).map_err(io_err(&class_dir))?;
            let rel = format!("{}/{tag}_{i:05}.pts", dataset.class_names[label]);
            write_points_file(&dir.join(&rel), cloud.points())?;
            items.push(ManifestItem {
                path: rel,
                label,
                split: Some(split),
            });
        }
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        classes: dataset.class_names.clone(),
        items,
        generator: generator.cloned(),
    };
    let path = dir.join(MANIFEST_FILE);
    manifest.write(&path)?;
    Ok(path)
}

/// Brings a raw cloud to exactly `n` points: a seeded subset when larger,
/// all points plus seeded repeats when smaller.
fn resample(points: Vec<Point>, n: usize, seed: u64, index: usize) -> Vec<Point> {
    if points.len() == n {
        return points;
    }
    let mut rng = rng_for(seed, &[RESAMPLE_STREAM, index as u64]);
    if points.len() > n {
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.shuffle(&mut rng);
        order[..n].iter().map(|&i| points[i]).collect()
    } else {
        let mut out = points.clone();
        while out.len() < n {
            out.push(points[rng.random_range(0..points.len())]);
        }
        out
    }
}

/// Loads a dataset from a manifest file or a directory containing
/// `manifest.json`. Every cloud is resampled to `points` and normalized.
///
/// Items without a `split` field are split per class with a 20% held-out
/// draw keyed by `seed`.
pub fn load_dataset(location: &Path, points: usize, seed: u64) -> Result<Dataset, PointCloudError> {
    let manifest_path = if location.is_dir() {
        location.join(MANIFEST_FILE)
    } else {
        location.to_path_buf()
    };
    if !manifest_path.exists() {
        return Err(PointCloudError::Io {
            path: manifest_path,
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "manifest not found"),
        });
    }
    let manifest = Manifest::read(&manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let any_split = manifest.items.iter().any(|it| it.split.is_some());

    let mut derived = vec![None; manifest.items.len()];
    if !any_split {
        for class in 0..manifest.classes.len() {
            let members: Vec<usize> = (0..manifest.items.len())
                .filter(|&i| manifest.items[i].label == class)
                .collect();
            let held = held_out(members.len(), 0.2, seed, class);
            for (&i, &h) in members.iter().zip(&held) {
                derived[i] = Some(if h { Split::Test } else { Split::Train });
            }
        }
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (index, item) in manifest.items.iter().enumerate() {
        let file = base.join(&item.path);
        let raw = read_points_file(&file)?;
        if raw.is_empty() {
            return Err(PointCloudError::Parse {
                path: file,
                line: 0,
                message: "no points".into(),
            });
        }
        let cloud = PointCloud::new(resample(raw, points, seed, index), Some(item.label))?;
        let cloud = normalize_unit_sphere(&cloud);
        match item.split.or(derived[index]).unwrap_or(Split::Train) {
            Split::Train => train.push(cloud),
            Split::Test => test.push(cloud),
        }
    }
    Ok(Dataset {
        class_names: manifest.classes,
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_file_skips_comments_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pts");
        let pts = vec![[0.1, -2.5e-7, 3.0], [1.0 / 3.0, 0.0, -0.0]];
        write_points_file(&path, &pts).unwrap();
        let mut text = fs::read_to_string(&path).unwrap();
        text.insert_str(0, "# header\n\n");
        fs::write(&path, text).unwrap();
        assert_eq!(read_points_file(&path).unwrap(), pts);
    }

    #[test]
    fn malformed_line_reports_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pts");
        fs::write(&path, "1 2 3\n4 five 6\n").unwrap();
        let err = read_points_file(&path).unwrap_err();
        assert!(matches!(err, PointCloudError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn manifest_rejects_out_of_range_label() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        fs::write(
            &path,
            r#"{"version":1,"classes":["a"],"items":[{"path":"x.pts","label":1}]}"#,
        )
        .unwrap();
        assert!(Manifest::read(&path).is_err());
    }

    #[test]
    fn resample_hits_requested_count() {
        let pts: Vec<Point> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
        assert_eq!(resample(pts.clone(), 4, 1, 0).len(), 4);
        let up = resample(pts.clone(), 25, 1, 0);
        assert_eq!(up.len(), 25);
        assert_eq!(&up[..10], &pts[..]);
    }
}
