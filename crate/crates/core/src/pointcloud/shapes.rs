use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{normalize_unit_sphere, Point, PointCloud, PointCloudError};
use crate::seed::rng_for;

/// The synthetic shape classes, in class-index order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
    Plane,
    Tetrahedron,
    Ellipsoid,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Cylinder,
        ShapeKind::Cone,
        ShapeKind::Torus,
        ShapeKind::Plane,
        ShapeKind::Tetrahedron,
        ShapeKind::Ellipsoid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Cone => "cone",
            ShapeKind::Torus => "torus",
            ShapeKind::Plane => "plane",
            ShapeKind::Tetrahedron => "tetrahedron",
            ShapeKind::Ellipsoid => "ellipsoid",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap()
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = PointCloudError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| PointCloudError::UnknownKind(s.to_string()))
    }
}

pub const MIN_POINTS: usize = 8;

/// Samples `n_points` uniformly over the surface of a `kind` instance and
/// normalizes to the unit sphere.
///
/// Instance proportions (heights, radii, aspect ratios) are drawn from
/// `seed`; the pose is the shape's canonical frame.
pub fn generate_primitive(kind: ShapeKind, n_points: usize, seed: u64) -> Result<PointCloud, PointCloudError> {
    if n_points < MIN_POINTS {
        return Err(PointCloudError::TooFewPoints {
            min: MIN_POINTS,
            got: n_points,
        });
    }
    let mut rng = rng_for(seed, &[kind.index() as u64]);
    let points = match kind {
        ShapeKind::Sphere => sphere(&mut rng, n_points),
        ShapeKind::Cube => {
            let dims = [1.0, rng.random_range(0.8..1.2), rng.random_range(0.8..1.2)];
            cuboid(&mut rng, n_points, dims)
        }
        ShapeKind::Cylinder => {
            let height = rng.random_range(1.2..2.5);
            cylinder(&mut rng, n_points, 1.0, height)
        }
        ShapeKind::Cone => {
            let height = rng.random_range(1.0..2.0);
            cone(&mut rng, n_points, 1.0, height)
        }
        ShapeKind::Torus => {
            let minor = rng.random_range(0.2..0.4);
            torus(&mut rng, n_points, 1.0, minor)
        }
        ShapeKind::Plane => {
            let aspect = rng.random_range(0.4..1.0);
            (0..n_points)
                .map(|_| [rng.random_range(-1.0..1.0), aspect * rng.random_range(-1.0..1.0), 0.0])
                .collect()
        }
        ShapeKind::Tetrahedron => {
            let s = 1.0 / 3f64.sqrt();
            let mut verts = [[s, s, s], [s, -s, -s], [-s, s, -s], [-s, -s, s]];
            for v in verts.iter_mut() {
                for c in v.iter_mut() {
                    *c += rng.random_range(-0.1..0.1);
                }
            }
            let faces = [
                [verts[0], verts[1], verts[2]],
                [verts[0], verts[1], verts[3]],
                [verts[0], verts[2], verts[3]],
                [verts[1], verts[2], verts[3]],
            ];
            triangles(&mut rng, n_points, &faces)
        }
        ShapeKind::Ellipsoid => {
            let axes = [1.0, rng.random_range(0.5..0.75), rng.random_range(0.25..0.5)];
            ellipsoid(&mut rng, n_points, axes)
        }
    };
    Ok(normalize_unit_sphere(&PointCloud::new(points, None)?))
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Point {
    loop {
        let v: Point = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let n = super::norm(&v);
        if n > 1e-9 {
            return v.map(|c| c / n);
        }
    }
}

/// Unit sphere with an exactly zero centroid: antithetic pairs, plus one
/// balanced great-circle triple when `n` is odd.
fn sphere(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    let mut pts = Vec::with_capacity(n);
    if n % 2 == 1 {
        let a = unit_vector(rng);
        let mut b = unit_vector(rng);
        let d = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        b = [b[0] - d * a[0], b[1] - d * a[1], b[2] - d * a[2]];
        let bn = super::norm(&b);
        b = b.map(|c| c / bn);
        for k in 0..3 {
            let t = k as f64 * TAU / 3.0;
            let p = [0, 1, 2].map(|i| t.cos() * a[i] + t.sin() * b[i]);
            let pn = super::norm(&p);
            pts.push(p.map(|c| c / pn));
        }
    }
    while pts.len() < n {
        let v = unit_vector(rng);
        pts.push(v);
        pts.push(v.map(|c| -c));
    }
    pts
}

fn cuboid(rng: &mut ChaCha8Rng, n: usize, dims: [f64; 3]) -> Vec<Point> {
    let half = dims.map(|d| d / 2.0);
    // Face pairs normal to x, y, z weighted by area.
    let areas = [dims[1] * dims[2], dims[0] * dims[2], dims[0] * dims[1]];
    let total: f64 = areas.iter().sum();
    (0..n)
        .map(|_| {
            let mut u = rng.random::<f64>() * total;
            let mut axis = 0;
            while axis < 2 && u >= areas[axis] {
                u -= areas[axis];
                axis += 1;
            }
            let mut p = [0.0; 3];
            for (a, c) in p.iter_mut().enumerate() {
                *c = if a == axis {
                    if rng.random::<bool>() { half[a] } else { -half[a] }
                } else {
                    rng.random_range(-half[a]..half[a])
                };
            }
            p
        })
        .collect()
}

fn disk(rng: &mut ChaCha8Rng, radius: f64) -> (f64, f64) {
    let r = radius * rng.random::<f64>().sqrt();
    let t = rng.random::<f64>() * TAU;
    (r * t.cos(), r * t.sin())
}

fn cylinder(rng: &mut ChaCha8Rng, n: usize, radius: f64, height: f64) -> Vec<Point> {
    let side = TAU * radius * height;
    let cap = PI * radius * radius;
    let total = side + 2.0 * cap;
    (0..n)
        .map(|_| {
            let u = rng.random::<f64>() * total;
            if u < side {
                let t = rng.random::<f64>() * TAU;
                let z = rng.random_range(-height / 2.0..height / 2.0);
                [radius * t.cos(), radius * t.sin(), z]
            } else {
                let (x, y) = disk(rng, radius);
                let z = if u < side + cap { height / 2.0 } else { -height / 2.0 };
                [x, y, z]
            }
        })
        .collect()
}

fn cone(rng: &mut ChaCha8Rng, n: usize, radius: f64, height: f64) -> Vec<Point> {
    let slant = (radius * radius + height * height).sqrt();
    let side = PI * radius * slant;
    let base = PI * radius * radius;
    (0..n)
        .map(|_| {
            if rng.random::<f64>() * (side + base) < side {
                // Area grows linearly with distance from the apex.
                let s = rng.random::<f64>().sqrt();
                let t = rng.random::<f64>() * TAU;
                [s * radius * t.cos(), s * radius * t.sin(), height * (1.0 - s)]
            } else {
                let (x, y) = disk(rng, radius);
                [x, y, 0.0]
            }
        })
        .collect()
}

fn torus(rng: &mut ChaCha8Rng, n: usize, major: f64, minor: f64) -> Vec<Point> {
    let mut pts = Vec::with_capacity(n);
    while pts.len() < n {
        let u = rng.random::<f64>() * TAU;
        let v = rng.random::<f64>() * TAU;
        let w = rng.random::<f64>();
        // Area element is proportional to (major + minor cos v).
        if w <= (major + minor * v.cos()) / (major + minor) {
            let ring = major + minor * v.cos();
            pts.push([ring * u.cos(), ring * u.sin(), minor * v.sin()]);
        }
    }
    pts
}

fn triangle_area(t: &[Point; 3]) -> f64 {
    let e1 = [0, 1, 2].map(|i| t[1][i] - t[0][i]);
    let e2 = [0, 1, 2].map(|i| t[2][i] - t[0][i]);
    let cross = [
        e1[1] * e2[2] - e1[2] * e2[1],
        e1[2] * e2[0] - e1[0] * e2[2],
        e1[0] * e2[1] - e1[1] * e2[0],
    ];
    0.5 * super::norm(&cross)
}

fn triangles(rng: &mut ChaCha8Rng, n: usize, faces: &[[Point; 3]]) -> Vec<Point> {
    let areas: Vec<f64> = faces.iter().map(triangle_area).collect();
    let total: f64 = areas.iter().sum();
    (0..n)
        .map(|_| {
            let mut u = rng.random::<f64>() * total;
            let mut f = 0;
            while f + 1 < faces.len() && u >= areas[f] {
                u -= areas[f];
                f += 1;
            }
            let [a, b, c] = faces[f];
            let r1 = rng.random::<f64>().sqrt();
            let r2 = rng.random::<f64>();
            [0, 1, 2].map(|i| (1.0 - r1) * a[i] + r1 * (1.0 - r2) * b[i] + r1 * r2 * c[i])
        })
        .collect()
}

fn ellipsoid(rng: &mut ChaCha8Rng, n: usize, axes: [f64; 3]) -> Vec<Point> {
    let [a, b, c] = axes;
    let bound = (b * c).max(a * c).max(a * b);
    let mut pts = Vec::with_capacity(n);
    while pts.len() < n {
        let u = unit_vector(rng);
        let density = ((b * c * u[0]).powi(2) + (a * c * u[1]).powi(2) + (a * b * u[2]).powi(2)).sqrt();
        if rng.random::<f64>() * bound <= density {
            pts.push([a * u[0], b * u[1], c * u[2]]);
        }
    }
    pts
}
