//! Synthetic shape datasets: uniform surface samples with Gaussian jitter,
//! a random rotation about the vertical (z) axis and centroid normalisation.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::manifest::{DatasetManifest, MANIFEST_NAME};
use super::points::save_points_file;
use crate::error::{ensure_arg, Error, Result};
use crate::geometry::{centroid_normalize, Point, PointCloud};
use crate::training::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shape {
    /// Unit sphere.
    Sphere,
    /// Surface of `[-1, 1]^3`.
    Cube,
    /// Radius 1, height 2, with both caps.
    Cylinder,
    /// Apex at `z = 1`, base of radius 1 at `z = -1`, base disc included.
    Cone,
    /// Major radius 1, minor radius 0.35.
    Torus,
}

impl Shape {
    pub const ALL: [Shape; 5] = [Shape::Sphere, Shape::Cube, Shape::Cylinder, Shape::Cone, Shape::Torus];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Sphere => "sphere",
            Shape::Cube => "cube",
            Shape::Cylinder => "cylinder",
            Shape::Cone => "cone",
            Shape::Torus => "torus",
        }
    }

    /// Point-symmetric shapes are sampled in antipodal pairs so the sample
    /// centroid sits exactly at the shape's center.
    fn symmetric(self) -> bool {
        !matches!(self, Shape::Cone)
    }

    fn sample_one(self, rng: &mut impl Rng) -> Point {
        match self {
            Shape::Sphere => unit_vector(rng),
            Shape::Cube => {
                let face = rng.random_range(0..6);
                let (a, b) = (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
                let s = if face % 2 == 0 { 1.0 } else { -1.0 };
                match face / 2 {
                    0 => [s, a, b],
                    1 => [a, s, b],
                    _ => [a, b, s],
                }
            }
            Shape::Cylinder => {
                // Side area 4 pi, caps 2 pi in total.
                let t = rng.random_range(0.0..2.0 * PI);
                if rng.random_bool(2.0 / 3.0) {
                    [t.cos(), t.sin(), rng.random_range(-1.0..=1.0)]
                } else {
                    let r = rng.random::<f64>().sqrt();
                    let z = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    [r * t.cos(), r * t.sin(), z]
                }
            }
            Shape::Cone => {
                // Lateral area pi * sqrt(5), base pi.
                let lateral = 5f64.sqrt();
                let t = rng.random_range(0.0..2.0 * PI);
                let r = rng.random::<f64>().sqrt();
                if rng.random_bool(lateral / (lateral + 1.0)) {
                    [r * t.cos(), r * t.sin(), 1.0 - 2.0 * r]
                } else {
                    [r * t.cos(), r * t.sin(), -1.0]
                }
            }
            Shape::Torus => {
                let (big, small) = (1.0, 0.35);
                loop {
                    let (u, v) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
                    let w = (big + small * v.cos()) / (big + small);
                    if rng.random::<f64>() <= w {
                        let ring = big + small * v.cos();
                        break [ring * u.cos(), ring * u.sin(), small * v.sin()];
                    }
                }
            }
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Shape::ALL
            .into_iter()
            .find(|sh| sh.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown shape '{s}'")))
    }
}

fn unit_vector(rng: &mut impl Rng) -> Point {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn neg(p: Point) -> Point {
    [-p[0], -p[1], -p[2]]
}

/// Surface samples of `shape`, before jitter and normalisation.
fn surface_points(shape: Shape, n: usize, rng: &mut impl Rng) -> Vec<Point> {
    let mut pts = Vec::with_capacity(n);
    if !shape.symmetric() {
        pts.extend((0..n).map(|_| shape.sample_one(rng)));
        return pts;
    }
    let mut remaining = n;
    if n % 2 == 1 {
        if shape == Shape::Sphere {
            // Three unit vectors 120 degrees apart in a random plane sum to zero.
            let u = unit_vector(rng);
            let mut v = unit_vector(rng);
            let d = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
            v = [v[0] - d * u[0], v[1] - d * u[1], v[2] - d * u[2]];
            let vn = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-300);
            v = [v[0] / vn, v[1] / vn, v[2] / vn];
            for k in 0..3 {
                let a = 2.0 * PI * k as f64 / 3.0;
                pts.push([
                    a.cos() * u[0] + a.sin() * v[0],
                    a.cos() * u[1] + a.sin() * v[1],
                    a.cos() * u[2] + a.sin() * v[2],
                ]);
            }
            remaining -= 3;
        } else {
            pts.push(shape.sample_one(rng));
            remaining -= 1;
        }
    }
    for _ in 0..remaining / 2 {
        let p = shape.sample_one(rng);
        pts.push(p);
        pts.push(neg(p));
    }
    pts
}

/// One normalised cloud of `n` points.
pub fn sample_shape(shape: Shape, n: usize, sigma: f64, rng: &mut impl Rng) -> Result<PointCloud> {
    ensure_arg!(n >= 8, "at least 8 points per cloud are required, got {n}");
    ensure_arg!(
        sigma >= 0.0 && sigma.is_finite(),
        "noise must be a nonnegative number, got {sigma}"
    );
    let mut pts = surface_points(shape, n, rng);
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).expect("valid sigma");
        for p in &mut pts {
            for c in p.iter_mut() {
                *c += noise.sample(rng);
            }
        }
    }
    let angle = rng.random_range(0.0..2.0 * PI);
    let (s, c) = angle.sin_cos();
    for p in &mut pts {
        *p = [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]];
    }
    centroid_normalize(&PointCloud::new(pts)?)
}

/// `per_class` clouds of every shape, class-major, labelled by shape
/// position. Deterministic under `seed`.
pub fn synth_clouds(shapes: &[Shape], per_class: usize, n: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    ensure_arg!(!shapes.is_empty(), "no shapes requested");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clouds = Vec::with_capacity(shapes.len() * per_class);
    for (label, &shape) in shapes.iter().enumerate() {
        for _ in 0..per_class {
            clouds.push(sample_shape(shape, n, sigma, &mut rng)?.with_label(label));
        }
    }
    Dataset::new(clouds, shapes.iter().map(|s| s.name().to_string()).collect())
}

/// Writes the clouds of [`synth_clouds`] as points files under `dir` plus
/// `dir/manifest.txt`, and returns the manifest.
pub fn synth_dataset(
    dir: &Path,
    shapes: &[Shape],
    per_class: usize,
    n: usize,
    sigma: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    let data = synth_clouds(shapes, per_class, n, sigma, seed)?;
    let mut entries = Vec::with_capacity(data.len());
    let mut counters = vec![0usize; shapes.len()];
    for cloud in &data.clouds {
        let label = cloud.label.expect("labelled");
        let name = shapes[label].name();
        let rel = PathBuf::from(name).join(format!("{name}_{:04}.xyz", counters[label]));
        counters[label] += 1;
        save_points_file(&dir.join(&rel), cloud)?;
        entries.push((rel, label));
    }
    let manifest = DatasetManifest {
        class_names: data.class_names,
        entries,
    };
    manifest.save(&dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}
