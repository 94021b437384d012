//! Procedural shape datasets for desk-scale experiments.
//!
//! Every shape kind owns a fixed block of global part ids so that datasets
//! built from any subset of kinds share one part label space.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cloud::{normalize_unit_sphere, Point, PointCloud};
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};

pub const CYLINDER_HALF_HEIGHT: f64 = 1.0;
const TORUS_MAJOR: f64 = 1.0;
const TORUS_MINOR: f64 = 0.35;
/// Part ids are global across kinds: sphere 0-1, cube 2-4, cylinder 5-6,
/// torus 7-8, plane-cross 9-10.
pub const TOTAL_PARTS: u16 = 11;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Sphere,
    Cube,
    Cylinder,
    Torus,
    PlaneCross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Cylinder,
        ShapeKind::Torus,
        ShapeKind::PlaneCross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Torus => "torus",
            ShapeKind::PlaneCross => "plane-cross",
        }
    }

    fn part_offset(self) -> u16 {
        match self {
            ShapeKind::Sphere => 0,
            ShapeKind::Cube => 2,
            ShapeKind::Cylinder => 5,
            ShapeKind::Torus => 7,
            ShapeKind::PlaneCross => 9,
        }
    }

    /// Global part ids this kind can emit.
    pub fn parts(self) -> Vec<u16> {
        let count = match self {
            ShapeKind::Cube => 3,
            _ => 2,
        };
        (self.part_offset()..self.part_offset() + count).collect()
    }

    /// Raw surface samples in canonical pose, with global part ids.
    ///
    /// * sphere: unit sphere; parts upper (z ≥ 0) / lower
    /// * cube: surface of [-1,1]³; parts by face normal axis x / y / z
    /// * cylinder: radius 1 along z, |z| ≤ 1; parts body / caps
    /// * torus: axis z, radii 1 and 0.35; parts outer / inner half
    /// * plane-cross: squares in y=0 and x=0; one part per plane
    pub fn sample_surface<R: Rng + ?Sized>(self, n: usize, rng: &mut R) -> (Vec<[f64; 3]>, Vec<u16>) {
        let off = self.part_offset();
        let mut pts = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let (p, part) = match self {
                ShapeKind::Sphere => {
                    let v: [f64; 3] = [0; 3].map(|_| StandardNormal.sample(rng));
                    let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
                    let p = v.map(|c| c / r);
                    (p, if p[2] >= 0.0 { 0 } else { 1 })
                }
                ShapeKind::Cube => {
                    let face = rng.random_range(0..6usize);
                    let axis = face / 2;
                    let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                    let mut p = [0.0; 3];
                    for (k, c) in p.iter_mut().enumerate() {
                        *c = if k == axis { sign } else { rng.random_range(-1.0..=1.0) };
                    }
                    (p, axis as u16)
                }
                ShapeKind::Cylinder => {
                    // side area 4π vs caps 2π
                    if rng.random_range(0.0..3.0) < 2.0 {
                        let t = rng.random_range(0.0..2.0 * PI);
                        let z = rng.random_range(-CYLINDER_HALF_HEIGHT..=CYLINDER_HALF_HEIGHT);
                        ([t.cos(), t.sin(), z], 0)
                    } else {
                        let t = rng.random_range(0.0..2.0 * PI);
                        let r = rng.random_range(0.0f64..1.0).sqrt();
                        let z = if rng.random_bool(0.5) {
                            CYLINDER_HALF_HEIGHT
                        } else {
                            -CYLINDER_HALF_HEIGHT
                        };
                        ([r * t.cos(), r * t.sin(), z], 1)
                    }
                }
                ShapeKind::Torus => loop {
                    let u = rng.random_range(0.0..2.0 * PI);
                    let v = rng.random_range(0.0..2.0 * PI);
                    let w = (TORUS_MAJOR + TORUS_MINOR * v.cos()) / (TORUS_MAJOR + TORUS_MINOR);
                    if rng.random_range(0.0..1.0) <= w {
                        let ring = TORUS_MAJOR + TORUS_MINOR * v.cos();
                        let p = [ring * u.cos(), ring * u.sin(), TORUS_MINOR * v.sin()];
                        break (p, if v.cos() >= 0.0 { 0 } else { 1 });
                    }
                },
                ShapeKind::PlaneCross => {
                    let a = rng.random_range(-1.0..=1.0);
                    let z = rng.random_range(-1.0..=1.0);
                    if rng.random_bool(0.5) {
                        ([a, 0.0, z], 0)
                    } else {
                        ([0.0, a, z], 1)
                    }
                }
            };
            pts.push(p);
            labels.push(off + part);
        }
        (pts, labels)
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown shape class {s:?}; expected one of sphere, cube, cylinder, torus, plane-cross"
                ))
            })
    }
}

pub fn parse_classes(list: &str) -> Result<Vec<ShapeKind>> {
    let kinds: Vec<ShapeKind> = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if kinds.is_empty() {
        return Err(Error::config("no shape classes given"));
    }
    Ok(kinds)
}

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub classes: Vec<ShapeKind>,
    pub per_class: usize,
    pub points: usize,
    /// Per-axis stretch factors are drawn from [1 - variation, 1 + variation].
    pub variation: f64,
    /// Random rotation about the z axis per sample.
    pub random_yaw: bool,
    /// Gaussian noise added after normalization.
    pub noise: f64,
    /// Attach per-point part labels.
    pub segmentation: bool,
    /// First sample id.
    pub first_id: u32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: vec![
                ShapeKind::Sphere,
                ShapeKind::Cube,
                ShapeKind::Cylinder,
                ShapeKind::Torus,
            ],
            per_class: 50,
            points: 128,
            variation: 0.3,
            random_yaw: true,
            noise: 0.01,
            segmentation: false,
            first_id: 0,
        }
    }
}

/// Class-balanced dataset; samples are interleaved class by class
/// (0, 1, …, K-1, 0, 1, …).
pub fn generate_synthetic_dataset<R: Rng + ?Sized>(
    spec: &SyntheticSpec,
    split: Split,
    rng: &mut R,
) -> Result<Dataset> {
    if spec.classes.is_empty() {
        return Err(Error::config("no shape classes given"));
    }
    if spec.points == 0 {
        return Err(Error::config("points per cloud must be positive"));
    }
    if !(0.0..1.0).contains(&spec.variation) || spec.noise < 0.0 {
        return Err(Error::config("variation must be in [0, 1) and noise non-negative"));
    }
    let mut samples = Vec::with_capacity(spec.classes.len() * spec.per_class);
    for _ in 0..spec.per_class {
        for (class, &kind) in spec.classes.iter().enumerate() {
            let (raw, labels) = kind.sample_surface(spec.points, rng);
            let stretch: [f64; 3] =
                [0; 3].map(|_| 1.0 + spec.variation * rng.random_range(-1.0..=1.0));
            let yaw = if spec.random_yaw {
                rng.random_range(0.0..2.0 * PI)
            } else {
                0.0
            };
            let (s, c) = yaw.sin_cos();
            let points: Vec<Point> = raw
                .iter()
                .map(|p| {
                    let q = [p[0] * stretch[0], p[1] * stretch[1], p[2] * stretch[2]];
                    [
                        (c * q[0] - s * q[1]) as f32,
                        (s * q[0] + c * q[1]) as f32,
                        q[2] as f32,
                    ]
                })
                .collect();
            let id = spec.first_id + samples.len() as u32;
            let mut cloud = PointCloud::new(id, points)?.with_class(class as u16);
            cloud = normalize_unit_sphere(&cloud);
            if spec.noise > 0.0 {
                for p in &mut cloud.points {
                    for v in p.iter_mut() {
                        let n: f64 = StandardNormal.sample(rng);
                        *v += (n * spec.noise) as f32;
                    }
                }
            }
            if spec.segmentation {
                cloud = cloud.with_point_labels(labels)?;
            }
            samples.push(cloud);
        }
    }
    let num_parts = if spec.segmentation { TOTAL_PARTS } else { 0 };
    Dataset::new(
        format!("synthetic-{}", split_name(split)),
        samples,
        split,
        spec.classes.len() as u16,
        num_parts,
    )
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
    }
}
