//! Contrastive transformations and augmentation.
//!
//! Every transform keeps the point count, and output position `i` is derived
//! from a known input position. Transforms that drop points (cutout, crop)
//! refill the freed slots with copies of surviving points; the returned
//! source map records where every output point came from.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cloud::{Point, PointCloud};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        }
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            other => Err(Error::config(format!("unknown axis {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TransformSpec {
    Rotate { axis: Axis, degrees: f64 },
    /// Remove a ball of this radius around a random point of the cloud.
    Cutout { radius: f64 },
    /// Keep this fraction of points on one side of a random plane.
    Crop { keep: f64 },
    /// Independent per-axis factors drawn from `[low, high]`.
    Scale { low: f64, high: f64 },
    Jitter { sigma: f64, clip: f64 },
    /// One pass of k-nearest-neighbor Laplacian averaging.
    Smooth { k: usize, lambda: f64 },
    Compose(Vec<TransformSpec>),
}

impl TransformSpec {
    pub fn rotate(axis: Axis, degrees: f64) -> Self {
        TransformSpec::Rotate { axis, degrees }
    }

    pub fn cutout() -> Self {
        TransformSpec::Cutout { radius: 0.2 }
    }

    pub fn crop() -> Self {
        TransformSpec::Crop { keep: 0.7 }
    }

    pub fn scale() -> Self {
        TransformSpec::Scale { low: 0.8, high: 1.25 }
    }

    pub fn jitter() -> Self {
        TransformSpec::Jitter {
            sigma: 0.01,
            clip: 0.05,
        }
    }

    pub fn smooth() -> Self {
        TransformSpec::Smooth { k: 8, lambda: 0.5 }
    }

    pub fn identity() -> Self {
        TransformSpec::Scale { low: 1.0, high: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        match self {
            TransformSpec::Rotate { degrees, .. } => {
                if !(degrees.is_finite() && degrees.abs() < 360.0) {
                    return bad(format!("rotation angle {degrees} outside (-360, 360)"));
                }
            }
            TransformSpec::Cutout { radius } => {
                if !(*radius > 0.0 && *radius <= 1.0) {
                    return bad(format!("cutout radius {radius} outside (0, 1]"));
                }
            }
            TransformSpec::Crop { keep } => {
                if !(*keep > 0.0 && *keep <= 1.0) {
                    return bad(format!("crop keep fraction {keep} outside (0, 1]"));
                }
            }
            TransformSpec::Scale { low, high } => {
                if !(*low > 0.0 && low <= high && high.is_finite()) {
                    return bad(format!("scale range [{low}, {high}] invalid"));
                }
            }
            TransformSpec::Jitter { sigma, clip } => {
                if !(*sigma >= 0.0 && *clip >= 0.0 && sigma.is_finite() && clip.is_finite()) {
                    return bad(format!("jitter sigma {sigma} / clip {clip} invalid"));
                }
            }
            TransformSpec::Smooth { k, lambda } => {
                if *k == 0 || !(0.0..=1.0).contains(lambda) {
                    return bad(format!("smooth k {k} / lambda {lambda} invalid"));
                }
            }
            TransformSpec::Compose(children) => {
                if children.is_empty() {
                    return bad("compose needs at least one transform".into());
                }
                for c in children {
                    c.validate()?;
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for TransformSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransformSpec::Rotate { axis, degrees } => write!(f, "rotate:{}:{}", axis.name(), degrees),
            TransformSpec::Cutout { radius } => write!(f, "cutout:{radius}"),
            TransformSpec::Crop { keep } => write!(f, "crop:{keep}"),
            TransformSpec::Scale { low, high } => write!(f, "scale:{low}:{high}"),
            TransformSpec::Jitter { sigma, clip } => write!(f, "jitter:{sigma}:{clip}"),
            TransformSpec::Smooth { k, lambda } => write!(f, "smooth:{k}:{lambda}"),
            TransformSpec::Compose(children) => {
                write!(f, "compose(")?;
                for (i, c) in children.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{c}")?;
                }
                write!(f, ")")
            }
        }
    }
}

fn split_top_level(s: &str) -> Result<Vec<&str>> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, ch) in s.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => {
                depth -= 1;
                if depth < 0 {
                    return Err(Error::config(format!("unbalanced parentheses in {s:?}")));
                }
            }
            ',' if depth == 0 => {
                parts.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    if depth != 0 {
        return Err(Error::config(format!("unbalanced parentheses in {s:?}")));
    }
    parts.push(&s[start..]);
    Ok(parts)
}

impl FromStr for TransformSpec {
    type Err = Error;

    /// Parses `rotate:y:180`, `cutout[:r]`, `crop[:keep]`, `scale[:lo:hi]`,
    /// `jitter[:sigma:clip]`, `smooth[:k:lambda]` and `compose(a,b,...)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().trim_matches('"');
        if let Some(inner) = s.strip_prefix("compose(").and_then(|r| r.strip_suffix(')')) {
            let children = split_top_level(inner)?
                .into_iter()
                .filter(|c| !c.trim().is_empty())
                .map(str::parse)
                .collect::<Result<Vec<_>>>()?;
            let spec = TransformSpec::Compose(children);
            spec.validate()?;
            return Ok(spec);
        }
        let fields: Vec<&str> = s.split(':').map(str::trim).collect();
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|_| Error::config(format!("bad number {:?} in transform {s:?}", fields[i])))
        };
        let arity = |allowed: &[usize]| -> Result<()> {
            if allowed.contains(&(fields.len() - 1)) {
                Ok(())
            } else {
                Err(Error::config(format!("wrong number of parameters in transform {s:?}")))
            }
        };
        let spec = match fields[0].to_ascii_lowercase().as_str() {
            "rotate" => {
                arity(&[2])?;
                TransformSpec::Rotate {
                    axis: fields[1].parse()?,
                    degrees: num(2)?,
                }
            }
            "cutout" => {
                arity(&[0, 1])?;
                if fields.len() == 2 {
                    TransformSpec::Cutout { radius: num(1)? }
                } else {
                    TransformSpec::cutout()
                }
            }
            "crop" => {
                arity(&[0, 1])?;
                if fields.len() == 2 {
                    TransformSpec::Crop { keep: num(1)? }
                } else {
                    TransformSpec::crop()
                }
            }
            "scale" => {
                arity(&[0, 2])?;
                if fields.len() == 3 {
                    TransformSpec::Scale {
                        low: num(1)?,
                        high: num(2)?,
                    }
                } else {
                    TransformSpec::scale()
                }
            }
            "jitter" => {
                arity(&[0, 2])?;
                if fields.len() == 3 {
                    TransformSpec::Jitter {
                        sigma: num(1)?,
                        clip: num(2)?,
                    }
                } else {
                    TransformSpec::jitter()
                }
            }
            "smooth" => {
                arity(&[0, 2])?;
                if fields.len() == 3 {
                    let k = fields[1]
                        .parse()
                        .map_err(|_| Error::config(format!("bad neighbor count in {s:?}")))?;
                    TransformSpec::Smooth { k, lambda: num(2)? }
                } else {
                    TransformSpec::smooth()
                }
            }
            "identity" => {
                arity(&[0])?;
                TransformSpec::identity()
            }
            other => return Err(Error::config(format!("unknown transform {other:?}"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Sine and cosine with exact values at multiples of 90 degrees.
fn exact_sin_cos(degrees: f64) -> (f64, f64) {
    let quarter = degrees / 90.0;
    if quarter == quarter.round() {
        match (quarter as i64).rem_euclid(4) {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        degrees.to_radians().sin_cos()
    }
}

pub fn rotation_matrix(axis: Axis, degrees: f64) -> [[f64; 3]; 3] {
    let (s, c) = exact_sin_cos(degrees);
    match axis {
        Axis::X => [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]],
        Axis::Y => [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
        Axis::Z => [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
    }
}

fn apply_matrix(p: &Point, m: &[[f64; 3]; 3]) -> Point {
    let v = p.map(|c| c as f64);
    let mut out = [0f32; 3];
    for (r, o) in m.iter().zip(out.iter_mut()) {
        // zero entries are skipped so that exact quarter turns stay exact
        let mut acc = 0.0;
        for k in 0..3 {
            if r[k] != 0.0 {
                acc += r[k] * v[k];
            }
        }
        *o = acc as f32;
    }
    out
}

fn dist2(a: &Point, b: &Point) -> f64 {
    (0..3).map(|k| (a[k] as f64 - b[k] as f64).powi(2)).sum()
}

/// Source map that keeps surviving indices in place and fills the rest with
/// survivors drawn with replacement.
fn refill<R: Rng + ?Sized>(keep: &[bool], rng: &mut R) -> Vec<usize> {
    let survivors: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
    (0..keep.len())
        .map(|i| {
            if keep[i] {
                i
            } else {
                survivors[rng.random_range(0..survivors.len())]
            }
        })
        .collect()
}

/// Applies `spec`, returning the new cloud and, for every output position,
/// the input position it was derived from.
pub fn apply_transform_indexed<R: Rng + ?Sized>(
    p: &PointCloud,
    spec: &TransformSpec,
    rng: &mut R,
) -> Result<(PointCloud, Vec<usize>)> {
    spec.validate()?;
    p.validate()?;
    let n = p.len();
    let identity: Vec<usize> = (0..n).collect();
    let out = match spec {
        TransformSpec::Rotate { axis, degrees } => {
            let m = rotation_matrix(*axis, *degrees);
            let mut q = p.clone();
            q.points = p.points.iter().map(|pt| apply_matrix(pt, &m)).collect();
            (q, identity)
        }
        TransformSpec::Cutout { radius } => {
            let center = p.points[rng.random_range(0..n)];
            let r2 = radius * radius;
            let mut keep: Vec<bool> = p.points.iter().map(|q| dist2(q, &center) > r2).collect();
            if !keep.iter().any(|&k| k) {
                // whole cloud inside the ball: keep the farthest point
                let far = (0..n)
                    .max_by(|&a, &b| {
                        dist2(&p.points[a], &center).total_cmp(&dist2(&p.points[b], &center))
                    })
                    .unwrap();
                keep[far] = true;
            }
            let src = refill(&keep, rng);
            (p.gather(&src), src)
        }
        TransformSpec::Crop { keep } => {
            let u: [f64; 3] = loop {
                let v: [f64; 3] = [0; 3].map(|_| StandardNormal.sample(rng));
                let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if len > 1e-9 {
                    break v.map(|c| c / len);
                }
            };
            let proj: Vec<f64> = p
                .points
                .iter()
                .map(|q| (0..3).map(|k| q[k] as f64 * u[k]).sum())
                .collect();
            let mut sorted = proj.clone();
            sorted.sort_by(f64::total_cmp);
            let drop = ((1.0 - keep) * n as f64).floor() as usize;
            let threshold = sorted[drop.min(n - 1)];
            let mask: Vec<bool> = proj.iter().map(|&d| d >= threshold).collect();
            let src = refill(&mask, rng);
            (p.gather(&src), src)
        }
        TransformSpec::Scale { low, high } => {
            let f: [f64; 3] = [0; 3].map(|_| {
                if low == high {
                    *low
                } else {
                    rng.random_range(*low..=*high)
                }
            });
            let mut q = p.clone();
            for pt in &mut q.points {
                for k in 0..3 {
                    pt[k] = (pt[k] as f64 * f[k]) as f32;
                }
            }
            (q, identity)
        }
        TransformSpec::Jitter { sigma, clip } => {
            let mut q = p.clone();
            for pt in &mut q.points {
                for c in pt.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *c += (z * sigma).clamp(-clip, *clip) as f32;
                }
            }
            (q, identity)
        }
        TransformSpec::Smooth { k, lambda } => {
            let k = (*k).min(n.saturating_sub(1));
            let mut q = p.clone();
            if k > 0 {
                for i in 0..n {
                    let mut order: Vec<(f64, usize)> = (0..n)
                        .filter(|&j| j != i)
                        .map(|j| (dist2(&p.points[i], &p.points[j]), j))
                        .collect();
                    order.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                    let mut mean = [0f64; 3];
                    for &(_, j) in &order[..k] {
                        for (m, &x) in mean.iter_mut().zip(&p.points[j]) {
                            *m += x as f64 / k as f64;
                        }
                    }
                    for (out, (&x, m)) in q.points[i].iter_mut().zip(p.points[i].iter().zip(mean)) {
                        let v = x as f64;
                        *out = (v + lambda * (m - v)) as f32;
                    }
                }
            }
            (q, identity)
        }
        TransformSpec::Compose(children) => {
            let mut cur = p.clone();
            let mut src = identity;
            for child in children {
                let (next, step) = apply_transform_indexed(&cur, child, rng)?;
                src = step.iter().map(|&i| src[i]).collect();
                cur = next;
            }
            (cur, src)
        }
    };
    Ok(out)
}

pub fn apply_transform<R: Rng + ?Sized>(
    p: &PointCloud,
    spec: &TransformSpec,
    rng: &mut R,
) -> Result<PointCloud> {
    apply_transform_indexed(p, spec, rng).map(|(q, _)| q)
}

/// `(p, T(p))` with the original untouched.
pub fn make_pair<R: Rng + ?Sized>(
    p: &PointCloud,
    spec: &TransformSpec,
    rng: &mut R,
) -> Result<(PointCloud, PointCloud)> {
    Ok((p.clone(), apply_transform(p, spec, rng)?))
}

/// The eleven single transformations swept in the transform ablation.
pub fn single_transform_suite() -> Vec<TransformSpec> {
    vec![
        TransformSpec::rotate(Axis::Y, 180.0),
        TransformSpec::rotate(Axis::Y, 90.0),
        TransformSpec::rotate(Axis::Y, 45.0),
        TransformSpec::rotate(Axis::X, 180.0),
        TransformSpec::rotate(Axis::X, 90.0),
        TransformSpec::rotate(Axis::X, 45.0),
        TransformSpec::cutout(),
        TransformSpec::crop(),
        TransformSpec::scale(),
        TransformSpec::jitter(),
        TransformSpec::smooth(),
    ]
}

/// The default rotation followed by each non-rotation transform.
pub fn composed_transform_suite() -> Vec<TransformSpec> {
    [
        TransformSpec::cutout(),
        TransformSpec::crop(),
        TransformSpec::scale(),
        TransformSpec::jitter(),
        TransformSpec::smooth(),
    ]
    .into_iter()
    .map(|second| TransformSpec::Compose(vec![TransformSpec::rotate(Axis::Y, 180.0), second]))
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one(p: Point) -> PointCloud {
        PointCloud::new(0, vec![p]).unwrap()
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        let pts = (0..n)
            .map(|_| [0; 3].map(|_| rng.random_range(-1.0f32..1.0)))
            .collect();
        crate::cloud::normalize_unit_sphere(&PointCloud::new(0, pts).unwrap())
    }

    #[test]
    fn rotate_y_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r180 = apply_transform(&one([1.0, 2.0, 3.0]), &"rotate:y:180".parse().unwrap(), &mut rng).unwrap();
        assert_eq!(r180.points[0], [-1.0, 2.0, -3.0]);
        let r90 = apply_transform(&one([1.0, 2.0, 3.0]), &"rotate:y:90".parse().unwrap(), &mut rng).unwrap();
        assert_eq!(r90.points[0], [3.0, 2.0, -1.0]);
    }

    #[test]
    fn collapsed_scale_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_cloud(&mut rng, 32);
        let (a, b) = make_pair(&c, &"scale:1:1".parse().unwrap(), &mut rng).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn jitter_displacement_is_clipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = random_cloud(&mut rng, 500);
        let spec = TransformSpec::Jitter { sigma: 0.01, clip: 0.05 };
        let j = apply_transform(&c, &spec, &mut rng).unwrap();
        for (a, b) in c.points.iter().zip(&j.points) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= 0.05 + 1e-6);
            }
        }
        // heavy sigma actually hits the clip
        let wide = TransformSpec::Jitter { sigma: 1.0, clip: 0.05 };
        let j = apply_transform(&c, &wide, &mut rng).unwrap();
        let max = c
            .points
            .iter()
            .zip(&j.points)
            .flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).abs()))
            .fold(0.0f32, f32::max);
        assert!(max <= 0.05 + 1e-6 && max > 0.04);
    }

    #[test]
    fn cutout_keeps_count_and_correspondence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = random_cloud(&mut rng, 128);
        let (q, src) = apply_transform_indexed(&c, &TransformSpec::cutout(), &mut rng).unwrap();
        assert_eq!(q.len(), 128);
        for (t, &s) in src.iter().enumerate() {
            assert_eq!(q.points[t], c.points[s]);
        }
        let (_, second) = make_pair(&c, &TransformSpec::cutout(), &mut rng).unwrap();
        assert_eq!(second.len(), c.len());
    }

    #[test]
    fn crop_keeps_at_least_fraction_in_place() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = random_cloud(&mut rng, 100);
        let (q, src) = apply_transform_indexed(&c, &TransformSpec::crop(), &mut rng).unwrap();
        assert_eq!(q.len(), 100);
        let in_place = src.iter().enumerate().filter(|(t, &s)| *t == s).count();
        assert!(in_place >= 70, "kept {in_place}");
    }

    #[test]
    fn smooth_moves_towards_neighbors() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let c = PointCloud::new(0, pts).unwrap();
        let spec = TransformSpec::Smooth { k: 2, lambda: 0.5 };
        let s = apply_transform(&c, &spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.points[0], [0.25, 0.25, 0.0]);
    }

    #[test]
    fn compose_single_equals_child_and_order_matters() {
        let mut base = ChaCha8Rng::seed_from_u64(5);
        let c = random_cloud(&mut base, 64);
        let rot = TransformSpec::rotate(Axis::Z, 30.0);
        let a = apply_transform(&c, &TransformSpec::Compose(vec![rot.clone()]), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = apply_transform(&c, &rot, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);

        let aniso = TransformSpec::Scale { low: 0.5, high: 2.0 };
        let rs = TransformSpec::Compose(vec![rot.clone(), aniso.clone()]);
        let sr = TransformSpec::Compose(vec![aniso, rot]);
        let x = apply_transform(&c, &rs, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let y = apply_transform(&c, &sr, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_ne!(x, y);
        assert!(x.validate().is_ok() && y.validate().is_ok());
    }

    #[test]
    fn spec_parsing_and_validation() {
        let s: TransformSpec = "compose(rotate:y:180,jitter)".parse().unwrap();
        assert_eq!(
            s,
            TransformSpec::Compose(vec![TransformSpec::rotate(Axis::Y, 180.0), TransformSpec::jitter()])
        );
        assert_eq!(s.to_string().parse::<TransformSpec>().unwrap(), s);
        for bad in ["rotate:y:360", "rotate:w:10", "crop:1.5", "cutout:0", "compose()", "spin", "scale:2:1"] {
            assert!(matches!(bad.parse::<TransformSpec>(), Err(Error::Config(_))), "{bad}");
        }
        assert!(TransformSpec::Compose(vec![]).validate().is_err());
    }

    #[test]
    fn suites_have_expected_sizes() {
        assert_eq!(single_transform_suite().len(), 11);
        assert_eq!(composed_transform_suite().len(), 5);
    }

    #[test]
    fn all_transforms_preserve_count_and_are_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = random_cloud(&mut rng, 40)
            .with_point_labels((0..40).map(|i| (i % 3) as u16).collect())
            .unwrap();
        for spec in single_transform_suite().into_iter().chain(composed_transform_suite()) {
            let a = apply_transform(&c, &spec, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
            let b = apply_transform(&c, &spec, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
            assert_eq!(a.len(), 40, "{spec}");
            assert_eq!(a.point_labels.as_ref().unwrap().len(), 40);
            assert_eq!(a, b, "{spec}");
        }
    }

    proptest! {
        #[test]
        fn rotations_are_rigid(
            seed in any::<u64>(),
            axis in prop_oneof![Just(Axis::X), Just(Axis::Y), Just(Axis::Z)],
            deg in prop_oneof![Just(45.0), Just(90.0), Just(180.0), -359.0f64..359.0],
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random_cloud(&mut rng, 24);
            let (a, b) = make_pair(&c, &TransformSpec::rotate(axis, deg), &mut rng).unwrap();
            for i in 0..24 {
                for j in 0..24 {
                    let d0 = dist2(&a.points[i], &a.points[j]).sqrt();
                    let d1 = dist2(&b.points[i], &b.points[j]).sqrt();
                    prop_assert!((d0 - d1).abs() <= 1e-6);
                }
            }
            let n0 = c.centroid().iter().map(|v| v * v).sum::<f64>().sqrt();
            let n1 = b.centroid().iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n0 - n1).abs() <= 1e-6);
        }

        #[test]
        fn spec_display_round_trips(
            k in 1usize..16,
            lambda in 0.0f64..1.0,
            keep in 0.01f64..1.0,
        ) {
            let spec = TransformSpec::Compose(vec![
                TransformSpec::Smooth { k, lambda },
                TransformSpec::Crop { keep },
            ]);
            prop_assert_eq!(spec.to_string().parse::<TransformSpec>().unwrap(), spec);
        }
    }
}
