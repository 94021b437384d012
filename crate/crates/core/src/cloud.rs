//! Point clouds and per-cloud preprocessing.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};

pub type Point = [f32; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub id: u32,
    pub points: Vec<Point>,
    pub class_label: Option<u16>,
    pub point_labels: Option<Vec<u16>>,
}

impl PointCloud {
    pub fn new(id: u32, points: Vec<Point>) -> Result<Self> {
        let cloud = Self {
            id,
            points,
            class_label: None,
            point_labels: None,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn with_class(mut self, class: u16) -> Self {
        self.class_label = Some(class);
        self
    }

    pub fn with_point_labels(mut self, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != self.points.len() {
            return Err(Error::Validation(format!(
                "cloud {}: {} point labels for {} points",
                self.id,
                labels.len(),
                self.points.len()
            )));
        }
        self.point_labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if self.points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Validation(format!("cloud {}: non-finite coordinate", self.id)));
        }
        if let Some(labels) = &self.point_labels {
            if labels.len() != self.points.len() {
                return Err(Error::Validation(format!(
                    "cloud {}: {} point labels for {} points",
                    self.id,
                    labels.len(),
                    self.points.len()
                )));
            }
        }
        Ok(())
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0f64; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k] as f64;
            }
        }
        let n = self.points.len().max(1) as f64;
        c.map(|v| v / n)
    }

    /// Copy keeping only the points at `indices` (repeats allowed).
    pub fn gather(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            id: self.id,
            points: indices.iter().map(|&i| self.points[i]).collect(),
            class_label: self.class_label,
            point_labels: self
                .point_labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }
}

pub fn norm(p: &Point) -> f64 {
    p.iter().map(|&c| (c as f64) * (c as f64)).sum::<f64>().sqrt()
}

/// Centers the cloud on its centroid and scales the farthest point to unit
/// distance. A cloud with all points coincident collapses to the origin.
pub fn normalize_unit_sphere(p: &PointCloud) -> PointCloud {
    let c = p.centroid();
    let centered: Vec<[f64; 3]> = p
        .points
        .iter()
        .map(|q| [q[0] as f64 - c[0], q[1] as f64 - c[1], q[2] as f64 - c[2]])
        .collect();
    let max = centered
        .iter()
        .map(|q| (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt())
        .fold(0.0f64, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    PointCloud {
        points: centered
            .iter()
            .map(|q| [(q[0] * scale) as f32, (q[1] * scale) as f32, (q[2] * scale) as f32])
            .collect(),
        ..p.clone()
    }
}

/// Draws exactly `n_out` points: without replacement when the cloud is large
/// enough, otherwise with replacement. Point labels follow their points.
pub fn sample_points<R: Rng + ?Sized>(p: &PointCloud, n_out: usize, rng: &mut R) -> PointCloud {
    p.gather(&sample_indices(p.len(), n_out, rng))
}

pub fn sample_indices<R: Rng + ?Sized>(n: usize, n_out: usize, rng: &mut R) -> Vec<usize> {
    if n >= n_out {
        index::sample(rng, n, n_out).into_vec()
    } else {
        (0..n_out).map(|_| rng.random_range(0..n)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(points: Vec<Point>) -> PointCloud {
        PointCloud::new(0, points).unwrap()
    }

    #[test]
    fn normalize_symmetric_pair() {
        let out = normalize_unit_sphere(&cloud(vec![[2.0, 0.0, 0.0], [-2.0, 0.0, 0.0]]));
        assert_eq!(out.points, vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]);
    }

    #[test]
    fn normalize_degenerate_single_point() {
        let out = normalize_unit_sphere(&cloud(vec![[5.0, 5.0, 5.0]]));
        assert_eq!(out.points, vec![[0.0, 0.0, 0.0]]);
    }

    #[test]
    fn empty_and_non_finite_rejected() {
        assert!(matches!(PointCloud::new(1, vec![]), Err(Error::EmptyCloud)));
        assert!(PointCloud::new(1, vec![[f32::NAN, 0.0, 0.0]]).is_err());
        let c = cloud(vec![[0.0; 3]; 3]);
        assert!(c.with_point_labels(vec![0, 1]).is_err());
    }

    #[test]
    fn sample_exact_count_is_permutation() {
        let c = cloud((0..10).map(|i| [i as f32, 0.0, 0.0]).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_points(&c, 10, &mut rng);
        let mut xs: Vec<i32> = s.points.iter().map(|p| p[0] as i32).collect();
        xs.sort();
        assert_eq!(xs, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn sample_upsamples_with_replacement_and_carries_labels() {
        let c = cloud(vec![[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
            .with_point_labels(vec![7, 8])
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = sample_points(&c, 4, &mut rng);
        assert_eq!(s.len(), 4);
        for (p, l) in s.points.iter().zip(s.point_labels.as_ref().unwrap()) {
            assert!((p[0] == 1.0 && *l == 7) || (p[0] == 2.0 && *l == 8));
        }
    }

    #[test]
    fn sample_is_reproducible() {
        let c = cloud((0..50).map(|i| [i as f32, 1.0, 2.0]).collect());
        let a = sample_points(&c, 20, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_points(&c, 20, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn normalize_output_is_unit_and_idempotent(
            pts in prop::collection::vec(prop::array::uniform3(-50.0f32..50.0), 2..64)
        ) {
            let c = cloud(pts);
            let once = normalize_unit_sphere(&c);
            let max = once.points.iter().map(norm).fold(0.0, f64::max);
            if max > 0.0 {
                prop_assert!((max - 1.0).abs() < 1e-6);
            }
            let cen = once.centroid();
            prop_assert!(cen.iter().all(|v| v.abs() < 1e-5));
            let twice = normalize_unit_sphere(&once);
            for (a, b) in once.points.iter().zip(&twice.points) {
                for k in 0..3 {
                    prop_assert!((a[k] - b[k]).abs() <= 1e-6);
                }
            }
        }
    }
}
