use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::neighbors::Point3;

/// Ordered set of 3-D points in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::shape("point cloud must contain at least one point"));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite(format!("point {i} is {:?}", points[i])));
        }
        Ok(Self { points })
    }

    /// Interprets an `[N, 3]` tensor as a cloud.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (_, c) = t.dims2()?;
        if c != 3 {
            return Err(Error::shape(format!(
                "point tensor must be [N, 3], got {:?}",
                t.shape()
            )));
        }
        Self::new(t.data().chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.points.iter().flat_map(|p| p.iter().copied()).collect();
        Tensor::from_parts(vec![self.points.len(), 3], data)
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn translated(&self, v: Point3) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| [p[0] + v[0], p[1] + v[1], p[2] + v[2]])
                .collect(),
        }
    }

    /// `R p + t` for every point.
    pub fn transformed(&self, rotation: &[[f64; 3]; 3], translation: &Point3) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| apply_rigid(rotation, translation, p))
                .collect(),
        }
    }

    pub fn centroid(&self) -> Point3 {
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        let n = self.points.len() as f64;
        [c[0] / n, c[1] / n, c[2] / n]
    }
}

#[inline]
pub fn apply_rigid(r: &[[f64; 3]; 3], t: &Point3, p: &Point3) -> Point3 {
    let mut out = *t;
    for (i, row) in r.iter().enumerate() {
        out[i] += row[0] * p[0] + row[1] * p[1] + row[2] * p[2];
    }
    out
}

/// Resizes a cloud to exactly `n` points, deterministically per `seed`:
/// uniform subsampling without replacement when the cloud has at least
/// `n` points, sampling with replacement otherwise.
pub fn resample_cloud(cloud: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::config("resample_cloud: n must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src = cloud.points();
    let points = if src.len() >= n {
        index::sample(&mut rng, src.len(), n)
            .into_iter()
            .map(|i| src[i])
            .collect()
    } else {
        (0..n).map(|_| src[rng.gen_range(0..src.len())]).collect()
    };
    PointCloud::new(points)
}
