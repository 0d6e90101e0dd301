//! Point-to-point ICP with closed-form (Kabsch) rigid fits.

use nalgebra::{Matrix3, Vector3};

use crate::csidata::{apply_rigid, PointCloud};
use crate::error::{Error, Result};
use crate::neighbors::{KdTree, Point3};

pub type Rotation = [[f64; 3]; 3];

pub const IDENTITY: Rotation = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    /// Maps source coordinates into the target frame together with
    /// `translation`: `q = R p + t`.
    pub rotation: Rotation,
    pub translation: Point3,
    /// Inlier fraction of the source under the threshold.
    pub fitness: f64,
    pub inlier_rmse: f64,
    pub iterations: usize,
    /// Mean squared inlier distance at each correspondence step.
    pub mse_history: Vec<f64>,
}

impl RegistrationResult {
    fn identity() -> Self {
        Self {
            rotation: IDENTITY,
            translation: [0.0; 3],
            fitness: 0.0,
            inlier_rmse: 0.0,
            iterations: 0,
            mse_history: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpConfig {
    /// Correspondence distance threshold in meters.
    pub threshold: f64,
    pub max_iter: usize,
    /// Stop once the MSE improves by less than this.
    pub tolerance: f64,
    /// Start from the translation that aligns centroids instead of the
    /// identity.
    pub centroid_prealign: bool,
}

impl IcpConfig {
    pub fn new(threshold: f64) -> Self {
        Self {
            threshold,
            max_iter: 50,
            tolerance: 1e-8,
            centroid_prealign: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) || !self.threshold.is_finite() {
            return Err(Error::config(format!(
                "ICP threshold must be > 0, got {}",
                self.threshold
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::config("ICP max_iter must be >= 1"));
        }
        Ok(())
    }
}

struct Matches {
    /// `(source index, target index)`
    pairs: Vec<(usize, usize)>,
    mse: f64,
}

fn inliers(source: &[Point3], r: &Rotation, t: &Point3, tree: &KdTree, thr2: f64) -> Matches {
    let mut pairs = Vec::new();
    let mut sum = 0.0;
    for (i, p) in source.iter().enumerate() {
        let (j, d2) = tree.nearest(&apply_rigid(r, t, p));
        if d2 <= thr2 {
            pairs.push((i, j));
            sum += d2;
        }
    }
    let mse = if pairs.is_empty() { 0.0 } else { sum / pairs.len() as f64 };
    Matches { pairs, mse }
}

/// Least-squares rigid transform taking `src[i]` onto `dst[i]`, with the
/// reflection case corrected so `det R = +1`.
pub fn kabsch(src: &[Point3], dst: &[Point3]) -> (Rotation, Point3) {
    let n = src.len() as f64;
    let mean = |pts: &[Point3]| {
        pts.iter()
            .fold(Vector3::zeros(), |acc, p| acc + Vector3::from(*p))
            / n
    };
    let (cs, cd) = (mean(src), mean(dst));
    let mut h = Matrix3::zeros();
    for (p, q) in src.iter().zip(dst) {
        h += (Vector3::from(*p) - cs) * (Vector3::from(*q) - cd).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, if d < 0.0 { -1.0 } else { 1.0 }));
    let r = v * fix * u.transpose();
    let t = cd - r * cs;
    let mut rot = IDENTITY;
    for (i, row) in rot.iter_mut().enumerate() {
        for (j, x) in row.iter_mut().enumerate() {
            *x = r[(i, j)];
        }
    }
    (rot, [t[0], t[1], t[2]])
}

fn compose(outer: &Rotation, outer_t: &Point3, inner: &Rotation, inner_t: &Point3) -> (Rotation, Point3) {
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = (0..3).map(|k| outer[i][k] * inner[k][j]).sum();
        }
    }
    (r, apply_rigid(outer, outer_t, inner_t))
}

/// Registers `source` onto `target`.
pub fn icp_register(source: &PointCloud, target: &PointCloud, threshold: f64, max_iter: usize) -> Result<RegistrationResult> {
    icp_register_with(
        source,
        target,
        &IcpConfig {
            max_iter,
            ..IcpConfig::new(threshold)
        },
    )
}

pub fn icp_register_with(source: &PointCloud, target: &PointCloud, config: &IcpConfig) -> Result<RegistrationResult> {
    config.validate()?;
    let src = source.points();
    let tree = KdTree::build(target.points());
    let thr2 = config.threshold * config.threshold;

    let mut result = RegistrationResult::identity();
    if config.centroid_prealign {
        let (cs, ct) = (source.centroid(), target.centroid());
        result.translation = [ct[0] - cs[0], ct[1] - cs[1], ct[2] - cs[2]];
    }

    let degenerate = |result: &RegistrationResult, found: usize, iteration: usize| Error::Degenerate {
        reason: format!(
            "{found} inliers within {} m at iteration {iteration}; at least 3 are needed",
            config.threshold
        ),
        partial: Box::new(result.clone()),
    };

    // State before the most recent update, with its own metrics.
    let mut before: Option<RegistrationResult> = None;
    for iteration in 0..=config.max_iter {
        let m = inliers(src, &result.rotation, &result.translation, &tree, thr2);
        let fitness = m.pairs.len() as f64 / src.len() as f64;
        if let Some(prev) = &before {
            // A step that raised the inlier MSE without gaining inliers is
            // rounding noise or overshoot; keep the earlier transform.
            if m.mse > prev.mse_history[prev.mse_history.len() - 1] && fitness <= prev.fitness {
                return Ok(prev.clone());
            }
        }
        result.fitness = fitness;
        result.inlier_rmse = m.mse.sqrt();
        if m.pairs.len() < 3 {
            return Err(degenerate(&result, m.pairs.len(), iteration));
        }
        let previous = result.mse_history.last().copied();
        result.mse_history.push(m.mse);
        // An exact fit cannot improve; fitting again would only add
        // rounding noise.
        if iteration == config.max_iter
            || m.mse == 0.0
            || previous.is_some_and(|prev| prev - m.mse < config.tolerance)
        {
            return Ok(result);
        }
        let moved: Vec<Point3> = m
            .pairs
            .iter()
            .map(|&(i, _)| apply_rigid(&result.rotation, &result.translation, &src[i]))
            .collect();
        let matched: Vec<Point3> = m.pairs.iter().map(|&(_, j)| target.points()[j]).collect();
        let (dr, dt) = kabsch(&moved, &matched);
        let (r, t) = compose(&dr, &dt, &result.rotation, &result.translation);
        before = Some(result.clone());
        result.rotation = r;
        result.translation = t;
        result.iterations = iteration + 1;
    }
    unreachable!("the loop returns at iteration max_iter")
}
