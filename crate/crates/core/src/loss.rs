//! Chamfer distance, the feature-transform orthogonality regularizer and
//! the combined training objective.

use serde::{Deserialize, Serialize};

use crate::csidata::PointCloud;
use crate::diffmath::{CustomOp, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::neighbors::{nearest_all, Point3};

/// Target size at or above which nearest-neighbor search switches from a
/// brute-force scan to a KD-tree.
pub const KD_TREE_THRESHOLD: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the feature-transform regularizer.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 0.001 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Nearest-neighbor assignment in both directions.
struct Matching {
    /// For each predicted point, `(target index, squared distance)`.
    forward: Vec<(usize, f64)>,
    /// For each target point, `(predicted index, squared distance)`.
    backward: Vec<(usize, f64)>,
}

impl Matching {
    fn of(pred: &[Point3], target: &[Point3]) -> Self {
        Self {
            forward: nearest_all(pred, target, KD_TREE_THRESHOLD),
            backward: nearest_all(target, pred, KD_TREE_THRESHOLD),
        }
    }

    fn value(&self) -> f64 {
        let mean = |v: &[(usize, f64)]| v.iter().map(|&(_, d)| d).sum::<f64>() / v.len() as f64;
        mean(&self.forward) + mean(&self.backward)
    }
}

/// Symmetric Chamfer distance with squared Euclidean distances, reduced as
/// the sum of the two per-direction means.
pub fn chamfer(pred: &PointCloud, target: &PointCloud) -> f64 {
    Matching::of(pred.points(), target.points()).value()
}

/// `(1 / K^2) * ||T T^T - I||_F^2`
pub fn feature_transform_reg(t: &Tensor) -> Result<f64> {
    let (k, m) = t.dims2()?;
    if k != m {
        return Err(Error::shape(format!(
            "feature transform must be square, got {:?}",
            t.shape()
        )));
    }
    Ok(ortho_residual(t).0)
}

/// Regularizer value and the residual `T T^T - I`.
fn ortho_residual(t: &Tensor) -> (f64, Vec<f64>) {
    let k = t.shape()[0];
    let mut r = crate::diffmath::matmul_ex(t, false, t, true)
        .expect("square")
        .into_vec();
    for i in 0..k {
        r[i * k + i] -= 1.0;
    }
    let norm2: f64 = r.iter().map(|v| v * v).sum();
    (norm2 / (k * k) as f64, r)
}

pub fn total_loss(pred: &PointCloud, target: &PointCloud, t_f: &Tensor, config: &LossConfig) -> Result<f64> {
    config.validate()?;
    Ok(chamfer(pred, target) + config.lambda * feature_transform_reg(t_f)?)
}

struct ChamferOp {
    matching: Matching,
}

impl CustomOp for ChamferOp {
    fn name(&self) -> &'static str {
        "chamfer"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (p, q) = (inputs[0].data(), inputs[1].data());
        let (np, nq) = (self.matching.forward.len(), self.matching.backward.len());
        let mut gp = vec![0.0; p.len()];
        let mut gq = vec![0.0; q.len()];
        let wf = 2.0 * grad_out[0] / np as f64;
        let wb = 2.0 * grad_out[0] / nq as f64;
        for (i, &(j, _)) in self.matching.forward.iter().enumerate() {
            for a in 0..3 {
                let d = p[3 * i + a] - q[3 * j + a];
                gp[3 * i + a] += wf * d;
                gq[3 * j + a] -= wf * d;
            }
        }
        for (j, &(i, _)) in self.matching.backward.iter().enumerate() {
            for a in 0..3 {
                let d = q[3 * j + a] - p[3 * i + a];
                gq[3 * j + a] += wb * d;
                gp[3 * i + a] -= wb * d;
            }
        }
        vec![Some(gp), Some(gq)]
    }
}

struct OrthoRegOp {
    residual: Vec<f64>,
}

impl CustomOp for OrthoRegOp {
    fn name(&self) -> &'static str {
        "feature_transform_reg"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        // d/dT = (4 / K^2) (T T^T - I) T
        let t = inputs[0];
        let k = t.shape()[0];
        let r = Tensor::new(&[k, k], self.residual.clone()).expect("k x k");
        let rt = crate::diffmath::matmul(&r, t).expect("square");
        let s = 4.0 * grad_out[0] / (k * k) as f64;
        vec![Some(rt.data().iter().map(|v| v * s).collect())]
    }
}

fn points_of(t: &Tensor) -> Result<Vec<Point3>> {
    Ok(PointCloud::from_tensor(t)?.points().to_vec())
}

/// Chamfer distance between two `[N, 3]` nodes.
pub fn chamfer_node(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let p = points_of(g.value(pred))?;
    let q = points_of(g.value(target))?;
    let matching = Matching::of(&p, &q);
    let value = Tensor::scalar(matching.value());
    g.custom(&[pred, target], value, Box::new(ChamferOp { matching }))
}

pub fn feature_transform_reg_node(g: &mut Graph, t: Var) -> Result<Var> {
    let tv = g.value(t);
    let (k, m) = tv.dims2()?;
    if k != m {
        return Err(Error::shape(format!(
            "feature transform must be square, got {:?}",
            tv.shape()
        )));
    }
    let (value, residual) = ortho_residual(tv);
    g.custom(&[t], Tensor::scalar(value), Box::new(OrthoRegOp { residual }))
}

/// Loss terms on a graph; `total` is the node to differentiate.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: Var,
    pub chamfer: Var,
    pub regularizer: Var,
}

pub fn total_loss_node(g: &mut Graph, pred: Var, target: Var, t_f: Var, config: &LossConfig) -> Result<LossNodes> {
    config.validate()?;
    let chamfer = chamfer_node(g, pred, target)?;
    let regularizer = feature_transform_reg_node(g, t_f)?;
    let weighted = g.scale(regularizer, config.lambda)?;
    let total = g.add(chamfer, weighted)?;
    Ok(LossNodes {
        total,
        chamfer,
        regularizer,
    })
}
