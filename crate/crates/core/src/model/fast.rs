//! Inference-only forward pass with 32-bit storage.
//!
//! Matrix products run in single precision; softmax and layer-norm sums
//! accumulate in 64 bits. Parameters live on the f32 grid already, so the
//! conversion from a [`Model`] is exact. Training and gradient checks never
//! use this path.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::csidata::{ModelInput, PointCloud};
use crate::error::Result;
use crate::model::params::{AttnIds, FfnIds, Layout, NormIds};
use crate::model::{Model, ModelConfig};

/// Numeric mode for inference.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// The training graph in f64; bit-reproducible reference.
    #[default]
    F64,
    /// f32 storage and matrix products, f64 reductions.
    F32,
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f64" => Ok(Self::F64),
            "f32" => Ok(Self::F32),
            other => Err(format!("unknown precision {other:?} (expected f32 or f64)")),
        }
    }
}

/// `c = alpha * a * b + beta * c` over strided f32 views.
#[allow(clippy::too_many_arguments)]
fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    let last = |rs: usize, cs: usize, r: usize, cc: usize| (r - 1) * rs + (cc - 1) * cs;
    assert!(m > 0 && k > 0 && n > 0);
    assert!(last(rsa, csa, m, k) < a.len());
    assert!(last(rsb, csb, k, n) < b.len());
    assert!(last(rsc, csc, m, n) < c.len());
    // SAFETY: the assertions bound the highest address each view touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// `[rows, inner] x [inner, cols]`, both dense row-major.
fn matmul(x: &[f32], w: &[f32], rows: usize, inner: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; rows * cols];
    sgemm(rows, inner, cols, 1.0, x, (inner, 1), w, (cols, 1), 0.0, &mut out, (cols, 1));
    out
}

fn add_row(x: &mut [f32], bias: &[f32]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v as f64;
    }
    let inv = (1.0 / sum) as f32;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erff(x * std::f32::consts::FRAC_1_SQRT_2))
}

/// A model's weights in f32, ready for repeated inference.
#[derive(Debug, Clone)]
pub struct Model32<'a> {
    config: ModelConfig,
    layout: Layout,
    weights: Vec<Vec<f32>>,
    /// The f64 model, used for the cheap input stages.
    source: &'a Model,
}

impl<'a> Model32<'a> {
    pub fn new(model: &'a Model) -> Self {
        Self {
            config: model.config.clone(),
            layout: model.layout.clone(),
            weights: model
                .params
                .tensors()
                .iter()
                .map(|t| t.data().iter().map(|&v| v as f32).collect())
                .collect(),
            source: model,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn w(&self, id: usize) -> &[f32] {
        &self.weights[id]
    }

    pub fn predict(&self, input: &ModelInput) -> Result<PointCloud> {
        self.source.check_input(input)?;
        let c = &self.config;
        let e = c.embed_dim;
        // Temporal conv and positional embeddings cost little; they run in
        // f64 and are rounded once.
        let h = self.source.temporal_encode(input)?;
        let h = self
            .source
            .add_positional(&h, &input.antenna_index, &input.subcarrier_index)?;
        let tokens = c.pairs();
        let mut x: Vec<f32> = h.data().iter().map(|&v| v as f32).collect();

        for layer in &self.layout.encoder {
            let a = self.attention(&layer.attn, &x, tokens, &x, tokens);
            x = self.residual_norm(&x, &a, &layer.norm1);
            let f = self.ffn(&layer.ffn, &x, tokens);
            x = self.residual_norm(&x, &f, &layer.norm2);
        }
        let memory = x;

        let n = c.n_points;
        let mut q = self.w(self.layout.point_queries).to_vec();
        for layer in &self.layout.decoder {
            let a = self.attention(&layer.self_attn, &q, n, &q, n);
            q = self.residual_norm(&q, &a, &layer.norm1);
            let a = self.attention(&layer.cross_attn, &q, n, &memory, tokens);
            q = self.residual_norm(&q, &a, &layer.norm2);
            let f = self.ffn(&layer.ffn, &q, n);
            q = self.residual_norm(&q, &f, &layer.norm3);
        }
        let g = matmul(&q, self.w(self.layout.feature_transform), n, e, e);
        let mut y = matmul(&g, self.w(self.layout.head_weight), n, e, 3);
        add_row(&mut y, self.w(self.layout.head_bias));
        PointCloud::new(
            y.chunks_exact(3)
                .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
                .collect(),
        )
    }

    pub fn predict_batch(&self, inputs: &[ModelInput]) -> Result<Vec<PointCloud>> {
        for input in inputs {
            self.source.check_input(input)?;
        }
        inputs.par_iter().map(|x| self.predict(x)).collect()
    }

    fn attention(&self, ids: &AttnIds, x: &[f32], rows: usize, kv: &[f32], kv_rows: usize) -> Vec<f32> {
        let e = self.config.embed_dim;
        let dk = self.config.head_dim();
        let q = matmul(x, self.w(ids.w_q), rows, e, e);
        let k = matmul(kv, self.w(ids.w_k), kv_rows, e, e);
        let v = matmul(kv, self.w(ids.w_v), kv_rows, e, e);
        let scale = 1.0 / (dk as f32).sqrt();
        let mut joined = vec![0.0f32; rows * e];
        let mut scores = vec![0.0f32; rows * kv_rows];
        for h in 0..self.config.n_heads {
            let off = h * dk;
            // Head slices are read in place through strides.
            sgemm(
                rows,
                dk,
                kv_rows,
                scale,
                &q[off..],
                (e, 1),
                &k[off..],
                (1, e),
                0.0,
                &mut scores,
                (kv_rows, 1),
            );
            for row in scores.chunks_exact_mut(kv_rows) {
                softmax_in_place(row);
            }
            sgemm(
                rows,
                kv_rows,
                dk,
                1.0,
                &scores,
                (kv_rows, 1),
                &v[off..],
                (e, 1),
                0.0,
                &mut joined[off..],
                (e, 1),
            );
        }
        matmul(&joined, self.w(ids.w_o), rows, e, e)
    }

    fn ffn(&self, ids: &FfnIds, x: &[f32], rows: usize) -> Vec<f32> {
        let (e, hidden) = (self.config.embed_dim, self.config.ffn_dim);
        let mut h = matmul(x, self.w(ids.w1), rows, e, hidden);
        add_row(&mut h, self.w(ids.b1));
        for v in h.iter_mut() {
            *v = gelu(*v);
        }
        let mut y = matmul(&h, self.w(ids.w2), rows, hidden, e);
        add_row(&mut y, self.w(ids.b2));
        y
    }

    fn residual_norm(&self, x: &[f32], y: &[f32], ids: &NormIds) -> Vec<f32> {
        let e = self.config.embed_dim;
        let eps = self.config.layer_norm_eps;
        let (gain, bias) = (self.w(ids.gain), self.w(ids.bias));
        let mut out = vec![0.0f32; x.len()];
        let mut s = vec![0.0f64; e];
        for ((xr, yr), or) in x.chunks_exact(e).zip(y.chunks_exact(e)).zip(out.chunks_exact_mut(e)) {
            for j in 0..e {
                s[j] = xr[j] as f64 + yr[j] as f64;
            }
            let mean = s.iter().sum::<f64>() / e as f64;
            let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / e as f64;
            let is = 1.0 / (var + eps).sqrt();
            for j in 0..e {
                let xh = if is.is_finite() { (s[j] - mean) * is } else { 0.0 };
                or[j] = (xh * gain[j] as f64 + bias[j] as f64) as f32;
            }
        }
        out
    }
}
