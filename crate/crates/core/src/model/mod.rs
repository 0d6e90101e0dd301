//! The CSI-to-point-cloud network.
//!
//! Every stage is written against a [`Graph`], so the same code serves
//! inference (parameters bound as constants) and training (parameters
//! bound as leaves that receive gradients).

mod checkpoint;
mod config;
mod fast;
mod params;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, OptimizerState,
    CHECKPOINT_MAGIC,
};
pub use config::ModelConfig;
pub use fast::{Model32, Precision};
pub use params::ModelParams;

use crate::csidata::{ModelInput, PointCloud};
use crate::diffmath::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use params::{AttnIds, FfnIds, Layout, NormIds};

/// Parameters placed on a graph, in [`ModelParams`] order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    /// Wraps vars created by the caller, e.g. inside a gradient check.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Inverted dropout driven by a caller-owned RNG.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

/// Graph nodes produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardNodes {
    /// `[N, 3]`
    pub points: Var,
    /// The `[E, E]` feature transform, for the regularizer.
    pub t_f: Var,
    /// Softmax weights of every attention head, encoder first.
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ModelParams,
    layout: Layout,
}

impl Model {
    /// Randomly initialized model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (params, layout) = params::init(&config, seed);
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Wraps existing parameters; names and shapes must match `config`.
    pub fn from_params(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let (expected, layout) = params::build(&config, None);
        if expected.names() != params.names() {
            return Err(Error::shape(
                "parameter names do not match the model configuration",
            ));
        }
        for ((name, want), got) in expected.iter().zip(params.tensors()) {
            if want.shape() != got.shape() {
                return Err(Error::shape(format!(
                    "parameter {name}: shape {:?}, expected {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
            if !got.is_finite() {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
        }
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    /// Named access for tests and tooling, e.g. `"head.bias"`.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    /// Places the parameters on `g`; `trainable` decides whether they
    /// receive gradients.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .tensors()
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        BoundParams { vars }
    }

    pub fn check_input(&self, input: &ModelInput) -> Result<()> {
        let c = &self.config;
        let want = [c.pairs(), 2, c.time_slices];
        if input.features.shape() != want {
            return Err(Error::shape(format!(
                "input features {:?}, model expects {:?}",
                input.features.shape(),
                want
            )));
        }
        if input.antenna_index.len() != c.pairs() || input.subcarrier_index.len() != c.pairs() {
            return Err(Error::shape(format!(
                "index lists of length {}/{}, model expects {}",
                input.antenna_index.len(),
                input.subcarrier_index.len(),
                c.pairs()
            )));
        }
        Ok(())
    }

    /// Builds the full forward pass for one sample.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        input: &ModelInput,
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<ForwardNodes> {
        self.check_input(input)?;
        let mut attention = Vec::new();
        let x = g.constant(input.features.clone());
        let h = self.temporal_encode_node(g, p, x)?;
        let h = self.add_positional_node(g, p, h, &input.antenna_index, &input.subcarrier_index)?;
        let m = self.encode_node(g, p, h, &mut dropout, &mut attention)?;
        let gf = self.decode_node(g, p, m, &mut dropout, &mut attention)?;
        let points = self.project_node(g, p, gf)?;
        Ok(ForwardNodes {
            points,
            t_f: p.vars[self.layout.feature_transform],
            attention,
        })
    }

    /// Inference for one sample. Dropout is off.
    pub fn predict(&self, input: &ModelInput) -> Result<PointCloud> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let out = self.forward(&mut g, &p, input, None)?;
        PointCloud::from_tensor(g.value(out.points))
    }

    /// Inference over a batch; all inputs are validated before any compute.
    pub fn predict_batch(&self, inputs: &[ModelInput]) -> Result<Vec<PointCloud>> {
        for input in inputs {
            self.check_input(input)?;
        }
        inputs.par_iter().map(|x| self.predict(x)).collect()
    }

    /// Single-sample inference in the chosen precision. For repeated
    /// f32 inference build a [`Model32`] once instead.
    pub fn predict_with(&self, input: &ModelInput, precision: Precision) -> Result<PointCloud> {
        match precision {
            Precision::F64 => self.predict(input),
            Precision::F32 => Model32::new(self).predict(input),
        }
    }

    /// `[B, A, S, 2, T]` standardized features to `[B, N, 3]` points.
    pub fn forward_tensor(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_tensor_with(x, Precision::F64)
    }

    pub fn forward_tensor_with(&self, x: &Tensor, precision: Precision) -> Result<Tensor> {
        let c = &self.config;
        let &[b, a, s, two, t] = x.shape() else {
            return Err(Error::shape(format!(
                "expected a [B, A, S, 2, T] tensor, got {:?}",
                x.shape()
            )));
        };
        if [a, s, two, t] != [c.antennas, c.subcarriers, 2, c.time_slices] {
            return Err(Error::shape(format!(
                "input {:?} does not match model [B, {}, {}, 2, {}]",
                x.shape(),
                c.antennas,
                c.subcarriers,
                c.time_slices
            )));
        }
        let per = a * s * 2 * t;
        let (ai, si) = ModelInput::pair_indices(a, s);
        let inputs: Vec<ModelInput> = x
            .data()
            .chunks_exact(per)
            .map(|chunk| {
                Ok(ModelInput {
                    features: Tensor::new(&[a * s, 2, t], chunk.to_vec())?,
                    antenna_index: ai.clone(),
                    subcarrier_index: si.clone(),
                })
            })
            .collect::<Result<_>>()?;
        let clouds = match precision {
            Precision::F64 => self.predict_batch(&inputs)?,
            Precision::F32 => Model32::new(self).predict_batch(&inputs)?,
        };
        let mut data = Vec::with_capacity(b * c.n_points * 3);
        for cloud in &clouds {
            data.extend(cloud.points().iter().flatten());
        }
        Tensor::new(&[b, c.n_points, 3], data)
    }

    /// Per-pair temporal features `H`, `[F, E]`.
    pub fn temporal_encode(&self, input: &ModelInput) -> Result<Tensor> {
        let t = self.config.time_slices;
        if input.features.rank() != 3 || input.features.shape()[1..] != [2, t] {
            return Err(Error::shape(format!(
                "features {:?} do not match [F, 2, {t}]",
                input.features.shape()
            )));
        }
        self.eval_stage(|m, g, p| {
            let x = g.constant(input.features.clone());
            m.temporal_encode_node(g, p, x)
        })
    }

    pub fn add_positional(&self, h: &Tensor, antenna_index: &[usize], subcarrier_index: &[usize]) -> Result<Tensor> {
        self.eval_stage(|m, g, p| {
            let h = g.constant(h.clone());
            m.add_positional_node(g, p, h, antenna_index, subcarrier_index)
        })
    }

    pub fn encode(&self, h: &Tensor) -> Result<Tensor> {
        self.eval_stage(|m, g, p| {
            let h = g.constant(h.clone());
            m.encode_node(g, p, h, &mut None, &mut Vec::new())
        })
    }

    /// Encoder output together with each head's attention matrix.
    pub fn encode_with_attention(&self, h: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let h = g.constant(h.clone());
        let mut attn = Vec::new();
        let out = self.encode_node(&mut g, &p, h, &mut None, &mut attn)?;
        let weights = attn.iter().map(|&v| g.value(v).clone()).collect();
        Ok((g.value(out).clone(), weights))
    }

    /// Decoder output after the feature transform, `[N, E]`.
    pub fn decode(&self, memory: &Tensor) -> Result<Tensor> {
        self.eval_stage(|m, g, p| {
            let mem = g.constant(memory.clone());
            m.decode_node(g, p, mem, &mut None, &mut Vec::new())
        })
    }

    pub fn project_points(&self, features: &Tensor) -> Result<PointCloud> {
        let out = self.eval_stage(|m, g, p| {
            let x = g.constant(features.clone());
            m.project_node(g, p, x)
        })?;
        PointCloud::from_tensor(&out)
    }

    fn eval_stage(&self, f: impl FnOnce(&Self, &mut Graph, &BoundParams) -> Result<Var>) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let out = f(self, &mut g, &p)?;
        Ok(g.value(out).clone())
    }

    fn temporal_encode_node(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let features = g.value(x);
        let &[f, two, t] = features.shape() else {
            return Err(Error::shape("features must be [F, 2, T]"));
        };
        if t != self.config.time_slices || two != 2 {
            return Err(Error::shape(format!(
                "features [{f}, {two}, {t}] do not match T = {}",
                self.config.time_slices
            )));
        }
        // [F, 2, T] -> [F, T, 2] so time is the conv axis.
        let src = features.data();
        let mut data = vec![0.0; f * t * 2];
        for i in 0..f {
            for ti in 0..t {
                for ch in 0..2 {
                    data[(i * t + ti) * 2 + ch] = src[(i * 2 + ch) * t + ti];
                }
            }
        }
        let xt = g.constant(Tensor::new(&[f, t, 2], data)?);
        let conv = g.conv1d_valid(
            xt,
            p.vars[self.layout.conv_kernel],
            p.vars[self.layout.conv_bias],
        )?;
        g.mean_axis1(conv)
    }

    fn add_positional_node(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        h: Var,
        antenna_index: &[usize],
        subcarrier_index: &[usize],
    ) -> Result<Var> {
        let rows = g.value(h).dims2()?.0;
        if antenna_index.len() != rows || subcarrier_index.len() != rows {
            return Err(Error::shape(format!(
                "{rows} feature rows but {} antenna / {} subcarrier indices",
                antenna_index.len(),
                subcarrier_index.len()
            )));
        }
        let pa = g.gather_rows(p.vars[self.layout.embed_antenna], antenna_index)?;
        let ps = g.gather_rows(p.vars[self.layout.embed_subcarrier], subcarrier_index)?;
        let h = g.add(h, pa)?;
        g.add(h, ps)
    }

    fn encode_node(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        mut x: Var,
        dropout: &mut Option<Dropout<'_>>,
        attention: &mut Vec<Var>,
    ) -> Result<Var> {
        for layer in &self.layout.encoder {
            let a = self.attention(g, p, &layer.attn, x, x, attention)?;
            let a = apply_dropout(g, a, dropout)?;
            x = self.residual_norm(g, p, x, a, &layer.norm1)?;
            let f = self.ffn(g, p, &layer.ffn, x)?;
            let f = apply_dropout(g, f, dropout)?;
            x = self.residual_norm(g, p, x, f, &layer.norm2)?;
        }
        Ok(x)
    }

    fn decode_node(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        memory: Var,
        dropout: &mut Option<Dropout<'_>>,
        attention: &mut Vec<Var>,
    ) -> Result<Var> {
        let e = self.config.embed_dim;
        let (_, me) = g.value(memory).dims2()?;
        if me != e {
            return Err(Error::shape(format!("memory width {me}, expected {e}")));
        }
        let mut q = p.vars[self.layout.point_queries];
        for layer in &self.layout.decoder {
            let a = self.attention(g, p, &layer.self_attn, q, q, attention)?;
            let a = apply_dropout(g, a, dropout)?;
            q = self.residual_norm(g, p, q, a, &layer.norm1)?;
            let c = self.attention(g, p, &layer.cross_attn, q, memory, attention)?;
            let c = apply_dropout(g, c, dropout)?;
            q = self.residual_norm(g, p, q, c, &layer.norm2)?;
            let f = self.ffn(g, p, &layer.ffn, q)?;
            let f = apply_dropout(g, f, dropout)?;
            q = self.residual_norm(g, p, q, f, &layer.norm3)?;
        }
        g.matmul(q, p.vars[self.layout.feature_transform])
    }

    fn project_node(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.vars[self.layout.head_weight])?;
        g.add_row(y, p.vars[self.layout.head_bias])
    }

    /// Multi-head scaled dot-product attention. Queries come from `x`,
    /// keys and values from `kv`.
    fn attention(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        ids: &AttnIds,
        x: Var,
        kv: Var,
        weights: &mut Vec<Var>,
    ) -> Result<Var> {
        let dk = self.config.head_dim();
        let q = g.matmul(x, p.vars[ids.w_q])?;
        let k = g.matmul(kv, p.vars[ids.w_k])?;
        let v = g.matmul(kv, p.vars[ids.w_v])?;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let qh = g.slice_cols(q, h * dk, dk)?;
            let kh = g.slice_cols(k, h * dk, dk)?;
            let vh = g.slice_cols(v, h * dk, dk)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let w = g.softmax_rows(scores)?;
            weights.push(w);
            heads.push(g.matmul(w, vh)?);
        }
        let joined = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        g.matmul(joined, p.vars[ids.w_o])
    }

    fn ffn(&self, g: &mut Graph, p: &BoundParams, ids: &FfnIds, x: Var) -> Result<Var> {
        let h = g.matmul(x, p.vars[ids.w1])?;
        let h = g.add_row(h, p.vars[ids.b1])?;
        let h = g.gelu(h)?;
        let y = g.matmul(h, p.vars[ids.w2])?;
        g.add_row(y, p.vars[ids.b2])
    }

    fn residual_norm(&self, g: &mut Graph, p: &BoundParams, x: Var, y: Var, ids: &NormIds) -> Result<Var> {
        let s = g.add(x, y)?;
        g.layer_norm(s, p.vars[ids.gain], p.vars[ids.bias], self.config.layer_norm_eps)
    }
}

fn apply_dropout(g: &mut Graph, x: Var, dropout: &mut Option<Dropout<'_>>) -> Result<Var> {
    let Some(d) = dropout else { return Ok(x) };
    if d.rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - d.rate;
    let n = g.value(x).len();
    let mask: Vec<f64> = (0..n)
        .map(|_| if d.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    g.mask(x, Arc::new(mask))
}

/// Fresh dropout RNG for a given training step and sample.
pub fn dropout_rng(seed: u64, step: u64, sample: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ sample);
    rng
}
