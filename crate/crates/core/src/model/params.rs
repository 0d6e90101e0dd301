use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnIds {
    pub w_q: usize,
    pub w_k: usize,
    pub w_v: usize,
    pub w_o: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NormIds {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FfnIds {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncoderIds {
    pub attn: AttnIds,
    pub norm1: NormIds,
    pub ffn: FfnIds,
    pub norm2: NormIds,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecoderIds {
    pub self_attn: AttnIds,
    pub norm1: NormIds,
    pub cross_attn: AttnIds,
    pub norm2: NormIds,
    pub ffn: FfnIds,
    pub norm3: NormIds,
}

/// Positions of every parameter in [`ModelParams`].
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub conv_kernel: usize,
    pub conv_bias: usize,
    pub embed_antenna: usize,
    pub embed_subcarrier: usize,
    pub encoder: Vec<EncoderIds>,
    pub decoder: Vec<DecoderIds>,
    pub point_queries: usize,
    pub feature_transform: usize,
    pub head_weight: usize,
    pub head_bias: usize,
}

enum Init {
    /// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))
    FanIn(usize),
    /// normal(0, 0.02)
    Embedding,
    Zeros,
    Ones,
    Identity,
}

struct Builder<'a> {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl Builder<'_> {
    fn push(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        let tensor = match (&mut self.rng, init) {
            (_, Init::Zeros) | (None, _) => Tensor::zeros(shape),
            (_, Init::Ones) => Tensor::ones(shape),
            (_, Init::Identity) => Tensor::identity(shape[0]),
            (Some(rng), Init::FanIn(fan_in)) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
            }
            (Some(rng), Init::Embedding) => {
                let normal = Normal::new(0.0, 0.02).expect("valid std");
                Tensor::from_fn(shape, |_| normal.sample(&mut **rng))
            }
        };
        // Parameters live on the f32 grid so checkpoints round-trip exactly.
        let tensor = tensor.map(|v| v as f32 as f64);
        self.names.push(name);
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    fn attn(&mut self, prefix: &str, e: usize) -> AttnIds {
        AttnIds {
            w_q: self.push(format!("{prefix}.w_q"), &[e, e], Init::FanIn(e)),
            w_k: self.push(format!("{prefix}.w_k"), &[e, e], Init::FanIn(e)),
            w_v: self.push(format!("{prefix}.w_v"), &[e, e], Init::FanIn(e)),
            w_o: self.push(format!("{prefix}.w_o"), &[e, e], Init::FanIn(e)),
        }
    }

    fn norm(&mut self, prefix: &str, e: usize) -> NormIds {
        NormIds {
            gain: self.push(format!("{prefix}.gain"), &[e], Init::Ones),
            bias: self.push(format!("{prefix}.bias"), &[e], Init::Zeros),
        }
    }

    fn ffn(&mut self, prefix: &str, e: usize, hidden: usize) -> FfnIds {
        FfnIds {
            w1: self.push(format!("{prefix}.w1"), &[e, hidden], Init::FanIn(e)),
            b1: self.push(format!("{prefix}.b1"), &[hidden], Init::Zeros),
            w2: self.push(format!("{prefix}.w2"), &[hidden, e], Init::FanIn(hidden)),
            b2: self.push(format!("{prefix}.b2"), &[e], Init::Zeros),
        }
    }
}

/// All learnable tensors, in a fixed order with stable names.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Zero-filled tensors with the same shapes.
    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces the tensor values, keeping names. Shapes must match.
    pub fn replace(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::shape(format!(
                "expected {} parameter tensors, got {}",
                self.tensors.len(),
                tensors.len()
            )));
        }
        for ((name, old), new) in self.names.iter().zip(&self.tensors).zip(&tensors) {
            if old.shape() != new.shape() {
                return Err(Error::shape(format!(
                    "parameter {name}: shape {:?} does not match {:?}",
                    new.shape(),
                    old.shape()
                )));
            }
        }
        self.tensors = tensors;
        Ok(())
    }
}

/// Builds the parameter set for `config`. With `rng = None` every tensor
/// that would be random is zero (used to obtain the layout alone).
pub(crate) fn build(config: &ModelConfig, rng: Option<&mut ChaCha8Rng>) -> (ModelParams, Layout) {
    let e = config.embed_dim;
    let mut b = Builder {
        names: Vec::new(),
        tensors: Vec::new(),
        rng,
    };
    let conv_fan_in = config.kernel_size * 2;
    let conv_kernel = b.push("temporal.kernel".into(), &[config.kernel_size, 2, e], Init::FanIn(conv_fan_in));
    let conv_bias = b.push("temporal.bias".into(), &[e], Init::FanIn(conv_fan_in));
    let embed_antenna = b.push("embed.antenna".into(), &[config.antennas, e], Init::Embedding);
    let embed_subcarrier = b.push("embed.subcarrier".into(), &[config.subcarriers, e], Init::Embedding);
    let encoder = (0..config.n_encoder_layers)
        .map(|i| {
            let p = format!("encoder.{i}");
            EncoderIds {
                attn: b.attn(&format!("{p}.attn"), e),
                norm1: b.norm(&format!("{p}.norm1"), e),
                ffn: b.ffn(&format!("{p}.ffn"), e, config.ffn_dim),
                norm2: b.norm(&format!("{p}.norm2"), e),
            }
        })
        .collect();
    let decoder = (0..config.n_decoder_layers)
        .map(|i| {
            let p = format!("decoder.{i}");
            DecoderIds {
                self_attn: b.attn(&format!("{p}.self_attn"), e),
                norm1: b.norm(&format!("{p}.norm1"), e),
                cross_attn: b.attn(&format!("{p}.cross_attn"), e),
                norm2: b.norm(&format!("{p}.norm2"), e),
                ffn: b.ffn(&format!("{p}.ffn"), e, config.ffn_dim),
                norm3: b.norm(&format!("{p}.norm3"), e),
            }
        })
        .collect();
    let point_queries = b.push("point_queries".into(), &[config.n_points, e], Init::Embedding);
    let feature_transform = b.push("feature_transform".into(), &[e, e], Init::Identity);
    let head_weight = b.push("head.weight".into(), &[e, 3], Init::FanIn(e));
    let head_bias = b.push("head.bias".into(), &[3], Init::Zeros);

    let layout = Layout {
        conv_kernel,
        conv_bias,
        embed_antenna,
        embed_subcarrier,
        encoder,
        decoder,
        point_queries,
        feature_transform,
        head_weight,
        head_bias,
    };
    let params = ModelParams {
        names: b.names,
        tensors: b.tensors,
    };
    (params, layout)
}

pub(crate) fn init(config: &ModelConfig, seed: u64) -> (ModelParams, Layout) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build(config, Some(&mut rng))
}
