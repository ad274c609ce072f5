use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ArchMode, DecoderAttention, ModelConfig};
use crate::error::Result;
use crate::numerics::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Clone, Copy, Debug)]
pub struct AttnIds {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Clone, Debug)]
pub struct BlockIds {
    /// Condition → `[shift, scale]` per normalization site.
    pub ada_w: usize,
    pub ada_b: usize,
    pub attn: AttnIds,
    /// Separate cross-attention for stacked decoder blocks.
    pub cross: Option<AttnIds>,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

impl BlockIds {
    pub fn norm_sites(&self) -> usize {
        if self.cross.is_some() {
            3
        } else {
            2
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ReuseIds {
    pub norm_g: usize,
    pub norm_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Index of every parameter in the flat store.
#[derive(Clone, Debug)]
pub struct ParamIds {
    pub token_embedding: usize,
    pub mask_embedding: usize,
    pub pos_embedding: usize,
    pub class_embedding: usize,
    pub start_token: Option<usize>,
    pub encoder: Vec<BlockIds>,
    pub decoder: Vec<BlockIds>,
    pub enc_norm: Option<(usize, usize)>,
    pub reuse: Option<ReuseIds>,
    pub final_norm: (usize, usize),
    pub head_w: usize,
    pub head_b: usize,
}

struct Layout {
    specs: Vec<ParamSpec>,
}

impl Layout {
    fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> usize {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        });
        self.specs.len() - 1
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIds {
        AttnIds {
            wq: self.add(format!("{prefix}.wq"), &[d, d], Init::Normal),
            bq: self.add(format!("{prefix}.bq"), &[1, d], Init::Zeros),
            wk: self.add(format!("{prefix}.wk"), &[d, d], Init::Normal),
            bk: self.add(format!("{prefix}.bk"), &[1, d], Init::Zeros),
            wv: self.add(format!("{prefix}.wv"), &[d, d], Init::Normal),
            bv: self.add(format!("{prefix}.bv"), &[1, d], Init::Zeros),
            wo: self.add(format!("{prefix}.wo"), &[d, d], Init::Normal),
            bo: self.add(format!("{prefix}.bo"), &[1, d], Init::Zeros),
        }
    }

    fn block(&mut self, prefix: &str, d: usize, hidden: usize, stacked: bool) -> BlockIds {
        let sites = if stacked { 3 } else { 2 };
        let ada_w = self.add(format!("{prefix}.ada_w"), &[d, 2 * sites * d], Init::Normal);
        let ada_b = self.add(format!("{prefix}.ada_b"), &[1, 2 * sites * d], Init::Zeros);
        let attn = self.attn(&format!("{prefix}.attn"), d);
        let cross = stacked.then(|| self.attn(&format!("{prefix}.cross"), d));
        BlockIds {
            ada_w,
            ada_b,
            attn,
            cross,
            w1: self.add(format!("{prefix}.mlp.w1"), &[d, hidden], Init::Normal),
            b1: self.add(format!("{prefix}.mlp.b1"), &[1, hidden], Init::Zeros),
            w2: self.add(format!("{prefix}.mlp.w2"), &[hidden, d], Init::Normal),
            b2: self.add(format!("{prefix}.mlp.b2"), &[1, d], Init::Zeros),
        }
    }
}

pub(crate) fn build_layout(cfg: &ModelConfig) -> (Vec<ParamSpec>, ParamIds) {
    let d = cfg.d_model;
    let hidden = cfg.mlp_ratio * d;
    let mut l = Layout { specs: Vec::new() };
    let token_embedding = l.add("token_embedding", &[cfg.codebook_size, d], Init::Normal);
    let mask_embedding = l.add("mask_embedding", &[1, d], Init::Normal);
    let pos_embedding = l.add("pos_embedding", &[cfg.num_tokens(), d], Init::Normal);
    let class_embedding = l.add("class_embedding", &[cfg.num_classes, d], Init::Normal);
    let disentangled = cfg.arch == ArchMode::Disentangled;
    let start_token = disentangled.then(|| l.add("start_token", &[1, d], Init::Normal));
    let encoder = (0..cfg.n_enc)
        .map(|i| l.block(&format!("enc{i}"), d, hidden, false))
        .collect();
    let stacked = cfg.decoder_attention == DecoderAttention::Stacked;
    let decoder = if disentangled {
        (0..cfg.n_dec)
            .map(|i| l.block(&format!("dec{i}"), d, hidden, stacked))
            .collect()
    } else {
        Vec::new()
    };
    let enc_norm = disentangled.then(|| {
        (
            l.add("enc_norm.g", &[1, d], Init::Ones),
            l.add("enc_norm.b", &[1, d], Init::Zeros),
        )
    });
    let reuse = (disentangled && cfg.reuse_projection).then(|| ReuseIds {
        norm_g: l.add("reuse.norm.g", &[1, d], Init::Ones),
        norm_b: l.add("reuse.norm.b", &[1, d], Init::Zeros),
        w1: l.add("reuse.w1", &[d, d], Init::Normal),
        b1: l.add("reuse.b1", &[1, d], Init::Zeros),
        w2: l.add("reuse.w2", &[d, d], Init::Normal),
        b2: l.add("reuse.b2", &[1, d], Init::Zeros),
    });
    let final_norm = (
        l.add("final_norm.g", &[1, d], Init::Ones),
        l.add("final_norm.b", &[1, d], Init::Zeros),
    );
    let head_w = l.add("head.w", &[d, cfg.codebook_size], Init::Normal);
    let head_b = l.add("head.b", &[1, cfg.codebook_size], Init::Zeros);
    (
        l.specs,
        ParamIds {
            token_embedding,
            mask_embedding,
            pos_embedding,
            class_embedding,
            start_token,
            encoder,
            decoder,
            enc_norm,
            reuse,
            final_norm,
            head_w,
            head_b,
        },
    )
}

/// Truncated normal at ±2σ by rejection.
fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        // Box-Muller
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

pub const INIT_STD: f64 = 0.02;

pub(crate) fn init_params<F: Float>(specs: &[ParamSpec], seed: u64) -> Vec<Tensor<F>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    specs
        .iter()
        .map(|s| {
            let t = match s.init {
                Init::Normal => Tensor::from_fn(s.shape.clone(), |_| {
                    F::from_f64c(truncated_normal(&mut rng, INIT_STD))
                }),
                Init::Zeros => Tensor::zeros(s.shape.clone()),
                Init::Ones => Tensor::from_fn(s.shape.clone(), |_| F::one()),
            };
            t.with_grad()
        })
        .collect()
}

/// Parameter count of a config, computed from the layout.
pub fn layout_param_count(cfg: &ModelConfig) -> Result<usize> {
    cfg.validate()?;
    let (specs, _) = build_layout(cfg);
    Ok(specs
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum())
}
