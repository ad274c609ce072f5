//! The token-generation network: embeddings, class conditioning, shared
//! (baseline) or disentangled encoder/decoder blocks, the reuse projection
//! and the prediction head.

mod checkpoint;
mod config;
mod forward;
mod mask;
mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{
    ArchMode, DecoderAttention, InteractionMask, ModelConfig, ReuseLayer, ReuseSource,
};
pub use forward::{ForwardOutput, PrevFeatures};
pub use mask::MaskState;
pub use params::{
    layout_param_count, AttnIds, BlockIds, Init, ParamIds, ParamSpec, ReuseIds, INIT_STD,
};

use crate::error::{Error, Result};
use crate::numerics::{Float, Graph, Tensor};

/// All learnable parameters plus the config that shapes them.
#[derive(Clone, Debug)]
pub struct NatModel<F: Float> {
    config: ModelConfig,
    specs: Vec<ParamSpec>,
    ids: ParamIds,
    params: Vec<Tensor<F>>,
}

impl<F: Float> NatModel<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        check_reuse_combo(&config)?;
        let (specs, ids) = params::build_layout(&config);
        let params = params::init_params(&specs, seed);
        Ok(Self {
            config,
            specs,
            ids,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<Tensor<F>>) -> Result<Self> {
        config.validate()?;
        check_reuse_combo(&config)?;
        let (specs, ids) = params::build_layout(&config);
        if specs.len() != params.len() {
            return Err(Error::Model(format!(
                "config expects {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (s, p) in specs.iter().zip(&params) {
            if s.shape != p.shape() {
                return Err(Error::Model(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    s.name,
                    p.shape(),
                    s.shape
                )));
            }
        }
        let params = params.into_iter().map(|p| p.with_grad()).collect();
        Ok(Self {
            config,
            specs,
            ids,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn ids(&self) -> &ParamIds {
        &self.ids
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Tensor<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn graph(&self) -> Graph<'_, F> {
        Graph::new(&self.params)
    }

    pub fn cast<G: Float>(&self) -> NatModel<G> {
        NatModel {
            config: self.config.clone(),
            specs: self.specs.clone(),
            ids: self.ids.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    /// Sets the reuse projection to an exact passthrough (zero residual branch).
    pub fn zero_reuse_branch(&mut self) {
        if let Some(r) = self.ids.reuse {
            for idx in [r.w2, r.b2] {
                self.params[idx]
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = F::zero());
            }
        }
    }
}

fn check_reuse_combo(cfg: &ModelConfig) -> Result<()> {
    if cfg.reuse_source == ReuseSource::AllTokens && cfg.reuse_layer == ReuseLayer::LayerToLayer {
        return Err(Error::Config(
            "all-token reuse is only supported with last-layer reuse".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
