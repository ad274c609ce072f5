use serde::{Deserialize, Serialize};

use super::flops::count_flops;
use crate::data::{Split, SyntheticDataset};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::generation::GenMode;
use crate::model::{
    ArchMode, DecoderAttention, InteractionMask, ModelConfig, NatModel, ReuseLayer, ReuseSource,
};
use crate::scheduler::make_cosine_schedule;
use crate::training::{evaluate, train, MaskRatioLaw, TrainConfig};
use crate::vq::{Codebook, TokenMap};

/// Training budget shared by every variant of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Budget {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub reuse_mode_prob: f64,
    pub mask_ratio_law: MaskRatioLaw,
    pub seed: u64,
    pub val_seed: u64,
    /// Generation steps used for the FLOPs columns and width matching.
    pub gen_steps: usize,
    pub exec: Exec,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            learning_rate: 1e-3,
            warmup_steps: 100,
            reuse_mode_prob: 0.0,
            mask_ratio_law: MaskRatioLaw::Arccos,
            seed: 0,
            val_seed: 12345,
            gen_steps: 8,
            exec: Exec::Parallel,
        }
    }
}

impl Budget {
    pub fn train_config(&self, arch: ArchMode) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            steps: self.steps,
            learning_rate: self.learning_rate,
            warmup_steps: self.warmup_steps,
            seed: self.seed,
            reuse_mode_prob: if arch == ArchMode::Disentangled {
                self.reuse_mode_prob
            } else {
                0.0
            },
            mask_ratio_law: self.mask_ratio_law,
            exec: self.exec,
            ..TrainConfig::default()
        }
    }
}

/// Tokenized train and validation pools.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Vec<TokenMap>,
    pub val: Vec<TokenMap>,
}

impl TrainData {
    pub fn synthetic(
        ds: &SyntheticDataset,
        codebook: &Codebook,
        train: usize,
        val: usize,
    ) -> Result<Self> {
        Ok(Self {
            train: ds.token_maps(codebook, Split::Train, train)?,
            val: ds.token_maps(codebook, Split::Val, val)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub name: String,
    pub config: ModelConfig,
    pub params: usize,
    pub flops_per_step: f64,
    pub val_loss: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub experiment: String,
    pub ln_k: f64,
    pub budget: Budget,
    pub variants: Vec<VariantReport>,
}

impl AblationReport {
    pub fn variant(&self, name: &str) -> Option<&VariantReport> {
        self.variants.iter().find(|v| v.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,n_enc,n_dec,d_model,params,flops_per_step,val_loss,val_loss_over_ln_k,final_train_loss,skipped\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for v in &self.variants {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                v.name,
                v.config.n_enc,
                v.config.n_dec,
                v.config.d_model,
                v.params,
                v.flops_per_step,
                opt(v.val_loss),
                opt(v.val_loss.map(|l| l / self.ln_k)),
                opt(v.final_train_loss),
                v.skipped.clone().unwrap_or_default()
            ));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

fn gen_mode(cfg: &ModelConfig) -> GenMode {
    match cfg.arch {
        ArchMode::Baseline => GenMode::Baseline,
        ArchMode::Disentangled => GenMode::Reuse,
    }
}

pub fn flops_per_step(cfg: &ModelConfig, steps: usize, mode: GenMode) -> Result<f64> {
    let s = make_cosine_schedule(cfg.num_tokens(), steps)?;
    Ok(count_flops(cfg, &s, mode)?.mean_per_step())
}

/// Trains one variant from `budget.seed` and scores it on the validation pool.
pub fn train_variant(
    name: &str,
    cfg: &ModelConfig,
    data: &TrainData,
    budget: &Budget,
) -> Result<(VariantReport, NatModel<f32>)> {
    let mut model = NatModel::<f32>::new(cfg.clone(), budget.seed)?;
    let tc = budget.train_config(cfg.arch);
    log::info!("training variant {name}");
    let report = train(&mut model, &data.train, &tc)?;
    let val = evaluate(
        &model,
        &data.val,
        budget.val_seed,
        budget.mask_ratio_law,
        budget.exec,
    )?;
    log::info!("variant {name}: val loss {val:.4}");
    Ok((
        VariantReport {
            name: name.to_string(),
            config: cfg.clone(),
            params: model.num_params(),
            flops_per_step: flops_per_step(cfg, budget.gen_steps, gen_mode(cfg))?,
            val_loss: Some(val),
            final_train_loss: report.losses.last().map(|r| r.loss),
            skipped: None,
        },
        model,
    ))
}

pub fn run_variants(
    experiment: &str,
    variants: &[(String, ModelConfig)],
    data: &TrainData,
    budget: &Budget,
) -> Result<AblationReport> {
    let k = variants
        .first()
        .map(|(_, c)| c.codebook_size)
        .ok_or_else(|| Error::Analysis("no variants".into()))?;
    let mut out = Vec::with_capacity(variants.len());
    for (name, cfg) in variants {
        out.push(train_variant(name, cfg, data, budget)?.0);
    }
    Ok(AblationReport {
        experiment: experiment.to_string(),
        ln_k: (k as f64).ln(),
        budget: budget.clone(),
        variants: out,
    })
}

/// All four interactions on, then each one disabled in turn.
pub fn interaction_variants(base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    let all = InteractionMask::ALL;
    let with = |im: InteractionMask| ModelConfig {
        arch: ArchMode::Baseline,
        interactions: im,
        ..base.clone()
    };
    vec![
        ("all-on".into(), with(all)),
        (
            "no-m-to-v".into(),
            with(InteractionMask {
                m_to_v: false,
                ..all
            }),
        ),
        (
            "no-v-to-m".into(),
            with(InteractionMask {
                v_to_m: false,
                ..all
            }),
        ),
        (
            "no-v-to-v".into(),
            with(InteractionMask {
                v_to_v: false,
                ..all
            }),
        ),
        (
            "no-m-to-m".into(),
            with(InteractionMask {
                m_to_m: false,
                ..all
            }),
        ),
    ]
}

pub fn run_interaction_ablation(
    base: &ModelConfig,
    data: &TrainData,
    budget: &Budget,
) -> Result<AblationReport> {
    if base.arch != ArchMode::Baseline {
        return Err(Error::Analysis(
            "the interaction ablation runs on the baseline architecture".into(),
        ));
    }
    run_variants("interactions", &interaction_variants(base), data, budget)
}

/// Width (a multiple of the head count) whose default-mode FLOPs per step
/// are closest to `target`, with the relative mismatch.
pub fn solve_width(
    template: &ModelConfig,
    n_enc: usize,
    n_dec: usize,
    target: f64,
    steps: usize,
) -> Result<(ModelConfig, f64)> {
    let h = template.n_heads;
    let mut best: Option<(ModelConfig, f64)> = None;
    for d in (h..=8 * template.d_model).step_by(h) {
        let cfg = ModelConfig {
            n_enc,
            n_dec,
            d_model: d,
            ..template.clone()
        };
        let f = flops_per_step(&cfg, steps, GenMode::Default)?;
        let rel = (f - target).abs() / target;
        if best.as_ref().map_or(true, |(_, r)| rel < *r) {
            best = Some((cfg, rel));
        }
        if f > target * 1.5 {
            break;
        }
    }
    best.ok_or_else(|| Error::Analysis("no width candidates".into()))
}

pub const FLOPS_TOLERANCE: f64 = 0.02;

/// Trains each `(n_enc, n_dec)` split at the width matching the FLOPs of
/// the first split at the template width.
pub fn run_allocation_sweep(
    template: &ModelConfig,
    splits: &[(usize, usize)],
    data: &TrainData,
    budget: &Budget,
) -> Result<AblationReport> {
    let &(e0, d0) = splits
        .first()
        .ok_or_else(|| Error::Analysis("no splits".into()))?;
    let reference = ModelConfig {
        n_enc: e0,
        n_dec: d0,
        arch: ArchMode::Disentangled,
        ..template.clone()
    };
    let target = flops_per_step(&reference, budget.gen_steps, GenMode::Default)?;
    let mut variants = Vec::new();
    for &(e, d) in splits {
        let name = format!("{e}-{d}");
        let (cfg, rel) = solve_width(&reference, e, d, target, budget.gen_steps)?;
        if rel > FLOPS_TOLERANCE {
            log::warn!(
                "split {name}: closest width {} misses the FLOPs target by {:.1}%",
                cfg.d_model,
                rel * 100.0
            );
            variants.push(VariantReport {
                name,
                params: crate::model::layout_param_count(&cfg)?,
                flops_per_step: flops_per_step(&cfg, budget.gen_steps, GenMode::Default)?,
                config: cfg,
                val_loss: None,
                final_train_loss: None,
                skipped: Some(format!("width mismatch {:.2}%", rel * 100.0)),
            });
            continue;
        }
        let (mut report, _) = train_variant(&name, &cfg, data, budget)?;
        report.flops_per_step = flops_per_step(&cfg, budget.gen_steps, GenMode::Default)?;
        variants.push(report);
    }
    Ok(AblationReport {
        experiment: "allocation".into(),
        ln_k: (template.codebook_size as f64).ln(),
        budget: budget.clone(),
        variants,
    })
}

pub fn sc_attention_variants(base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    vec![
        (
            "self-cross".into(),
            ModelConfig {
                decoder_attention: DecoderAttention::SelfCross,
                ..base.clone()
            },
        ),
        (
            "stacked".into(),
            ModelConfig {
                decoder_attention: DecoderAttention::Stacked,
                ..base.clone()
            },
        ),
    ]
}

pub fn reuse_projection_variants(base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    vec![
        (
            "with-projection".into(),
            ModelConfig {
                reuse_projection: true,
                ..base.clone()
            },
        ),
        (
            "no-projection".into(),
            ModelConfig {
                reuse_projection: false,
                ..base.clone()
            },
        ),
    ]
}

pub fn reuse_source_variants(base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    vec![
        (
            "visible-only".into(),
            ModelConfig {
                reuse_source: ReuseSource::VisibleOnly,
                reuse_layer: ReuseLayer::LastLayer,
                ..base.clone()
            },
        ),
        (
            "all-tokens".into(),
            ModelConfig {
                reuse_source: ReuseSource::AllTokens,
                reuse_layer: ReuseLayer::LastLayer,
                ..base.clone()
            },
        ),
    ]
}

pub fn reuse_layer_variants(base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    vec![
        (
            "last-layer".into(),
            ModelConfig {
                reuse_layer: ReuseLayer::LastLayer,
                reuse_source: ReuseSource::VisibleOnly,
                ..base.clone()
            },
        ),
        (
            "layer-to-layer".into(),
            ModelConfig {
                reuse_layer: ReuseLayer::LayerToLayer,
                reuse_source: ReuseSource::VisibleOnly,
                ..base.clone()
            },
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoder_heavy_split_is_wider_at_matched_flops() {
        let template = ModelConfig::disentangled(8, 8, 64, 1);
        let target = flops_per_step(&template, 8, GenMode::Default).unwrap();
        let (c15, r15) = solve_width(&template, 15, 1, target, 8).unwrap();
        let (c12, r12) = solve_width(&template, 12, 4, target, 8).unwrap();
        assert!(
            r15 <= FLOPS_TOLERANCE && r12 <= FLOPS_TOLERANCE,
            "{r15} {r12}"
        );
        assert!(c15.d_model > c12.d_model && c12.d_model > 64);
    }

    #[test]
    fn interaction_variants_cover_all_four() {
        let v = interaction_variants(&ModelConfig::baseline(2, 16, 2));
        assert_eq!(v.len(), 5);
        assert!(v[1..].iter().all(|(_, c)| !c.interactions.is_all()));
    }
}
