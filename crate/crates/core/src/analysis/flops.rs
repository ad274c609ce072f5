use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generation::GenMode;
use crate::model::{ArchMode, DecoderAttention, ModelConfig, ReuseLayer, ReuseSource};
use crate::scheduler::Schedule;

/// FLOPs of one pass, split by component (1 multiply-accumulate = 2 FLOPs).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentFlops {
    pub visible_encoder: u64,
    pub mask_decoder: u64,
    pub reuse_projection: u64,
    pub head: u64,
    /// Table lookups and additions only; no multiply-accumulates.
    pub embeddings: u64,
}

impl ComponentFlops {
    pub fn total(&self) -> u64 {
        self.visible_encoder
            + self.mask_decoder
            + self.reuse_projection
            + self.head
            + self.embeddings
    }

    fn add(&mut self, o: &Self) {
        self.visible_encoder += o.visible_encoder;
        self.mask_decoder += o.mask_decoder;
        self.reuse_projection += o.reuse_projection;
        self.head += o.head;
        self.embeddings += o.embeddings;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepFlops {
    pub step: usize,
    pub visible: usize,
    pub masked: usize,
    pub encoded: usize,
    pub flops: ComponentFlops,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub config: ModelConfig,
    pub mode: GenMode,
    pub schedule: Schedule,
    pub steps: Vec<StepFlops>,
    pub totals: ComponentFlops,
}

impl FlopsReport {
    pub fn total(&self) -> u64 {
        self.totals.total()
    }

    pub fn mean_per_step(&self) -> f64 {
        self.total() as f64 / self.steps.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,visible,masked,encoded,visible_encoder,mask_decoder,reuse_projection,head,embeddings,total\n");
        let mut row = |label: String, v: usize, m: usize, e: usize, f: &ComponentFlops| {
            s.push_str(&format!(
                "{label},{v},{m},{e},{},{},{},{},{},{}\n",
                f.visible_encoder,
                f.mask_decoder,
                f.reuse_projection,
                f.head,
                f.embeddings,
                f.total()
            ));
        };
        for st in &self.steps {
            row(
                st.step.to_string(),
                st.visible,
                st.masked,
                st.encoded,
                &st.flops,
            );
        }
        row("total".into(), 0, 0, 0, &self.totals);
        s
    }
}

pub fn linear_flops(n: usize, d_in: usize, d_out: usize) -> u64 {
    2 * n as u64 * d_in as u64 * d_out as u64
}

/// Projections plus score and weighted-sum products for `n_q` queries over
/// `n_kv` key/value rows.
pub fn attention_flops(n_q: usize, n_kv: usize, d: usize) -> u64 {
    if n_q == 0 {
        return 0;
    }
    2 * linear_flops(n_q, d, d)
        + 2 * linear_flops(n_kv, d, d)
        + 4 * n_q as u64 * n_kv as u64 * d as u64
}

fn mlp_flops(n: usize, d: usize, ratio: usize) -> u64 {
    linear_flops(n, d, ratio * d) + linear_flops(n, ratio * d, d)
}

fn modulation_flops(d: usize, sites: usize) -> u64 {
    linear_flops(1, d, 2 * sites * d)
}

/// One block over `n` rows, attending to its own rows plus `ctx` context rows.
fn block_flops(cfg: &ModelConfig, n: usize, ctx: usize, stacked: bool) -> u64 {
    if n == 0 {
        return 0;
    }
    let d = cfg.d_model;
    let attn = if stacked {
        attention_flops(n, n, d)
            + if ctx > 0 {
                attention_flops(n, ctx, d)
            } else {
                0
            }
    } else {
        attention_flops(n, n + ctx, d)
    };
    let sites = if stacked { 3 } else { 2 };
    attn + mlp_flops(n, d, cfg.mlp_ratio) + modulation_flops(d, sites)
}

fn reuse_projection_flops(cfg: &ModelConfig, rows: usize) -> u64 {
    if cfg.reuse_projection {
        2 * linear_flops(rows, cfg.d_model, cfg.d_model)
    } else {
        0
    }
}

/// Closed-form FLOPs of a whole generation run following `schedule`.
pub fn count_flops(cfg: &ModelConfig, schedule: &Schedule, mode: GenMode) -> Result<FlopsReport> {
    cfg.validate()?;
    let n = cfg.num_tokens();
    if schedule.num_tokens() != n {
        return Err(Error::Analysis(format!(
            "schedule reveals {} tokens, config has {n}",
            schedule.num_tokens()
        )));
    }
    if (mode == GenMode::Baseline) != (cfg.arch == ArchMode::Baseline) {
        return Err(Error::Analysis(format!(
            "mode {} does not match {:?}",
            mode.as_str(),
            cfg.arch
        )));
    }
    let d = cfg.d_model;
    let k = cfg.codebook_size;
    let stacked = cfg.decoder_attention == DecoderAttention::Stacked;
    let mut visible = 0usize;
    let mut prev_delta = 0usize;
    let mut steps = Vec::with_capacity(schedule.total_steps);
    let mut totals = ComponentFlops::default();
    for (i, &n_t) in schedule.reveal_counts.iter().enumerate() {
        let masked = n - visible;
        let mut f = ComponentFlops::default();
        let encoded;
        match mode {
            GenMode::Baseline => {
                encoded = n;
                f.visible_encoder = cfg.n_enc as u64 * block_flops(cfg, n, 0, false);
                f.head = linear_flops(n, d, k);
            }
            GenMode::Default => {
                encoded = visible;
                f.visible_encoder = cfg.n_enc as u64 * block_flops(cfg, visible, 0, false);
                let ctx = visible.max(1);
                f.mask_decoder = cfg.n_dec as u64 * block_flops(cfg, masked, ctx, stacked);
                f.head = linear_flops(masked, d, k);
            }
            GenMode::Reuse => {
                // Rows cached from the previous step, and context for the decoder.
                let (cached, ctx) = if i == 0 {
                    (0, visible.max(1))
                } else {
                    let prev_visible = visible - prev_delta;
                    match cfg.reuse_source {
                        ReuseSource::VisibleOnly => (prev_visible, visible),
                        ReuseSource::AllTokens => (n, n),
                    }
                };
                encoded = if i == 0 { visible } else { prev_delta };
                f.visible_encoder = cfg.n_enc as u64 * block_flops(cfg, encoded, cached, false);
                let reused_layers = match cfg.reuse_layer {
                    ReuseLayer::LastLayer => 1,
                    ReuseLayer::LayerToLayer => cfg.n_enc + 1,
                };
                f.reuse_projection = reused_layers as u64 * reuse_projection_flops(cfg, cached);
                f.mask_decoder = cfg.n_dec as u64 * block_flops(cfg, masked, ctx, stacked);
                f.head = linear_flops(masked, d, k);
            }
        }
        totals.add(&f);
        steps.push(StepFlops {
            step: i + 1,
            visible,
            masked,
            encoded,
            flops: f,
        });
        prev_delta = n_t;
        visible += n_t;
    }
    Ok(FlopsReport {
        config: cfg.clone(),
        mode,
        schedule: schedule.clone(),
        steps,
        totals,
    })
}
