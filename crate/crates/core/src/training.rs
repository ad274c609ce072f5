//! Masked-token training: mask sampling, the MLM loss, the reuse-mode
//! objective, AdamW and the training loop.

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{ArchMode, Init, MaskState, NatModel, PrevFeatures};
use crate::numerics::{Float, Graph, NumericsError, Var};
use crate::vq::TokenMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskRatioLaw {
    Uniform,
    Arccos,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    pub reuse_mode_prob: f64,
    pub mask_ratio_law: MaskRatioLaw,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            steps: 2000,
            learning_rate: 3e-4,
            warmup_steps: 100,
            seed: 0,
            reuse_mode_prob: 0.5,
            mask_ratio_law: MaskRatioLaw::Arccos,
            weight_decay: 0.03,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            exec: Exec::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.reuse_mode_prob) {
            return Err(Error::Config(format!(
                "reuse_mode_prob {} outside [0, 1]",
                self.reuse_mode_prob
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "learning_rate and weight_decay must be non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Linear warmup, then cosine decay to zero at the last step.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step <= self.warmup_steps && self.warmup_steps > 0 {
            return self.learning_rate * step as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = (step.saturating_sub(self.warmup_steps) as f64 / span).min(1.0);
        self.learning_rate * 0.5 * (1.0 + (PI * progress).cos())
    }
}

pub fn sample_mask_ratio<R: Rng + ?Sized>(rng: &mut R, law: MaskRatioLaw) -> f64 {
    let u: f64 = rng.gen();
    match law {
        MaskRatioLaw::Uniform => u,
        MaskRatioLaw::Arccos => (PI * u / 2.0).cos(),
    }
}

/// Masks `ceil(r N)` positions chosen uniformly, clamped to `[lo, hi]`.
pub fn mask_with_count<R: Rng + ?Sized>(n: usize, count: usize, rng: &mut R) -> MaskState {
    let mut masked = vec![false; n];
    for i in sample(rng, n, count.min(n)).iter() {
        masked[i] = true;
    }
    MaskState::from_masked(masked)
}

/// Training mask: between 1 and `N − 1` positions masked.
pub fn sample_training_mask<R: Rng + ?Sized>(
    n: usize,
    rng: &mut R,
    law: MaskRatioLaw,
) -> MaskState {
    let r = sample_mask_ratio(rng, law);
    let count = ((r * n as f64).ceil() as usize).clamp(1, n.saturating_sub(1).max(1));
    mask_with_count(n, count, rng)
}

/// Mean cross-entropy of `logits` rows against `targets`.
pub fn mlm_loss<F: Float>(g: &mut Graph<'_, F>, logits: Var, targets: &[usize]) -> Result<Var> {
    Ok(g.cross_entropy(logits, targets)?)
}

fn masked_logits<F: Float>(
    model: &NatModel<F>,
    g: &mut Graph<'_, F>,
    out: &crate::model::ForwardOutput,
    tokens: &[usize],
    mask: &MaskState,
) -> Result<(Var, Vec<usize>)> {
    let masked = mask.masked_positions();
    let targets = masked.iter().map(|&p| tokens[p]).collect();
    let logits = match model.config().arch {
        ArchMode::Baseline => g.gather_rows(out.logits, &masked)?,
        ArchMode::Disentangled => out.logits,
    };
    Ok((logits, targets))
}

/// Plain MLM loss over the masked positions.
pub fn normal_mode_loss<F: Float>(
    model: &NatModel<F>,
    g: &mut Graph<'_, F>,
    tokens: &[usize],
    mask: &MaskState,
    label: usize,
) -> Result<Var> {
    let out = model.forward(g, tokens, mask, label)?;
    let (logits, targets) = masked_logits(model, g, &out, tokens, mask)?;
    mlm_loss(g, logits, &targets)
}

/// Graph handles from a reuse-mode loss, kept for inspection.
#[derive(Clone, Debug)]
pub struct ReuseLoss {
    pub loss: Var,
    /// Previous-step features before the stop-gradient.
    pub z_prev: Vec<Var>,
    pub prev_mask: MaskState,
    pub delta: Vec<usize>,
    pub fell_back: bool,
}

/// Re-masks a random nonempty strict subset of the visible tokens, encodes
/// that earlier state, detaches its features and runs the reuse forward on
/// the real state with the re-masked tokens as the newly decoded set.
pub fn reuse_mode_loss<F: Float, R: Rng + ?Sized>(
    model: &NatModel<F>,
    g: &mut Graph<'_, F>,
    tokens: &[usize],
    mask: &MaskState,
    label: usize,
    rng: &mut R,
) -> Result<ReuseLoss> {
    let visible = mask.visible_positions();
    if visible.len() < 2 || model.config().arch != ArchMode::Disentangled {
        let loss = normal_mode_loss(model, g, tokens, mask, label)?;
        return Ok(ReuseLoss {
            loss,
            z_prev: Vec::new(),
            prev_mask: mask.clone(),
            delta: Vec::new(),
            fell_back: true,
        });
    }
    let count = rng.gen_range(1..visible.len());
    let mut delta: Vec<usize> = sample(rng, visible.len(), count)
        .iter()
        .map(|i| visible[i])
        .collect();
    delta.sort_unstable();
    let mut prev_masked = mask.masked.clone();
    for &p in &delta {
        prev_masked[p] = true;
    }
    let prev_mask = MaskState::from_masked(prev_masked);
    let first = model.forward_default(g, tokens, &prev_mask, label)?;
    let z_prev = first.reuse_cache.layers.clone();
    let prev = PrevFeatures {
        positions: first.reuse_cache.positions.clone(),
        layers: z_prev.iter().map(|&z| g.stop_gradient(z)).collect(),
    };
    let out = model.forward_reuse(g, tokens, mask, label, &prev, &delta)?;
    let (logits, targets) = masked_logits(model, g, &out, tokens, mask)?;
    let loss = mlm_loss(g, logits, &targets)?;
    Ok(ReuseLoss {
        loss,
        z_prev,
        prev_mask,
        delta,
        fell_back: false,
    })
}

/// AdamW with decoupled weight decay on the normally initialized tensors.
#[derive(Clone, Debug)]
pub struct AdamW<F: Float> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    decay: Vec<bool>,
    t: u64,
}

impl<F: Float> AdamW<F> {
    pub fn new(model: &NatModel<F>, cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            m: model
                .params()
                .iter()
                .map(|p| vec![F::zero(); p.len()])
                .collect(),
            v: model
                .params()
                .iter()
                .map(|p| vec![F::zero(); p.len()])
                .collect(),
            decay: model
                .specs()
                .iter()
                .map(|s| s.init == Init::Normal)
                .collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut NatModel<F>, grads: &[Vec<F>], lr: f64) {
        self.t += 1;
        let b1 = F::from_f64c(self.beta1);
        let b2 = F::from_f64c(self.beta2);
        let c1 = F::from_f64c(1.0 - self.beta1.powi(self.t as i32));
        let c2 = F::from_f64c(1.0 - self.beta2.powi(self.t as i32));
        let lr_f = F::from_f64c(lr);
        let eps = F::from_f64c(self.eps);
        let wd = F::from_f64c(lr * self.weight_decay);
        let one = F::one();
        for (i, p) in model.params_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            let decay = self.decay[i];
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                if decay {
                    *w -= wd * *w;
                }
                *w -= lr_f * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepMode {
    Normal,
    Reuse,
}

impl StepMode {
    pub fn as_str(self) -> &'static str {
        match self {
            StepMode::Normal => "normal",
            StepMode::Reuse => "reuse",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub mode: StepMode,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<LossRecord>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,mode,loss\n");
        for r in &self.losses {
            s.push_str(&format!("{},{},{}\n", r.step, r.mode.as_str(), r.loss));
        }
        s
    }
}

struct SampleJob<'a> {
    tokens: &'a [usize],
    label: usize,
    mask: MaskState,
    seed: u64,
}

fn label_of(t: &TokenMap) -> Result<usize> {
    t.class_label
        .ok_or_else(|| Error::Config("training token maps need class labels".into()))
}

/// Loss and gradients of one sample, gradients zero-filled for unused tensors.
fn sample_grads<F: Float>(
    model: &NatModel<F>,
    job: &SampleJob<'_>,
    mode: StepMode,
) -> Result<(f64, Vec<Vec<F>>)> {
    let mut g = model.graph();
    let loss = match mode {
        StepMode::Normal => normal_mode_loss(model, &mut g, job.tokens, &job.mask, job.label)?,
        StepMode::Reuse => {
            let mut rng = ChaCha8Rng::seed_from_u64(job.seed);
            reuse_mode_loss(model, &mut g, job.tokens, &job.mask, job.label, &mut rng)?.loss
        }
    };
    g.backward(loss)?;
    let grads = (0..model.params().len())
        .map(|i| match g.param_grad(i) {
            Some(gr) => gr.to_vec(),
            None => vec![F::zero(); model.params()[i].len()],
        })
        .collect();
    Ok((g.scalar(loss).to_f64c(), grads))
}

const GRAD_CHUNK: usize = 32;

pub fn train<F: Float>(
    model: &mut NatModel<F>,
    data: &[TokenMap],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_with(model, data, cfg, |_, _, _| Ok(()))
}

/// Runs `cfg.steps` optimizer steps; `on_step` sees the model after each one.
pub fn train_with<F: Float>(
    model: &mut NatModel<F>,
    data: &[TokenMap],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, &NatModel<F>, &LossRecord) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if cfg.reuse_mode_prob > 0.0 && model.config().arch != ArchMode::Disentangled {
        return Err(Error::Config(
            "reuse-mode training needs the disentangled architecture".into(),
        ));
    }
    let n = model.config().num_tokens();
    for t in data {
        if t.len() != n {
            return Err(Error::Config(format!(
                "token map of {} tokens, model expects {n}",
                t.len()
            )));
        }
        t.validate(model.config().codebook_size)?;
        label_of(t)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(model, cfg);
    let mut report = TrainReport::default();
    for step in 1..=cfg.steps {
        let mode = if rng.gen::<f64>() < cfg.reuse_mode_prob {
            StepMode::Reuse
        } else {
            StepMode::Normal
        };
        let jobs: Vec<SampleJob<'_>> = (0..cfg.batch_size)
            .map(|_| {
                let t = &data[rng.gen_range(0..data.len())];
                let mask = sample_training_mask(n, &mut rng, cfg.mask_ratio_law);
                SampleJob {
                    tokens: &t.grid,
                    label: t.class_label.unwrap_or(0),
                    mask,
                    seed: rng.gen(),
                }
            })
            .collect();
        let mut sum: Vec<Vec<F>> = model
            .params()
            .iter()
            .map(|p| vec![F::zero(); p.len()])
            .collect();
        let mut loss_sum = 0.0;
        for chunk in jobs.chunks(GRAD_CHUNK) {
            let results = cfg.exec.map(chunk, |job| sample_grads(model, job, mode));
            for r in results {
                let (l, grads) = r.map_err(|e| match e {
                    Error::Numerics(NumericsError::NonFinite(detail)) => {
                        Error::Diverged { step, detail }
                    }
                    other => other,
                })?;
                loss_sum += l;
                for (acc, gr) in sum.iter_mut().zip(grads) {
                    for (a, v) in acc.iter_mut().zip(gr) {
                        *a += v;
                    }
                }
            }
        }
        let loss = loss_sum / cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("{} loss is {loss}", mode.as_str()),
            });
        }
        let inv = F::from_f64c(1.0 / cfg.batch_size as f64);
        for acc in &mut sum {
            acc.iter_mut().for_each(|v| *v *= inv);
        }
        opt.step(model, &sum, cfg.lr_at(step));
        if !model.all_finite() {
            return Err(Error::Diverged {
                step,
                detail: "parameters became non-finite".into(),
            });
        }
        let rec = LossRecord { step, mode, loss };
        log::debug!("step {step} {} loss {loss:.5}", mode.as_str());
        on_step(step, model, &rec)?;
        report.losses.push(rec);
    }
    Ok(report)
}

/// Mean normal-mode MLM loss with masks drawn deterministically from `seed`.
pub fn evaluate<F: Float>(
    model: &NatModel<F>,
    data: &[TokenMap],
    seed: u64,
    law: MaskRatioLaw,
    exec: Exec,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let n = model.config().num_tokens();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jobs: Vec<SampleJob<'_>> = data
        .iter()
        .map(|t| {
            Ok(SampleJob {
                tokens: &t.grid,
                label: label_of(t)?,
                mask: sample_training_mask(n, &mut rng, law),
                seed: 0,
            })
        })
        .collect::<Result<_>>()?;
    let losses = exec.map(&jobs, |job| -> Result<f64> {
        let mut g = model.graph();
        let loss = normal_mode_loss(model, &mut g, job.tokens, &job.mask, job.label)?;
        Ok(g.scalar(loss).to_f64c())
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn clamp_keeps_one_visible() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let m = sample_training_mask(16, &mut rng, MaskRatioLaw::Arccos);
            assert!((1..=15).contains(&m.num_masked()));
        }
    }

    #[test]
    fn lr_schedule_shape() {
        let cfg = TrainConfig {
            steps: 100,
            warmup_steps: 10,
            learning_rate: 1.0,
            ..Default::default()
        };
        assert!((cfg.lr_at(5) - 0.5).abs() < 1e-12);
        assert!((cfg.lr_at(10) - 1.0).abs() < 1e-12);
        assert!(cfg.lr_at(100).abs() < 1e-12);
        assert!(cfg.lr_at(55) < 1.0 && cfg.lr_at(55) > 0.0);
    }

    #[test]
    fn validate_rejects_bad_prob() {
        let cfg = TrainConfig {
            reuse_mode_prob: 1.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn reuse_loss_partitions_visible_set() {
        let cfg = ModelConfig {
            codebook_size: 8,
            grid_height: 3,
            grid_width: 3,
            num_classes: 2,
            ..ModelConfig::disentangled(1, 1, 8, 2)
        };
        let model = NatModel::<f32>::new(cfg, 0).unwrap();
        let tokens: Vec<usize> = (0..9).map(|i| i % 8).collect();
        let mask = MaskState::from_masked((0..9).map(|i| i < 4).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mut g = model.graph();
            let r = reuse_mode_loss(&model, &mut g, &tokens, &mask, 1, &mut rng).unwrap();
            assert!(!r.fell_back);
            let prev_vis = r.prev_mask.visible_positions();
            assert!(!r.delta.is_empty() && !prev_vis.is_empty());
            let mut union: Vec<usize> = prev_vis.iter().chain(&r.delta).copied().collect();
            union.sort_unstable();
            assert_eq!(union, mask.visible_positions());
            assert!(r.delta.iter().all(|p| !prev_vis.contains(p)));
        }
    }
}
