//! Iterative generation from a fully masked canvas, with a per-step trace.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::image::Image;
use crate::model::{ArchMode, ForwardOutput, MaskState, NatModel, PrevFeatures};
use crate::numerics::{Float, Graph};
use crate::scheduler::{make_cosine_schedule, sample_step, select_reveal, Schedule, StepOutcome};
use crate::vq::{detokenize, Codebook, TokenMap};

pub const TRACE_MAGIC: &[u8; 4] = b"NGTR";
pub const TRACE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenMode {
    /// Shared blocks over every token each step.
    Baseline,
    /// Encoder over all visible tokens each step.
    Default,
    /// Encoder over the newly decoded tokens only, reusing earlier features.
    Reuse,
}

impl GenMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GenMode::Baseline => "baseline",
            GenMode::Default => "default",
            GenMode::Reuse => "reuse",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(GenMode::Baseline),
            1 => Ok(GenMode::Default),
            2 => Ok(GenMode::Reuse),
            _ => Err(Error::Format(format!("unknown generation mode code {c}"))),
        }
    }
}

impl std::str::FromStr for GenMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(GenMode::Baseline),
            "default" => Ok(GenMode::Default),
            "reuse" => Ok(GenMode::Reuse),
            _ => Err(Error::Config(format!(
                "unknown mode {s:?} (baseline, default, reuse)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateOptions {
    pub steps: usize,
    pub mode: GenMode,
    pub temperature: f64,
    /// Initial Gumbel scale for selection, decayed linearly to zero.
    pub selection_noise: f64,
    /// Keep per-step feature maps in the trace.
    pub trace_features: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            steps: 8,
            mode: GenMode::Reuse,
            temperature: 1.0,
            selection_noise: 1.0,
            trace_features: false,
        }
    }
}

/// Output features of one step: every position, visible rows from the
/// encoder and masked rows from the decoder (or the shared blocks).
#[derive(Clone, Debug, PartialEq)]
pub struct StepFeatures {
    pub dim: usize,
    /// `N × dim`, position order.
    pub full: Vec<f32>,
}

impl StepFeatures {
    pub fn row(&self, p: usize) -> &[f32] {
        &self.full[p * self.dim..(p + 1) * self.dim]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitSummary {
    pub mean_max_prob: f64,
    pub mean_entropy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub mask_before: MaskState,
    pub mask_after: MaskState,
    pub outcome: StepOutcome,
    pub logits: LogitSummary,
    #[serde(skip)]
    pub features: Option<StepFeatures>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub mode: GenMode,
    pub class_label: usize,
    pub seed: u64,
    pub schedule: Schedule,
    pub steps: Vec<StepRecord>,
    pub final_tokens: TokenMap,
}

impl GenerationTrace {
    /// Final grid rebuilt from the tokens chosen at each step.
    pub fn reconstruct_tokens(&self) -> Result<Vec<usize>> {
        let n = self.final_tokens.len();
        let mut grid: Vec<Option<usize>> = vec![None; n];
        for s in &self.steps {
            for (i, &p) in s.outcome.positions.iter().enumerate() {
                if s.outcome.chosen[i] {
                    if grid[p].is_some() {
                        return Err(Error::Format(format!("position {p} revealed twice")));
                    }
                    grid[p] = Some(s.outcome.sampled_tokens[i]);
                }
            }
        }
        grid.into_iter()
            .enumerate()
            .map(|(p, t)| t.ok_or_else(|| Error::Format(format!("position {p} never revealed"))))
            .collect()
    }

    pub fn render(&self, codebook: &Codebook) -> Result<Image> {
        detokenize(&self.final_tokens, codebook)
    }

    pub fn summary_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Binary trace: header, then per step the outcome, the mask after the
    /// step and, when stored, the feature map as `f32`.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.final_tokens.len();
        let dim = self
            .steps
            .first()
            .and_then(|s| s.features.as_ref())
            .map_or(0, |f| f.dim);
        w.write_all(TRACE_MAGIC)?;
        w.write_all(&TRACE_VERSION.to_le_bytes())?;
        w.write_all(&[self.mode.code()])?;
        for v in [
            self.class_label as u64,
            self.seed,
            self.final_tokens.height as u64,
            self.final_tokens.width as u64,
            self.steps.len() as u64,
            dim as u64,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for s in &self.steps {
            let o = &s.outcome;
            w.write_all(&(o.positions.len() as u32).to_le_bytes())?;
            for i in 0..o.positions.len() {
                w.write_all(&(o.positions[i] as u32).to_le_bytes())?;
                w.write_all(&(o.sampled_tokens[i] as u32).to_le_bytes())?;
                w.write_all(&o.confidences[i].to_le_bytes())?;
                w.write_all(&[o.chosen[i] as u8])?;
            }
            w.write_all(&s.logits.mean_max_prob.to_le_bytes())?;
            w.write_all(&s.logits.mean_entropy.to_le_bytes())?;
            if dim > 0 {
                let f = s
                    .features
                    .as_ref()
                    .ok_or_else(|| Error::Format("features stored for some steps only".into()))?;
                for v in &f.full {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        for &t in &self.final_tokens.grid {
            w.write_all(&(t as u32).to_le_bytes())?;
        }
        debug_assert_eq!(n, self.final_tokens.grid.len());
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        fn u32_<R: Read>(r: &mut R) -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        }
        fn u64_<R: Read>(r: &mut R) -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        }
        fn f64_<R: Read>(r: &mut R) -> Result<f64> {
            Ok(f64::from_bits(u64_(r)?))
        }
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TRACE_MAGIC {
            return Err(Error::Format("not a trace file (bad magic)".into()));
        }
        let version = u32_(&mut r)?;
        if version != TRACE_VERSION {
            return Err(Error::Version {
                found: version,
                expected: TRACE_VERSION,
            });
        }
        let mut code = [0u8; 1];
        r.read_exact(&mut code)?;
        let mode = GenMode::from_code(code[0])?;
        let class_label = u64_(&mut r)? as usize;
        let seed = u64_(&mut r)?;
        let height = u64_(&mut r)? as usize;
        let width = u64_(&mut r)? as usize;
        let t = u64_(&mut r)? as usize;
        let dim = u64_(&mut r)? as usize;
        let n = height * width;
        if t == 0 || t > n || n > 1 << 24 || dim > 1 << 16 {
            return Err(Error::Format("implausible trace header".into()));
        }
        let mut state = MaskState::all_masked(n);
        let mut steps = Vec::with_capacity(t);
        for step in 1..=t {
            let m = u32_(&mut r)? as usize;
            if m > n {
                return Err(Error::Format(format!("step {step} lists {m} positions")));
            }
            let mut o = StepOutcome {
                positions: Vec::with_capacity(m),
                sampled_tokens: Vec::with_capacity(m),
                confidences: Vec::with_capacity(m),
                chosen: Vec::with_capacity(m),
            };
            for _ in 0..m {
                o.positions.push(u32_(&mut r)? as usize);
                o.sampled_tokens.push(u32_(&mut r)? as usize);
                o.confidences.push(f64_(&mut r)?);
                let mut c = [0u8; 1];
                r.read_exact(&mut c)?;
                o.chosen.push(c[0] != 0);
            }
            let logits = LogitSummary {
                mean_max_prob: f64_(&mut r)?,
                mean_entropy: f64_(&mut r)?,
            };
            let features = if dim > 0 {
                let mut buf = vec![0u8; n * dim * 4];
                r.read_exact(&mut buf)?;
                Some(StepFeatures {
                    dim,
                    full: buf
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                })
            } else {
                None
            };
            let after = state.reveal(&o.chosen_positions())?;
            steps.push(StepRecord {
                step,
                mask_before: state,
                mask_after: after.clone(),
                outcome: o,
                logits,
                features,
            });
            state = after;
        }
        let grid = (0..n)
            .map(|_| u32_(&mut r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let counts = steps
            .iter()
            .map(|s| s.outcome.chosen.iter().filter(|&&c| c).count())
            .collect();
        Ok(Self {
            mode,
            class_label,
            seed,
            schedule: Schedule {
                total_steps: t,
                reveal_counts: counts,
            },
            steps,
            final_tokens: TokenMap::new(height, width, grid, Some(class_label))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Reuse cache detached from any graph.
struct StoredCache<F> {
    positions: Vec<usize>,
    layers: Vec<(usize, Vec<F>)>,
}

impl<F: Float> StoredCache<F> {
    fn export(g: &Graph<'_, F>, prev: &PrevFeatures) -> Self {
        Self {
            positions: prev.positions.clone(),
            layers: prev
                .layers
                .iter()
                .map(|&v| (g.rows(v), g.value(v).to_vec()))
                .collect(),
        }
    }

    fn import(&self, g: &mut Graph<'_, F>, d: usize) -> Result<PrevFeatures> {
        let layers = self
            .layers
            .iter()
            .map(|(rows, data)| g.constant(*rows, d, data.clone()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(PrevFeatures {
            positions: self.positions.clone(),
            layers,
        })
    }
}

fn summarize(logits: &[f64], k: usize) -> LogitSummary {
    let rows = logits.len() / k.max(1);
    if rows == 0 {
        return LogitSummary {
            mean_max_prob: 0.0,
            mean_entropy: 0.0,
        };
    }
    let (mut mp, mut ent) = (0.0, 0.0);
    for row in logits.chunks_exact(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let mut h = 0.0;
        let mut best: f64 = 0.0;
        for &v in row {
            let p = (v - max).exp() / z;
            best = best.max(p);
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        mp += best;
        ent += h;
    }
    LogitSummary {
        mean_max_prob: mp / rows as f64,
        mean_entropy: ent / rows as f64,
    }
}

/// Seed of sample `i` in a batch started from `seed`.
pub fn derive_seed(seed: u64, i: usize) -> u64 {
    let mut x = seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn generate<F: Float>(
    model: &NatModel<F>,
    class_label: usize,
    opts: &GenerateOptions,
    seed: u64,
) -> Result<GenerationTrace> {
    let cfg = model.config();
    let n = cfg.num_tokens();
    let k = cfg.codebook_size;
    let d = cfg.d_model;
    let needs_baseline = opts.mode == GenMode::Baseline;
    if needs_baseline != (cfg.arch == ArchMode::Baseline) {
        return Err(Error::Config(format!(
            "mode {} does not match a {:?} model",
            opts.mode.as_str(),
            cfg.arch
        )));
    }
    if class_label >= cfg.num_classes {
        return Err(Error::Config(format!("class {class_label} out of range")));
    }
    let schedule = make_cosine_schedule(n, opts.steps)?;
    if opts.mode == GenMode::Reuse && opts.steps == 1 {
        log::info!(
            "reuse mode with one step has no previous features; running the default forward"
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = MaskState::all_masked(n);
    let mut grid = vec![0usize; n];
    let mut cache: Option<StoredCache<F>> = None;
    let mut steps = Vec::with_capacity(opts.steps);
    for (ti, &n_t) in schedule.reveal_counts.iter().enumerate() {
        let t = ti + 1;
        let mut g = model.graph();
        let out: ForwardOutput = match (opts.mode, &cache) {
            (GenMode::Baseline, _) => model.forward_baseline(&mut g, &grid, &state, class_label)?,
            (GenMode::Reuse, Some(c)) => {
                let prev = c.import(&mut g, d)?;
                let delta = state.newly_decoded_positions();
                model.forward_reuse(&mut g, &grid, &state, class_label, &prev, &delta)?
            }
            _ => model.forward_default(&mut g, &grid, &state, class_label)?,
        };
        let masked = state.masked_positions();
        let logits = match cfg.arch {
            ArchMode::Baseline => g.gather_rows(out.logits, &masked)?,
            ArchMode::Disentangled => out.logits,
        };
        let values: Vec<f64> = g.value(logits).iter().map(|v| v.to_f64c()).collect();
        let (sampled, conf) = sample_step(&values, k, opts.temperature, &mut rng)?;
        let chosen = select_reveal(&conf, n_t, opts.selection_noise, t, opts.steps, &mut rng)?;
        let outcome = StepOutcome {
            positions: masked,
            sampled_tokens: sampled,
            confidences: conf,
            chosen,
        };
        let revealed = outcome.chosen_positions();
        for (i, &p) in outcome.positions.iter().enumerate() {
            if outcome.chosen[i] {
                grid[p] = outcome.sampled_tokens[i];
            }
        }
        let features = if opts.trace_features {
            let full = model.full_features(&mut g, &out)?;
            Some(StepFeatures {
                dim: d,
                full: g.value(full).iter().map(|v| v.to_f64c() as f32).collect(),
            })
        } else {
            None
        };
        if opts.mode == GenMode::Reuse {
            cache = Some(StoredCache::export(&g, &out.reuse_cache));
        }
        let after = state.reveal(&revealed)?;
        steps.push(StepRecord {
            step: t,
            mask_before: state,
            mask_after: after.clone(),
            outcome,
            logits: summarize(&values, k),
            features,
        });
        state = after;
    }
    Ok(GenerationTrace {
        mode: opts.mode,
        class_label,
        seed,
        schedule,
        steps,
        final_tokens: TokenMap::new(cfg.grid_height, cfg.grid_width, grid, Some(class_label))?,
    })
}

/// One independent generation per label, sample `i` seeded with
/// `derive_seed(seed, i)`.
pub fn batch_generate<F: Float>(
    model: &NatModel<F>,
    labels: &[usize],
    opts: &GenerateOptions,
    seed: u64,
    exec: Exec,
) -> Result<Vec<GenerationTrace>> {
    let jobs: Vec<(usize, usize)> = labels.iter().copied().enumerate().collect();
    exec.map(&jobs, |&(i, label)| {
        generate(model, label, opts, derive_seed(seed, i))
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> NatModel<f32> {
        let cfg = ModelConfig {
            codebook_size: 8,
            grid_height: 3,
            grid_width: 3,
            num_classes: 3,
            ..ModelConfig::disentangled(2, 1, 8, 2)
        };
        NatModel::new(cfg, 5).unwrap()
    }

    #[test]
    fn trace_is_consistent() {
        let m = model();
        for mode in [GenMode::Default, GenMode::Reuse] {
            let opts = GenerateOptions {
                steps: 4,
                mode,
                trace_features: true,
                ..Default::default()
            };
            let tr = generate(&m, 1, &opts, 9).unwrap();
            assert_eq!(tr.steps.len(), 4);
            assert_eq!(tr.reconstruct_tokens().unwrap(), tr.final_tokens.grid);
            for (s, &n_t) in tr.steps.iter().zip(&tr.schedule.reveal_counts) {
                assert_eq!(s.outcome.chosen_positions().len(), n_t);
            }
            assert_eq!(tr.steps.last().unwrap().mask_after.num_masked(), 0);
        }
    }

    #[test]
    fn single_step_reuse_equals_default() {
        let m = model();
        let mk = |mode| GenerateOptions {
            steps: 1,
            mode,
            ..Default::default()
        };
        let a = generate(&m, 2, &mk(GenMode::Default), 3).unwrap();
        let b = generate(&m, 2, &mk(GenMode::Reuse), 3).unwrap();
        assert_eq!(a.final_tokens, b.final_tokens);
        assert_eq!(a.steps[0].outcome, b.steps[0].outcome);
    }

    #[test]
    fn binary_trace_round_trip() {
        let m = model();
        let opts = GenerateOptions {
            steps: 3,
            trace_features: true,
            ..Default::default()
        };
        let tr = generate(&m, 0, &opts, 1).unwrap();
        let mut buf = Vec::new();
        tr.write(&mut buf).unwrap();
        let back = GenerationTrace::read(&buf[..]).unwrap();
        assert_eq!(back, tr);
    }

    #[test]
    fn mode_must_match_architecture() {
        let m = model();
        let opts = GenerateOptions {
            mode: GenMode::Baseline,
            ..Default::default()
        };
        assert!(generate(&m, 0, &opts, 0).is_err());
    }
}
