use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use natgen_core::analysis::{
    self, aggregate, count_flops, similarity_map, stats_csv, AblationReport, TrainData,
};
use natgen_core::config::RunConfig;
use natgen_core::data::Split;
use natgen_core::error::Error;
use natgen_core::exec::Exec;
use natgen_core::generation::{batch_generate, derive_seed, generate, GenMode, GenerateOptions};
use natgen_core::model::{ArchMode, Checkpoint, ModelConfig, NatModel};
use natgen_core::scheduler::make_cosine_schedule;
use natgen_core::training::{evaluate, train_with};
use natgen_core::vq::Codebook;

#[derive(Parser, Debug)]
#[command(name = "natgen", version, about = "Masked image-token generation with an encoder/decoder split and cross-step feature reuse")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Run configuration (TOML). Defaults are used when omitted.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.steps=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Experiment {
    Interactions,
    Allocation,
    ScAttention,
    ReuseProjection,
    ReuseSource,
    ReuseLayer,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum FlopsMode {
    Baseline,
    Default,
    Reuse,
    Both,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write sample images of the synthetic dataset.
    Dataset {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of images.
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
    },
    /// Fit the patch codebook and write `codebook.ngcb` in the run directory.
    FitVq {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model; writes checkpoints, the loss curve and the resolved config.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of optimizer steps (overrides `train.steps`).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Generate images from a checkpoint.
    Generate {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Class label to condition on.
        #[arg(long = "class", default_value_t = 0)]
        class: usize,
        /// Decoding steps T.
        #[arg(long, default_value_t = 8)]
        steps: usize,
        /// baseline, default or reuse (defaults to reuse for disentangled models).
        #[arg(long)]
        mode: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of images; image `i` uses a seed derived from `--seed` and `i`.
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        /// Initial selection-noise scale (0 = pure top-k).
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        /// Also write a binary trace with per-step features and a JSON summary.
        #[arg(long)]
        trace: bool,
        /// Output directory (defaults to the run's `images/`).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Analytical FLOPs of a generation run.
    Flops {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long, value_enum, default_value_t = FlopsMode::Both)]
        mode: FlopsMode,
    },
    /// Adjacent-step feature similarity statistics and heatmaps.
    Similarity {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 50)]
        samples: usize,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (defaults to the run's `reports/`).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Train and compare ablation variants under one budget.
    Ablate {
        #[arg(long, value_enum)]
        experiment: Experiment,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print the cosine reveal schedule as CSV.
    Schedule {
        #[arg(long)]
        tokens: usize,
        #[arg(long)]
        steps: usize,
    },
}

/// Failure classes, each with its own exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Config(String),
    Missing(String),
    Version(String),
    Format(String),
    Diverged(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Other(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Config(_) => 3,
            Failure::Missing(_) => 4,
            Failure::Version(_) => 5,
            Failure::Format(_) => 6,
            Failure::Diverged(_) => 7,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Failure::Usage(_) => "usage",
            Failure::Config(_) => "config",
            Failure::Missing(_) => "missing-file",
            Failure::Version(_) => "version-mismatch",
            Failure::Format(_) => "format",
            Failure::Diverged(_) => "diverged",
            Failure::Other(_) => "error",
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m)
            | Failure::Config(m)
            | Failure::Missing(m)
            | Failure::Version(m)
            | Failure::Format(m)
            | Failure::Diverged(m)
            | Failure::Other(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) | Error::Schedule(_) => Failure::Config(msg),
            Error::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => Failure::Missing(msg),
            Error::Version { .. } => Failure::Version(msg),
            Error::Format(_) => Failure::Format(msg),
            Error::Io(ref io) if io.kind() == std::io::ErrorKind::UnexpectedEof => Failure::Format(msg),
            Error::Diverged { .. } => Failure::Diverged(msg),
            _ => Failure::Other(msg),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let cfg = match &args.config {
        Some(path) => {
            if !path.exists() {
                return Err(Failure::Missing(format!("config file {} not found", path.display())));
            }
            RunConfig::load(path, &args.set)?
        }
        None => {
            let text = RunConfig::default().to_toml()?;
            RunConfig::from_toml_with(&text, &args.set)?
        }
    };
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint<f32>, Failure> {
    if !path.exists() {
        return Err(Failure::Missing(format!("checkpoint {} not found", path.display())));
    }
    Ok(Checkpoint::<f32>::load(path)?)
}

/// `runs/<id>/<sub>` for a checkpoint under `runs/<id>/checkpoints/`.
fn sibling_dir(checkpoint: &Path, sub: &str) -> PathBuf {
    let parent = checkpoint.parent().unwrap_or(Path::new("."));
    match parent.file_name() {
        Some(n) if n == "checkpoints" => parent.parent().unwrap_or(Path::new(".")).join(sub),
        _ => parent.join(sub),
    }
}

fn codebook_for(cfg: &RunConfig, dir: &Path) -> Result<Codebook, Failure> {
    let path = dir.join("codebook.ngcb");
    if path.exists() {
        let cb = Codebook::load(&path)?;
        if cb.len() != cfg.model.codebook_size {
            return Err(Failure::Config(format!(
                "{} has {} entries, model expects {}",
                path.display(),
                cb.len(),
                cfg.model.codebook_size
            )));
        }
        return Ok(cb);
    }
    let cb = cfg.data.dataset.fit_codebook(cfg.data.fit_images, &cfg.vq)?;
    cb.save(&path)?;
    Ok(cb)
}

fn default_mode(model: &ModelConfig) -> GenMode {
    match model.arch {
        ArchMode::Baseline => GenMode::Baseline,
        ArchMode::Disentangled => GenMode::Reuse,
    }
}

fn parse_mode(mode: &Option<String>, model: &ModelConfig) -> Result<GenMode, Failure> {
    match mode {
        Some(m) => Ok(m.parse()?),
        None => Ok(default_mode(model)),
    }
}

fn cmd_dataset(args: &ConfigArgs, count: usize, split: SplitArg) -> CmdResult {
    let cfg = load_config(args)?;
    let dir = cfg.prepare_run_dir()?;
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
    };
    let out = dir.join("images").join("dataset");
    std::fs::create_dir_all(&out)?;
    for (i, (img, class)) in cfg.data.dataset.images(split, count)?.iter().enumerate() {
        img.save(&out.join(format!("{i:04}_class{class}.png")))?;
    }
    println!("wrote {count} images to {}", out.display());
    Ok(())
}

fn cmd_fit_vq(args: &ConfigArgs) -> CmdResult {
    let cfg = load_config(args)?;
    let dir = cfg.prepare_run_dir()?;
    let cb = cfg.data.dataset.fit_codebook(cfg.data.fit_images, &cfg.vq)?;
    let path = dir.join("codebook.ngcb");
    cb.save(&path)?;
    println!("codebook K={} patch={} -> {}", cb.len(), cb.patch_size(), path.display());
    Ok(())
}

fn cmd_train(args: &ConfigArgs, steps: Option<usize>) -> CmdResult {
    let mut cfg = load_config(args)?;
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    cfg.validate()?;
    let dir = cfg.prepare_run_dir()?;
    let cb = codebook_for(&cfg, &dir)?;
    let data = TrainData::synthetic(&cfg.data.dataset, &cb, cfg.data.train_samples, cfg.data.val_samples)?;
    let mut model = NatModel::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let ckpt_dir = dir.join("checkpoints");
    let every = cfg.checkpoint_every;
    let report = train_with(&mut model, &data.train, &cfg.train, |step, m, rec| {
        if step % 50 == 0 {
            log::info!("step {step} {} loss {:.4}", rec.mode.as_str(), rec.loss);
        }
        if every > 0 && step % every == 0 {
            Checkpoint::new(m.clone(), Some(cb.clone()), step as u64).save(&ckpt_dir.join(format!("step{step:06}.ngck")))?;
        }
        Ok(())
    })?;
    let final_path = ckpt_dir.join("final.ngck");
    Checkpoint::new(model.clone(), Some(cb), cfg.train.steps as u64).save(&final_path)?;
    std::fs::write(dir.join("reports").join("loss.csv"), report.to_csv())?;
    let val = evaluate(&model, &data.val, cfg.ablation.val_seed, cfg.train.mask_ratio_law, cfg.train.exec)?;
    let ln_k = (cfg.model.codebook_size as f64).ln();
    let summary = serde_json::json!({
        "run_id": cfg.run_id,
        "steps": cfg.train.steps,
        "final_train_loss": report.losses.last().map(|r| r.loss),
        "val_loss": val,
        "val_loss_over_ln_k": val / ln_k,
        "params": model.num_params(),
    });
    std::fs::write(
        dir.join("reports").join("train_summary.json"),
        serde_json::to_string_pretty(&summary).map_err(|e| Failure::Other(e.to_string()))?,
    )?;
    println!(
        "trained {} steps: val loss {val:.4} ({:.3} ln K), checkpoint {}",
        cfg.train.steps,
        val / ln_k,
        final_path.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    checkpoint: &Path,
    class: usize,
    steps: usize,
    mode: &Option<String>,
    seed: u64,
    count: usize,
    temperature: f64,
    noise: f64,
    trace: bool,
    out: &Option<PathBuf>,
) -> CmdResult {
    let ck = load_checkpoint(checkpoint)?;
    let cb = ck
        .codebook
        .as_ref()
        .ok_or_else(|| Failure::Format("checkpoint has no embedded codebook".into()))?;
    let opts = GenerateOptions {
        steps,
        mode: parse_mode(mode, ck.model.config())?,
        temperature,
        selection_noise: noise,
        trace_features: trace,
    };
    let out = out.clone().unwrap_or_else(|| sibling_dir(checkpoint, "images"));
    std::fs::create_dir_all(&out)?;
    for i in 0..count {
        let s = if count == 1 { seed } else { derive_seed(seed, i) };
        let tr = generate(&ck.model, class, &opts, s)?;
        let stem = format!("class{class}_seed{s}_{}_t{steps}", opts.mode.as_str());
        tr.render(cb)?.save(&out.join(format!("{stem}.png")))?;
        if trace {
            tr.save(&out.join(format!("{stem}.ngtr")))?;
            std::fs::write(out.join(format!("{stem}.json")), tr.summary_json()?)?;
        }
        println!("{}", out.join(format!("{stem}.png")).display());
    }
    Ok(())
}

fn cmd_flops(args: &ConfigArgs, steps: usize, mode: FlopsMode) -> CmdResult {
    let cfg = load_config(args)?;
    let dir = cfg.prepare_run_dir()?;
    let schedule = make_cosine_schedule(cfg.model.num_tokens(), steps)?;
    let modes: Vec<GenMode> = match (mode, cfg.model.arch) {
        (FlopsMode::Both, ArchMode::Disentangled) => vec![GenMode::Default, GenMode::Reuse],
        (FlopsMode::Both, ArchMode::Baseline) => vec![GenMode::Baseline],
        (FlopsMode::Baseline, _) => vec![GenMode::Baseline],
        (FlopsMode::Default, _) => vec![GenMode::Default],
        (FlopsMode::Reuse, _) => vec![GenMode::Reuse],
    };
    let mut totals = Vec::new();
    for m in modes {
        let r = count_flops(&cfg.model, &schedule, m).map_err(|e| Failure::Config(e.to_string()))?;
        let stem = dir.join("reports").join(format!("flops_{}_t{steps}", m.as_str()));
        std::fs::write(stem.with_extension("csv"), r.to_csv())?;
        std::fs::write(
            stem.with_extension("json"),
            serde_json::to_string_pretty(&r).map_err(|e| Failure::Other(e.to_string()))?,
        )?;
        println!("{} total_flops={} gflops={:.3}", m.as_str(), r.total(), r.total() as f64 / 1e9);
        totals.push((m, r.total()));
    }
    if let [(GenMode::Default, a), (GenMode::Reuse, b)] = totals[..] {
        println!("reuse/default ratio {:.4}", b as f64 / a as f64);
    }
    Ok(())
}

fn cmd_similarity(
    checkpoint: &Path,
    samples: usize,
    steps: usize,
    mode: &Option<String>,
    seed: u64,
    out: &Option<PathBuf>,
) -> CmdResult {
    if steps < 2 {
        return Err(Failure::Config("similarity needs at least 2 steps".into()));
    }
    let ck = load_checkpoint(checkpoint)?;
    let cfg = ck.model.config();
    let opts = GenerateOptions {
        steps,
        mode: parse_mode(mode, cfg)?,
        trace_features: true,
        ..GenerateOptions::default()
    };
    let labels: Vec<usize> = (0..samples).map(|i| i % cfg.num_classes).collect();
    let traces = batch_generate(&ck.model, &labels, &opts, seed, Exec::Parallel)?;
    let maps = traces
        .iter()
        .map(|tr| (2..=steps).map(|t| similarity_map(tr, t)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()?;
    let stats = aggregate(&maps);
    let out = out.clone().unwrap_or_else(|| sibling_dir(checkpoint, "reports"));
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("similarity.csv"), stats_csv(&stats))?;
    if let Some(first) = maps.first() {
        for m in first {
            m.write_heatmap(&out.join(format!("similarity_sample0_t{}.ppm", m.step)), 16)?;
        }
    }
    for s in &stats {
        println!(
            "step {} other {:.4} newly-decoded {:.4} gap {:.4}",
            s.step,
            s.mean_other,
            s.mean_newly_decoded,
            s.gap()
        );
    }
    Ok(())
}

fn cmd_ablate(experiment: Experiment, args: &ConfigArgs) -> CmdResult {
    let cfg = load_config(args)?;
    let dir = cfg.prepare_run_dir()?;
    let cb = codebook_for(&cfg, &dir)?;
    let data = TrainData::synthetic(&cfg.data.dataset, &cb, cfg.data.train_samples, cfg.data.val_samples)?;
    let base = cfg.model.clone();
    let budget = &cfg.ablation;
    let (name, report): (&str, AblationReport) = match experiment {
        Experiment::Interactions => {
            let b = ModelConfig {
                n_enc: base.n_enc + base.n_dec,
                n_dec: 0,
                arch: ArchMode::Baseline,
                reuse_projection: false,
                ..base
            };
            ("interactions", analysis::run_interaction_ablation(&b, &data, budget)?)
        }
        Experiment::Allocation => {
            let template = ModelConfig {
                arch: ArchMode::Disentangled,
                ..base
            };
            (
                "allocation",
                analysis::run_allocation_sweep(&template, &[(8, 8), (12, 4), (15, 1)], &data, budget)?,
            )
        }
        Experiment::ScAttention => (
            "sc-attention",
            analysis::run_variants("sc-attention", &analysis::sc_attention_variants(&base), &data, budget)?,
        ),
        Experiment::ReuseProjection => (
            "reuse-projection",
            analysis::run_variants("reuse-projection", &analysis::reuse_projection_variants(&base), &data, budget)?,
        ),
        Experiment::ReuseSource => (
            "reuse-source",
            analysis::run_variants("reuse-source", &analysis::reuse_source_variants(&base), &data, budget)?,
        ),
        Experiment::ReuseLayer => (
            "reuse-layer",
            analysis::run_variants("reuse-layer", &analysis::reuse_layer_variants(&base), &data, budget)?,
        ),
    };
    let stem = dir.join("reports").join(format!("ablation_{name}"));
    std::fs::write(stem.with_extension("csv"), report.to_csv())?;
    std::fs::write(stem.with_extension("json"), report.to_json()?)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match &cli.command {
        Command::Dataset { cfg, count, split } => cmd_dataset(cfg, *count, *split),
        Command::FitVq { cfg } => cmd_fit_vq(cfg),
        Command::Train { cfg, steps } => cmd_train(cfg, *steps),
        Command::Generate {
            checkpoint,
            class,
            steps,
            mode,
            seed,
            count,
            temperature,
            noise,
            trace,
            out,
        } => cmd_generate(checkpoint, *class, *steps, mode, *seed, *count, *temperature, *noise, *trace, out),
        Command::Flops { cfg, steps, mode } => cmd_flops(cfg, *steps, *mode),
        Command::Similarity {
            checkpoint,
            samples,
            steps,
            mode,
            seed,
            out,
        } => cmd_similarity(checkpoint, *samples, *steps, mode, *seed, out),
        Command::Ablate { experiment, cfg } => cmd_ablate(*experiment, cfg),
        Command::Schedule { tokens, steps } => {
            print!("{}", make_cosine_schedule(*tokens, *steps)?.to_csv());
            Ok(())
        }
    }
}

fn fail(f: &Failure) -> ExitCode {
    let line = serde_json::json!({ "error": f.kind(), "code": f.code(), "message": f.message() });
    eprintln!("{line}");
    ExitCode::from(f.code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return fail(&Failure::Usage(first.to_string()));
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(&f),
    }
}
