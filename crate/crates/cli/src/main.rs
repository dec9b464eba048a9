//! `jigsaw`: generate data, train, sample, evaluate, render and ablate.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 invalid data
//! (or unreadable files), 3 numerical failure.

mod ablate;
mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use jigsaw_core::data::{dataset_entry, generate_house, read_jsonl, write_jsonl, GeneratorConfig, House};
use jigsaw_core::inference::{evaluate_runs, merge_reports, prepare_eval, EvalConfig, EvalReport};
use jigsaw_core::metrics::write_metrics_csv;
use jigsaw_core::model::{ModelKind, RotationMode, TrainedModel};
use jigsaw_core::render::{render_svg, RenderOptions};
use jigsaw_core::training::{TrainConfig, Trainer};
use jigsaw_core::JigsawError;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use config::{parse_range, FileConfig};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(JigsawError),
}

impl From<JigsawError> for CliError {
    fn from(e: JigsawError) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(JigsawError::InvalidConfig(_)) => 1,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "jigsaw", version, about = "Room-layout jigsaw solver")]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice (falls back to the config file, then JIGSAW_SEED, then 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-house parallel work.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a JSONL dataset of random houses.
    GenData(GenDataArgs),
    /// Train a model and write checkpoints plus a JSONL log.
    Train(TrainArgs),
    /// Estimate poses for every house and write them as JSON.
    Sample(SampleArgs),
    /// Evaluate a checkpoint: per-house CSV plus a mean/std summary.
    Eval(EvalArgs),
    /// Draw houses as SVG, either at ground truth or at sampled poses.
    Render(RenderArgs),
    /// Train and evaluate the full model and each switched-off variant.
    Ablate(ablate::AblateArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Number of houses.
    #[arg(long)]
    n: Option<usize>,
    /// Room-count range, e.g. `3-6`.
    #[arg(long)]
    rooms: Option<String>,
    #[arg(short, long)]
    output: PathBuf,
}

/// Training hyperparameters shared by `train` and `ablate`.
#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    /// `diffusion` or `transvector`.
    #[arg(long)]
    model: Option<String>,
    /// `estimated` or `gt_given`.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Diffusion steps T.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    mlp_hidden: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Global gradient-norm ceiling; 0 disables clipping.
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Fraction of the diffusion steps (from t = 1) that receive the match loss.
    #[arg(long)]
    match_t_fraction: Option<f64>,
    /// Halve the learning rate every this many epochs.
    #[arg(long)]
    lr_step_epochs: Option<usize>,
}

impl TrainFlags {
    pub fn apply(&self, mut cfg: TrainConfig, seed: u64) -> CliResult<TrainConfig> {
        if let Some(m) = &self.model {
            cfg.kind = m.parse()?;
        }
        if let Some(m) = &self.mode {
            cfg.model.rotation_mode = m.parse()?;
        }
        macro_rules! set {
            ($flag:ident => $($field:tt)+) => {
                if let Some(v) = self.$flag {
                    cfg.$($field)+ = v;
                }
            };
        }
        set!(epochs => epochs);
        set!(lr => lr);
        set!(batch_size => batch_size);
        set!(steps => diffusion_steps);
        set!(d_model => model.d_model);
        set!(blocks => model.n_blocks);
        set!(heads => model.n_heads);
        set!(mlp_hidden => model.mlp_hidden);
        set!(dropout => model.dropout);
        set!(weight_decay => weight_decay);
        set!(grad_clip => grad_clip);
        set!(match_t_fraction => match_t_fraction);
        set!(lr_step_epochs => scheduler_step_epochs);
        cfg.seed = seed;
        cfg.check()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Validation houses; enables best-checkpoint tracking.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Run directory for `ckpt-<epoch>`, `best` and `train_log.jsonl`.
    #[arg(short, long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    val_every: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    no_rsa: bool,
    #[arg(long)]
    no_gsa: bool,
    #[arg(long)]
    no_match_loss: bool,
    #[command(flatten)]
    flags: TrainFlags,
}

/// Evaluation switches shared by `sample`, `eval` and `ablate`.
#[derive(Args, Debug, Clone, Default)]
pub struct EvalFlags {
    /// Independent sampling runs per house.
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    batch_size_eval: Option<usize>,
    /// Evaluate at the training scale instead of a random scale in [0.8, 1].
    #[arg(long)]
    no_test_scaling: bool,
    /// Keep the stored room order and orientation.
    #[arg(long)]
    no_augment: bool,
    /// Remove the global translation offset before computing MPE.
    #[arg(long)]
    align: bool,
    /// Door-center distance for connectivity, in pixels.
    #[arg(long)]
    threshold: Option<f64>,
}

impl EvalFlags {
    pub fn apply(&self, mut cfg: EvalConfig, seed: u64) -> CliResult<EvalConfig> {
        if let Some(r) = self.runs {
            cfg.n_runs = r;
        }
        if let Some(b) = self.batch_size_eval {
            cfg.batch_size = b;
        }
        if let Some(t) = self.threshold {
            cfg.threshold = t;
        }
        cfg.test_scaling &= !self.no_test_scaling;
        cfg.augment &= !self.no_augment;
        cfg.align_translation |= self.align;
        cfg.seed = seed;
        if cfg.n_runs == 0 {
            return Err(CliError::Usage("--runs must be at least 1".into()));
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    #[command(flatten)]
    eval: EvalFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Per-house, per-run metrics.
    #[arg(long, default_value = "metrics.csv")]
    csv: PathBuf,
    /// Summary JSON (mean and std over runs).
    #[arg(long, default_value = "summary.json")]
    summary: PathBuf,
    #[command(flatten)]
    eval: EvalFlags,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output of `sample`; without it the ground truth is drawn.
    #[arg(long)]
    results: Option<PathBuf>,
    /// Directory receiving one `<house_id>.svg` per house.
    #[arg(short, long)]
    out: PathBuf,
    /// Which run of the results to draw.
    #[arg(long, default_value_t = 0)]
    run: usize,
    #[arg(long, default_value_t = 2.0)]
    scale: f64,
}

/// What `sample` writes and `render` reads.
#[derive(Serialize, Deserialize)]
struct SampleOutput {
    model: ModelKind,
    rotation_mode: RotationMode,
    eval: EvalConfig,
    report: EvalReport,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let seed = file.resolve_seed(cli.seed)?;
    let workers = cli.workers.or(file.workers).unwrap_or(1).max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| match cli.command {
        Command::GenData(a) => gen_data(a, &file, seed),
        Command::Train(a) => train(a, &file, seed),
        Command::Sample(a) => sample(a, &file, seed, workers),
        Command::Eval(a) => eval(a, &file, seed, workers),
        Command::Render(a) => render(a),
        Command::Ablate(a) => ablate::run(a, &file, seed, workers),
    })
}

fn gen_data(a: GenDataArgs, file: &FileConfig, seed: u64) -> CliResult<()> {
    let n = a.n.or(file.data.n).ok_or_else(|| CliError::Usage("--n is required".into()))?;
    let rooms = a.rooms.or_else(|| file.data.rooms.clone()).unwrap_or_else(|| "3-6".into());
    let rooms = parse_range(&rooms).map_err(CliError::Usage)?;
    let base = GeneratorConfig::default();
    let mut houses = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let (s, r) = dataset_entry(seed, i, rooms);
            generate_house(s, &GeneratorConfig { n_rooms: r, ..base.clone() })
        })
        .collect::<Result<Vec<House>, _>>()?;
    houses.sort_by(|x, y| x.id.cmp(&y.id));
    write_jsonl(&a.output, &houses)?;
    log::info!("wrote {} houses to {}", houses.len(), a.output.display());
    Ok(())
}

fn train(a: TrainArgs, file: &FileConfig, seed: u64) -> CliResult<()> {
    let houses = read_jsonl(&a.data)?;
    let val = a.val.as_ref().map(read_jsonl).transpose()?.unwrap_or_default();
    let mut trainer = match &a.resume {
        Some(ck) => Trainer::resume(ck, a.flags.epochs, Some(a.out.clone()))?,
        None => {
            let mut cfg = a.flags.apply(file.train.clone(), seed)?;
            cfg.model.use_rsa &= !a.no_rsa;
            cfg.model.use_gsa &= !a.no_gsa;
            cfg.use_match_loss &= !a.no_match_loss;
            if let Some(v) = a.val_every {
                cfg.val_every = v;
            }
            if let Some(c) = a.checkpoint_every {
                cfg.checkpoint_every = c;
            }
            cfg.check()?;
            fs::create_dir_all(&a.out)?;
            fs::write(a.out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
            Trainer::new(cfg, Some(a.out.clone()))?
        }
    };
    log::info!(
        "training {} model ({} parameters) on {} houses",
        trainer.model.kind.as_str(),
        trainer.model.net.num_parameters(),
        houses.len()
    );
    trainer.fit(&houses, &val)?;
    if let Some(last) = trainer.history.last() {
        log::info!("finished epoch {} with loss {:.5}", last.epoch, last.mean_loss);
    }
    Ok(())
}

/// Evaluates in `workers` chunks of houses; results do not depend on the split.
pub fn evaluate_parallel(model: &TrainedModel, houses: &[House], cfg: &EvalConfig, workers: usize) -> CliResult<EvalReport> {
    let mut sorted = houses.to_vec();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let chunk = sorted.len().div_ceil(workers.max(1)).max(1);
    let parts = sorted
        .par_chunks(chunk)
        .map(|c| evaluate_runs(model, c, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(merge_reports(model.kind, cfg.n_runs, parts))
}

fn load_model(path: &Path) -> CliResult<TrainedModel> {
    Ok(TrainedModel::load(path)?.0)
}

fn sample(a: SampleArgs, file: &FileConfig, seed: u64, workers: usize) -> CliResult<()> {
    let model = load_model(&a.checkpoint)?;
    let houses = read_jsonl(&a.data)?;
    let cfg = a.eval.apply(
        EvalConfig {
            n_runs: 1,
            ..file.eval.clone()
        },
        seed,
    )?;
    let report = evaluate_parallel(&model, &houses, &cfg, workers)?;
    let out = SampleOutput {
        model: model.kind,
        rotation_mode: model.net.config.rotation_mode,
        eval: cfg,
        report,
    };
    fs::write(&a.out, serde_json::to_string(&out)?)?;
    log::info!("wrote poses for {} houses to {}", houses.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs, file: &FileConfig, seed: u64, workers: usize) -> CliResult<()> {
    let model = load_model(&a.checkpoint)?;
    let houses = read_jsonl(&a.data)?;
    let cfg = a.eval.apply(file.eval.clone(), seed)?;
    let report = evaluate_parallel(&model, &houses, &cfg, workers)?;
    write_metrics_csv(fs::File::create(&a.csv)?, &report.metric_rows())?;
    fs::write(&a.summary, serde_json::to_string_pretty(&report.summary)?)?;
    println!("{}", summary_table(&[("model", &report)]));
    Ok(())
}

fn fmt_pm(mean: Option<f64>, std: Option<f64>) -> String {
    match (mean, std) {
        (Some(m), Some(s)) => format!("{m:.2} ± {s:.2}"),
        _ => "N/A".to_string(),
    }
}

/// Markdown table with mean ± std columns for MPE and GED.
pub fn summary_table(rows: &[(&str, &EvalReport)]) -> String {
    let mut s = String::from("| variant | runs | MPE (px) | GED | rot. acc. |\n|---|---|---|---|---|\n");
    for (name, r) in rows {
        let m = &r.summary;
        s.push_str(&format!(
            "| {name} | {} | {} | {} | {:.3} |\n",
            m.n_runs,
            fmt_pm(Some(m.mpe_mean), Some(m.mpe_std)),
            fmt_pm(m.ged_mean, m.ged_std),
            m.rotation_accuracy_mean
        ));
    }
    s
}

fn render(a: RenderArgs) -> CliResult<()> {
    let houses = read_jsonl(&a.data)?;
    fs::create_dir_all(&a.out)?;
    let opt = RenderOptions {
        scale: a.scale,
        ..RenderOptions::default()
    };
    let results: Option<SampleOutput> = match &a.results {
        Some(p) => Some(serde_json::from_str(&fs::read_to_string(p)?)?),
        None => None,
    };
    for house in &houses {
        let (view, poses) = match &results {
            None => (house.clone(), house.gt_poses.clone()),
            Some(r) => {
                let hr = r.report.houses.iter().find(|h| h.id == house.id).ok_or_else(|| {
                    CliError::Core(JigsawError::Validation {
                        house_id: house.id.clone(),
                        message: "house missing from results".into(),
                    })
                })?;
                let run = hr.runs.get(a.run).ok_or_else(|| CliError::Usage(format!("no run {} in results", a.run)))?;
                // Rebuild the evaluated (possibly rescaled) view of the house.
                let (view, _) = prepare_eval(house, r.rotation_mode, &r.eval)?;
                (view, run.pred_poses.clone())
            }
        };
        let svg = render_svg(&view, &poses, &opt)?;
        fs::write(a.out.join(format!("{}.svg", house.id)), svg)?;
    }
    log::info!("rendered {} houses into {}", houses.len(), a.out.display());
    Ok(())
}
