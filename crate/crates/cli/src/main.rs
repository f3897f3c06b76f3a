//! `imfa` command line: synthetic data generation, training, evaluation,
//! token budgets, sampling visualizations and gradient checks.
//!
//! Settings resolve in three layers: built-in defaults, then the JSON file
//! given by `--config`, then individual flags.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use imfa_core::config::RunConfig;
use imfa_core::imfa::Architecture;
use imfa_core::Error;

#[derive(Parser)]
#[command(name = "imfa", version)]
#[command(about = "Staged DETR-style detector with sparse multi-scale sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch on a synthetic dataset.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset (AP over IoU 0.50:0.95).
    Eval(EvalArgs),
    /// Token counts and attention-cost ratios of the encoder variants.
    Budget(BudgetArgs),
    /// Draw the last stage's regions, keypoints and scale weights as SVG.
    Visualize(VisualizeArgs),
    /// Check analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic shapes dataset.
    GenData(GenDataArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Imfa,
    Baseline,
}

/// Flags that mirror `RunConfig` fields.
#[derive(Args, Default)]
struct ConfigFlags {
    /// JSON run configuration; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    arch: Option<ArchArg>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    num_stages: Option<usize>,
    #[arg(long)]
    num_queries: Option<usize>,
    #[arg(long)]
    sampling_ratio: Option<f64>,
    #[arg(long)]
    keypoints: Option<usize>,
    #[arg(long)]
    scales: Option<usize>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    iter_enc_only: bool,
    #[arg(long)]
    disable_rep_keypoints: bool,
    #[arg(long)]
    disable_ada_scale: bool,
    #[arg(long)]
    disable_dynamic_ffn: bool,
    #[arg(long)]
    sampled_keys_only: bool,
    #[arg(long)]
    lr_backbone: Option<f64>,
    #[arg(long)]
    lr_main: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr_drop_step: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    flip_prob: Option<f64>,
}

impl ConfigFlags {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field { $target = v; })*
            };
        }
        set! {
            seed => cfg.seed,
            d => cfg.model.d,
            heads => cfg.model.heads,
            num_stages => cfg.model.num_stages,
            num_queries => cfg.model.num_queries,
            sampling_ratio => cfg.model.sampling_ratio,
            keypoints => cfg.model.keypoints,
            scales => cfg.model.scales,
            num_classes => cfg.model.num_classes,
            lr_backbone => cfg.optimizer.lr_backbone,
            lr_main => cfg.optimizer.lr_main,
            weight_decay => cfg.optimizer.weight_decay,
            steps => cfg.optimizer.steps,
            batch_size => cfg.optimizer.batch_size,
            grad_clip => cfg.optimizer.grad_clip,
            flip_prob => cfg.flip_prob,
        }
        if let Some(size) = self.image_size {
            cfg.model.image_size = size;
            cfg.scenes.size = size;
        }
        if let Some(step) = self.lr_drop_step {
            cfg.optimizer.lr_drop_step = Some(step);
        }
        if let Some(arch) = self.arch {
            cfg.model.arch = match arch {
                ArchArg::Imfa => Architecture::Imfa,
                ArchArg::Baseline => Architecture::Baseline,
            };
        }
        let ab = &mut cfg.model.ablation;
        ab.iter_enc_only |= self.iter_enc_only;
        ab.disable_rep_keypoints |= self.disable_rep_keypoints;
        ab.disable_ada_scale |= self.disable_ada_scale;
        ab.disable_dynamic_ffn |= self.disable_dynamic_ffn;
        ab.sampled_keys_only |= self.sampled_keys_only;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    flags: ConfigFlags,
    /// Training set directory (overrides `dataset` in the config).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Held-out set scored after training.
    #[arg(long)]
    eval_dataset: Option<PathBuf>,
    /// Output directory for `checkpoint/`, `metrics.jsonl` and `eval.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BudgetArgs {
    #[arg(long, default_value_t = 256)]
    height: usize,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    d: usize,
    /// Strides of the dense multi-scale encoder, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
    strides: Vec<usize>,
    #[arg(long, default_value_t = 30)]
    num_queries: usize,
    #[arg(long, default_value_t = 0.2)]
    sampling_ratio: f64,
    #[arg(long, default_value_t = 8)]
    keypoints: usize,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image file: raw blob or binary PPM.
    #[arg(long, conflicts_with_all = ["dataset", "index"])]
    image: Option<PathBuf>,
    /// Take the image from a dataset instead.
    #[arg(long, requires = "index")]
    dataset: Option<PathBuf>,
    #[arg(long)]
    index: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// SVG units per image pixel.
    #[arg(long, default_value_t = 4.0)]
    zoom: f64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Probe at most this many coordinates per parameter tensor in the
    /// pipeline check (all by default).
    #[arg(long)]
    max_coords: Option<usize>,
    /// Only run the per-operation checks.
    #[arg(long)]
    ops_only: bool,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    size: usize,
    /// Relative weights of small, medium and large objects.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    scale_mix: Option<Vec<f64>>,
    #[arg(long)]
    min_objects: Option<usize>,
    #[arg(long)]
    max_objects: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Budget(a) => commands::budget(a),
        Command::Visualize(a) => commands::visualize(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::GenData(a) => commands::gen_data(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
