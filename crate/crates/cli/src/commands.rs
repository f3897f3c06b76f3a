use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use serde::Serialize;

use imfa_core::budget::{budget as budget_report, BudgetQuery};
use imfa_core::checkpoint::{self, CheckpointConfig};
use imfa_core::config::Precision;
use imfa_core::data::{generate_dataset, read_dataset, ScaleMix, SceneOptions};
use imfa_core::diagnostics::{op_suite, pipeline_check, CheckResult};
use imfa_core::eval::ApReport;
use imfa_core::imageio::read_image;
use imfa_core::train::{evaluate_dataset, loss_endpoints, train as run_training};
use imfa_core::visualize::{visualize as render, VisualizeOptions};
use imfa_core::{Error, Result};

use crate::{BudgetArgs, EvalArgs, GenDataArgs, GradcheckArgs, TrainArgs, VisualizeArgs};

pub const THREADS_ENV: &str = "IMFA_THREADS";

/// Sizes the global worker pool. `IMFA_THREADS` wins over the config
/// value; without either, rayon picks the machine default. Returns the
/// thread count actually in use.
pub fn init_threads(configured: Option<usize>) -> Result<usize> {
    let requested = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?,
        ),
        Err(_) => configured,
    };
    if let Some(n) = requested {
        // Fails only if the pool already exists, which cannot happen in a
        // single command invocation.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    checkpoint: &'a Path,
    dataset: &'a Path,
    threads: usize,
    report: ApReport,
}

pub fn train(args: TrainArgs) -> Result<ExitCode> {
    let mut cfg = args.flags.resolve()?;
    if let Some(d) = args.dataset {
        cfg.dataset = Some(d);
    }
    if let Some(d) = args.eval_dataset {
        cfg.eval_dataset = Some(d);
    }
    if cfg.precision != Precision::F32 {
        return Err(Error::Config("training runs in f32 only".into()));
    }
    let dataset_dir = cfg
        .dataset
        .clone()
        .ok_or_else(|| Error::Config("no training set: pass --dataset or set `dataset` in the config".into()))?;
    let threads = init_threads(cfg.threads)?;
    let dataset = read_dataset(&dataset_dir)?;
    let eval_set = cfg.eval_dataset.as_deref().map(read_dataset).transpose()?;

    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let metrics_path = args.out.join("metrics.jsonl");
    let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut log = BufWriter::new(file);
    let start = Instant::now();
    let outcome = run_training(&cfg, &dataset, &mut log)?;
    log.flush().map_err(|e| Error::io(&metrics_path, e))?;

    let ckpt_dir = args.out.join("checkpoint");
    let ckpt_cfg = CheckpointConfig {
        run: cfg.clone(),
        seed: cfg.seed,
        precision: "f32".into(),
        threads,
        step: outcome.metrics.len(),
    };
    checkpoint::save(&ckpt_dir, &outcome.params, &ckpt_cfg)?;
    let (first, last) = loss_endpoints(&outcome.metrics, 100);
    eprintln!(
        "trained {} steps in {:.1}s on {threads} thread(s); loss {first:.4} -> {last:.4}; checkpoint at {}",
        outcome.metrics.len(),
        start.elapsed().as_secs_f64(),
        ckpt_dir.display()
    );

    if let (Some(set), Some(dir)) = (eval_set, cfg.eval_dataset.as_deref()) {
        let report = evaluate_dataset(&outcome.params, &cfg.model, &set)?;
        let out = EvalOutput {
            checkpoint: &ckpt_dir,
            dataset: dir,
            threads,
            report,
        };
        write_json(&args.out.join("eval.json"), &out)?;
        print_json(&out);
    }
    Ok(ExitCode::SUCCESS)
}

pub fn eval(args: EvalArgs) -> Result<ExitCode> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let threads = init_threads(ckpt.config.run.threads)?;
    let dataset = read_dataset(&args.dataset)?;
    let report = evaluate_dataset(&ckpt.params, &ckpt.config.run.model, &dataset)?;
    let out = EvalOutput {
        checkpoint: &args.checkpoint,
        dataset: &args.dataset,
        threads,
        report,
    };
    if let Some(path) = &args.out {
        write_json(path, &out)?;
    }
    print_json(&out);
    Ok(ExitCode::SUCCESS)
}

pub fn budget(args: BudgetArgs) -> Result<ExitCode> {
    let report = budget_report(&BudgetQuery {
        height: args.height,
        width: args.width,
        d: args.d,
        dense_strides: args.strides,
        num_queries: args.num_queries,
        sampling_ratio: args.sampling_ratio,
        keypoints: args.keypoints,
    })?;
    print_json(&report);
    Ok(ExitCode::SUCCESS)
}

pub fn visualize(args: VisualizeArgs) -> Result<ExitCode> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let img = match (&args.image, &args.dataset, args.index) {
        (Some(path), _, _) => read_image(path)?,
        (None, Some(root), Some(i)) => {
            let set = read_dataset(root)?;
            if i >= set.len() {
                return Err(Error::Config(format!("index {i} out of range for {} images", set.len())));
            }
            set.load_image(i)?
        }
        _ => return Err(Error::Config("pass --image FILE or --dataset DIR --index I".into())),
    };
    if !(args.zoom.is_finite() && args.zoom > 0.0) {
        return Err(Error::Config(format!("zoom must be positive, got {}", args.zoom)));
    }
    let opts = VisualizeOptions {
        zoom: args.zoom,
        ..VisualizeOptions::default()
    };
    let svg = render(&img, &ckpt.config.run.model, &ckpt.params, &opts)?;
    write_atomic(&args.out, svg.as_bytes())?;
    Ok(ExitCode::SUCCESS)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = PathBuf::from(path);
    tmp.set_extension(format!("tmp-{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn report_line(r: &CheckResult) {
    println!(
        "{} {:<28} max_rel_err {:.3e} (tol {:.0e}, {} coords, {} failing)",
        if r.passed { "PASS" } else { "FAIL" },
        r.name,
        r.max_rel_err,
        r.tol,
        r.checked,
        r.failing
    );
}

pub fn gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let start = Instant::now();
    let mut results = op_suite(args.seed)?;
    if !args.ops_only {
        results.push(pipeline_check(args.seed, args.max_coords)?);
    }
    results.iter().for_each(report_line);
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed, {:.1}s", results.len(), start.elapsed().as_secs_f64());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

pub fn gen_data(args: GenDataArgs) -> Result<ExitCode> {
    let defaults = SceneOptions::default();
    let scale_mix = match args.scale_mix.as_deref() {
        Some(&[small, medium, large]) => ScaleMix { small, medium, large },
        Some(other) => return Err(Error::Config(format!("--scale-mix takes three weights, got {}", other.len()))),
        None => defaults.scale_mix,
    };
    let opts = SceneOptions {
        size: args.size,
        scale_mix,
        min_objects: args.min_objects.unwrap_or(defaults.min_objects),
        max_objects: args.max_objects.unwrap_or(defaults.max_objects),
    };
    init_threads(None)?;
    let set = generate_dataset(&args.out, args.n, args.seed, &opts)?;
    let objects: usize = set.records.iter().map(|r| r.classes.len()).sum();
    eprintln!("wrote {} images with {objects} objects to {}", set.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}
