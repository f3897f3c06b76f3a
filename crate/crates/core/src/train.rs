//! Training loop (AdamW with decoupled weight decay and one step LR drop)
//! and dataset-level evaluation.
//!
//! Each image of a batch gets its own tape; images run in parallel and
//! their gradients are summed in batch order, so results do not depend on
//! the thread count.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{detections_from_outputs, evaluate, ApReport, MAX_DETECTIONS};
use crate::imfa::{infer, init_params, run_pipeline, ForwardOptions, ModelConfig};
use crate::matching::{deep_supervision, LossWeights, Targets};
use crate::params::ParamStore;
use crate::pyramid::Image;
use crate::tensor::{Tape, Tensor};

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    /// Weighted total, summed over stages, averaged over the batch.
    pub loss: f64,
    /// Unweighted per-term losses, summed over stages, averaged over the
    /// batch.
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub grad_norm: f64,
    pub lr_main: f64,
}

/// Adam moments for every parameter tensor.
pub struct AdamW {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl AdamW {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        AdamW { m: zeros(), v: zeros(), t: 0 }
    }

    /// One update. `lrs[i]` is the learning rate of tensor `i`; weight decay
    /// applies only to matrices (rank ≥ 2).
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Tensor<f32>], lrs: &[f64], cfg: &crate::config::OptimizerConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let lr = lrs[i];
            let decay = if p.rank() >= 2 { 1.0 - lr * cfg.weight_decay } else { 1.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (w, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                let g = g as f64;
                let mk = b1 * m[k] as f64 + (1.0 - b1) * g;
                let vk = b2 * v[k] as f64 + (1.0 - b2) * g * g;
                m[k] = mk as f32;
                v[k] = vk as f32;
                let update = lr * (mk / c1) / ((vk / c2).sqrt() + cfg.eps);
                *w = ((*w as f64) * decay - update) as f32;
            }
        }
    }
}

struct ImageResult {
    grads: Vec<Tensor<f32>>,
    loss: f64,
    class: f64,
    l1: f64,
    giou: f64,
}

fn image_step(
    img: &Image,
    targets: &Targets,
    model: &ModelConfig,
    weights: &LossWeights,
    params: &ParamStore<f32>,
    sample_seed: u64,
) -> Result<ImageResult> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let out = run_pipeline(img, model, &bound, ForwardOptions { sample_seed })?;
    let sup = deep_supervision(&out.predictions(), targets, weights)?;
    let loss = sup.total.item() as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite training loss {loss}")));
    }
    let grads = bound.gradients(&tape.backward(sup.total)?);
    Ok(ImageResult {
        grads,
        loss,
        class: sup.stages.iter().map(|s| s.class).sum(),
        l1: sup.stages.iter().map(|s| s.l1).sum(),
        giou: sup.stages.iter().map(|s| s.giou).sum(),
    })
}

/// Checks that the dataset's labels fit the model's class count.
pub fn check_classes(dataset: &Dataset, model: &ModelConfig) -> Result<()> {
    let needed = dataset.class_count();
    if needed > model.num_classes {
        return Err(Error::Config(format!(
            "dataset uses {needed} classes but the model has {}",
            model.num_classes
        )));
    }
    Ok(())
}

pub struct TrainOutcome {
    pub params: ParamStore<f32>,
    pub metrics: Vec<StepMetrics>,
}

/// Trains from a fresh initialization seeded by `cfg.seed`, writing one
/// JSON line per step to `log`.
pub fn train(cfg: &RunConfig, dataset: &Dataset, log: &mut dyn Write) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_classes(dataset, &cfg.model)?;
    if dataset.is_empty() {
        return Err(Error::Data(format!("training set at {} is empty", dataset.root.display())));
    }
    let opt = &cfg.optimizer;
    let mut params = init_params::<f32>(&cfg.model, cfg.seed)?;
    let backbone: Vec<bool> = params.names().iter().map(|n| n.starts_with("backbone.")).collect();
    let mut adam = AdamW::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut order: Vec<usize> = Vec::new();
    let mut metrics = Vec::with_capacity(opt.steps);

    for step in 1..=opt.steps {
        // All randomness is drawn here, on one thread, before the parallel
        // part of the step.
        let mut batch = Vec::with_capacity(opt.batch_size);
        for _ in 0..opt.batch_size {
            if order.is_empty() {
                order = (0..dataset.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            let idx = order.pop().unwrap();
            let flip = rng.gen_bool(cfg.flip_prob);
            batch.push((idx, flip, rng.gen::<u64>()));
        }
        let results: Vec<ImageResult> = batch
            .par_iter()
            .map(|&(idx, flip, sample_seed)| {
                let mut img = dataset.load_image(idx)?;
                let mut ann = dataset.annotation(idx);
                if flip {
                    img = img.flipped();
                    ann = ann.flipped();
                }
                image_step(&img, &ann.targets(), &cfg.model, &cfg.loss, &params, sample_seed)
            })
            .collect::<Result<_>>()?;

        let inv = 1.0 / results.len() as f64;
        let mut grads: Vec<Tensor<f32>> = params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        for r in &results {
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
        let mut sq = 0.0f64;
        for g in &mut grads {
            for v in g.data_mut() {
                *v = (*v as f64 * inv) as f32;
                sq += (*v as f64).powi(2);
            }
        }
        let norm = sq.sqrt();
        if opt.grad_clip > 0.0 && norm > opt.grad_clip {
            let s = (opt.grad_clip / norm) as f32;
            grads.iter_mut().flat_map(|g| g.data_mut().iter_mut()).for_each(|v| *v *= s);
        }
        let factor = if step > opt.drop_step() { 0.1 } else { 1.0 };
        let lrs: Vec<f64> = backbone
            .iter()
            .map(|&b| factor * if b { opt.lr_backbone } else { opt.lr_main })
            .collect();
        adam.step(&mut params, &grads, &lrs, opt);

        let mean = |f: fn(&ImageResult) -> f64| results.iter().map(f).sum::<f64>() * inv;
        let m = StepMetrics {
            step,
            loss: mean(|r| r.loss),
            class: mean(|r| r.class),
            l1: mean(|r| r.l1),
            giou: mean(|r| r.giou),
            grad_norm: norm,
            lr_main: factor * opt.lr_main,
        };
        let line = serde_json::to_string(&m).expect("metrics serialize");
        writeln!(log, "{line}").map_err(|e| Error::io("<metrics log>", e))?;
        metrics.push(m);
    }
    Ok(TrainOutcome { params, metrics })
}

/// Runs the model over every image of `dataset` and scores the top
/// detections of the last stage.
pub fn evaluate_dataset(params: &ParamStore<f32>, model: &ModelConfig, dataset: &Dataset) -> Result<ApReport> {
    check_classes(dataset, model)?;
    let dets = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let img = dataset.load_image(i)?;
            let (logits, boxes) = infer(&img, model, params, ForwardOptions::default())?;
            detections_from_outputs(&logits, &boxes, MAX_DETECTIONS)
        })
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<_> = (0..dataset.len()).map(|i| dataset.annotation(i)).collect();
    evaluate(&dets, &gts, model.num_classes)
}

/// Mean of the first and last `window` losses.
pub fn loss_endpoints(metrics: &[StepMetrics], window: usize) -> (f64, f64) {
    let w = window.min(metrics.len()).max(1);
    let avg = |s: &[StepMetrics]| s.iter().map(|m| m.loss).sum::<f64>() / s.len().max(1) as f64;
    (avg(&metrics[..w.min(metrics.len())]), avg(&metrics[metrics.len().saturating_sub(w)..]))
}
