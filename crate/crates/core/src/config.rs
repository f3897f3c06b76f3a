//! Run configuration shared by training, evaluation and the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SceneOptions;
use crate::error::{Error, Result};
use crate::imfa::ModelConfig;
use crate::matching::LossWeights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr_backbone: f64,
    pub lr_main: f64,
    pub weight_decay: f64,
    pub steps: usize,
    /// Step at which both learning rates drop tenfold. Defaults to 80% of
    /// `steps`.
    pub lr_drop_step: Option<usize>,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr_backbone: 2e-4,
            lr_main: 1e-3,
            weight_decay: 1e-4,
            steps: 2000,
            lr_drop_step: None,
            batch_size: 8,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn drop_step(&self) -> usize {
        self.lr_drop_step.unwrap_or(self.steps * 4 / 5)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr_backbone, self.lr_main, self.eps];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("learning rates and eps must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip >= 0.0) {
            return Err(Error::Config("weight decay and grad clip must be non-negative".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a run needs. JSON field names match the command-line flags
/// with `-` replaced by `_`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub loss: LossWeights,
    pub scenes: SceneOptions,
    /// Training set directory.
    pub dataset: Option<PathBuf>,
    /// Held-out set used by `eval` and at the end of `train`.
    pub eval_dataset: Option<PathBuf>,
    pub seed: u64,
    /// Compute precision of training and inference; only `f32` trains.
    pub precision: Precision,
    /// Worker threads; `None` uses `IMFA_THREADS` or the machine default.
    pub threads: Option<usize>,
    /// Left-right flip augmentation probability.
    pub flip_prob: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            loss: LossWeights::default(),
            scenes: SceneOptions::default(),
            dataset: None,
            eval_dataset: None,
            seed: 0,
            precision: Precision::F32,
            threads: None,
            flip_prob: 0.5,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.scenes.validate()?;
        if self.scenes.size != self.model.image_size {
            return Err(Error::Config(format!(
                "scene size {} differs from model image size {}",
                self.scenes.size, self.model.image_size
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip probability {} outside [0, 1]", self.flip_prob)));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Overlays the keys present in `patch` (a JSON object, possibly
    /// nested) onto this config.
    pub fn merge_json(&self, patch: &serde_json::Value) -> Result<Self> {
        let mut base = serde_json::to_value(self).expect("config serializes");
        merge(&mut base, patch);
        serde_json::from_value(base).map_err(|e| Error::Config(format!("bad config override: {e}")))
    }
}

fn merge(base: &mut serde_json::Value, patch: &serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) if v.is_object() && slot.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}
