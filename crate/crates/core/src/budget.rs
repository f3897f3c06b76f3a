//! Closed-form encoder token counts and a quadratic attention-cost proxy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imfa::regions_for;
use crate::pyramid::MAX_STRIDE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetQuery {
    pub height: usize,
    pub width: usize,
    pub d: usize,
    /// Strides of the dense multi-scale arm.
    pub dense_strides: Vec<usize>,
    pub num_queries: usize,
    pub sampling_ratio: f64,
    pub keypoints: usize,
}

impl Default for BudgetQuery {
    fn default() -> Self {
        BudgetQuery {
            height: 256,
            width: 256,
            d: 64,
            dense_strides: vec![8, 16, 32],
            num_queries: 30,
            sampling_ratio: 0.2,
            keypoints: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmBudget {
    pub tokens: usize,
    /// `tokens²·d`.
    pub cost: f64,
    pub token_ratio: f64,
    pub cost_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub query: BudgetQuery,
    /// Promising regions used by the sparse arm.
    pub regions: usize,
    pub single_scale: ArmBudget,
    pub dense: ArmBudget,
    pub imfa: ArmBudget,
}

fn arm(tokens: usize, d: usize, base: usize) -> ArmBudget {
    let cost = (tokens as f64).powi(2) * d as f64;
    let base_cost = (base as f64).powi(2) * d as f64;
    ArmBudget {
        tokens,
        cost,
        token_ratio: tokens as f64 / base as f64,
        cost_ratio: cost / base_cost,
    }
}

/// Token counts for single-scale (stride 32), dense multi-scale over
/// `dense_strides`, and the sparse arm (single-scale plus `K·M` sampled
/// tokens with `K = ⌊N·r⌋`). Unlike the model, which always keeps at least
/// one region, the budget uses the bare floor so that `r → 0` gives 1×.
pub fn budget(q: &BudgetQuery) -> Result<BudgetReport> {
    if q.height == 0 || q.width == 0 || q.height % MAX_STRIDE != 0 || q.width % MAX_STRIDE != 0 {
        return Err(Error::Config(format!(
            "image sides must be positive multiples of {MAX_STRIDE}, got {}×{}",
            q.height, q.width
        )));
    }
    if q.dense_strides.is_empty() || q.dense_strides.iter().any(|&s| s == 0 || q.height % s != 0 || q.width % s != 0) {
        return Err(Error::Config(format!("strides {:?} must be non-empty and divide the image", q.dense_strides)));
    }
    if !(0.0..=1.0).contains(&q.sampling_ratio) || q.d == 0 {
        return Err(Error::Config(format!("need r in [0, 1] and d > 0, got r={} d={}", q.sampling_ratio, q.d)));
    }
    let single = (q.height / MAX_STRIDE) * (q.width / MAX_STRIDE);
    let dense: usize = q.dense_strides.iter().map(|s| (q.height / s) * (q.width / s)).sum();
    let regions = regions_for(q.num_queries, q.sampling_ratio);
    Ok(BudgetReport {
        query: q.clone(),
        regions,
        single_scale: arm(single, q.d, single),
        dense: arm(dense, q.d, single),
        imfa: arm(single + regions * q.keypoints, q.d, single),
    })
}
