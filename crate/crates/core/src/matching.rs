//! Bipartite matching between predictions and ground truth, and the set
//! loss applied to every stage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{lit, BackCtx, Real, Tensor, Var};
use crate::transformer::Predictions;

/// Ground-truth objects of one image: normalized `(cx, cy, w, h)` boxes and
/// class ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Targets {
    pub boxes: Vec<[f64; 4]>,
    pub classes: Vec<usize>,
}

impl Targets {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// `(prediction, ground truth)` pairs sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    /// Predictions left without a ground-truth partner, ascending.
    pub unmatched: Vec<usize>,
    /// Sum of the matched costs, accumulated in pair order.
    pub total_cost: f64,
}

/// Minimum-cost assignment on an `n×m` row-major matrix with `n ≤ m`.
/// Returns the column of each row and dual potentials `u` (rows), `v`
/// (columns) with `u_i + v_j ≤ c_ij`, `v ≤ 0`, and `v_j = 0` on unmatched
/// columns.
fn solve_rows(cost: &[f64], n: usize, m: usize) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let a = |i: usize, j: usize| cost[(i - 1) * m + (j - 1)];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=m {
        if owner[j] != 0 {
            assign[owner[j] - 1] = j - 1;
        }
    }
    (assign, u[1..].to_vec(), v[1..].to_vec())
}

/// Tight-edge graph of an optimal dual: the optimal assignments are exactly
/// the matchings on tight edges that cover every row and every column with
/// a negative potential.
struct Equality {
    n: usize,
    m: usize,
    tight: Vec<bool>,
    must_col: Vec<bool>,
}

impl Equality {
    fn edge(&self, i: usize, j: usize) -> bool {
        self.tight[i * self.m + j]
    }

    /// Augmenting-path search from `start` over free rows/cols.
    #[allow(clippy::too_many_arguments)]
    fn augment(
        &self,
        row: usize,
        row_ok: &[bool],
        col_ok: &[bool],
        col_owner: &mut [Option<usize>],
        seen: &mut [bool],
    ) -> bool {
        for j in 0..self.m {
            if !col_ok[j] || seen[j] || !self.edge(row, j) {
                continue;
            }
            seen[j] = true;
            let free = match col_owner[j] {
                None => true,
                Some(r) => row_ok[r] && self.augment(r, row_ok, col_ok, col_owner, seen),
            };
            if free {
                col_owner[j] = Some(row);
                return true;
            }
        }
        false
    }

    fn augment_from_col(
        &self,
        col: usize,
        row_ok: &[bool],
        col_ok: &[bool],
        row_owner: &mut [Option<usize>],
        seen: &mut [bool],
    ) -> bool {
        for i in 0..self.n {
            if !row_ok[i] || seen[i] || !self.edge(i, col) {
                continue;
            }
            seen[i] = true;
            let free = match row_owner[i] {
                None => true,
                Some(c) => col_ok[c] && self.augment_from_col(c, row_ok, col_ok, row_owner, seen),
            };
            if free {
                row_owner[i] = Some(col);
                return true;
            }
        }
        false
    }

    /// Whether the free rows and free must-columns can all be covered by
    /// one tight matching. A matching covering each side separately
    /// suffices (Mendelsohn–Dulmage).
    fn feasible(&self, row_ok: &[bool], col_ok: &[bool]) -> bool {
        let mut col_owner = vec![None; self.m];
        for i in 0..self.n {
            if row_ok[i] {
                let mut seen = vec![false; self.m];
                if !self.augment(i, row_ok, col_ok, &mut col_owner, &mut seen) {
                    return false;
                }
            }
        }
        let mut row_owner = vec![None; self.n];
        for j in 0..self.m {
            if col_ok[j] && self.must_col[j] {
                let mut seen = vec![false; self.n];
                if !self.augment_from_col(j, row_ok, col_ok, &mut row_owner, &mut seen) {
                    return false;
                }
            }
        }
        true
    }
}

/// Minimum-cost matching of `n` predictions to `g` ground-truth objects.
/// `cost` is `n×g` row-major. Among optimal matchings the lexicographically
/// smallest pair list is returned.
pub fn hungarian_match(cost: &[f64], n: usize, g: usize) -> Result<MatchResult> {
    if cost.len() != n * g {
        return Err(Error::Dimension(format!("cost matrix {n}×{g} needs {} entries, got {}", n * g, cost.len())));
    }
    if let Some(bad) = cost.iter().position(|c| !c.is_finite()) {
        return Err(Error::Numeric(format!("non-finite matching cost at ({}, {})", bad / g.max(1), bad % g.max(1))));
    }
    if n == 0 || g == 0 {
        return Ok(MatchResult {
            pairs: Vec::new(),
            unmatched: (0..n).collect(),
            total_cost: 0.0,
        });
    }
    // Rows are the smaller side.
    let preds_are_rows = n <= g;
    let (rows, cols) = if preds_are_rows { (n, g) } else { (g, n) };
    let oriented: Vec<f64> = if preds_are_rows {
        cost.to_vec()
    } else {
        (0..rows * cols).map(|k| cost[(k % cols) * g + k / cols]).collect()
    };
    let (assign, u, v) = solve_rows(&oriented, rows, cols);
    let scale = oriented.iter().fold(0.0f64, |a, c| a.max(c.abs()));
    let eps = 1e-9 * (1.0 + scale);
    let tight: Vec<bool> = (0..rows * cols)
        .map(|k| oriented[k] - u[k / cols] - v[k % cols] <= eps)
        .collect();
    let eq = Equality {
        n: rows,
        m: cols,
        tight,
        must_col: v.iter().map(|&x| x < -eps).collect(),
    };

    let to_pairs = |row_col: &[(usize, usize)]| -> Vec<(usize, usize)> {
        let mut pairs: Vec<(usize, usize)> = row_col
            .iter()
            .map(|&(r, c)| if preds_are_rows { (r, c) } else { (c, r) })
            .collect();
        pairs.sort_unstable();
        pairs
    };

    let pairs = if eq.tight.iter().filter(|&&t| t).count() == rows {
        // Only the solver's own edges are tight: the optimum is unique.
        to_pairs(&assign.iter().enumerate().map(|(r, &c)| (r, c)).collect::<Vec<_>>())
    } else {
        let mut row_ok = vec![true; rows];
        let mut col_ok = vec![true; cols];
        let mut chosen = Vec::with_capacity(rows);
        for p in 0..n {
            // Try partners in ascending ground-truth order.
            let mut placed = false;
            for gt in 0..g {
                let (r, c) = if preds_are_rows { (p, gt) } else { (gt, p) };
                if !row_ok[r] || !col_ok[c] || !eq.edge(r, c) {
                    continue;
                }
                row_ok[r] = false;
                col_ok[c] = false;
                if eq.feasible(&row_ok, &col_ok) {
                    chosen.push((r, c));
                    placed = true;
                    break;
                }
                row_ok[r] = true;
                col_ok[c] = true;
            }
            if !placed && !preds_are_rows {
                col_ok[p] = false;
            }
        }
        debug_assert_eq!(chosen.len(), rows);
        to_pairs(&chosen)
    };
    let total_cost = pairs.iter().map(|&(p, gt)| cost[p * g + gt]).sum();
    let matched: Vec<bool> = {
        let mut m = vec![false; n];
        pairs.iter().for_each(|&(p, _)| m[p] = true);
        m
    };
    Ok(MatchResult {
        unmatched: (0..n).filter(|&p| !matched[p]).collect(),
        pairs,
        total_cost,
    })
}

/// Weights of the matching cost and the loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            class: 2.0,
            l1: 5.0,
            giou: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

fn corners(b: &[f64; 4]) -> [f64; 4] {
    [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0]
}

/// Intersection over union of two `(cx, cy, w, h)` boxes.
pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let (a, b) = (corners(a), corners(b));
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Generalized IoU of two `(cx, cy, w, h)` boxes, in `(-1, 1]`.
pub fn giou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let (ca, cb) = (corners(a), corners(b));
    let iw = (ca[2].min(cb[2]) - ca[0].max(cb[0])).max(0.0);
    let ih = (ca[3].min(cb[3]) - ca[1].max(cb[1])).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    let hull = (ca[2].max(cb[2]) - ca[0].min(cb[0])) * (ca[3].max(cb[3]) - ca[1].min(cb[1]));
    inter / union - (hull - union) / hull
}

fn log_sigmoid(x: f64) -> f64 {
    -((-x.abs()).exp().ln_1p() + (-x).max(0.0))
}

/// Focal class cost of predicting class `c` from `logit`: the positive
/// focal term minus the negative one.
fn focal_class_cost(logit: f64, w: &LossWeights) -> f64 {
    let p = 1.0 / (1.0 + (-logit).exp());
    let pos = w.focal_alpha * (1.0 - p).powf(w.focal_gamma) * -log_sigmoid(logit);
    let neg = (1.0 - w.focal_alpha) * p.powf(w.focal_gamma) * -log_sigmoid(-logit);
    pos - neg
}

fn check_targets(t: &Targets, classes: usize) -> Result<()> {
    if t.boxes.len() != t.classes.len() {
        return Err(Error::Data(format!("{} boxes but {} classes", t.boxes.len(), t.classes.len())));
    }
    for (i, (b, &c)) in t.boxes.iter().zip(&t.classes).enumerate() {
        if !(b[2] > 0.0 && b[3] > 0.0) || b.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("ground-truth box {i} is degenerate: {b:?}")));
        }
        if c >= classes {
            return Err(Error::Config(format!("ground-truth class {c} outside 0..{classes}")));
        }
    }
    Ok(())
}

/// `n×g` matching cost: weighted focal class cost, L1 box distance and
/// `1 − GIoU`.
pub fn match_cost(logits: &Tensor<f64>, boxes: &Tensor<f64>, targets: &Targets, w: &LossWeights) -> Result<Vec<f64>> {
    let n = logits.rows();
    let classes = logits.last_dim();
    check_targets(targets, classes)?;
    if boxes.shape() != [n, 4] {
        return Err(Error::shape("match_cost", boxes.shape(), &[n, 4]));
    }
    let g = targets.len();
    let mut cost = Vec::with_capacity(n * g);
    for i in 0..n {
        let pb: [f64; 4] = boxes.row(i).try_into().expect("four columns");
        for (gb, &c) in targets.boxes.iter().zip(&targets.classes) {
            let l1: f64 = pb.iter().zip(gb).map(|(a, b)| (a - b).abs()).sum();
            cost.push(w.class * focal_class_cost(logits.row(i)[c], w) + w.l1 * l1 + w.giou * (1.0 - giou(&pb, gb)));
        }
    }
    Ok(cost)
}

/// Elementwise sigmoid focal loss against 0/1 targets, summed.
pub fn focal_loss<'t, T: Real>(logits: Var<'t, T>, targets: &Tensor<T>, alpha: f64, gamma: f64) -> Result<Var<'t, T>> {
    let targets = targets.clone();
    let tgt = targets.clone();
    let per_elem = logits.tape().record(
        &[logits],
        move |v| {
            if v[0].shape() != targets.shape() {
                return Err(Error::shape("focal_loss", v[0].shape(), targets.shape()));
            }
            let data = v[0]
                .data()
                .iter()
                .zip(targets.data())
                .map(|(&x, &t)| {
                    let x = x.to_f64().unwrap_or(f64::NAN);
                    let (p, q) = (1.0 / (1.0 + (-x).exp()), 1.0 / (1.0 + x.exp()));
                    let l = if t > T::zero() {
                        alpha * q.powf(gamma) * -log_sigmoid(x)
                    } else {
                        (1.0 - alpha) * p.powf(gamma) * -log_sigmoid(-x)
                    };
                    lit::<T>(l)
                })
                .collect();
            Tensor::new(v[0].shape(), data)
        },
        move |ctx: &BackCtx<'_, T>| {
            let g = ctx
                .inputs[0]
                .data()
                .iter()
                .zip(tgt.data())
                .zip(ctx.grad)
                .map(|((&x, &t), &up)| {
                    let x = x.to_f64().unwrap_or(f64::NAN);
                    let (p, q) = (1.0 / (1.0 + (-x).exp()), 1.0 / (1.0 + x.exp()));
                    let d = if t > T::zero() {
                        alpha * q.powf(gamma) * (gamma * p * log_sigmoid(x) - q)
                    } else {
                        (1.0 - alpha) * p.powf(gamma) * (p - gamma * q * log_sigmoid(-x))
                    };
                    up * lit::<T>(d)
                })
                .collect();
            vec![Some(g)]
        },
    )?;
    Ok(per_elem.sum())
}

/// Per-row GIoU of `[n×4]` predicted boxes against `[n×4]` targets.
pub fn giou_rows<'t, T: Real>(pred: Var<'t, T>, target: Var<'t, T>) -> Result<Var<'t, T>> {
    let col = |b: Var<'t, T>, i: usize| b.slice_cols(i, i + 1);
    let edges = |b: Var<'t, T>| -> Result<[Var<'t, T>; 4]> {
        let (cx, cy, w, h) = (col(b, 0)?, col(b, 1)?, col(b, 2)?, col(b, 3)?);
        let (hw, hh) = (w.scale(0.5), h.scale(0.5));
        Ok([cx.sub(hw)?, cy.sub(hh)?, cx.add(hw)?, cy.add(hh)?])
    };
    let [px0, py0, px1, py1] = edges(pred)?;
    let [tx0, ty0, tx1, ty1] = edges(target)?;
    let iw = px1.minimum(tx1)?.sub(px0.maximum(tx0)?)?.relu();
    let ih = py1.minimum(ty1)?.sub(py0.maximum(ty0)?)?.relu();
    let inter = iw.mul(ih)?;
    let area_p = col(pred, 2)?.mul(col(pred, 3)?)?;
    let area_t = col(target, 2)?.mul(col(target, 3)?)?;
    let union = area_p.add(area_t)?.sub(inter)?;
    let hull_w = px1.maximum(tx1)?.sub(px0.minimum(tx0)?)?;
    let hull_h = py1.maximum(ty1)?.sub(py0.minimum(ty0)?)?;
    let hull = hull_w.mul(hull_h)?;
    inter.div(union)?.sub(hull.sub(union)?.div(hull)?)
}

/// Loss of one stage and its unweighted terms.
#[derive(Clone, Copy, Debug)]
pub struct StageLoss<'t, T: Real> {
    pub total: Var<'t, T>,
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

/// Focal loss over all predictions (matched ones target their object's
/// class, the rest target nothing) plus L1 and `1 − GIoU` over matched
/// boxes, all divided by `max(#objects, 1)`.
pub fn stage_loss<'t, T: Real>(
    pred: &Predictions<'t, T>,
    targets: &Targets,
    matching: &MatchResult,
    w: &LossWeights,
) -> Result<StageLoss<'t, T>> {
    let logits = pred.class_logits;
    let (n, classes) = (logits.shape()[0], logits.shape()[1]);
    let tape = logits.tape();
    let norm = 1.0 / targets.len().max(1) as f64;
    let mut onehot = Tensor::<T>::zeros(vec![n, classes]);
    for &(p, gt) in &matching.pairs {
        onehot.data_mut()[p * classes + targets.classes[gt]] = T::one();
    }
    let class_term = focal_loss(logits, &onehot, w.focal_alpha, w.focal_gamma)?.scale(norm);
    let mut total = class_term.scale(w.class);
    let (mut l1v, mut giouv) = (0.0, 0.0);
    if !matching.pairs.is_empty() {
        let idx: Vec<usize> = matching.pairs.iter().map(|&(p, _)| p).collect();
        let gt: Vec<T> = matching
            .pairs
            .iter()
            .flat_map(|&(_, g)| targets.boxes[g].map(lit::<T>))
            .collect();
        let pb = pred.boxes.gather_rows(&idx)?;
        let gb = tape.constant(Tensor::new(vec![idx.len(), 4], gt)?);
        let l1 = pb.sub(gb)?.abs().sum().scale(norm);
        let giou_term = giou_rows(pb, gb)?.neg().add_scalar(1.0).sum().scale(norm);
        l1v = l1.item().to_f64().unwrap_or(f64::NAN);
        giouv = giou_term.item().to_f64().unwrap_or(f64::NAN);
        total = total.add(l1.scale(w.l1))?.add(giou_term.scale(w.giou))?;
    }
    Ok(StageLoss {
        total,
        class: class_term.item().to_f64().unwrap_or(f64::NAN),
        l1: l1v,
        giou: giouv,
    })
}

/// Matches predictions of one stage against `targets`.
pub fn match_stage<T: Real>(pred: &Predictions<'_, T>, targets: &Targets, w: &LossWeights) -> Result<MatchResult> {
    let logits = pred.class_logits.value().cast::<f64>();
    let boxes = pred.boxes.value().cast::<f64>();
    let cost = match_cost(&logits, &boxes, targets, w)?;
    hungarian_match(&cost, logits.rows(), targets.len())
}

/// Sum over stages of independently matched stage losses.
pub struct SupervisionLoss<'t, T: Real> {
    pub total: Var<'t, T>,
    pub stages: Vec<StageLoss<'t, T>>,
}

pub fn deep_supervision<'t, T: Real>(
    stages: &[Predictions<'t, T>],
    targets: &Targets,
    w: &LossWeights,
) -> Result<SupervisionLoss<'t, T>> {
    let mut losses = Vec::with_capacity(stages.len());
    let mut total: Option<Var<'t, T>> = None;
    for pred in stages {
        let matching = match_stage(pred, targets, w)?;
        let loss = stage_loss(pred, targets, &matching, w)?;
        total = Some(match total {
            None => loss.total,
            Some(acc) => acc.add(loss.total)?,
        });
        losses.push(loss);
    }
    Ok(SupervisionLoss {
        total: total.ok_or_else(|| Error::Contract("deep supervision needs at least one stage".into()))?,
        stages: losses,
    })
}

#[cfg(test)]
mod tests;
