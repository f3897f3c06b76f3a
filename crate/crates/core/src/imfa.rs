//! Staged detector: each stage is one encoder layer, one decoder layer and
//! prediction heads. From the second stage on, the previous stage's most
//! confident predictions guide sparse, scale-adaptive sampling of the
//! feature pyramid; the sampled tokens join the encoder input for that
//! stage only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{BoundParams, Initializer, ParamStore};
use crate::pyramid::{
    build_pyramid, grid_positions, patch_embed, point_positions_var, FeaturePyramid, Image, LevelProjection,
    BASE_STRIDE, STRIDES,
};
use crate::tensor::{lit, Real, Tape, Tensor, Var};
use crate::transformer::{
    decoder_layer, encoder_layer, encoder_layer_partial, prediction_heads, DecoderLayerParams, EncoderLayerParams,
    HeadParams, LayerNorm, Linear, Predictions, QuerySet,
};

/// Which pipeline wiring to build.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Stacked detection stages with iterative encoding and sampling.
    #[default]
    Imfa,
    /// All encoder layers over the coarsest level first, then all decoder
    /// layers against the final memory.
    Baseline,
}

/// Switches that remove one component each.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Iterative encoding without any multi-scale sampling.
    pub iter_enc_only: bool,
    /// Keypoints at random in-box positions instead of predicted ones.
    pub disable_rep_keypoints: bool,
    /// Uniform scale weights instead of query-predicted ones.
    pub disable_ada_scale: bool,
    /// Sampled features enter the encoder without the query-conditioned FFN.
    pub disable_dynamic_ffn: bool,
    /// Sampled tokens act only as keys/values inside the encoder layer.
    pub sampled_keys_only: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub arch: Architecture,
    /// Feature width.
    pub d: usize,
    pub heads: usize,
    pub num_stages: usize,
    pub num_queries: usize,
    pub sampling_ratio: f64,
    pub keypoints: usize,
    /// Number of pyramid levels sampled, finest first.
    pub scales: usize,
    pub num_classes: usize,
    /// Side length of the square input images.
    pub image_size: usize,
    #[serde(flatten)]
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Architecture::Imfa,
            d: 64,
            heads: 8,
            num_stages: 3,
            num_queries: 30,
            sampling_ratio: 0.2,
            keypoints: 8,
            scales: 4,
            num_classes: 3,
            image_size: 128,
            ablation: Ablation::default(),
        }
    }
}

/// `floor(n·r)` with a small allowance for round-off (`0.29·100` is
/// `28.999…` in binary).
pub fn regions_for(num_queries: usize, ratio: f64) -> usize {
    (num_queries as f64 * ratio + 1e-9).floor() as usize
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d == 0 || self.d % 4 != 0 {
            return bad(format!("d must be a positive multiple of 4, got {}", self.d));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("{} heads do not divide d = {}", self.heads, self.d));
        }
        if self.num_stages == 0 || self.num_queries == 0 || self.num_classes == 0 {
            return bad("stages, queries and classes must be positive".into());
        }
        if !(self.sampling_ratio > 0.0 && self.sampling_ratio <= 1.0) {
            return bad(format!("sampling ratio must lie in (0, 1], got {}", self.sampling_ratio));
        }
        if self.keypoints == 0 {
            return bad("keypoints per region must be positive".into());
        }
        if self.scales == 0 || self.scales > STRIDES.len() {
            return bad(format!("scales must be 1..={}, got {}", STRIDES.len(), self.scales));
        }
        if self.image_size == 0 || self.image_size % crate::pyramid::MAX_STRIDE != 0 {
            return bad(format!("image size {} is not a multiple of 32", self.image_size));
        }
        Ok(())
    }

    /// Whether any stage samples the pyramid.
    pub fn sampling_enabled(&self) -> bool {
        self.arch == Architecture::Imfa && !self.ablation.iter_enc_only && self.num_stages >= 2
    }

    /// Number of promising regions per stage, at least one.
    pub fn regions(&self) -> usize {
        regions_for(self.num_queries, self.sampling_ratio).max(1)
    }

    pub fn sampled_tokens(&self) -> usize {
        self.regions() * self.keypoints
    }

    /// Hidden width of the dynamic FFN.
    pub fn dynamic_hidden(&self) -> usize {
        (self.d / 4).max(1)
    }

    /// Tokens of the coarsest level for the configured image size.
    pub fn image_tokens(&self) -> usize {
        let side = self.image_size / crate::pyramid::MAX_STRIDE;
        side * side
    }

    /// Encoder input size of `stage`.
    pub fn encoder_tokens(&self, stage: usize) -> usize {
        if stage >= 1 && self.sampling_enabled() {
            self.image_tokens() + self.sampled_tokens()
        } else {
            self.image_tokens()
        }
    }
}

/// Declares every parameter the configuration uses. Parameters of disabled
/// components are not created.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let d = cfg.d;
    let mut init = Initializer::<T>::new(seed);
    let patch = BASE_STRIDE * BASE_STRIDE * Image::CHANNELS;
    Linear::declare(&mut init, "backbone.patch", patch, d)?;
    for level in 1..STRIDES.len() {
        Linear::declare(&mut init, &format!("backbone.level{level}"), d, d)?;
    }
    init.uniform("queries.content", vec![cfg.num_queries, d], 1.0)?;
    let mut refs = Vec::with_capacity(cfg.num_queries * 4);
    let logit = |p: f64| (p / (1.0 - p)).ln();
    for _ in 0..cfg.num_queries {
        let rng = init.rng();
        let (cx, cy) = (rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9));
        refs.extend([logit(cx), logit(cy), logit(0.2), logit(0.2)].map(lit::<T>));
    }
    init.tensor("queries.ref_logits", Tensor::new(vec![cfg.num_queries, 4], refs)?)?;
    for t in 0..cfg.num_stages {
        EncoderLayerParams::declare(&mut init, &format!("stage{t}.enc"), d)?;
        DecoderLayerParams::declare(&mut init, &format!("stage{t}.dec"), d)?;
        HeadParams::declare(&mut init, &format!("stage{t}.head"), d, cfg.num_classes)?;
        if t >= 1 && cfg.sampling_enabled() {
            SamplerParams::declare(&mut init, cfg, &format!("stage{t}.sampler"))?;
        }
    }
    Ok(init.finish())
}

/// Learned pieces of one stage's sampler; `None` for ablated components.
#[derive(Clone, Copy, Debug)]
pub struct SamplerParams<'t, T: Real> {
    /// Two-layer MLP from a query to `2M` keypoint logits.
    pub keypoints: Option<(Linear<'t, T>, Linear<'t, T>)>,
    /// One `d → S` head per keypoint index, stored side by side.
    pub scale: Option<Linear<'t, T>>,
    /// Query to dynamic FFN weights, and the norm after the residual.
    pub dynamic: Option<(Linear<'t, T>, LayerNorm<'t, T>)>,
}

impl<'t, T: Real> SamplerParams<'t, T> {
    pub fn declare(init: &mut Initializer<T>, cfg: &ModelConfig, prefix: &str) -> Result<()> {
        let (d, m) = (cfg.d, cfg.keypoints);
        if !cfg.ablation.disable_rep_keypoints {
            Linear::declare(init, &format!("{prefix}.kp1"), d, d)?;
            init.linear(&format!("{prefix}.kp2"), d, 2 * m, 0.1)?;
            // Spread the initial keypoints over the box rather than piling
            // them on its center.
            let spread = Tensor::from_fn(vec![2 * m], |_| lit::<T>(init.rng().gen_range(-1.5..1.5)));
            *init.store.get_mut(&format!("{prefix}.kp2.bias")).expect("declared") = spread;
        }
        if !cfg.ablation.disable_ada_scale {
            init.linear(&format!("{prefix}.scale"), d, m * cfg.scales, 0.1)?;
        }
        if !cfg.ablation.disable_dynamic_ffn {
            let h = cfg.dynamic_hidden();
            let out = 2 * d * h;
            let bound = 3f64.sqrt() / d as f64;
            init.uniform(format!("{prefix}.psi.weight"), vec![d, out], bound)?;
            init.uniform(format!("{prefix}.psi.bias"), vec![out], 3f64.sqrt() / (d as f64).sqrt())?;
            LayerNorm::declare(init, &format!("{prefix}.norm"), d)?;
        }
        Ok(())
    }

    pub fn bind(p: &BoundParams<'t, T>, cfg: &ModelConfig, prefix: &str) -> Result<Self> {
        let a = &cfg.ablation;
        Ok(SamplerParams {
            keypoints: if a.disable_rep_keypoints {
                None
            } else {
                Some((Linear::bind(p, &format!("{prefix}.kp1"))?, Linear::bind(p, &format!("{prefix}.kp2"))?))
            },
            scale: if a.disable_ada_scale {
                None
            } else {
                Some(Linear::bind(p, &format!("{prefix}.scale"))?)
            },
            dynamic: if a.disable_dynamic_ffn {
                None
            } else {
                Some((Linear::bind(p, &format!("{prefix}.psi"))?, LayerNorm::bind(p, &format!("{prefix}.norm"))?))
            },
        })
    }
}

/// Identity of a token fed to an encoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenSource {
    /// Row of the coarsest-level image token set.
    Image(usize),
    /// Sampled token `index` created by the sampler of `stage`.
    Sampled { stage: usize, index: usize },
}

/// Sampled multi-scale tokens of one stage.
#[derive(Clone, Debug)]
pub struct SampledTokenSet<'t, T: Real> {
    /// `[K·M × d]` features after the dynamic FFN.
    pub features: Var<'t, T>,
    /// `[K·M × 2]` normalized `(x, y)` keypoints.
    pub keypoints: Var<'t, T>,
    /// `[K·M × S]` per-scale weights.
    pub scale_weights: Var<'t, T>,
    /// `[K·M × d]` sine encodings of the keypoints.
    pub positions: Var<'t, T>,
    /// Owning query of each token.
    pub owner_query: Vec<usize>,
    /// `[K × 4]` boxes of the selected regions, `(cx, cy, w, h)`.
    pub region_boxes: Var<'t, T>,
    pub ids: Vec<TokenSource>,
}

impl<T: Real> SampledTokenSet<'_, T> {
    pub fn len(&self) -> usize {
        self.owner_query.len()
    }

    pub fn is_empty(&self) -> bool {
        self.owner_query.is_empty()
    }
}

/// Everything a stage hands to the next one, plus what it produced.
#[derive(Clone, Debug)]
pub struct StageState<'t, T: Real> {
    /// `[T_img × d]` encoded image tokens.
    pub image_tokens: Var<'t, T>,
    /// Query content and reference boxes for the next stage.
    pub queries: QuerySet<'t, T>,
    /// `None` before the first stage.
    pub predictions: Option<Predictions<'t, T>>,
    pub sampled: Option<SampledTokenSet<'t, T>>,
    /// Provenance of every encoder input token of this stage, in order.
    pub encoder_input: Vec<TokenSource>,
}

/// Confidence of each query: the largest class probability.
pub fn confidences<T: Real>(class_logits: &Tensor<T>) -> Vec<f64> {
    (0..class_logits.rows())
        .map(|i| {
            let best = class_logits
                .row(i)
                .iter()
                .map(|v| v.to_f64().unwrap_or(f64::NAN))
                .fold(f64::NEG_INFINITY, f64::max);
            1.0 / (1.0 + (-best).exp())
        })
        .collect()
}

/// Indices of the `k` most confident queries, most confident first; ties
/// go to the lower index.
pub fn select_promising<T: Real>(class_logits: &Tensor<T>, k: usize) -> Result<Vec<usize>> {
    let n = class_logits.rows();
    if k > n {
        return Err(Error::Config(format!("cannot select {k} regions from {n} queries")));
    }
    let conf = confidences(class_logits);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// Broadcasts a `[K×1]` column across `m` columns.
fn broadcast_col<'t, T: Real>(col: Var<'t, T>, m: usize) -> Result<Var<'t, T>> {
    let k = col.numel();
    col.tape().constant(Tensor::full(vec![k, m], T::one())).mul_col(col)
}

/// Keypoints inside each region box. `fractions` is `[K × 2M]`: the first
/// `M` columns position along x, the rest along y. Boxes are clamped to
/// the image first. Returns `[K·M × 2]` points, region-major.
pub fn place_keypoints<'t, T: Real>(fractions: Var<'t, T>, boxes: Var<'t, T>, m: usize) -> Result<Var<'t, T>> {
    let k = boxes.shape()[0];
    if fractions.shape() != [k, 2 * m] {
        return Err(Error::shape("place_keypoints", &fractions.shape(), &[k, 2 * m]));
    }
    let col = |i: usize| boxes.slice_cols(i, i + 1);
    let (cx, cy, w, h) = (col(0)?, col(1)?, col(2)?, col(3)?);
    let mut coords = Vec::with_capacity(2);
    for (axis, (center, size)) in [(cx, w), (cy, h)].into_iter().enumerate() {
        let half = size.scale(0.5);
        let lo = center.sub(half)?.clamp(0.0, 1.0);
        let hi = center.add(half)?.clamp(0.0, 1.0);
        let frac = fractions.slice_cols(axis * m, (axis + 1) * m)?;
        let (lo_b, hi_b) = (broadcast_col(lo, m)?, broadcast_col(hi, m)?);
        // Round-off may push lo + u·(hi − lo) a hair past hi; pin it.
        let along = lo_b.add(frac.mul_col(hi.sub(lo)?)?)?.minimum(hi_b)?.maximum(lo_b)?;
        coords.push(along.reshape(vec![k * m, 1])?);
    }
    Var::concat_cols(&coords)
}

/// Predicted keypoints: a two-layer MLP maps each query to `2M` logits
/// whose sigmoids are fractions of the region box.
pub fn predict_keypoints<'t, T: Real>(
    queries: Var<'t, T>,
    boxes: Var<'t, T>,
    mlp: &(Linear<'t, T>, Linear<'t, T>),
    m: usize,
) -> Result<Var<'t, T>> {
    let logits = mlp.1.forward(mlp.0.forward(queries)?.relu())?;
    place_keypoints(logits.sigmoid(), boxes, m)
}

/// Scale weights `[K·M × S]`: softmax over the `S` logits produced for
/// each keypoint index by its own linear head.
pub fn scale_weights<'t, T: Real>(queries: Var<'t, T>, head: &Linear<'t, T>, m: usize, s: usize) -> Result<Var<'t, T>> {
    let k = queries.shape()[0];
    head.forward(queries)?.reshape(vec![k * m, s])?.softmax(1)
}

/// Samples every level at `points` and mixes the samples with per-row
/// `weights` `[P × S]`. Returns the mixture and the per-level samples.
pub fn sample_scale_adaptive<'t, T: Real>(
    points: Var<'t, T>,
    weights: Var<'t, T>,
    levels: &[Var<'t, T>],
) -> Result<(Var<'t, T>, Vec<Var<'t, T>>)> {
    let p = points.shape()[0];
    if weights.shape() != [p, levels.len()] {
        return Err(Error::shape("sample_scale_adaptive", &weights.shape(), &[p, levels.len()]));
    }
    let mut samples = Vec::with_capacity(levels.len());
    let mut mix: Option<Var<'t, T>> = None;
    for (s, &grid) in levels.iter().enumerate() {
        let sample = Var::bilinear_sample(grid, points)?;
        let w = weights.slice_cols(s, s + 1)?;
        let term = sample.mul_col(w)?;
        mix = Some(match mix {
            None => term,
            Some(acc) => acc.add(term)?,
        });
        samples.push(sample);
    }
    Ok((mix.ok_or_else(|| Error::Config("no levels to sample".into()))?, samples))
}

/// Query-conditioned FFN: `ψ(Q_i)` supplies `W1 [d×h]` and `W2 [h×d]`, and
/// each of the `M` features of query `i` becomes `norm(F + relu(F·W1)·W2)`.
pub fn dynamic_ffn<'t, T: Real>(
    features: Var<'t, T>,
    queries: Var<'t, T>,
    psi: &Linear<'t, T>,
    norm: &LayerNorm<'t, T>,
    m: usize,
    hidden: usize,
) -> Result<Var<'t, T>> {
    let (k, d) = (queries.shape()[0], queries.shape()[1]);
    if features.shape() != [k * m, d] {
        return Err(Error::shape("dynamic_ffn", &features.shape(), &[k * m, d]));
    }
    let weights = psi.forward(queries)?;
    let dh = d * hidden;
    let mut rows = Vec::with_capacity(k);
    for i in 0..k {
        let wi = weights.slice_rows(i, i + 1)?;
        let w1 = wi.slice_cols(0, dh)?.reshape(vec![d, hidden])?;
        let w2 = wi.slice_cols(dh, 2 * dh)?.reshape(vec![hidden, d])?;
        let fi = features.slice_rows(i * m, (i + 1) * m)?;
        rows.push(fi.add(fi.matmul(w1)?.relu().matmul(w2)?)?);
    }
    let joined = if k == 1 { rows[0] } else { Var::concat_rows(&rows)? };
    norm.forward(joined)
}

/// Backbone output and the fixed inputs every stage shares.
pub struct Backbone<'t, T: Real> {
    pub pyramid: FeaturePyramid<'t, T>,
    /// `[T_img × d]` coarsest-level tokens.
    pub tokens: Var<'t, T>,
    /// `[T_img × d]` sine encodings of the coarsest-level cells.
    pub positions: Var<'t, T>,
}

pub fn run_backbone<'t, T: Real>(img: &Image, cfg: &ModelConfig, p: &BoundParams<'t, T>) -> Result<Backbone<'t, T>> {
    let patch = Linear::bind(p, "backbone.patch")?;
    let base = patch_embed(img, BASE_STRIDE, patch.weight, patch.bias)?;
    let projections = (1..STRIDES.len())
        .map(|l| {
            let lin = Linear::bind(p, &format!("backbone.level{l}"))?;
            Ok(LevelProjection {
                weight: lin.weight,
                bias: lin.bias,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pyramid = build_pyramid(base, &projections)?;
    let top = pyramid.coarsest();
    let (h, w) = (top.height(), top.width());
    let tokens = top.grid.reshape(vec![h * w, cfg.d])?;
    let positions = base.tape().constant(grid_positions(h, w, cfg.d)?);
    Ok(Backbone {
        pyramid,
        tokens,
        positions,
    })
}

/// Learned stage-0 queries with `sigmoid(ref_logits)` reference boxes.
pub fn initial_queries<'t, T: Real>(p: &BoundParams<'t, T>) -> Result<QuerySet<'t, T>> {
    QuerySet::new(p.get("queries.content")?, p.get("queries.ref_logits")?.sigmoid())
}

/// State before the first stage.
pub fn initial_state<'t, T: Real>(backbone: &Backbone<'t, T>, p: &BoundParams<'t, T>) -> Result<StageState<'t, T>> {
    let t_img = backbone.tokens.shape()[0];
    Ok(StageState {
        image_tokens: backbone.tokens,
        queries: initial_queries(p)?,
        predictions: None,
        sampled: None,
        encoder_input: (0..t_img).map(TokenSource::Image).collect(),
    })
}

/// Per-forward options that do not change parameters.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Seeds the random keypoints of the `disable_rep_keypoints` ablation.
    pub sample_seed: u64,
}

/// Builds the sampled token set of `stage` from the previous state.
pub fn build_sampled_tokens<'t, T: Real>(
    state: &StageState<'t, T>,
    backbone: &Backbone<'t, T>,
    cfg: &ModelConfig,
    sampler: &SamplerParams<'t, T>,
    stage: usize,
    opts: ForwardOptions,
) -> Result<SampledTokenSet<'t, T>> {
    let preds = state
        .predictions
        .as_ref()
        .ok_or_else(|| Error::Contract("sampling needs predictions from a previous stage".into()))?;
    let tape = backbone.tokens.tape();
    let (k, m, s) = (cfg.regions(), cfg.keypoints, cfg.scales);
    if backbone.pyramid.len() < s {
        return Err(Error::Config(format!(
            "{s} scales requested but the pyramid has {} levels",
            backbone.pyramid.len()
        )));
    }
    let chosen = select_promising(&preds.class_logits.value(), k)?;
    let q = state.queries.content.gather_rows(&chosen)?;
    let boxes = state.queries.boxes.gather_rows(&chosen)?;

    let keypoints = match &sampler.keypoints {
        Some(mlp) => predict_keypoints(q, boxes, mlp, m)?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.sample_seed ^ (stage as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let frac = Tensor::from_fn(vec![k, 2 * m], |_| lit::<T>(rng.gen_range(0.0..1.0)));
            place_keypoints(tape.constant(frac), boxes, m)?
        }
    };
    let weights = match &sampler.scale {
        Some(head) => scale_weights(q, head, m, s)?,
        None => tape.constant(Tensor::full(vec![k * m, s], lit::<T>(1.0 / s as f64))),
    };
    let levels: Vec<_> = backbone.pyramid.levels[..s].iter().map(|l| l.grid).collect();
    let (mixed, _) = sample_scale_adaptive(keypoints, weights, &levels)?;
    let features = match &sampler.dynamic {
        Some((psi, norm)) => dynamic_ffn(mixed, q, psi, norm, m, cfg.dynamic_hidden())?,
        None => mixed,
    };
    Ok(SampledTokenSet {
        features,
        positions: point_positions_var(keypoints, cfg.d)?,
        keypoints,
        scale_weights: weights,
        owner_query: chosen.iter().flat_map(|&i| std::iter::repeat(i).take(m)).collect(),
        region_boxes: boxes,
        ids: (0..k * m).map(|index| TokenSource::Sampled { stage, index }).collect(),
    })
}

/// One detection stage.
pub fn run_stage<'t, T: Real>(
    state: &StageState<'t, T>,
    backbone: &Backbone<'t, T>,
    cfg: &ModelConfig,
    p: &BoundParams<'t, T>,
    stage: usize,
    opts: ForwardOptions,
) -> Result<StageState<'t, T>> {
    let enc = EncoderLayerParams::bind(p, &format!("stage{stage}.enc"))?;
    let dec = DecoderLayerParams::bind(p, &format!("stage{stage}.dec"))?;
    let head = HeadParams::bind(p, &format!("stage{stage}.head"))?;
    let prev = state.image_tokens;
    let t_img = prev.shape()[0];

    let sampled = if stage >= 1 && cfg.sampling_enabled() {
        let sampler = SamplerParams::bind(p, cfg, &format!("stage{stage}.sampler"))?;
        Some(build_sampled_tokens(state, backbone, cfg, &sampler, stage, opts)?)
    } else {
        None
    };

    let mut encoder_input: Vec<TokenSource> = (0..t_img).map(TokenSource::Image).collect();
    let (tokens, pos) = match &sampled {
        Some(set) => {
            encoder_input.extend(set.ids.iter().copied());
            (
                Var::concat_rows(&[prev, set.features])?,
                Var::concat_rows(&[backbone.positions, set.positions])?,
            )
        }
        None => (prev, backbone.positions),
    };
    let encoded = if sampled.is_some() && cfg.ablation.sampled_keys_only {
        encoder_layer_partial(tokens, pos, &enc, cfg.heads, t_img)?
    } else {
        encoder_layer(tokens, pos, &enc, cfg.heads)?
    };
    let (image_part, memory) = match &sampled {
        Some(_) => {
            let rows = tokens.shape()[0];
            let mut image_part = encoded.slice_rows(0, t_img)?;
            if stage >= 1 {
                image_part = image_part.add(prev)?;
            }
            let memory = Var::concat_rows(&[image_part, encoded.slice_rows(t_img, rows)?])?;
            (image_part, memory)
        }
        None => {
            let image_part = if stage >= 1 { encoded.add(prev)? } else { encoded };
            (image_part, image_part)
        }
    };
    let content = decoder_layer(&state.queries, memory, pos, &dec, cfg.heads)?;
    let predictions = prediction_heads(content, state.queries.boxes, &head)?;
    Ok(StageState {
        image_tokens: image_part,
        queries: QuerySet::new(content, predictions.boxes)?,
        predictions: Some(predictions),
        sampled,
        encoder_input,
    })
}

/// All stages of one forward pass.
pub struct PipelineOutput<'t, T: Real> {
    pub stages: Vec<StageState<'t, T>>,
}

impl<'t, T: Real> PipelineOutput<'t, T> {
    pub fn predictions(&self) -> Vec<Predictions<'t, T>> {
        self.stages.iter().filter_map(|s| s.predictions).collect()
    }

    pub fn last(&self) -> Predictions<'t, T> {
        self.stages
            .last()
            .and_then(|s| s.predictions)
            .expect("pipeline has at least one stage")
    }
}

/// Backbone, pyramid and every stage for one image.
pub fn run_pipeline<'t, T: Real>(
    img: &Image,
    cfg: &ModelConfig,
    p: &BoundParams<'t, T>,
    opts: ForwardOptions,
) -> Result<PipelineOutput<'t, T>> {
    cfg.validate()?;
    if img.height() != cfg.image_size || img.width() != cfg.image_size {
        return Err(Error::Config(format!(
            "model expects {0}×{0} images, got {1}×{2}",
            cfg.image_size,
            img.height(),
            img.width()
        )));
    }
    let backbone = run_backbone(img, cfg, p)?;
    match cfg.arch {
        Architecture::Imfa => {
            let mut state = initial_state(&backbone, p)?;
            let mut stages = Vec::with_capacity(cfg.num_stages);
            for t in 0..cfg.num_stages {
                state = run_stage(&state, &backbone, cfg, p, t, opts)?;
                stages.push(state.clone());
            }
            Ok(PipelineOutput { stages })
        }
        Architecture::Baseline => run_baseline(&backbone, cfg, p),
    }
}

/// Stacked encoder over the coarsest level, then one decoder layer and head
/// per stage against the final memory.
fn run_baseline<'t, T: Real>(
    backbone: &Backbone<'t, T>,
    cfg: &ModelConfig,
    p: &BoundParams<'t, T>,
) -> Result<PipelineOutput<'t, T>> {
    let t_img = backbone.tokens.shape()[0];
    let mut memory = backbone.tokens;
    for t in 0..cfg.num_stages {
        let enc = EncoderLayerParams::bind(p, &format!("stage{t}.enc"))?;
        memory = encoder_layer(memory, backbone.positions, &enc, cfg.heads)?;
    }
    let mut queries = initial_queries(p)?;
    let mut stages = Vec::with_capacity(cfg.num_stages);
    for t in 0..cfg.num_stages {
        let dec = DecoderLayerParams::bind(p, &format!("stage{t}.dec"))?;
        let head = HeadParams::bind(p, &format!("stage{t}.head"))?;
        let content = decoder_layer(&queries, memory, backbone.positions, &dec, cfg.heads)?;
        let predictions = prediction_heads(content, queries.boxes, &head)?;
        queries = QuerySet::new(content, predictions.boxes)?;
        stages.push(StageState {
            image_tokens: memory,
            queries,
            predictions: Some(predictions),
            sampled: None,
            encoder_input: if t == 0 {
                (0..t_img).map(TokenSource::Image).collect()
            } else {
                Vec::new()
            },
        });
    }
    Ok(PipelineOutput { stages })
}

/// Plain iterative encoding written out directly: per stage, encoder layer
/// over the image tokens, skip from the previous stage, decoder, heads.
/// Serves as the reference the sampling-disabled pipeline must reproduce.
pub fn run_iterative_reference<'t, T: Real>(
    img: &Image,
    cfg: &ModelConfig,
    p: &BoundParams<'t, T>,
) -> Result<Vec<Predictions<'t, T>>> {
    let backbone = run_backbone(img, cfg, p)?;
    let mut tokens = backbone.tokens;
    let mut queries = initial_queries(p)?;
    let mut out = Vec::with_capacity(cfg.num_stages);
    for t in 0..cfg.num_stages {
        let enc = EncoderLayerParams::bind(p, &format!("stage{t}.enc"))?;
        let encoded = encoder_layer(tokens, backbone.positions, &enc, cfg.heads)?;
        tokens = if t == 0 { encoded } else { encoded.add(tokens)? };
        let dec = DecoderLayerParams::bind(p, &format!("stage{t}.dec"))?;
        let head = HeadParams::bind(p, &format!("stage{t}.head"))?;
        let content = decoder_layer(&queries, tokens, backbone.positions, &dec, cfg.heads)?;
        let preds = prediction_heads(content, queries.boxes, &head)?;
        queries = QuerySet::new(content, preds.boxes)?;
        out.push(preds);
    }
    Ok(out)
}

/// Runs a forward pass on a fresh tape and returns the last stage's class
/// logits and boxes as plain tensors.
pub fn infer<T: Real>(
    img: &Image,
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    opts: ForwardOptions,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let out = run_pipeline(img, cfg, &bound, opts)?;
    let last = out.last();
    let logits = last.class_logits.to_tensor();
    let boxes = last.boxes.to_tensor();
    Ok((logits, boxes))
}
