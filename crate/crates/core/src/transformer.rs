//! Attention, pre-norm encoder/decoder layers, and prediction heads.

use crate::error::{Error, Result};
use crate::params::{BoundParams, Initializer};
use crate::pyramid::point_positions_var;
use crate::tensor::{Real, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// Prior probability the class bias is initialized to, so that the focal
/// loss starts from a mostly-background guess.
const CLASS_PRIOR: f64 = 0.01;

#[derive(Clone, Copy, Debug)]
pub struct Linear<'t, T: Real> {
    pub weight: Var<'t, T>,
    pub bias: Var<'t, T>,
}

impl<'t, T: Real> Linear<'t, T> {
    pub fn declare(init: &mut Initializer<T>, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        init.linear(prefix, fan_in, fan_out, 1.0)
    }

    pub fn bind(p: &BoundParams<'t, T>, prefix: &str) -> Result<Self> {
        Ok(Linear {
            weight: p.get(&format!("{prefix}.weight"))?,
            bias: p.get(&format!("{prefix}.bias"))?,
        })
    }

    pub fn forward(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(self.weight)?.add_bias(self.bias)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm<'t, T: Real> {
    pub gain: Var<'t, T>,
    pub bias: Var<'t, T>,
}

impl<'t, T: Real> LayerNorm<'t, T> {
    pub fn declare(init: &mut Initializer<T>, prefix: &str, d: usize) -> Result<()> {
        init.layer_norm(prefix, d)
    }

    pub fn bind(p: &BoundParams<'t, T>, prefix: &str) -> Result<Self> {
        Ok(LayerNorm {
            gain: p.get(&format!("{prefix}.gain"))?,
            bias: p.get(&format!("{prefix}.bias"))?,
        })
    }

    pub fn forward(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(self.gain, self.bias, LN_EPS)
    }
}

/// Query/key/value/output projections; heads are column blocks of each.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams<'t, T: Real> {
    pub q: Linear<'t, T>,
    pub k: Linear<'t, T>,
    pub v: Linear<'t, T>,
    pub o: Linear<'t, T>,
}

impl<'t, T: Real> AttentionParams<'t, T> {
    pub fn declare(init: &mut Initializer<T>, prefix: &str, d: usize) -> Result<()> {
        for part in ["q", "k", "v", "o"] {
            Linear::declare(init, &format!("{prefix}.{part}"), d, d)?;
        }
        Ok(())
    }

    pub fn bind(p: &BoundParams<'t, T>, prefix: &str) -> Result<Self> {
        Ok(AttentionParams {
            q: Linear::bind(p, &format!("{prefix}.q"))?,
            k: Linear::bind(p, &format!("{prefix}.k"))?,
            v: Linear::bind(p, &format!("{prefix}.v"))?,
            o: Linear::bind(p, &format!("{prefix}.o"))?,
        })
    }
}

/// Multi-head scaled dot-product attention. Returns the `[A×d]` output and
/// the `[A×B]` attention weights of each head.
pub fn mha_with_weights<'t, T: Real>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    p: &AttentionParams<'t, T>,
    heads: usize,
) -> Result<(Var<'t, T>, Vec<Var<'t, T>>)> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || ks != vs || qs[1] != ks[1] {
        return Err(Error::shape("mha", &qs, &ks));
    }
    let d = qs[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Dimension(format!("{heads} heads do not divide width {d}")));
    }
    let dh = d / heads;
    let qp = p.q.forward(q)?.scale(1.0 / (dh as f64).sqrt());
    let kp = p.k.forward(k)?;
    let vp = p.v.forward(v)?;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let (qh, kh, vh) = if heads == 1 {
            (qp, kp, vp)
        } else {
            (
                qp.slice_cols(cols.start, cols.end)?,
                kp.slice_cols(cols.start, cols.end)?,
                vp.slice_cols(cols.start, cols.end)?,
            )
        };
        let w = qh.matmul_nt(kh)?.softmax(1)?;
        outs.push(w.matmul(vh)?);
        weights.push(w);
    }
    let joined = if heads == 1 { outs[0] } else { Var::concat_cols(&outs)? };
    Ok((p.o.forward(joined)?, weights))
}

pub fn mha<'t, T: Real>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    p: &AttentionParams<'t, T>,
    heads: usize,
) -> Result<Var<'t, T>> {
    Ok(mha_with_weights(q, k, v, p, heads)?.0)
}

/// Two-layer `d → 4d → d` feed-forward block.
#[derive(Clone, Copy, Debug)]
pub struct FfnParams<'t, T: Real> {
    pub fc1: Linear<'t, T>,
    pub fc2: Linear<'t, T>,
}

impl<'t, T: Real> FfnParams<'t, T> {
    pub fn declare(init: &mut Initializer<T>, prefix: &str, d: usize) -> Result<()> {
        Linear::declare(init, &format!("{prefix}.fc1"), d, 4 * d)?;
        Linear::declare(init, &format!("{prefix}.fc2"), 4 * d, d)
    }

    pub fn bind(p: &BoundParams<'t, T>, prefix: &str) -> Result<Self> {
        Ok(FfnParams {
            fc1: Linear::bind(p, &format!("{prefix}.fc1"))?,
            fc2: Linear::bind(p, &format!("{prefix}.fc2"))?,
        })
    }

    pub fn forward(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.fc2.forward(self.fc1.forward(x)?.relu())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerParams<'t, T: Real> {
    pub attn: AttentionParams<'t, T>,
    pub ffn: FfnParams<'t, T>,
    pub norm1: LayerNorm<'t, T>,
    pub norm2: LayerNorm<'t, T>,
}

impl<'t, T: Real> EncoderLayerParams<'t, T> {
    pub fn declare(init: &mut Initializer<T>, prefix: &str, d: usize) -> Result<()> {
        AttentionParams::declare(init, &format!("{prefix}.attn"), d)?;
        FfnParams::declare(init, &format!("{prefix}.ffn"), d)?;
        LayerNorm::declare(init, &format!("{prefix}.norm1"), d)?;
        LayerNorm::declare(init, &format!("{prefix}.norm2"), d)
    }

    pub fn bind(p: &BoundParams<'t, T>, prefix: &str) -> Result<Self> {
        Ok(EncoderLayerParams {
            attn: AttentionParams::bind(p, &format!("{prefix}.attn"))?,
            ffn: FfnParams::bind(p, &format!("{prefix}.ffn"))?,
            norm1: LayerNorm::bind(p, &format!("{prefix}.norm1"))?,
            norm2: LayerNorm::bind(p, &format!("{prefix}.norm2"))?,
        })
    }
}

/// Pre-norm encoder layer: self-attention with `q = k = norm(x) + pos`,
/// `v = norm(x)`, then a feed-forward block, each with a residual.
pub fn encoder_layer<'t, T: Real>(
    tokens: Var<'t, T>,
    pos: Var<'t, T>,
    p: &EncoderLayerParams<'t, T>,
    heads: usize,
) -> Result<Var<'t, T>> {
    let rows = tokens.shape().first().copied().unwrap_or(0);
    encoder_layer_partial(tokens, pos, p, heads, rows)
}

/// Encoder layer in which only the first `active` tokens issue queries and
/// get updated; the remaining tokens serve as keys/values and pass through.
pub fn encoder_layer_partial<'t, T: Real>(
    tokens: Var<'t, T>,
    pos: Var<'t, T>,
    p: &EncoderLayerParams<'t, T>,
    heads: usize,
    active: usize,
) -> Result<Var<'t, T>> {
    if tokens.shape() != pos.shape() || tokens.shape().len() != 2 {
        return Err(Error::shape("encoder_layer", &tokens.shape(), &pos.shape()));
    }
    let rows = tokens.shape()[0];
    if active == 0 || active > rows {
        return Err(Error::Dimension(format!("{active} active rows out of {rows} tokens")));
    }
    let h = p.norm1.forward(tokens)?;
    let qk = h.add(pos)?;
    let (x, q) = if active == rows {
        (tokens, qk)
    } else {
        (tokens.slice_rows(0, active)?, qk.slice_rows(0, active)?)
    };
    let x = x.add(mha(q, qk, h, &p.attn, heads)?)?;
    let x = x.add(p.ffn.forward(p.norm2.forward(x)?)?)?;
    if active == rows {
        Ok(x)
    } else {
        Var::concat_rows(&[x, tokens.slice_rows(active, rows)?])
    }
}

/// Object queries: content embeddings and normalized `(cx, cy, w, h)`
/// reference boxes.
#[derive(Clone, Copy, Debug)]
pub struct QuerySet<'t, T: Real> {
    pub content: Var<'t, T>,
    pub boxes: Var<'t, T>,
}

impl<'t, T: Real> QuerySet<'t, T> {
    pub fn new(content: Var<'t, T>, boxes: Var<'t, T>) -> Result<Self> {
        let (cs, bs) = (content.shape(), boxes.shape());
        if cs.len() != 2 || bs.len() != 2 || bs[1] != 4 || cs[0] != bs[0] || cs[0] == 0 {
            return Err(Error::shape("query set", &cs, &bs));
        }
        Ok(QuerySet { content, boxes })
    }

    pub fn len(&self) -> usize {
        self.content.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.content.shape()[1]
    }

    /// Sine encoding of the reference-box centers.
    pub fn positions(&self) -> Result<Var<'t, T>> {
        point_positions_var(self.boxes.slice_cols(0, 2)?, self.width())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayerParams<'t, T: Real> {
    pub self_attn: AttentionParams<'t, T>,
    pub cross_attn: AttentionParams<'t, T>,
    pub ffn: FfnParams<'t, T>,
    pub norm1: LayerNorm<'t, T>,
    pub norm2: LayerNorm<'t, T>,
    pub norm3: LayerNorm<'t, T>,
}

impl<'t, T: Real> DecoderLayerParams<'t, T> {
    pub fn declare(init: &mut Initializer<T>, prefix: &str, d: usize) -> Result<()> {
        AttentionParams::declare(init, &format!("{prefix}.self_attn"), d)?;
        AttentionParams::declare(init, &format!("{prefix}.cross_attn"), d)?;
        FfnParams::declare(init, &format!("{prefix}.ffn"), d)?;
        for n in ["norm1", "norm2", "norm3"] {
            LayerNorm::declare(init, &format!("{prefix}.{n}"), d)?;
        }
        Ok(())
    }

    pub fn bind(p: &BoundParams<'t, T>, prefix: &str) -> Result<Self> {
        Ok(DecoderLayerParams {
            self_attn: AttentionParams::bind(p, &format!("{prefix}.self_attn"))?,
            cross_attn: AttentionParams::bind(p, &format!("{prefix}.cross_attn"))?,
            ffn: FfnParams::bind(p, &format!("{prefix}.ffn"))?,
            norm1: LayerNorm::bind(p, &format!("{prefix}.norm1"))?,
            norm2: LayerNorm::bind(p, &format!("{prefix}.norm2"))?,
            norm3: LayerNorm::bind(p, &format!("{prefix}.norm3"))?,
        })
    }
}

/// Pre-norm decoder layer. Returns the updated query content `[N×d]`.
pub fn decoder_layer<'t, T: Real>(
    queries: &QuerySet<'t, T>,
    memory: Var<'t, T>,
    mem_pos: Var<'t, T>,
    p: &DecoderLayerParams<'t, T>,
    heads: usize,
) -> Result<Var<'t, T>> {
    if memory.shape() != mem_pos.shape() || memory.shape().len() != 2 {
        return Err(Error::shape("decoder_layer", &memory.shape(), &mem_pos.shape()));
    }
    let qpos = queries.positions()?;
    let x = queries.content;
    let h = p.norm1.forward(x)?;
    let hq = h.add(qpos)?;
    let x = x.add(mha(hq, hq, h, &p.self_attn, heads)?)?;
    let h = p.norm2.forward(x)?.add(qpos)?;
    let x = x.add(mha(h, memory.add(mem_pos)?, memory, &p.cross_attn, heads)?)?;
    x.add(p.ffn.forward(p.norm3.forward(x)?)?)
}

#[derive(Clone, Copy, Debug)]
pub struct HeadParams<'t, T: Real> {
    pub class: Linear<'t, T>,
    pub box1: Linear<'t, T>,
    pub box2: Linear<'t, T>,
    pub box3: Linear<'t, T>,
}

impl<'t, T: Real> HeadParams<'t, T> {
    pub fn declare(init: &mut Initializer<T>, prefix: &str, d: usize, classes: usize) -> Result<()> {
        Linear::declare(init, &format!("{prefix}.class"), d, classes)?;
        let prior = -((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln();
        *init
            .store
            .get_mut(&format!("{prefix}.class.bias"))
            .expect("just declared") = Tensor::full(vec![classes], crate::tensor::lit(prior));
        Linear::declare(init, &format!("{prefix}.box1"), d, d)?;
        Linear::declare(init, &format!("{prefix}.box2"), d, d)?;
        // The last box layer starts at zero so initial boxes equal the references.
        init.constant(format!("{prefix}.box3.weight"), vec![d, 4], 0.0)?;
        init.constant(format!("{prefix}.box3.bias"), vec![4], 0.0)
    }

    pub fn bind(p: &BoundParams<'t, T>, prefix: &str) -> Result<Self> {
        Ok(HeadParams {
            class: Linear::bind(p, &format!("{prefix}.class"))?,
            box1: Linear::bind(p, &format!("{prefix}.box1"))?,
            box2: Linear::bind(p, &format!("{prefix}.box2"))?,
            box3: Linear::bind(p, &format!("{prefix}.box3"))?,
        })
    }
}

/// Class logits `[N×C]` and boxes `[N×4]` of one stage.
#[derive(Clone, Copy, Debug)]
pub struct Predictions<'t, T: Real> {
    pub class_logits: Var<'t, T>,
    pub boxes: Var<'t, T>,
}

/// Linear class head, and a three-layer box MLP whose output moves the
/// reference boxes in logit space.
pub fn prediction_heads<'t, T: Real>(
    q: Var<'t, T>,
    ref_boxes: Var<'t, T>,
    p: &HeadParams<'t, T>,
) -> Result<Predictions<'t, T>> {
    let class_logits = p.class.forward(q)?;
    let hidden = p.box2.forward(p.box1.forward(q)?.relu())?.relu();
    let offsets = p.box3.forward(hidden)?;
    Ok(Predictions {
        class_logits,
        boxes: Var::refine_boxes(ref_boxes, offsets)?,
    })
}
