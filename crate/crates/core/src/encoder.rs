//! Cross-modal retrieval-augmented encoder and fusion head.
//!
//! Each target stream is self-attended once per branch, then a single-head
//! cross-attention block lets it query the branch's reference context:
//!
//! ```text
//! y₀ = softmax((x W_q + b_q)(c W_k + b_k)ᵀ / √d)(c W_v + b_v) + x
//! y  = FFN(LN(y₀)) + y₀
//! ```
//!
//! The modality-level branch consumes modality-level contexts and the
//! sample-level branch consumes sample-level contexts. No positional
//! encodings or masks are used.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, ParamId, ParamStore, Var};
use crate::modality::{Modality, PerModality};
use crate::nn::Linear;
use crate::prompts::{ContextLevel, ReferenceContext};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionProj {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

impl AttentionProj {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, rng: &mut impl Rng) -> Self {
        AttentionProj {
            query: Linear::new(store, &format!("{name}.q"), d_model, d_model, rng),
            key: Linear::new(store, &format!("{name}.k"), d_model, d_model, rng),
            value: Linear::new(store, &format!("{name}.v"), d_model, d_model, rng),
        }
    }
}

/// Output of one scaled dot-product attention, before the residual.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub output: Var,
    /// Row-stochastic `queries x keys` weights.
    pub weights: Var,
}

pub fn attend(g: &mut Graph<'_>, queries: Var, keys_values: Var, proj: &AttentionProj) -> Attention {
    let d = g.shape(queries).1 as f64;
    let q = proj.query.forward(g, queries);
    let k = proj.key.forward(g, keys_values);
    let v = proj.value.forward(g, keys_values);
    let scores = g.matmul_t(q, k);
    let scores = g.scale(scores, 1.0 / d.sqrt());
    let weights = g.softmax_rows(scores);
    let output = g.matmul(weights, v);
    Attention { output, weights }
}

/// `softmax(QKᵀ/√d)V + x` over the rows of `x`.
pub fn self_attend(g: &mut Graph<'_>, x: Var, proj: &AttentionProj) -> Var {
    let att = attend(g, x, x, proj);
    g.add(att.output, x)
}

/// One cross-attention augmentation block bound to a context level and a
/// target modality.
#[derive(Clone, Debug, PartialEq)]
pub struct CaeBlock {
    pub level: ContextLevel,
    pub target: Modality,
    pub attention: AttentionProj,
    pub norm_scale: ParamId,
    pub norm_shift: ParamId,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl CaeBlock {
    pub fn new(
        store: &mut ParamStore,
        level: ContextLevel,
        target: Modality,
        d_model: usize,
        ffn_hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let name = format!("cae.{level}.{}", target.short());
        CaeBlock {
            level,
            target,
            attention: AttentionProj::new(store, &format!("{name}.attn"), d_model, rng),
            norm_scale: store.add(format!("{name}.ln.scale"), Mat::ones((1, d_model))),
            norm_shift: store.add(format!("{name}.ln.shift"), Mat::zeros((1, d_model))),
            ffn_in: Linear::new(store, &format!("{name}.ffn.in"), d_model, ffn_hidden, rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn.out"), ffn_hidden, d_model, rng),
        }
    }
}

/// Augments `target` (`L x d_model`) with `context`; the output keeps the
/// target's length whatever the context length.
pub fn cross_augment(
    g: &mut Graph<'_>,
    target: Var,
    context: &ReferenceContext,
    block: &CaeBlock,
) -> Result<Var> {
    if context.level != block.level || context.target != block.target {
        return Err(Error::Input(format!(
            "{}-level {} context fed to the {}-level {} block",
            context.level, context.target, block.level, block.target
        )));
    }
    let d_model = block.attention.query.fan_in(g.params());
    for (what, v) in [("target", target), ("context", context.context)] {
        let width = g.shape(v).1;
        if width != d_model {
            return Err(Error::shape(format!("cross-augment {what}"), d_model, width));
        }
    }
    let att = attend(g, target, context.context, &block.attention);
    let y0 = g.add(att.output, target);
    let scale = g.param(block.norm_scale);
    let shift = g.param(block.norm_shift);
    let normed = g.layer_norm(y0, scale, shift);
    let hidden = block.ffn_in.forward(g, normed);
    let hidden = g.gelu(hidden);
    let ffn = block.ffn_out.forward(g, hidden);
    Ok(g.add(ffn, y0))
}

/// Two-layer regression head over the six pooled enhanced streams.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionHead {
    pub hidden: Linear,
    pub output: Linear,
}

impl FusionHead {
    pub fn new(store: &mut ParamStore, d_model: usize, rng: &mut impl Rng) -> Self {
        FusionHead {
            hidden: Linear::new(store, "fusion.hidden", 6 * d_model, d_model, rng),
            output: Linear::new(store, "fusion.out", d_model, 1, rng),
        }
    }
}

/// Enhanced target streams, one per (level, modality).
#[derive(Clone, Debug, PartialEq)]
pub struct EnhancedStreams {
    pub modality_level: PerModality<Var>,
    pub sample_level: PerModality<Var>,
}

impl EnhancedStreams {
    /// Streams in fusion order: t_m, v_m, a_m, t_s, v_s, a_s.
    pub fn ordered(&self) -> [Var; 6] {
        let m = &self.modality_level;
        let s = &self.sample_level;
        [m.text, m.visual, m.acoustic, s.text, s.visual, s.acoustic]
    }
}

/// Mean-pools every stream, concatenates them and regresses a `1 x 1` score.
pub fn fuse_and_predict(g: &mut Graph<'_>, streams: &EnhancedStreams, head: &FusionHead) -> Var {
    let pooled: Vec<Var> = streams.ordered().iter().map(|&s| g.mean_rows(s)).collect();
    let joined = g.concat_cols(&pooled);
    let hidden = head.hidden.forward(g, joined);
    let hidden = g.tanh(hidden);
    head.output.forward(g, hidden)
}
