//! Hierarchical prompts and prompt-driven reference-context generation.
//!
//! Two prompt levels exist, each with one trainable `P_len x d_model` matrix
//! per target modality: modality-level prompts turn the sample's own three
//! streams into a modality-level context, and sample-level prompts turn the
//! retrieved positive references into a sample-level context. For target
//! `τ` a context is
//!
//! ```text
//! tanh([P_τ ; f_{t→τ}(x_t) ; f_{v→τ}(x_v) ; f_{a→τ}(x_a)] · A_τ + c_τ)
//! ```
//!
//! where every `f` is a tokenwise affine map into `d_model`, `;` stacks along
//! the sequence axis and `A_τ, c_τ` is the per-target aggregator. The two
//! levels use disjoint parameters.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, ParamId, ParamStore, Var};
use crate::modality::{Modality, PerModality};
use crate::nn::{uniform_matrix, Linear};

/// Negative slope `a` of the prompt initializer.
pub const PROMPT_INIT_NEGATIVE_SLOPE: f64 = 5.0;
/// Numerator constant `b` of the prompt initializer.
pub const PROMPT_INIT_GAIN: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextLevel {
    /// Built from the sample's own modalities.
    Modality,
    /// Built from retrieved positive references.
    Sample,
}

impl ContextLevel {
    pub const ALL: [ContextLevel; 2] = [ContextLevel::Modality, ContextLevel::Sample];

    pub fn index(self) -> usize {
        match self {
            ContextLevel::Modality => 0,
            ContextLevel::Sample => 1,
        }
    }
}

impl fmt::Display for ContextLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContextLevel::Modality => "modality",
            ContextLevel::Sample => "sample",
        })
    }
}

/// Half-width of the uniform prompt initializer,
/// `sqrt(b / ((1 + a²) · fan_in))` with `fan_in = d_model`.
pub fn prompt_init_bound(d_model: usize) -> f64 {
    let a = PROMPT_INIT_NEGATIVE_SLOPE;
    (PROMPT_INIT_GAIN / ((1.0 + a * a) * d_model as f64)).sqrt()
}

pub fn init_prompt_matrix(rng: &mut impl Rng, p_len: usize, d_model: usize) -> Mat {
    uniform_matrix(rng, p_len, d_model, prompt_init_bound(d_model))
}

/// Parameter handles of the prompt matrices. A level is `None` when it has
/// been ablated away.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank {
    pub modality: Option<PerModality<ParamId>>,
    pub sample: Option<PerModality<ParamId>>,
}

impl PromptBank {
    pub fn init(
        store: &mut ParamStore,
        p_len: usize,
        d_model: usize,
        levels: &[ContextLevel],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if p_len == 0 || d_model == 0 {
            return Err(Error::Config("prompt length and d_model must be positive".into()));
        }
        let mut make = |level: ContextLevel| {
            levels.contains(&level).then(|| {
                PerModality::from_fn(|m| {
                    store.add(
                        format!("prompt.{level}.{}", m.short()),
                        init_prompt_matrix(rng, p_len, d_model),
                    )
                })
            })
        };
        let modality = make(ContextLevel::Modality);
        let sample = make(ContextLevel::Sample);
        Ok(PromptBank { modality, sample })
    }

    pub fn level(&self, level: ContextLevel) -> Option<&PerModality<ParamId>> {
        match level {
            ContextLevel::Modality => self.modality.as_ref(),
            ContextLevel::Sample => self.sample.as_ref(),
        }
    }
}

/// A complete two-level bank in a fresh store, seeded deterministically.
pub fn init_prompt_bank(p_len: usize, d_model: usize, seed: u64) -> Result<(ParamStore, PromptBank)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bank = PromptBank::init(&mut store, p_len, d_model, &ContextLevel::ALL, &mut rng)?;
    Ok((store, bank))
}

/// The `f` functions of one level: nine source→target projections and three
/// per-target aggregators.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextGenerator {
    pub level: ContextLevel,
    /// Indexed `[target][source]`.
    pub project: PerModality<PerModality<Linear>>,
    pub aggregate: PerModality<Linear>,
}

impl ContextGenerator {
    pub fn new(
        store: &mut ParamStore,
        level: ContextLevel,
        source_dims: &PerModality<usize>,
        d_model: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let project = PerModality::from_fn(|target| {
            PerModality::from_fn(|source| {
                Linear::new(
                    store,
                    &format!("gen.{level}.{}_to_{}", source.short(), target.short()),
                    source_dims[source],
                    d_model,
                    rng,
                )
            })
        });
        let aggregate = PerModality::from_fn(|target| {
            Linear::new(store, &format!("gen.{level}.tva_to_{}", target.short()), d_model, d_model, rng)
        });
        ContextGenerator {
            level,
            project,
            aggregate,
        }
    }
}

/// A generated context sequence of shape `(P_len + Σ L_m, d_model)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReferenceContext {
    pub level: ContextLevel,
    pub target: Modality,
    pub context: Var,
}

fn generate(
    g: &mut Graph<'_>,
    bank: &PromptBank,
    generator: &ContextGenerator,
    level: ContextLevel,
    target: Modality,
    sources: &PerModality<Var>,
) -> Result<ReferenceContext> {
    if generator.level != level {
        return Err(Error::Input(format!(
            "{} generator used for a {level}-level context",
            generator.level
        )));
    }
    let prompts = bank
        .level(level)
        .ok_or_else(|| Error::Input(format!("{level}-level prompts are ablated")))?;
    let store = g.params();
    let mut parts = Vec::with_capacity(4);
    parts.push(g.param(prompts[target]));
    for (source, &x) in sources.iter() {
        let proj = &generator.project[target][source];
        let expected = proj.fan_in(store);
        let (_, width) = g.shape(x);
        if width != expected {
            return Err(Error::shape(format!("{level}-level {source}→{target} projection"), expected, width));
        }
        parts.push(proj.forward(g, x));
    }
    let stacked = g.concat_rows(&parts);
    let aggregated = generator.aggregate[target].forward(g, stacked);
    Ok(ReferenceContext {
        level,
        target,
        context: g.tanh(aggregated),
    })
}

/// Modality-level context for `target` from the sample's own three streams.
pub fn generate_modality_context(
    g: &mut Graph<'_>,
    target: Modality,
    sample_features: &PerModality<Var>,
    bank: &PromptBank,
    generator: &ContextGenerator,
) -> Result<ReferenceContext> {
    generate(g, bank, generator, ContextLevel::Modality, target, sample_features)
}

/// Sample-level context for `target` from the positives retrieved for it,
/// indexed by retrieved modality.
pub fn generate_sample_context(
    g: &mut Graph<'_>,
    target: Modality,
    retrieved_positives: &PerModality<Var>,
    bank: &PromptBank,
    generator: &ContextGenerator,
) -> Result<ReferenceContext> {
    generate(g, bank, generator, ContextLevel::Sample, target, retrieved_positives)
}
