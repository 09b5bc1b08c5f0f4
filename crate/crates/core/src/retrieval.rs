//! Contrastive cross-modal retrieval.
//!
//! Every sample is reduced to one pooled embedding per modality in a shared
//! space (mean over sequence positions, then a learned affine map). For a
//! target modality `α` and every retrieved modality `β`, the positive is the
//! candidate whose `β` embedding is most cosine-similar to the target's `α`
//! embedding. During training the candidates are restricted by label
//! polarity (same polarity for positives, opposite for negatives); at
//! inference no labels are consulted and only positives are produced.

use std::fmt;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FeatureSequence, Sample};
use crate::error::{Error, Result};
use crate::graph::{cosine_of, Graph, ParamStore, Var};
use crate::modality::{Modality, PerModality};
use crate::nn::Linear;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
    Neutral,
}

impl Polarity {
    pub fn of(label: f64) -> Self {
        if label > 0.0 {
            Polarity::Positive
        } else if label < 0.0 {
            Polarity::Negative
        } else {
            Polarity::Neutral
        }
    }

    pub fn opposite(self) -> Option<Polarity> {
        match self {
            Polarity::Positive => Some(Polarity::Negative),
            Polarity::Negative => Some(Polarity::Positive),
            Polarity::Neutral => None,
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
            Polarity::Neutral => "neutral",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalMode {
    Train,
    Inference,
}

/// Per-modality pooled embeddings of one sample in the shared space.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledSample {
    pub sample_id: String,
    pub polarity: Polarity,
    pub embeddings: PerModality<Array1<f64>>,
}

/// Mean-pools `x` over positions and maps it into the shared space.
pub fn pool_and_project(x: &FeatureSequence, store: &ParamStore, proj: &Linear) -> Result<Array1<f64>> {
    let fan_in = proj.fan_in(store);
    if x.data.ncols() != fan_in {
        return Err(Error::shape(
            format!("{} projection", x.modality),
            fan_in,
            x.data.ncols(),
        ));
    }
    let pooled = x.mean_pool();
    Ok(pooled.dot(store.get(proj.weight)) + store.get(proj.bias).row(0))
}

/// Differentiable counterpart of [`pool_and_project`] for an `L x d_m` node.
pub fn pool_and_project_graph(g: &mut Graph<'_>, x: Var, proj: &Linear) -> Var {
    let pooled = g.mean_rows(x);
    proj.forward(g, pooled)
}

pub fn pool_sample(sample: &Sample, store: &ParamStore, projections: &PerModality<Linear>) -> Result<PooledSample> {
    Ok(PooledSample {
        sample_id: sample.id.clone(),
        polarity: Polarity::of(sample.label),
        embeddings: PerModality::try_from_fn(|m| pool_and_project(&sample.features[m], store, &projections[m]))?,
    })
}

/// Cosine similarity with a shape check. Zero when either norm is below
/// `1e-12`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine similarity", a.len(), b.len()));
    }
    Ok(cosine_of(a, b))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Retrieved {
    /// Position of the candidate in the pool it was retrieved from.
    pub pool_index: usize,
    pub sample_id: String,
    pub similarity: f64,
}

/// The references retrieved for one target modality: one positive per
/// retrieved modality and, in training mode, one negative per modality.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalSet {
    pub target_modality: Modality,
    pub positives: PerModality<Retrieved>,
    pub negatives: Option<PerModality<Retrieved>>,
}

fn best_match(
    target: &Array1<f64>,
    pool: &[PooledSample],
    retrieved: Modality,
    target_id: &str,
    accept: impl Fn(&PooledSample) -> bool,
) -> Result<Option<Retrieved>> {
    let mut best: Option<(usize, f64)> = None;
    let anchor = target.as_slice().expect("contiguous");
    for (idx, cand) in pool.iter().enumerate() {
        if cand.sample_id == target_id || !accept(cand) {
            continue;
        }
        let sim = cosine_similarity(anchor, cand.embeddings[retrieved].as_slice().expect("contiguous"))?;
        if best.is_none_or(|(_, s)| sim > s) {
            best = Some((idx, sim));
        }
    }
    Ok(best.map(|(pool_index, similarity)| Retrieved {
        pool_index,
        sample_id: pool[pool_index].sample_id.clone(),
        similarity,
    }))
}

/// Retrieves references for `target`'s `target_modality` from `pool`. The
/// target itself (matched by sample id) is never a candidate; ties go to the
/// lowest pool index.
///
/// In training mode a neutral target, or a pool lacking same- or
/// opposite-polarity candidates, yields [`Error::DegeneratePool`].
pub fn retrieve(
    target: &PooledSample,
    target_modality: Modality,
    pool: &[PooledSample],
    mode: RetrievalMode,
) -> Result<RetrievalSet> {
    let anchor = &target.embeddings[target_modality];
    let degenerate = |missing: &str| Error::DegeneratePool {
        sample_id: target.sample_id.clone(),
        missing: missing.to_string(),
    };
    match mode {
        RetrievalMode::Inference => {
            let positives = PerModality::try_from_fn(|m| {
                best_match(anchor, pool, m, &target.sample_id, |_| true)?
                    .ok_or_else(|| degenerate("non-self"))
            })?;
            Ok(RetrievalSet {
                target_modality,
                positives,
                negatives: None,
            })
        }
        RetrievalMode::Train => {
            let same = target.polarity;
            let opposite = same.opposite().ok_or_else(|| degenerate("polar target"))?;
            let positives = PerModality::try_from_fn(|m| {
                best_match(anchor, pool, m, &target.sample_id, |c| c.polarity == same)?
                    .ok_or_else(|| degenerate(&same.to_string()))
            })?;
            let negatives = PerModality::try_from_fn(|m| {
                best_match(anchor, pool, m, &target.sample_id, |c| c.polarity == opposite)?
                    .ok_or_else(|| degenerate(&opposite.to_string()))
            })?;
            Ok(RetrievalSet {
                target_modality,
                positives,
                negatives: Some(negatives),
            })
        }
    }
}

/// Retrieval for all three target modalities of one sample.
pub fn retrieve_all(
    target: &PooledSample,
    pool: &[PooledSample],
    mode: RetrievalMode,
) -> Result<PerModality<RetrievalSet>> {
    PerModality::try_from_fn(|m| retrieve(target, m, pool, mode))
}

/// Reference pool used at inference: pooled embeddings and raw features of a
/// whole split.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    entries: Vec<PooledSample>,
    samples: Vec<Sample>,
    frozen: bool,
}

impl MemoryBank {
    /// An empty, unfrozen bank.
    pub fn new() -> Self {
        MemoryBank {
            entries: Vec::new(),
            samples: Vec::new(),
            frozen: false,
        }
    }

    pub fn insert(&mut self, sample: Sample, pooled: PooledSample) -> Result<()> {
        if self.frozen {
            return Err(Error::Config("memory bank is frozen".into()));
        }
        self.samples.push(sample);
        self.entries.push(pooled);
        Ok(())
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PooledSample] {
        &self.entries
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }
}

impl Default for MemoryBank {
    fn default() -> Self {
        Self::new()
    }
}

/// Builds a frozen bank over `dataset` with the current projections.
pub fn build_memory_bank(dataset: &Dataset, store: &ParamStore, projections: &PerModality<Linear>) -> Result<MemoryBank> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot build a memory bank from an empty dataset".into()));
    }
    let mut bank = MemoryBank::new();
    for s in &dataset.samples {
        let pooled = pool_sample(s, store, projections)?;
        bank.insert(s.clone(), pooled)?;
    }
    bank.freeze();
    Ok(bank)
}
