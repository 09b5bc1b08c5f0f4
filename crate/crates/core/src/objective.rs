//! Task loss, contrastive retrieval losses and their combination.
//!
//! The contrastive retrieval loss sums, over targets `i` and all nine
//! (target modality, retrieved modality) pairs,
//!
//! ```text
//! ‖e_i − e_pos‖² + max(0, γ − ‖e_i − e_neg‖²)
//! ```
//!
//! on shared-space pooled embeddings. [`CcrlLoss::value`] divides the sum by
//! the number of contributing pairs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{cosine_of, Graph, Var};
use crate::modality::{Modality, PerModality};
use crate::retrieval::{PooledSample, RetrievalSet};

/// Number of (target, retrieved) modality pairs per sample.
pub const PAIRS_PER_SAMPLE: usize = 9;

pub fn mse_loss(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::Input(format!(
            "mse needs equal nonzero lengths, got {} and {}",
            predictions.len(),
            labels.len()
        )));
    }
    let sum: f64 = predictions.iter().zip(labels).map(|(p, y)| (p - y).powi(2)).sum();
    Ok(sum / predictions.len() as f64)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// One pair's contribution: `d(a, p)² + max(0, γ − d(a, n)²)`.
pub fn ccrl_pair_term(anchor: &[f64], positive: &[f64], negative: &[f64], gamma: f64) -> f64 {
    sq_dist(anchor, positive) + (gamma - sq_dist(anchor, negative)).max(0.0)
}

pub fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
    }
    Ok(())
}

pub fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CcrlLoss {
    pub sum: f64,
    pub terms: usize,
    pub skipped: usize,
}

impl CcrlLoss {
    /// Sum divided by the number of contributing pairs; 0 when none contribute.
    pub fn value(&self) -> f64 {
        if self.terms == 0 {
            0.0
        } else {
            self.sum / self.terms as f64
        }
    }
}

fn slice(v: &ndarray::Array1<f64>) -> &[f64] {
    v.as_slice().expect("contiguous embedding")
}

/// Contrastive retrieval loss for a batch. `retrievals[i]` holds the
/// training-mode retrieval sets of `targets[i]` (indexed by target modality)
/// or `None` when its pool was degenerate; pool indices refer to `pool`.
pub fn ccrl_loss(
    targets: &[PooledSample],
    retrievals: &[Option<PerModality<RetrievalSet>>],
    pool: &[PooledSample],
    gamma: f64,
) -> Result<CcrlLoss> {
    check_gamma(gamma)?;
    if targets.len() != retrievals.len() {
        return Err(Error::Input("one retrieval entry per target required".into()));
    }
    let mut out = CcrlLoss::default();
    for (target, sets) in targets.iter().zip(retrievals) {
        let Some(sets) = sets else {
            out.skipped += PAIRS_PER_SAMPLE;
            continue;
        };
        for alpha in Modality::ALL {
            let set = &sets[alpha];
            let negatives = set
                .negatives
                .as_ref()
                .ok_or_else(|| Error::Input("contrastive loss needs training-mode retrieval".into()))?;
            let anchor = slice(&target.embeddings[alpha]);
            for beta in Modality::ALL {
                let pos = &pool[set.positives[beta].pool_index].embeddings[beta];
                let neg = &pool[negatives[beta].pool_index].embeddings[beta];
                out.sum += ccrl_pair_term(anchor, slice(pos), slice(neg), gamma);
                out.terms += 1;
            }
        }
    }
    Ok(out)
}

/// Differentiable single-pair term on shared-space embedding nodes.
pub fn ccrl_pair_term_graph(g: &mut Graph<'_>, anchor: Var, positive: Var, negative: Var, gamma: f64) -> Var {
    let pull = g.sq_dist(anchor, positive);
    let neg = g.sq_dist(anchor, negative);
    let gap = g.scale(neg, -1.0);
    let gap = g.add_scalar(gap, gamma);
    let push = g.relu(gap);
    g.sum(&[pull, push])
}

/// Similarities seen by one InfoNCE anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct InfoNceAnchor {
    pub positive: f64,
    pub negatives: Vec<f64>,
}

/// `−log(exp(s⁺/τ) / Σ exp(s/τ))` averaged over anchors, the sum running over
/// the positive and all negatives.
pub fn infonce_loss(anchors: &[InfoNceAnchor], temperature: f64) -> Result<f64> {
    check_temperature(temperature)?;
    if anchors.is_empty() {
        return Err(Error::Input("infonce needs at least one anchor".into()));
    }
    let total: f64 = anchors
        .iter()
        .map(|a| {
            let scaled: Vec<f64> = std::iter::once(a.positive)
                .chain(a.negatives.iter().copied())
                .map(|s| s / temperature)
                .collect();
            let max = scaled.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + scaled.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            lse - scaled[0]
        })
        .sum();
    Ok(total / anchors.len() as f64)
}

/// InfoNCE anchors for a batch: for every non-degenerate target and modality
/// pair, the retrieved positive against every opposite-polarity pool member.
pub fn infonce_anchors(
    targets: &[PooledSample],
    retrievals: &[Option<PerModality<RetrievalSet>>],
    pool: &[PooledSample],
) -> Vec<InfoNceAnchor> {
    let mut anchors = Vec::new();
    for (target, sets) in targets.iter().zip(retrievals) {
        let (Some(sets), Some(opposite)) = (sets, target.polarity.opposite()) else {
            continue;
        };
        for alpha in Modality::ALL {
            let anchor = slice(&target.embeddings[alpha]);
            for beta in Modality::ALL {
                let pos = &pool[sets[alpha].positives[beta].pool_index].embeddings[beta];
                let negatives = pool
                    .iter()
                    .filter(|c| c.polarity == opposite && c.sample_id != target.sample_id)
                    .map(|c| cosine_of(anchor, slice(&c.embeddings[beta])))
                    .collect();
                anchors.push(InfoNceAnchor {
                    positive: cosine_of(anchor, slice(pos)),
                    negatives,
                });
            }
        }
    }
    anchors
}

/// Differentiable single-anchor InfoNCE term.
pub fn infonce_anchor_graph(g: &mut Graph<'_>, anchor: Var, positive: Var, negatives: &[Var], temperature: f64) -> Var {
    let mut sims = Vec::with_capacity(negatives.len() + 1);
    sims.push(g.cosine(anchor, positive));
    for &n in negatives {
        sims.push(g.cosine(anchor, n));
    }
    let row = g.concat_cols(&sims);
    let row = g.scale(row, 1.0 / temperature);
    let lse = g.logsumexp(row);
    let pos = g.scale(sims[0], 1.0 / temperature);
    g.sub(lse, pos)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_msa: f64,
    pub l_ccrl: f64,
    pub l_total: f64,
    pub lambda: f64,
    pub skipped_contrastive_terms: usize,
}

/// `l_msa + λ · l_ccrl`.
pub fn total_loss(l_msa: f64, l_ccrl: f64, lambda: f64) -> LossBreakdown {
    LossBreakdown {
        l_msa,
        l_ccrl,
        l_total: l_msa + lambda * l_ccrl,
        lambda,
        skipped_contrastive_terms: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[0.5, -1.0], &[0.5, -1.0]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[1.0, -1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert!(mse_loss(&[], &[]).is_err());
        assert!(mse_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ccrl_hand_cases() {
        let gamma = 50.0;
        // d(pos) = 0 and d(neg)² = γ
        let a = [1.0, 2.0];
        let n = [1.0 + 5.0, 2.0 + 5.0];
        assert_eq!(ccrl_pair_term(&a, &a, &n, gamma), 0.0);
        // d(pos) = 1, d(neg) = 0
        assert_eq!(ccrl_pair_term(&a, &[1.0, 3.0], &a, gamma), 51.0);
    }

    #[test]
    fn gamma_and_temperature_validated() {
        assert!(ccrl_loss(&[], &[], &[], 0.0).is_err());
        assert!(infonce_loss(&[], -1.0).is_err());
    }

    #[test]
    fn infonce_examples() {
        let alone = InfoNceAnchor {
            positive: 0.3,
            negatives: vec![],
        };
        assert!(infonce_loss(&[alone], 0.07).unwrap().abs() < 1e-15);
        let tie = InfoNceAnchor {
            positive: 0.4,
            negatives: vec![0.4],
        };
        for tau in [0.07, 1.0, 3.0] {
            assert!((infonce_loss(std::slice::from_ref(&tie), tau).unwrap() - 2f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(1.0, 0.0, 123.0).l_total, 1.0);
        assert!((total_loss(0.5, 1000.0, 0.001).l_total - 1.5).abs() < 1e-12);
        let b = total_loss(0.25, 7.0, 0.0);
        assert_eq!(b.l_total, b.l_msa);
    }
}
