//! Randomized comparisons shared by the focused tests and the acceptance run.
//! Each returns a measurement; callers decide on the threshold.

use rand::Rng;

use xmrs::dataset::generate_synthetic;
use xmrs::graph::{Graph, Mat, ParamId, ParamStore, Var};
use xmrs::objective::{ccrl_loss, ccrl_pair_term_graph};
use xmrs::retrieval::{pool_and_project_graph, retrieve, retrieve_all, Polarity, PooledSample, RetrievalMode};
use xmrs::training::{Model, PositiveFeatures};
use xmrs::{Dataset, Modality, ModelConfig, PerModality};

use super::*;

/// Runs `trials` random pools through both retrieval modes and counts the
/// (target modality, mode) cases that disagree with the brute-force oracle.
pub fn retrieval_mismatches(seed: u64, trials: usize, max_pool: usize, max_dim: usize) -> usize {
    let mut r = rng(seed);
    let mut mismatches = 0;
    for trial in 0..trials {
        let n = r.random_range(4..=max_pool);
        let dim = r.random_range(1..=max_dim);
        let pool = random_pooled(&mut r, n, dim, trial % 3 == 0);
        let target = &pool[r.random_range(0..n)];
        for mode in [RetrievalMode::Train, RetrievalMode::Inference] {
            for alpha in Modality::ALL {
                let anchor = target.embeddings[alpha].as_slice().unwrap();
                let expect_pos = PerModality::from_fn(|beta| match mode {
                    RetrievalMode::Train => brute_force_best(&pool, &target.sample_id, anchor, beta, |p| {
                        p == target.polarity && p != Polarity::Neutral
                    }),
                    RetrievalMode::Inference => brute_force_best(&pool, &target.sample_id, anchor, beta, |_| true),
                });
                let expect_neg = PerModality::from_fn(|beta| {
                    target
                        .polarity
                        .opposite()
                        .and_then(|o| brute_force_best(&pool, &target.sample_id, anchor, beta, |p| p == o))
                });
                let degenerate = expect_pos.iter().any(|(_, p)| p.is_none())
                    || (mode == RetrievalMode::Train && expect_neg.iter().any(|(_, p)| p.is_none()));
                let agrees = match retrieve(target, alpha, &pool, mode) {
                    Err(_) => degenerate,
                    Ok(set) => {
                        !degenerate
                            && Modality::ALL.iter().all(|&beta| {
                                let (i, s) = expect_pos[beta].unwrap();
                                let pos_ok = set.positives[beta].pool_index == i && set.positives[beta].similarity == s;
                                let neg_ok = match (&set.negatives, mode) {
                                    (Some(neg), RetrievalMode::Train) => neg[beta].pool_index == expect_neg[beta].unwrap().0,
                                    (None, RetrievalMode::Inference) => true,
                                    _ => false,
                                };
                                pos_ok && neg_ok
                            })
                    }
                };
                if !agrees {
                    mismatches += 1;
                }
            }
        }
    }
    mismatches
}

/// Nested loops over targets, target modalities and retrieved modalities.
/// Returns `(sum of terms, number of terms)`.
pub fn ccrl_oracle(targets: &[PooledSample], pool: &[PooledSample], gamma: f64) -> (f64, usize) {
    let mut sum = 0.0;
    let mut terms = 0;
    for t in targets {
        let Some(opp) = t.polarity.opposite() else { continue };
        let ok = Modality::ALL.iter().all(|&a| {
            Modality::ALL.iter().all(|&b| {
                let anchor = t.embeddings[a].as_slice().unwrap();
                brute_force_best(pool, &t.sample_id, anchor, b, |p| p == t.polarity).is_some()
                    && brute_force_best(pool, &t.sample_id, anchor, b, |p| p == opp).is_some()
            })
        });
        if !ok {
            continue;
        }
        for a in Modality::ALL {
            let anchor = t.embeddings[a].as_slice().unwrap();
            for b in Modality::ALL {
                let (pi, _) = brute_force_best(pool, &t.sample_id, anchor, b, |p| p == t.polarity).unwrap();
                let (ni, _) = brute_force_best(pool, &t.sample_id, anchor, b, |p| p == opp).unwrap();
                let dp = sq_dist(anchor, pool[pi].embeddings[b].as_slice().unwrap());
                let dn = sq_dist(anchor, pool[ni].embeddings[b].as_slice().unwrap());
                sum += dp + (gamma - dn).max(0.0);
                terms += 1;
            }
        }
    }
    (sum, terms)
}

/// Largest relative deviation of the library loss from the oracle over
/// `batches` random batches; `None` if a term count ever differs.
pub fn ccrl_max_rel_error(seed: u64, batches: usize) -> Option<f64> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for batch in 0..batches {
        let n = r.random_range(2..=12);
        let dim = r.random_range(1..=8);
        let mut pool = random_pooled(&mut r, n, dim, batch % 5 == 0);
        for p in &mut pool {
            for m in Modality::ALL {
                p.embeddings[m].mapv_inplace(|v| v * 1.5 + 0.1);
            }
        }
        let gamma = r.random_range(0.5..60.0);
        let retrievals: Vec<_> = pool.iter().map(|t| retrieve_all(t, &pool, RetrievalMode::Train).ok()).collect();
        let got = ccrl_loss(&pool, &retrievals, &pool, gamma).unwrap();
        let (sum, terms) = ccrl_oracle(&pool, &pool, gamma);
        if got.terms != terms || got.skipped + got.terms != n * 9 {
            return None;
        }
        worst = worst.max((got.sum - sum).abs() / sum.abs().max(1.0));
    }
    Some(worst)
}

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Worst relative error of the contrastive pair term's gradient w.r.t. its
/// three embeddings, over `cases` random triples kept away from the hinge.
pub fn ccrl_embedding_grad_error(seed: u64, cases: usize) -> f64 {
    let mut r = rng(seed);
    let store = ParamStore::new();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < cases {
        let dim = r.random_range(2..=8);
        let vecs: Vec<Mat> = (0..3).map(|_| to_mat(&random_rows(&mut r, 1, dim)).mapv(|v| 3.0 * v)).collect();
        let gamma = r.random_range(1.0..20.0);
        let dn = sq_dist(vecs[0].as_slice().unwrap(), vecs[2].as_slice().unwrap());
        if (gamma - dn).abs() <= 1e-3 {
            continue;
        }
        let eval = |v: &[Mat]| {
            let mut g = Graph::new(&store);
            let ids: Vec<Var> = v.iter().map(|m| g.constant(m.clone())).collect();
            let t = ccrl_pair_term_graph(&mut g, ids[0], ids[1], ids[2], gamma);
            g.scalar(t)
        };
        let mut g = Graph::new(&store);
        let ids: Vec<Var> = vecs.iter().map(|m| g.input(m.clone())).collect();
        let t = ccrl_pair_term_graph(&mut g, ids[0], ids[1], ids[2], gamma);
        let grads = g.backward(t);
        for (k, &id) in ids.iter().enumerate() {
            let analytic = grads.wrt(id).unwrap();
            for j in 0..dim {
                let mut plus = vecs.clone();
                plus[k][[0, j]] += FD_STEP;
                let mut minus = vecs.clone();
                minus[k][[0, j]] -= FD_STEP;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
                worst = worst.max(rel_err(analytic[[0, j]], numeric));
            }
        }
        checked += 1;
    }
    worst
}

/// Squared error of one sample plus a weighted contrastive term on pooled
/// embeddings, with fixed retrieved references.
pub fn full_loss(model: &Model, g: &mut Graph<'_>, data: &Dataset) -> Var {
    let sample = &data.samples[0];
    let positives: PositiveFeatures<'_> =
        PerModality::from_fn(|a| PerModality::from_fn(|b| &data.samples[1 + (a.index() + b.index()) % 3].features[b]));
    let pred = model.forward_sample(g, sample, Some(&positives)).unwrap();
    let y = g.constant(Mat::from_elem((1, 1), sample.label));
    let mse = g.sq_dist(pred, y);
    let proj = &model.layout().shared_projection;
    let embed = |g: &mut Graph<'_>, i: usize, m: Modality| {
        let x = g.constant(data.samples[i].features[m].data.clone());
        pool_and_project_graph(g, x, &proj[m])
    };
    let anchor = embed(g, 0, Modality::Text);
    let pos = embed(g, 1, Modality::Visual);
    let neg = embed(g, 2, Modality::Acoustic);
    // a large margin keeps the hinge active and away from its kink
    let contrast = ccrl_pair_term_graph(g, anchor, pos, neg, 1e3);
    let weighted = g.scale(contrast, 1e-3);
    g.sum(&[mse, weighted])
}

pub const PARAM_GROUPS: [&str; 7] = ["prompt.", "gen.", "self_attn.", "cae.", "fusion.", "input_proj.", "shared_proj."];

pub struct ModelGradCheck {
    pub worst: f64,
    pub worst_entry: String,
    /// Entries checked per [`PARAM_GROUPS`] prefix.
    pub per_group: [usize; 7],
    pub missing_gradients: Vec<String>,
}

/// Compares analytic and finite-difference gradients of [`full_loss`] on
/// `entries_per_tensor` random entries of every parameter tensor, at d_model 4.
pub fn full_model_grad_check(seed: u64, entries_per_tensor: usize) -> ModelGradCheck {
    let dims = tiny_dims();
    let config = ModelConfig {
        d_model: 4,
        d_shared: 3,
        prompt_len: 2,
        ..tiny_config(seed)
    };
    let data = generate_synthetic(4, &dims, 1.0, seed);
    let mut model = Model::new(&config, &dims).unwrap();
    let analytic = {
        let mut g = Graph::new(model.store());
        let loss = full_loss(&model, &mut g, &data);
        g.backward(loss).param_grads(&g)
    };
    let eval = |m: &Model| {
        let mut g = Graph::new(m.store());
        let loss = full_loss(m, &mut g, &data);
        g.scalar(loss)
    };

    let mut out = ModelGradCheck {
        worst: 0.0,
        worst_entry: String::new(),
        per_group: [0; 7],
        missing_gradients: Vec::new(),
    };
    let mut r = rng(seed + 1);
    let ids: Vec<(ParamId, String)> = model.store().iter().map(|(id, n, _)| (id, n.to_string())).collect();
    for (id, name) in ids {
        let Some(grad) = analytic.get(id) else {
            out.missing_gradients.push(name);
            continue;
        };
        let group = PARAM_GROUPS.iter().position(|p| name.starts_with(p)).expect("known parameter group");
        let (rows, cols) = model.store().get(id).dim();
        for _ in 0..entries_per_tensor {
            let (i, j) = (r.random_range(0..rows), r.random_range(0..cols));
            let original = model.store().get(id)[[i, j]];
            model.store_mut().get_mut(id)[[i, j]] = original + FD_STEP;
            let up = eval(&model);
            model.store_mut().get_mut(id)[[i, j]] = original - FD_STEP;
            let down = eval(&model);
            model.store_mut().get_mut(id)[[i, j]] = original;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let e = rel_err(grad[[i, j]], numeric);
            if e > out.worst {
                out.worst = e;
                out.worst_entry = format!("{name}[{i},{j}]: analytic {} numeric {numeric}", grad[[i, j]]);
            }
            out.per_group[group] += 1;
        }
    }
    out
}
