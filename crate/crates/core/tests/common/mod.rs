//! Independent loop-based oracles and fixtures shared by the integration
//! tests. Nothing here calls into the library's numerical code; it only reads
//! parameter values out of a store.

#![allow(dead_code)]

pub mod checks;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xmrs::dataset::{generate_synthetic, parse_dims, Dataset, Dims};
use xmrs::experiments::DataSplits;
use xmrs::graph::{Mat, ParamStore};
use xmrs::nn::Linear;
use xmrs::retrieval::{Polarity, PooledSample};
use xmrs::{ModelConfig, Modality, PerModality, Split};

pub type Rows = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_rows(rng: &mut impl Rng, r: usize, c: usize) -> Rows {
    (0..r).map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

pub fn to_rows(m: &Mat) -> Rows {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

pub fn to_mat(rows: &Rows) -> Mat {
    let c = rows.first().map_or(0, |r| r.len());
    Mat::from_shape_fn((rows.len(), c), |(i, j)| rows[i][j])
}

pub fn max_abs_diff(a: &Rows, b: &Rows) -> f64 {
    assert_eq!(a.len(), b.len(), "row count");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "column count");
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

/// Weight rows and bias of a linear layer, read from the store.
pub fn linear_params(store: &ParamStore, l: &Linear) -> (Rows, Vec<f64>) {
    (to_rows(store.get(l.weight)), store.get(l.bias).iter().copied().collect())
}

pub fn linear(x: &Rows, w: &Rows, b: &[f64]) -> Rows {
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|j| b[j] + (0..row.len()).map(|k| row[k] * w[k][j]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn apply_linear(store: &ParamStore, l: &Linear, x: &Rows) -> Rows {
    let (w, b) = linear_params(store, l);
    linear(x, &w, &b)
}

pub fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn map(a: &Rows, f: impl Fn(f64) -> f64) -> Rows {
    a.iter().map(|r| r.iter().map(|&x| f(x)).collect()).collect()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub struct AttentionWeights {
    pub q: (Rows, Vec<f64>),
    pub k: (Rows, Vec<f64>),
    pub v: (Rows, Vec<f64>),
}

/// Triple-loop scaled dot-product attention without the residual; returns
/// (output, attention weights).
pub fn attention(queries: &Rows, kv: &Rows, p: &AttentionWeights) -> (Rows, Rows) {
    let q = linear(queries, &p.q.0, &p.q.1);
    let k = linear(kv, &p.k.0, &p.k.1);
    let v = linear(kv, &p.v.0, &p.v.1);
    let d = queries[0].len() as f64;
    let mut out = Vec::new();
    let mut weights = Vec::new();
    for qi in &q {
        let scores: Vec<f64> = k
            .iter()
            .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
            .collect();
        let w = softmax(&scores);
        let row = (0..v[0].len()).map(|c| (0..v.len()).map(|j| w[j] * v[j][c]).sum()).collect();
        out.push(row);
        weights.push(w);
    }
    (out, weights)
}

pub fn layer_norm(x: &Rows, gamma: &[f64], beta: &[f64]) -> Rows {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + 1e-5).sqrt();
            r.iter().enumerate().map(|(j, v)| (v - mean) / sd * gamma[j] + beta[j]).collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn mean_rows(x: &Rows) -> Vec<f64> {
    let n = x.len() as f64;
    (0..x[0].len()).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Exhaustive retrieval: score every candidate, keep the first strict max.
/// Returns `(pool_index, similarity)` or `None` when no candidate is allowed.
pub fn brute_force_best(
    pool: &[PooledSample],
    target_id: &str,
    anchor: &[f64],
    retrieved: Modality,
    allowed: impl Fn(Polarity) -> bool,
) -> Option<(usize, f64)> {
    let scored: Vec<(usize, f64)> = pool
        .iter()
        .enumerate()
        .filter(|(_, c)| c.sample_id != target_id && allowed(c.polarity))
        .map(|(i, c)| (i, cosine(anchor, c.embeddings[retrieved].as_slice().unwrap())))
        .collect();
    let best = scored.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    scored.into_iter().find(|s| s.1 == best)
}

pub fn random_pooled(rng: &mut impl Rng, n: usize, dim: usize, allow_neutral: bool) -> Vec<PooledSample> {
    (0..n)
        .map(|i| {
            let polarity = match rng.random_range(0..if allow_neutral { 5 } else { 4 }) {
                0 | 1 => Polarity::Positive,
                2 | 3 => Polarity::Negative,
                _ => Polarity::Neutral,
            };
            // coarse values make exact ties likely
            let embeddings = PerModality::from_fn(|_| {
                ndarray::Array1::from_shape_fn(dim, |_| rng.random_range(-2i32..=2) as f64)
            });
            PooledSample {
                sample_id: format!("p{i}"),
                polarity,
                embeddings,
            }
        })
        .collect()
}

pub fn desk_dims() -> Dims {
    parse_dims("text=4x12,visual=4x8,acoustic=4x6").unwrap()
}

pub fn tiny_dims() -> Dims {
    parse_dims("text=3x4,visual=3x3,acoustic=3x2").unwrap()
}

/// Small config for structural tests.
pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        d_model: 6,
        d_shared: 5,
        prompt_len: 3,
        epochs: 2,
        batch_size: 4,
        learning_rate: 1e-3,
        seed,
        ..ModelConfig::default()
    }
}

/// The desk-scale configuration used by the learning criterion.
pub fn desk_config(seed: u64) -> ModelConfig {
    ModelConfig {
        d_model: 32,
        d_shared: 32,
        prompt_len: 16,
        epochs: 30,
        batch_size: 8,
        seed,
        ..ModelConfig::default()
    }
}

pub fn with_split(mut d: Dataset, split: Split) -> Dataset {
    d.split = split;
    d
}

/// Train (n) plus held-out valid and test splits drawn with different seeds.
pub fn synthetic_splits(n: usize, held_out: usize, dims: &Dims, signal: f64, seed: u64) -> DataSplits {
    DataSplits {
        train: generate_synthetic(n, dims, signal, seed),
        valid: Some(with_split(generate_synthetic(held_out, dims, signal, seed + 1000), Split::Valid)),
        test: Some(with_split(generate_synthetic(held_out, dims, signal, seed + 2000), Split::Test)),
    }
}
