//! End-to-end training: batch retrieval, per-sample forward/backward, the
//! joint objective, AdamW updates and best-validation model selection.
//!
//! A step reads one parameter snapshot: pooled embeddings and retrieval for
//! the whole batch are computed first, then every sample's graph is built
//! and differentiated independently (possibly in parallel), and the
//! gradients are summed in batch order before a single optimizer update.

pub mod checkpoint;
pub mod model;
pub mod optimizer;

use std::collections::HashMap;

use serde::Serialize;

use crate::config::{ContrastiveVariant, ModelConfig};
use crate::dataset::{make_batches, Batch, Dataset, Sample};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, ParamGrads, Var};
use crate::metrics::{evaluate, EvalReport};
use crate::modality::{Modality, PerModality};
use crate::objective::{ccrl_pair_term_graph, infonce_anchor_graph, mse_loss, total_loss, LossBreakdown, PAIRS_PER_SAMPLE};
use crate::parallel::Parallelism;
use crate::retrieval::{pool_and_project_graph, retrieve_all, PooledSample, RetrievalMode, RetrievalSet};

pub use checkpoint::{BestSnapshot, Checkpoint, Tensor, CHECKPOINT_FORMAT};
pub use model::{ForwardOutput, Layout, Model, PositiveFeatures};
pub use optimizer::{clip_global_norm, AdamW, AdamWState};

/// One row of the per-step training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub step: u64,
    #[serde(skip)]
    pub epoch: usize,
    pub l_msa: f64,
    pub l_ccrl: f64,
    pub l_total: f64,
    pub skipped_terms: usize,
}

impl LogRow {
    fn new(step: u64, epoch: usize, b: &LossBreakdown) -> Self {
        LogRow {
            step,
            epoch,
            l_msa: b.l_msa,
            l_ccrl: b.l_ccrl,
            l_total: b.l_total,
            skipped_terms: b.skipped_contrastive_terms,
        }
    }
}

/// One retrieval decision observed during training.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: u64,
    #[serde(skip)]
    pub epoch: usize,
    pub sample_id: String,
    pub target_modality: Modality,
    pub retrieved_modality: Modality,
    pub pos_id: String,
    pub pos_sim: f64,
    pub neg_id: String,
    pub neg_sim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochSummary {
    /// 1-based.
    pub epoch: usize,
    pub mean_l_msa: f64,
    pub mean_l_total: f64,
    pub valid: Option<EvalReport>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Record a [`TraceRow`] for every retrieval in every step.
    pub trace: bool,
    pub parallelism: Option<Parallelism>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-validation parameters (the final ones without a validation set).
    pub best: Checkpoint,
    /// Resumable state after the last epoch.
    pub last: Checkpoint,
    pub log: Vec<LogRow>,
    pub trace: Vec<TraceRow>,
    pub epochs: Vec<EpochSummary>,
}

struct SampleStep {
    prediction: f64,
    contrast: f64,
    grads: ParamGrads,
}

/// Shared-space embeddings recorded on a graph, one node per (sample, modality).
struct EmbeddingCache {
    nodes: HashMap<(usize, Modality), Var>,
}

impl EmbeddingCache {
    fn get(&mut self, g: &mut Graph<'_>, model: &Model, samples: &[&Sample], j: usize, m: Modality) -> Var {
        *self.nodes.entry((j, m)).or_insert_with(|| {
            let x = g.constant(samples[j].features[m].data.clone());
            pool_and_project_graph(g, x, &model.layout().shared_projection[m])
        })
    }
}

pub struct Trainer<'d> {
    model: Model,
    optimizer: AdamW,
    train: &'d Dataset,
    valid: Option<&'d Dataset>,
    epoch: usize,
    step: u64,
    best: Option<BestSnapshot>,
    log: Vec<LogRow>,
    trace: Vec<TraceRow>,
    epochs: Vec<EpochSummary>,
    trace_enabled: bool,
    parallelism: Parallelism,
}

impl<'d> Trainer<'d> {
    pub fn new(config: &ModelConfig, train: &'d Dataset, valid: Option<&'d Dataset>, options: TrainOptions) -> Result<Self> {
        let model = Model::new(config, &train.dims)?;
        let optimizer = AdamW::new(config, model.store());
        Self::assemble(model, optimizer, train, valid, options, 0, 0, None)
    }

    /// Continues from a resumable checkpoint (one carrying optimizer state).
    pub fn resume(checkpoint: &Checkpoint, train: &'d Dataset, valid: Option<&'d Dataset>, options: TrainOptions) -> Result<Self> {
        let model = checkpoint.model()?;
        let state = checkpoint
            .optimizer
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        let optimizer = AdamW::with_state(model.config(), model.store(), state)?;
        Self::assemble(
            model,
            optimizer,
            train,
            valid,
            options,
            checkpoint.epoch,
            checkpoint.step,
            checkpoint.best.clone(),
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        model: Model,
        optimizer: AdamW,
        train: &'d Dataset,
        valid: Option<&'d Dataset>,
        options: TrainOptions,
        epoch: usize,
        step: u64,
        best: Option<BestSnapshot>,
    ) -> Result<Self> {
        model.check_dims(&train.dims)?;
        if let Some(v) = valid {
            model.check_dims(&v.dims)?;
        }
        if train.len() < 2 {
            return Err(Error::Config(format!("training needs at least 2 samples, got {}", train.len())));
        }
        Ok(Trainer {
            model,
            optimizer,
            train,
            valid,
            epoch,
            step,
            best,
            log: Vec::new(),
            trace: Vec::new(),
            epochs: Vec::new(),
            trace_enabled: options.trace,
            parallelism: options.parallelism.unwrap_or_default(),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn epochs_completed(&self) -> usize {
        self.epoch
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    /// Resumable state: current parameters, optimizer moments and the best
    /// snapshot so far.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.model.config().clone(),
            dims: self.model.dims().clone(),
            epoch: self.epoch,
            step: self.step,
            params: checkpoint::snapshot(self.model.store()),
            optimizer: Some(self.optimizer.state().clone()),
            best: self.best.clone(),
        }
    }

    fn best_checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.checkpoint();
        ckpt.optimizer = None;
        ckpt.best = None;
        if let Some(best) = &self.best {
            ckpt.epoch = best.epoch;
            ckpt.params = best.params.clone();
        }
        ckpt
    }

    fn epoch_seed(&self, epoch: usize) -> u64 {
        self.model
            .config()
            .seed
            .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(epoch as u64 + 1))
    }

    pub fn run_epoch(&mut self) -> Result<EpochSummary> {
        let epoch = self.epoch + 1;
        let batches = make_batches(self.train, self.model.config().batch_size, Some(self.epoch_seed(epoch)))?;
        let (mut msa, mut total) = (0.0, 0.0);
        for batch in &batches {
            let row = self.train_step(batch, epoch)?;
            msa += row.l_msa;
            total += row.l_total;
            self.log.push(row);
        }
        self.epoch = epoch;

        let valid = match self.valid {
            Some(v) if !v.is_empty() => {
                let bank = self.model.build_bank(self.train)?;
                let preds = self.model.predict(&v.samples, &bank, &self.parallelism)?;
                let report = evaluate(&preds, &v.labels())?;
                if self.best.as_ref().is_none_or(|b| report.mae < b.valid_mae) {
                    self.best = Some(BestSnapshot {
                        epoch,
                        valid_mae: report.mae,
                        params: checkpoint::snapshot(self.model.store()),
                    });
                }
                Some(report)
            }
            _ => None,
        };
        let summary = EpochSummary {
            epoch,
            mean_l_msa: msa / batches.len() as f64,
            mean_l_total: total / batches.len() as f64,
            valid,
        };
        self.epochs.push(summary.clone());
        Ok(summary)
    }

    /// Runs the remaining epochs up to the configured count.
    pub fn run(mut self) -> Result<TrainOutcome> {
        while self.epoch < self.model.config().epochs {
            self.run_epoch()?;
        }
        Ok(self.finish())
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            best: self.best_checkpoint(),
            last: self.checkpoint(),
            log: self.log,
            trace: self.trace,
            epochs: self.epochs,
        }
    }

    fn train_step(&mut self, batch: &Batch, epoch: usize) -> Result<LogRow> {
        let config = self.model.config().clone();
        let samples: Vec<&Sample> = batch.indices.iter().map(|&i| &self.train.samples[i]).collect();
        let n = samples.len();
        let pooled: Vec<PooledSample> = samples.iter().map(|s| self.model.pool(s)).collect::<Result<_>>()?;

        let mut retrievals: Vec<Option<PerModality<RetrievalSet>>> = Vec::with_capacity(n);
        let mut references: Vec<PerModality<RetrievalSet>> = Vec::with_capacity(n);
        for p in &pooled {
            match retrieve_all(p, &pooled, RetrievalMode::Train) {
                Ok(sets) => {
                    references.push(sets.clone());
                    retrievals.push(Some(sets));
                }
                Err(Error::DegeneratePool { .. }) => {
                    // the forward pass still needs references; fall back to
                    // label-free retrieval from the same pool
                    references.push(retrieve_all(p, &pooled, RetrievalMode::Inference)?);
                    retrievals.push(None);
                }
                Err(e) => return Err(e),
            }
        }
        let contributing = retrievals.iter().flatten().count() * PAIRS_PER_SAMPLE;
        let skipped = n * PAIRS_PER_SAMPLE - contributing;
        let contrast_on = config.contrastive_variant != ContrastiveVariant::None && contributing > 0;

        let positions: Vec<usize> = (0..n).collect();
        let model = &self.model;
        let outputs = self.parallelism.map(&positions, |&i| -> Result<SampleStep> {
            let mut g = Graph::new(model.store());
            let positives = PerModality::from_fn(|alpha| {
                PerModality::from_fn(|beta| &samples[references[i][alpha].positives[beta].pool_index].features[beta])
            });
            let pred = model.forward_sample(&mut g, samples[i], Some(&positives))?;
            let label = g.constant(Mat::from_elem((1, 1), samples[i].label));
            let sq = g.sq_dist(pred, label);
            let mut parts = vec![g.scale(sq, 1.0 / n as f64)];

            let mut contrast = 0.0;
            if let (true, Some(sets)) = (contrast_on, &retrievals[i]) {
                let mut cache = EmbeddingCache { nodes: HashMap::new() };
                let opposite = pooled[i].polarity.opposite().expect("polar target");
                let mut terms = Vec::with_capacity(PAIRS_PER_SAMPLE);
                for alpha in Modality::ALL {
                    let anchor = cache.get(&mut g, model, &samples, i, alpha);
                    let set = &sets[alpha];
                    for beta in Modality::ALL {
                        let pos = cache.get(&mut g, model, &samples, set.positives[beta].pool_index, beta);
                        let term = match config.contrastive_variant {
                            ContrastiveVariant::Ccrl => {
                                let neg_index = set.negatives.as_ref().expect("training retrieval")[beta].pool_index;
                                let neg = cache.get(&mut g, model, &samples, neg_index, beta);
                                ccrl_pair_term_graph(&mut g, anchor, pos, neg, config.gamma)
                            }
                            ContrastiveVariant::Infonce => {
                                let negs: Vec<Var> = (0..n)
                                    .filter(|&j| j != i && pooled[j].polarity == opposite)
                                    .map(|j| cache.get(&mut g, model, &samples, j, beta))
                                    .collect();
                                infonce_anchor_graph(&mut g, anchor, pos, &negs, config.infonce_temperature)
                            }
                            ContrastiveVariant::None => unreachable!("contrast disabled"),
                        };
                        terms.push(term);
                    }
                }
                let sum = g.sum(&terms);
                contrast = g.scalar(sum);
                parts.push(g.scale(sum, config.lambda / contributing as f64));
            }
            let total = g.sum(&parts);
            Ok(SampleStep {
                prediction: g.scalar(pred),
                contrast,
                grads: g.backward(total).param_grads(&g),
            })
        });

        let mut grads = ParamGrads::zeros_like(self.model.store());
        let mut predictions = Vec::with_capacity(n);
        let mut contrast_sum = 0.0;
        for out in outputs {
            let out = out?;
            grads.accumulate(&out.grads);
            predictions.push(out.prediction);
            contrast_sum += out.contrast;
        }
        let labels: Vec<f64> = samples.iter().map(|s| s.label).collect();
        let l_msa = mse_loss(&predictions, &labels)?;
        let l_ccrl = if contrast_on { contrast_sum / contributing as f64 } else { 0.0 };
        let mut breakdown = total_loss(l_msa, l_ccrl, config.lambda);
        breakdown.skipped_contrastive_terms = skipped;

        let step = self.step + 1;
        if !breakdown.l_total.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("l_total = {} (l_msa = {l_msa}, l_ccrl = {l_ccrl})", breakdown.l_total),
            });
        }
        let norm = clip_global_norm(&mut grads, config.grad_clip);
        if !norm.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("gradient norm = {norm}"),
            });
        }
        if self.trace_enabled {
            self.record_trace(step, epoch, &samples, &retrievals);
        }
        self.optimizer.step(self.model.store_mut(), &grads);
        self.step = step;
        Ok(LogRow::new(step, epoch, &breakdown))
    }

    fn record_trace(&mut self, step: u64, epoch: usize, samples: &[&Sample], retrievals: &[Option<PerModality<RetrievalSet>>]) {
        for (sample, sets) in samples.iter().zip(retrievals) {
            let Some(sets) = sets else { continue };
            for alpha in Modality::ALL {
                let set = &sets[alpha];
                let negatives = set.negatives.as_ref().expect("training retrieval");
                for beta in Modality::ALL {
                    self.trace.push(TraceRow {
                        step,
                        epoch,
                        sample_id: sample.id.clone(),
                        target_modality: alpha,
                        retrieved_modality: beta,
                        pos_id: set.positives[beta].sample_id.clone(),
                        pos_sim: set.positives[beta].similarity,
                        neg_id: negatives[beta].sample_id.clone(),
                        neg_sim: negatives[beta].similarity,
                    });
                }
            }
        }
    }
}

/// Trains for `config.epochs` epochs with default options.
pub fn train(train: &Dataset, valid: Option<&Dataset>, config: &ModelConfig) -> Result<TrainOutcome> {
    Trainer::new(config, train, valid, TrainOptions::default())?.run()
}

/// Inference-mode predictions of `model` on `eval`, retrieving from a bank
/// built over `reference` (the training split).
pub fn predict_split(model: &Model, reference: &Dataset, eval: &Dataset, parallelism: &Parallelism) -> Result<Vec<f64>> {
    model.check_dims(&eval.dims)?;
    let bank = model.build_bank(reference)?;
    model.predict(&eval.samples, &bank, parallelism)
}

pub fn evaluate_model(model: &Model, reference: &Dataset, eval: &Dataset, parallelism: &Parallelism) -> Result<EvalReport> {
    let preds = predict_split(model, reference, eval, parallelism)?;
    evaluate(&preds, &eval.labels())
}
