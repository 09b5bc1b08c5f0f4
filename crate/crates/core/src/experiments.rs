//! Experiment drivers behind the command-line tool: single runs, repeats,
//! hyperparameter sweeps, ablations, contrastive-variant comparison and
//! retrieval tracing. Every driver returns plain rows that serialize to CSV.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::path::Path;

use serde::Serialize;

use crate::config::{Ablation, ContrastiveVariant, ModelConfig};
use crate::dataset::{has_split, load_dataset, Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_with, Acc2Convention, EvalReport};
use crate::parallel::Parallelism;
use crate::training::{predict_split, Checkpoint, TraceRow, TrainOptions, TrainOutcome, Trainer};

pub const SWEEP_CSV_HEADER: &str = "swept_value,acc2,f1,mae,corr,acc7";
pub const LAMBDA_CSV_HEADER: &str = "swept_value,acc2,f1,mae,corr,acc7,initial_loss_gap";
pub const ABLATION_CSV_HEADER: &str = "variant,trainable_parameters,acc2,f1,mae,corr,acc7";
pub const TRACE_CSV_HEADER: &str = "step,sample_id,target_modality,retrieved_modality,pos_id,pos_sim,neg_id,neg_sim";
pub const LOG_CSV_HEADER: &str = "step,l_msa,l_ccrl,l_total,skipped_terms";

/// The splits found in a data directory. `train` is mandatory.
#[derive(Clone, Debug)]
pub struct DataSplits {
    pub train: Dataset,
    pub valid: Option<Dataset>,
    pub test: Option<Dataset>,
}

impl DataSplits {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let optional = |split| -> Result<Option<Dataset>> {
            if has_split(dir, split)? {
                load_dataset(dir, split).map(Some)
            } else {
                Ok(None)
            }
        };
        Ok(DataSplits {
            train: load_dataset(dir, Split::Train)?,
            valid: optional(Split::Valid)?,
            test: optional(Split::Test)?,
        })
    }

    pub fn get(&self, split: Split) -> Option<&Dataset> {
        match split {
            Split::Train => Some(&self.train),
            Split::Valid => self.valid.as_ref(),
            Split::Test => self.test.as_ref(),
        }
    }

    /// The split reported by experiments: test, else valid, else train.
    pub fn report_split(&self) -> &Dataset {
        self.test.as_ref().or(self.valid.as_ref()).unwrap_or(&self.train)
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub outcome: TrainOutcome,
    /// Best checkpoint evaluated on [`DataSplits::report_split`].
    pub report: EvalReport,
    pub trainable_parameters: usize,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub trace: bool,
    pub convention: Acc2Convention,
    pub parallelism: Option<Parallelism>,
}

impl RunOptions {
    fn parallelism(&self) -> Parallelism {
        self.parallelism.clone().unwrap_or_default()
    }
}

/// Trains on `train` (selecting on `valid` when present) and evaluates the
/// best checkpoint.
pub fn run_once(splits: &DataSplits, config: &ModelConfig, options: &RunOptions) -> Result<RunResult> {
    let parallelism = options.parallelism();
    let train_options = TrainOptions {
        trace: options.trace,
        parallelism: Some(parallelism.clone()),
    };
    let outcome = Trainer::new(config, &splits.train, splits.valid.as_ref(), train_options)?.run()?;
    let report = evaluate_checkpoint(&outcome.best, &splits.train, splits.report_split(), options.convention, &parallelism)?;
    let trainable_parameters = outcome.best.model()?.trainable_parameter_count();
    Ok(RunResult {
        outcome,
        report,
        trainable_parameters,
    })
}

pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    reference: &Dataset,
    eval: &Dataset,
    convention: Acc2Convention,
    parallelism: &Parallelism,
) -> Result<EvalReport> {
    let model = checkpoint.model()?;
    let preds = predict_split(&model, reference, eval, parallelism)?;
    evaluate_with(&preds, &eval.labels(), convention)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MetricRow {
    pub acc2: f64,
    pub f1: f64,
    pub mae: f64,
    pub corr: f64,
    pub acc7: f64,
}

impl From<&EvalReport> for MetricRow {
    fn from(r: &EvalReport) -> Self {
        MetricRow {
            acc2: r.acc2,
            f1: r.f1,
            mae: r.mae,
            corr: r.corr,
            acc7: r.acc7,
        }
    }
}

/// Mean and best over repeated runs. "Best" is the maximum for every metric
/// except MAE, where it is the minimum.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RepeatSummary {
    pub seeds: Vec<u64>,
    pub runs: Vec<EvalReport>,
    pub mean: MetricRow,
    pub best: MetricRow,
}

pub fn summarize_runs(seeds: Vec<u64>, runs: Vec<EvalReport>) -> Result<RepeatSummary> {
    if runs.is_empty() {
        return Err(Error::Input("no runs to summarize".into()));
    }
    let rows: Vec<MetricRow> = runs.iter().map(MetricRow::from).collect();
    let n = rows.len() as f64;
    let mean = MetricRow {
        acc2: rows.iter().map(|r| r.acc2).sum::<f64>() / n,
        f1: rows.iter().map(|r| r.f1).sum::<f64>() / n,
        mae: rows.iter().map(|r| r.mae).sum::<f64>() / n,
        corr: rows.iter().map(|r| r.corr).sum::<f64>() / n,
        acc7: rows.iter().map(|r| r.acc7).sum::<f64>() / n,
    };
    let max = |f: fn(&MetricRow) -> f64| rows.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
    let best = MetricRow {
        acc2: max(|r| r.acc2),
        f1: max(|r| r.f1),
        mae: rows.iter().map(|r| r.mae).fold(f64::INFINITY, f64::min),
        corr: max(|r| r.corr),
        acc7: max(|r| r.acc7),
    };
    Ok(RepeatSummary { seeds, runs, mean, best })
}

/// Runs `repeats` trainings with seeds `config.seed, config.seed + 1, ...`.
pub fn repeat_runs(splits: &DataSplits, config: &ModelConfig, repeats: usize, options: &RunOptions) -> Result<(Vec<RunResult>, RepeatSummary)> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    let mut results = Vec::with_capacity(repeats);
    let mut seeds = Vec::with_capacity(repeats);
    for k in 0..repeats as u64 {
        let seed = config.seed.wrapping_add(k);
        let run_config = ModelConfig { seed, ..config.clone() };
        results.push(run_once(splits, &run_config, options)?);
        seeds.push(seed);
    }
    let summary = summarize_runs(seeds, results.iter().map(|r| r.report).collect())?;
    Ok((results, summary))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub swept_value: String,
    pub acc2: f64,
    pub f1: f64,
    pub mae: f64,
    pub corr: f64,
    pub acc7: f64,
}

impl SweepRow {
    pub fn new(swept_value: String, r: &EvalReport) -> Self {
        SweepRow {
            swept_value,
            acc2: r.acc2,
            f1: r.f1,
            mae: r.mae,
            corr: r.corr,
            acc7: r.acc7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LambdaRow {
    pub swept_value: String,
    pub acc2: f64,
    pub f1: f64,
    pub mae: f64,
    pub corr: f64,
    pub acc7: f64,
    /// `|λ·l_ccrl − l_msa|` at the first training step.
    pub initial_loss_gap: f64,
}

pub fn sweep_prompt_len(splits: &DataSplits, base: &ModelConfig, values: &[usize], options: &RunOptions) -> Result<Vec<SweepRow>> {
    values
        .iter()
        .map(|&p| {
            let config = ModelConfig {
                prompt_len: p,
                ..base.clone()
            };
            let run = run_once(splits, &config, options)?;
            Ok(SweepRow::new(p.to_string(), &run.report))
        })
        .collect()
}

pub fn sweep_lambda(splits: &DataSplits, base: &ModelConfig, values: &[f64], options: &RunOptions) -> Result<Vec<LambdaRow>> {
    values
        .iter()
        .map(|&lambda| {
            let config = ModelConfig { lambda, ..base.clone() };
            let run = run_once(splits, &config, options)?;
            let first = run
                .outcome
                .log
                .first()
                .ok_or_else(|| Error::Config("training produced no steps".into()))?;
            let r = &run.report;
            Ok(LambdaRow {
                swept_value: lambda.to_string(),
                acc2: r.acc2,
                f1: r.f1,
                mae: r.mae,
                corr: r.corr,
                acc7: r.acc7,
                initial_loss_gap: (lambda * first.l_ccrl - first.l_msa).abs(),
            })
        })
        .collect()
}

pub fn compare_contrastive(splits: &DataSplits, base: &ModelConfig, options: &RunOptions) -> Result<Vec<SweepRow>> {
    [ContrastiveVariant::Ccrl, ContrastiveVariant::Infonce, ContrastiveVariant::None]
        .into_iter()
        .map(|variant| {
            let config = ModelConfig {
                contrastive_variant: variant,
                ..base.clone()
            };
            let run = run_once(splits, &config, options)?;
            Ok(SweepRow::new(variant.to_string(), &run.report))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub trainable_parameters: usize,
    pub acc2: f64,
    pub f1: f64,
    pub mae: f64,
    pub corr: f64,
    pub acc7: f64,
}

/// The full model followed by each single ablation.
pub fn ablate_suite(splits: &DataSplits, base: &ModelConfig, options: &RunOptions) -> Result<Vec<AblationRow>> {
    let mut variants = vec![("full".to_string(), Default::default())];
    for a in Ablation::ALL {
        variants.push((a.name().to_string(), [a].into_iter().collect()));
    }
    variants
        .into_iter()
        .map(|(name, ablations)| {
            let config = ModelConfig {
                ablations,
                ..base.clone()
            };
            let run = run_once(splits, &config, options)?;
            let r = &run.report;
            Ok(AblationRow {
                variant: name,
                trainable_parameters: run.trainable_parameters,
                acc2: r.acc2,
                f1: r.f1,
                mae: r.mae,
                corr: r.corr,
                acc7: r.acc7,
            })
        })
        .collect()
}

/// Mean retrieval similarities observed during one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SimilaritySummary {
    pub epoch: usize,
    pub mean_pos_sim: f64,
    pub mean_neg_sim: f64,
    pub rows: usize,
}

pub fn similarity_by_epoch(trace: &[TraceRow]) -> Vec<SimilaritySummary> {
    let mut acc: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
    for row in trace {
        let e = acc.entry(row.epoch).or_default();
        e.0 += row.pos_sim;
        e.1 += row.neg_sim;
        e.2 += 1;
    }
    acc.into_iter()
        .map(|(epoch, (pos, neg, n))| SimilaritySummary {
            epoch,
            mean_pos_sim: pos / n as f64,
            mean_neg_sim: neg / n as f64,
            rows: n,
        })
        .collect()
}

pub fn trace_retrieval(splits: &DataSplits, config: &ModelConfig, options: &RunOptions) -> Result<(Vec<TraceRow>, Vec<SimilaritySummary>)> {
    let options = RunOptions {
        trace: true,
        ..options.clone()
    };
    let run = run_once(splits, config, &options)?;
    let summary = similarity_by_epoch(&run.outcome.trace);
    Ok((run.outcome.trace, summary))
}

pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T], header: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_rows(path, file, rows, header)
}

/// Appends rows, writing the header only when the file is new or empty.
pub fn append_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T], header: &str) -> Result<()> {
    let path = path.as_ref();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let empty = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
    if empty {
        write_rows(path, file, rows, header)
    } else {
        write_rows(path, file, rows, "")
    }
}

fn write_rows<T: Serialize>(path: &Path, file: File, rows: &[T], header: &str) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if !header.is_empty() {
        w.write_record(header.split(',')).map_err(csv_err)?;
    }
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Row written by `eval --append-csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalCsvRow {
    pub checkpoint: String,
    pub split: String,
    pub acc2: f64,
    pub f1: f64,
    pub mae: f64,
    pub corr: f64,
    pub acc7: f64,
    pub n_eval: usize,
}

impl EvalCsvRow {
    pub fn new(checkpoint: String, split: String, r: &EvalReport) -> Self {
        EvalCsvRow {
            checkpoint,
            split,
            acc2: r.acc2,
            f1: r.f1,
            mae: r.mae,
            corr: r.corr,
            acc7: r.acc7,
            n_eval: r.n_eval,
        }
    }
}

pub const EVAL_CSV_HEADER: &str = "checkpoint,split,acc2,f1,mae,corr,acc7,n_eval";
