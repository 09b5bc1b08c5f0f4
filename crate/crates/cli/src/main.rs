use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use xmrs::dataset::{generate_synthetic, parse_dims, write_dataset};
use xmrs::experiments::{
    self, ablate_suite, append_csv, compare_contrastive, evaluate_checkpoint, repeat_runs, run_once, sweep_lambda,
    sweep_prompt_len, trace_retrieval, write_csv, DataSplits, EvalCsvRow, RunOptions, RunResult,
};
use xmrs::training::{TrainOptions, Trainer};
use xmrs::{Ablation, Acc2Convention, Checkpoint, ContrastiveVariant, ModelConfig, Parallelism, Split};

const LOG_HELP: &str = "Training log CSV columns: step,l_msa,l_ccrl,l_total,skipped_terms";
const SWEEP_HELP: &str = "CSV columns: swept_value,acc2,f1,mae,corr,acc7";
const LAMBDA_HELP: &str = "CSV columns: swept_value,acc2,f1,mae,corr,acc7,initial_loss_gap\n\
    initial_loss_gap is |lambda * l_ccrl - l_msa| at the first training step.";
const ABLATION_HELP: &str = "CSV columns: variant,trainable_parameters,acc2,f1,mae,corr,acc7\n\
    Rows: full, no_mmg, no_smg, no_mcae, no_scae.";
const TRACE_HELP: &str = "Trace CSV columns: step,sample_id,target_modality,retrieved_modality,pos_id,pos_sim,neg_id,neg_sim\n\
    Summary CSV columns: epoch,mean_pos_sim,mean_neg_sim,rows";
const EVAL_HELP: &str = "Appended CSV columns: checkpoint,split,acc2,f1,mae,corr,acc7,n_eval";

/// Retrieval-augmented multimodal sentiment regression.
///
/// Worker threads are capped by XMRS_THREADS (0 = single-threaded, fully
/// deterministic).
#[derive(Parser, Debug)]
#[command(name = "xmrs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (train, valid and test splits).
    GenSynthetic(GenArgs),
    /// Train a model and save checkpoints, the training log and a report.
    #[command(after_help = LOG_HELP)]
    Train(TrainArgs),
    /// Evaluate a checkpoint and print the report as JSON.
    #[command(after_help = EVAL_HELP)]
    Eval(EvalArgs),
    /// Train the full model and each single-component ablation.
    #[command(after_help = ABLATION_HELP)]
    AblateSuite(SuiteArgs),
    /// Train once per prompt length.
    #[command(after_help = SWEEP_HELP)]
    SweepPromptLen(SweepArgs<usize>),
    /// Train once per contrastive weight.
    #[command(after_help = LAMBDA_HELP)]
    SweepLambda(SweepArgs<f64>),
    /// Train while recording every retrieval decision.
    #[command(after_help = TRACE_HELP)]
    TraceRetrieval(TraceArgs),
    /// Train with ccrl, infonce and no contrastive term.
    #[command(after_help = SWEEP_HELP)]
    CompareContrastive(SuiteArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Training samples; valid and test get a quarter each.
    #[arg(long, default_value_t = 200)]
    n: usize,
    /// Per-modality sequence shapes, e.g. text=4x12,visual=4x8,acoustic=4x6.
    #[arg(long, default_value = "text=4x12,visual=4x8,acoustic=4x6")]
    dims: String,
    #[arg(long, default_value_t = 2.0)]
    signal: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
enum Convention {
    #[default]
    NonZero,
    NonNegative,
}

impl From<Convention> for Acc2Convention {
    fn from(c: Convention) -> Self {
        match c {
            Convention::NonZero => Acc2Convention::NonZero,
            Convention::NonNegative => Acc2Convention::NonNegative,
        }
    }
}

/// Data location plus model configuration. Flags override the config file.
#[derive(Args, Debug)]
struct ModelArgs {
    /// Directory holding manifest.json and split files.
    #[arg(long)]
    data: PathBuf,
    /// JSON file with model configuration fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated: no_mmg,no_smg,no_mcae,no_scae.
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<Ablation>,
    /// ccrl, infonce or none.
    #[arg(long)]
    contrastive: Option<ContrastiveVariant>,
    #[arg(long)]
    prompt_len: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    d_shared: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum, default_value_t)]
    acc2_convention: Convention,
}

impl ModelArgs {
    fn config(&self) -> Result<ModelConfig> {
        let mut c = match &self.config {
            Some(path) => ModelConfig::from_json_file(path)?,
            None => ModelConfig::default(),
        };
        macro_rules! set {
            ($($field:ident <- $flag:expr),*) => {
                $(if let Some(v) = $flag { c.$field = v; })*
            };
        }
        set!(seed <- self.seed, contrastive_variant <- self.contrastive, prompt_len <- self.prompt_len,
             d_model <- self.d_model, d_shared <- self.d_shared, lambda <- self.lambda, gamma <- self.gamma,
             epochs <- self.epochs, batch_size <- self.batch_size, learning_rate <- self.lr);
        c.ablations.extend(self.ablate.iter().copied());
        c.validate()?;
        Ok(c)
    }

    fn run_options(&self) -> RunOptions {
        RunOptions {
            trace: false,
            convention: self.acc2_convention.into(),
            parallelism: Some(Parallelism::from_env()),
        }
    }

    /// Validates flags, then loads the data.
    fn prepare(&self) -> Result<(ModelConfig, DataSplits)> {
        let config = self.config()?;
        let splits = DataSplits::load(&self.data).with_context(|| format!("loading {}", self.data.display()))?;
        Ok((config, splits))
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Output directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Independent runs with seeds seed, seed+1, ...; reports mean and best.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// Continue from a resumable checkpoint (last.json of an earlier run).
    #[arg(long, conflicts_with = "repeats")]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Data directory; its train split is the retrieval memory bank.
    #[arg(long)]
    data: PathBuf,
    /// train, valid or test.
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, value_enum, default_value_t)]
    acc2_convention: Convention,
    #[arg(long)]
    append_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SuiteArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs<T: Clone + Send + Sync + std::str::FromStr + 'static>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    #[command(flatten)]
    model: ModelArgs,
    /// Comma-separated values to sweep.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<T>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TraceArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
    /// Optional per-epoch similarity summary.
    #[arg(long)]
    summary_out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::AblateSuite(a) => {
            let (config, splits) = a.model.prepare()?;
            let rows = ablate_suite(&splits, &config, &a.model.run_options())?;
            write_csv(&a.out, &rows, experiments::ABLATION_CSV_HEADER)?;
            report_written(&a.out, rows.len())
        }
        Command::SweepPromptLen(a) => {
            let (config, splits) = a.model.prepare()?;
            let rows = sweep_prompt_len(&splits, &config, &a.values, &a.model.run_options())?;
            write_csv(&a.out, &rows, experiments::SWEEP_CSV_HEADER)?;
            report_written(&a.out, rows.len())
        }
        Command::SweepLambda(a) => {
            if let Some(bad) = a.values.iter().find(|v| !v.is_finite() || **v < 0.0) {
                bail!("lambda values must be finite and non-negative, got {bad}");
            }
            let (config, splits) = a.model.prepare()?;
            let rows = sweep_lambda(&splits, &config, &a.values, &a.model.run_options())?;
            write_csv(&a.out, &rows, experiments::LAMBDA_CSV_HEADER)?;
            report_written(&a.out, rows.len())
        }
        Command::TraceRetrieval(a) => {
            let (config, splits) = a.model.prepare()?;
            let (trace, summary) = trace_retrieval(&splits, &config, &a.model.run_options())?;
            write_csv(&a.out, &trace, experiments::TRACE_CSV_HEADER)?;
            if let Some(path) = &a.summary_out {
                write_csv(path, &summary, "epoch,mean_pos_sim,mean_neg_sim,rows")?;
            }
            for s in &summary {
                println!("epoch {:>3}: pos_sim {:.4} neg_sim {:.4}", s.epoch, s.mean_pos_sim, s.mean_neg_sim);
            }
            report_written(&a.out, trace.len())
        }
        Command::CompareContrastive(a) => {
            let (config, splits) = a.model.prepare()?;
            let rows = compare_contrastive(&splits, &config, &a.model.run_options())?;
            write_csv(&a.out, &rows, experiments::SWEEP_CSV_HEADER)?;
            report_written(&a.out, rows.len())
        }
    }
}

fn report_written(path: &Path, rows: usize) -> Result<()> {
    println!("wrote {rows} rows to {}", path.display());
    Ok(())
}

fn gen_synthetic(a: GenArgs) -> Result<()> {
    let dims = parse_dims(&a.dims)?;
    if a.n < 4 {
        bail!("--n must be at least 4");
    }
    if !a.signal.is_finite() || a.signal < 0.0 {
        bail!("--signal must be finite and non-negative");
    }
    let held_out = (a.n / 4).max(2);
    for (split, n, offset) in [(Split::Train, a.n, 0), (Split::Valid, held_out, 1), (Split::Test, held_out, 2)] {
        let mut data = generate_synthetic(n, &dims, a.signal, a.seed.wrapping_add(offset));
        data.split = split;
        write_dataset(&data, &a.out)?;
    }
    println!("wrote {} train, {held_out} valid and {held_out} test samples to {}", a.n, a.out.display());
    Ok(())
}

/// Prints pretty JSON, treating a closed stdout as success.
fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn save_run(dir: &Path, run: &RunResult) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    run.outcome.best.save(dir.join("checkpoint.json"))?;
    run.outcome.last.save(dir.join("last.json"))?;
    write_csv(dir.join("train_log.csv"), &run.outcome.log, experiments::LOG_CSV_HEADER)?;
    write_json(&dir.join("report.json"), &run.report)
}

fn train(a: TrainArgs) -> Result<()> {
    if a.repeats == 0 {
        bail!("--repeats must be at least 1");
    }
    let (config, splits) = a.model.prepare()?;
    let options = a.model.run_options();

    if let Some(path) = &a.resume {
        let ckpt = Checkpoint::load(path)?;
        let train_options = TrainOptions {
            trace: false,
            parallelism: options.parallelism.clone(),
        };
        // the checkpoint's own config wins; only the epoch budget can change
        let mut resumed = ckpt.clone();
        if let Some(epochs) = a.model.epochs {
            resumed.config.epochs = epochs.max(ckpt.epoch);
        }
        let outcome = Trainer::resume(&resumed, &splits.train, splits.valid.as_ref(), train_options)?.run()?;
        let parallelism = options.parallelism.clone().unwrap_or_default();
        let report = evaluate_checkpoint(&outcome.best, &splits.train, splits.report_split(), options.convention, &parallelism)?;
        let trainable_parameters = outcome.best.model()?.trainable_parameter_count();
        let run = RunResult {
            outcome,
            report,
            trainable_parameters,
        };
        save_run(&a.out, &run)?;
        print_json(&run.report)?;
        return Ok(());
    }

    if a.repeats == 1 {
        let run = run_once(&splits, &config, &options)?;
        save_run(&a.out, &run)?;
        print_json(&run.report)?;
        return Ok(());
    }
    let (runs, summary) = repeat_runs(&splits, &config, a.repeats, &options)?;
    for (run, seed) in runs.iter().zip(&summary.seeds) {
        save_run(&a.out.join(format!("seed-{seed}")), run)?;
    }
    write_json(&a.out.join("summary.json"), &summary)?;
    print_json(&summary)?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let splits = DataSplits::load(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    let Some(eval_set) = splits.get(a.split) else {
        bail!("{} has no {} split", a.data.display(), a.split);
    };
    let report = evaluate_checkpoint(&ckpt, &splits.train, eval_set, a.acc2_convention.into(), &Parallelism::from_env())?;
    print_json(&report)?;
    if let Some(path) = &a.append_csv {
        let row = EvalCsvRow::new(a.checkpoint.display().to_string(), a.split.to_string(), &report);
        append_csv(path, &[row], experiments::EVAL_CSV_HEADER)?;
    }
    Ok(())
}
