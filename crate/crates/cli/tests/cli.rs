use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--d-model", "8", "--d-shared", "8", "--prompt-len", "4", "--epochs", "2", "--batch-size", "4", "--lr", "1e-3",
];

fn xmrs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xmrs"))
        .args(args)
        .env("XMRS_THREADS", "0")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = xmrs(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen_data(dir: &Path) {
    ok(&["gen-synthetic", "--n", "24", "--dims", "text=3x4,visual=3x3,acoustic=3x2", "--seed", "3", "--out", p(dir)]);
}

fn with_small<'a>(head: &[&'a str]) -> Vec<&'a str> {
    with_small_but(head, &[])
}

/// `head` followed by the small-model flags, with some flag values replaced.
fn with_small_but<'a>(head: &[&'a str], over: &[(&str, &'a str)]) -> Vec<&'a str> {
    let mut args = head.to_vec();
    for pair in SMALL.chunks(2) {
        let value = over.iter().find(|(f, _)| *f == pair[0]).map_or(pair[1], |(_, v)| *v);
        args.extend([pair[0], value]);
    }
    args
}

fn csv_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn generate_train_and_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data);
    for f in ["manifest.json", "train.jsonl", "valid.jsonl", "test.jsonl"] {
        assert!(data.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(data.join("train.jsonl")).unwrap().lines().count(), 24);
    assert_eq!(fs::read_to_string(data.join("test.jsonl")).unwrap().lines().count(), 6);
    let before = fs::read(data.join("train.jsonl")).unwrap();

    let run = tmp.path().join("run");
    ok(&with_small(&["train", "--data", p(&data), "--out", p(&run)]));
    for f in ["checkpoint.json", "last.json", "train_log.csv", "report.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = csv_lines(&run.join("train_log.csv"));
    assert_eq!(log[0], "step,l_msa,l_ccrl,l_total,skipped_terms");
    assert!(log.len() > 2);

    let csv = tmp.path().join("evals.csv");
    let ckpt = run.join("checkpoint.json");
    let args = ["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--append-csv", p(&csv)];
    let report: serde_json::Value = serde_json::from_str(&ok(&args)).unwrap();
    assert_eq!(report["n_eval"], 6);
    ok(&args);
    ok(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--split", "valid", "--append-csv", p(&csv)]);
    let rows = csv_lines(&csv);
    assert_eq!(rows[0], "checkpoint,split,acc2,f1,mae,corr,acc7,n_eval");
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[1], rows[2]);
    assert!(rows[3].contains(",valid,"));

    assert_eq!(fs::read(data.join("train.jsonl")).unwrap(), before);
}

#[test]
fn reruns_produce_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data);
    let again = tmp.path().join("again");
    gen_data(&again);
    assert_eq!(fs::read(data.join("train.jsonl")).unwrap(), fs::read(again.join("train.jsonl")).unwrap());

    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        ok(&with_small(&["train", "--data", p(&data), "--out", p(out), "--seed", "9"]));
    }
    for f in ["checkpoint.json", "last.json", "train_log.csv", "report.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn resume_continues_from_last_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data);
    let full = tmp.path().join("full");
    ok(&with_small_but(&["train", "--data", p(&data), "--out", p(&full)], &[("--epochs", "3")]));

    let half = tmp.path().join("half");
    ok(&with_small(&["train", "--data", p(&data), "--out", p(&half)]));
    let resumed = tmp.path().join("resumed");
    let last = half.join("last.json");
    ok(&["train", "--data", p(&data), "--out", p(&resumed), "--resume", p(&last), "--epochs", "3"]);
    assert_eq!(fs::read(full.join("last.json")).unwrap(), fs::read(resumed.join("last.json")).unwrap());
}

#[test]
fn repeats_write_one_directory_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data);
    let out = tmp.path().join("rep");
    ok(&with_small(&["train", "--data", p(&data), "--out", p(&out), "--repeats", "2", "--seed", "4"]));
    assert!(out.join("seed-4/checkpoint.json").exists());
    assert!(out.join("seed-5/checkpoint.json").exists());
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seeds"], serde_json::json!([4, 5]));
}

#[test]
fn experiment_commands_write_documented_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data);
    let d = p(&data);

    let sweep = tmp.path().join("sweep.csv");
    ok(&with_small(&["sweep-prompt-len", "--data", d, "--values", "2,4,6", "--out", p(&sweep)]));
    let rows = csv_lines(&sweep);
    assert_eq!(rows[0], "swept_value,acc2,f1,mae,corr,acc7");
    assert_eq!(rows.len(), 4);
    assert!(rows[3].starts_with("6,"));

    let lambda = tmp.path().join("lambda.csv");
    ok(&with_small(&["sweep-lambda", "--data", d, "--values", "0,0.001", "--out", p(&lambda)]));
    let rows = csv_lines(&lambda);
    assert_eq!(rows[0], "swept_value,acc2,f1,mae,corr,acc7,initial_loss_gap");
    assert_eq!(rows.len(), 3);

    let suite = tmp.path().join("ablate.csv");
    ok(&with_small(&["ablate-suite", "--data", d, "--out", p(&suite)]));
    let rows = csv_lines(&suite);
    assert_eq!(rows[0], "variant,trainable_parameters,acc2,f1,mae,corr,acc7");
    let variants: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(variants, ["full", "no_mmg", "no_smg", "no_mcae", "no_scae"]);

    let compare = tmp.path().join("compare.csv");
    ok(&with_small(&["compare-contrastive", "--data", d, "--out", p(&compare)]));
    let variants: Vec<String> = csv_lines(&compare)[1..].iter().map(|r| r.split(',').next().unwrap().to_string()).collect();
    assert_eq!(variants, ["ccrl", "infonce", "none"]);

    let trace = tmp.path().join("trace.csv");
    let summary = tmp.path().join("summary.csv");
    ok(&with_small(&["trace-retrieval", "--data", d, "--out", p(&trace), "--summary-out", p(&summary)]));
    let rows = csv_lines(&trace);
    assert_eq!(rows[0], "step,sample_id,target_modality,retrieved_modality,pos_id,pos_sim,neg_id,neg_sim");
    assert!(rows.len() > 1);
    let rows = csv_lines(&summary);
    assert_eq!(rows[0], "epoch,mean_pos_sim,mean_neg_sim,rows");
    assert_eq!(rows.len(), 3);
}

#[test]
fn help_documents_csv_schemas() {
    for (cmd, header) in [
        ("train", "step,l_msa,l_ccrl,l_total,skipped_terms"),
        ("eval", "checkpoint,split,acc2,f1,mae,corr,acc7,n_eval"),
        ("ablate-suite", "variant,trainable_parameters,acc2,f1,mae,corr,acc7"),
        ("sweep-prompt-len", "swept_value,acc2,f1,mae,corr,acc7"),
        ("sweep-lambda", "initial_loss_gap"),
        ("trace-retrieval", "pos_id,pos_sim,neg_id,neg_sim"),
        ("compare-contrastive", "swept_value,acc2,f1,mae,corr,acc7"),
    ] {
        let help = ok(&[cmd, "--help"]);
        assert!(help.contains(header), "{cmd} --help lacks {header}");
    }
}

#[test]
fn bad_usage_exits_two_and_runtime_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data);

    assert_eq!(xmrs(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(xmrs(&["train", "--data", p(&data), "--ablate", "no_everything"]).status.code(), Some(2));
    assert_eq!(xmrs(&["sweep-lambda", "--data", p(&data), "--out", "x.csv"]).status.code(), Some(2));

    let missing = tmp.path().join("nowhere");
    let out = xmrs(&["train", "--data", p(&missing), "--out", p(&tmp.path().join("r"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest.json"));

    let out = xmrs(&with_small_but(&["train", "--data", p(&data)], &[("--batch-size", "1")]));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch_size"));
}
