use std::path::{Path, PathBuf};
use std::process::Command;

use cpt_cli::run::{sequence_dir, MATRIX_FILE};
use cpt_cli::{cmd_gen_data, cmd_run, cmd_table, cmd_verify, CliError, RunOptions};
use cpt_core::continual::ExperimentVariant;

fn experiment(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("experiment.toml");
    std::fs::write(&path, body).unwrap();
    path
}

fn small(output: &str, variants: &str, extra: &str) -> String {
    format!(
        "output = \"{output}\"\nseeds = [0, 1]\nvariants = [{variants}]\n{extra}\n\
         [train]\npreset = \"smoke\"\n\n\
         [synthetic]\nbase_seed = 3\ncorpus_size = 48\ndomains = [\"alpha\", \"delta\"]\n"
    )
}

fn cpt() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cpt"))
}

#[test]
fn cpt_run_writes_artifacts_and_never_forgets() {
    let tmp = tempfile::tempdir().unwrap();
    let path = experiment(tmp.path(), &small("out", "\"CPT\"", "baseline = true"));
    let outcome = cmd_run(&path, RunOptions::default()).unwrap();
    assert_eq!(outcome.reports.len(), 1);
    let report = &outcome.reports[0].1;
    assert_eq!(report.forgetting_accuracy.mean, 0.0);
    assert_eq!(report.forgetting_macro_f1.mean, 0.0);
    assert_eq!(report.forgetting_accuracy.std, 0.0);

    let order = vec!["alpha".to_string(), "delta".to_string()];
    let seq = sequence_dir(&outcome.output, ExperimentVariant::Cpt, &order);
    for seed in [0, 1] {
        let d = seq.join(format!("seed-{seed}"));
        for f in [MATRIX_FILE, "steps.log", "cells.json"] {
            assert!(d.join(f).is_file(), "missing {f} for seed {seed}");
        }
        for c in ["0-alpha", "1-delta"] {
            assert!(d.join("checkpoints").join(c).join("manifest.json").is_file());
        }
    }
    assert!(outcome.output.join("baseline").join("report.json").is_file());
    assert!(outcome.output.join("experiment.json").is_file());
    assert_eq!(outcome.lines.len(), 4);

    let ckpt = seq.join("seed-0").join("checkpoints");
    let r = cmd_verify(&ckpt.join("0-alpha"), &ckpt.join("1-delta"), 0).unwrap();
    assert!(r.entries_checked > 0);
    assert_eq!(r.max_abs_delta, 0.0);
    assert_eq!(r.entries_changed, 0);

    let table = cmd_table(&[outcome.output.clone()]).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3, "{table}");
    assert!(lines[0].contains("alpha MF1") && lines[0].contains("Forget R. Acc"));
    assert!(lines.iter().any(|l| l.starts_with("BACKBONE")));
    let cpt_row = lines.iter().find(|l| l.starts_with("CPT")).unwrap();
    // Two domains, two metrics each, plus four summary columns.
    assert_eq!(cpt_row.split_whitespace().count(), 2 + 4 + 4);
    let tokens: Vec<&str> = cpt_row.split_whitespace().collect();
    assert_eq!(tokens[tokens.len() - 2..], ["0.00±0.00", "0.00±0.00"]);
}

#[test]
fn rerun_gives_byte_identical_matrices() {
    let tmp = tempfile::tempdir().unwrap();
    let body = small("a", "\"SOFT_MASK\"", "save_checkpoints = false");
    let a = cmd_run(&experiment(tmp.path(), &body), RunOptions::default()).unwrap();
    let b = cmd_run(&experiment(tmp.path(), &body.replace("\"a\"", "\"b\"")), RunOptions { seed_offset: 0, workers: 2 }).unwrap();
    let order = vec!["alpha".to_string(), "delta".to_string()];
    for seed in [0, 1] {
        let f = |out: &Path| {
            std::fs::read(sequence_dir(out, ExperimentVariant::SoftMask, &order).join(format!("seed-{seed}")).join(MATRIX_FILE)).unwrap()
        };
        assert_eq!(f(&a.output), f(&b.output));
    }
    assert!(!sequence_dir(&a.output, ExperimentVariant::SoftMask, &order).join("seed-0").join("checkpoints").exists());
}

#[test]
fn config_errors_exit_with_two_and_name_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let path = experiment(tmp.path(), &small("out", "\"CPT\", \"FANCY\"", ""));
    let err = cmd_run(&path, RunOptions::default()).unwrap_err();
    assert!(matches!(err, CliError::Config { line: 3, .. }), "{err}");
    assert_eq!(err.exit_code(), 2);

    let out = cpt().arg("run").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("experiment.toml:3"), "{stderr}");

    let bad = experiment(tmp.path(), &small("out", "\"CPT\"", "").replace("preset = \"smoke\"", "preset = \"smoke\"\npost_lr = \"fast\""));
    let err = cmd_run(&bad, RunOptions::default()).unwrap_err();
    assert!(matches!(err, CliError::Config { line: 7, .. }), "{err}");
}

#[test]
fn runtime_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cpt().arg("verify").arg(tmp.path().join("nope")).arg(tmp.path().join("nope2")).args(["--task", "0"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = cpt().arg("table").arg(tmp.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn verify_rejects_a_task_missing_from_the_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let body = small("out", "\"CPT\"", "").replace("seeds = [0, 1]", "seeds = [0]");
    let outcome = cmd_run(&experiment(tmp.path(), &body), RunOptions::default()).unwrap();
    let order = vec!["alpha".to_string(), "delta".to_string()];
    let ckpt = sequence_dir(&outcome.output, ExperimentVariant::Cpt, &order).join("seed-0").join("checkpoints");
    assert!(matches!(cmd_verify(&ckpt.join("0-alpha"), &ckpt.join("1-delta"), 1), Err(CliError::Runtime { .. })));
}

#[test]
fn generated_files_run_as_domain_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let recipe = tmp.path().join("recipe.toml");
    std::fs::write(&recipe, "base_docs = 60\n\n[suite]\nbase_seed = 3\ncorpus_size = 48\ndomains = [\"alpha\", \"delta\"]\n").unwrap();
    let data = tmp.path().join("data");
    assert_eq!(cmd_gen_data(&recipe, &data).unwrap(), vec!["alpha", "delta"]);
    let train = std::fs::read_to_string(data.join("alpha").join("train.tsv")).unwrap();
    assert!(train.lines().all(|l| l.starts_with('c') && l.contains('\t')));

    let fragment = std::fs::read_to_string(data.join("domains.toml")).unwrap();
    let fragment = fragment.replace("= \"", "= \"data/").replace("name = \"data/", "name = \"");
    let (top, tables) = fragment.split_once('\n').unwrap();
    let body = format!("output = \"out\"\nseeds = [0]\nvariants = [\"CPT\"]\n{top}\n\n[train]\npreset = \"smoke\"\n{tables}");
    let outcome = cmd_run(&experiment(tmp.path(), &body), RunOptions::default()).unwrap();
    assert_eq!(outcome.reports[0].1.forgetting_accuracy.mean, 0.0);
    assert_eq!(outcome.reports[0].1.order, vec!["alpha", "delta"]);
}
