//! End-to-end checks of the `neurodec` binary: stage commands stop where
//! they claim, overrides take effect, reruns reproduce artifacts byte for
//! byte, and failures exit nonzero with a diagnostic on stderr.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn neurodec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neurodec"))
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn write_config(dir: &Path) -> String {
    let out = dir.join("out");
    let config = format!(
        r#"{{
  "seed": 7,
  "output_dir": {:?},
  "data": {{ "synthetic": {{ "subjects": 2, "sentences": 24, "voxels": 8, "dims": 4 }} }},
  "embeddings": {{
    "tuning": {{
      "tasks": 1,
      "steps": 8,
      "model": {{
        "n_layers": 1, "d_model": 8, "n_heads": 2,
        "max_seq_len": 24, "prefix_len": 2, "word_tokens": 32
      }}
    }}
  }},
  "cv": {{ "n_folds": 3, "lambda_grid": [0.01, 1.0] }}
}}
"#,
        out.display()
    );
    let path = dir.join("config.json");
    fs::write(&path, config).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn full_run_renders_a_report_and_reruns_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("out");

    let first = neurodec(&["run", "--config", &config]);
    assert!(
        first.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&first.stderr)
    );
    assert!(out.join("run_report.json").exists());
    assert!(out.join("provenance.json").exists());
    assert!(out.join("report/report.md").exists());
    let stdout = String::from_utf8_lossy(&first.stdout);
    assert!(
        stdout.contains("accuracy"),
        "summary missing from: {stdout}"
    );

    let report_bytes = fs::read(out.join("run_report.json")).unwrap();
    let second = neurodec(&["run", "--config", &config]);
    assert!(second.status.success());
    assert_eq!(fs::read(out.join("run_report.json")).unwrap(), report_bytes);
}

#[test]
fn stage_commands_stop_after_their_stage() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("staged");
    let out_arg = out.to_str().unwrap();

    let synth = neurodec(&["synth", "--config", &config, "--out", out_arg]);
    assert!(
        synth.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&synth.stderr)
    );
    assert!(out.join("data/stimulus.json").exists());
    assert!(out.join("run_report.json").exists());
    assert!(!out.join("embeddings").exists());

    let decode = neurodec(&["decode", "--config", &config, "--out", out_arg]);
    assert!(decode.status.success());
    assert!(out.join("embeddings/truth.json").exists());
    assert!(out.join("decode").exists());
    assert!(!out.join("eval").exists());

    let rsa = neurodec(&["rsa", "--config", &config, "--out", out_arg]);
    assert!(rsa.status.success());
    assert!(out.join("eval/score_table.csv").exists());
    assert!(out.join("rsa/tree.newick").exists());
    assert!(!out.join("report").exists());
}

#[test]
fn seed_override_changes_the_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out_a = dir.path().join("seed-a");
    let out_b = dir.path().join("seed-b");

    let a = neurodec(&[
        "run",
        "--config",
        &config,
        "--out",
        out_a.to_str().unwrap(),
        "--seed",
        "1",
    ]);
    let b = neurodec(&[
        "run",
        "--config",
        &config,
        "--out",
        out_b.to_str().unwrap(),
        "--seed",
        "2",
    ]);
    assert!(a.status.success() && b.status.success());

    let decoded_a = fs::read(out_a.join("embeddings/untuned.f32")).unwrap();
    let decoded_b = fs::read(out_b.join("embeddings/untuned.f32")).unwrap();
    assert_ne!(decoded_a, decoded_b);
}

#[test]
fn report_command_rerenders_from_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("out");

    assert!(neurodec(&["run", "--config", &config]).status.success());
    let rendered = out.join("report/report.md");
    let original = fs::read(&rendered).unwrap();
    fs::remove_file(&rendered).unwrap();

    let report = neurodec(&["report", out.to_str().unwrap()]);
    assert!(
        report.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&report.stderr)
    );
    assert_eq!(fs::read(&rendered).unwrap(), original);
}

#[test]
fn missing_config_exits_nonzero_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.json");
    let run = neurodec(&["run", "--config", missing.to_str().unwrap()]);
    assert!(!run.status.success());
    assert!(String::from_utf8_lossy(&run.stderr).starts_with("error:"));
}

#[test]
fn invalid_config_is_rejected_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config = dir.path().join("bad.json");
    // Two folds need at least four sentences.
    fs::write(
        &config,
        format!(
            r#"{{"seed": 1, "output_dir": {:?},
              "data": {{"synthetic": {{"subjects": 1, "sentences": 3, "voxels": 4, "dims": 2}}}},
              "cv": {{"n_folds": 2}}}}"#,
            out.display()
        ),
    )
    .unwrap();
    let run = neurodec(&["run", "--config", config.to_str().unwrap()]);
    assert!(!run.status.success());
    assert!(
        !out.exists(),
        "rejected runs must not create the output directory"
    );
}
