use std::path::Path;
use std::process::{Command, Output};

fn prefinfer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prefinfer")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A configuration small enough for every stage to finish in about a second.
fn small_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let p = dir.join("config.json");
    let text = format!(
        r#"{{
          "world": {{"num_episodes": 60}},
          "coldstart": {{"max_steps": 4, "batch_size": 8}},
          "rl": {{"steps": 3, "batch_size": 4}},
          "eval": {{"probe_size": 20, "test_size": 40, "generalization_size": 20}}
          {extra}
        }}"#
    );
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn gen_world_writes_the_configured_episode_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = prefinfer(&["gen-world", "--out", path(dir.path())]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(dir.path().join("gen-world/episodes.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 2000);
    assert!(dir.path().join("gen-world/resolved_config.json").exists());
}

#[test]
fn rl_without_checkpoint_is_a_validation_error_naming_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let out = prefinfer(&["rl", "--config", path(&cfg), "--out", path(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("inputs.checkpoint"), "{}", stderr(&out));

    let ok = prefinfer(&["rl", "--config", path(&cfg), "--out", path(&dir.path().join("run")), "--from-init"]);
    assert!(ok.status.success(), "{}", stderr(&ok));
}

#[test]
fn eval_on_explicit_checkpoint_and_test_file_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let train = dir.path().join("train");
    for stage in ["gen-world", "sft"] {
        let out = prefinfer(&[stage, "--config", path(&cfg), "--out", path(&train)]);
        assert!(out.status.success(), "{stage}: {}", stderr(&out));
    }
    let extra = format!(
        r#", "inputs": {{"checkpoint": "{}", "test_episodes": "{}"}}"#,
        path(&train.join("sft/checkpoint.json")),
        path(&train.join("gen-world/test.jsonl"))
    );
    let cfg = small_config(dir.path(), &extra);
    let evaldir = dir.path().join("eval-only");
    let out = prefinfer(&["eval", "--config", path(&cfg), "--out", path(&evaldir)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(evaldir.join("eval/summary.json")).unwrap()).unwrap();
    for key in ["acc_jud", "acc_gen", "reversal", "generalization", "config_hash", "seed"] {
        assert!(summary.get(key).is_some(), "summary lacks {key}");
    }
    assert_eq!(summary["reversal"].as_object().unwrap().len(), 2);
}

#[test]
fn outputs_are_write_once_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let args = ["gen-world", "--config", path(&cfg), "--out", path(dir.path())];
    assert!(prefinfer(&args).status.success());
    let again = prefinfer(&args);
    assert_eq!(again.status.code(), Some(1));
    assert!(stderr(&again).contains("--force"));
    let mut forced = args.to_vec();
    forced.push("--force");
    assert!(prefinfer(&forced).status.success());
}

#[test]
fn rerunning_from_resolved_config_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let run = dir.path().join("run");
    for stage in ["gen-world", "teach", "sft", "rl", "eval", "report"] {
        let out = prefinfer(&[stage, "--config", path(&cfg), "--out", path(&run)]);
        assert!(out.status.success(), "{stage}: {}", stderr(&out));
    }
    for (stage, files) in [
        ("gen-world", &["episodes.jsonl", "test.jsonl", "probe.jsonl"][..]),
        ("teach", &["cold.jsonl"]),
        ("sft", &["checkpoint.json", "sft_metrics.csv"]),
        ("rl", &["checkpoint.json", "metrics.csv"]),
        ("eval", &["eval_report.json", "summary.json"]),
        ("report", &["summary.json", "curves.svg"]),
    ] {
        let sdir = run.join(stage);
        let before: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(sdir.join(f)).unwrap()).collect();
        let resolved = sdir.join("resolved_config.json");
        let copy = dir.path().join(format!("{stage}.json"));
        std::fs::copy(&resolved, &copy).unwrap();
        let out = prefinfer(&[stage, "--config", path(&copy), "--force"]);
        assert!(out.status.success(), "{stage}: {}", stderr(&out));
        for (f, old) in files.iter().zip(&before) {
            assert_eq!(&std::fs::read(sdir.join(f)).unwrap(), old, "{stage}/{f} changed");
        }
        assert_eq!(std::fs::read(&resolved).unwrap(), std::fs::read(&copy).unwrap());
    }
}

#[test]
fn help_lists_every_key_with_its_default() {
    for args in [&["--help"][..], &["sft", "--help"]] {
        let out = prefinfer(args);
        assert!(out.status.success());
        let text = String::from_utf8_lossy(&out.stdout);
        for key in ["seed = 7", "world.dims = 8", "rl.clip_eps = 0.2", "decode.top_k = 10", "eval.judge_betas", "judge.url = null"] {
            assert!(text.contains(key), "help lacks {key}");
        }
    }
}

#[test]
fn bad_invocations_exit_with_validation_status() {
    let dir = tempfile::tempdir().unwrap();
    let typo = dir.path().join("typo.json");
    std::fs::write(&typo, r#"{"wrold": {}}"#).unwrap();
    let out = prefinfer(&["teach", "--config", path(&typo)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("wrold"));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"world": {"dims": 0}}"#).unwrap();
    assert_eq!(prefinfer(&["gen-world", "--config", path(&bad)]).status.code(), Some(1));
    assert_eq!(prefinfer(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(prefinfer(&["report", "--out", path(dir.path())]).status.code(), Some(1));
}

#[test]
fn report_rejects_metrics_without_rows() {
    let dir = tempfile::tempdir().unwrap();
    let metrics = dir.path().join("metrics.csv");
    std::fs::write(&metrics, "step,reward_mean,format_rate,acc_jud_probe,len_mean,degenerate_groups,loss\n").unwrap();
    let report = dir.path().join("eval_report.json");
    std::fs::write(
        &report,
        r#"{"source":"golden","acc_jud":1.0,"acc_gen":1.0,"reversal":{"normal":1.0,"reversed":1.0},"generalization":{},"sample_count":1,"decode_mode":"n/a"}"#,
    )
    .unwrap();
    let extra = format!(r#", "inputs": {{"metrics": "{}", "eval_report": "{}"}}"#, path(&metrics), path(&report));
    let cfg = small_config(dir.path(), &extra);
    let out = prefinfer(&["report", "--config", path(&cfg), "--out", path(&dir.path().join("r"))]);
    assert_ne!(out.status.code(), Some(0));
    assert!(!dir.path().join("r/report/curves.svg").exists());
}
