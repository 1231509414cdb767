use std::path::Path;
use std::process::{Command, Output};

fn charvoc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_charvoc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.cfg");
    let text = format!(
        "work_dir = {}\ntrain_utterances = 6\ntest_utterances = 2\nchannels = 16\nasr_hidden = 8\nasr_steps = 2\n\
         warmup_steps = 1\nbatch_size = 2\n{extra}",
        dir.join("work").display()
    );
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\n{}", o.status.code(), stderr(o));
}

#[test]
fn missing_key_exits_1_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "seed = 3\n").unwrap();
    let o = charvoc(&["warmup", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("error kind=config key=work_dir"), "{err}");
}

#[test]
fn bad_values_and_unknown_keys_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = charvoc(&["train", "--config", &cfg, "--set", "lambda_ctc=lots"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("key=lambda_ctc"), "{}", stderr(&o));
    let o = charvoc(&["train", "--config", &cfg, "--set", "lambda_cct=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("key=lambda_cct"), "{}", stderr(&o));
    let o = charvoc(&["train"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("error kind=usage"), "{}", stderr(&o));
}

#[test]
fn runtime_failures_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = charvoc(&["warmup", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("error kind=runtime msg="), "{}", stderr(&o));
}

#[test]
fn help_lists_the_keys_each_command_reads() {
    let o = charvoc(&["train", "--help"]);
    ok(&o);
    let out = String::from_utf8_lossy(&o.stdout);
    for key in ["work_dir", "lambda_ctc", "train_steps", "checkpoint_every", "channels"] {
        assert!(out.contains(key), "train --help lacks {key}");
    }
    assert!(!out.contains("asr_steps"));
    let o = charvoc(&["train-asr", "--help"]);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("asr_steps") && !out.contains("lambda_ctc"));
}

#[test]
fn identity_init_synth_ignores_conditioning() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let work = dir.path().join("work");
    ok(&charvoc(&["prepare-data", "--config", &cfg]));
    assert!(work.join("train/manifest.jsonl").exists() && work.join("vocab.txt").exists());
    ok(&charvoc(&["train-asr", "--config", &cfg]));
    ok(&charvoc(&["prepare-data", "--config", &cfg]));
    assert!(work.join("triplets/index.txt").exists());
    ok(&charvoc(&["warmup", "--config", &cfg]));

    let init = work.join("generator_init.ckpt");
    let input = work.join("test/audio/te00000.wav");
    let (with, without) = (dir.path().join("with.wav"), dir.path().join("without.wav"));
    let synth = |out: &Path, extra: Option<&str>| {
        let mut args = vec![
            "synth",
            "--config",
            &cfg,
            "--checkpoint",
            init.to_str().unwrap(),
            "--input",
            input.to_str().unwrap(),
            "--output",
            out.to_str().unwrap(),
        ];
        args.extend(extra);
        ok(&charvoc(&args));
    };
    synth(&with, None);
    synth(&without, Some("--no-conditioning"));
    let (a, b) = (std::fs::read(&with).unwrap(), std::fs::read(&without).unwrap());
    assert!(a.len() > 44);
    assert_eq!(a, b);

    let report = dir.path().join("clean.json");
    ok(&charvoc(&["eval", "--config", &cfg, "--passthrough", "--output", report.to_str().unwrap()]));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 2);
    assert!(json["skipped"].as_array().unwrap().is_empty());
}
