use std::path::Path;
use std::process::Command;

fn condsep(args: &[&str], envs: &[(&str, &str)]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_condsep")).args(args).envs(envs.iter().copied()).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn make_data_train_evaluate_separate_report() {
    let root = tempfile::tempdir().unwrap();
    let data_cfg = root.path().join("data.cfg");
    std::fs::write(&data_cfg, "num_classes = 4\ntrain = 2\nvalidation = 2\ntest = 2\nduration = 1.0\n").unwrap();
    let data = root.path().join("data");
    let made = condsep(&["make-data", "--config", s(&data_cfg), "--out", s(&data)], &[]);
    assert!(made.contains("6 examples"), "{made}");

    let exp_cfg = root.path().join("exp.cfg");
    std::fs::write(&exp_cfg, "num_blocks = 1\nbottleneck = 6\nhidden = 8\ncond_channels = 6\nmax_steps = 100\neval_examples = 1\nlog_every = 0\n").unwrap();
    let run = root.path().join("runs").join("run-0000");
    // the environment wins over the file
    let trained = condsep(
        &["train", "--data", s(&data), "--setting", "baseline_tdcn", "--basis", "learned", "--config", s(&exp_cfg), "--out", s(&run)],
        &[("CSEP_MAX_STEPS", "1")],
    );
    assert!(trained.contains("at step 1"), "{trained}");

    let ckpt = run.join("best.ckpt");
    let eval_dir = root.path().join("eval");
    let evaluated = condsep(&["evaluate", "--checkpoint", s(&ckpt), "--data", s(&data), "--split", "test", "--out", s(&eval_dir)], &[]);
    assert!(evaluated.contains("baseline_tdcn on test"), "{evaluated}");
    let csv = std::fs::read_to_string(eval_dir.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);

    let mix = data.join(&condsep::synthdata::DatasetManifest::load(&data).unwrap().entries[0].mixture_path);
    let sep_dir = root.path().join("sep");
    condsep(&["separate", "--checkpoint", s(&ckpt), "--in", s(&mix), "--out", s(&sep_dir)], &[]);
    assert!(sep_dir.join("source1.wav").is_file() && sep_dir.join("source2.wav").is_file());

    let table = condsep(&["report", "--runs", s(&root.path().join("runs"))], &[]);
    assert!(table.contains("| run-0000 | baseline_tdcn | learned |"), "{table}");
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn unknown_setting_fails_cleanly() {
    let out = Command::new(env!("CARGO_BIN_EXE_condsep"))
        .args(["train", "--data", "/nonexistent", "--setting", "nope", "--out", "/tmp/x"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown setting"));
}
