use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.ini")
}

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_water4mu"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn metrics_row(dir: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    let row = text.lines().nth(1).unwrap();
    // run_id, scenario and rte_sec differ by design
    let cols: Vec<&str> = row.split(',').collect();
    let n = cols.len();
    cols.iter()
        .enumerate()
        .filter(|&(i, _)| i >= 2 && i != n - 1)
        .map(|(_, c)| c.to_string())
        .collect()
}

#[test]
fn staged_commands_match_scenario() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke();
    let cfg = cfg.to_str().unwrap();
    let base = ["--config", cfg, "--set", "run.scenario=S2", "--set", "run.use_water4mu=true"];
    let staged = tmp.path().join("staged");
    for cmd in ["gen-data", "train", "train-wm", "water4mu", "unlearn", "eval"] {
        let mut args = vec![cmd];
        args.extend(base);
        ok(&run(&args, &staged));
    }
    for f in ["data.csv", "theta_o.ckpt", "codec.ckpt", "codec_w4mu.ckpt", "theta_u.ckpt", "rte_sec.txt", "metrics.csv"] {
        assert!(staged.join(f).exists(), "{f}");
    }
    let whole = tmp.path().join("whole");
    let mut args = vec!["scenario"];
    args.extend(base);
    let o = run(&args, &whole);
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).contains("config "));
    assert_eq!(metrics_row(&staged), metrics_row(&whole));
}

#[test]
fn quiet_suppresses_stdout() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["train", "--config", smoke().to_str().unwrap(), "--quiet"], tmp.path());
    ok(&o);
    assert!(o.stdout.is_empty());
}

#[test]
fn exit_codes_follow_error_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.ini");
    std::fs::write(&bad, "[nosuch]\nkey = 1\n").unwrap();
    assert_eq!(run(&["train", "--config", bad.to_str().unwrap()], tmp.path()).status.code(), Some(2));

    let o = run(&["scenario", "--set", "blo.lambda_diag=0"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));

    let o = run(&["unlearn", "--config", smoke().to_str().unwrap()], &tmp.path().join("empty"));
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("water4mu train"));

    let missing = tmp.path().join("missing.ini");
    assert_eq!(run(&["train", "--config", missing.to_str().unwrap()], tmp.path()).status.code(), Some(4));
}

#[test]
fn sweep_writes_one_row_per_lambda() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(
        &["sweep", "--config", smoke().to_str().unwrap(), "--lambdas", "1e-2,1", "--threads", "2", "--quiet"],
        tmp.path(),
    );
    ok(&o);
    let csv = std::fs::read_to_string(tmp.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(tmp.path().join("config.resolved.ini").exists());
}
