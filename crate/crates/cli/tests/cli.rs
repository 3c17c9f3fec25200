use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_cdhn");

const SMALL: &str = r#"
seed = 5
workers = 1

[dataset]
classes = 3
size = 8
waves = 2
train_per_class = 12
test_per_class = 6
data_seed = 11

[network]
n_layers = 5
split_point = 3
edge_bits = 1
stage_widths = [4, 6]
exits = 1
threshold = 0.6

[train]
epochs = 2
batch_size = 8
lr = 0.05

[sweep]
split_points = [2, 3]
edge_bits = [1, 32]
thresholds = [0.0, 0.6, 5.0]
"#;

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    (dir, cfg)
}

fn cdhn(cfg: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn field<'a>(line: &'a str, key: &str) -> &'a str {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {line}"))
}

#[test]
fn unknown_config_key_fails_with_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[network]\nsplit_pont = 2\n").unwrap();
    let o = cdhn(&cfg, dir.path(), &["sweep"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.starts_with("error kind=config message="), "{err}");
    assert!(err.contains("split_pont"), "{err}");
}

#[test]
fn usage_errors_are_machine_readable() {
    let o = Command::new(BIN).arg("frobnicate").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error kind=usage"), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let (dir, cfg) = setup();
    let o = cdhn(&cfg, dir.path(), &["eval", "--checkpoint", "/nonexistent/model.ckpt"]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error kind=io"), "{}", stderr(&o));
}

#[test]
fn train_then_eval() {
    let (dir, cfg) = setup();
    let out = dir.path().join("run");
    let o = cdhn(&cfg, &out, &["train"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("trained strategy=joint epochs=2"), "{}", stdout(&o));
    let log = std::fs::read_to_string(out.join("train.log")).unwrap();
    assert!(log.lines().any(|l| l.starts_with("epoch=1 exit=1 split=test acc=")), "{log}");

    let o = cdhn(&cfg, &out, &["eval", "--threshold", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o);
    assert_eq!(field(&line, "samples"), "18");
    assert_eq!(field(&line, "exit_pct"), "0.00");
    let traces = std::fs::read_to_string(out.join("eval_traces.csv")).unwrap();
    assert_eq!(traces.lines().count(), 19);
}

#[test]
fn sweep_report_and_determinism() {
    let (dir, cfg) = setup();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = cdhn(&cfg, out, &["sweep"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let line = stdout(&o);
        assert_eq!(field(&line, "points"), "4");
        assert_eq!(field(&line, "rows"), "12");
        assert_eq!(field(&line, "failures"), "0");
    }
    let sa = std::fs::read(a.join("sweep.csv")).unwrap();
    assert_eq!(sa, std::fs::read(b.join("sweep.csv")).unwrap());

    let o = cdhn(&cfg, &a, &["report"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("# 12 sweep rows recomputed from traces"), "{}", stdout(&o));

    let before = std::fs::read_dir(a.join("checkpoints")).unwrap().count();
    let o = cdhn(&cfg, &a, &["sweep"]);
    assert!(o.status.success());
    assert_eq!(std::fs::read_dir(a.join("checkpoints")).unwrap().count(), before);
    assert!(a.join("logs").join("M2_p1_e1.log").metadata().unwrap().len() > 0);
}

#[test]
fn tampered_trace_fails_report() {
    let (dir, cfg) = setup();
    let out = dir.path().join("s");
    assert!(cdhn(&cfg, &out, &["sweep"]).status.success());
    let trace = out.join("traces").join("M3_p1_e1_t0.6.csv");
    let text = std::fs::read_to_string(&trace).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut cols: Vec<String> = lines[1].split(',').map(String::from).collect();
    cols[1] = if cols[1] == "0" { "1".into() } else { "0".into() };
    lines[1] = cols.join(",");
    std::fs::write(&trace, lines.join("\n") + "\n").unwrap();
    let o = cdhn(&cfg, &out, &["report"]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error kind=format"), "{}", stderr(&o));
}

#[test]
fn compare_strategies_table() {
    let (dir, cfg) = setup();
    let o = cdhn(&cfg, dir.path(), &["compare-strategies"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("# CIFAR10: early exit % separate 24.1 joint 52.8; accuracy % separate 88.72 joint 89.16"));
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "dataset,exit_pct_separate,exit_pct_joint,acc_separate,acc_joint");
    assert_eq!(rows[1].split(',').count(), 5);
    assert!(text.contains("# trend joint_exit_pct >= separate_exit_pct: "));
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn start_server(cfg: &Path, ckpt: &Path) -> (Server, String) {
    let mut child = Command::new(BIN)
        .arg("--config")
        .arg(cfg)
        .args(["serve-cloud", "--bind", "127.0.0.1:0", "--checkpoint"])
        .arg(ckpt)
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening addr=").unwrap().to_string();
    (Server(child), addr)
}

#[test]
fn serve_cloud_and_run_edge() {
    let (dir, cfg) = setup();
    let out = dir.path().join("m");
    assert!(cdhn(&cfg, &out, &["train"]).status.success());
    let ckpt = out.join("model.ckpt");
    let (_server, addr) = start_server(&cfg, &ckpt);

    let traces = dir.path().join("edge.csv");
    let o = Command::new(BIN)
        .arg("--config")
        .arg(&cfg)
        .args(["run-edge", "--threshold", "0", "--cloud", &addr, "--checkpoint"])
        .arg(&ckpt)
        .arg("--trace-out")
        .arg(&traces)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o);
    assert_eq!(field(&line, "samples"), "18");
    assert_eq!(field(&line, "cloud"), "18");
    assert_eq!(field(&line, "failed"), "0");
    assert_eq!(field(&line, "counters_agree"), "true");
    assert_eq!(std::fs::read_to_string(&traces).unwrap().lines().count(), 19);

    let o = cdhn(&cfg, &out, &["eval", "--threshold", "0"]);
    let local_acc = field(&stdout(&o), "acc").to_string();
    assert_eq!(field(&line, "acc"), local_acc);
}

#[test]
fn run_edge_rejects_mismatched_checkpoint() {
    let (dir, cfg) = setup();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(cdhn(&cfg, &a, &["train"]).status.success());
    assert!(cdhn(&cfg, &b, &["--seed", "6", "train"]).status.success());
    let (_server, addr) = start_server(&cfg, &a.join("model.ckpt"));
    let o = Command::new(BIN)
        .arg("--config")
        .arg(&cfg)
        .args(["run-edge", "--threshold", "0", "--limit", "3", "--cloud", &addr, "--checkpoint"])
        .arg(b.join("model.ckpt"))
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error kind=protocol"), "{}", stderr(&o));
    assert_eq!(field(&stdout(&o), "failed"), "3");
}

#[test]
fn export_data_round_trips_through_idx_input() {
    let (dir, cfg) = setup();
    let out = dir.path().join("d");
    let o = cdhn(&cfg, &out, &["export-data"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(field(&stdout(&o), "train"), "36");
    assert_eq!(std::fs::metadata(out.join("test-images.idx")).unwrap().len(), 16 + 18 * 64);
    assert_eq!(std::fs::metadata(out.join("test-labels.idx")).unwrap().len(), 8 + 18);
}
