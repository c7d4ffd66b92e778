use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_stconsist"));
    c.env_remove("STCONSIST_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
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

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

struct Fixture {
    tmp: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        fs::write(
            tmp.path().join("scene.json"),
            r#"{"sequences": 3, "frames_per_sequence": 4, "image_size": [12, 12]}"#,
        )
        .unwrap();
        fs::write(
            tmp.path().join("exp.json"),
            r#"{"train": {"phase1_steps": 6, "phase2_steps": 4, "labeled_per_step": 1, "pairs_per_step": 1, "widths": [4]},
                "fraction": 0.3, "fractions": [0.2, 0.5], "seeds": 1}"#,
        )
        .unwrap();
        let f = Fixture { tmp };
        ok(&[
            "gen-data",
            "--config",
            p(&f.path("scene.json")),
            "--out",
            p(&f.path("data")),
            "--seed",
            "5",
            "--eval-fraction",
            "0.34",
        ]);
        f
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.tmp.path().join(rel)
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let (data, cfg, out) = (self.path("data"), self.path("exp.json"), self.path(out));
        let mut args = vec!["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&out)];
        args.extend_from_slice(extra);
        run(&args)
    }
}

#[test]
fn gen_data_layout_and_determinism() {
    let f = Fixture::new();
    let data = f.path("data");
    assert!(data.join("manifest.json").exists());
    for s in 0..3 {
        for i in 0..4 {
            for kind in ["rgb", "depth", "seg"] {
                assert!(data.join(format!("seq_{s:03}/{kind}_{i:04}.stct")).exists());
            }
        }
    }
    ok(&[
        "gen-data",
        "--config",
        p(&f.path("scene.json")),
        "--out",
        p(&f.path("again")),
        "--seed",
        "5",
        "--eval-fraction",
        "0.34",
    ]);
    assert_eq!(tree(&data), tree(&f.path("again")));
}

#[test]
fn gen_data_default_config_shape() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    let stdout = ok(&["gen-data", "--out", p(&out)]);
    assert!(stdout.contains("24 sequences x 48 frames"));
    assert!(out.join("seq_023/seg_0047.stct").exists());
    assert!(!out.join("seq_024").exists());
    assert!(stdout.lines().any(|l| l.starts_with("class 7:")));
}

#[test]
fn invalid_class_count_is_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"classes": 1}"#).unwrap();
    let out = run(&["gen-data", "--config", p(&cfg), "--out", p(&tmp.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config error"));
}

#[test]
fn baseline_only_writes_no_phase2() {
    let f = Fixture::new();
    let out = f.train("run", &["--baseline-only"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(f.path("run/phase1/state.json").exists());
    assert!(!f.path("run/phase2").exists());
    assert!(!f.path("run/fig2.csv").exists());
    let report: serde_json::Value = serde_json::from_slice(&fs::read(f.path("run/report.json")).unwrap()).unwrap();
    assert_eq!(report["kind"], "train");
    assert!(report["consistency"].is_null());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let f = Fixture::new();
    assert!(f.train("full", &[]).status.success());
    assert!(f.train("split", &["--baseline-only"]).status.success());
    let resumed = f.train("split", &["--resume"]);
    assert!(resumed.status.success(), "{}", String::from_utf8_lossy(&resumed.stderr));
    let skip_timing = |t: BTreeMap<PathBuf, Vec<u8>>| {
        t.into_iter()
            .filter(|(k, _)| k != Path::new("timing.json"))
            .collect::<BTreeMap<_, _>>()
    };
    assert_eq!(skip_timing(tree(&f.path("full"))), skip_timing(tree(&f.path("split"))));
}

#[test]
fn resume_with_changed_config_is_refused() {
    let f = Fixture::new();
    assert!(f.train("run", &["--baseline-only"]).status.success());
    let out = f.train("run", &["--resume", "--lambda", "0.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("refusing to resume"));
}

#[test]
fn eval_reports_both_splits_reproducibly() {
    let f = Fixture::new();
    assert!(f.train("run", &["--baseline-only"]).status.success());
    let ck = f.path("run/phase1");
    let (data, e1, e2) = (f.path("data"), f.path("e1"), f.path("e2"));
    let args = ["eval", "--checkpoint", p(&ck), "--data", p(&data), "--out", p(&e1)];
    let first = ok(&args);
    assert!(first.contains("train: miou") && first.contains("held-out: miou"));
    let a = fs::read(f.path("e1/report.json")).unwrap();
    assert_eq!(ok(&args), first);
    assert_eq!(fs::read(f.path("e1/report.json")).unwrap(), a);
    let only = ok(&["eval", "--checkpoint", p(&ck), "--data", p(&data), "--split", "eval", "--out", p(&e2)]);
    assert!(!only.contains("train: miou") && only.contains("held-out: miou"));
}

#[test]
fn corrupted_checkpoint_is_checksum_error() {
    let f = Fixture::new();
    assert!(f.train("run", &["--baseline-only"]).status.success());
    let t = f.path("run/phase1/param_002.stct");
    let mut bytes = fs::read(&t).unwrap();
    let n = bytes.len();
    bytes[n - 2] ^= 0x11;
    fs::write(&t, bytes).unwrap();
    let out = run(&["eval", "--checkpoint", p(&f.path("run/phase1")), "--data", p(&f.path("data"))]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum mismatch"));
}

#[test]
fn missing_dataset_is_io_error() {
    let f = Fixture::new();
    let out = run(&[
        "train",
        "--data",
        p(&f.path("nowhere")),
        "--out",
        p(&f.path("run")),
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn diverging_run_exits_numeric_with_diagnostic() {
    let f = Fixture::new();
    let cfg = f.path("hot.json");
    fs::write(&cfg, r#"{"train": {"phase1_steps": 20, "widths": [4], "adam": {"lr": 1e30, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8}}}"#).unwrap();
    let out = run(&["train", "--data", p(&f.path("data")), "--config", p(&cfg), "--out", p(&f.path("run"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let diag: serde_json::Value = serde_json::from_slice(&fs::read(f.path("run/diagnostic.json")).unwrap()).unwrap();
    assert_eq!(diag["phase"], 1);
    assert!(diag["error"].as_str().unwrap().contains("step"));
}

#[test]
fn sweep_tables_plots_and_report_regeneration() {
    let f = Fixture::new();
    let (data, cfg) = (f.path("data"), f.path("exp.json"));
    let sweep = |out: &str| {
        let out = f.path(out);
        ok(&["sweep", "--data", p(&data), "--config", p(&cfg), "--out", p(&out), "--plot"])
    };
    let stdout = sweep("s1");
    assert!(stdout.contains("fraction 0.2"));
    let csv = fs::read_to_string(f.path("s1/table1.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "fraction,seed,labeled_frames,baseline_miou,consist_miou");
    // one seed row and one mean row per fraction
    assert_eq!(lines.len(), 1 + 2 * 2);
    assert!(lines[2].starts_with("0.2,mean,"));
    assert!(fs::read_to_string(f.path("s1/fig2.svg")).unwrap().starts_with("<svg"));
    assert!(f.path("s1/table1.svg").exists());

    let before = tree(&f.path("s1"));
    for name in ["table1.csv", "fig2.csv", "fig2.svg", "table1.svg"] {
        fs::remove_file(f.path("s1").join(name)).unwrap();
    }
    ok(&["report", "--run", p(&f.path("s1")), "--plot"]);
    assert_eq!(tree(&f.path("s1")), before);

    sweep("s2");
    assert_eq!(tree(&f.path("s1")), tree(&f.path("s2")));
}

#[test]
fn ablate_emits_seven_rows() {
    let f = Fixture::new();
    ok(&[
        "ablate",
        "--data",
        p(&f.path("data")),
        "--config",
        p(&f.path("exp.json")),
        "--out",
        p(&f.path("a")),
        "--plot",
        "--workers",
        "2",
    ]);
    let csv = fs::read_to_string(f.path("a/table2.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        rows,
        ["baseline", "uniform", "label_prior", "pixel_prior", "combined", "ce", "combined_ce"]
    );
    assert!(f.path("a/table2.svg").exists());
}

#[test]
fn thread_cap_must_be_numeric() {
    let f = Fixture::new();
    let out = bin()
        .env("STCONSIST_THREADS", "many")
        .args(["report", "--run", p(&f.path("data"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
