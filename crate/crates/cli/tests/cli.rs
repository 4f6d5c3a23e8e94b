use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

fn fctl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fctl"))
        .args(args)
        .current_dir(dir)
        .env("FCTL_THREADS", "1")
        .output()
        .expect("fctl runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = fctl(dir, args);
    assert!(
        out.status.success(),
        "fctl {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

const SMALL: [&str; 8] = [
    "--set", "patch=32", "--set", "overlap=8", "--set", "accum_steps=2", "--set", "lr0=3e-3",
];

fn small_dataset(dir: &Path, name: &str) {
    ok(dir, &["synth", "--out", name, "--num", "2", "--size", "96", "--patch", "32", "--cue-scale", "48", "--seed", "3"]);
}

#[test]
fn synth_is_bit_identical_across_runs() {
    let t = tempfile::tempdir().unwrap();
    for d in ["a", "b"] {
        ok(t.path(), &["synth", "--out", d, "--num", "4", "--size", "256", "--seed", "7"]);
    }
    let (a, b) = (tree(&t.path().join("a")), tree(&t.path().join("b")));
    assert_eq!(a.len(), 9);
    assert!(a.contains_key("manifest.csv") && a.contains_key("images/img_0003.ppm"));
    assert_eq!(a, b);
}

#[test]
fn grad_check_passes_and_reports_worst_error() {
    let t = tempfile::tempdir().unwrap();
    let stdout = ok(t.path(), &["grad-check", "--seed", "1"]);
    let last = stdout.lines().last().unwrap();
    let worst: f64 = last
        .strip_prefix("max relative error ")
        .and_then(|r| r.split_whitespace().next())
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| panic!("unexpected summary {last:?}"));
    assert!(worst <= 1e-4, "{worst}");
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn usage_and_config_errors_exit_one_on_stderr() {
    let t = tempfile::tempdir().unwrap();
    for args in [
        vec!["frobnicate"],
        vec!["synth"],
        vec!["eval", "--data", "nowhere"],
        vec!["grad-check", "--eps", "1"],
        vec!["infer", "--seg", "missing.fctl", "--image", "x.ppm", "--out", "y.pgm"],
    ] {
        let out = fctl(t.path(), &args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(!out.stderr.is_empty(), "{args:?}");
        assert!(out.stdout.is_empty(), "{args:?}");
    }
    std::fs::write(t.path().join("run.cfg"), "patch=32\n# note\ncolour=red\n").unwrap();
    small_dataset(t.path(), "d");
    let out = fctl(t.path(), &["train-seg", "--data", "d", "--out", "m.fctl", "--config", "run.cfg"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3") && err.contains("colour"), "{err}");
}

#[test]
fn flags_override_config_file() {
    let t = tempfile::tempdir().unwrap();
    small_dataset(t.path(), "d");
    std::fs::write(t.path().join("run.cfg"), "patch=32\noverlap=8\nepochs=5\nseed=4\naccum_steps=2\n").unwrap();
    ok(t.path(), &["train-seg", "--data", "d", "--out", "m.fctl", "--config", "run.cfg", "--epochs", "1", "--set", "seed=9"]);
    let cfg = std::fs::read_to_string(t.path().join("m.fctl.cfg")).unwrap();
    assert!(cfg.contains("epochs=1\n") && cfg.contains("seed=9\n"), "{cfg}");
    let log = std::fs::read_to_string(t.path().join("m.fctl.log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn train_infer_eval_round_trip_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path();
    small_dataset(dir, "d");
    for run in ["1", "2"] {
        let mut args = vec!["train-seg", "--data", "d", "--epochs", "2", "--seed", "5"];
        let (out, early) = (format!("seg{run}.fctl"), format!("early{run}.fctl"));
        args.extend(["--out", &out, "--early", &early]);
        args.extend(SMALL);
        ok(dir, &args);
    }
    let read = |n: &str| std::fs::read(dir.join(n)).unwrap();
    assert_eq!(read("seg1.fctl"), read("seg2.fctl"));
    assert_eq!(read("seg1.fctl.log.csv"), read("seg2.fctl.log.csv"));
    assert_eq!(read("early1.fctl"), read("early2.fctl"));
    assert_ne!(read("early1.fctl"), read("seg1.fctl"));
    assert_eq!(&read("seg1.fctl")[..4], b"FCTL");

    ok(dir, &["train-refine", "--data", "d", "--seg-early", "early1.fctl", "--out", "ref.fctl", "--epochs", "1"]);
    assert!(dir.join("ref.fctl.log.csv").exists());

    ok(dir, &["infer", "--seg", "seg1.fctl", "--refine", "ref.fctl", "--image", "d/images/img_0000.ppm", "--out", "p.pgm", "--probs", "p.ten"]);
    let labels = read("p.pgm");
    assert!(labels.starts_with(b"P5\n96 96 255\n"));
    assert!(labels[labels.len() - 96 * 96..].iter().all(|&v| v < 5));
    let probs = read("p.ten");
    assert_eq!(&probs[..4], b"TNSR");
    assert_eq!(probs.len(), 4 + 2 + 3 * 4 + 5 * 96 * 96 * 4);

    ok(dir, &["infer", "--seg", "seg1.fctl", "--data", "d", "--out-dir", "preds"]);
    let from_files = ok(dir, &["eval", "--data", "d", "--pred-dir", "preds"]);
    let from_model = ok(dir, &["eval", "--data", "d", "--seg", "seg1.fctl"]);
    assert_eq!(from_files, from_model);
    assert!(from_files.starts_with("class,iou,f1\n"));
    assert!(from_files.contains("\nmiou,f1_macro,accuracy\n"));
}

#[test]
fn refine_merge_without_refiner_is_a_config_error() {
    let t = tempfile::tempdir().unwrap();
    small_dataset(t.path(), "d");
    let mut args = vec!["train-seg", "--data", "d", "--out", "m.fctl", "--epochs", "1"];
    args.extend(SMALL);
    ok(t.path(), &args);
    let out = fctl(t.path(), &["eval", "--data", "d", "--seg", "m.fctl", "--set", "merge_mode=refine"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("refine"));
}

#[test]
fn bench_reports_latency_and_memory() {
    let t = tempfile::tempdir().unwrap();
    let stdout = ok(t.path(), &["bench", "--iters", "2", "--set", "patch=32"]);
    assert!(stdout.contains("forward_ms_per_patch="), "{stdout}");
    assert!(stdout.contains("peak_rss_kib="), "{stdout}");
}
