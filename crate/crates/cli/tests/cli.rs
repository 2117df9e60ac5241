use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::Value;

fn bnlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bnlab")).args(args).output().expect("binary runs")
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(format!("{name}.json"))
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

/// `(mean, biased var, count)` per batch, one channel.
fn write_log(dir: &Path, batches: &[(f64, f64, usize)]) -> PathBuf {
    let mut text = String::from("batch_index,channel,mean,var,count\n");
    for (i, (m, v, n)) in batches.iter().enumerate() {
        text += &format!("{i},0,{m},{v},{n}\n");
    }
    let path = dir.join("moments.csv");
    std::fs::write(&path, text).unwrap();
    path
}

fn estimate(input: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["estimate", "--input", input.to_str().unwrap()];
    args.extend_from_slice(extra);
    bnlab(&args)
}

#[test]
fn run_writes_every_artifact_and_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config("leakage");
    let mut csvs = Vec::new();
    for rep in 0..2 {
        let out = tmp.path().join(format!("rep{rep}"));
        let o = bnlab(&["run", "leakage", "--config", cfg.to_str().unwrap(), "--seed", "1", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
        for f in ["metrics.csv", "summary.json", "stats.json", "params.json"] {
            assert!(out.join(f).is_file(), "missing {f}");
        }
        csvs.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    let text = String::from_utf8(csvs.remove(0)).unwrap();
    assert_eq!(text.lines().next(), Some("run_id,scenario,step,split,stats_mode,metric,value"));
}

#[test]
fn unknown_scenario_exits_2_naming_the_valid_ones() {
    let o = bnlab(&["run", "resnet", "--config", config("leakage").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    for name in ["ema_vs_precise", "nbs_sweep", "frozen_finetune", "domain_adapt", "shared_head", "leakage"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn bad_configs_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"scenario": "leakage", "no_such_key": 1}"#).unwrap();
    let o = bnlab(&["run", "leakage", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    // a config written for another scenario
    let o = bnlab(&["run", "nbs_sweep", "--config", config("leakage").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn single_entry_log_returns_that_entry() {
    let tmp = tempfile::tempdir().unwrap();
    let log = write_log(tmp.path(), &[(0.25, 2.0, 4)]);
    for method in [&["--method", "ema", "--momentum", "0.3"][..], &["--method", "precise"]] {
        let v = stdout_json(&estimate(&log, method));
        assert_eq!(floats(&v["mean"]), [0.25]);
        assert_eq!(floats(&v["var"]), [2.0]);
        assert_eq!(v["count"], 4);
    }
    // naive and Bessel-corrected precise both report the unbiased B/(B-1) variance
    for method in [&["--method", "naive"][..], &["--method", "precise", "--bessel"]] {
        let v = stdout_json(&estimate(&log, method));
        assert_eq!(floats(&v["mean"]), [0.25]);
        assert!((floats(&v["var"])[0] - 2.0 * 4.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn naive_inflates_equal_variance_pairs_by_two() {
    // equal batch means, so precise returns the common biased variance and
    // naive its B/(B-1) = 2 correction
    let tmp = tempfile::tempdir().unwrap();
    let log = write_log(tmp.path(), &[(1.0, 0.5, 2), (1.0, 0.5, 2), (1.0, 0.5, 2)]);
    let precise = floats(&stdout_json(&estimate(&log, &["--method", "precise"]))["var"])[0];
    let naive = floats(&stdout_json(&estimate(&log, &["--method", "naive"]))["var"])[0];
    assert!((precise - 0.5).abs() < 1e-15);
    assert!((naive / precise - 2.0).abs() < 1e-12);
}

#[test]
fn precise_matches_the_concatenated_sample() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let xs: Vec<f64> = (0..64).map(|_| StandardNormal.sample(&mut rng)).collect();
    let moments = |s: &[f64]| {
        let m = s.iter().sum::<f64>() / s.len() as f64;
        (m, s.iter().map(|x| (x - m).powi(2)).sum::<f64>() / s.len() as f64, s.len())
    };
    let batches: Vec<_> = xs.chunks(4).map(moments).collect();
    assert_eq!(batches.len(), 16);
    let tmp = tempfile::tempdir().unwrap();
    let log = write_log(tmp.path(), &batches);
    let v = stdout_json(&estimate(&log, &["--method", "precise"]));
    let (m, var, n) = moments(&xs);
    assert!((floats(&v["mean"])[0] - m).abs() < 1e-12);
    assert!((floats(&v["var"])[0] - var).abs() < 1e-12);
    assert_eq!(v["count"], n);
}

#[test]
fn malformed_logs_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.csv");
    std::fs::write(&path, "batch,channel,mean,var,count\n0,0,1,1,2\n").unwrap();
    let o = estimate(&path, &["--method", "precise"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("malformed csv"));
    std::fs::write(&path, "batch_index,channel,mean,var,count\n0,0,1,-1,2\n").unwrap();
    assert!(!estimate(&path, &["--method", "precise"]).status.success());
}

#[test]
fn check_grad_passes_and_lists_each_layer_type_once() {
    let o = bnlab(&["check-grad"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8(o.stdout).unwrap();
    let names: Vec<&str> = text.lines().filter(|l| !l.starts_with("max ")).map(|l| l.split_whitespace().next().unwrap()).collect();
    let mut unique = names.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), names.len());
    for t in ["linear", "affine", "relu"] {
        assert!(names.contains(&t), "{names:?}");
    }
    assert!(names.iter().any(|n| n.starts_with("batch_norm")));
}

#[test]
fn check_grad_catches_a_flipped_bn_gradient() {
    let o = bnlab(&["check-grad", "--inject-bn-sign-flip"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}
