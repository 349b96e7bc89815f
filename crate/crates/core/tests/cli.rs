use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mdkl::experiment::{self, gaussian_pair, toy_pair, ExperimentConfig, Overrides, SweepAxis};
use serde_json::{json, Value};

fn mdkl(args: &[&str], config: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mdkl"));
    cmd.args(args);
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn toy_config(out: &Path, keep_prob: f64) -> Value {
    let (p, q) = toy_pair();
    json!({
        "p": {"inline": p},
        "q": {"inline": q},
        "sampler": {"operator": {"kind": "coordinate_mask", "keep_prob": keep_prob}},
        "grid": {"sigma_min": 0.01, "sigma_max": 1.0, "nodes": 64},
        "estimators": ["image", "measurement"],
        "n_image_samples": 1024,
        "n_measurements": 400,
        "seed": 11,
        "output_dir": out,
    })
}

fn read(path: impl AsRef<Path>) -> String {
    fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

fn csv_values(text: &str) -> Vec<Vec<f64>> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').filter_map(|c| c.parse().ok()).collect())
        .collect()
}

#[test]
fn reruns_are_byte_identical_and_workers_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "toy.json", &toy_config(&dir.path().join("unused"), 0.6));
    let outs: Vec<PathBuf> = ["a", "b", "c"].iter().map(|n| dir.path().join(n)).collect();
    for (out, workers) in outs.iter().zip(["1", "1", "4"]) {
        let o = mdkl(&["run", "--workers", workers, "--out", out.to_str().unwrap()], Some(&cfg));
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["integrand_image.csv", "integrand_measurement.csv"] {
        let a = read(outs[0].join(name));
        assert_eq!(a, read(outs[1].join(name)), "{name}");
        let (va, vc) = (csv_values(&a), csv_values(&read(outs[2].join(name))));
        assert_eq!(va.len(), vc.len());
        for (ra, rc) in va.iter().zip(&vc) {
            for (x, y) in ra.iter().zip(rc) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{name}: {x} vs {y}");
            }
        }
    }
}

#[test]
fn every_output_carries_hash_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), "toy.json", &toy_config(&out, 0.5));
    let report = experiment::run(&cfg, &Overrides { seed: Some(5), ..Default::default() }).unwrap();
    assert_eq!(report.seed, 5);
    assert_eq!(report.config_hash.len(), 64);
    let tag = format!("config_hash={} seed=5", report.config_hash);
    for name in ["integrand_image.csv", "integrand_measurement.csv"] {
        assert!(read(out.join(name)).starts_with(&format!("# {tag}")), "{name}");
    }
    let json: Value = serde_json::from_str(&read(out.join("report.json"))).unwrap();
    assert_eq!(json["config_hash"], report.config_hash.as_str());
    assert_eq!(json["seed"], 5);
    for est in json["estimates"].as_array().unwrap() {
        assert_eq!(est["config_hash"], report.config_hash.as_str());
        assert_eq!(est["seed"], 5);
    }
}

#[test]
fn single_value_sweep_matches_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), "toy.json", &toy_config(&out, 0.7));
    let run = experiment::run(&cfg, &Overrides::default()).unwrap();
    let (reports, summary) = experiment::sweep(&cfg, SweepAxis::KeepProb, &[0.7], &Overrides::default()).unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!(reports[0].config_hash, run.config_hash);
    for (a, b) in run.estimates.iter().zip(&reports[0].estimates) {
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert_eq!(a.series_csv, b.series_csv);
    }
    assert!(out.join("sweep_000").join("report.json").exists());
    assert_eq!(read(out.join("summary.csv")), summary);
}

/// A single sweep gives one noisy draw of |gap| per axis value, so the trend
/// is checked on the gap averaged over repeated sweeps with distinct seeds.
#[test]
fn gap_shrinks_as_more_coordinates_are_kept() {
    let values = [0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
    let reps = 60u64;
    let mut mean_gap = vec![0.0; values.len()];
    for r in 0..reps {
        let mut cfg = toy_config(Path::new("unused"), 0.5);
        cfg["grid"]["nodes"] = json!(16);
        cfg["n_image_samples"] = json!(256);
        cfg["n_measurements"] = json!(200);
        cfg["stats_draws"] = json!(1024);
        cfg["seed"] = json!(100 * r);
        let cfg: ExperimentConfig = serde_json::from_value(cfg).unwrap();
        let runs = experiment::sweep_configs(&cfg, SweepAxis::KeepProb, &values).unwrap();
        for (i, (run, &v)) in runs.iter().zip(&values).enumerate() {
            let report = experiment::execute(run, Path::new(".")).unwrap();
            mean_gap[i] += experiment::sweep_row(v, &report).abs_gap / reps as f64;
        }
    }
    let smooth: Vec<f64> = mean_gap.windows(3).map(|w| w.iter().sum::<f64>() / 3.0).collect();
    for w in smooth.windows(2) {
        assert!(w[1] <= w[0], "moving average not nonincreasing: {smooth:?} (gaps {mean_gap:?})");
    }
}

#[test]
fn summary_has_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "toy.json", &toy_config(&dir.path().join("out"), 0.5));
    let values = [0.3, 0.6, 0.9];
    let (_, summary) = experiment::sweep(&cfg, SweepAxis::KeepProb, &values, &Overrides::default()).unwrap();
    assert!(summary.starts_with("# axis=keep_prob config_hash="));
    assert_eq!(summary.lines().nth(1).unwrap(), "axis_value,kl_measurement,kl_image,abs_gap,seed,config_hash");
    let rows = csv_values(&summary);
    assert_eq!(rows.len(), 3);
    for (row, v) in rows.iter().zip(values) {
        assert_eq!(row[0], v);
        assert!((row[3] - (row[1] - row[2]).abs()).abs() < 1e-12);
    }
    let seeds: Vec<u64> = summary.lines().skip(2).map(|l| l.split(',').nth(4).unwrap().parse().unwrap()).collect();
    assert_eq!(seeds, [11, 12, 13]);
}

#[test]
fn measurement_noise_level_barely_moves_the_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let mut cfg = toy_config(&out, 0.8);
    cfg["n_measurements"] = json!(1000);
    let cfg = write_config(dir.path(), "toy.json", &cfg);
    let (reports, _) =
        experiment::sweep(&cfg, SweepAxis::SigmaZ, &[0.0, 0.1, 0.2, 0.5], &Overrides::default()).unwrap();
    let kl: Vec<f64> = reports
        .iter()
        .map(|r| r.estimate(mdkl::estimators::EstimatorMode::Measurement).unwrap().value)
        .collect();
    let lo = kl.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = kl.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!((hi - lo) / lo < 0.1, "{kl:?}");
}

#[test]
fn gaussian_pair_run_lands_near_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let (p, q) = gaussian_pair(10);
    let cfg = json!({
        "p": {"inline": p},
        "q": {"inline": q},
        "estimators": ["image"],
        "n_image_samples": 256,
        "output_dir": dir.path().join("out"),
    });
    let path = write_config(dir.path(), "g.json", &cfg);
    let o = mdkl(&["run"], Some(&path));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let kl: f64 = stdout
        .split_whitespace()
        .find_map(|t| t.strip_prefix("kl="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((kl - 12.5).abs() < 0.05 * 12.5, "{stdout}");
}

#[test]
fn malformed_config_exits_2_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, "{\n  \"p\": {\"inline\": {}},\n  \"bogus_field\": 3\n}\n").unwrap();
    let o = mdkl(&["run"], Some(&path));
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error:") && err.contains("line"), "{err}");

    let cfg = toy_config(&dir.path().join("out"), 0.5);
    let path = write_config(dir.path(), "ok.json", &cfg);
    let o = mdkl(&["sweep", "--axis", "n-measurements", "--values", "2.5"], Some(&path));
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn self_test_passes() {
    let o = mdkl(&["self-test"], None);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{stdout}");
    assert!(stdout.lines().count() >= 2 && !stdout.contains("[FAIL]"), "{stdout}");
}

#[test]
fn schema_is_valid_json_describing_the_config() {
    let o = mdkl(&["show-config-schema"], None);
    assert!(o.status.success());
    let schema: Value = serde_json::from_slice(&o.stdout).unwrap();
    let props = schema["properties"].as_object().unwrap();
    for key in ["p", "q", "sampler", "grid", "estimators", "seed", "adaptation"] {
        assert!(props.contains_key(key), "{key}");
    }
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_str().unwrap();
        if name.ends_with(".json") && !name.starts_with("toy_p") && !name.starts_with("toy_q") {
            ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"));
            seen += 1;
        }
    }
    assert!(seen >= 3);
}
