//! Config-driven runs: load an [`ExperimentConfig`], execute the requested
//! estimators (and optional adaptation), and write `report.json` plus one
//! `integrand_<mode>.csv` per estimator.
//!
//! Every numeric output carries the config hash and seed. With one worker
//! the CSVs are byte-identical across reruns; per-node work is sequential
//! and reduced in node order, so more workers give the same values.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adaptation::{adapt, AdaptationConfig, AdaptationReport, KlProbe};
use crate::error::Error;
use crate::estimators::{
    kl_image, kl_invertible, kl_measurement, EstimatorMode, EstimatorOptions, KlEstimate, SampleMode,
};
use crate::gmm::GaussianMixture;
use crate::measurement::{
    estimate_projection_stats, MeasurementDataset, OperatorKind, OperatorSampler, ProjectedMeasurement,
    ProjectionStats, SamplerSpec, DEFAULT_STATS_DRAWS,
};
use crate::quadrature::{fmt17, QuadratureRule, SigmaGrid};
use crate::rng::StreamSeed;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(String),
    #[error("assumption violated: {0}")]
    Assumption(Error),
    #[error("numerical divergence: {0}")]
    Divergence(Error),
    #[error("i/o error: {0}")]
    Io(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Assumption(_) => 3,
            RunError::Divergence(_) => 4,
            RunError::Io(_) => 1,
        }
    }
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        if e.is_assumption_violation() {
            RunError::Assumption(e)
        } else if matches!(e, Error::Divergence { .. }) {
            RunError::Divergence(e)
        } else {
            RunError::Config(e.to_string())
        }
    }
}

type RunResult<T> = std::result::Result<T, RunError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MixtureSource {
    Inline(GaussianMixture),
    /// Path to a mixture document, relative to the config file.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    /// Defaults to `0.01 · scale`.
    pub sigma_min: Option<f64>,
    /// Defaults to `1000`.
    pub sigma_max: Option<f64>,
    pub nodes: usize,
    /// Data-scale hint for the default lower limit.
    pub scale: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            sigma_min: None,
            sigma_max: None,
            nodes: 256,
            scale: 1.0,
        }
    }
}

impl GridSpec {
    pub fn build(&self) -> crate::Result<SigmaGrid> {
        let lo = self.sigma_min.unwrap_or(1e-2 * self.scale);
        let hi = self.sigma_max.unwrap_or(1e3);
        SigmaGrid::log_uniform(lo, hi, self.nodes)
    }
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}
fn default_estimators() -> Vec<EstimatorMode> {
    vec![EstimatorMode::Image, EstimatorMode::Measurement]
}
fn default_image_samples() -> usize {
    4096
}
fn default_measurements() -> usize {
    1000
}
fn default_stats_draws() -> usize {
    DEFAULT_STATS_DRAWS
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    /// In-distribution prior; measurements are drawn from it.
    pub p: MixtureSource,
    /// Out-of-distribution prior under evaluation.
    pub q: MixtureSource,
    #[serde(default)]
    pub sampler: Option<SamplerSpec>,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub quadrature: QuadratureRule,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<EstimatorMode>,
    #[serde(default = "default_image_samples")]
    pub n_image_samples: usize,
    #[serde(default = "default_measurements")]
    pub n_measurements: usize,
    #[serde(default)]
    pub sigma_z: f64,
    #[serde(default = "default_stats_draws")]
    pub stats_draws: usize,
    #[serde(default)]
    pub sampling: SampleMode,
    #[serde(default)]
    pub seed: u64,
    /// Use these projected measurements instead of drawing them from `p`.
    #[serde(default)]
    pub measurements_file: Option<PathBuf>,
    #[serde(default)]
    pub adaptation: Option<AdaptationConfig>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementFile {
    pub records: Vec<ProjectedMeasurement>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> RunResult<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> RunResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            RunError::Config(m) => RunError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> RunResult<()> {
        let bad = |m: &str| Err(RunError::Config(m.to_string()));
        if self.schema_version != SCHEMA_VERSION {
            return Err(RunError::Config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.estimators.is_empty() {
            return bad("estimators: at least one estimator required");
        }
        let needs_data = self
            .estimators
            .iter()
            .any(|m| matches!(m, EstimatorMode::Measurement | EstimatorMode::Invertible))
            || self.adaptation.is_some();
        if needs_data && self.sampler.is_none() {
            return bad("sampler: required by measurement, invertible and adaptation runs");
        }
        if needs_data && self.n_measurements == 0 && self.measurements_file.is_none() {
            return bad("n_measurements: must be at least 1");
        }
        if self.estimators.contains(&EstimatorMode::Image) && self.n_image_samples < 2 {
            return bad("n_image_samples: must be at least 2");
        }
        if !(self.sigma_z >= 0.0 && self.sigma_z.is_finite()) {
            return bad("sigma_z: must be nonnegative");
        }
        if self.stats_draws == 0 {
            return bad("stats_draws: must be at least 1");
        }
        if !(self.grid.scale > 0.0) {
            return bad("grid.scale: must be positive");
        }
        self.grid
            .build()
            .map_err(|e| RunError::Config(format!("grid: {e}")))?;
        if let Some(a) = &self.adaptation {
            a.validate()
                .map_err(|e| RunError::Config(format!("adaptation: {e}")))?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical config with the output directory blanked.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub riemann_left: bool,
    pub workers: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if self.riemann_left {
            cfg.quadrature = QuadratureRule::LeftRiemann;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub mode: EstimatorMode,
    pub value: f64,
    pub stderr: f64,
    pub n_samples: usize,
    pub rule: QuadratureRule,
    pub sigma_min: f64,
    /// Upper truncation of the σ integral.
    pub sigma_max: f64,
    pub grid: Vec<f64>,
    pub series_csv: String,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub mdkl: String,
    pub report_schema: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub seed: u64,
    pub estimates: Vec<EstimateRecord>,
    pub projection_stats: Option<ProjectionStats>,
    pub adaptation: Option<AdaptationReport>,
    pub adapted_q: Option<GaussianMixture>,
    pub wall_clock_seconds: f64,
    pub versions: Versions,
    #[serde(skip)]
    pub raw: Vec<KlEstimate>,
}

impl RunReport {
    pub fn estimate(&self, mode: EstimatorMode) -> Option<&EstimateRecord> {
        self.estimates.iter().find(|e| e.mode == mode)
    }

    fn provenance_header(&self) -> Vec<String> {
        vec![format!("config_hash={} seed={}", self.config_hash, self.seed)]
    }

    pub fn integrand_csv(&self, mode: EstimatorMode) -> Option<String> {
        self.raw
            .iter()
            .find(|e| e.mode == mode)
            .map(|e| e.to_csv(&self.provenance_header()))
    }
}

fn load_mixture(src: &MixtureSource, base: &Path, field: &str) -> RunResult<GaussianMixture> {
    match src {
        MixtureSource::Inline(g) => Ok(g.clone()),
        MixtureSource::File(rel) => {
            let path = base.join(rel);
            let text = fs::read_to_string(&path)
                .map_err(|e| RunError::Config(format!("{field}: {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| RunError::Config(format!("{field}: {}: {e}", path.display())))
        }
    }
}

/// Execute a validated config without touching the filesystem except to
/// read referenced inputs (relative to `base_dir`).
pub fn execute(cfg: &ExperimentConfig, base_dir: &Path) -> RunResult<RunReport> {
    cfg.validate()?;
    let started = Instant::now();
    let p = load_mixture(&cfg.p, base_dir, "p")?;
    let q = load_mixture(&cfg.q, base_dir, "q")?;
    if p.dim() != q.dim() {
        return Err(RunError::Config(format!(
            "q: dimension {} differs from p's {}",
            q.dim(),
            p.dim()
        )));
    }
    let grid = cfg.grid.build()?;
    let seed = StreamSeed::new(cfg.seed);
    let opts = EstimatorOptions {
        seed,
        rule: cfg.quadrature,
        sampling: cfg.sampling,
    };
    let hash = cfg.hash();

    let mut data_parts: Option<(MeasurementDataset, ProjectionStats)> = None;
    if let Some(spec) = &cfg.sampler {
        let sampler = OperatorSampler::new(spec.clone(), p.dim(), seed)?;
        let data = match &cfg.measurements_file {
            Some(rel) => {
                let path = base_dir.join(rel);
                let text = fs::read_to_string(&path)
                    .map_err(|e| RunError::Config(format!("measurements_file: {}: {e}", path.display())))?;
                let file: MeasurementFile = serde_json::from_str(&text)
                    .map_err(|e| RunError::Config(format!("measurements_file: {}: {e}", path.display())))?;
                MeasurementDataset::from_records(&sampler, file.records)?
            }
            None => MeasurementDataset::from_prior(&p, &sampler, cfg.n_measurements, cfg.sigma_z, seed)?,
        };
        let stats = estimate_projection_stats(&sampler, cfg.stats_draws)?;
        data_parts = Some((data, stats));
    }

    let mut raw = Vec::new();
    for mode in &cfg.estimators {
        let est = match mode {
            EstimatorMode::Image => kl_image(&p, &q, cfg.n_image_samples, &grid, &opts)?,
            EstimatorMode::Measurement => {
                let (data, stats) = data_parts.as_ref().expect("validated");
                kl_measurement(&p, &q, data, stats, &grid, &opts)?
            }
            EstimatorMode::Invertible => {
                let (data, _) = data_parts.as_ref().expect("validated");
                kl_invertible(&p, &q, data, &grid, &opts)?
            }
        };
        raw.push(est);
    }

    let (adaptation, adapted_q) = match &cfg.adaptation {
        Some(acfg) => {
            let (data, stats) = data_parts.as_ref().expect("validated");
            let probe = KlProbe {
                p: &p,
                grid: &grid,
                options: opts,
                image_samples: cfg.n_image_samples,
            };
            let (adapted, report) = adapt(&q, data, stats, acfg, &probe)?;
            (Some(report), Some(adapted))
        }
        None => (None, None),
    };

    let header = vec![format!("config_hash={hash} seed={}", cfg.seed)];
    let estimates = raw
        .iter()
        .map(|e| EstimateRecord {
            mode: e.mode,
            value: e.value,
            stderr: e.stderr,
            n_samples: e.n_samples,
            rule: e.rule,
            sigma_min: e.grid.sigma_min(),
            sigma_max: e.grid.sigma_max(),
            grid: e.grid.nodes().to_vec(),
            series_csv: e.to_csv(&header),
            config_hash: hash.clone(),
            seed: cfg.seed,
        })
        .collect();

    Ok(RunReport {
        config_hash: hash,
        seed: cfg.seed,
        estimates,
        projection_stats: data_parts.map(|(_, s)| s),
        adaptation,
        adapted_q,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        versions: Versions {
            mdkl: env!("CARGO_PKG_VERSION").to_string(),
            report_schema: SCHEMA_VERSION,
        },
        raw,
    })
}

fn io_err(path: &Path, e: std::io::Error) -> RunError {
    RunError::Io(format!("{}: {e}", path.display()))
}

/// Write `report.json`, `integrand_<mode>.csv` and, after adaptation,
/// `adapted_q.json` into `dir`.
pub fn write_outputs(report: &RunReport, dir: &Path) -> RunResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = dir.join("report.json");
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    for est in &report.raw {
        let path = dir.join(format!("integrand_{}.csv", est.mode.as_str()));
        let csv = est.to_csv(&report.provenance_header());
        fs::write(&path, csv).map_err(|e| io_err(&path, e))?;
    }
    if let Some(g) = &report.adapted_q {
        let path = dir.join("adapted_q.json");
        let text = serde_json::to_string_pretty(g).expect("mixture serializes");
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> RunResult<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(1).max(1))
        .build()
        .map_err(|e| RunError::Io(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn base_dir(config_path: &Path) -> PathBuf {
    config_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Load, run and write outputs. Single-threaded unless `workers` is set.
pub fn run(config_path: &Path, overrides: &Overrides) -> RunResult<RunReport> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    overrides.apply(&mut cfg);
    let base = base_dir(config_path);
    let report = with_workers(overrides.workers, || execute(&cfg, &base))??;
    write_outputs(&report, &cfg.output_dir)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    KeepProb,
    NMeasurements,
    SigmaZ,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::KeepProb => "keep_prob",
            SweepAxis::NMeasurements => "n_measurements",
            SweepAxis::SigmaZ => "sigma_z",
        }
    }

    fn apply(self, cfg: &mut ExperimentConfig, value: f64) -> RunResult<()> {
        match self {
            SweepAxis::KeepProb => {
                let spec = cfg
                    .sampler
                    .as_mut()
                    .ok_or_else(|| RunError::Config("sweep keep_prob: config has no sampler".into()))?;
                match &mut spec.operator {
                    OperatorKind::CoordinateMask { keep_prob } | OperatorKind::PatchInpainting { keep_prob, .. } => {
                        *keep_prob = value
                    }
                    _ => {
                        return Err(RunError::Config(
                            "sweep keep_prob: sampler has no keep probability".into(),
                        ))
                    }
                }
            }
            SweepAxis::NMeasurements => {
                if !(value >= 1.0 && value.fract() == 0.0) {
                    return Err(RunError::Config(format!(
                        "sweep n_measurements: {value} is not a positive integer"
                    )));
                }
                cfg.n_measurements = value as usize;
            }
            SweepAxis::SigmaZ => cfg.sigma_z = value,
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis_value: f64,
    pub kl_measurement: f64,
    pub kl_image: f64,
    pub abs_gap: f64,
    pub seed: u64,
    pub config_hash: String,
}

/// One run per value; run `i` uses the base seed plus `i`.
pub fn sweep_configs(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
) -> RunResult<Vec<ExperimentConfig>> {
    if values.is_empty() {
        return Err(RunError::Config("sweep: no values given".into()));
    }
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let mut cfg = base.clone();
            axis.apply(&mut cfg, v)?;
            cfg.seed = StreamSeed::new(base.seed).offset(i as u64).value();
            for mode in [EstimatorMode::Image, EstimatorMode::Measurement] {
                if !cfg.estimators.contains(&mode) {
                    cfg.estimators.push(mode);
                }
            }
            cfg.output_dir = base.output_dir.join(format!("sweep_{i:03}"));
            cfg.validate()?;
            Ok(cfg)
        })
        .collect()
}

pub fn sweep_row(axis_value: f64, report: &RunReport) -> SweepRow {
    let m = report
        .estimate(EstimatorMode::Measurement)
        .map_or(f64::NAN, |e| e.value);
    let i = report.estimate(EstimatorMode::Image).map_or(f64::NAN, |e| e.value);
    SweepRow {
        axis_value,
        kl_measurement: m,
        kl_image: i,
        abs_gap: (m - i).abs(),
        seed: report.seed,
        config_hash: report.config_hash.clone(),
    }
}

pub fn summary_csv(axis: SweepAxis, base_hash: &str, base_seed: u64, rows: &[SweepRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# axis={} config_hash={base_hash} seed={base_seed}", axis.as_str());
    out.push_str("axis_value,kl_measurement,kl_image,abs_gap,seed,config_hash\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            fmt17(r.axis_value),
            fmt17(r.kl_measurement),
            fmt17(r.kl_image),
            fmt17(r.abs_gap),
            r.seed,
            r.config_hash
        );
    }
    out
}

/// Run a sweep and write each run's outputs plus `summary.csv`.
pub fn sweep(
    config_path: &Path,
    axis: SweepAxis,
    values: &[f64],
    overrides: &Overrides,
) -> RunResult<(Vec<RunReport>, String)> {
    let mut base = ExperimentConfig::load(config_path)?;
    overrides.apply(&mut base);
    let dir = base_dir(config_path);
    let configs = sweep_configs(&base, axis, values)?;
    let mut reports = Vec::with_capacity(configs.len());
    let mut rows = Vec::with_capacity(configs.len());
    for (cfg, &v) in configs.iter().zip(values) {
        let report = with_workers(overrides.workers, || execute(cfg, &dir))??;
        write_outputs(&report, &cfg.output_dir)?;
        rows.push(sweep_row(v, &report));
        reports.push(report);
    }
    let summary = summary_csv(axis, &base.hash(), base.seed, &rows);
    fs::create_dir_all(&base.output_dir).map_err(|e| io_err(&base.output_dir, e))?;
    let path = base.output_dir.join("summary.csv");
    fs::write(&path, &summary).map_err(|e| io_err(&path, e))?;
    Ok((reports, summary))
}

/// The 10-d, three-component location-shift pair: in-distribution means
/// `(0,0), (5,5), (10,0)` in the first two coordinates, shifted by `(10,−5)`
/// for the out-of-distribution prior; identity covariances, equal weights.
pub fn toy_pair() -> (GaussianMixture, GaussianMixture) {
    let embed = |a: f64, b: f64| {
        let mut v = vec![0.0; 10];
        v[0] = a;
        v[1] = b;
        v
    };
    let ind = [(0.0, 0.0), (5.0, 5.0), (10.0, 0.0)];
    let p = GaussianMixture::equal_weights(ind.iter().map(|&(a, b)| embed(a, b)).collect(), 1.0)
        .expect("valid toy mixture");
    let q = GaussianMixture::equal_weights(
        ind.iter().map(|&(a, b)| embed(a + 10.0, b - 5.0)).collect(),
        1.0,
    )
    .expect("valid toy mixture");
    (p, q)
}

/// `N(0, I)` against `N(μ, I)` in `dim` dimensions with `‖μ‖² = 25`.
pub fn gaussian_pair(dim: usize) -> (GaussianMixture, GaussianMixture) {
    let c = 5.0 / (dim as f64).sqrt();
    (
        GaussianMixture::gaussian(vec![0.0; dim], 1.0).expect("valid"),
        GaussianMixture::gaussian(vec![c; dim], 1.0).expect("valid"),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfTestLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Quick end-to-end checks: exact zeros for `p = q` and the closed-form
/// Gaussian-pair KL.
pub fn self_test(seed: u64) -> RunResult<Vec<SelfTestLine>> {
    let mut lines = Vec::new();
    let (toy, _) = toy_pair();
    let sampler = Some(SamplerSpec::new(OperatorKind::CoordinateMask { keep_prob: 0.5 }));
    let same = ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        p: MixtureSource::Inline(toy.clone()),
        q: MixtureSource::Inline(toy),
        sampler: sampler.clone(),
        grid: GridSpec {
            nodes: 32,
            ..GridSpec::default()
        },
        quadrature: QuadratureRule::Trapezoid,
        estimators: default_estimators(),
        n_image_samples: 64,
        n_measurements: 64,
        sigma_z: 0.0,
        stats_draws: 512,
        sampling: SampleMode::Independent,
        seed,
        measurements_file: None,
        adaptation: None,
        output_dir: PathBuf::new(),
    };
    let r = execute(&same, Path::new("."))?;
    for e in &r.estimates {
        lines.push(SelfTestLine {
            name: format!("self-divergence ({})", e.mode.as_str()),
            passed: e.value == 0.0,
            detail: format!("value={}", e.value),
        });
    }

    let (p, q) = gaussian_pair(10);
    let pair = ExperimentConfig {
        p: MixtureSource::Inline(p),
        q: MixtureSource::Inline(q),
        grid: GridSpec::default(),
        n_image_samples: 1024,
        n_measurements: 1000,
        stats_draws: DEFAULT_STATS_DRAWS,
        ..same
    };
    let r = execute(&pair, Path::new("."))?;
    for e in &r.estimates {
        let rel = (e.value - 12.5).abs() / 12.5;
        lines.push(SelfTestLine {
            name: format!("gaussian pair ({})", e.mode.as_str()),
            passed: rel < 0.1,
            detail: format!("value={:.4} target=12.5 rel_err={rel:.4}", e.value),
        });
    }
    Ok(lines)
}

/// JSON Schema for [`ExperimentConfig`].
pub fn config_schema() -> serde_json::Value {
    let mixture = json!({
        "type": "object",
        "additionalProperties": false,
        "required": ["dim", "weights", "means", "variances"],
        "properties": {
            "dim": {"type": "integer", "minimum": 1},
            "weights": {"type": "array", "items": {"type": "number", "minimum": 0}},
            "means": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
            "variances": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}}
        }
    });
    let source = json!({
        "oneOf": [
            {"type": "object", "additionalProperties": false, "required": ["inline"], "properties": {"inline": mixture}},
            {"type": "object", "additionalProperties": false, "required": ["file"], "properties": {"file": {"type": "string"}}}
        ]
    });
    let basis = json!({
        "oneOf": [
            {"type": "object", "additionalProperties": false, "required": ["kind"], "properties": {"kind": {"const": "identity"}}},
            {"type": "object", "additionalProperties": false, "required": ["kind", "seed"], "properties": {"kind": {"const": "dense_orthogonal"}, "seed": {"type": "integer", "minimum": 0}}},
            {"type": "object", "additionalProperties": false, "required": ["kind"], "properties": {"kind": {"const": "hadamard"}}}
        ]
    });
    let prob = json!({"type": "number", "minimum": 0, "maximum": 1});
    let operator = json!({
        "oneOf": [
            {"type": "object", "additionalProperties": false, "required": ["kind", "keep_prob"],
             "properties": {"kind": {"const": "coordinate_mask"}, "keep_prob": prob}},
            {"type": "object", "additionalProperties": false, "required": ["kind", "patch", "keep_prob"],
             "properties": {"kind": {"const": "patch_inpainting"}, "patch": {"type": "integer", "minimum": 1}, "keep_prob": prob}},
            {"type": "object", "additionalProperties": false, "required": ["kind", "low", "random"],
             "properties": {"kind": {"const": "band_subsample"}, "low": {"type": "integer", "minimum": 0}, "random": {"type": "integer", "minimum": 0}}},
            {"type": "object", "additionalProperties": false, "required": ["kind", "supports"],
             "properties": {"kind": {"const": "fixed_supports"}, "supports": {"type": "array", "items": {"type": "array", "items": {"type": "integer", "minimum": 0}}}}}
        ]
    });
    let optimizer = json!({
        "oneOf": [
            {"type": "object", "additionalProperties": false, "required": ["kind", "step_size"],
             "properties": {"kind": {"const": "gradient_descent"}, "step_size": {"type": "number", "exclusiveMinimum": 0}}},
            {"type": "object", "additionalProperties": false, "required": ["kind", "step_size"],
             "properties": {"kind": {"const": "adaptive_moments"}, "step_size": {"type": "number", "exclusiveMinimum": 0},
                            "beta1": {"type": "number"}, "beta2": {"type": "number"}, "epsilon": {"type": "number"}}}
        ]
    });
    json!({
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "mdkl experiment config",
        "type": "object",
        "additionalProperties": false,
        "required": ["p", "q"],
        "properties": {
            "schema_version": {"const": SCHEMA_VERSION},
            "p": source,
            "q": source,
            "sampler": {
                "type": "object", "additionalProperties": false, "required": ["operator"],
                "properties": {
                    "operator": operator,
                    "basis": basis,
                    "singular_value": {"type": "number", "exclusiveMinimum": 0, "default": 1.0}
                }
            },
            "grid": {
                "type": "object", "additionalProperties": false,
                "properties": {
                    "sigma_min": {"type": "number", "exclusiveMinimum": 0, "description": "default 0.01 * scale"},
                    "sigma_max": {"type": "number", "exclusiveMinimum": 0, "default": 1000.0},
                    "nodes": {"type": "integer", "minimum": 2, "default": 256},
                    "scale": {"type": "number", "exclusiveMinimum": 0, "default": 1.0}
                }
            },
            "quadrature": {"enum": ["trapezoid", "left_riemann"], "default": "trapezoid"},
            "estimators": {"type": "array", "items": {"enum": ["image", "measurement", "invertible"]},
                           "default": ["image", "measurement"]},
            "n_image_samples": {"type": "integer", "minimum": 2, "default": 4096},
            "n_measurements": {"type": "integer", "minimum": 1, "default": 1000},
            "sigma_z": {"type": "number", "minimum": 0, "default": 0.0},
            "stats_draws": {"type": "integer", "minimum": 1, "default": DEFAULT_STATS_DRAWS},
            "sampling": {"enum": ["independent", "common"], "default": "independent"},
            "seed": {"type": "integer", "minimum": 0, "default": 0},
            "measurements_file": {"type": "string"},
            "adaptation": {
                "type": "object", "additionalProperties": false,
                "properties": {
                    "trainable": {"enum": ["means_only", "means_and_weights"], "default": "means_only"},
                    "optimizer": optimizer,
                    "max_iters": {"type": "integer", "minimum": 1, "default": 400},
                    "batch": {"type": "integer", "minimum": 1, "default": 64},
                    "sigma_draws": {"type": "integer", "minimum": 1, "default": 4},
                    "sigma_min": {"type": ["number", "null"]},
                    "sigma_max": {"type": ["number", "null"]},
                    "eval_sigmas": {"type": "integer", "minimum": 2, "default": 16},
                    "fd_step": {"type": "number", "minimum": 1e-6, "maximum": 1e-2, "default": 1e-4},
                    "plateau_window": {"type": "integer", "minimum": 1, "default": 10},
                    "plateau_tolerance": {"type": "number", "default": 0.005},
                    "divergence_window": {"type": "integer", "minimum": 1, "default": 20},
                    "seed": {"type": "integer", "minimum": 0, "default": 0}
                }
            },
            "output_dir": {"type": "string", "default": "out"}
        }
    })
}
