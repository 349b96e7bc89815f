//! Score-gap KL estimators.
//!
//! All three integrate `E‖gap_σ‖² σ` over the grid and differ only in where
//! the gap is evaluated:
//!
//! - image: at `x_σ = x + σ n` with `x ~ p`;
//! - measurement: at the lifted projection `V ȳ_σ`, using the
//!   measurement-domain score `P(E[P] ⊙ Vᵀ D_σ(Vȳ_σ) − ȳ_σ)/σ²` and the
//!   weighting `W = E[P]^{-3/2}`;
//! - invertible: at `y_σ = H x + σ n` with the pushforward scores of `H`.
//!
//! The per-record measurement integrand is therefore
//! `Σ_i (w_i P_i ep_i [Vᵀ(∇log p_σ − ∇log q_σ)(Vȳ_σ)]_i)²`; the `ȳ_σ` terms of
//! the two scores cancel. At full observation it is the image integrand.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{log_sum_exp, mean_and_stderr, GaussianMixture};
use crate::measurement::{MeasurementDataset, MeasurementOperator, ProjectionStats};
use crate::quadrature::{self, IntegrandSeries, QuadratureRule, SigmaGrid};
use crate::rng::{Purpose, StreamSeed};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMode {
    Image,
    Measurement,
    Invertible,
}

impl EstimatorMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorMode::Image => "image",
            EstimatorMode::Measurement => "measurement",
            EstimatorMode::Invertible => "invertible",
        }
    }
}

/// How the image-domain estimator draws `x ~ p` across σ nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Fresh draws at every node; node errors are independent.
    #[default]
    Independent,
    /// The same `n_samples` images at every node (common random numbers).
    /// These are also the images behind `MeasurementDataset::from_prior`
    /// with the same seed.
    Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EstimatorOptions {
    pub seed: StreamSeed,
    pub rule: QuadratureRule,
    pub sampling: SampleMode,
}

impl EstimatorOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            seed: StreamSeed::new(seed),
            ..Self::default()
        }
    }

    pub fn rule(mut self, rule: QuadratureRule) -> Self {
        self.rule = rule;
        self
    }

    pub fn sampling(mut self, sampling: SampleMode) -> Self {
        self.sampling = sampling;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub mode: EstimatorMode,
    pub value: f64,
    pub stderr: f64,
    pub series: IntegrandSeries,
    pub grid: SigmaGrid,
    pub rule: QuadratureRule,
    pub n_samples: usize,
}

impl KlEstimate {
    fn from_series(
        mode: EstimatorMode,
        grid: &SigmaGrid,
        series: IntegrandSeries,
        rule: QuadratureRule,
    ) -> Result<Self> {
        let (value, stderr) = quadrature::integrate(grid, &series, rule)?;
        Ok(Self {
            mode,
            value,
            stderr,
            n_samples: series.n_samples,
            series,
            grid: grid.clone(),
            rule,
        })
    }

    /// KL accumulated up to each grid node.
    pub fn cumulative(&self) -> Vec<f64> {
        quadrature::cumulative_integral(&self.grid, &self.series, self.rule)
            .expect("series built on this grid")
    }

    pub fn to_csv(&self, header: &[String]) -> String {
        quadrature::integrand_csv(&self.grid, &self.series, self.rule, header)
            .expect("series built on this grid")
    }
}

fn check_pair(p: &GaussianMixture, q: &GaussianMixture) -> Result<()> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            found: q.dim(),
        });
    }
    Ok(())
}

/// `rows[k][j]` is sample `j` of the integrand at node `k`. When `shared`,
/// sample `j` comes from the same draw at every node, so the error of the
/// integral is taken from the per-draw quadrature totals rather than from
/// independent per-node errors.
fn estimate_from_rows(
    mode: EstimatorMode,
    grid: &SigmaGrid,
    rows: &[Vec<f64>],
    shared: bool,
    rule: QuadratureRule,
) -> Result<KlEstimate> {
    let n_samples = rows[0].len();
    let (means, stderrs) = rows.iter().map(|v| mean_and_stderr(v)).unzip();
    let series = IntegrandSeries::new(means, stderrs, n_samples)?;
    let mut est = KlEstimate::from_series(mode, grid, series, rule)?;
    if shared {
        let weights = quadrature::node_weights(grid, rule);
        let totals: Vec<f64> = (0..n_samples)
            .map(|j| weights.iter().zip(rows).map(|(c, row)| c * row[j]).sum())
            .collect();
        est.stderr = mean_and_stderr(&totals).1;
    }
    Ok(est)
}

fn squared_gap(p: &GaussianMixture, q: &GaussianMixture, at: &[f64], sigma: f64) -> f64 {
    let sp = p.score_unchecked(at, sigma);
    let sq = q.score_unchecked(at, sigma);
    let mut acc = 0.0;
    for (a, b) in sp.iter().zip(&sq) {
        let d = a - b;
        acc += d * d;
    }
    acc
}

/// Image-domain KL: `∫ E_{x~p} ‖∇log p_σ(x_σ) − ∇log q_σ(x_σ)‖² σ dσ`.
pub fn kl_image(
    p: &GaussianMixture,
    q: &GaussianMixture,
    n_samples: usize,
    grid: &SigmaGrid,
    opts: &EstimatorOptions,
) -> Result<KlEstimate> {
    check_pair(p, q)?;
    if n_samples < 2 {
        return Err(Error::InvalidArgument("n_samples must be at least 2".into()));
    }
    let seed = opts.seed;
    let per_node = grid
        .nodes()
        .par_iter()
        .enumerate()
        .map(|(k, &sigma)| {
            let slice = match opts.sampling {
                SampleMode::Common => 0,
                SampleMode::Independent => k as u64 + 1,
            };
            let values: Vec<f64> = (0..n_samples as u64)
                .map(|j| {
                    let x = p.sample_point(seed, slice, j);
                    let mut rng = seed.stream(Purpose::DiffusionNoise, k as u64, j);
                    let xs: Vec<f64> = x
                        .iter()
                        .map(|xi| {
                            let e: f64 = rng.sample(StandardNormal);
                            xi + sigma * e
                        })
                        .collect();
                    squared_gap(p, q, &xs, sigma)
                })
                .collect();
            values
        })
        .collect::<Vec<Vec<f64>>>();
    let shared = opts.sampling == SampleMode::Common;
    estimate_from_rows(EstimatorMode::Image, grid, &per_node, shared, opts.rule)
}

fn check_stats(data: &MeasurementDataset, stats: &ProjectionStats) -> Result<()> {
    if stats.sampler_id != data.sampler().id() {
        return Err(Error::SamplerMismatch);
    }
    if stats.basis_id != data.sampler().basis().id() {
        return Err(Error::BasisMismatch {
            expected: data.sampler().basis().id(),
            found: stats.basis_id,
        });
    }
    if stats.dim() != data.dim() {
        return Err(Error::DimensionMismatch {
            expected: data.dim(),
            found: stats.dim(),
        });
    }
    if let Some(coordinate) = stats.ep_diag.iter().position(|e| !(*e > 0.0)) {
        return Err(Error::SpanViolation {
            coordinate,
            draws: stats.draws_used,
        });
    }
    Ok(())
}

/// Weighted measurement-domain squared gap for one noised projection.
fn measurement_integrand(
    p: &GaussianMixture,
    q: &GaussianMixture,
    op: &MeasurementOperator,
    stats: &ProjectionStats,
    ybar_sigma: &[f64],
    sigma: f64,
) -> f64 {
    let at = op.lift(ybar_sigma);
    let sp = p.score_unchecked(&at, sigma);
    let sq = q.score_unchecked(&at, sigma);
    let gap: Vec<f64> = sp.iter().zip(&sq).map(|(a, b)| a - b).collect();
    let gap_bar = op.basis().analyze(&gap);
    let mut acc = 0.0;
    for (i, g) in gap_bar.iter().enumerate() {
        if !op.is_observed(i) {
            continue;
        }
        let t = stats.w_diag[i] * stats.ep_diag[i] * g;
        acc += t * t;
    }
    acc
}

/// Measurement-domain KL from projected measurements only.
///
/// Every record is reused at every σ node with fresh diffusion noise. Noisy
/// records (`σ_z > 0`) need no special handling.
pub fn kl_measurement(
    p: &GaussianMixture,
    q: &GaussianMixture,
    data: &MeasurementDataset,
    stats: &ProjectionStats,
    grid: &SigmaGrid,
    opts: &EstimatorOptions,
) -> Result<KlEstimate> {
    check_pair(p, q)?;
    if p.dim() != data.dim() {
        return Err(Error::DimensionMismatch {
            expected: data.dim(),
            found: p.dim(),
        });
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("measurement dataset is empty".into()));
    }
    check_stats(data, stats)?;
    let ops = data.resolve()?;
    let seed = opts.seed;
    let per_node = grid
        .nodes()
        .par_iter()
        .enumerate()
        .map(|(k, &sigma)| {
            let values: Vec<f64> = data
                .records()
                .iter()
                .zip(&ops)
                .enumerate()
                .map(|(j, (rec, op))| {
                    let mut rng = seed.stream(Purpose::DiffusionNoise, k as u64, j as u64);
                    let ys = op.add_diffusion_noise(rec, sigma, &mut rng);
                    measurement_integrand(p, q, op, stats, &ys, sigma)
                })
                .collect();
            values
        })
        .collect::<Vec<Vec<f64>>>();
    estimate_from_rows(EstimatorMode::Measurement, grid, &per_node, true, opts.rule)
}

/// A mixture pushed through `y = diag(s) Vᵀ x`: component covariances become
/// `var_k diag(s²)`, diagonal in measurement coordinates.
struct PushforwardMixture {
    log_weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
}

impl PushforwardMixture {
    fn new(g: &GaussianMixture, analyzed_means: &[Vec<f64>], s: &[f64]) -> Self {
        Self {
            log_weights: g.weights().iter().map(|w| w.ln()).collect(),
            means: analyzed_means
                .iter()
                .map(|m| m.iter().zip(s).map(|(a, b)| a * b).collect())
                .collect(),
            variances: g
                .variances()
                .iter()
                .map(|v| s.iter().map(|si| v * si * si).collect())
                .collect(),
        }
    }

    fn score(&self, y: &[f64], sigma: f64) -> Vec<f64> {
        let s2 = sigma * sigma;
        let mut terms: Vec<f64> = self
            .log_weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((lw, m), v)| {
                if *lw == f64::NEG_INFINITY {
                    return f64::NEG_INFINITY;
                }
                let mut t = *lw;
                for ((yi, mi), vi) in y.iter().zip(m).zip(v) {
                    let var = vi + s2;
                    let d = yi - mi;
                    t -= 0.5 * (LN_2PI + var.ln() + d * d / var);
                }
                t
            })
            .collect();
        let lse = log_sum_exp(&terms);
        for t in &mut terms {
            *t = (*t - lse).exp();
        }
        let mut out = vec![0.0; y.len()];
        for ((r, m), v) in terms.iter().zip(&self.means).zip(&self.variances) {
            if *r == 0.0 {
                continue;
            }
            for (((o, yi), mi), vi) in out.iter_mut().zip(y).zip(m).zip(v) {
                *o += r * (mi - yi) / (vi + s2);
            }
        }
        out
    }
}

/// KL for invertible operators: the image-domain formula applied directly
/// to `y_σ = H x + σ n`, no `W` and no set of operators needed.
///
/// `H` is taken as `diag(s) Vᵀ`; any left factor `U` is orthogonal and leaves
/// the gap norm unchanged.
pub fn kl_invertible(
    p: &GaussianMixture,
    q: &GaussianMixture,
    data: &MeasurementDataset,
    grid: &SigmaGrid,
    opts: &EstimatorOptions,
) -> Result<KlEstimate> {
    check_pair(p, q)?;
    if p.dim() != data.dim() {
        return Err(Error::DimensionMismatch {
            expected: data.dim(),
            found: p.dim(),
        });
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("measurement dataset is empty".into()));
    }
    let ops = data.resolve()?;
    if let Some(op) = ops.iter().find(|op| !op.is_full_rank()) {
        return Err(Error::RankDeficient { index: op.id().index });
    }
    let basis = data.sampler().basis();
    let p_bar: Vec<Vec<f64>> = p.means().iter().map(|m| basis.analyze(m)).collect();
    let q_bar: Vec<Vec<f64>> = q.means().iter().map(|m| basis.analyze(m)).collect();
    let pushed: Vec<(PushforwardMixture, PushforwardMixture)> = ops
        .iter()
        .map(|op| {
            let s = op.singular_values();
            (PushforwardMixture::new(p, &p_bar, s), PushforwardMixture::new(q, &q_bar, s))
        })
        .collect();
    let ys: Vec<Vec<f64>> = data
        .records()
        .iter()
        .zip(&ops)
        .map(|(rec, op)| rec.ybar.iter().zip(op.singular_values()).map(|(y, s)| y * s).collect())
        .collect();
    let seed = opts.seed;
    let per_node = grid
        .nodes()
        .par_iter()
        .enumerate()
        .map(|(k, &sigma)| {
            let values: Vec<f64> = ys
                .iter()
                .zip(&pushed)
                .enumerate()
                .map(|(j, (y, (pp, qq)))| {
                    let mut rng = seed.stream(Purpose::DiffusionNoise, k as u64, j as u64);
                    let y_sigma: Vec<f64> = y
                        .iter()
                        .map(|yi| {
                            let e: f64 = rng.sample(StandardNormal);
                            yi + sigma * e
                        })
                        .collect();
                    let sp = pp.score(&y_sigma, sigma);
                    let sq = qq.score(&y_sigma, sigma);
                    let mut acc = 0.0;
                    for (a, b) in sp.iter().zip(&sq) {
                        let d = a - b;
                        acc += d * d;
                    }
                    acc
                })
                .collect();
            values
        })
        .collect::<Vec<Vec<f64>>>();
    estimate_from_rows(EstimatorMode::Invertible, grid, &per_node, true, opts.rule)
}
