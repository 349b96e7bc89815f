//! Measurement-only adaptation of the out-of-distribution mixture.
//!
//! Minimizes the W-weighted projected denoising loss
//! `E‖W P (ȳ − Vᵀ D_q(V ȳ_σ))‖²` over the means (and optionally the
//! weights) of `q`. Component variances stay fixed. Gradients are central
//! finite differences of a loss evaluated with common random numbers, and the
//! optimizer keeps the best parameters seen on a fixed evaluation objective.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{kl_image, kl_measurement, EstimatorOptions, KlEstimate};
use crate::gmm::GaussianMixture;
use crate::measurement::{MeasurementDataset, MeasurementOperator, ProjectedMeasurement, ProjectionStats};
use crate::quadrature::SigmaGrid;
use crate::rng::{Purpose, StreamSeed};

/// Noise round reserved for the fixed evaluation objective.
const EVAL_ROUND: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    #[default]
    MeansOnly,
    /// Means plus softmax logits of the weights.
    MeansAndWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    GradientDescent {
        step_size: f64,
    },
    AdaptiveMoments {
        step_size: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

impl Optimizer {
    pub fn adam(step_size: f64) -> Self {
        Optimizer::AdaptiveMoments {
            step_size,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }

    fn step_size(&self) -> f64 {
        match *self {
            Optimizer::GradientDescent { step_size } | Optimizer::AdaptiveMoments { step_size, .. } => step_size,
        }
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Self::adam(0.05)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationConfig {
    pub trainable: Trainable,
    pub optimizer: Optimizer,
    pub max_iters: usize,
    /// Measurements per step.
    pub batch: usize,
    /// Log-uniform σ draws per step, shared across the batch.
    pub sigma_draws: usize,
    /// σ range for training draws; defaults to the evaluation grid's range.
    pub sigma_min: Option<f64>,
    pub sigma_max: Option<f64>,
    /// Log-uniform σ nodes of the fixed evaluation objective.
    pub eval_sigmas: usize,
    /// Finite-difference step.
    pub fd_step: f64,
    pub plateau_window: usize,
    pub plateau_tolerance: f64,
    /// Consecutive steps above the best loss (by more than the plateau tolerance) that abort the run.
    pub divergence_window: usize,
    pub seed: u64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            trainable: Trainable::MeansOnly,
            optimizer: Optimizer::default(),
            max_iters: 400,
            batch: 64,
            sigma_draws: 4,
            sigma_min: None,
            sigma_max: None,
            eval_sigmas: 16,
            fd_step: 1e-4,
            plateau_window: 10,
            plateau_tolerance: 0.005,
            divergence_window: 20,
            seed: 0,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.optimizer.step_size() > 0.0) {
            return bad(format!("step size {} must be positive", self.optimizer.step_size()));
        }
        if !(1e-6..=1e-2).contains(&self.fd_step) {
            return bad(format!("finite-difference step {} outside [1e-6, 1e-2]", self.fd_step));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1".into());
        }
        if self.batch == 0 || self.sigma_draws == 0 || self.eval_sigmas < 2 {
            return bad("batch and sigma_draws must be positive, eval_sigmas at least 2".into());
        }
        if self.plateau_window == 0 || self.divergence_window == 0 {
            return bad("plateau and divergence windows must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Plateau,
    Cap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlPair {
    pub value: f64,
    pub stderr: f64,
}

impl From<&KlEstimate> for KlPair {
    fn from(e: &KlEstimate) -> Self {
        Self {
            value: e.value,
            stderr: e.stderr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationReport {
    pub initial_loss: f64,
    /// Evaluation loss after each step.
    pub loss_trajectory: Vec<f64>,
    pub best_loss: f64,
    pub stop_reason: StopReason,
    pub mean_delta_norm: f64,
    pub weight_delta_norm: f64,
    pub kl_measurement_before: KlPair,
    pub kl_measurement_after: KlPair,
    pub kl_image_before: KlPair,
    pub kl_image_after: KlPair,
}

/// What the report's KL diagnostics are computed against. `p` is the
/// in-distribution score model; it never enters the adaptation loss.
#[derive(Debug, Clone, Copy)]
pub struct KlProbe<'a> {
    pub p: &'a GaussianMixture,
    pub grid: &'a SigmaGrid,
    pub options: EstimatorOptions,
    pub image_samples: usize,
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
    Ok(())
}

/// Loss over `indices` of `records`; record `j` at σ number `m` draws its
/// diffusion noise from stream `(round, j · |sigmas| + m)`.
#[allow(clippy::too_many_arguments)]
fn loss_on(
    q: &GaussianMixture,
    ops: &[MeasurementOperator],
    records: &[ProjectedMeasurement],
    indices: &[usize],
    stats: &ProjectionStats,
    sigmas: &[f64],
    seed: StreamSeed,
    round: u64,
) -> f64 {
    let m_count = sigmas.len() as u64;
    let mut total = 0.0;
    for &j in indices {
        let (op, rec) = (&ops[j], &records[j]);
        for (m, &sigma) in sigmas.iter().enumerate() {
            let mut rng = seed.stream(Purpose::AdaptNoise, round, j as u64 * m_count + m as u64);
            let ys = op.add_diffusion_noise(rec, sigma, &mut rng);
            let denoised = q.denoise_unchecked(&op.lift(&ys), sigma);
            let d_bar = op.basis().analyze(&denoised);
            for (i, (y, d)) in rec.ybar.iter().zip(&d_bar).enumerate() {
                if !op.is_observed(i) {
                    continue;
                }
                let t = stats.w_diag[i] * (y - d);
                total += t * t;
            }
        }
    }
    total / (indices.len() * sigmas.len()) as f64
}

/// Mean W-weighted squared error between the clean projection and `q`'s
/// Tweedie denoiser at the noised projection, over records × `sigmas`.
/// `round` selects the diffusion-noise stream.
pub fn denoising_loss(
    q: &GaussianMixture,
    batch: &MeasurementDataset,
    stats: &ProjectionStats,
    sigmas: &[f64],
    seed: StreamSeed,
    round: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty measurement batch".into()));
    }
    if sigmas.is_empty() || sigmas.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::InvalidArgument("sigmas must be nonempty and positive".into()));
    }
    if q.dim() != batch.dim() {
        return Err(Error::DimensionMismatch {
            expected: batch.dim(),
            found: q.dim(),
        });
    }
    check_stats(batch, stats)?;
    let ops = batch.resolve()?;
    let indices: Vec<usize> = (0..batch.len()).collect();
    Ok(loss_on(q, &ops, batch.records(), &indices, stats, sigmas, seed, round))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`.
    Central,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`.
    FivePoint,
}

pub fn fd_gradient<F>(f: F, theta: &[f64], h: f64, stencil: Stencil) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    (0..theta.len())
        .into_par_iter()
        .map(|i| {
            let at = |delta: f64| {
                let mut t = theta.to_vec();
                t[i] += delta;
                f(&t)
            };
            match stencil {
                Stencil::Central => (at(h) - at(-h)) / (2.0 * h),
                Stencil::FivePoint => {
                    (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h)
                }
            }
        })
        .collect()
}

struct Parameterization {
    template: GaussianMixture,
    trainable: Trainable,
}

impl Parameterization {
    fn encode(&self, g: &GaussianMixture) -> Vec<f64> {
        let mut theta: Vec<f64> = g.means().iter().flatten().copied().collect();
        if self.trainable == Trainable::MeansAndWeights {
            theta.extend(g.weights().iter().map(|w| w.max(1e-300).ln()));
        }
        theta
    }

    fn decode(&self, theta: &[f64]) -> GaussianMixture {
        let (k, n) = (self.template.components(), self.template.dim());
        let means: Vec<Vec<f64>> = theta[..k * n].chunks(n).map(<[f64]>::to_vec).collect();
        let mut g = self.template.with_means(means).expect("finite means");
        if self.trainable == Trainable::MeansAndWeights {
            let logits = &theta[k * n..];
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut w: Vec<f64> = e.iter().map(|v| v / z).collect();
            // absorb rounding so the weights sum to 1 within 1e-12
            let drift = 1.0 - w.iter().sum::<f64>();
            w[0] += drift;
            g = g.with_weights(w).expect("softmax weights");
        }
        g
    }
}

fn log_uniform_draws(lo: f64, hi: f64, count: usize, seed: StreamSeed, round: u64) -> Vec<f64> {
    let mut rng = seed.stream(Purpose::AdaptSigma, round, 0);
    let (a, b) = (lo.ln(), hi.ln());
    (0..count).map(|_| (a + (b - a) * rng.random::<f64>()).exp()).collect()
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Fit `q0` to in-distribution measurements. Only projected measurements
/// reach the loss; `probe.p` is used solely for the before/after KL report.
pub fn adapt(
    q0: &GaussianMixture,
    data: &MeasurementDataset,
    stats: &ProjectionStats,
    cfg: &AdaptationConfig,
    probe: &KlProbe<'_>,
) -> Result<(GaussianMixture, AdaptationReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("adaptation needs measurements".into()));
    }
    if q0.dim() != data.dim() {
        return Err(Error::DimensionMismatch {
            expected: data.dim(),
            found: q0.dim(),
        });
    }
    check_stats(data, stats)?;
    let ops = data.resolve()?;
    let records = data.records();
    let seed = StreamSeed::new(cfg.seed);
    let lo = cfg.sigma_min.unwrap_or(probe.grid.sigma_min());
    let hi = cfg.sigma_max.unwrap_or(probe.grid.sigma_max());
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::InvalidArgument(format!("bad adaptation sigma range [{lo}, {hi}]")));
    }
    let eval_sigmas = SigmaGrid::log_uniform(lo, hi, cfg.eval_sigmas)?.nodes().to_vec();
    let all: Vec<usize> = (0..records.len()).collect();
    let params = Parameterization {
        template: q0.clone(),
        trainable: cfg.trainable,
    };
    let eval = |theta: &[f64]| {
        loss_on(&params.decode(theta), &ops, records, &all, stats, &eval_sigmas, seed, EVAL_ROUND)
    };

    let theta0 = params.encode(q0);
    let mut theta = theta0.clone();
    let initial_loss = eval(&theta);
    let mut best = (initial_loss, theta.clone());
    let mut best_history = vec![initial_loss];
    let mut trajectory = Vec::with_capacity(cfg.max_iters);
    let mut rises = 0usize;
    let mut first_moment = vec![0.0; theta.len()];
    let mut second_moment = vec![0.0; theta.len()];
    let mut stop_reason = StopReason::Cap;
    let batch = cfg.batch.min(records.len());

    for step in 0..cfg.max_iters {
        let round = step as u64;
        let sigmas = log_uniform_draws(lo, hi, cfg.sigma_draws, seed, round);
        let indices: Vec<usize> = (0..batch).map(|i| (step * batch + i) % records.len()).collect();
        let objective =
            |t: &[f64]| loss_on(&params.decode(t), &ops, records, &indices, stats, &sigmas, seed, round);
        let grad = fd_gradient(objective, &theta, cfg.fd_step, Stencil::Central);

        match cfg.optimizer {
            Optimizer::GradientDescent { step_size } => {
                for (t, g) in theta.iter_mut().zip(&grad) {
                    *t -= step_size * g;
                }
            }
            Optimizer::AdaptiveMoments {
                step_size,
                beta1,
                beta2,
                epsilon,
            } => {
                let k = (step + 1) as i32;
                let (c1, c2) = (1.0 - beta1.powi(k), 1.0 - beta2.powi(k));
                for i in 0..theta.len() {
                    first_moment[i] = beta1 * first_moment[i] + (1.0 - beta1) * grad[i];
                    second_moment[i] = beta2 * second_moment[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let mhat = first_moment[i] / c1;
                    let vhat = second_moment[i] / c2;
                    theta[i] -= step_size * mhat / (vhat.sqrt() + epsilon);
                }
            }
        }

        let loss = eval(&theta);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                window: rises,
                loss,
            });
        }
        trajectory.push(loss);
        if loss < best.0 {
            best = (loss, theta.clone());
        }
        best_history.push(best.0);

        // A step counts as a rise when it lands clearly above the best loss seen so far.
        rises = if loss > best.0 * (1.0 + cfg.plateau_tolerance) { rises + 1 } else { 0 };
        if rises >= cfg.divergence_window {
            return Err(Error::Divergence {
                step,
                window: rises,
                loss,
            });
        }

        let evals = best_history.len() - 1;
        if evals >= cfg.plateau_window {
            let old = best_history[evals - cfg.plateau_window];
            if old - best.0 < cfg.plateau_tolerance * old.abs() {
                stop_reason = StopReason::Plateau;
                break;
            }
        }
    }

    let adapted = params.decode(&best.1);
    let k_n = q0.components() * q0.dim();
    let mean_delta_norm = norm_diff(&theta0[..k_n], &best.1[..k_n]);
    let weight_delta_norm = norm_diff(q0.weights(), adapted.weights());

    let kl_m_before = kl_measurement(probe.p, q0, data, stats, probe.grid, &probe.options)?;
    let kl_m_after = kl_measurement(probe.p, &adapted, data, stats, probe.grid, &probe.options)?;
    let kl_i_before = kl_image(probe.p, q0, probe.image_samples, probe.grid, &probe.options)?;
    let kl_i_after = kl_image(probe.p, &adapted, probe.image_samples, probe.grid, &probe.options)?;

    let report = AdaptationReport {
        initial_loss,
        loss_trajectory: trajectory,
        best_loss: best.0,
        stop_reason,
        mean_delta_norm,
        weight_delta_norm,
        kl_measurement_before: (&kl_m_before).into(),
        kl_measurement_after: (&kl_m_after).into(),
        kl_image_before: (&kl_i_before).into(),
        kl_image_after: (&kl_i_after).into(),
    };
    Ok((adapted, report))
}
