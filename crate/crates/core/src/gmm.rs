//! Isotropic Gaussian mixtures with closed-form noisy marginals.
//!
//! Convolving a mixture with `N(0, σ² I)` only inflates each component
//! variance, so `p_σ`, its score and its Tweedie denoiser are all exact.
//! Everything is evaluated in log space; responsibilities underflow long
//! before the noise level reaches the component separation.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Purpose, StreamSeed};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureDoc", into = "MixtureDoc")]
pub struct GaussianMixture {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MixtureDoc {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
}

impl TryFrom<MixtureDoc> for GaussianMixture {
    type Error = Error;

    fn try_from(doc: MixtureDoc) -> Result<Self> {
        GaussianMixture::new(doc.dim, doc.weights, doc.means, doc.variances)
    }
}

impl From<GaussianMixture> for MixtureDoc {
    fn from(g: GaussianMixture) -> Self {
        MixtureDoc {
            dim: g.dim,
            weights: g.weights,
            means: g.means,
            variances: g.variances,
        }
    }
}

impl GaussianMixture {
    pub fn new(
        dim: usize,
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<f64>,
    ) -> Result<Self> {
        let k = weights.len();
        if dim == 0 {
            return Err(Error::InvalidMixture("dim must be at least 1".into()));
        }
        if k == 0 {
            return Err(Error::InvalidMixture("at least one component required".into()));
        }
        if means.len() != k || variances.len() != k {
            return Err(Error::InvalidMixture(format!(
                "{k} weights but {} means and {} variances",
                means.len(),
                variances.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::InvalidMixture(format!("weight {w} is not a nonnegative number")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidMixture(format!("weights sum to {total}, not 1")));
        }
        if let Some(v) = variances.iter().find(|v| !v.is_finite() || **v <= 0.0) {
            return Err(Error::InvalidMixture(format!("variance {v} is not strictly positive")));
        }
        for (i, m) in means.iter().enumerate() {
            if m.len() != dim {
                return Err(Error::InvalidMixture(format!(
                    "mean {i} has length {}, expected {dim}",
                    m.len()
                )));
            }
            if m.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidMixture(format!("mean {i} has a non-finite entry")));
            }
        }
        Ok(Self {
            dim,
            weights,
            means,
            variances,
        })
    }

    /// Equal-weight mixture sharing one isotropic variance.
    pub fn equal_weights(means: Vec<Vec<f64>>, variance: f64) -> Result<Self> {
        let k = means.len();
        let dim = means.first().map_or(0, Vec::len);
        let w = 1.0 / k.max(1) as f64;
        Self::new(dim, vec![w; k], means, vec![variance; k])
    }

    /// Single Gaussian `N(mean, variance · I)`.
    pub fn gaussian(mean: Vec<f64>, variance: f64) -> Result<Self> {
        Self::new(mean.len(), vec![1.0], vec![mean], vec![variance])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn mixture_mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (w, m) in self.weights.iter().zip(&self.means) {
            for (o, c) in out.iter_mut().zip(m) {
                *o += w * c;
            }
        }
        out
    }

    /// Same mixture with every mean passed through `f` (e.g. a rotation).
    pub fn map_means(&self, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Result<Self> {
        let means = self.means.iter().map(|m| f(m)).collect();
        Self::new(self.dim, self.weights.clone(), means, self.variances.clone())
    }

    pub fn with_means(&self, means: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(self.dim, self.weights.clone(), means, self.variances.clone())
    }

    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        Self::new(self.dim, weights, self.means.clone(), self.variances.clone())
    }

    /// `p_σ = p * N(0, σ² I)`.
    pub fn convolve(&self, sigma: f64) -> Self {
        let s2 = sigma * sigma;
        Self {
            dim: self.dim,
            weights: self.weights.clone(),
            means: self.means.clone(),
            variances: self.variances.iter().map(|v| v + s2).collect(),
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Per-component `log w_k + log N(x; μ_k, (var_k + σ²) I)`.
    fn component_log_terms(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        let s2 = sigma * sigma;
        let half_n = 0.5 * self.dim as f64;
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((&w, mu), &var)| {
                if w == 0.0 {
                    return f64::NEG_INFINITY;
                }
                let v = var + s2;
                let d2: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
                w.ln() - half_n * (LN_2PI + v.ln()) - 0.5 * d2 / v
            })
            .collect()
    }

    pub fn log_density(&self, x: &[f64], sigma: f64) -> Result<f64> {
        self.check_dim(x)?;
        Ok(log_sum_exp(&self.component_log_terms(x, sigma)))
    }

    /// Posterior component probabilities under `p_σ`.
    pub fn responsibilities(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(self.responsibilities_unchecked(x, sigma))
    }

    fn responsibilities_unchecked(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        let mut terms = self.component_log_terms(x, sigma);
        let lse = log_sum_exp(&terms);
        for t in &mut terms {
            *t = (*t - lse).exp();
        }
        terms
    }

    /// `∇ log p_σ(x) = Σ_k r_k(x) (μ_k − x) / (var_k + σ²)`.
    pub fn score(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(self.score_unchecked(x, sigma))
    }

    pub(crate) fn score_unchecked(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        let s2 = sigma * sigma;
        let r = self.responsibilities_unchecked(x, sigma);
        let mut out = vec![0.0; self.dim];
        for ((rk, mu), var) in r.iter().zip(&self.means).zip(&self.variances) {
            if *rk == 0.0 {
                continue;
            }
            let v = var + s2;
            for ((o, m), xi) in out.iter_mut().zip(mu).zip(x) {
                *o += rk * ((m - xi) / v);
            }
        }
        out
    }

    /// Tweedie denoiser `E[x | x_σ] = x_σ + σ² ∇ log p_σ(x_σ)`.
    pub fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        if sigma == 0.0 {
            return Err(Error::ZeroNoiseDenoise);
        }
        if !(sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
        }
        self.check_dim(x)?;
        Ok(self.denoise_unchecked(x, sigma))
    }

    /// Like [`denoise`](Self::denoise) but returns `x` unchanged at `σ = 0`.
    pub fn denoise_or_identity(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        if sigma == 0.0 {
            self.check_dim(x)?;
            return Ok(x.to_vec());
        }
        self.denoise(x, sigma)
    }

    pub(crate) fn denoise_unchecked(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        let s2 = sigma * sigma;
        let mut out = self.score_unchecked(x, sigma);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = xi + s2 * *o;
        }
        out
    }

    /// Draw one point using the `(slice, index)` image-sample stream.
    pub fn sample_point(&self, seed: StreamSeed, slice: u64, index: u64) -> Vec<f64> {
        let mut rng = seed.stream(Purpose::ImageSample, slice, index);
        self.draw(&mut rng)
    }

    pub(crate) fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let sd = self.variances[k].sqrt();
        self.means[k]
            .iter()
            .map(|m| {
                let e: f64 = rng.sample(StandardNormal);
                m + sd * e
            })
            .collect()
    }

    /// `count` i.i.d. draws; point `j` comes from stream `(seed, 0, j)`.
    pub fn sample(&self, count: usize, seed: StreamSeed) -> Result<SampleBatch> {
        if count == 0 {
            return Err(Error::InvalidArgument("sample count must be at least 1".into()));
        }
        let points = (0..count as u64)
            .into_par_iter()
            .map(|j| self.sample_point(seed, 0, j))
            .collect();
        Ok(SampleBatch {
            points,
            source_seed: seed.value(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub points: Vec<Vec<f64>>,
    pub source_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub stderr: f64,
}

/// Monte Carlo `E_{x~p}[log p(x) − log q(x)]` with its standard error.
///
/// Independent of every score-based estimator; used as ground truth.
pub fn exact_kl_oracle(
    p: &GaussianMixture,
    q: &GaussianMixture,
    count: usize,
    seed: StreamSeed,
) -> Result<McEstimate> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            found: q.dim(),
        });
    }
    if count < 2 {
        return Err(Error::InvalidArgument("oracle needs at least 2 samples".into()));
    }
    let values: Vec<f64> = (0..count as u64)
        .into_par_iter()
        .map(|j| {
            let mut rng = seed.stream(Purpose::Oracle, 0, j);
            let x = p.draw(&mut rng);
            log_sum_exp(&p.component_log_terms(&x, 0.0)) - log_sum_exp(&q.component_log_terms(&x, 0.0))
        })
        .collect();
    let (value, stderr) = mean_and_stderr(&values);
    Ok(McEstimate { value, stderr })
}

pub(crate) fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Sample mean and standard error of the mean, summed in index order.
pub(crate) fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0) / n).sqrt())
}
