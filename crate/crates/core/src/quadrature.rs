//! The σ axis: grids, the `∫ f(σ) σ dσ` rule, and integrand CSV output.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    LogUniform,
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaGrid {
    nodes: Vec<f64>,
    spacing: Spacing,
}

impl SigmaGrid {
    /// Log-uniform nodes on `[sigma_min, sigma_max]`, both endpoints included.
    pub fn log_uniform(sigma_min: f64, sigma_max: f64, count: usize) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_min.is_finite() && sigma_max.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "sigma range [{sigma_min}, {sigma_max}] must be positive and finite"
            )));
        }
        if sigma_min >= sigma_max {
            return Err(Error::InvalidGrid(format!(
                "sigma_min {sigma_min} must be below sigma_max {sigma_max}"
            )));
        }
        if count < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 nodes, got {count}")));
        }
        let (lo, hi) = (sigma_min.ln(), sigma_max.ln());
        let last = (count - 1) as f64;
        let mut nodes: Vec<f64> = (0..count)
            .map(|i| (lo + (hi - lo) * i as f64 / last).exp())
            .collect();
        nodes[0] = sigma_min;
        nodes[count - 1] = sigma_max;
        Ok(Self {
            nodes,
            spacing: Spacing::LogUniform,
        })
    }

    pub fn explicit(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 nodes, got {}", nodes.len())));
        }
        if nodes.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidGrid("nodes must be positive and finite".into()));
        }
        if nodes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidGrid("nodes must be strictly increasing".into()));
        }
        Ok(Self {
            nodes,
            spacing: Spacing::Explicit,
        })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn sigma_min(&self) -> f64 {
        self.nodes[0]
    }

    /// Upper truncation of the formally infinite σ integral.
    pub fn sigma_max(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }
}

/// Per-node mean of the squared (weighted) score gap and its standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrandSeries {
    pub means: Vec<f64>,
    pub stderrs: Vec<f64>,
    pub n_samples: usize,
}

impl IntegrandSeries {
    pub fn new(means: Vec<f64>, stderrs: Vec<f64>, n_samples: usize) -> Result<Self> {
        if means.len() != stderrs.len() {
            return Err(Error::LengthMismatch {
                grid: means.len(),
                series: stderrs.len(),
            });
        }
        if stderrs.iter().chain(&means).any(|s| !(*s >= 0.0)) {
            return Err(Error::InvalidArgument("means and standard errors must be nonnegative".into()));
        }
        Ok(Self {
            means,
            stderrs,
            n_samples,
        })
    }

    pub fn zeros(len: usize, n_samples: usize) -> Self {
        Self {
            means: vec![0.0; len],
            stderrs: vec![0.0; len],
            n_samples,
        }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureRule {
    /// Trapezoid on `g(σ) = f(σ) σ`.
    #[default]
    Trapezoid,
    /// `Σ g(σ_i) (σ_{i+1} − σ_i)`, dropping the last node.
    LeftRiemann,
}

fn check_lengths(grid: &SigmaGrid, series: &IntegrandSeries) -> Result<()> {
    if grid.len() != series.len() {
        return Err(Error::LengthMismatch {
            grid: grid.len(),
            series: series.len(),
        });
    }
    Ok(())
}

/// Per-node quadrature weights `c_i` so that the integral is `Σ c_i f_i`.
pub fn node_weights(grid: &SigmaGrid, rule: QuadratureRule) -> Vec<f64> {
    let s = grid.nodes();
    let n = s.len();
    let mut w = vec![0.0; n];
    for i in 0..n - 1 {
        let h = s[i + 1] - s[i];
        match rule {
            QuadratureRule::Trapezoid => {
                w[i] += 0.5 * h * s[i];
                w[i + 1] += 0.5 * h * s[i + 1];
            }
            QuadratureRule::LeftRiemann => w[i] += h * s[i],
        }
    }
    w
}

/// Partial integrals up to each node; the first entry is always 0.
pub fn cumulative_integral(
    grid: &SigmaGrid,
    series: &IntegrandSeries,
    rule: QuadratureRule,
) -> Result<Vec<f64>> {
    check_lengths(grid, series)?;
    let s = grid.nodes();
    let f = &series.means;
    let mut out = Vec::with_capacity(s.len());
    let mut acc = 0.0;
    out.push(acc);
    for i in 1..s.len() {
        let h = s[i] - s[i - 1];
        let piece = match rule {
            QuadratureRule::Trapezoid => 0.5 * h * (f[i - 1] * s[i - 1] + f[i] * s[i]),
            QuadratureRule::LeftRiemann => h * f[i - 1] * s[i - 1],
        };
        acc += piece;
        out.push(acc);
    }
    Ok(out)
}

/// Integral value and its standard error.
///
/// Nodes are treated as independent, so the error is the root-sum-square of
/// the weighted per-node errors.
pub fn integrate(
    grid: &SigmaGrid,
    series: &IntegrandSeries,
    rule: QuadratureRule,
) -> Result<(f64, f64)> {
    let cumulative = cumulative_integral(grid, series, rule)?;
    let value = cumulative[cumulative.len() - 1];
    let var: f64 = node_weights(grid, rule)
        .iter()
        .zip(&series.stderrs)
        .map(|(c, e)| (c * e) * (c * e))
        .sum();
    Ok((value, var.sqrt()))
}

/// `sigma,integrand_mean,integrand_stderr,cumulative_kl` rows with 17
/// significant digits. `header` lines are written first as `# ` comments.
pub fn integrand_csv(
    grid: &SigmaGrid,
    series: &IntegrandSeries,
    rule: QuadratureRule,
    header: &[String],
) -> Result<String> {
    let cumulative = cumulative_integral(grid, series, rule)?;
    let mut out = String::new();
    for line in header {
        let _ = writeln!(out, "# {line}");
    }
    out.push_str("sigma,integrand_mean,integrand_stderr,cumulative_kl\n");
    for i in 0..grid.len() {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            fmt17(grid.nodes()[i]),
            fmt17(series.means[i]),
            fmt17(series.stderrs[i]),
            fmt17(cumulative[i])
        );
    }
    Ok(out)
}

pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_node_log_grid() {
        let g = SigmaGrid::log_uniform(0.01, 1.0, 3).unwrap();
        assert_eq!(g.nodes()[0], 0.01);
        assert!((g.nodes()[1] - 0.1).abs() < 1e-15);
        assert_eq!(g.nodes()[2], 1.0);
    }

    #[test]
    fn decade_grid_ratios() {
        let g = SigmaGrid::log_uniform(1e-2, 1e3, 6).unwrap();
        for w in g.nodes().windows(2) {
            assert!((w[1] / w[0] - 10.0).abs() < 1e-12);
        }
    }

    #[test]
    fn toy_range_grid() {
        let g = SigmaGrid::log_uniform(0.01, 1.0, 100).unwrap();
        assert_eq!(g.len(), 100);
        assert_eq!((g.sigma_min(), g.sigma_max()), (0.01, 1.0));
    }

    #[test]
    fn grid_errors() {
        assert!(SigmaGrid::log_uniform(1.0, 0.5, 10).is_err());
        assert!(SigmaGrid::log_uniform(0.0, 0.5, 10).is_err());
        assert!(SigmaGrid::log_uniform(0.1, 0.5, 1).is_err());
        assert!(SigmaGrid::explicit(vec![0.1, 0.1]).is_err());
        assert!(SigmaGrid::explicit(vec![-0.1, 0.1]).is_err());
    }

    #[test]
    fn zero_series_integrates_to_zero() {
        let g = SigmaGrid::log_uniform(0.01, 10.0, 17).unwrap();
        let s = IntegrandSeries::zeros(17, 1);
        for rule in [QuadratureRule::Trapezoid, QuadratureRule::LeftRiemann] {
            assert_eq!(integrate(&g, &s, rule).unwrap(), (0.0, 0.0));
            assert!(cumulative_integral(&g, &s, rule).unwrap().iter().all(|c| *c == 0.0));
        }
    }

    #[test]
    fn bump_gives_step_curve() {
        let g = SigmaGrid::log_uniform(0.1, 10.0, 9).unwrap();
        let mut s = IntegrandSeries::zeros(9, 1);
        s.means[4] = 3.0;
        let c = cumulative_integral(&g, &s, QuadratureRule::Trapezoid).unwrap();
        assert!(c.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(c[3], 0.0);
        assert!(c[4] > 0.0 && c[5] > c[4]);
        assert_eq!(c[5], c[8]);
    }

    #[test]
    fn length_mismatch() {
        let g = SigmaGrid::log_uniform(0.1, 10.0, 9).unwrap();
        let s = IntegrandSeries::zeros(8, 1);
        assert_eq!(
            integrate(&g, &s, QuadratureRule::Trapezoid),
            Err(Error::LengthMismatch { grid: 9, series: 8 })
        );
    }

    #[test]
    fn node_weights_reproduce_value() {
        let g = SigmaGrid::log_uniform(0.01, 5.0, 33).unwrap();
        let means: Vec<f64> = g.nodes().iter().map(|s| 1.0 / (1.0 + s * s)).collect();
        let s = IntegrandSeries::new(means.clone(), vec![0.0; 33], 1).unwrap();
        for rule in [QuadratureRule::Trapezoid, QuadratureRule::LeftRiemann] {
            let (v, _) = integrate(&g, &s, rule).unwrap();
            let w: f64 = node_weights(&g, rule).iter().zip(&means).map(|(a, b)| a * b).sum();
            assert!((v - w).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_has_seventeen_digits() {
        let g = SigmaGrid::explicit(vec![0.1, 0.2]).unwrap();
        let s = IntegrandSeries::new(vec![1.0 / 3.0, 0.25], vec![0.0, 0.0], 4).unwrap();
        let csv = integrand_csv(&g, &s, QuadratureRule::Trapezoid, &["seed=1".into()]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "# seed=1");
        assert_eq!(lines[1], "sigma,integrand_mean,integrand_stderr,cumulative_kl");
        let third: f64 = lines[2].split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(third, 1.0 / 3.0);
    }
}
