//! SVD-form measurement operators `H = U Σ Vᵀ` with a shared right basis.
//!
//! Only the projected coordinates `ȳ = Σ†Uᵀy = P Vᵀx + z̄` are ever formed,
//! so `U` is never materialized. Operators are regenerated on demand from
//! `(sampler seed, index)` and never stored.

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::basis::{BasisSpec, RightBasis};
use crate::error::{Error, Result};
use crate::gmm::GaussianMixture;
use crate::rng::{Purpose, StreamSeed};

/// Operator indices used for E[P] probes start here, away from dataset indices.
const PROBE_BASE: u64 = 1 << 48;

pub const DEFAULT_STATS_DRAWS: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorKind {
    /// Each basis coordinate observed independently with `keep_prob`.
    CoordinateMask { keep_prob: f64 },
    /// Non-overlapping `patch × patch` blocks of a square image, each kept
    /// independently with `keep_prob`. Coordinates are row-major pixels.
    PatchInpainting { patch: usize, keep_prob: f64 },
    /// The first `low` coordinates always, plus `random` of the rest drawn
    /// uniformly without replacement.
    BandSubsample { low: usize, random: usize },
    /// Operator `i` observes `supports[i % supports.len()]`.
    FixedSupports { supports: Vec<Vec<usize>> },
}

fn default_singular_value() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpec {
    pub operator: OperatorKind,
    #[serde(default = "default_basis")]
    pub basis: BasisSpec,
    /// Singular value on the observed support.
    #[serde(default = "default_singular_value")]
    pub singular_value: f64,
}

fn default_basis() -> BasisSpec {
    BasisSpec::Identity
}

impl SamplerSpec {
    pub fn new(operator: OperatorKind) -> Self {
        Self {
            operator,
            basis: BasisSpec::Identity,
            singular_value: 1.0,
        }
    }

    pub fn with_basis(mut self, basis: BasisSpec) -> Self {
        self.basis = basis;
        self
    }
}

/// Distribution `p(H)` over operators sharing one right basis.
#[derive(Debug, Clone)]
pub struct OperatorSampler {
    spec: SamplerSpec,
    basis: RightBasis,
    seed: StreamSeed,
    id: u64,
}

impl OperatorSampler {
    pub fn new(spec: SamplerSpec, dim: usize, seed: StreamSeed) -> Result<Self> {
        let basis = RightBasis::from_spec(&spec.basis, dim)?;
        Self::with_basis(spec, basis, seed)
    }

    /// Sampler over an explicitly provided basis (`spec.basis` is
    /// ignored).
    pub fn with_basis(spec: SamplerSpec, basis: RightBasis, seed: StreamSeed) -> Result<Self> {
        let dim = basis.dim();
        if dim == 0 {
            return Err(Error::InvalidOperator("dimension must be at least 1".into()));
        }
        if !(spec.singular_value > 0.0 && spec.singular_value.is_finite()) {
            return Err(Error::InvalidOperator(format!(
                "singular value {} must be positive",
                spec.singular_value
            )));
        }
        let check_prob = |p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::InvalidOperator(format!("keep probability {p} outside [0, 1]")))
            }
        };
        match &spec.operator {
            OperatorKind::CoordinateMask { keep_prob } => check_prob(*keep_prob)?,
            OperatorKind::PatchInpainting { patch, keep_prob } => {
                check_prob(*keep_prob)?;
                let edge = square_edge(dim).ok_or_else(|| {
                    Error::InvalidOperator(format!("patch masks need a square image, dim {dim} is not"))
                })?;
                if *patch == 0 || edge % patch != 0 {
                    return Err(Error::InvalidOperator(format!(
                        "patch edge {patch} does not divide image edge {edge}"
                    )));
                }
            }
            OperatorKind::BandSubsample { low, random } => {
                if low + random > dim {
                    return Err(Error::InvalidOperator(format!(
                        "band of {low} + {random} rows exceeds dimension {dim}"
                    )));
                }
            }
            OperatorKind::FixedSupports { supports } => {
                if supports.is_empty() {
                    return Err(Error::InvalidOperator("no supports given".into()));
                }
                if supports.iter().flatten().any(|&i| i >= dim) {
                    return Err(Error::InvalidOperator(format!("support index outside 0..{dim}")));
                }
            }
        }
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&spec.operator).expect("operator kind serializes"));
        hasher.update(spec.singular_value.to_le_bytes());
        hasher.update(basis.id().to_le_bytes());
        hasher.update(seed.value().to_le_bytes());
        let digest = hasher.finalize();
        let id = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        Ok(Self {
            spec,
            basis,
            seed,
            id,
        })
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn basis(&self) -> &RightBasis {
        &self.basis
    }

    pub fn spec(&self) -> &SamplerSpec {
        &self.spec
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Deterministic function of `(seed, index)`.
    pub fn sample_operator(&self, index: u64) -> MeasurementOperator {
        let dim = self.dim();
        let mut rng = self.seed.stream(Purpose::Operator, index, 0);
        let mut observed = vec![false; dim];
        match &self.spec.operator {
            OperatorKind::CoordinateMask { keep_prob } => {
                for o in observed.iter_mut() {
                    *o = rng.random::<f64>() < *keep_prob;
                }
            }
            OperatorKind::PatchInpainting { patch, keep_prob } => {
                let edge = square_edge(dim).expect("validated");
                let per_side = edge / patch;
                for pr in 0..per_side {
                    for pc in 0..per_side {
                        if rng.random::<f64>() < *keep_prob {
                            for r in pr * patch..(pr + 1) * patch {
                                for c in pc * patch..(pc + 1) * patch {
                                    observed[r * edge + c] = true;
                                }
                            }
                        }
                    }
                }
            }
            OperatorKind::BandSubsample { low, random } => {
                observed[..*low].iter_mut().for_each(|o| *o = true);
                for i in index::sample(&mut rng, dim - low, *random) {
                    observed[low + i] = true;
                }
            }
            OperatorKind::FixedSupports { supports } => {
                let support = &supports[(index % supports.len() as u64) as usize];
                for &i in support {
                    observed[i] = true;
                }
            }
        }
        let s = self.spec.singular_value;
        MeasurementOperator {
            basis: self.basis.clone(),
            singular_values: observed.iter().map(|&o| if o { s } else { 0.0 }).collect(),
            id: OperatorId {
                basis: self.basis.id(),
                index,
            },
        }
    }
}

fn square_edge(dim: usize) -> Option<usize> {
    let edge = (dim as f64).sqrt().round() as usize;
    (edge * edge == dim).then_some(edge)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OperatorId {
    /// Right-basis identity (Assumption of a shared `V`).
    pub basis: u64,
    /// Draw index within the sampler.
    pub index: u64,
}

#[derive(Debug, Clone)]
pub struct MeasurementOperator {
    basis: RightBasis,
    singular_values: Vec<f64>,
    id: OperatorId,
}

impl MeasurementOperator {
    pub fn new(basis: RightBasis, singular_values: Vec<f64>, index: u64) -> Result<Self> {
        if singular_values.len() != basis.dim() {
            return Err(Error::DimensionMismatch {
                expected: basis.dim(),
                found: singular_values.len(),
            });
        }
        if singular_values.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::InvalidOperator("singular values must be nonnegative".into()));
        }
        let id = OperatorId {
            basis: basis.id(),
            index,
        };
        Ok(Self {
            basis,
            singular_values,
            id,
        })
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn id(&self) -> OperatorId {
        self.id
    }

    pub fn basis(&self) -> &RightBasis {
        &self.basis
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn is_observed(&self, i: usize) -> bool {
        self.singular_values[i] > 0.0
    }

    /// Diagonal of `P = Σ†Σ`.
    pub fn projection(&self) -> Vec<f64> {
        self.singular_values
            .iter()
            .map(|&s| if s > 0.0 { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn rank(&self) -> usize {
        self.singular_values.iter().filter(|s| **s > 0.0).count()
    }

    pub fn is_full_rank(&self) -> bool {
        self.rank() == self.dim()
    }

    /// `P v`, zeroing unobserved coordinates.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(&self.singular_values)
            .map(|(x, &s)| if s > 0.0 { *x } else { 0.0 })
            .collect()
    }

    /// `ȳ = P Vᵀ x + z̄`, with `z̄_i ~ N(0, (σ_z / s_i)²)` on the support.
    pub fn to_projected<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        sigma_z: f64,
        rng: &mut R,
    ) -> Result<ProjectedMeasurement> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        if !(sigma_z >= 0.0 && sigma_z.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma_z {sigma_z} must be nonnegative")));
        }
        let mut ybar = self.project(&self.basis.analyze(x));
        if sigma_z > 0.0 {
            for (y, &s) in ybar.iter_mut().zip(&self.singular_values) {
                let e: f64 = rng.sample(StandardNormal);
                if s > 0.0 {
                    *y += sigma_z / s * e;
                }
            }
        }
        Ok(ProjectedMeasurement {
            ybar,
            operator: self.id,
            sigma_z,
        })
    }

    /// `ȳ_σ = ȳ + P n`, `n ~ N(0, σ² I)`. One normal is drawn per coordinate
    /// whether observed or not, so the draw sequence matches the image-domain
    /// path.
    pub fn add_diffusion_noise<R: Rng + ?Sized>(
        &self,
        meas: &ProjectedMeasurement,
        sigma: f64,
        rng: &mut R,
    ) -> Vec<f64> {
        meas.ybar
            .iter()
            .zip(&self.singular_values)
            .map(|(y, &s)| {
                let e: f64 = rng.sample(StandardNormal);
                if s > 0.0 {
                    y + sigma * e
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// `V ȳ_σ`.
    pub fn lift(&self, ybar_sigma: &[f64]) -> Vec<f64> {
        self.basis.synthesize(ybar_sigma)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedMeasurement {
    pub ybar: Vec<f64>,
    pub operator: OperatorId,
    /// Measurement-noise std in image units.
    pub sigma_z: f64,
}

/// Empirical `E[P]` and the weighting `W = E[P]^{-3/2}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionStats {
    pub ep_diag: Vec<f64>,
    pub w_diag: Vec<f64>,
    pub draws_used: usize,
    pub sampler_id: u64,
    pub basis_id: u64,
}

impl ProjectionStats {
    pub fn dim(&self) -> usize {
        self.ep_diag.len()
    }
}

/// Fails with [`Error::SpanViolation`] if some coordinate is never observed.
pub fn estimate_projection_stats(sampler: &OperatorSampler, draws: usize) -> Result<ProjectionStats> {
    if draws == 0 {
        return Err(Error::InvalidArgument("need at least one operator draw".into()));
    }
    let dim = sampler.dim();
    let counts = (0..draws as u64)
        .into_par_iter()
        .map(|i| sampler.sample_operator(PROBE_BASE + i).projection())
        .collect::<Vec<_>>()
        .into_iter()
        .fold(vec![0.0; dim], |mut acc, p| {
            for (a, v) in acc.iter_mut().zip(p) {
                *a += v;
            }
            acc
        });
    if let Some(coordinate) = counts.iter().position(|c| *c == 0.0) {
        return Err(Error::SpanViolation { coordinate, draws });
    }
    let ep_diag: Vec<f64> = counts.iter().map(|c| c / draws as f64).collect();
    let w_diag = ep_diag.iter().map(|e| e.powf(-1.5)).collect();
    Ok(ProjectionStats {
        ep_diag,
        w_diag,
        draws_used: draws,
        sampler_id: sampler.id(),
        basis_id: sampler.basis().id(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    FromSamples,
    ExternalFile,
}

/// Projected measurements whose operators all come from one sampler.
#[derive(Debug, Clone)]
pub struct MeasurementDataset {
    sampler: OperatorSampler,
    records: Vec<ProjectedMeasurement>,
    provenance: Provenance,
}

impl MeasurementDataset {
    /// Draw `count` images from `prior` and measure image `j` with operator
    /// `j`. Image `j` uses the same stream as the common-random-numbers
    /// image-domain estimator.
    pub fn from_prior(
        prior: &GaussianMixture,
        sampler: &OperatorSampler,
        count: usize,
        sigma_z: f64,
        seed: StreamSeed,
    ) -> Result<Self> {
        if prior.dim() != sampler.dim() {
            return Err(Error::DimensionMismatch {
                expected: sampler.dim(),
                found: prior.dim(),
            });
        }
        let images: Vec<Vec<f64>> = (0..count as u64)
            .into_par_iter()
            .map(|j| prior.sample_point(seed, 0, j))
            .collect();
        Self::from_images(&images, sampler, sigma_z, seed)
    }

    pub fn from_images(
        images: &[Vec<f64>],
        sampler: &OperatorSampler,
        sigma_z: f64,
        seed: StreamSeed,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("dataset needs at least one measurement".into()));
        }
        let records = images
            .par_iter()
            .enumerate()
            .map(|(j, x)| {
                let op = sampler.sample_operator(j as u64);
                let mut rng = seed.stream(Purpose::MeasurementNoise, j as u64, 0);
                op.to_projected(x, sigma_z, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            sampler: sampler.clone(),
            records,
            provenance: Provenance::FromSamples,
        })
    }

    /// Records produced elsewhere; every operator id must resolve through
    /// `sampler`.
    pub fn from_records(sampler: &OperatorSampler, records: Vec<ProjectedMeasurement>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidArgument("dataset needs at least one measurement".into()));
        }
        let ds = Self {
            sampler: sampler.clone(),
            records,
            provenance: Provenance::ExternalFile,
        };
        for (rec, op) in ds.records.iter().zip(ds.resolve()?) {
            if let Some(i) = (0..op.dim()).find(|&i| !op.is_observed(i) && rec.ybar[i] != 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "measurement for operator {} is nonzero on unobserved coordinate {i}",
                    rec.operator.index
                )));
            }
        }
        Ok(ds)
    }

    pub fn sampler(&self) -> &OperatorSampler {
        &self.sampler
    }

    pub fn records(&self) -> &[ProjectedMeasurement] {
        &self.records
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.sampler.dim()
    }

    /// Regenerate each record's operator, rejecting records from another basis.
    pub fn resolve(&self) -> Result<Vec<MeasurementOperator>> {
        let expected = self.sampler.basis().id();
        self.records
            .iter()
            .map(|rec| {
                if rec.operator.basis != expected {
                    return Err(Error::BasisMismatch {
                        expected,
                        found: rec.operator.basis,
                    });
                }
                if rec.ybar.len() != self.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: self.dim(),
                        found: rec.ybar.len(),
                    });
                }
                Ok(self.sampler.sample_operator(rec.operator.index))
            })
            .collect()
    }

    /// Records at `indices`, same sampler.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            sampler: self.sampler.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            provenance: self.provenance,
        }
    }
}
