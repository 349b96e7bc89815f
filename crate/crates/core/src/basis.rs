//! Orthogonal right bases `V` shared by every operator of a sampler.
//!
//! `analyze` maps image coordinates to basis coordinates (`x̄ = Vᵀx`) and
//! `synthesize` maps back (`V x̄`).

use std::sync::Arc;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{Purpose, StreamSeed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BasisSpec {
    Identity,
    /// Q factor of a seeded Gaussian matrix.
    DenseOrthogonal { seed: u64 },
    /// Orthonormal Walsh–Hadamard; requires a power-of-two dimension.
    Hadamard,
}

#[derive(Debug, Clone)]
enum Kind {
    Identity,
    Dense(Arc<DMatrix<f64>>),
    Hadamard,
}

#[derive(Debug, Clone)]
pub struct RightBasis {
    dim: usize,
    kind: Kind,
    id: u64,
}

impl RightBasis {
    pub fn from_spec(spec: &BasisSpec, dim: usize) -> Result<Self> {
        match spec {
            BasisSpec::Identity => Ok(Self::identity(dim)),
            BasisSpec::DenseOrthogonal { seed } => Ok(Self::dense_orthogonal(dim, *seed)),
            BasisSpec::Hadamard => Self::hadamard(dim),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            kind: Kind::Identity,
            id: stable_id(&format!("identity/{dim}")),
        }
    }

    pub fn dense_orthogonal(dim: usize, seed: u64) -> Self {
        let mut rng = StreamSeed::new(seed).stream(Purpose::Basis, dim as u64, 0);
        let g = DMatrix::<f64>::from_fn(dim, dim, |_, _| StandardNormal.sample(&mut rng));
        let qr = g.qr();
        let mut q = qr.q();
        let r = qr.r();
        // Fix column signs so the factorization is unique.
        for j in 0..dim {
            if r[(j, j)] < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        Self {
            dim,
            kind: Kind::Dense(Arc::new(q)),
            id: stable_id(&format!("dense/{dim}/{seed}")),
        }
    }

    pub fn hadamard(dim: usize) -> Result<Self> {
        if !dim.is_power_of_two() {
            return Err(Error::InvalidOperator(format!(
                "Hadamard basis needs a power-of-two dimension, got {dim}"
            )));
        }
        Ok(Self {
            dim,
            kind: Kind::Hadamard,
            id: stable_id(&format!("hadamard/{dim}")),
        })
    }

    /// Basis from an explicit matrix whose columns are orthonormal.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        let dim = matrix.nrows();
        if matrix.ncols() != dim {
            return Err(Error::InvalidOperator("basis matrix must be square".into()));
        }
        let gram = matrix.transpose() * &matrix;
        if (gram - DMatrix::<f64>::identity(dim, dim)).amax() > 1e-10 {
            return Err(Error::InvalidOperator("basis matrix is not orthogonal".into()));
        }
        let mut hasher = Sha256::new();
        for v in matrix.iter() {
            hasher.update(v.to_le_bytes());
        }
        let digest = hasher.finalize();
        let id = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        Ok(Self {
            dim,
            kind: Kind::Dense(Arc::new(matrix)),
            id,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Stable identity; equal ids mean the same `V`.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.kind, Kind::Identity)
    }

    /// Dense copy of `V`.
    pub fn matrix(&self) -> DMatrix<f64> {
        match &self.kind {
            Kind::Dense(m) => (**m).clone(),
            _ => {
                let mut m = DMatrix::zeros(self.dim, self.dim);
                let mut e = vec![0.0; self.dim];
                for j in 0..self.dim {
                    e[j] = 1.0;
                    let col = self.synthesize(&e);
                    e[j] = 0.0;
                    for (i, c) in col.into_iter().enumerate() {
                        m[(i, j)] = c;
                    }
                }
                m
            }
        }
    }

    /// `Vᵀ x`.
    pub fn analyze(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.dim);
        match &self.kind {
            Kind::Identity => x.to_vec(),
            Kind::Dense(m) => (0..self.dim)
                .map(|j| m.column(j).iter().zip(x).map(|(a, b)| a * b).sum())
                .collect(),
            Kind::Hadamard => {
                let mut v = x.to_vec();
                fwht_normalized(&mut v);
                v
            }
        }
    }

    /// `V x̄`.
    pub fn synthesize(&self, xbar: &[f64]) -> Vec<f64> {
        debug_assert_eq!(xbar.len(), self.dim);
        match &self.kind {
            Kind::Identity => xbar.to_vec(),
            Kind::Dense(m) => {
                let mut out = vec![0.0; self.dim];
                for (j, c) in xbar.iter().enumerate() {
                    if *c == 0.0 {
                        continue;
                    }
                    for (o, a) in out.iter_mut().zip(m.column(j).iter()) {
                        *o += a * c;
                    }
                }
                out
            }
            Kind::Hadamard => {
                let mut v = xbar.to_vec();
                fwht_normalized(&mut v);
                v
            }
        }
    }
}

impl PartialEq for RightBasis {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id && self.dim == other.dim
    }
}

fn stable_id(descriptor: &str) -> u64 {
    let digest = Sha256::digest(descriptor.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// In-place unnormalized fast Walsh–Hadamard transform (natural order).
pub fn fwht(data: &mut [f64]) {
    let n = data.len();
    assert!(n.is_power_of_two(), "length {n} is not a power of two");
    let mut h = 1;
    while h < n {
        for block in data.chunks_mut(2 * h) {
            let (lo, hi) = block.split_at_mut(h);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (x, y) = (*a, *b);
                *a = x + y;
                *b = x - y;
            }
        }
        h *= 2;
    }
}

/// Orthonormal, self-inverse Walsh–Hadamard transform.
pub fn fwht_normalized(data: &mut [f64]) {
    fwht(data);
    let scale = 1.0 / (data.len() as f64).sqrt();
    for v in data.iter_mut() {
        *v *= scale;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    #[test]
    fn fwht_matches_dense_hadamard() {
        let n = 8;
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut fast = x.clone();
        fwht(&mut fast);
        for (k, f) in fast.iter().enumerate() {
            let slow: f64 = (0..n)
                .map(|i| if (i & k).count_ones() % 2 == 0 { x[i] } else { -x[i] })
                .sum();
            assert!((f - slow).abs() < 1e-12);
        }
    }

    #[test]
    fn hadamard_first_function_is_constant() {
        let b = RightBasis::hadamard(16).unwrap();
        let mut e0 = vec![0.0; 16];
        e0[0] = 1.0;
        for c in b.synthesize(&e0) {
            assert!((c - 0.25).abs() < 1e-15);
        }
        assert!(RightBasis::hadamard(12).is_err());
    }

    #[test]
    fn bases_round_trip_and_preserve_norms() {
        let x: Vec<f64> = (0..16).map(|i| (i as f64).cos() * 3.0 - 1.0).collect();
        for b in [
            RightBasis::identity(16),
            RightBasis::dense_orthogonal(16, 3),
            RightBasis::hadamard(16).unwrap(),
        ] {
            let xb = b.analyze(&x);
            assert!((norm(&xb) - norm(&x)).abs() < 1e-10);
            let back = b.synthesize(&xb);
            for (a, c) in back.iter().zip(&x) {
                assert!((a - c).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn dense_basis_is_deterministic() {
        let a = RightBasis::dense_orthogonal(6, 11);
        let b = RightBasis::dense_orthogonal(6, 11);
        assert_eq!(a.matrix(), b.matrix());
        assert_eq!(a.id(), b.id());
        assert_ne!(a.id(), RightBasis::dense_orthogonal(6, 12).id());
    }

    #[test]
    fn from_matrix_checks_orthogonality() {
        let q = RightBasis::dense_orthogonal(5, 1).matrix();
        assert!(RightBasis::from_matrix(q).is_ok());
        assert!(RightBasis::from_matrix(DMatrix::from_element(3, 3, 1.0)).is_err());
    }
}
