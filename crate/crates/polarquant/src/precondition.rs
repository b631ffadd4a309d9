//! Random-rotation preconditioning and Gaussian sketches.
//!
//! Rotations follow the row-vector convention: applying a rotation S to a
//! matrix X maps each row x to x S, and the inverse applies S^T.  A rotation
//! is reproducible from (dim, seed) alone, which is what the on-disk formats
//! persist; the dense entries are regenerated on load.
//!
//! Haar sampling: fill a dim x dim matrix with iid N(0,1) draws (row-major
//! draw order), take its QR factorization, and flip the sign of every Q
//! column whose R diagonal entry is negative.  The sign fix makes the factor
//! unique, hence bit-reproducible, and the resulting Q is Haar-distributed.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::EmbeddingMatrix;

/// How a rotation was produced; enough to rebuild it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RotationSpec {
    /// Exact identity, for tests and ablations.
    Identity,
    /// Haar-distributed orthogonal matrix from a seed.
    Haar { seed: u64 },
}

/// A dense orthogonal dim x dim matrix with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationMatrix {
    dim: usize,
    spec: RotationSpec,
    /// Row-major, entries[i * dim + j] = S_ij.
    entries: Vec<f64>,
}

/// Samples a Haar-distributed rotation; alias for [`RotationMatrix::from_spec`]
/// with [`RotationSpec::Haar`].
pub fn build_rotation(dim: usize, seed: u64) -> Result<RotationMatrix> {
    RotationMatrix::from_spec(dim, RotationSpec::Haar { seed })
}

impl RotationMatrix {
    pub fn from_spec(dim: usize, spec: RotationSpec) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid_arg("rotation dimension must be positive"));
        }
        match spec {
            RotationSpec::Identity => Ok(RotationMatrix::identity(dim)),
            RotationSpec::Haar { seed } => {
                let mut rng = rng::prng(seed);
                let raw: Vec<f64> = (0..dim * dim).map(|_| rng.sample(StandardNormal)).collect();
                let g = DMatrix::from_row_slice(dim, dim, &raw);
                let (q, r) = g.qr().unpack();
                let mut entries = vec![0.0f64; dim * dim];
                for j in 0..dim {
                    let flip = r[(j, j)] < 0.0;
                    for i in 0..dim {
                        let v = q[(i, j)];
                        entries[i * dim + j] = if flip { -v } else { v };
                    }
                }
                Ok(RotationMatrix { dim, spec, entries })
            }
        }
    }

    /// Exact identity rotation (test hook; no QR noise).
    pub fn identity(dim: usize) -> Self {
        let mut entries = vec![0.0f64; dim * dim];
        for i in 0..dim {
            entries[i * dim + i] = 1.0;
        }
        RotationMatrix { dim, spec: RotationSpec::Identity, entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn spec(&self) -> RotationSpec {
        self.spec
    }

    /// Row-major dense entries.
    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// x -> x S for a single row vector.
    pub fn apply_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::invalid_arg(format!(
                "vector length {} does not match rotation dim {}",
                x.len(),
                self.dim
            )));
        }
        if self.spec == RotationSpec::Identity {
            return Ok(x.to_vec());
        }
        let d = self.dim;
        let mut out = vec![0.0f64; d];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.entries[i * d..(i + 1) * d];
            for (o, &s) in out.iter_mut().zip(row) {
                *o += xi * s;
            }
        }
        Ok(out)
    }

    /// y -> y S^T, the inverse of [`Self::apply_vec`].
    pub fn apply_inverse_vec(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.dim {
            return Err(Error::invalid_arg(format!(
                "vector length {} does not match rotation dim {}",
                y.len(),
                self.dim
            )));
        }
        if self.spec == RotationSpec::Identity {
            return Ok(y.to_vec());
        }
        let d = self.dim;
        let out = (0..d)
            .map(|i| {
                let row = &self.entries[i * d..(i + 1) * d];
                row.iter().zip(y).map(|(&s, &yj)| s * yj).sum()
            })
            .collect();
        Ok(out)
    }
}

fn map_rows(
    matrix: &EmbeddingMatrix,
    out_cols: usize,
    f: impl Fn(&[f64]) -> Result<Vec<f64>> + Sync,
) -> Result<EmbeddingMatrix> {
    let rows: Vec<Vec<f64>> = (0..matrix.rows())
        .into_par_iter()
        .map(|i| {
            let row: Vec<f64> = matrix.row(i).iter().map(|&v| v as f64).collect();
            f(&row)
        })
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(matrix.rows() * out_cols);
    for row in rows {
        data.extend(row.into_iter().map(|v| v as f32));
    }
    EmbeddingMatrix::new(matrix.rows(), out_cols, data)
}

/// Rotates every row: X -> X S.
pub fn apply(matrix: &EmbeddingMatrix, rotation: &RotationMatrix) -> Result<EmbeddingMatrix> {
    if matrix.cols() != rotation.dim() {
        return Err(Error::invalid_arg(format!(
            "matrix has {} columns but rotation dim is {}",
            matrix.cols(),
            rotation.dim()
        )));
    }
    map_rows(matrix, matrix.cols(), |row| rotation.apply_vec(row))
}

/// Undoes [`apply`]: X -> X S^T.
pub fn apply_inverse(matrix: &EmbeddingMatrix, rotation: &RotationMatrix) -> Result<EmbeddingMatrix> {
    if matrix.cols() != rotation.dim() {
        return Err(Error::invalid_arg(format!(
            "matrix has {} columns but rotation dim is {}",
            matrix.cols(),
            rotation.dim()
        )));
    }
    map_rows(matrix, matrix.cols(), |row| rotation.apply_inverse_vec(row))
}

/// A dense out_dim x in_dim matrix of iid N(0,1) entries, no normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSketch {
    out_dim: usize,
    in_dim: usize,
    seed: u64,
    /// Row-major, entries[k * in_dim + i] = S_ki.
    entries: Vec<f64>,
}

/// Samples a sketch matrix, reproducible from `seed`.
pub fn build_gaussian_sketch(out_dim: usize, in_dim: usize, seed: u64) -> Result<GaussianSketch> {
    if out_dim == 0 || in_dim == 0 {
        return Err(Error::invalid_arg("sketch dimensions must be positive"));
    }
    let mut rng = rng::prng(seed);
    let entries = (0..out_dim * in_dim).map(|_| rng.sample(StandardNormal)).collect();
    Ok(GaussianSketch { out_dim, in_dim, seed, entries })
}

impl GaussianSketch {
    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// S x for a single vector.
    pub fn apply_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(Error::invalid_arg(format!(
                "vector length {} does not match sketch input dim {}",
                x.len(),
                self.in_dim
            )));
        }
        Ok((0..self.out_dim)
            .map(|k| {
                let row = &self.entries[k * self.in_dim..(k + 1) * self.in_dim];
                row.iter().zip(x).map(|(&s, &xi)| s * xi).sum()
            })
            .collect())
    }
}

/// Sketches every row: row x becomes S x with out_dim coordinates.
pub fn apply_sketch(matrix: &EmbeddingMatrix, sketch: &GaussianSketch) -> Result<EmbeddingMatrix> {
    if matrix.cols() != sketch.in_dim() {
        return Err(Error::invalid_arg(format!(
            "matrix has {} columns but sketch input dim is {}",
            matrix.cols(),
            sketch.in_dim()
        )));
    }
    map_rows(matrix, sketch.out_dim(), |row| sketch.apply_vec(row))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_abs_dev_from_identity(rot: &RotationMatrix) -> f64 {
        let d = rot.dim();
        let mut worst = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                // (S S^T)_ij via explicit dot of rows i and j.
                let dot: f64 = (0..d)
                    .map(|k| rot.entries()[i * d + k] * rot.entries()[j * d + k])
                    .sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    #[test]
    fn rotation_is_orthonormal() {
        let rot = build_rotation(64, 9).unwrap();
        assert!(max_abs_dev_from_identity(&rot) < 1e-12);
    }

    #[test]
    fn rotation_is_deterministic_and_seed_sensitive() {
        let a = build_rotation(16, 5).unwrap();
        let b = build_rotation(16, 5).unwrap();
        assert_eq!(a, b);
        let c = build_rotation(16, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn one_dimensional_rotation_is_a_sign() {
        // O(1) = {-1, +1}; either sign is a valid draw, and it must
        // round-trip exactly.
        for seed in 0..8 {
            let rot = build_rotation(1, seed).unwrap();
            let e = rot.entries()[0];
            assert!(e == 1.0 || e == -1.0, "seed {seed}: {e}");
            assert_eq!(rot.apply_inverse_vec(&rot.apply_vec(&[2.5]).unwrap()).unwrap(), [2.5]);
        }
    }

    #[test]
    fn identity_hook_is_exact() {
        let rot = RotationMatrix::identity(8);
        let x: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        assert_eq!(rot.apply_vec(&x).unwrap(), x);
        assert_eq!(rot.spec(), RotationSpec::Identity);
        let via_spec = RotationMatrix::from_spec(8, RotationSpec::Identity).unwrap();
        assert_eq!(rot, via_spec);
    }

    #[test]
    fn norms_and_inner_products_survive() {
        let rot = build_rotation(32, 11).unwrap();
        let mut rng = crate::rng::prng(1);
        let x: Vec<f64> = (0..32).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = (0..32).map(|_| rng.sample(StandardNormal)).collect();
        let rx = rot.apply_vec(&x).unwrap();
        let ry = rot.apply_vec(&y).unwrap();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        assert!((norm(&x) - norm(&rx)).abs() < 1e-12);
        assert!((dot(&x, &y) - dot(&rx, &ry)).abs() < 1e-11);
    }

    #[test]
    fn apply_then_inverse_round_trips() {
        let m = EmbeddingMatrix::generate_gaussian(10, 32, 3).unwrap();
        let rot = build_rotation(32, 4).unwrap();
        let there = apply(&m, &rot).unwrap();
        assert_ne!(m, there);
        let back = apply_inverse(&there, &rot).unwrap();
        for (a, b) in m.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_matrix_stays_zero() {
        let m = EmbeddingMatrix::new(2, 8, vec![0.0; 16]).unwrap();
        let rot = build_rotation(8, 1).unwrap();
        let out = apply(&m, &rot).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatches_error() {
        let m = EmbeddingMatrix::generate_gaussian(4, 8, 1).unwrap();
        let rot = build_rotation(16, 1).unwrap();
        assert!(apply(&m, &rot).is_err());
        assert!(rot.apply_vec(&[0.0; 8]).is_err());
        assert!(rot.apply_inverse_vec(&[0.0; 8]).is_err());
        assert!(build_rotation(0, 1).is_err());
        assert!(build_gaussian_sketch(0, 4, 1).is_err());
    }

    #[test]
    fn sketch_coordinates_have_unit_variance_per_unit_input() {
        // For fixed x, (S x)_k ~ N(0, |x|^2) over the sketch draw.
        let sketch = build_gaussian_sketch(20_000, 4, 21).unwrap();
        let x = [0.0, 2.0, 0.0, 0.0];
        let y = sketch.apply_vec(&x).unwrap();
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 4.0).abs() < 0.15, "var {var}");
    }

    #[test]
    fn sketch_batch_matches_single_rows() {
        let m = EmbeddingMatrix::generate_gaussian(6, 16, 2).unwrap();
        let sketch = build_gaussian_sketch(5, 16, 3).unwrap();
        let out = apply_sketch(&m, &sketch).unwrap();
        assert_eq!(out.rows(), 6);
        assert_eq!(out.cols(), 5);
        let row0: Vec<f64> = m.row(0).iter().map(|&v| v as f64).collect();
        let want = sketch.apply_vec(&row0).unwrap();
        for (a, b) in out.row(0).iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }
}
