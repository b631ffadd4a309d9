//! Recursive Cartesian-to-polar transform.
//!
//! Level 1 pairs adjacent coordinates (x_{2j}, x_{2j+1}) and rewrites each
//! pair as (r_j, psi_j) with r_j = |(x_{2j}, x_{2j+1})| and psi_j in
//! [0, 2pi).  Every later level pairs the radii of the previous level; those
//! inputs are non-negative, so the angles live in [0, pi/2].  After L levels
//! a d-dimensional vector becomes d/2^L radii plus d/2 + d/4 + ... + d/2^L
//! angles, a lossless re-parameterization.
//!
//! All arithmetic is f64; batch entry points convert f32 rows on the way in.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::EmbeddingMatrix;

const TWO_PI: f64 = std::f64::consts::TAU;

/// Polar form of one vector: the surviving radii plus per-level angles.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarRep {
    dim: usize,
    /// d / 2^L radii, all non-negative.
    radii: Vec<f64>,
    /// `angles[l - 1]` holds the d / 2^l angles of level l.
    angles: Vec<Vec<f64>>,
}

impl PolarRep {
    /// Validates shape and ranges; `angles[l-1]` must have `dim >> l`
    /// entries, level-1 angles must lie in [0, 2pi), later levels in
    /// [0, pi/2], and radii must be non-negative.
    pub fn new(dim: usize, radii: Vec<f64>, angles: Vec<Vec<f64>>) -> Result<Self> {
        check_dim_levels(dim, angles.len())?;
        if radii.len() != dim >> angles.len() {
            return Err(Error::invalid_arg(format!(
                "expected {} radii for dim {dim} with {} levels, got {}",
                dim >> angles.len(),
                angles.len(),
                radii.len()
            )));
        }
        if radii.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::invalid_arg("radii must be finite and non-negative"));
        }
        for (i, level) in angles.iter().enumerate() {
            let l = i + 1;
            if level.len() != dim >> l {
                return Err(Error::invalid_arg(format!(
                    "level {l} has {} angles, expected {}",
                    level.len(),
                    dim >> l
                )));
            }
            let hi = if l == 1 { TWO_PI } else { std::f64::consts::FRAC_PI_2 };
            for &a in level {
                let ok = a.is_finite() && a >= 0.0 && if l == 1 { a < hi } else { a <= hi };
                if !ok {
                    return Err(Error::invalid_arg(format!(
                        "level {l} angle {a} outside [0, {hi}{}",
                        if l == 1 { ")" } else { "]" }
                    )));
                }
            }
        }
        Ok(PolarRep { dim, radii, angles })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn levels(&self) -> usize {
        self.angles.len()
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn angles(&self) -> &[Vec<f64>] {
        &self.angles
    }

    /// Angles of one level; `level` is 1-based.
    pub fn level_angles(&self, level: usize) -> &[f64] {
        &self.angles[level - 1]
    }

    /// Replaces the stored radii, e.g. after precision reduction.
    pub fn set_radii(&mut self, radii: Vec<f64>) -> Result<()> {
        if radii.len() != self.radii.len() {
            return Err(Error::invalid_arg(format!(
                "expected {} radii, got {}",
                self.radii.len(),
                radii.len()
            )));
        }
        if radii.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::invalid_arg("radii must be finite and non-negative"));
        }
        self.radii = radii;
        Ok(())
    }
}

/// Largest legal level count for a dimension: log2(dim).
pub fn max_levels(dim: usize) -> usize {
    dim.trailing_zeros() as usize
}

fn check_dim_levels(dim: usize, levels: usize) -> Result<()> {
    if dim < 2 || !dim.is_power_of_two() {
        return Err(Error::invalid_arg(format!(
            "dimension must be a power of two >= 2, got {dim}"
        )));
    }
    if levels == 0 || levels > max_levels(dim) {
        return Err(Error::invalid_arg(format!(
            "levels must be in 1..={} for dim {dim}, got {levels}",
            max_levels(dim)
        )));
    }
    Ok(())
}

/// Angle of a level-1 pair, mapped from atan2's (-pi, pi] onto [0, 2pi).
///
/// The zero pair gets angle 0 by convention (atan2(0, -0) would say pi), and
/// a sub-ulp negative angle that rounds to 2pi after the shift wraps to 0 so
/// the half-open range holds.
fn level1_angle(a: f64, b: f64) -> f64 {
    if a == 0.0 && b == 0.0 {
        return 0.0;
    }
    let mut psi = b.atan2(a);
    if psi < 0.0 {
        psi += TWO_PI;
    }
    if psi >= TWO_PI {
        psi = 0.0;
    }
    psi
}

/// Angle of a higher-level pair of radii; both inputs are >= 0 so the result
/// lies in [0, pi/2].  The zero pair gets 0 by convention.
fn radial_angle(a: f64, b: f64) -> f64 {
    if a == 0.0 && b == 0.0 {
        return 0.0;
    }
    b.atan2(a)
}

/// Applies `levels` rounds of the recursive polar transform to `x`.
pub fn to_polar(x: &[f64], levels: usize) -> Result<PolarRep> {
    check_dim_levels(x.len(), levels)?;
    if let Some(v) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid_arg(format!("input contains non-finite value {v}")));
    }
    let dim = x.len();
    let mut work = x.to_vec();
    let mut angles = Vec::with_capacity(levels);
    for level in 1..=levels {
        let half = work.len() / 2;
        let mut radii = Vec::with_capacity(half);
        let mut psis = Vec::with_capacity(half);
        for j in 0..half {
            let (a, b) = (work[2 * j], work[2 * j + 1]);
            radii.push(a.hypot(b));
            psis.push(if level == 1 { level1_angle(a, b) } else { radial_angle(a, b) });
        }
        angles.push(psis);
        work = radii;
    }
    Ok(PolarRep { dim, radii: work, angles })
}

/// Inverts [`to_polar`]: expands radii back through the levels.
pub fn from_polar(rep: &PolarRep) -> Result<Vec<f64>> {
    // Re-validate so a hand-built or mutated rep cannot smuggle bad shapes.
    let checked = PolarRep::new(rep.dim, rep.radii.clone(), rep.angles.clone())?;
    let mut work = checked.radii;
    for level in (1..=checked.angles.len()).rev() {
        let psis = &checked.angles[level - 1];
        let mut expanded = Vec::with_capacity(work.len() * 2);
        for (r, psi) in work.iter().zip(psis) {
            expanded.push(r * psi.cos());
            expanded.push(r * psi.sin());
        }
        work = expanded;
    }
    Ok(work)
}

/// Row-parallel [`to_polar`] over an embedding matrix.
pub fn to_polar_batch(matrix: &EmbeddingMatrix, levels: usize) -> Result<Vec<PolarRep>> {
    check_dim_levels(matrix.cols(), levels)?;
    (0..matrix.rows())
        .into_par_iter()
        .map(|i| {
            let row: Vec<f64> = matrix.row(i).iter().map(|&v| v as f64).collect();
            to_polar(&row, levels)
        })
        .collect()
}

/// Inverse of [`to_polar_batch`]; all reps must share one dimension.
pub fn from_polar_batch(reps: &[PolarRep]) -> Result<EmbeddingMatrix> {
    let dim = match reps.first() {
        Some(r) => r.dim,
        None => return Err(Error::invalid_arg("empty batch")),
    };
    if reps.iter().any(|r| r.dim != dim) {
        return Err(Error::invalid_arg("mixed dimensions in batch"));
    }
    let rows: Vec<Vec<f64>> = reps.par_iter().map(from_polar).collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(reps.len() * dim);
    for row in rows {
        data.extend(row.into_iter().map(|v| v as f32));
    }
    EmbeddingMatrix::new(reps.len(), dim, data)
}

/// Concatenates angles per level across a batch; output `[l - 1]` holds every
/// level-l angle in row order.
pub fn collect_level_angles(reps: &[PolarRep]) -> Vec<Vec<f64>> {
    let levels = reps.first().map_or(0, |r| r.levels());
    let mut out = vec![Vec::new(); levels];
    for rep in reps {
        for (l, psis) in rep.angles.iter().enumerate() {
            out[l].extend_from_slice(psis);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    const FRAC_PI_2: f64 = std::f64::consts::FRAC_PI_2;
    const PI: f64 = std::f64::consts::PI;

    fn gaussian_vec(dim: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng::prng(seed);
        (0..dim).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn level1_quadrants() {
        let cases = [
            ([1.0, 0.0], 0.0),
            ([0.0, 1.0], FRAC_PI_2),
            ([-1.0, 0.0], PI),
            ([0.0, -1.0], 3.0 * FRAC_PI_2),
            // atan2(4, -3) in the second quadrant.
            ([-3.0, 4.0], 2.214297435588181),
        ];
        for (x, want) in cases {
            let rep = to_polar(&x, 1).unwrap();
            assert!((rep.level_angles(1)[0] - want).abs() < 1e-15, "{x:?}");
        }
        let rep = to_polar(&[-3.0, 4.0], 1).unwrap();
        assert_eq!(rep.radii(), &[5.0]);
    }

    #[test]
    fn two_level_example() {
        let rep = to_polar(&[1.0, 1.0, 1.0, 1.0], 2).unwrap();
        let quarter = std::f64::consts::FRAC_PI_4;
        assert!((rep.level_angles(1)[0] - quarter).abs() < 1e-15);
        assert!((rep.level_angles(1)[1] - quarter).abs() < 1e-15);
        assert!((rep.level_angles(2)[0] - quarter).abs() < 1e-15);
        assert!((rep.radii()[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn round_trip_all_depths() {
        let x = gaussian_vec(64, 5);
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        for levels in 1..=6 {
            let rep = to_polar(&x, levels).unwrap();
            assert_eq!(rep.levels(), levels);
            assert_eq!(rep.radii().len(), 64 >> levels);
            let back = from_polar(&rep).unwrap();
            for (a, b) in x.iter().zip(&back) {
                assert!((a - b).abs() < 1e-12 * norm, "levels={levels}");
            }
        }
    }

    #[test]
    fn zero_vector_and_zero_pairs() {
        let rep = to_polar(&[0.0; 8], 3).unwrap();
        assert!(rep.radii().iter().all(|&r| r == 0.0));
        assert!(rep.angles().iter().flatten().all(|&a| a == 0.0));
        assert_eq!(from_polar(&rep).unwrap(), vec![0.0; 8]);

        // One zero pair feeding a live pair: level 2 sees (0, 5).
        let rep = to_polar(&[0.0, 0.0, 3.0, 4.0], 2).unwrap();
        assert_eq!(rep.level_angles(1)[0], 0.0);
        assert_eq!(rep.level_angles(2)[0], FRAC_PI_2);
        assert!((rep.radii()[0] - 5.0).abs() < 1e-15);
    }

    #[test]
    fn negative_zero_pair_is_angle_zero() {
        let rep = to_polar(&[-0.0, 0.0], 1).unwrap();
        assert_eq!(rep.level_angles(1)[0], 0.0);
        let rep = to_polar(&[-0.0, -0.0], 1).unwrap();
        assert_eq!(rep.level_angles(1)[0], 0.0);
    }

    #[test]
    fn tiny_negative_component_stays_in_range() {
        // atan2(-1e-300, 1) + 2pi rounds to exactly 2pi; the wrap must fire.
        let rep = to_polar(&[1.0, -1e-300], 1).unwrap();
        let a = rep.level_angles(1)[0];
        assert!(a < TWO_PI);
        assert_eq!(a, 0.0);
    }

    #[test]
    fn norms_survive_every_level() {
        let x = gaussian_vec(32, 9);
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        for levels in 1..=5 {
            let rep = to_polar(&x, levels).unwrap();
            let rnorm = rep.radii().iter().map(|r| r * r).sum::<f64>().sqrt();
            assert!((norm - rnorm).abs() < 1e-12 * norm);
        }
    }

    #[test]
    fn power_of_two_scaling_preserves_angles() {
        let x = gaussian_vec(16, 11);
        let scaled: Vec<f64> = x.iter().map(|v| 4.0 * v).collect();
        let a = to_polar(&x, 4).unwrap();
        let b = to_polar(&scaled, 4).unwrap();
        for (la, lb) in a.angles().iter().zip(b.angles()) {
            for (u, v) in la.iter().zip(lb) {
                assert!((u - v).abs() < 1e-15);
            }
        }
        for (ra, rb) in a.radii().iter().zip(b.radii()) {
            assert!((4.0 * ra - rb).abs() < 1e-12 * rb.abs().max(1.0));
        }
    }

    #[test]
    fn negating_second_coordinate_reflects_level1_angle() {
        for seed in 0..8 {
            let x = gaussian_vec(2, 100 + seed);
            let flipped = [x[0], -x[1]];
            let a = to_polar(&x, 1).unwrap().level_angles(1)[0];
            let b = to_polar(&flipped, 1).unwrap().level_angles(1)[0];
            let reflected = if a == 0.0 { 0.0 } else { TWO_PI - a };
            assert!((b - reflected).abs() < 1e-12, "a={a} b={b}");
        }
    }

    #[test]
    fn batch_matches_single_rows() {
        let m = EmbeddingMatrix::generate_gaussian(16, 32, 21).unwrap();
        let reps = to_polar_batch(&m, 3).unwrap();
        for (i, rep) in reps.iter().enumerate() {
            let row: Vec<f64> = m.row(i).iter().map(|&v| v as f64).collect();
            assert_eq!(*rep, to_polar(&row, 3).unwrap());
        }
        let back = from_polar_batch(&reps).unwrap();
        for (a, b) in m.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-5 * a.abs().max(1.0));
        }
    }

    #[test]
    fn collect_level_angles_concatenates_in_row_order() {
        let m = EmbeddingMatrix::generate_gaussian(3, 8, 2).unwrap();
        let reps = to_polar_batch(&m, 2).unwrap();
        let pooled = collect_level_angles(&reps);
        assert_eq!(pooled.len(), 2);
        assert_eq!(pooled[0].len(), 3 * 4);
        assert_eq!(pooled[1].len(), 3 * 2);
        assert_eq!(&pooled[0][4..8], reps[1].level_angles(1));
    }

    #[test]
    fn shape_and_range_validation() {
        assert!(to_polar(&[1.0, 2.0, 3.0], 1).is_err());
        assert!(to_polar(&[1.0, 2.0], 0).is_err());
        assert!(to_polar(&[1.0, 2.0], 2).is_err());
        assert!(to_polar(&[1.0, f64::NAN], 1).is_err());

        assert!(PolarRep::new(4, vec![1.0], vec![vec![0.0, 0.0], vec![0.0]]).is_ok());
        // Level-2 angle above pi/2.
        assert!(PolarRep::new(4, vec![1.0], vec![vec![0.0, 0.0], vec![2.0]]).is_err());
        // Level-1 angle of exactly 2pi is outside the half-open range.
        assert!(PolarRep::new(4, vec![1.0], vec![vec![TWO_PI, 0.0], vec![0.0]]).is_err());
        // Negative radius.
        assert!(PolarRep::new(4, vec![-1.0], vec![vec![0.0, 0.0], vec![0.0]]).is_err());
        // Wrong angle count.
        assert!(PolarRep::new(4, vec![1.0], vec![vec![0.0], vec![0.0]]).is_err());
    }

    /// Closed-form reconstruction: x_i is the surviving radius times a
    /// product of one sin or cos factor per level, picked by the bits of i.
    /// Exercises a different code path than the iterative inverse.
    fn product_formula(rep: &PolarRep) -> Vec<f64> {
        let levels = rep.levels();
        (0..rep.dim())
            .map(|i| {
                let mut v = rep.radii()[i >> levels];
                for l in 1..=levels {
                    let psi = rep.level_angles(l)[i >> l];
                    v *= if (i >> (l - 1)) & 1 == 1 { psi.sin() } else { psi.cos() };
                }
                v
            })
            .collect()
    }

    #[test]
    fn inverse_agrees_with_product_formula() {
        let x = gaussian_vec(128, 31);
        for levels in [1, 3, 7] {
            let rep = to_polar(&x, levels).unwrap();
            let iterative = from_polar(&rep).unwrap();
            let direct = product_formula(&rep);
            for (a, b) in iterative.iter().zip(&direct) {
                assert!((a - b).abs() < 1e-12, "levels={levels}");
            }
        }
    }
}
