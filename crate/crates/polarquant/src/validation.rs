//! Desk-scale empirical checks of the distributional claims behind the
//! transform: reconstruction-error scaling against codebook size, the
//! variance bound, the codebook-size lemma, angle separability, and the
//! flattening effect of preconditioning on heavy-tailed data.
//!
//! Functions here return reports; assertions live in the test suites so the
//! CLI can emit the same reports without aborting.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{StandardNormal, StudentT};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::codebook::{kmeans_1d, lloyd_max_analytic, LevelCodebook};
use crate::distribution::{
    angle_cdf, angle_inverse_cdf, angle_mean_var, ks_critical_01, ks_statistic, radius_cdf,
    sample_angles,
};
use crate::error::{Error, Result};
use crate::polar::{collect_level_angles, from_polar, max_levels, to_polar, to_polar_batch, PolarRep};
use crate::precondition::{self, RotationMatrix, RotationSpec};
use crate::rng::{derive_seed, prng};
use crate::tensor::EmbeddingMatrix;

fn kahan_sum(xs: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for x in xs {
        let y = x - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = kahan_sum(xs.iter().cloned()) / n;
    let var = kahan_sum(xs.iter().map(|&x| (x - mean) * (x - mean))) / n;
    (mean, var)
}

/// One codebook-size scale of the Theorem-1 sweep.
#[derive(Debug, Clone, Serialize)]
pub struct TheoremTrialReport {
    pub d: usize,
    pub scale: usize,
    pub codebook_sizes: Vec<usize>,
    /// ceil(log2 k) per level: what packing the sizes would cost.
    pub bit_schedule: Vec<u32>,
    pub trials: usize,
    /// E |x - x'|^2 / |x|^2 over the trials.
    pub mean_rel_sq_error: f64,
    /// Angle bits per coordinate; radii are stored exactly here.
    pub bits_per_coord: f64,
}

/// Per-trial relative squared reconstruction errors through quantization
/// with the given per-level codebook sizes.  Radii are kept exact so only
/// angle quantization contributes.
pub fn reconstruction_errors(
    d: usize,
    sizes: &[usize],
    trials: usize,
    seed: u64,
    rotation: RotationSpec,
) -> Result<Vec<f64>> {
    if !d.is_power_of_two() || d < 2 {
        return Err(Error::invalid_arg(format!("d={d} must be a power of two, at least 2")));
    }
    let levels = sizes.len();
    if levels == 0 || levels > max_levels(d) {
        return Err(Error::invalid_arg(format!(
            "{levels} levels out of range for d={d} (max {})",
            max_levels(d)
        )));
    }
    if trials == 0 {
        return Err(Error::invalid_arg("trials must be positive"));
    }
    let books: Vec<LevelCodebook> = sizes
        .iter()
        .enumerate()
        .map(|(i, &k)| lloyd_max_analytic(i + 1, k, 200))
        .collect::<Result<_>>()?;
    let rot = RotationMatrix::from_spec(d, rotation)?;
    (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = prng(derive_seed(seed, &format!("t1-trial-{t}")));
            let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let rep = to_polar(&rot.apply_vec(&x)?, levels)?;
            let angles = (1..=levels)
                .map(|l| {
                    let cb = &books[l - 1];
                    rep.level_angles(l).iter().map(|&a| cb.centroid(cb.assign(a))).collect()
                })
                .collect();
            let quantized = PolarRep::new(d, rep.radii().to_vec(), angles)?;
            let back = rot.apply_inverse_vec(&from_polar(&quantized)?)?;
            let num = kahan_sum(x.iter().zip(&back).map(|(&a, &b)| (a - b) * (a - b)));
            let den = kahan_sum(x.iter().map(|&a| a * a));
            Ok(num / den)
        })
        .collect()
}

/// Theorem-1 sweep: codebook sizes s*k0*l per level (level 1 gets 4*s*k0,
/// equalizing interval width over its 4x-wider support) for s in
/// {1, 2, 4, 8}.  Each doubling adds one bit per angle, so consecutive
/// errors should shrink by roughly 4x.
pub fn check_theorem1(d: usize, k0: usize, trials: usize, seed: u64) -> Result<Vec<TheoremTrialReport>> {
    if k0 < 2 {
        return Err(Error::invalid_arg("k0 must be at least 2"));
    }
    let levels = max_levels(d);
    [1usize, 2, 4, 8]
        .iter()
        .map(|&s| {
            let sizes: Vec<usize> = (1..=levels)
                .map(|l| {
                    let base = if l == 1 { 4 * s * k0 } else { s * k0 * l };
                    base.clamp(2, 1 << 16)
                })
                .collect();
            let errors = reconstruction_errors(d, &sizes, trials, seed, RotationSpec::Identity)?;
            let bit_schedule: Vec<u32> =
                sizes.iter().map(|&k| (k as f64).log2().ceil() as u32).collect();
            let angle_bits: f64 = bit_schedule
                .iter()
                .enumerate()
                .map(|(i, &b)| b as f64 * (d >> (i + 1)) as f64)
                .sum();
            Ok(TheoremTrialReport {
                d,
                scale: s,
                codebook_sizes: sizes,
                bit_schedule,
                trials,
                mean_rel_sq_error: kahan_sum(errors.iter().cloned()) / trials as f64,
                bits_per_coord: angle_bits / d as f64,
            })
        })
        .collect()
}

/// Error ratios between consecutive scales of a Theorem-1 sweep.
pub fn doubling_factors(reports: &[TheoremTrialReport]) -> Vec<f64> {
    reports.windows(2).map(|w| w[0].mean_rel_sq_error / w[1].mean_rel_sq_error).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct VarianceLevelReport {
    pub level: usize,
    pub samples: usize,
    pub sample_var: f64,
    pub quadrature_var: f64,
    /// sample_var * (2^{l-1} - 1); the bound says this stays O(1).
    pub scaled_product: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VarianceBoundReport {
    pub levels: Vec<VarianceLevelReport>,
    /// Spread of the nonzero scaled products.
    pub max_min_product_ratio: f64,
    /// All products (levels >= 2) inside the frozen [0.1, 0.5] band.
    pub products_in_band: bool,
    /// (level, Var(level+1)/Var(level)) for consecutive requested levels.
    pub halving_ratios: Vec<(usize, f64)>,
}

/// Monte-Carlo check that Var(Theta_l) * (2^{l-1} - 1) stays inside a fixed
/// band, i.e. variance decays like 1/(d-1).
pub fn check_variance_bound(levels: &[usize], samples: usize, seed: u64) -> Result<VarianceBoundReport> {
    if levels.is_empty() || levels.iter().any(|&l| !(2..=10).contains(&l)) {
        return Err(Error::invalid_arg("levels must be a nonempty subset of 2..=10"));
    }
    if samples < 2 {
        return Err(Error::invalid_arg("need at least 2 samples"));
    }
    let per_level: Vec<VarianceLevelReport> = levels
        .par_iter()
        .map(|&l| {
            let draws = sample_angles(l, samples, derive_seed(seed, &format!("var-l{l}")));
            let (_, var) = mean_var(&draws);
            let m = 1u64 << (l - 1);
            VarianceLevelReport {
                level: l,
                samples,
                sample_var: var,
                quadrature_var: angle_mean_var(l).1,
                scaled_product: var * (m - 1) as f64,
            }
        })
        .collect();
    let products: Vec<f64> =
        per_level.iter().filter(|r| r.level >= 2).map(|r| r.scaled_product).collect();
    let max = products.iter().cloned().fold(f64::MIN, f64::max);
    let min = products.iter().cloned().fold(f64::MAX, f64::min);
    let mut halving = Vec::new();
    for w in per_level.windows(2) {
        if w[1].level == w[0].level + 1 {
            halving.push((w[0].level, w[1].sample_var / w[0].sample_var));
        }
    }
    Ok(VarianceBoundReport {
        levels: per_level,
        max_min_product_ratio: max / min,
        products_in_band: products.iter().all(|&p| (0.1..=0.5).contains(&p)),
        halving_ratios: halving,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LemmaEpsEntry {
    pub eps: f64,
    /// Smallest k found with Var_k <= eps * Var_1.
    pub min_k: usize,
    pub var_k: f64,
    pub target: f64,
    pub k_sqrt_eps: f64,
    /// k * sqrt(eps) / ln(1/sigma), the lemma's claimed constant.
    pub normalized: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CodebookLemmaReport {
    pub level: usize,
    pub samples: usize,
    pub var_1: f64,
    pub sigma: f64,
    pub entries: Vec<LemmaEpsEntry>,
    /// Every (k, Var_k) pair evaluated during the search, ascending in k.
    pub evaluated: Vec<(usize, f64)>,
    /// Largest ratio between consecutive k*sqrt(eps) values.
    pub max_consecutive_ratio: f64,
}

struct LemmaSearch<'a> {
    level: usize,
    samples: &'a [f64],
    sorted: Vec<f64>,
    seed: u64,
    // k -> (distortion, centroids); augmentation keeps this monotone.
    evaluated: BTreeMap<usize, (f64, Vec<f64>)>,
}

impl LemmaSearch<'_> {
    fn distortion(&self, book: &LevelCodebook) -> f64 {
        kahan_sum(self.samples.iter().map(|&s| {
            let c = book.centroid(book.assign(s));
            (s - c) * (s - c)
        })) / self.samples.len() as f64
    }

    /// Best smaller-k book grown to `k` by dropping new centroids on the
    /// worst-served samples; guarantees Var_k never rises with k.
    fn augmented(&self, k: usize) -> Option<Vec<f64>> {
        let (_, (_, base)) = self.evaluated.range(..k).next_back()?;
        let mut centroids = base.clone();
        while centroids.len() < k {
            let mut worst = None::<(f64, f64)>;
            for &s in &self.sorted {
                let i = centroids.partition_point(|&c| c < s);
                let mut best = f64::INFINITY;
                if i < centroids.len() {
                    best = best.min(centroids[i] - s);
                }
                if i > 0 {
                    best = best.min(s - centroids[i - 1]);
                }
                if best > 0.0 && worst.is_none_or(|(w, _)| best > w) {
                    worst = Some((best, s));
                }
            }
            let (_, s) = worst?;
            let i = centroids.partition_point(|&c| c < s);
            centroids.insert(i, s);
        }
        Some(centroids)
    }

    fn var_k(&mut self, k: usize) -> Result<f64> {
        if let Some((d, _)) = self.evaluated.get(&k) {
            return Ok(*d);
        }
        let mut best: Option<(f64, Vec<f64>)> = None;
        let consider = |dist: f64, centroids: Vec<f64>, best: &mut Option<(f64, Vec<f64>)>| {
            if best.as_ref().is_none_or(|(b, _)| dist < *b) {
                *best = Some((dist, centroids));
            }
        };
        if k == 1 {
            let (mean, var) = mean_var(self.samples);
            consider(var, vec![mean], &mut best);
        } else {
            for r in 0..5 {
                let book = kmeans_1d(
                    self.level,
                    self.samples,
                    k,
                    derive_seed(self.seed, &format!("lemma-k{k}-r{r}")),
                    100,
                )?;
                let dist = self.distortion(&book);
                consider(dist, book.centroids().to_vec(), &mut best);
            }
            if let Some(centroids) = self.augmented(k) {
                let book = LevelCodebook::new(self.level, centroids.clone())?;
                consider(self.distortion(&book), centroids, &mut best);
            }
        }
        let (dist, centroids) = best.expect("at least one candidate");
        self.evaluated.insert(k, (dist, centroids));
        Ok(dist)
    }
}

/// Finds, for each eps, the smallest k-means codebook whose quantization
/// variance drops below eps * Var_1, and reports the k*sqrt(eps) scaling the
/// lemma predicts to be flat.
pub fn check_codebook_size_lemma(level: usize, eps_list: &[f64], seed: u64) -> Result<CodebookLemmaReport> {
    if level < 2 {
        return Err(Error::invalid_arg("the lemma concerns levels >= 2"));
    }
    if eps_list.is_empty() || eps_list.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
        return Err(Error::invalid_arg("eps values must lie in (0, 1]"));
    }
    const SAMPLES: usize = 200_000;
    let samples = sample_angles(level, SAMPLES, derive_seed(seed, "lemma-samples"));
    let mut sorted = samples.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut search =
        LemmaSearch { level, samples: &samples, sorted, seed, evaluated: BTreeMap::new() };
    let var_1 = search.var_k(1)?;
    let sigma = var_1.sqrt();
    let log_inv_sigma = (1.0 / sigma).ln();

    let mut entries = Vec::new();
    for &eps in eps_list {
        let target = eps * var_1;
        let min_k = if search.var_k(1)? <= target {
            1
        } else {
            let mut hi = 2usize;
            while search.var_k(hi)? > target {
                hi *= 2;
                if hi > (1 << 16) {
                    return Err(Error::InvalidState(format!(
                        "no codebook up to 2^16 entries reaches eps={eps}"
                    )));
                }
            }
            let mut lo = hi / 2;
            while hi - lo > 1 {
                let mid = (lo + hi) / 2;
                if search.var_k(mid)? <= target {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            hi
        };
        let var_k = search.var_k(min_k)?;
        let k_sqrt_eps = min_k as f64 * eps.sqrt();
        entries.push(LemmaEpsEntry {
            eps,
            min_k,
            var_k,
            target,
            k_sqrt_eps,
            normalized: k_sqrt_eps / log_inv_sigma,
        });
    }
    let mut max_ratio: f64 = 1.0;
    for w in entries.windows(2) {
        let (a, b) = (w[0].k_sqrt_eps, w[1].k_sqrt_eps);
        max_ratio = max_ratio.max(a.max(b) / a.min(b));
    }
    Ok(CodebookLemmaReport {
        level,
        samples: SAMPLES,
        var_1,
        sigma,
        entries,
        evaluated: search.evaluated.iter().map(|(&k, &(d, _))| (k, d)).collect(),
        max_consecutive_ratio: max_ratio,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CoordKs {
    pub label: String,
    pub ks: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeparabilityReport {
    pub d: usize,
    pub samples: usize,
    pub max_abs_angle_corr: f64,
    pub max_abs_radius_angle_corr: f64,
    pub ks_critical: f64,
    pub max_ks: f64,
    pub coord_ks: Vec<CoordKs>,
    /// Same statistic on data with the second pair overwritten by the
    /// first; must light up if the test has power.
    pub control_max_corr: f64,
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = kahan_sum(a.iter().cloned()) / n;
    let mb = kahan_sum(b.iter().cloned()) / n;
    let cov = kahan_sum(a.iter().zip(b).map(|(&x, &y)| (x - ma) * (y - mb)));
    let va = kahan_sum(a.iter().map(|&x| (x - ma) * (x - ma)));
    let vb = kahan_sum(b.iter().map(|&y| (y - mb) * (y - mb)));
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// Column-major angle samples, their labels, and the top-level radii.
type PolarColumns = (Vec<Vec<f64>>, Vec<String>, Vec<f64>);

// Angle columns (all levels, full recursion) plus the radius column.
fn polar_columns(d: usize, n: usize, seed: u64, duplicate_second_pair: bool) -> Result<PolarColumns> {
    let levels = max_levels(d);
    let mut rng = prng(seed);
    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(n); d - 1];
    let mut labels = Vec::with_capacity(d - 1);
    for l in 1..=levels {
        for i in 0..(d >> l) {
            labels.push(format!("level{l}_angle{i}"));
        }
    }
    let mut radius = Vec::with_capacity(n);
    for _ in 0..n {
        let mut x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if duplicate_second_pair {
            x[2] = x[0];
            x[3] = x[1];
        }
        let rep = to_polar(&x, levels)?;
        let mut c = 0;
        for l in 1..=levels {
            for &a in rep.level_angles(l) {
                cols[c].push(a);
                c += 1;
            }
        }
        radius.push(rep.radii()[0]);
    }
    Ok((cols, labels, radius))
}

/// Lemma 3.2 separability: every angle pair (and every radius-angle pair)
/// of fully recursed Gaussian vectors is uncorrelated, and each coordinate
/// matches its analytic marginal by KS.
pub fn check_separability(d: usize, n: usize, seed: u64) -> Result<SeparabilityReport> {
    if !d.is_power_of_two() || d < 4 {
        return Err(Error::invalid_arg(format!("d={d} must be a power of two, at least 4")));
    }
    if n < 100 {
        return Err(Error::invalid_arg("need at least 100 samples"));
    }
    let (cols, labels, radius) = polar_columns(d, n, derive_seed(seed, "separability"), false)?;

    let mut max_angle = 0.0f64;
    for i in 0..cols.len() {
        for j in (i + 1)..cols.len() {
            max_angle = max_angle.max(pearson(&cols[i], &cols[j]).abs());
        }
    }
    let mut max_radius = 0.0f64;
    for col in &cols {
        max_radius = max_radius.max(pearson(col, &radius).abs());
    }

    let levels = max_levels(d);
    let mut coord_ks = Vec::with_capacity(d);
    let mut max_ks = 0.0f64;
    let mut c = 0;
    for l in 1..=levels {
        for _ in 0..(d >> l) {
            let mut sorted = cols[c].clone();
            let ks = ks_statistic(&mut sorted, |t| angle_cdf(l, t));
            max_ks = max_ks.max(ks);
            coord_ks.push(CoordKs { label: labels[c].clone(), ks });
            c += 1;
        }
    }
    let mut sorted_r = radius.clone();
    let ks_r = ks_statistic(&mut sorted_r, |r| radius_cdf(d, r));
    max_ks = max_ks.max(ks_r);
    coord_ks.push(CoordKs { label: "radius".into(), ks: ks_r });

    // Positive control: duplicating pair 1 onto pair 2 forces identical
    // level-1 angles, which the correlation scan must catch.
    let (ccols, _, _) = polar_columns(d, n, derive_seed(seed, "separability"), true)?;
    let mut control = 0.0f64;
    for i in 0..ccols.len() {
        for j in (i + 1)..ccols.len() {
            control = control.max(pearson(&ccols[i], &ccols[j]).abs());
        }
    }

    Ok(SeparabilityReport {
        d,
        samples: n,
        max_abs_angle_corr: max_angle,
        max_abs_radius_angle_corr: max_radius,
        ks_critical: ks_critical_01(n),
        max_ks,
        coord_ks,
        control_max_corr: control,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GofLevelReport {
    pub level: usize,
    pub samples: usize,
    pub bins: usize,
    pub chi2: f64,
    pub p_value: f64,
    pub sample_mean: f64,
    pub expected_mean: f64,
    /// 3 sigma / sqrt(N) acceptance half-width for the mean.
    pub mean_tolerance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GofReport {
    pub d: usize,
    pub vectors: usize,
    pub levels: Vec<GofLevelReport>,
}

/// Chi-square goodness of fit of rotated-Gaussian angles against the
/// analytic densities, with equal-probability bins, plus the sample-mean
/// check.
pub fn check_lemma32_fit(
    d: usize,
    n_vectors: usize,
    levels: usize,
    bins: usize,
    seed: u64,
) -> Result<GofReport> {
    if levels == 0 || levels > max_levels(d) {
        return Err(Error::invalid_arg(format!(
            "{levels} levels out of range for d={d} (max {})",
            max_levels(d)
        )));
    }
    if bins < 4 {
        return Err(Error::invalid_arg("need at least 4 bins"));
    }
    let data = EmbeddingMatrix::generate_gaussian(n_vectors, d, derive_seed(seed, "gof-data"))?;
    let rot = precondition::build_rotation(d, derive_seed(seed, "gof-rot"))?;
    let rotated = precondition::apply(&data, &rot)?;
    let reps = to_polar_batch(&rotated, levels)?;
    let per_level = collect_level_angles(&reps);

    let chi2_dist = ChiSquared::new((bins - 1) as f64)
        .map_err(|e| Error::InvalidState(format!("chi-square dof: {e}")))?;
    let mut out = Vec::with_capacity(levels);
    for (i, samples) in per_level.iter().enumerate() {
        let level = i + 1;
        let edges: Vec<f64> = (1..bins)
            .map(|j| angle_inverse_cdf(level, j as f64 / bins as f64))
            .collect::<Result<_>>()?;
        let mut counts = vec![0u64; bins];
        for &s in samples {
            counts[edges.partition_point(|&e| e <= s)] += 1;
        }
        let expected = samples.len() as f64 / bins as f64;
        let chi2 =
            kahan_sum(counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected));
        let p_value = 1.0 - chi2_dist.cdf(chi2);
        let (q_mean, q_var) = angle_mean_var(level);
        let sample_mean = kahan_sum(samples.iter().cloned()) / samples.len() as f64;
        out.push(GofLevelReport {
            level,
            samples: samples.len(),
            bins,
            chi2,
            p_value,
            sample_mean,
            expected_mean: q_mean,
            mean_tolerance: 3.0 * q_var.sqrt() / (samples.len() as f64).sqrt(),
        });
    }
    Ok(GofReport { d, vectors: n_vectors, levels: out })
}

/// Coordinates drawn from a scaled Student-t(3): heavy tails, and the
/// alternating per-coordinate scales wreck the angle distribution until a
/// rotation mixes them.
pub fn generate_heavy_tailed(n: usize, d: usize, seed: u64) -> Result<EmbeddingMatrix> {
    let dist = StudentT::new(3.0).map_err(|e| Error::InvalidState(format!("student-t: {e}")))?;
    let mut rng = prng(seed);
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        for j in 0..d {
            let scale = if j % 2 == 0 { 5.0 } else { 0.5 };
            data.push((scale * rng.sample::<f64, _>(dist)) as f32);
        }
    }
    EmbeddingMatrix::new(n, d, data)
}

#[derive(Debug, Clone, Serialize)]
pub struct FlatteningReport {
    pub d: usize,
    pub samples: usize,
    /// KS distance of level-1 angles to the uniform law, raw data.
    pub ks_unrotated: f64,
    /// Same after a Haar rotation.
    pub ks_rotated: f64,
    pub coord_min_unrotated: f64,
    pub coord_max_unrotated: f64,
    pub coord_min_rotated: f64,
    pub coord_max_rotated: f64,
}

fn level1_angles(matrix: &EmbeddingMatrix) -> Result<Vec<f64>> {
    let reps = to_polar_batch(matrix, 1)?;
    Ok(collect_level_angles(&reps).remove(0))
}

fn coord_range(matrix: &EmbeddingMatrix) -> (f64, f64) {
    let mut min = f64::MAX;
    let mut max = f64::MIN;
    for &v in matrix.data() {
        min = min.min(v as f64);
        max = max.max(v as f64);
    }
    (min, max)
}

/// The Figure-2 effect as numbers: preconditioning pulls heavy-tailed
/// level-1 angles toward uniform and shrinks the coordinate range.
pub fn check_rotation_flattening(d: usize, n: usize, seed: u64) -> Result<FlatteningReport> {
    let data = generate_heavy_tailed(n, d, derive_seed(seed, "ht-data"))?;
    let rot = precondition::build_rotation(d, derive_seed(seed, "ht-rot"))?;
    let rotated = precondition::apply(&data, &rot)?;

    let uniform = |t: f64| t / std::f64::consts::TAU;
    let mut raw = level1_angles(&data)?;
    let ks_unrotated = ks_statistic(&mut raw, uniform);
    let mut rot_angles = level1_angles(&rotated)?;
    let ks_rotated = ks_statistic(&mut rot_angles, uniform);
    let (umin, umax) = coord_range(&data);
    let (rmin, rmax) = coord_range(&rotated);
    Ok(FlatteningReport {
        d,
        samples: n,
        ks_unrotated,
        ks_rotated,
        coord_min_unrotated: umin,
        coord_max_unrotated: umax,
        coord_min_rotated: rmin,
        coord_max_rotated: rmax,
    })
}
