//! Analytic distributions of polar coordinates of standard Gaussian vectors.
//!
//! For x ~ N(0, I_d) the level-1 angles are uniform on [0, 2pi).  A level-l
//! angle for l >= 2 is atan2(|g2|, |g1|) with g1, g2 independent N(0, I_m),
//! m = 2^(l-1), and has density
//!
//! ```text
//! f_l(psi) = Gamma(m) / (2^(m-2) Gamma(m/2)^2) * sin(2 psi)^(m-1)
//! ```
//!
//! on [0, pi/2].  The full radius is chi with d degrees of freedom.  The CDF
//! of f_l has a closed form through the regularized incomplete beta function
//! (substitute u = sin^2(2 psi)), which this module uses instead of
//! quadrature; normalization of the two must agree and is covered by test.
//!
//! Everything here is f64 and normalization constants are evaluated in log
//! space, so the formulas stay finite for large m.

use rand::Rng;
use rand_distr::StandardNormal;
use statrs::function::beta::beta_reg;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::rng;

const TWO_PI: f64 = std::f64::consts::TAU;
const FRAC_PI_2: f64 = std::f64::consts::FRAC_PI_2;
const FRAC_PI_4: f64 = std::f64::consts::FRAC_PI_4;

/// Levels above this would overflow m = 2^(l-1); far beyond practical use.
pub const MAX_LEVEL: usize = 32;

fn check_level(level: usize) {
    assert!(
        (1..=MAX_LEVEL).contains(&level),
        "level must be in 1..={MAX_LEVEL}, got {level}"
    );
}

/// Pair count feeding one level-l angle: m = 2^(l-1).
fn level_m(level: usize) -> f64 {
    (1u64 << (level - 1)) as f64
}

/// log of the level-l normalization constant Gamma(m) / (2^(m-2) Gamma(m/2)^2).
fn ln_norm(m: f64) -> f64 {
    ln_gamma(m) - (m - 2.0) * std::f64::consts::LN_2 - 2.0 * ln_gamma(m / 2.0)
}

/// Density of the level-l angle at `theta`; zero outside the support.
pub fn angle_pdf(level: usize, theta: f64) -> f64 {
    check_level(level);
    if level == 1 {
        return if (0.0..TWO_PI).contains(&theta) { 1.0 / TWO_PI } else { 0.0 };
    }
    if !(0.0..=FRAC_PI_2).contains(&theta) {
        return 0.0;
    }
    let m = level_m(level);
    let s = (2.0 * theta).sin();
    if s <= 0.0 {
        return 0.0;
    }
    (ln_norm(m) + (m - 1.0) * s.ln()).exp()
}

/// Density of the chi distribution with `dof` degrees of freedom, the law of
/// |x| for x ~ N(0, I_dof).
pub fn radius_pdf(dof: usize, r: f64) -> f64 {
    assert!(dof >= 1, "dof must be positive");
    if r < 0.0 {
        return 0.0;
    }
    let d = dof as f64;
    if r == 0.0 {
        // r^(d-1) at r = 0: positive only in the one-dimensional case.
        return if dof == 1 { (2.0 / std::f64::consts::PI).sqrt() } else { 0.0 };
    }
    let ln_f = std::f64::consts::LN_2 - (d / 2.0) * std::f64::consts::LN_2 - ln_gamma(d / 2.0)
        + (d - 1.0) * r.ln()
        - r * r / 2.0;
    ln_f.exp()
}

/// CDF of the chi distribution with `dof` degrees of freedom:
/// P(|x| <= r) = gamma_lr(dof/2, r^2/2), the regularized lower incomplete
/// gamma function.
pub fn radius_cdf(dof: usize, r: f64) -> f64 {
    assert!(dof >= 1, "dof must be positive");
    if r <= 0.0 {
        return 0.0;
    }
    statrs::function::gamma::gamma_lr(dof as f64 / 2.0, r * r / 2.0)
}

/// E|Z|^p for Z ~ N(0,1): 2^(p/2) Gamma((p+1)/2) / sqrt(pi), valid for p > -1.
pub fn gaussian_abs_moment(p: f64) -> Result<f64> {
    if p.is_nan() || p <= -1.0 {
        return Err(Error::invalid_arg(format!("moment order must exceed -1, got {p}")));
    }
    let ln_m = (p / 2.0) * std::f64::consts::LN_2 + ln_gamma((p + 1.0) / 2.0)
        - 0.5 * std::f64::consts::PI.ln();
    Ok(ln_m.exp())
}

/// CDF of the level-l angle.  For l >= 2 the closed form is
/// I_x(m/2, 1/2) / 2 at x = sin^2(2 theta) on [0, pi/4], mirrored about
/// pi/4 by symmetry of the density.
pub fn angle_cdf(level: usize, theta: f64) -> f64 {
    check_level(level);
    if level == 1 {
        return (theta / TWO_PI).clamp(0.0, 1.0);
    }
    if theta <= 0.0 {
        return 0.0;
    }
    if theta >= FRAC_PI_2 {
        return 1.0;
    }
    let m = level_m(level);
    // Mass below t for t in (0, pi/4].  Near pi/4 the direct argument
    // sin^2(2t) saturates at 1.0 and flattens the cdf over a ~5e-9 wide
    // spot, so the inner octant switches to the complementary beta with
    // cos^2(2t), which stays well-resolved.
    let lower_half = |t: f64| {
        if t <= FRAC_PI_4 / 2.0 {
            0.5 * beta_reg(m / 2.0, 0.5, (2.0 * t).sin().powi(2))
        } else {
            0.5 * (1.0 - beta_reg(0.5, m / 2.0, (2.0 * t).cos().powi(2)))
        }
    };
    if theta <= FRAC_PI_4 {
        lower_half(theta)
    } else {
        1.0 - lower_half(FRAC_PI_2 - theta)
    }
}

/// Quantile function of the level-l angle; `p` must lie in [0, 1].
///
/// Level 1 is linear.  Higher levels bisect [`angle_cdf`], which is strictly
/// increasing on the support, to sub-ulp interval width.
pub fn angle_inverse_cdf(level: usize, p: f64) -> Result<f64> {
    check_level(level);
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid_arg(format!("probability must be in [0, 1], got {p}")));
    }
    if level == 1 {
        return Ok(p * TWO_PI);
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    if p == 1.0 {
        return Ok(FRAC_PI_2);
    }
    let (mut lo, mut hi) = (0.0f64, FRAC_PI_2);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if angle_cdf(level, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Mean and variance of the level-l angle.
///
/// Level 1 is uniform: (pi, pi^2 / 3).  Levels >= 2 have mean pi/4 by the
/// symmetry of the density about pi/4; the variance comes from composite
/// Simpson quadrature over the support.
pub fn angle_mean_var(level: usize) -> (f64, f64) {
    check_level(level);
    if level == 1 {
        return (std::f64::consts::PI, std::f64::consts::PI * std::f64::consts::PI / 3.0);
    }
    let var = simpson(
        |t| (t - FRAC_PI_4).powi(2) * angle_pdf(level, t),
        0.0,
        FRAC_PI_2,
        20_000,
    );
    (FRAC_PI_4, var)
}

/// Draws `n` level-l angles by the half-norm construction:
/// theta = atan2(|g2|, |g1|) with g1, g2 ~ N(0, I_m), which reproduces the
/// analytic density exactly.  Deterministic in `seed`.
pub fn sample_angles(level: usize, n: usize, seed: u64) -> Vec<f64> {
    check_level(level);
    let m = 1usize << (level - 1);
    let mut rng = rng::prng(seed);
    (0..n)
        .map(|_| {
            if level == 1 {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                let mut psi = b.atan2(a);
                if psi < 0.0 {
                    psi += TWO_PI;
                }
                if psi >= TWO_PI {
                    psi = 0.0;
                }
                psi
            } else {
                let mut s1 = 0.0f64;
                let mut s2 = 0.0f64;
                for _ in 0..m {
                    let g: f64 = rng.sample(StandardNormal);
                    s1 += g * g;
                }
                for _ in 0..m {
                    let g: f64 = rng.sample(StandardNormal);
                    s2 += g * g;
                }
                s2.sqrt().atan2(s1.sqrt())
            }
        })
        .collect()
}

/// Composite Simpson quadrature of `f` over [a, b] with `panels` panels
/// (rounded up to even).
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize) -> f64 {
    let n = panels.max(2) + panels % 2;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Two-sided Kolmogorov-Smirnov statistic of `samples` against `cdf`.
/// Sorts the slice in place.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &mut [f64], cdf: F) -> f64 {
    assert!(!samples.is_empty(), "ks_statistic needs samples");
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in samples.iter().enumerate() {
        let c = cdf(x);
        d = d.max((c - i as f64 / n).abs());
        d = d.max(((i + 1) as f64 / n - c).abs());
    }
    d
}

/// KS critical value at significance 0.01 for sample size `n` (asymptotic).
pub fn ks_critical_01(n: usize) -> f64 {
    1.62762 / (n as f64).sqrt()
}
