//! Per-level scalar codebooks for angle quantization.
//!
//! Each level gets its own 1-D codebook.  Nearest-centroid assignment is by
//! sorted-boundary lookup (boundaries are centroid midpoints); a value that
//! lands exactly on a boundary takes the lower index, matching the k-means
//! tie rule.  Level-1 angles live on a circle but are clustered as a plain
//! interval [0, 2pi); the density there is uniform, so the wrap seam costs
//! nothing that the bit budget would notice.
//!
//! Codebooks come from three builders: seeded 1-D k-means on empirical
//! angles (online), k-means on angles drawn from the analytic density
//! (offline), and deterministic Lloyd-Max iteration directly on the analytic
//! density (no samples at all), used by the theory checks.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distribution::{angle_inverse_cdf, angle_pdf, sample_angles, MAX_LEVEL};
use crate::error::{Error, Result};
use crate::polar::{collect_level_angles, PolarRep};
use crate::rng;

const TWO_PI: f64 = std::f64::consts::TAU;
const FRAC_PI_2: f64 = std::f64::consts::FRAC_PI_2;

/// Most levels a bit-width config may describe.
pub const MAX_CONFIG_LEVELS: usize = 16;
/// Most bits per level; caps codebooks at 65536 entries.
pub const MAX_LEVEL_BITS: u32 = 16;

fn support_hi(level: usize) -> f64 {
    if level == 1 {
        TWO_PI
    } else {
        FRAC_PI_2
    }
}

/// Angle support check; level 1 is half-open at 2pi.
fn in_support(level: usize, theta: f64) -> bool {
    if !theta.is_finite() || theta < 0.0 {
        return false;
    }
    if level == 1 {
        theta < TWO_PI
    } else {
        theta <= FRAC_PI_2
    }
}

/// Where codebooks come from: clustered on the prompt's own angles, or
/// precomputed from the analytic densities and shared across inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CodebookMode {
    Online,
    Offline,
}

impl std::str::FromStr for CodebookMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "online" => Ok(CodebookMode::Online),
            "offline" => Ok(CodebookMode::Offline),
            other => Err(Error::invalid_arg(format!(
                "unknown codebook mode {other:?}, expected online or offline"
            ))),
        }
    }
}

/// Bits spent per angle at each level.  Index 0 is level 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitWidthConfig {
    bits: Vec<u32>,
}

impl BitWidthConfig {
    pub fn new(bits: Vec<u32>) -> Result<Self> {
        if bits.is_empty() || bits.len() > MAX_CONFIG_LEVELS {
            return Err(Error::invalid_arg(format!(
                "level count must be in 1..={MAX_CONFIG_LEVELS}, got {}",
                bits.len()
            )));
        }
        if let Some(&b) = bits.iter().find(|&&b| b == 0 || b > MAX_LEVEL_BITS) {
            return Err(Error::invalid_arg(format!(
                "per-level bits must be in 1..={MAX_LEVEL_BITS}, got {b}"
            )));
        }
        Ok(BitWidthConfig { bits })
    }

    pub fn levels(&self) -> usize {
        self.bits.len()
    }

    pub fn bits(&self) -> &[u32] {
        &self.bits
    }

    /// Bits for one level; `level` is 1-based.
    pub fn level_bits(&self, level: usize) -> u32 {
        self.bits[level - 1]
    }

    /// Total angle bits for one vector of dimension `dim`.
    pub fn angle_bits_per_vector(&self, dim: usize) -> Result<u64> {
        if dim < 2 || !dim.is_power_of_two() || self.levels() > crate::polar::max_levels(dim) {
            return Err(Error::invalid_arg(format!(
                "dim {dim} does not admit {} levels",
                self.levels()
            )));
        }
        Ok(self
            .bits
            .iter()
            .enumerate()
            .map(|(i, &b)| ((dim >> (i + 1)) as u64) * b as u64)
            .sum())
    }
}

/// The 4-level schedule used throughout the docs: 4 bits at level 1, then 2.
impl Default for BitWidthConfig {
    fn default() -> Self {
        BitWidthConfig { bits: vec![4, 2, 2, 2] }
    }
}

impl std::str::FromStr for BitWidthConfig {
    type Err = Error;

    /// Parses a comma-separated list like "4,2,2,2".
    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<u32>()
                    .map_err(|_| Error::invalid_arg(format!("bad bit width {tok:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        BitWidthConfig::new(bits)
    }
}

/// Sorted centroids for one level plus precomputed assignment boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelCodebook {
    level: usize,
    centroids: Vec<f64>,
    /// Midpoints between adjacent centroids; len = centroids.len() - 1.
    boundaries: Vec<f64>,
}

impl LevelCodebook {
    /// Centroids must be strictly increasing and inside the level support.
    pub fn new(level: usize, centroids: Vec<f64>) -> Result<Self> {
        if level == 0 || level > MAX_LEVEL {
            return Err(Error::invalid_arg(format!("level must be in 1..={MAX_LEVEL}, got {level}")));
        }
        if centroids.is_empty() {
            return Err(Error::invalid_arg("codebook needs at least one centroid"));
        }
        for &c in &centroids {
            if !in_support(level, c) {
                return Err(Error::invalid_arg(format!(
                    "centroid {c} outside level-{level} support"
                )));
            }
        }
        if centroids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid_arg("centroids must be strictly increasing"));
        }
        let boundaries = centroids.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        Ok(LevelCodebook { level, centroids, boundaries })
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn centroid(&self, idx: usize) -> f64 {
        self.centroids[idx]
    }

    /// Index of the nearest centroid; a boundary value goes left.
    pub fn assign(&self, theta: f64) -> usize {
        self.boundaries.partition_point(|&b| b < theta)
    }
}

/// Seeded 1-D k-means: k-means++ init, then Lloyd until the partition stops
/// changing or `max_iters` passes.  An empty cluster is reseeded at the
/// sample farthest from its assigned centroid (lowest index on ties).
pub fn kmeans_1d(
    level: usize,
    samples: &[f64],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<LevelCodebook> {
    kmeans_impl(level, samples, k, seed, max_iters, None)
}

/// [`kmeans_1d`] plus the Lloyd objective recorded after every mean update,
/// for monotonicity audits.
pub fn kmeans_1d_traced(
    level: usize,
    samples: &[f64],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<(LevelCodebook, Vec<f64>)> {
    let mut trace = Vec::new();
    let book = kmeans_impl(level, samples, k, seed, max_iters, Some(&mut trace))?;
    Ok((book, trace))
}

fn kmeans_impl(
    level: usize,
    samples: &[f64],
    k: usize,
    seed: u64,
    max_iters: usize,
    mut trace: Option<&mut Vec<f64>>,
) -> Result<LevelCodebook> {
    use rand::Rng;

    if k == 0 {
        return Err(Error::invalid_arg("k must be positive"));
    }
    if max_iters == 0 {
        return Err(Error::invalid_arg("max_iters must be positive"));
    }
    if samples.len() < k {
        return Err(Error::invalid_arg(format!(
            "need at least k = {k} samples, got {}",
            samples.len()
        )));
    }
    if let Some(&s) = samples.iter().find(|&&s| !in_support(level, s)) {
        return Err(Error::invalid_arg(format!(
            "sample {s} outside level-{level} support"
        )));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let distinct = 1 + sorted.windows(2).filter(|w| w[0] < w[1]).count();
    if distinct < k {
        return Err(Error::invalid_arg(format!(
            "only {distinct} distinct samples for k = {k} clusters"
        )));
    }
    let n = sorted.len();

    // Prefix sums of values and squares for O(1) cell statistics.
    let mut ps = vec![0.0f64; n + 1];
    let mut pq = vec![0.0f64; n + 1];
    for (i, &s) in sorted.iter().enumerate() {
        ps[i + 1] = ps[i] + s;
        pq[i + 1] = pq[i] + s * s;
    }

    // k-means++ seeding on the sorted samples.
    let mut rng = rng::prng(seed);
    let mut centroids = Vec::with_capacity(k);
    centroids.push(sorted[rng.random_range(0..n)]);
    let mut d2: Vec<f64> = sorted.iter().map(|&s| (s - centroids[0]).powi(2)).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            sorted[pick]
        } else {
            // All mass already covered; grab any sample not yet a centroid.
            *sorted
                .iter()
                .find(|&&s| !centroids.contains(&s))
                .expect("distinct count checked above")
        };
        centroids.push(next);
        for (i, &s) in sorted.iter().enumerate() {
            d2[i] = d2[i].min((s - next).powi(2));
        }
    }
    centroids.sort_by(|a, b| a.partial_cmp(b).unwrap());

    // Lloyd iterations over the sorted partition.  `ends[i]` is one past the
    // last sample of cell i; a sample exactly on a boundary goes left.
    let mut prev_ends: Vec<usize> = Vec::new();
    let mut prev_cost = f64::INFINITY;
    for _ in 0..max_iters {
        let mut ends = Vec::with_capacity(k);
        for w in centroids.windows(2) {
            let b = 0.5 * (w[0] + w[1]);
            ends.push(sorted.partition_point(|&s| s <= b));
        }
        ends.push(n);

        // Reseed empty cells at the worst-served sample.
        let has_empty = {
            let mut begin = 0;
            let mut empty = None;
            for (i, &e) in ends.iter().enumerate() {
                if e == begin {
                    empty = Some(i);
                    break;
                }
                begin = e;
            }
            empty.is_some()
        };
        if has_empty {
            let mut far_idx = 0;
            let mut far_d = -1.0f64;
            let mut cell = 0;
            for (i, &s) in sorted.iter().enumerate() {
                while cell + 1 < k && i >= ends[cell] {
                    cell += 1;
                }
                let d = (s - centroids[cell]).abs();
                if d > far_d {
                    far_d = d;
                    far_idx = i;
                }
            }
            let kicked = sorted[far_idx];
            // Replace the first empty cell's centroid with the outlier.
            let mut begin = 0;
            for (i, &e) in ends.iter().enumerate() {
                if e == begin {
                    centroids[i] = kicked;
                    break;
                }
                begin = e;
            }
            centroids.sort_by(|a, b| a.partial_cmp(b).unwrap());
            prev_ends.clear();
            continue;
        }

        if ends == prev_ends {
            break;
        }

        // Mean update plus a cost check: Lloyd never increases the objective.
        let mut cost = 0.0;
        let mut begin = 0;
        for (i, &e) in ends.iter().enumerate() {
            let cnt = (e - begin) as f64;
            let mean = (ps[e] - ps[begin]) / cnt;
            cost += (pq[e] - pq[begin]) - cnt * mean * mean;
            centroids[i] = mean;
            begin = e;
        }
        debug_assert!(
            cost <= prev_cost * (1.0 + 1e-12) + 1e-12,
            "Lloyd cost rose: {prev_cost} -> {cost}"
        );
        if let Some(t) = trace.as_deref_mut() {
            t.push(cost);
        }
        prev_cost = cost;
        prev_ends = ends;
    }

    LevelCodebook::new(level, centroids)
}

/// Equal-probability codebook: centroid i at the ((i + 0.5) / k)-quantile of
/// the analytic level density.
pub fn quantile_codebook(level: usize, k: usize) -> Result<LevelCodebook> {
    if k == 0 {
        return Err(Error::invalid_arg("k must be positive"));
    }
    let centroids = (0..k)
        .map(|i| angle_inverse_cdf(level, (i as f64 + 0.5) / k as f64))
        .collect::<Result<Vec<_>>>()?;
    LevelCodebook::new(level, centroids)
}

// 16-point Gauss-Legendre rule on [-1, 1], positive half.
const GL_X: [f64; 8] = [
    0.0950125098376374,
    0.2816035507792589,
    0.4580167776572274,
    0.6178762444026438,
    0.755404408355003,
    0.8656312023878318,
    0.9445750230732326,
    0.9894009349916499,
];
const GL_W: [f64; 8] = [
    0.1894506104550685,
    0.1826034150449236,
    0.1691565193950025,
    0.1495959888165767,
    0.1246289712555339,
    0.0951585116824928,
    0.0622535239386479,
    0.0271524594117541,
];

/// Moments (mass, E theta, E theta^2 restricted to [lo, hi]) of the level
/// density, by Gauss-Legendre panels no wider than support / 64.
fn cell_moments(level: usize, lo: f64, hi: f64) -> (f64, f64, f64) {
    let width = hi - lo;
    if width <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let max_panel = support_hi(level) / 64.0;
    let panels = ((width / max_panel).ceil() as usize).max(1);
    let h = width / panels as f64;
    let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for p in 0..panels {
        let mid = lo + (p as f64 + 0.5) * h;
        let half = 0.5 * h;
        for i in 0..8 {
            for sign in [-1.0, 1.0] {
                let t = mid + sign * half * GL_X[i];
                let f = GL_W[i] * half * angle_pdf(level, t);
                m0 += f;
                m1 += f * t;
                m2 += f * t * t;
            }
        }
    }
    (m0, m1, m2)
}

/// Deterministic Lloyd-Max on the analytic level density: quantile init,
/// then alternate midpoint boundaries and conditional-mean centroids.
/// Converges to the optimal scalar quantizer for the level distribution.
pub fn lloyd_max_analytic(level: usize, k: usize, max_iters: usize) -> Result<LevelCodebook> {
    let init = quantile_codebook(level, k)?;
    let mut centroids = init.centroids().to_vec();
    let hi = support_hi(level);
    for _ in 0..max_iters {
        let mut moved = 0.0f64;
        let mut next = Vec::with_capacity(k);
        for i in 0..k {
            let lo_b = if i == 0 { 0.0 } else { 0.5 * (centroids[i - 1] + centroids[i]) };
            let hi_b = if i + 1 == k { hi } else { 0.5 * (centroids[i] + centroids[i + 1]) };
            let (m0, m1, _) = cell_moments(level, lo_b, hi_b);
            let c = if m0 > 1e-300 { m1 / m0 } else { 0.5 * (lo_b + hi_b) };
            moved = moved.max((c - centroids[i]).abs());
            next.push(c);
        }
        centroids = next;
        if moved < 1e-13 * hi {
            break;
        }
    }
    LevelCodebook::new(level, centroids)
}

/// Expected squared quantization error of `book` under the analytic level
/// density, E[(theta - c(theta))^2], by per-cell quadrature.
pub fn expected_quant_error(book: &LevelCodebook) -> f64 {
    let hi = support_hi(book.level());
    let k = book.len();
    let mut acc = 0.0;
    for i in 0..k {
        let lo_b = if i == 0 { 0.0 } else { book.boundaries()[i - 1] };
        let hi_b = if i + 1 == k { hi } else { book.boundaries()[i] };
        let c = book.centroid(i);
        let (m0, m1, m2) = cell_moments(book.level(), lo_b, hi_b);
        acc += m2 - 2.0 * c * m1 + c * c * m0;
    }
    acc
}

/// Training provenance carried inside the serialized codebook file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodebookMeta {
    pub seed: u64,
    /// Training vectors for online builds, draws per level for offline.
    pub samples: usize,
    pub levels: usize,
}

/// One codebook per level plus the bit widths they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookSet {
    levels: Vec<LevelCodebook>,
    bits: BitWidthConfig,
    meta: CodebookMeta,
}

impl CodebookSet {
    /// Level l codebook must sit at index l - 1 and fit its bit budget
    /// (at most 2^bits centroids).
    pub fn new(levels: Vec<LevelCodebook>, bits: BitWidthConfig, meta: CodebookMeta) -> Result<Self> {
        if levels.len() != bits.levels() {
            return Err(Error::invalid_arg(format!(
                "{} codebooks for {} configured levels",
                levels.len(),
                bits.levels()
            )));
        }
        for (i, cb) in levels.iter().enumerate() {
            if cb.level() != i + 1 {
                return Err(Error::invalid_arg(format!(
                    "codebook at position {i} claims level {}",
                    cb.level()
                )));
            }
            let cap = 1usize << bits.level_bits(i + 1);
            if cb.len() > cap {
                return Err(Error::invalid_arg(format!(
                    "level {} has {} centroids, over the {}-bit cap {cap}",
                    i + 1,
                    cb.len(),
                    bits.level_bits(i + 1)
                )));
            }
        }
        Ok(CodebookSet { levels, bits, meta })
    }

    pub fn levels(&self) -> usize {
        self.levels.len()
    }

    /// 1-based level accessor.
    pub fn level(&self, level: usize) -> &LevelCodebook {
        &self.levels[level - 1]
    }

    pub fn bit_config(&self) -> &BitWidthConfig {
        &self.bits
    }

    pub fn meta(&self) -> &CodebookMeta {
        &self.meta
    }

    /// SHA-256 over a canonical byte layout: level count, then per level the
    /// level number, bit width, centroid count, and centroid f64-LE bytes.
    /// Identifies a codebook set across process boundaries.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.levels.len() as u32).to_le_bytes());
        for cb in &self.levels {
            h.update((cb.level() as u32).to_le_bytes());
            h.update(self.bits.level_bits(cb.level()).to_le_bytes());
            h.update((cb.len() as u32).to_le_bytes());
            for &c in cb.centroids() {
                h.update(c.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Builds codebooks from the empirical angles of `reps`, one k-means per
/// level with k = 2^bits.  Per-level RNG streams derive from `seed`.
pub fn build_online(reps: &[PolarRep], bits: &BitWidthConfig, seed: u64) -> Result<CodebookSet> {
    if reps.is_empty() {
        return Err(Error::invalid_arg("no training vectors"));
    }
    if reps[0].levels() < bits.levels() {
        return Err(Error::invalid_arg(format!(
            "training reps carry {} levels, config wants {}",
            reps[0].levels(),
            bits.levels()
        )));
    }
    let pooled = collect_level_angles(reps);
    let mut levels = Vec::with_capacity(bits.levels());
    for l in 1..=bits.levels() {
        let k = 1usize << bits.level_bits(l);
        let sub = rng::derive_seed(seed, &format!("kmeans-l{l}"));
        levels.push(kmeans_1d(l, &pooled[l - 1], k, sub, 100)?);
    }
    let meta = CodebookMeta { seed, samples: reps.len(), levels: bits.levels() };
    CodebookSet::new(levels, bits.clone(), meta)
}

/// Builds codebooks with no training data: k-means over `samples_per_level`
/// draws from the analytic density of each level.
pub fn build_offline(bits: &BitWidthConfig, samples_per_level: usize, seed: u64) -> Result<CodebookSet> {
    let mut levels = Vec::with_capacity(bits.levels());
    for l in 1..=bits.levels() {
        let k = 1usize << bits.level_bits(l);
        let draw_seed = rng::derive_seed(seed, &format!("offline-draw-l{l}"));
        let fit_seed = rng::derive_seed(seed, &format!("offline-fit-l{l}"));
        let draws = sample_angles(l, samples_per_level, draw_seed);
        levels.push(kmeans_1d(l, &draws, k, fit_seed, 100)?);
    }
    let meta = CodebookMeta { seed, samples: samples_per_level, levels: bits.levels() };
    CodebookSet::new(levels, bits.clone(), meta)
}

#[derive(Serialize, Deserialize)]
struct LevelDto {
    level: usize,
    bits: u32,
    centroids: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SetDto {
    levels: Vec<LevelDto>,
    meta: CodebookMeta,
}

/// Serializes a codebook set as JSON.  serde_json prints each f64 with the
/// shortest digit string that parses back to the same bits, so a save/load
/// round trip preserves the set (and its hash) exactly.
pub fn codebooks_to_json(set: &CodebookSet) -> Result<String> {
    let dto = SetDto {
        levels: (1..=set.levels())
            .map(|l| LevelDto {
                level: l,
                bits: set.bit_config().level_bits(l),
                centroids: set.level(l).centroids().to_vec(),
            })
            .collect(),
        meta: *set.meta(),
    };
    Ok(serde_json::to_string_pretty(&dto)?)
}

/// Parses and fully validates a JSON codebook set.
pub fn codebooks_from_json(text: &str) -> Result<CodebookSet> {
    let dto: SetDto = serde_json::from_str(text)?;
    let mut bits = Vec::with_capacity(dto.levels.len());
    let mut levels = Vec::with_capacity(dto.levels.len());
    for (i, lvl) in dto.levels.iter().enumerate() {
        if lvl.level != i + 1 {
            return Err(Error::format(format!(
                "codebook levels out of order: position {i} holds level {}",
                lvl.level
            )));
        }
        bits.push(lvl.bits);
        levels.push(
            LevelCodebook::new(lvl.level, lvl.centroids.clone())
                .map_err(|e| Error::format(format!("level {}: {e}", lvl.level)))?,
        );
    }
    let bits = BitWidthConfig::new(bits).map_err(|e| Error::format(e.to_string()))?;
    CodebookSet::new(levels, bits, dto.meta).map_err(|e| Error::format(e.to_string()))
}

pub fn save_codebooks(set: &CodebookSet, path: impl AsRef<std::path::Path>) -> Result<()> {
    std::fs::write(path, codebooks_to_json(set)?)?;
    Ok(())
}

pub fn load_codebooks(path: impl AsRef<std::path::Path>) -> Result<CodebookSet> {
    codebooks_from_json(&std::fs::read_to_string(path)?)
}
