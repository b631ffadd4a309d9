//! Quantized KV-cache store: prefill builds codebooks and encodes all rows,
//! generation-stage tokens append either quantized or into a full-precision
//! tail, and attention runs over the dequantized cache with an exact
//! reference path beside it for error measurement.
//!
//! ## Cache file (PQKV)
//!
//! All integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "PQKV"
//! 4       4     version = 1
//! 8       4     dim
//! 12      4     levels L
//! 16      4     quantized token count n
//! 20      4     fp tail count t
//! 24      4     radius precision in bits
//! 28      4     rotation kind, then 8-byte seed
//! 40      4     codebook mode
//! 44      4*L   per-level bit widths
//! ..      32    SHA-256 of the key codebook set
//! ..      32    SHA-256 of the value codebook set
//! ```
//!
//! followed by n key records, n value records (same per-record layout as the
//! quantized tensor file), then t tail pairs as raw f32 (k row, v row).
//! Codebooks travel separately and are re-bound at load time via the hashes.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::codebook::{build_offline, build_online, CodebookMode, CodebookSet};
use crate::error::{Error, Result};
use crate::polar::to_polar_batch;
use crate::precondition::{self, RotationMatrix};
use crate::quantizer::{
    self, bits_per_coordinate, encode, payload_bytes, Cursor, QuantizedEmbedding, QuantizerConfig,
};
use crate::rng::derive_seed;
use crate::tensor::EmbeddingMatrix;

const MAGIC: &[u8; 4] = b"PQKV";
const VERSION: u32 = 1;

/// Dequantized (keys, values) row matrices.
type DecodedRows = (Vec<Vec<f64>>, Vec<Vec<f64>>);

/// What [`QuantizedKVCache::append`] does with a new (k, v) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppendMode {
    /// Hold recent pairs at full precision (the default protocol).
    FullPrecisionTail,
    /// Quantize immediately with the prefill codebooks.
    Quantize,
}

/// Cache-level configuration on top of the quantizer settings.
#[derive(Debug, Clone, PartialEq)]
pub struct KVCacheConfig {
    pub quant: QuantizerConfig,
    /// Per-level draw count when codebooks are fit offline.
    pub offline_samples: usize,
    pub append_mode: AppendMode,
}

impl KVCacheConfig {
    /// Default 4-level schedule with a Haar rotation and a full-precision
    /// tail for generated tokens.
    pub fn standard(rotation_seed: u64) -> Self {
        KVCacheConfig {
            quant: QuantizerConfig::standard(rotation_seed),
            offline_samples: 100_000,
            append_mode: AppendMode::FullPrecisionTail,
        }
    }
}

/// Softmax attention output for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult {
    /// Weighted value sum, length d.
    pub output: Vec<f32>,
    /// Post-softmax weights, one per cached token.
    pub scores: Vec<f32>,
}

/// Append-only store of quantized keys and values sharing one rotation and
/// one pair of codebook sets.
pub struct QuantizedKVCache {
    d: usize,
    config: KVCacheConfig,
    seed: u64,
    rotation: RotationMatrix,
    key_codebooks: CodebookSet,
    value_codebooks: CodebookSet,
    key_entries: Vec<QuantizedEmbedding>,
    value_entries: Vec<QuantizedEmbedding>,
    fp_tail: Vec<(Vec<f32>, Vec<f32>)>,
}

fn build_books_for_side(
    rows: &EmbeddingMatrix,
    rotation: &RotationMatrix,
    config: &KVCacheConfig,
    side_seed: u64,
) -> Result<CodebookSet> {
    let rotated = precondition::apply(rows, rotation)?;
    let reps = to_polar_batch(&rotated, config.quant.bits.levels())?;
    build_online(&reps, &config.quant.bits, side_seed)
}

impl QuantizedKVCache {
    /// Builds codebooks from (or for) the prompt and encodes every row.
    ///
    /// Online mode trains separate key and value codebooks on the prompt's
    /// own angles; offline mode fits one analytic-sample set shared by both
    /// sides.
    pub fn prefill(
        keys: &EmbeddingMatrix,
        values: &EmbeddingMatrix,
        config: &KVCacheConfig,
        seed: u64,
    ) -> Result<Self> {
        if keys.rows() != values.rows() || keys.cols() != values.cols() {
            return Err(Error::invalid_arg(format!(
                "key shape {}x{} does not match value shape {}x{}",
                keys.rows(),
                keys.cols(),
                values.rows(),
                values.cols()
            )));
        }
        let d = keys.cols();
        let rotation = config.quant.build_rotation(d)?;
        let (key_codebooks, value_codebooks) = match config.quant.codebook_mode {
            CodebookMode::Online => (
                build_books_for_side(keys, &rotation, config, derive_seed(seed, "key-books"))?,
                build_books_for_side(values, &rotation, config, derive_seed(seed, "value-books"))?,
            ),
            CodebookMode::Offline => {
                let books = build_offline(
                    &config.quant.bits,
                    config.offline_samples,
                    derive_seed(seed, "offline-books"),
                )?;
                (books.clone(), books)
            }
        };
        let key_entries = quantizer::encode_batch(keys, &rotation, &key_codebooks, &config.quant)?;
        let value_entries =
            quantizer::encode_batch(values, &rotation, &value_codebooks, &config.quant)?;
        Ok(QuantizedKVCache {
            d,
            config: config.clone(),
            seed,
            rotation,
            key_codebooks,
            value_codebooks,
            key_entries,
            value_entries,
            fp_tail: Vec::new(),
        })
    }

    /// A cache with no tokens yet.  Requires offline codebooks: online mode
    /// has nothing to train on.
    pub fn empty(d: usize, config: &KVCacheConfig, seed: u64) -> Result<Self> {
        if config.quant.codebook_mode != CodebookMode::Offline {
            return Err(Error::invalid_arg(
                "an empty cache needs offline codebooks; online mode trains on prefill data",
            ));
        }
        let rotation = config.quant.build_rotation(d)?;
        config.quant.bits.angle_bits_per_vector(d)?;
        let books = build_offline(
            &config.quant.bits,
            config.offline_samples,
            derive_seed(seed, "offline-books"),
        )?;
        Ok(QuantizedKVCache {
            d,
            config: config.clone(),
            seed,
            rotation,
            key_codebooks: books.clone(),
            value_codebooks: books,
            key_entries: Vec::new(),
            value_entries: Vec::new(),
            fp_tail: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Total cached tokens, quantized plus tail.
    pub fn len(&self) -> usize {
        self.key_entries.len() + self.fp_tail.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn quantized_len(&self) -> usize {
        self.key_entries.len()
    }

    pub fn tail_len(&self) -> usize {
        self.fp_tail.len()
    }

    pub fn config(&self) -> &KVCacheConfig {
        &self.config
    }

    pub fn rotation(&self) -> &RotationMatrix {
        &self.rotation
    }

    pub fn key_codebooks(&self) -> &CodebookSet {
        &self.key_codebooks
    }

    pub fn value_codebooks(&self) -> &CodebookSet {
        &self.value_codebooks
    }

    /// Adds one generated (k, v) pair, quantized or full-precision per the
    /// configured append mode.
    pub fn append(&mut self, k: &[f32], v: &[f32]) -> Result<()> {
        if k.len() != self.d || v.len() != self.d {
            return Err(Error::invalid_arg(format!(
                "appended pair has dims {}/{}, cache holds {}",
                k.len(),
                v.len(),
                self.d
            )));
        }
        match self.config.append_mode {
            AppendMode::FullPrecisionTail => {
                self.fp_tail.push((k.to_vec(), v.to_vec()));
            }
            AppendMode::Quantize => {
                self.key_entries
                    .push(encode(k, &self.rotation, &self.key_codebooks, &self.config.quant)?);
                self.value_entries
                    .push(encode(v, &self.rotation, &self.value_codebooks, &self.config.quant)?);
            }
        }
        Ok(())
    }

    /// Dequantizes every cached row (tail included) into f64 matrices.
    fn decoded_kv(&self) -> Result<DecodedRows> {
        let mut keys: Vec<Vec<f64>> = self
            .key_entries
            .par_iter()
            .map(|qe| quantizer::decode_f64(qe, &self.rotation, &self.key_codebooks))
            .collect::<Result<_>>()?;
        let mut values: Vec<Vec<f64>> = self
            .value_entries
            .par_iter()
            .map(|qe| quantizer::decode_f64(qe, &self.rotation, &self.value_codebooks))
            .collect::<Result<_>>()?;
        for (k, v) in &self.fp_tail {
            keys.push(k.iter().map(|&x| x as f64).collect());
            values.push(v.iter().map(|&x| x as f64).collect());
        }
        Ok((keys, values))
    }

    /// Approximate attention over the dequantized cache.
    pub fn attend(&self, q: &[f32]) -> Result<AttentionResult> {
        if self.is_empty() {
            return Err(Error::InvalidState("attend on an empty cache".into()));
        }
        if q.len() != self.d {
            return Err(Error::invalid_arg(format!(
                "query dim {} does not match cache dim {}",
                q.len(),
                self.d
            )));
        }
        let (keys, values) = self.decoded_kv()?;
        Ok(attend_rows(&keys, &values, q))
    }

    /// [`attend`](Self::attend) for many queries, dequantizing the cache
    /// once.
    pub fn attend_batch(&self, queries: &EmbeddingMatrix) -> Result<Vec<AttentionResult>> {
        if self.is_empty() {
            return Err(Error::InvalidState("attend on an empty cache".into()));
        }
        if queries.cols() != self.d {
            return Err(Error::invalid_arg(format!(
                "query dim {} does not match cache dim {}",
                queries.cols(),
                self.d
            )));
        }
        let (keys, values) = self.decoded_kv()?;
        Ok((0..queries.rows())
            .into_par_iter()
            .map(|i| attend_rows(&keys, &values, queries.row(i)))
            .collect())
    }

    /// Serializes header, quantized entries, and fp tail; codebooks are
    /// referenced by hash only.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        out.extend_from_slice(&(self.config.quant.bits.levels() as u32).to_le_bytes());
        out.extend_from_slice(&(self.key_entries.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.fp_tail.len() as u32).to_le_bytes());
        quantizer::push_config_bytes(&mut out, &self.config.quant);
        out.extend_from_slice(&self.key_codebooks.hash());
        out.extend_from_slice(&self.value_codebooks.hash());
        debug_assert_eq!(out.len(), header_len(self.config.quant.bits.levels()));
        for qe in &self.key_entries {
            quantizer::push_entry_bytes(&mut out, qe, self.config.quant.radius_precision);
        }
        for qe in &self.value_entries {
            quantizer::push_entry_bytes(&mut out, qe, self.config.quant.radius_precision);
        }
        for (k, v) in &self.fp_tail {
            for &x in k {
                out.extend_from_slice(&x.to_le_bytes());
            }
            for &x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&out)?;
        Ok(())
    }

    /// Reads a cache file back, binding it to externally supplied codebooks
    /// whose hashes must match the header.
    pub fn load(
        path: impl AsRef<Path>,
        key_codebooks: CodebookSet,
        value_codebooks: CodebookSet,
        append_mode: AppendMode,
        offline_samples: usize,
    ) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::format("bad cache-file magic, expected \"PQKV\""));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported version {version}")));
        }
        let d = cur.u32()? as usize;
        let levels = cur.u32()? as usize;
        let count = cur.u32()? as usize;
        let tail_count = cur.u32()? as usize;
        let quant = quantizer::parse_config(&mut cur, levels)?;
        quant
            .bits
            .angle_bits_per_vector(d)
            .map_err(|e| Error::format(e.to_string()))?;
        let mut key_hash = [0u8; 32];
        key_hash.copy_from_slice(cur.take(32)?);
        let mut value_hash = [0u8; 32];
        value_hash.copy_from_slice(cur.take(32)?);
        if key_codebooks.hash() != key_hash || value_codebooks.hash() != value_hash {
            return Err(Error::invalid_arg(
                "supplied codebooks do not match the hashes recorded in the cache file",
            ));
        }
        if key_codebooks.bit_config() != &quant.bits {
            return Err(Error::invalid_arg("codebook bit widths differ from the file header"));
        }
        let mut key_entries = Vec::with_capacity(count);
        for _ in 0..count {
            key_entries.push(quantizer::parse_entry(
                &mut cur,
                d,
                levels,
                quant.radius_precision,
                &quant.bits,
            )?);
        }
        let mut value_entries = Vec::with_capacity(count);
        for _ in 0..count {
            value_entries.push(quantizer::parse_entry(
                &mut cur,
                d,
                levels,
                quant.radius_precision,
                &quant.bits,
            )?);
        }
        let mut fp_tail = Vec::with_capacity(tail_count);
        for _ in 0..tail_count {
            let mut k = Vec::with_capacity(d);
            for chunk in cur.take(d * 4)?.chunks_exact(4) {
                k.push(f32::from_le_bytes(chunk.try_into().unwrap()));
            }
            let mut v = Vec::with_capacity(d);
            for chunk in cur.take(d * 4)?.chunks_exact(4) {
                v.push(f32::from_le_bytes(chunk.try_into().unwrap()));
            }
            fp_tail.push((k, v));
        }
        if cur.pos != bytes.len() {
            return Err(Error::format(format!(
                "{} trailing bytes after the tail",
                bytes.len() - cur.pos
            )));
        }
        let rotation = quant.build_rotation(d)?;
        Ok(QuantizedKVCache {
            d,
            config: KVCacheConfig { quant, offline_samples, append_mode },
            seed: 0,
            rotation,
            key_codebooks,
            value_codebooks,
            key_entries,
            value_entries,
            fp_tail,
        })
    }

    /// Seed the cache was prefilled with (0 for loaded caches).
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Exact storage accounting in bits, plus compression ratios against an
    /// uncompressed b_FPN baseline.
    pub fn memory_report(&self) -> Result<MemoryReport> {
        let quant = &self.config.quant;
        let n = self.key_entries.len() as u64;
        let t = self.fp_tail.len() as u64;
        let d = self.d as u64;
        let fpn_bits = quant.radius_precision.bits() as u64;
        let per_entry_bits = payload_bytes(self.d, quant)? as u64 * 8;
        let payload_bits = 2 * n * per_entry_bits;
        let tail_bits = 2 * t * d * 32;
        // Centroids are the stored state (boundaries are derived); one set
        // counted when both sides share it.
        let set_bits = |s: &CodebookSet| -> u64 {
            (1..=s.levels()).map(|l| s.level(l).len() as u64 * 64).sum()
        };
        let codebook_bits = if self.key_codebooks.hash() == self.value_codebooks.hash() {
            set_bits(&self.key_codebooks)
        } else {
            set_bits(&self.key_codebooks) + set_bits(&self.value_codebooks)
        };
        let rotation_bits = match quant.rotation {
            crate::precondition::RotationSpec::Identity => 0,
            crate::precondition::RotationSpec::Haar { .. } => 64,
        };
        let baseline_bits = 2 * (n + t) * d * fpn_bits;
        let bpc = bits_per_coordinate(quant);
        let total_bits = payload_bits + tail_bits + codebook_bits + rotation_bits;
        Ok(MemoryReport {
            dim: self.d,
            quantized_tokens: self.key_entries.len(),
            tail_tokens: self.fp_tail.len(),
            payload_bits,
            tail_bits,
            codebook_bits,
            rotation_bits,
            baseline_bits,
            bits_per_coord: bpc.value(),
            bits_per_coord_numer: bpc.numer,
            bits_per_coord_denom: bpc.denom,
            payload_ratio: (d * fpn_bits) as f64 / per_entry_bits as f64,
            total_ratio: if total_bits == 0 { 0.0 } else { baseline_bits as f64 / total_bits as f64 },
        })
    }
}

/// Fixed byte length of the PQKV header for a given level count.
pub fn header_len(levels: usize) -> usize {
    4 + 4 + 4 + 4 + 4 + 4 + (4 + 4 + 8 + 4 + 4 * levels) + 32 + 32
}

/// Exact bit accounting for one cache.  `payload_bits + tail_bits` equals
/// the serialized file length times 8, minus the header.
#[derive(Debug, Clone, Serialize)]
pub struct MemoryReport {
    pub dim: usize,
    pub quantized_tokens: usize,
    pub tail_tokens: usize,
    /// Both sides, quantized entries only.
    pub payload_bits: u64,
    /// Both sides of the full-precision tail.
    pub tail_bits: u64,
    /// Stored centroids at f64; one set when key and value share codebooks.
    pub codebook_bits: u64,
    /// The rotation is reproducible from its seed.
    pub rotation_bits: u64,
    /// 2 sides x tokens x d x b_FPN.
    pub baseline_bits: u64,
    pub bits_per_coord: f64,
    pub bits_per_coord_numer: u64,
    pub bits_per_coord_denom: u64,
    /// Per-vector baseline over payload, codebooks excluded.
    pub payload_ratio: f64,
    /// Baseline over everything the cache actually stores.
    pub total_ratio: f64,
}

/// Numerically stable softmax: max-subtraction, then normalize.
pub(crate) fn softmax_f64(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn attend_rows(keys: &[Vec<f64>], values: &[Vec<f64>], q: &[f32]) -> AttentionResult {
    let d = q.len();
    let qf: Vec<f64> = q.iter().map(|&x| x as f64).collect();
    let scale = 1.0 / (d as f64).sqrt();
    let logits: Vec<f64> = keys
        .iter()
        .map(|k| k.iter().zip(&qf).map(|(&a, &b)| a * b).sum::<f64>() * scale)
        .collect();
    let scores = softmax_f64(&logits);
    let mut output = vec![0.0f64; d];
    for (s, v) in scores.iter().zip(values) {
        for (o, &x) in output.iter_mut().zip(v) {
            *o += s * x;
        }
    }
    AttentionResult {
        output: output.into_iter().map(|x| x as f32).collect(),
        scores: scores.into_iter().map(|x| x as f32).collect(),
    }
}

/// Reference attention on full-precision matrices, f64 accumulation.
pub fn attend_exact(
    keys: &EmbeddingMatrix,
    values: &EmbeddingMatrix,
    q: &[f32],
) -> Result<AttentionResult> {
    if keys.rows() != values.rows() || keys.cols() != values.cols() {
        return Err(Error::invalid_arg("key/value shape mismatch"));
    }
    if q.len() != keys.cols() {
        return Err(Error::invalid_arg(format!(
            "query dim {} does not match key dim {}",
            q.len(),
            keys.cols()
        )));
    }
    let key_rows: Vec<Vec<f64>> =
        (0..keys.rows()).map(|i| keys.row(i).iter().map(|&x| x as f64).collect()).collect();
    let value_rows: Vec<Vec<f64>> =
        (0..values.rows()).map(|i| values.row(i).iter().map(|&x| x as f64).collect()).collect();
    Ok(attend_rows(&key_rows, &value_rows, q))
}

/// Mean attention error of a cache against exact attention on the true
/// rows, two normalizations.
#[derive(Debug, Clone, Serialize)]
pub struct AttentionComparison {
    /// mean over queries of |approx - exact| / |exact|.
    pub output_relative: f64,
    /// mean over queries of |approx - exact| / rms row norm of the values,
    /// the scale attention outputs live on.
    pub value_scale_relative: f64,
}

fn value_rms(values: &EmbeddingMatrix) -> f64 {
    let total: f64 = (0..values.rows())
        .map(|i| values.row(i).iter().map(|&x| (x as f64).powi(2)).sum::<f64>())
        .sum();
    (total / values.rows() as f64).sqrt()
}

fn l2_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt()
}

fn l2(a: &[f32]) -> f64 {
    a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt()
}

/// Runs both attention paths over `queries` and averages the output errors.
pub fn compare_attention(
    cache: &QuantizedKVCache,
    true_keys: &EmbeddingMatrix,
    true_values: &EmbeddingMatrix,
    queries: &EmbeddingMatrix,
) -> Result<AttentionComparison> {
    if true_keys.rows() != cache.len() {
        return Err(Error::invalid_arg(format!(
            "reference holds {} rows, cache holds {}",
            true_keys.rows(),
            cache.len()
        )));
    }
    let approx = cache.attend_batch(queries)?;
    let rms = value_rms(true_values);
    let mut output_relative = 0.0;
    let mut value_scale_relative = 0.0;
    for (i, a) in approx.iter().enumerate() {
        let exact = attend_exact(true_keys, true_values, queries.row(i))?;
        let diff = l2_diff(&a.output, &exact.output);
        output_relative += diff / l2(&exact.output);
        value_scale_relative += diff / rms;
    }
    let n = queries.rows() as f64;
    Ok(AttentionComparison {
        output_relative: output_relative / n,
        value_scale_relative: value_scale_relative / n,
    })
}

/// One generation step of [`simulate_decode`].
#[derive(Debug, Clone, Serialize)]
pub struct DecodeStep {
    pub step: usize,
    /// Tokens visible to this step's attention.
    pub tokens: usize,
    pub output_relative: f64,
    pub value_scale_relative: f64,
}

/// Steps through generation: at step i the i-th streamed (k, v) pair is
/// appended, then the i-th query attends over everything so far; the
/// approximate output is scored against exact attention on the accumulated
/// true rows.
pub fn simulate_decode(
    prompt_keys: &EmbeddingMatrix,
    prompt_values: &EmbeddingMatrix,
    queries: &EmbeddingMatrix,
    stream_keys: &EmbeddingMatrix,
    stream_values: &EmbeddingMatrix,
    config: &KVCacheConfig,
    seed: u64,
) -> Result<Vec<DecodeStep>> {
    let steps = queries.rows();
    if stream_keys.rows() != steps || stream_values.rows() != steps {
        return Err(Error::invalid_arg(format!(
            "{} queries but {}/{} streamed pairs",
            steps,
            stream_keys.rows(),
            stream_values.rows()
        )));
    }
    let d = prompt_keys.cols();
    for (name, m) in [
        ("prompt values", prompt_values),
        ("queries", queries),
        ("streamed keys", stream_keys),
        ("streamed values", stream_values),
    ] {
        if m.cols() != d {
            return Err(Error::invalid_arg(format!("{name} have dim {}, prompt keys {d}", m.cols())));
        }
    }
    let mut cache = QuantizedKVCache::prefill(prompt_keys, prompt_values, config, seed)?;
    let mut true_keys: Vec<f32> = prompt_keys.data().to_vec();
    let mut true_values: Vec<f32> = prompt_values.data().to_vec();
    let mut trace = Vec::with_capacity(steps);
    for i in 0..steps {
        cache.append(stream_keys.row(i), stream_values.row(i))?;
        true_keys.extend_from_slice(stream_keys.row(i));
        true_values.extend_from_slice(stream_values.row(i));
        let rows = prompt_keys.rows() + i + 1;
        let tk = EmbeddingMatrix::new(rows, d, true_keys.clone())?;
        let tv = EmbeddingMatrix::new(rows, d, true_values.clone())?;
        let approx = cache.attend(queries.row(i))?;
        let exact = attend_exact(&tk, &tv, queries.row(i))?;
        let diff = l2_diff(&approx.output, &exact.output);
        trace.push(DecodeStep {
            step: i,
            tokens: rows,
            output_relative: diff / l2(&exact.output),
            value_scale_relative: diff / value_rms(&tv),
        });
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::BitWidthConfig;
    use crate::precondition::RotationSpec;
    use crate::quantizer::{decode, RadiusPrecision};

    fn gaussian_pair(n: usize, d: usize, seed: u64) -> (EmbeddingMatrix, EmbeddingMatrix) {
        (
            EmbeddingMatrix::generate_gaussian(n, d, seed).unwrap(),
            EmbeddingMatrix::generate_gaussian(n, d, seed.wrapping_add(7777)).unwrap(),
        )
    }

    fn small_config(seed: u64) -> KVCacheConfig {
        let mut c = KVCacheConfig::standard(seed);
        c.offline_samples = 20_000;
        c
    }

    #[test]
    fn prefill_counts_and_determinism() {
        let (k, v) = gaussian_pair(64, 32, 1);
        let config = small_config(5);
        let cache = QuantizedKVCache::prefill(&k, &v, &config, 11).unwrap();
        assert_eq!(cache.len(), 64);
        assert_eq!(cache.quantized_len(), 64);
        assert_eq!(cache.tail_len(), 0);
        assert_eq!(cache.dim(), 32);

        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.pqkv");
        let p2 = dir.path().join("b.pqkv");
        cache.save(&p1).unwrap();
        QuantizedKVCache::prefill(&k, &v, &config, 11).unwrap().save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn online_and_offline_books_differ_but_bind() {
        let (k, v) = gaussian_pair(48, 32, 3);
        let online = small_config(2);
        let mut offline = small_config(2);
        offline.quant.codebook_mode = CodebookMode::Offline;
        let c_on = QuantizedKVCache::prefill(&k, &v, &online, 9).unwrap();
        let c_off = QuantizedKVCache::prefill(&k, &v, &offline, 9).unwrap();
        // Online trains per side; offline shares one set.
        assert_ne!(c_on.key_codebooks().hash(), c_on.value_codebooks().hash());
        assert_eq!(c_off.key_codebooks().hash(), c_off.value_codebooks().hash());
        assert_ne!(c_on.key_codebooks().hash(), c_off.key_codebooks().hash());
    }

    #[test]
    fn tail_append_reconstructs_exactly_and_extends_scores() {
        let (k, v) = gaussian_pair(16, 16, 4);
        let config = small_config(3);
        let mut cache = QuantizedKVCache::prefill(&k, &v, &config, 2).unwrap();
        let before = cache.attend(&[0.25; 16]).unwrap();
        assert_eq!(before.scores.len(), 16);

        // A long key (norm^2 = 144) dominates any Gaussian row's projection
        // onto it, so a query along it concentrates the softmax on the tail
        // entry, which fp storage reproduces exactly.
        let nk = vec![3.0; 16];
        let nv: Vec<f32> = (0..16).map(|i| i as f32 / 8.0).collect();
        cache.append(&nk, &nv).unwrap();
        assert_eq!(cache.tail_len(), 1);
        let after = cache.attend(&[0.25; 16]).unwrap();
        assert_eq!(after.scores.len(), 17);

        let big_q: Vec<f32> = nk.iter().map(|&x| x * 10.0).collect();
        let res = cache.attend(&big_q).unwrap();
        let last = res.scores[16];
        assert!(last > 0.999, "tail score {last}");
        for (o, e) in res.output.iter().zip(&nv) {
            assert!((o - e).abs() < 1e-5);
        }
    }

    #[test]
    fn quantize_on_append_matches_prefill_error_envelope() {
        let (k, v) = gaussian_pair(128, 32, 6);
        let mut config = small_config(8);
        config.append_mode = AppendMode::Quantize;
        let mut cache = QuantizedKVCache::prefill(&k, &v, &config, 4).unwrap();

        let extra = EmbeddingMatrix::generate_gaussian(32, 32, 99).unwrap();
        let extra_v = EmbeddingMatrix::generate_gaussian(32, 32, 100).unwrap();
        for i in 0..extra.rows() {
            cache.append(extra.row(i), extra_v.row(i)).unwrap();
        }
        assert_eq!(cache.quantized_len(), 160);
        assert_eq!(cache.tail_len(), 0);

        // Decoded appended keys sit inside the same error envelope as
        // prefill rows: same books, same pipeline.
        let rel_err = |truth: &[f32], qe: &QuantizedEmbedding, books: &CodebookSet| -> f64 {
            let back = decode(qe, cache.rotation(), books).unwrap();
            let num: f64 =
                truth.iter().zip(&back).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
            let den: f64 = truth.iter().map(|&a| (a as f64).powi(2)).sum();
            (num / den).sqrt()
        };
        let prefill_mean: f64 = (0..128)
            .map(|i| rel_err(k.row(i), &cache.key_entries[i], cache.key_codebooks()))
            .sum::<f64>()
            / 128.0;
        let appended_mean: f64 = (0..32)
            .map(|i| rel_err(extra.row(i), &cache.key_entries[128 + i], cache.key_codebooks()))
            .sum::<f64>()
            / 32.0;
        assert!(
            appended_mean < prefill_mean * 1.5,
            "appended {appended_mean} vs prefill {prefill_mean}"
        );
    }

    #[test]
    fn singleton_attention_returns_the_decoded_value() {
        let (k, v) = gaussian_pair(1, 16, 7);
        // A one-token prompt cannot train online books; use offline.
        let mut config = small_config(1);
        config.quant.codebook_mode = CodebookMode::Offline;
        let cache = QuantizedKVCache::prefill(&k, &v, &config, 3).unwrap();
        let res = cache.attend(&[0.3; 16]).unwrap();
        assert_eq!(res.scores, vec![1.0]);
        let decoded =
            decode(&cache.value_entries[0], cache.rotation(), cache.value_codebooks()).unwrap();
        for (o, e) in res.output.iter().zip(&decoded) {
            assert!((o - e).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_query_averages_the_values() {
        let (k, v) = gaussian_pair(24, 16, 8);
        let config = small_config(2);
        let cache = QuantizedKVCache::prefill(&k, &v, &config, 6).unwrap();
        let res = cache.attend(&[0.0; 16]).unwrap();
        for &s in &res.scores {
            assert!((s - 1.0 / 24.0).abs() < 1e-7);
        }
        let (_, values) = cache.decoded_kv().unwrap();
        for (j, &o) in res.output.iter().enumerate() {
            let mean: f64 = values.iter().map(|r| r[j]).sum::<f64>() / 24.0;
            assert!((o as f64 - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn exact_attention_behaves_like_softmax() {
        // Identical keys: uniform scores regardless of the query.
        let keys = EmbeddingMatrix::new(3, 4, [1.0, 2.0, -1.0, 0.5].repeat(3)).unwrap();
        let values = EmbeddingMatrix::generate_gaussian(3, 4, 1).unwrap();
        let res = attend_exact(&keys, &values, &[0.4, -0.2, 1.0, 2.0]).unwrap();
        for &s in &res.scores {
            assert!((s - 1.0 / 3.0).abs() < 1e-7);
        }

        // Query aligned with one key at large scale concentrates there.
        let mut data = vec![0.0f32; 16];
        data[0] = 1.0;
        data[5] = 1.0;
        data[10] = 1.0;
        data[15] = 1.0;
        let keys = EmbeddingMatrix::new(4, 4, data).unwrap();
        let values = EmbeddingMatrix::generate_gaussian(4, 4, 2).unwrap();
        let res = attend_exact(&keys, &values, &[0.0, 0.0, 60.0, 0.0]).unwrap();
        assert!(res.scores[2] > 0.99, "scores {:?}", res.scores);

        // Scores always normalize.
        let keys = EmbeddingMatrix::generate_gaussian(50, 8, 3).unwrap();
        let values = EmbeddingMatrix::generate_gaussian(50, 8, 4).unwrap();
        let q = EmbeddingMatrix::generate_gaussian(1, 8, 5).unwrap();
        let res = attend_exact(&keys, &values, q.row(0)).unwrap();
        let sum: f64 = res.scores.iter().map(|&s| s as f64).sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(res.scores.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn softmax_is_shift_invariant_and_stable() {
        let logits = [0.3, -1.2, 2.5, 0.0, 1.1];
        let base = softmax_f64(&logits);
        for shift in [-50.0, 13.7, 1e6] {
            let shifted: Vec<f64> = logits.iter().map(|&l| l + shift).collect();
            for (a, b) in softmax_f64(&shifted).iter().zip(&base) {
                // The 1e6 shift costs ~2e-10 absolute in the logit
                // differences themselves; the softmax must not add to it.
                assert!((a - b).abs() < 1e-9, "shift {shift}");
            }
        }
        // Huge logits must not overflow to NaN; max-subtraction leaves the
        // winner with everything.
        let huge = softmax_f64(&[1e308, 5e307, -1e308]);
        assert!(huge.iter().all(|x| x.is_finite()));
        assert!((huge.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(huge[0] > 0.999 && huge[1] == 0.0 && huge[2] == 0.0);
        let ordered = softmax_f64(&[100.0, 99.0, 98.0]);
        assert!(ordered[0] > ordered[1] && ordered[1] > ordered[2]);
    }

    #[test]
    fn lossless_cache_matches_exact_attention() {
        // Decode once so every angle sits exactly on a centroid, then cache
        // the decoded rows with f32 radii and no rotation: the cache now
        // represents its contents losslessly and attention must agree with
        // the exact path.
        let mut config = small_config(0);
        config.quant.rotation = RotationSpec::Identity;
        config.quant.radius_precision = RadiusPrecision::F32;
        config.quant.codebook_mode = CodebookMode::Offline;
        let (k0, v0) = gaussian_pair(40, 32, 10);
        let staging = QuantizedKVCache::prefill(&k0, &v0, &config, 5).unwrap();
        let decode_all = |entries: &[QuantizedEmbedding], books: &CodebookSet| {
            let mut data = Vec::new();
            for qe in entries {
                data.extend(decode(qe, staging.rotation(), books).unwrap());
            }
            EmbeddingMatrix::new(entries.len(), 32, data).unwrap()
        };
        let k = decode_all(&staging.key_entries, staging.key_codebooks());
        let v = decode_all(&staging.value_entries, staging.value_codebooks());

        let cache = QuantizedKVCache::prefill(&k, &v, &config, 5).unwrap();
        let queries = EmbeddingMatrix::generate_gaussian(20, 32, 11).unwrap();
        let report = compare_attention(&cache, &k, &v, &queries).unwrap();
        assert!(report.output_relative <= 1e-4, "lossless err {}", report.output_relative);
    }

    #[test]
    fn attention_error_shrinks_as_bits_grow() {
        let (k, v) = gaussian_pair(192, 64, 12);
        let queries = EmbeddingMatrix::generate_gaussian(24, 64, 13).unwrap();
        let mut last = f64::INFINITY;
        for bits in [vec![2, 1, 1, 1], vec![4, 2, 2, 2], vec![6, 4, 4, 4]] {
            let mut config = small_config(21);
            config.quant.bits = BitWidthConfig::new(bits.clone()).unwrap();
            let cache = QuantizedKVCache::prefill(&k, &v, &config, 9).unwrap();
            let report = compare_attention(&cache, &k, &v, &queries).unwrap();
            assert!(
                report.value_scale_relative <= last * 1.02,
                "bits {bits:?}: {} after {last}",
                report.value_scale_relative
            );
            last = report.value_scale_relative;
        }
    }

    #[test]
    fn memory_report_matches_serialized_bytes_exactly() {
        let (k, v) = gaussian_pair(33, 128, 14);
        let config = small_config(17);
        let mut cache = QuantizedKVCache::prefill(&k, &v, &config, 8).unwrap();
        cache.append(&[0.1; 128], &[0.2; 128]).unwrap();
        cache.append(&[0.3; 128], &[0.4; 128]).unwrap();

        let report = cache.memory_report().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pqkv");
        cache.save(&path).unwrap();
        let file_bits = std::fs::metadata(&path).unwrap().len() * 8;
        let header_bits = header_len(4) as u64 * 8;
        assert_eq!(report.payload_bits + report.tail_bits, file_bits - header_bits);

        assert_eq!(report.quantized_tokens, 33);
        assert_eq!(report.tail_tokens, 2);
        assert_eq!(report.payload_bits, 2 * 33 * 62 * 8);
        assert_eq!(report.tail_bits, 2 * 2 * 128 * 32);
        assert_eq!(report.baseline_bits, 2 * 35 * 128 * 16);
        assert_eq!((report.bits_per_coord_numer, report.bits_per_coord_denom), (31, 8));
        assert!((report.payload_ratio - 16.0 / 3.875).abs() < 1e-12);
        assert!(report.total_ratio > 1.0);
    }

    #[test]
    fn empty_cache_reports_zero_payload() {
        let mut config = small_config(4);
        config.quant.codebook_mode = CodebookMode::Offline;
        let cache = QuantizedKVCache::empty(64, &config, 12).unwrap();
        assert!(cache.is_empty());
        let report = cache.memory_report().unwrap();
        assert_eq!(report.payload_bits, 0);
        assert_eq!(report.tail_bits, 0);
        assert_eq!(report.baseline_bits, 0);
        assert!(report.codebook_bits > 0);
        assert!(matches!(cache.attend(&[0.0; 64]), Err(Error::InvalidState(_))));

        // Online mode cannot produce an empty cache.
        assert!(QuantizedKVCache::empty(64, &small_config(4), 12).is_err());
    }

    #[test]
    fn cache_file_round_trips_and_checks_hashes() {
        let (k, v) = gaussian_pair(20, 32, 15);
        let mut config = small_config(19);
        config.quant.codebook_mode = CodebookMode::Offline;
        let mut cache = QuantizedKVCache::prefill(&k, &v, &config, 21).unwrap();
        cache.append(&[1.0; 32], &[2.0; 32]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pqkv");
        cache.save(&path).unwrap();

        let loaded = QuantizedKVCache::load(
            &path,
            cache.key_codebooks().clone(),
            cache.value_codebooks().clone(),
            config.append_mode,
            config.offline_samples,
        )
        .unwrap();
        assert_eq!(loaded.len(), 21);
        assert_eq!(loaded.tail_len(), 1);
        let q = EmbeddingMatrix::generate_gaussian(1, 32, 2).unwrap();
        assert_eq!(cache.attend(q.row(0)).unwrap(), loaded.attend(q.row(0)).unwrap());

        // Wrong codebooks are rejected by hash.
        let other = build_offline(&config.quant.bits, 5_000, 777).unwrap();
        assert!(QuantizedKVCache::load(
            &path,
            other.clone(),
            other,
            config.append_mode,
            config.offline_samples
        )
        .is_err());

        // Truncation is rejected.
        let good = std::fs::read(&path).unwrap();
        std::fs::write(&path, &good[..good.len() - 1]).unwrap();
        assert!(QuantizedKVCache::load(
            &path,
            cache.key_codebooks().clone(),
            cache.value_codebooks().clone(),
            config.append_mode,
            config.offline_samples
        )
        .is_err());
    }

    #[test]
    fn batch_attention_matches_individual_calls() {
        let (k, v) = gaussian_pair(30, 32, 16);
        let config = small_config(23);
        let cache = QuantizedKVCache::prefill(&k, &v, &config, 14).unwrap();
        let queries = EmbeddingMatrix::generate_gaussian(7, 32, 17).unwrap();
        let batch = cache.attend_batch(&queries).unwrap();
        assert_eq!(batch.len(), 7);
        for (i, res) in batch.iter().enumerate() {
            assert_eq!(*res, cache.attend(queries.row(i)).unwrap());
        }
    }

    #[test]
    fn shape_errors_are_invalid_argument() {
        let (k, v) = gaussian_pair(8, 16, 18);
        let bad_v = EmbeddingMatrix::generate_gaussian(9, 16, 18).unwrap();
        let config = small_config(25);
        assert!(QuantizedKVCache::prefill(&k, &bad_v, &config, 1).is_err());
        let mut cache = QuantizedKVCache::prefill(&k, &v, &config, 1).unwrap();
        assert!(cache.append(&[0.0; 8], &[0.0; 16]).is_err());
        assert!(cache.attend(&[0.0; 8]).is_err());
        assert!(attend_exact(&k, &bad_v, &[0.0; 16]).is_err());
    }

    #[test]
    fn decode_trace_has_one_step_per_generated_token() {
        let (pk, pv) = gaussian_pair(48, 32, 19);
        let queries = EmbeddingMatrix::generate_gaussian(6, 32, 20).unwrap();
        let (sk, sv) = gaussian_pair(6, 32, 21);
        let config = small_config(27);
        let trace = simulate_decode(&pk, &pv, &queries, &sk, &sv, &config, 31).unwrap();
        assert_eq!(trace.len(), 6);
        for (i, step) in trace.iter().enumerate() {
            assert_eq!(step.step, i);
            assert_eq!(step.tokens, 48 + i + 1);
            assert!(step.output_relative.is_finite() && step.output_relative >= 0.0);
        }
    }

    #[test]
    fn near_lossless_config_keeps_decode_error_tiny() {
        let mut config = small_config(29);
        config.quant.bits = BitWidthConfig::new(vec![10, 10, 10, 10]).unwrap();
        config.quant.radius_precision = RadiusPrecision::F32;
        // 1024-entry books need more samples than a small prompt supplies.
        config.quant.codebook_mode = CodebookMode::Offline;
        let (pk, pv) = gaussian_pair(96, 32, 22);
        let queries = EmbeddingMatrix::generate_gaussian(4, 32, 23).unwrap();
        let (sk, sv) = gaussian_pair(4, 32, 24);
        let trace = simulate_decode(&pk, &pv, &queries, &sk, &sv, &config, 33).unwrap();
        for step in &trace {
            assert!(step.value_scale_relative <= 1e-3, "step {}: {}", step.step, step.value_scale_relative);
        }
    }
}
