//! End-to-end encode/decode: rotate, polar-transform, quantize angles
//! against per-level codebooks, pack indices, and the exact inverse.
//!
//! Radii are kept at a configurable storage precision (f16 by default) and
//! rounded at encode time, so in-memory entries, serialized entries, and
//! decode inputs all see identical radius values.
//!
//! ## Quantized tensor file (PQE1)
//!
//! All integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "PQE1"
//! 4       4     version = 1
//! 8       4     dim
//! 12      4     levels L
//! 16      4     entry count n
//! 20      4     radius precision in bits (16 or 32)
//! 24      4     rotation kind (0 identity, 1 haar)
//! 28      8     rotation seed (0 for identity)
//! 36      4     codebook mode (0 online, 1 offline)
//! 40      4*L   per-level bit widths
//! ..      32    SHA-256 of the codebook set
//! ```
//!
//! followed by n records of (radii at storage precision, packed indices),
//! both of fixed per-entry size.

use std::io::{Read, Write};
use std::path::Path;

use half::f16;
use rayon::prelude::*;

use crate::bitpack::{pack_indices, packed_len_bytes, unpack_indices};
use crate::codebook::{BitWidthConfig, CodebookMode, CodebookSet};
use crate::error::{Error, Result};
use crate::polar::{from_polar, to_polar, PolarRep};
use crate::precondition::{RotationMatrix, RotationSpec};
use crate::tensor::EmbeddingMatrix;

const MAGIC: &[u8; 4] = b"PQE1";
const VERSION: u32 = 1;

/// Storage width of the retained radii.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RadiusPrecision {
    F16,
    F32,
}

impl RadiusPrecision {
    pub fn bits(self) -> u32 {
        match self {
            RadiusPrecision::F16 => 16,
            RadiusPrecision::F32 => 32,
        }
    }

    pub fn bytes(self) -> usize {
        self.bits() as usize / 8
    }

    fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            16 => Ok(RadiusPrecision::F16),
            32 => Ok(RadiusPrecision::F32),
            other => Err(Error::format(format!("unknown radius precision {other} bits"))),
        }
    }

    /// Rounds a radius to storage precision, widened back to f32.
    fn round(self, r: f64) -> Result<f32> {
        let v = match self {
            RadiusPrecision::F16 => f16::from_f64(r).to_f32(),
            RadiusPrecision::F32 => r as f32,
        };
        if !v.is_finite() {
            return Err(Error::invalid_arg(format!(
                "radius {r} overflows {self:?} storage"
            )));
        }
        Ok(v)
    }
}

impl std::str::FromStr for RadiusPrecision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f16" => Ok(RadiusPrecision::F16),
            "f32" => Ok(RadiusPrecision::F32),
            other => Err(Error::invalid_arg(format!(
                "unknown radius precision {other:?}, expected f16 or f32"
            ))),
        }
    }
}

/// Everything the encoder needs beyond the codebooks themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerConfig {
    pub bits: BitWidthConfig,
    pub rotation: RotationSpec,
    pub radius_precision: RadiusPrecision,
    pub codebook_mode: CodebookMode,
}

impl QuantizerConfig {
    /// Default schedule (4,2,2,2 bits, f16 radii, online books) with a
    /// Haar rotation from `rotation_seed`.
    pub fn standard(rotation_seed: u64) -> Self {
        QuantizerConfig {
            bits: BitWidthConfig::default(),
            rotation: RotationSpec::Haar { seed: rotation_seed },
            radius_precision: RadiusPrecision::F16,
            codebook_mode: CodebookMode::Online,
        }
    }

    /// Materializes the configured rotation at dimension `dim`.
    pub fn build_rotation(&self, dim: usize) -> Result<RotationMatrix> {
        RotationMatrix::from_spec(dim, self.rotation)
    }
}

/// One vector after quantization: stored radii plus packed angle indices.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedEmbedding {
    dim: usize,
    levels: usize,
    /// Already rounded to storage precision.
    radii: Vec<f32>,
    packed: Vec<u8>,
}

impl QuantizedEmbedding {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn radii(&self) -> &[f32] {
        &self.radii
    }

    pub fn packed(&self) -> &[u8] {
        &self.packed
    }
}

/// Nearest-centroid indices for every angle of `rep`, level by level.
pub fn quant_indices(rep: &PolarRep, books: &CodebookSet) -> Result<Vec<Vec<u32>>> {
    if rep.levels() != books.levels() {
        return Err(Error::invalid_arg(format!(
            "rep has {} levels, codebooks have {}",
            rep.levels(),
            books.levels()
        )));
    }
    Ok((1..=rep.levels())
        .map(|l| {
            let cb = books.level(l);
            rep.level_angles(l).iter().map(|&a| cb.assign(a) as u32).collect()
        })
        .collect())
}

fn check_books_match(config: &QuantizerConfig, books: &CodebookSet) -> Result<()> {
    if books.bit_config() != &config.bits {
        return Err(Error::invalid_arg(
            "codebook set bit widths differ from the quantizer config",
        ));
    }
    Ok(())
}

/// Encodes one row: rotate, polar-transform at the configured depth,
/// quantize angles, pack, round radii.
pub fn encode(
    x: &[f32],
    rotation: &RotationMatrix,
    books: &CodebookSet,
    config: &QuantizerConfig,
) -> Result<QuantizedEmbedding> {
    check_books_match(config, books)?;
    if rotation.spec() != config.rotation {
        return Err(Error::invalid_arg("rotation does not match the quantizer config"));
    }
    if x.len() != rotation.dim() {
        return Err(Error::invalid_arg(format!(
            "vector length {} does not match rotation dim {}",
            x.len(),
            rotation.dim()
        )));
    }
    let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let rotated = rotation.apply_vec(&xf)?;
    let rep = to_polar(&rotated, config.bits.levels())?;
    let indices = quant_indices(&rep, books)?;
    let packed = pack_indices(&indices, x.len(), &config.bits)?;
    let radii = rep
        .radii()
        .iter()
        .map(|&r| config.radius_precision.round(r))
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedEmbedding { dim: x.len(), levels: config.bits.levels(), radii, packed })
}

/// Decode in f64, before the final narrowing; shared by [`decode`] and the
/// attention path.
pub(crate) fn decode_f64(
    qe: &QuantizedEmbedding,
    rotation: &RotationMatrix,
    books: &CodebookSet,
) -> Result<Vec<f64>> {
    if qe.levels != books.levels() {
        return Err(Error::invalid_arg(format!(
            "entry has {} levels, codebooks have {}",
            qe.levels,
            books.levels()
        )));
    }
    if qe.dim != rotation.dim() {
        return Err(Error::invalid_arg(format!(
            "entry dim {} does not match rotation dim {}",
            qe.dim,
            rotation.dim()
        )));
    }
    if qe.radii.len() != qe.dim >> qe.levels {
        return Err(Error::format(format!(
            "entry carries {} radii, expected {}",
            qe.radii.len(),
            qe.dim >> qe.levels
        )));
    }
    let indices = unpack_indices(&qe.packed, qe.dim, books.bit_config())?;
    let mut angles = Vec::with_capacity(qe.levels);
    for (i, level_indices) in indices.iter().enumerate() {
        let cb = books.level(i + 1);
        let mut level_angles = Vec::with_capacity(level_indices.len());
        for &idx in level_indices {
            if idx as usize >= cb.len() {
                return Err(Error::format(format!(
                    "index {idx} out of range for the {}-entry level-{} codebook",
                    cb.len(),
                    i + 1
                )));
            }
            level_angles.push(cb.centroid(idx as usize));
        }
        angles.push(level_angles);
    }
    let radii: Vec<f64> = qe.radii.iter().map(|&r| r as f64).collect();
    let rep = PolarRep::new(qe.dim, radii, angles)?;
    rotation.apply_inverse_vec(&from_polar(&rep)?)
}

/// Inverse of [`encode`] up to quantization error.
pub fn decode(
    qe: &QuantizedEmbedding,
    rotation: &RotationMatrix,
    books: &CodebookSet,
) -> Result<Vec<f32>> {
    Ok(decode_f64(qe, rotation, books)?.into_iter().map(|v| v as f32).collect())
}

/// Row-parallel [`encode`] over a matrix.
pub fn encode_batch(
    matrix: &EmbeddingMatrix,
    rotation: &RotationMatrix,
    books: &CodebookSet,
    config: &QuantizerConfig,
) -> Result<Vec<QuantizedEmbedding>> {
    (0..matrix.rows())
        .into_par_iter()
        .map(|i| encode(matrix.row(i), rotation, books, config))
        .collect()
}

/// Row-parallel [`decode`] back into a matrix.
pub fn decode_batch(
    entries: &[QuantizedEmbedding],
    rotation: &RotationMatrix,
    books: &CodebookSet,
) -> Result<EmbeddingMatrix> {
    if entries.is_empty() {
        return Err(Error::invalid_arg("empty batch"));
    }
    let dim = entries[0].dim;
    let rows: Vec<Vec<f32>> = entries
        .par_iter()
        .map(|qe| decode(qe, rotation, books))
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(entries.len() * dim);
    for row in rows {
        if row.len() != dim {
            return Err(Error::invalid_arg("mixed dimensions in batch"));
        }
        data.extend(row);
    }
    EmbeddingMatrix::new(entries.len(), dim, data)
}

/// Exact storage cost per coordinate as a reduced fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BitsPerCoord {
    pub numer: u64,
    pub denom: u64,
}

impl BitsPerCoord {
    pub fn value(self) -> f64 {
        self.numer as f64 / self.denom as f64
    }
}

/// Stored bits per coordinate: radius_bits / 2^L + sum_l b_l / 2^l, which is
/// independent of the dimension.  Returned exactly as a reduced fraction;
/// the default config gives 31/8 = 3.875.
pub fn bits_per_coordinate(config: &QuantizerConfig) -> BitsPerCoord {
    let levels = config.bits.levels() as u32;
    let mut numer = config.radius_precision.bits() as u64;
    for l in 1..=levels {
        numer += (config.bits.level_bits(l as usize) as u64) << (levels - l);
    }
    let denom = 1u64 << levels;
    let g = gcd(numer, denom);
    BitsPerCoord { numer: numer / g, denom: denom / g }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Serialized payload bytes per vector: stored radii plus packed indices.
pub fn payload_bytes(dim: usize, config: &QuantizerConfig) -> Result<usize> {
    let radii = (dim >> config.bits.levels()) * config.radius_precision.bytes();
    Ok(radii + packed_len_bytes(dim, &config.bits)?)
}

/// Writes entries plus enough header state to decode them later (the
/// codebooks travel separately, pinned by their hash).
pub fn write_quantized(
    path: impl AsRef<Path>,
    entries: &[QuantizedEmbedding],
    config: &QuantizerConfig,
    codebook_hash: [u8; 32],
) -> Result<()> {
    if entries.is_empty() {
        return Err(Error::invalid_arg("nothing to write"));
    }
    let dim = entries[0].dim;
    let levels = config.bits.levels();
    let radii_len = dim >> levels;
    let packed_len = packed_len_bytes(dim, &config.bits)?;
    for qe in entries {
        if qe.dim != dim || qe.levels != levels || qe.radii.len() != radii_len || qe.packed.len() != packed_len {
            return Err(Error::invalid_arg("inconsistent entry shapes"));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(levels as u32).to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    push_config_bytes(&mut out, config);
    out.extend_from_slice(&codebook_hash);
    for qe in entries {
        push_entry_bytes(&mut out, qe, config.radius_precision);
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// A parsed PQE1 file.
pub struct QuantizedFile {
    pub entries: Vec<QuantizedEmbedding>,
    pub config: QuantizerConfig,
    pub codebook_hash: [u8; 32],
    pub dim: usize,
}

/// Reads and validates a PQE1 file.  The caller must still check
/// `codebook_hash` against the codebook set it intends to decode with.
pub fn read_quantized(path: impl AsRef<Path>) -> Result<QuantizedFile> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::format("bad quantized-file magic, expected \"PQE1\""));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported version {version}")));
    }
    let dim = cur.u32()? as usize;
    let levels = cur.u32()? as usize;
    let count = cur.u32()? as usize;
    let config = parse_config(&mut cur, levels)?;
    if config.bits.angle_bits_per_vector(dim).is_err() {
        return Err(Error::format(format!("dim {dim} does not admit {levels} levels")));
    }
    let mut codebook_hash = [0u8; 32];
    codebook_hash.copy_from_slice(cur.take(32)?);

    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        entries.push(parse_entry(&mut cur, dim, levels, config.radius_precision, &config.bits)?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(format!(
            "{} trailing bytes after the last record",
            bytes.len() - cur.pos
        )));
    }
    Ok(QuantizedFile { entries, config, codebook_hash, dim })
}

/// Appends one record (radii at storage width, then packed indices).
/// Shared between the tensor file and the KV-cache file so both formats
/// stay byte-compatible.
pub(crate) fn push_entry_bytes(out: &mut Vec<u8>, qe: &QuantizedEmbedding, precision: RadiusPrecision) {
    match precision {
        RadiusPrecision::F16 => {
            for &r in &qe.radii {
                out.extend_from_slice(&f16::from_f32(r).to_le_bytes());
            }
        }
        RadiusPrecision::F32 => {
            for &r in &qe.radii {
                out.extend_from_slice(&r.to_le_bytes());
            }
        }
    }
    out.extend_from_slice(&qe.packed);
}

/// Inverse of [`push_entry_bytes`] at a cursor position.
pub(crate) fn parse_entry(
    cur: &mut Cursor<'_>,
    dim: usize,
    levels: usize,
    precision: RadiusPrecision,
    bits: &BitWidthConfig,
) -> Result<QuantizedEmbedding> {
    let radii_len = dim >> levels;
    let mut radii = Vec::with_capacity(radii_len);
    match precision {
        RadiusPrecision::F16 => {
            for chunk in cur.take(radii_len * 2)?.chunks_exact(2) {
                radii.push(f16::from_le_bytes(chunk.try_into().unwrap()).to_f32());
            }
        }
        RadiusPrecision::F32 => {
            for chunk in cur.take(radii_len * 4)?.chunks_exact(4) {
                radii.push(f32::from_le_bytes(chunk.try_into().unwrap()));
            }
        }
    }
    if radii.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::format("non-finite or negative radius in file"));
    }
    let packed = cur.take(packed_len_bytes(dim, bits)?)?.to_vec();
    Ok(QuantizedEmbedding { dim, levels, radii, packed })
}

pub(crate) struct Cursor<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(format!(
                "file truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Writes the shared config block (precision, rotation, mode, bit widths)
/// used by both file formats.
pub(crate) fn push_config_bytes(out: &mut Vec<u8>, config: &QuantizerConfig) {
    out.extend_from_slice(&config.radius_precision.bits().to_le_bytes());
    let (kind, seed) = match config.rotation {
        RotationSpec::Identity => (0u32, 0u64),
        RotationSpec::Haar { seed } => (1, seed),
    };
    out.extend_from_slice(&kind.to_le_bytes());
    out.extend_from_slice(&seed.to_le_bytes());
    let mode = match config.codebook_mode {
        CodebookMode::Online => 0u32,
        CodebookMode::Offline => 1,
    };
    out.extend_from_slice(&mode.to_le_bytes());
    for l in 1..=config.bits.levels() {
        out.extend_from_slice(&config.bits.level_bits(l).to_le_bytes());
    }
}

/// Inverse of [`push_config_bytes`]; `levels` comes from the outer header.
pub(crate) fn parse_config(cur: &mut Cursor<'_>, levels: usize) -> Result<QuantizerConfig> {
    let precision = RadiusPrecision::from_bits(cur.u32()?)?;
    let kind = cur.u32()?;
    let seed = cur.u64()?;
    let rotation = match kind {
        0 => RotationSpec::Identity,
        1 => RotationSpec::Haar { seed },
        other => return Err(Error::format(format!("unknown rotation kind {other}"))),
    };
    let mode = match cur.u32()? {
        0 => CodebookMode::Online,
        1 => CodebookMode::Offline,
        other => return Err(Error::format(format!("unknown codebook mode {other}"))),
    };
    let mut bits = Vec::with_capacity(levels);
    for _ in 0..levels {
        bits.push(cur.u32()?);
    }
    let bits = BitWidthConfig::new(bits).map_err(|e| Error::format(e.to_string()))?;
    Ok(QuantizerConfig { bits, rotation, radius_precision: precision, codebook_mode: mode })
}
