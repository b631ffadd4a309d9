//! Bit packing of per-level codebook indices.
//!
//! Layout contract (the interchange format, stable across versions):
//! levels are concatenated in order l = 1..L into one continuous bit
//! stream; within a level, index j occupies bits [j*b, (j+1)*b) of the
//! stream, least-significant bit first; bits fill each byte from the
//! least-significant position upward; the final byte is zero-padded.
//!
//! Worked examples: b = 4 with indices (0xA, 0x3) packs to the single byte
//! 0x3A; b = 2 with indices (1, 2, 3, 0) packs to 0b00111001 = 0x39.

use crate::codebook::BitWidthConfig;
use crate::error::{Error, Result};

/// Total packed bits for one vector of dimension `dim`.
pub fn packed_len_bits(dim: usize, config: &BitWidthConfig) -> Result<u64> {
    config.angle_bits_per_vector(dim)
}

/// Packed buffer size in bytes: ceil(total bits / 8).
pub fn packed_len_bytes(dim: usize, config: &BitWidthConfig) -> Result<usize> {
    Ok(packed_len_bits(dim, config)?.div_ceil(8) as usize)
}

fn write_bits(buf: &mut [u8], mut bit: usize, value: u32, width: u32) {
    let mut v = value as u64;
    let mut left = width as usize;
    while left > 0 {
        let byte = bit / 8;
        let off = bit % 8;
        let take = (8 - off).min(left);
        buf[byte] |= ((v & ((1 << take) - 1)) as u8) << off;
        v >>= take;
        bit += take;
        left -= take;
    }
}

fn read_bits(buf: &[u8], mut bit: usize, width: u32) -> u32 {
    let mut v = 0u64;
    let mut got = 0usize;
    let mut left = width as usize;
    while left > 0 {
        let byte = bit / 8;
        let off = bit % 8;
        let take = (8 - off).min(left);
        let chunk = ((buf[byte] >> off) as u64) & ((1 << take) - 1);
        v |= chunk << got;
        got += take;
        bit += take;
        left -= take;
    }
    v as u32
}

/// Packs a uniform-width value stream: value j occupies bits
/// [j*width, (j+1)*width), LSB first, final byte zero-padded.  This is the
/// single-level layout; [`pack_indices`] chains one such stream per level
/// without realigning to byte boundaries in between.
pub fn pack_stream(values: &[u32], width: u32) -> Result<Vec<u8>> {
    if width == 0 || width > 32 {
        return Err(Error::invalid_arg(format!("width {width} out of 1..=32")));
    }
    let cap = 1u64 << width;
    for &v in values {
        if (v as u64) >= cap {
            return Err(Error::invalid_arg(format!("value {v} does not fit {width} bits")));
        }
    }
    let mut buf = vec![0u8; (values.len() * width as usize).div_ceil(8)];
    for (j, &v) in values.iter().enumerate() {
        write_bits(&mut buf, j * width as usize, v, width);
    }
    Ok(buf)
}

/// Inverse of [`pack_stream`] for a known value count.  The buffer must be
/// exactly ceil(count*width / 8) bytes with zero padding bits.
pub fn unpack_stream(buf: &[u8], count: usize, width: u32) -> Result<Vec<u32>> {
    if width == 0 || width > 32 {
        return Err(Error::invalid_arg(format!("width {width} out of 1..=32")));
    }
    let total_bits = count * width as usize;
    if buf.len() != total_bits.div_ceil(8) {
        return Err(Error::format(format!(
            "packed stream is {} bytes, expected {}",
            buf.len(),
            total_bits.div_ceil(8)
        )));
    }
    for pad in total_bits..buf.len() * 8 {
        if buf[pad / 8] >> (pad % 8) & 1 != 0 {
            return Err(Error::format("nonzero padding bits in packed stream"));
        }
    }
    Ok((0..count).map(|j| read_bits(buf, j * width as usize, width)).collect())
}

/// Packs per-level index vectors (`indices[l-1]` for level l) into the
/// documented bit stream.  Every index must fit its level's bit width and
/// level l must carry exactly dim / 2^l indices.
pub fn pack_indices(indices: &[Vec<u32>], dim: usize, config: &BitWidthConfig) -> Result<Vec<u8>> {
    if indices.len() != config.levels() {
        return Err(Error::invalid_arg(format!(
            "{} index levels for {} configured levels",
            indices.len(),
            config.levels()
        )));
    }
    let mut buf = vec![0u8; packed_len_bytes(dim, config)?];
    let mut bit = 0usize;
    for (i, level_indices) in indices.iter().enumerate() {
        let level = i + 1;
        let expect = dim >> level;
        if level_indices.len() != expect {
            return Err(Error::invalid_arg(format!(
                "level {level} has {} indices, expected {expect}",
                level_indices.len()
            )));
        }
        let b = config.level_bits(level);
        let cap = 1u32 << b;
        for &idx in level_indices {
            if idx >= cap {
                return Err(Error::invalid_arg(format!(
                    "index {idx} does not fit {b} bits at level {level}"
                )));
            }
            write_bits(&mut buf, bit, idx, b);
            bit += b as usize;
        }
    }
    Ok(buf)
}

/// Inverse of [`pack_indices`].  The buffer length must match the config
/// exactly and padding bits must be zero.
pub fn unpack_indices(buf: &[u8], dim: usize, config: &BitWidthConfig) -> Result<Vec<Vec<u32>>> {
    let expect = packed_len_bytes(dim, config)?;
    if buf.len() != expect {
        return Err(Error::format(format!(
            "packed buffer is {} bytes, expected {expect}",
            buf.len()
        )));
    }
    let total_bits = packed_len_bits(dim, config)? as usize;
    for pad in total_bits..buf.len() * 8 {
        if buf[pad / 8] >> (pad % 8) & 1 != 0 {
            return Err(Error::format("nonzero padding bits in packed buffer"));
        }
    }
    let mut out = Vec::with_capacity(config.levels());
    let mut bit = 0usize;
    for level in 1..=config.levels() {
        let b = config.level_bits(level);
        let count = dim >> level;
        let mut level_indices = Vec::with_capacity(count);
        for _ in 0..count {
            level_indices.push(read_bits(buf, bit, b));
            bit += b as usize;
        }
        out.push(level_indices);
    }
    Ok(out)
}
