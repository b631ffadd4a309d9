//! Shared fixtures for the criterion benches: deterministic inputs sized
//! like the d=128 configuration the docs quote throughput for.

use polarquant::codebook::build_offline;
use polarquant::precondition::RotationMatrix;
use polarquant::{
    CodebookMode, CodebookSet, EmbeddingMatrix, KVCacheConfig, QuantizedKVCache, QuantizerConfig,
};

pub const DIM: usize = 128;
pub const SEED: u64 = 4242;

pub fn config() -> QuantizerConfig {
    QuantizerConfig {
        codebook_mode: CodebookMode::Offline,
        ..QuantizerConfig::standard(SEED)
    }
}

pub fn rotation() -> RotationMatrix {
    config().build_rotation(DIM).unwrap()
}

pub fn books() -> CodebookSet {
    build_offline(&config().bits, 50_000, SEED).unwrap()
}

pub fn matrix(rows: usize, seed_offset: u64) -> EmbeddingMatrix {
    EmbeddingMatrix::generate_gaussian(rows, DIM, SEED + seed_offset).unwrap()
}

pub fn prefilled_cache(tokens: usize) -> QuantizedKVCache {
    let keys = matrix(tokens, 1);
    let values = matrix(tokens, 2);
    let kv = KVCacheConfig {
        quant: config(),
        offline_samples: 50_000,
        append_mode: polarquant::AppendMode::FullPrecisionTail,
    };
    QuantizedKVCache::prefill(&keys, &values, &kv, SEED).unwrap()
}
