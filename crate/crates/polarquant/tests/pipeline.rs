//! End-to-end flows over the public API: generate, rotate, build books,
//! encode, persist, reload, decode, attend.

use polarquant::codebook::{build_offline, build_online, load_codebooks, save_codebooks};
use polarquant::polar::to_polar_batch;
use polarquant::quantizer::{
    decode, decode_batch, encode_batch, payload_bytes, read_quantized, write_quantized,
};
use polarquant::tensor::{load_tensor, save_tensor};
use polarquant::{
    AppendMode, BitWidthConfig, CodebookMode, DType, EmbeddingMatrix, KVCacheConfig,
    QuantizedKVCache, QuantizerConfig, RadiusPrecision, RotationSpec,
};

fn rel_row_error(a: &EmbeddingMatrix, b: &EmbeddingMatrix, i: usize) -> f64 {
    let (x, y) = (a.row(i), b.row(i));
    let num: f64 = x.iter().zip(y).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum();
    let den: f64 = x.iter().map(|&p| (p as f64).powi(2)).sum();
    (num / den).sqrt()
}

#[test]
fn offline_pipeline_reconstructs_within_budget() {
    let d = 64;
    let n = 200;
    let data = EmbeddingMatrix::generate_gaussian(n, d, 1001).unwrap();
    let config = QuantizerConfig {
        codebook_mode: CodebookMode::Offline,
        ..QuantizerConfig::standard(5)
    };
    let rotation = config.build_rotation(d).unwrap();
    let books = build_offline(&config.bits, 50_000, 99).unwrap();

    let entries = encode_batch(&data, &rotation, &books, &config).unwrap();
    let back = decode_batch(&entries, &rotation, &books).unwrap();

    let mean: f64 = (0..n).map(|i| rel_row_error(&data, &back, i)).sum::<f64>() / n as f64;
    // 3.875 bits per coordinate: lossy but far from garbage.
    assert!(mean < 0.5, "mean relative error {mean}");
    assert!(mean > 1e-4, "suspiciously exact for a lossy path: {mean}");
}

#[test]
fn online_books_beat_offline_books_only_modestly_on_gaussian_data() {
    // On Gaussian inputs the analytic offline books are already matched to
    // the true angle law, so prompt-fitted books should land close.
    let d = 32;
    let n = 400;
    let data = EmbeddingMatrix::generate_gaussian(n, d, 7).unwrap();
    let config = QuantizerConfig::standard(3);
    let rotation = config.build_rotation(d).unwrap();

    let rotated = polarquant::precondition::apply(&data, &rotation).unwrap();
    let reps = to_polar_batch(&rotated, config.bits.levels()).unwrap();
    let online = build_online(&reps, &config.bits, 21).unwrap();
    let offline = build_offline(&config.bits, 50_000, 21).unwrap();

    let mut errs = [0.0f64; 2];
    for (slot, books) in [&online, &offline].into_iter().enumerate() {
        let entries = encode_batch(&data, &rotation, books, &config).unwrap();
        let back = decode_batch(&entries, &rotation, books).unwrap();
        errs[slot] = (0..n).map(|i| rel_row_error(&data, &back, i)).sum::<f64>() / n as f64;
    }
    assert!(errs[0] < 0.5 && errs[1] < 0.5, "online {} offline {}", errs[0], errs[1]);
    assert!((errs[0] - errs[1]).abs() / errs[1] < 0.25, "online {} offline {}", errs[0], errs[1]);
}

#[test]
fn quantized_file_round_trips_bit_exactly() {
    let d = 16;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("q.pqe");
    let data = EmbeddingMatrix::generate_gaussian(30, d, 4).unwrap();
    let config = QuantizerConfig::standard(11);
    let rotation = config.build_rotation(d).unwrap();
    let books = build_offline(&config.bits, 20_000, 2).unwrap();
    let entries = encode_batch(&data, &rotation, &books, &config).unwrap();

    write_quantized(&path, &entries, &config, books.hash()).unwrap();
    let file = read_quantized(&path).unwrap();

    assert_eq!(file.dim, d);
    assert_eq!(file.config, config);
    assert_eq!(file.codebook_hash, books.hash());
    assert_eq!(file.entries.len(), entries.len());
    for (a, b) in file.entries.iter().zip(&entries) {
        assert_eq!(a.radii(), b.radii());
        assert_eq!(a.packed(), b.packed());
        // Stored radii are already rounded, so decode is byte-for-byte stable.
        assert_eq!(
            decode(a, &rotation, &books).unwrap(),
            decode(b, &rotation, &books).unwrap()
        );
    }
}

#[test]
fn file_length_is_header_plus_fixed_records() {
    let dir = tempfile::tempdir().unwrap();
    for (d, bits, precision) in [
        (16usize, vec![4u32, 2, 2, 2], RadiusPrecision::F16),
        (32, vec![3, 3, 3], RadiusPrecision::F32),
        (8, vec![5], RadiusPrecision::F16),
    ] {
        let config = QuantizerConfig {
            bits: BitWidthConfig::new(bits).unwrap(),
            rotation: RotationSpec::Haar { seed: 1 },
            radius_precision: precision,
            codebook_mode: CodebookMode::Offline,
        };
        let rotation = config.build_rotation(d).unwrap();
        let books = build_offline(&config.bits, 5_000, 8).unwrap();
        let data = EmbeddingMatrix::generate_gaussian(3, d, 6).unwrap();
        let entries = encode_batch(&data, &rotation, &books, &config).unwrap();

        let one = dir.path().join(format!("one-{d}.pqe"));
        let three = dir.path().join(format!("three-{d}.pqe"));
        write_quantized(&one, &entries[..1], &config, books.hash()).unwrap();
        write_quantized(&three, &entries, &config, books.hash()).unwrap();
        let l1 = std::fs::metadata(&one).unwrap().len();
        let l3 = std::fs::metadata(&three).unwrap().len();
        // Fixed-size records: adding two entries adds exactly two payloads.
        assert_eq!((l3 - l1) as usize, 2 * payload_bytes(d, &config).unwrap());
    }
}

#[test]
fn tensor_and_codebook_files_survive_disk() {
    let dir = tempfile::tempdir().unwrap();
    let data = EmbeddingMatrix::generate_gaussian(12, 8, 44).unwrap();

    let tpath = dir.path().join("m.pqtn");
    save_tensor(&data, &tpath, DType::F32).unwrap();
    let loaded = load_tensor(&tpath).unwrap();
    assert_eq!(loaded.data(), data.data());

    let books = build_offline(&BitWidthConfig::default(), 10_000, 5).unwrap();
    let cpath = dir.path().join("books.json");
    save_codebooks(&books, &cpath).unwrap();
    let reloaded = load_codebooks(&cpath).unwrap();
    assert_eq!(reloaded, books);
    assert_eq!(reloaded.hash(), books.hash());
}

#[test]
fn cache_save_load_preserves_attention_exactly() {
    let d = 32;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.pqkv");
    let keys = EmbeddingMatrix::generate_gaussian(50, d, 1).unwrap();
    let values = EmbeddingMatrix::generate_gaussian(50, d, 2).unwrap();
    let config = KVCacheConfig::standard(9);
    let mut cache = QuantizedKVCache::prefill(&keys, &values, &config, 9).unwrap();
    // One full-precision tail pair exercises the tail section of the file.
    cache.append(keys.row(0), values.row(0)).unwrap();
    cache.save(&path).unwrap();

    let loaded = QuantizedKVCache::load(
        &path,
        cache.key_codebooks().clone(),
        cache.value_codebooks().clone(),
        config.append_mode,
        config.offline_samples,
    )
    .unwrap();
    assert_eq!(loaded.len(), cache.len());
    assert_eq!(loaded.tail_len(), 1);

    let q = EmbeddingMatrix::generate_gaussian(4, d, 3).unwrap();
    for i in 0..q.rows() {
        let a = cache.attend(q.row(i)).unwrap();
        let b = loaded.attend(q.row(i)).unwrap();
        assert_eq!(a.output, b.output);
        assert_eq!(a.scores, b.scores);
    }
}

#[test]
fn cache_load_rejects_foreign_codebooks() {
    let d = 16;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.pqkv");
    let keys = EmbeddingMatrix::generate_gaussian(40, d, 21).unwrap();
    let values = EmbeddingMatrix::generate_gaussian(40, d, 22).unwrap();
    let config = KVCacheConfig::standard(4);
    let cache = QuantizedKVCache::prefill(&keys, &values, &config, 4).unwrap();
    cache.save(&path).unwrap();

    let other = build_offline(&config.quant.bits, 10_000, 777).unwrap();
    let err = QuantizedKVCache::load(
        &path,
        other.clone(),
        other,
        config.append_mode,
        config.offline_samples,
    );
    assert!(err.is_err(), "hash mismatch must refuse to decode");
}

#[test]
fn quantize_append_mode_keeps_no_tail() {
    let d = 16;
    let keys = EmbeddingMatrix::generate_gaussian(60, d, 31).unwrap();
    let values = EmbeddingMatrix::generate_gaussian(60, d, 32).unwrap();
    let config = KVCacheConfig {
        append_mode: AppendMode::Quantize,
        ..KVCacheConfig::standard(6)
    };
    let mut cache = QuantizedKVCache::prefill(&keys, &values, &config, 6).unwrap();
    cache.append(keys.row(5), values.row(5)).unwrap();
    assert_eq!(cache.tail_len(), 0);
    assert_eq!(cache.len(), 61);

    let report = cache.memory_report().unwrap();
    assert_eq!(report.tail_bits, 0);
    assert_eq!(report.quantized_tokens, 61);
    assert!(report.payload_ratio > 1.0);
}

#[test]
fn decode_simulation_tracks_error_with_growing_context() {
    let d = 32;
    let prompt_k = EmbeddingMatrix::generate_gaussian(120, d, 51).unwrap();
    let prompt_v = EmbeddingMatrix::generate_gaussian(120, d, 52).unwrap();
    let queries = EmbeddingMatrix::generate_gaussian(10, d, 53).unwrap();
    let stream_k = EmbeddingMatrix::generate_gaussian(10, d, 54).unwrap();
    let stream_v = EmbeddingMatrix::generate_gaussian(10, d, 55).unwrap();
    let config = KVCacheConfig::standard(2);

    let steps = polarquant::kvcache::simulate_decode(
        &prompt_k, &prompt_v, &queries, &stream_k, &stream_v, &config, 2,
    )
    .unwrap();
    assert_eq!(steps.len(), 10);
    for (i, s) in steps.iter().enumerate() {
        assert_eq!(s.step, i);
        assert_eq!(s.tokens, 121 + i);
        assert!(s.value_scale_relative.is_finite() && s.value_scale_relative >= 0.0);
        assert!(s.value_scale_relative < 0.2, "step {i}: {}", s.value_scale_relative);
    }
}

#[test]
fn mismatched_books_are_rejected_at_encode_time() {
    let d = 16;
    let config = QuantizerConfig::standard(1);
    let rotation = config.build_rotation(d).unwrap();
    let narrow = QuantizerConfig {
        bits: BitWidthConfig::new(vec![2, 2]).unwrap(),
        ..QuantizerConfig::standard(1)
    };
    let books = build_offline(&narrow.bits, 5_000, 1).unwrap();
    let data = EmbeddingMatrix::generate_gaussian(1, d, 1).unwrap();
    assert!(encode_batch(&data, &rotation, &books, &config).is_err());
}

#[test]
fn truncated_quantized_file_is_a_format_error() {
    let d = 16;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("q.pqe");
    let config = QuantizerConfig::standard(2);
    let rotation = config.build_rotation(d).unwrap();
    let books = build_offline(&config.bits, 5_000, 3).unwrap();
    let data = EmbeddingMatrix::generate_gaussian(4, d, 5).unwrap();
    let entries = encode_batch(&data, &rotation, &books, &config).unwrap();
    write_quantized(&path, &entries, &config, books.hash()).unwrap();

    let bytes = std::fs::read(&path).unwrap();
    let cut = dir.path().join("cut.pqe");
    std::fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
    assert!(read_quantized(&cut).is_err());
}
