//! Pipeline driver over the library crate: generate, build codebooks,
//! quantize, inspect, attend, validate, and benchmark from the shell.
//!
//! Every stochastic step derives from --seed; reports carry the seed and the
//! resolved configuration.  Exit codes: 0 success, 1 runtime failure with a
//! machine-readable JSON object on stderr, 2 usage errors (from clap).

use std::f64::consts::{FRAC_PI_2, TAU};
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde_json::json;

use polarquant::codebook::{build_offline, build_online, load_codebooks, save_codebooks};
use polarquant::distribution::{angle_cdf, angle_pdf, ks_statistic};
use polarquant::kvcache::{attend_exact, compare_attention};
use polarquant::polar::{collect_level_angles, max_levels, to_polar_batch};
use polarquant::precondition::{apply, RotationMatrix};
use polarquant::quantizer::{decode_batch, encode_batch, read_quantized, write_quantized};
use polarquant::rng::derive_seed;
use polarquant::tensor::{load_tensor, save_tensor};
use polarquant::validation::{
    check_codebook_size_lemma, check_separability, check_theorem1, check_variance_bound,
    generate_heavy_tailed,
};
use polarquant::{
    AppendMode, BitWidthConfig, CodebookMode, DType, EmbeddingMatrix, Error, KVCacheConfig,
    QuantizedKVCache, QuantizerConfig, RadiusPrecision, Result, RotationSpec,
};

#[derive(Parser)]
#[command(name = "polarquant", version, about = "Polar-coordinate vector quantization pipeline")]
struct Cli {
    /// Master seed; all randomness in every subcommand derives from it.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Worker thread cap (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output format for tabular reports.  Binary artifacts ignore it;
    /// validate and bench are JSON-only.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic embedding tensor file.
    Gen(GenArgs),
    /// Build a codebook set and save it as JSON.
    Codebook(CodebookArgs),
    /// Encode a tensor file into a quantized-record file.
    Quantize(QuantizeArgs),
    /// Decode a quantized-record file back into a tensor file.
    Dequantize(DequantizeArgs),
    /// Per-level angle histograms with analytic overlays, rotated vs raw.
    Stats(StatsArgs),
    /// Quantized-cache attention vs exact attention, per-query error trace.
    Attend(AttendArgs),
    /// Run one of the theory-validation suites.
    Validate(ValidateArgs),
    /// Wall-clock throughput of encode, decode, and attend.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Number of rows.
    #[arg(long)]
    n: usize,
    /// Embedding dimension.
    #[arg(long)]
    d: usize,
    #[arg(long, value_enum, default_value_t = DistArg::Gaussian)]
    dist: DistArg,
    #[arg(long, value_enum, default_value_t = DTypeArg::F32)]
    dtype: DTypeArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CodebookArgs {
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Training tensor; required in online mode, ignored offline.
    #[arg(long, value_name = "PATH")]
    r#in: Option<PathBuf>,
    /// Comma-separated per-level bit widths, level 1 first.
    #[arg(long, default_value = "4,2,2,2", value_parser = parse_bits)]
    bits: BitWidthConfig,
    /// Analytic draws per level for offline training.
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    /// Preconditioning seed; defaults to a value derived from --seed.
    #[arg(long)]
    rotation_seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long, value_name = "PATH")]
    r#in: PathBuf,
    #[arg(long)]
    codebooks: PathBuf,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F16)]
    radius_precision: PrecisionArg,
    /// Recorded provenance only; decoding never consults it.
    #[arg(long, value_enum, default_value_t = ModeArg::Offline)]
    codebook_mode: ModeArg,
    #[arg(long)]
    rotation_seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DequantizeArgs {
    #[arg(long, value_name = "PATH")]
    r#in: PathBuf,
    #[arg(long)]
    codebooks: PathBuf,
    #[arg(long, value_enum, default_value_t = DTypeArg::F32)]
    dtype: DTypeArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long, value_name = "PATH")]
    r#in: PathBuf,
    /// Transform depth; defaults to min(4, log2 d).
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long, default_value_t = 64)]
    bins: usize,
    #[arg(long)]
    rotation_seed: Option<u64>,
    /// Histogram destination; required for csv, optional for json (stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AttendArgs {
    #[arg(long)]
    keys: PathBuf,
    #[arg(long)]
    values: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value = "4,2,2,2", value_parser = parse_bits)]
    bits: BitWidthConfig,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F16)]
    radius_precision: PrecisionArg,
    #[arg(long, value_enum, default_value_t = ModeArg::Online)]
    codebook_mode: ModeArg,
    #[arg(long, default_value_t = 100_000)]
    offline_samples: usize,
    #[arg(long, value_enum, default_value_t = AppendArg::Tail)]
    append_mode: AppendArg,
    #[arg(long)]
    rotation_seed: Option<u64>,
    /// Error-trace destination; required for csv, optional for json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also persist the prefilled cache.
    #[arg(long)]
    save_cache: Option<PathBuf>,
    #[arg(long)]
    save_key_codebooks: Option<PathBuf>,
    #[arg(long)]
    save_value_codebooks: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long, value_enum)]
    which: WhichArg,
    /// Dimension (theorem1, separability).
    #[arg(long)]
    d: Option<usize>,
    /// Base codebook size at scale 1 (theorem1).
    #[arg(long, default_value_t = 8)]
    k0: usize,
    /// Monte-Carlo trials (theorem1).
    #[arg(long, default_value_t = 200)]
    trials: usize,
    /// Comma-separated levels (variance).
    #[arg(long, default_value = "2,3,4,5,6", value_parser = parse_levels)]
    levels: Levels,
    /// Sample count (variance, separability).
    #[arg(long)]
    samples: Option<usize>,
    /// Level under test (codebook-lemma).
    #[arg(long, default_value_t = 3)]
    level: usize,
    /// Comma-separated epsilon targets (codebook-lemma).
    #[arg(long, default_value = "0.1,0.03,0.01", value_parser = parse_eps)]
    eps: EpsList,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 4096)]
    n: usize,
    #[arg(long, default_value_t = 128)]
    d: usize,
    #[arg(long, default_value_t = 16)]
    queries: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum DistArg {
    Gaussian,
    HeavyTailed,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum DTypeArg {
    F32,
    F16,
}

impl From<DTypeArg> for DType {
    fn from(a: DTypeArg) -> DType {
        match a {
            DTypeArg::F32 => DType::F32,
            DTypeArg::F16 => DType::F16,
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Online,
    Offline,
}

impl From<ModeArg> for CodebookMode {
    fn from(a: ModeArg) -> CodebookMode {
        match a {
            ModeArg::Online => CodebookMode::Online,
            ModeArg::Offline => CodebookMode::Offline,
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum PrecisionArg {
    F16,
    F32,
}

impl From<PrecisionArg> for RadiusPrecision {
    fn from(a: PrecisionArg) -> RadiusPrecision {
        match a {
            PrecisionArg::F16 => RadiusPrecision::F16,
            PrecisionArg::F32 => RadiusPrecision::F32,
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum AppendArg {
    /// Keep appended pairs at full precision.
    Tail,
    /// Quantize appended pairs with the prefill codebooks.
    Quantize,
}

impl From<AppendArg> for AppendMode {
    fn from(a: AppendArg) -> AppendMode {
        match a {
            AppendArg::Tail => AppendMode::FullPrecisionTail,
            AppendArg::Quantize => AppendMode::Quantize,
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum WhichArg {
    #[value(name = "theorem1")]
    Theorem1,
    #[value(name = "variance")]
    Variance,
    #[value(name = "codebook-lemma")]
    CodebookLemma,
    #[value(name = "separability")]
    Separability,
}

#[derive(Clone)]
struct Levels(Vec<usize>);

#[derive(Clone)]
struct EpsList(Vec<f64>);

fn parse_bits(s: &str) -> std::result::Result<BitWidthConfig, String> {
    s.parse::<BitWidthConfig>().map_err(|e| e.to_string())
}

fn parse_levels(s: &str) -> std::result::Result<Levels, String> {
    s.split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|_| format!("bad level {t:?}")))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(Levels)
}

fn parse_eps(s: &str) -> std::result::Result<EpsList, String> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("bad epsilon {t:?}")))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(EpsList)
}

fn usage_error(msg: &str) -> ! {
    Cli::command().error(clap::error::ErrorKind::InvalidValue, msg).exit()
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::InvalidArgument(_) => "invalid-argument",
        Error::Format(_) => "format",
        Error::InvalidState(_) => "invalid-state",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if rayon::ThreadPoolBuilder::new().num_threads(t).build_global().is_err() {
            eprintln!("{}", json!({ "error": "thread pool already initialized", "kind": "invalid-state" }));
            return ExitCode::FAILURE;
        }
    }
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(&cli, a),
        Command::Codebook(a) => cmd_codebook(&cli, a),
        Command::Quantize(a) => cmd_quantize(&cli, a),
        Command::Dequantize(a) => cmd_dequantize(&cli, a),
        Command::Stats(a) => cmd_stats(&cli, a),
        Command::Attend(a) => cmd_attend(&cli, a),
        Command::Validate(a) => cmd_validate(&cli, a),
        Command::Bench(a) => cmd_bench(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.to_string(), "kind": error_kind(&e) }));
            ExitCode::FAILURE
        }
    }
}

/// Default preconditioning seed when --rotation-seed is absent.  Derived,
/// not equal to --seed, so data generation and rotation stay independent.
fn rotation_seed(cli: &Cli, explicit: Option<u64>) -> u64 {
    explicit.unwrap_or_else(|| derive_seed(cli.seed, "rotation"))
}

/// Writes the standard report envelope to `out` or stdout.
fn emit_json(out: Option<&PathBuf>, seed: u64, config: serde_json::Value, report: serde_json::Value) -> Result<()> {
    let doc = json!({
        "tool_version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "config": config,
        "report": report,
    });
    let text = serde_json::to_string_pretty(&doc)?;
    match out {
        Some(path) => std::fs::write(path, text + "\n")?,
        None => {
            // A consumer like `head` may close stdout early; that is not
            // a failure of the report.
            let mut stdout = std::io::stdout().lock();
            match stdout.write_all(text.as_bytes()).and_then(|()| stdout.write_all(b"\n")) {
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
                r => r?,
            }
        }
    }
    Ok(())
}

fn cmd_gen(cli: &Cli, a: &GenArgs) -> Result<()> {
    let data = match a.dist {
        DistArg::Gaussian => EmbeddingMatrix::generate_gaussian(a.n, a.d, cli.seed)?,
        DistArg::HeavyTailed => generate_heavy_tailed(a.n, a.d, cli.seed)?,
    };
    save_tensor(&data, &a.out, a.dtype.into())
}

fn cmd_codebook(cli: &Cli, a: &CodebookArgs) -> Result<()> {
    let book_seed = derive_seed(cli.seed, "codebook");
    let set = match a.mode {
        ModeArg::Offline => build_offline(&a.bits, a.samples, book_seed)?,
        ModeArg::Online => {
            let path = a.r#in.as_ref().ok_or_else(|| {
                Error::InvalidArgument("online mode needs --in with training vectors".into())
            })?;
            let data = load_tensor(path)?;
            let spec = RotationSpec::Haar { seed: rotation_seed(cli, a.rotation_seed) };
            let rot = RotationMatrix::from_spec(data.cols(), spec)?;
            let reps = to_polar_batch(&apply(&data, &rot)?, a.bits.levels())?;
            build_online(&reps, &a.bits, book_seed)?
        }
    };
    save_codebooks(&set, &a.out)
}

fn cmd_quantize(cli: &Cli, a: &QuantizeArgs) -> Result<()> {
    let data = load_tensor(&a.r#in)?;
    let books = load_codebooks(&a.codebooks)?;
    let config = QuantizerConfig {
        bits: books.bit_config().clone(),
        rotation: RotationSpec::Haar { seed: rotation_seed(cli, a.rotation_seed) },
        radius_precision: a.radius_precision.into(),
        codebook_mode: a.codebook_mode.into(),
    };
    let rotation = config.build_rotation(data.cols())?;
    let entries = encode_batch(&data, &rotation, &books, &config)?;
    write_quantized(&a.out, &entries, &config, books.hash())
}

fn cmd_dequantize(_cli: &Cli, a: &DequantizeArgs) -> Result<()> {
    let file = read_quantized(&a.r#in)?;
    let books = load_codebooks(&a.codebooks)?;
    if books.hash() != file.codebook_hash {
        return Err(Error::InvalidArgument(
            "codebook hash does not match the quantized file".into(),
        ));
    }
    let rotation = file.config.build_rotation(file.dim)?;
    let data = decode_batch(&file.entries, &rotation, &books)?;
    save_tensor(&data, &a.out, a.dtype.into())
}

struct HistRow {
    variant: &'static str,
    level: usize,
    bin_lo: f64,
    bin_mid: f64,
    bin_hi: f64,
    count: usize,
    density: f64,
    analytic_pdf: f64,
}

fn histogram(variant: &'static str, level: usize, angles: &[f64], bins: usize) -> Vec<HistRow> {
    let hi = if level == 1 { TAU } else { FRAC_PI_2 };
    let w = hi / bins as f64;
    let mut counts = vec![0usize; bins];
    for &a in angles {
        counts[((a / w) as usize).min(bins - 1)] += 1;
    }
    let n = angles.len() as f64;
    (0..bins)
        .map(|b| {
            let lo = b as f64 * w;
            let mid = lo + 0.5 * w;
            HistRow {
                variant,
                level,
                bin_lo: lo,
                bin_mid: mid,
                bin_hi: lo + w,
                count: counts[b],
                density: counts[b] as f64 / (n * w),
                analytic_pdf: angle_pdf(level, mid),
            }
        })
        .collect()
}

fn side_summary(name: &str, data: &EmbeddingMatrix, reps_angles: &[Vec<f64>]) -> serde_json::Value {
    let mut ks = Vec::new();
    for (i, pooled) in reps_angles.iter().enumerate() {
        let level = i + 1;
        let mut sorted = pooled.clone();
        let stat = ks_statistic(&mut sorted, |t| angle_cdf(level, t));
        ks.push(json!({ "level": level, "ks": stat }));
    }
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in data.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    json!({ "variant": name, "coord_min": lo, "coord_max": hi, "ks": ks })
}

fn cmd_stats(cli: &Cli, a: &StatsArgs) -> Result<()> {
    let data = load_tensor(&a.r#in)?;
    let levels = a.levels.unwrap_or_else(|| max_levels(data.cols()).min(4));
    if a.bins < 4 {
        return Err(Error::InvalidArgument("need at least 4 bins".into()));
    }
    let spec = RotationSpec::Haar { seed: rotation_seed(cli, a.rotation_seed) };
    let rot = RotationMatrix::from_spec(data.cols(), spec)?;
    let rotated = apply(&data, &rot)?;

    let raw_angles = collect_level_angles(&to_polar_batch(&data, levels)?);
    let rot_angles = collect_level_angles(&to_polar_batch(&rotated, levels)?);

    let mut rows = Vec::new();
    for (i, pooled) in raw_angles.iter().enumerate() {
        rows.extend(histogram("raw", i + 1, pooled, a.bins));
    }
    for (i, pooled) in rot_angles.iter().enumerate() {
        rows.extend(histogram("rotated", i + 1, pooled, a.bins));
    }
    let summary = json!({
        "raw": side_summary("raw", &data, &raw_angles),
        "rotated": side_summary("rotated", &rotated, &rot_angles),
    });
    let config = json!({
        "in": a.r#in, "levels": levels, "bins": a.bins,
        "rotation_seed": rotation_seed(cli, a.rotation_seed),
    });

    match cli.format {
        Format::Csv => {
            let path = a
                .out
                .as_ref()
                .unwrap_or_else(|| usage_error("--format csv needs --out for the histogram table"));
            let mut text = String::from(
                "# polarquant-stats-v1\nvariant,level,bin_lo,bin_mid,bin_hi,count,density,analytic_pdf\n",
            );
            for r in &rows {
                text += &format!(
                    "{},{},{},{},{},{},{},{}\n",
                    r.variant, r.level, r.bin_lo, r.bin_mid, r.bin_hi, r.count, r.density, r.analytic_pdf
                );
            }
            std::fs::write(path, text)?;
            // The flattening verdict still goes to stdout for scripting.
            emit_json(None, cli.seed, config, summary)
        }
        Format::Json => {
            let hist: Vec<serde_json::Value> = rows
                .iter()
                .map(|r| {
                    json!({
                        "variant": r.variant, "level": r.level,
                        "bin_lo": r.bin_lo, "bin_mid": r.bin_mid, "bin_hi": r.bin_hi,
                        "count": r.count, "density": r.density, "analytic_pdf": r.analytic_pdf,
                    })
                })
                .collect();
            emit_json(
                a.out.as_ref(),
                cli.seed,
                config,
                json!({ "summary": summary, "histograms": hist }),
            )
        }
    }
}

fn cmd_attend(cli: &Cli, a: &AttendArgs) -> Result<()> {
    let keys = load_tensor(&a.keys)?;
    let values = load_tensor(&a.values)?;
    let queries = load_tensor(&a.queries)?;
    let config = KVCacheConfig {
        quant: QuantizerConfig {
            bits: a.bits.clone(),
            rotation: RotationSpec::Haar { seed: rotation_seed(cli, a.rotation_seed) },
            radius_precision: a.radius_precision.into(),
            codebook_mode: a.codebook_mode.into(),
        },
        offline_samples: a.offline_samples,
        append_mode: a.append_mode.into(),
    };
    let cache = QuantizedKVCache::prefill(&keys, &values, &config, cli.seed)?;

    let rms = {
        let total: f64 = values.data().iter().map(|&v| (v as f64).powi(2)).sum();
        (total / values.rows() as f64).sqrt()
    };
    let mut traces = Vec::new();
    for i in 0..queries.rows() {
        let approx = cache.attend(queries.row(i))?;
        let exact = attend_exact(&keys, &values, queries.row(i))?;
        let diff: f64 = approx
            .output
            .iter()
            .zip(&exact.output)
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = exact.output.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let score_sum: f64 = approx.scores.iter().map(|&s| s as f64).sum();
        traces.push((i, diff / norm, diff / rms, score_sum));
    }

    let aggregate = compare_attention(&cache, &keys, &values, &queries)?;
    let memory = cache.memory_report()?;
    if let Some(path) = &a.save_cache {
        cache.save(path)?;
    }
    if let Some(path) = &a.save_key_codebooks {
        save_codebooks(cache.key_codebooks(), path)?;
    }
    if let Some(path) = &a.save_value_codebooks {
        save_codebooks(cache.value_codebooks(), path)?;
    }

    let config_json = json!({
        "bits": a.bits.bits(), "radius_precision": format!("{:?}", config.quant.radius_precision),
        "codebook_mode": format!("{:?}", config.quant.codebook_mode),
        "rotation_seed": rotation_seed(cli, a.rotation_seed),
        "tokens": keys.rows(), "dim": keys.cols(), "queries": queries.rows(),
    });
    let summary = json!({
        "output_relative": aggregate.output_relative,
        "value_scale_relative": aggregate.value_scale_relative,
        "memory": memory,
    });

    match cli.format {
        Format::Csv => {
            let path = a
                .out
                .as_ref()
                .unwrap_or_else(|| usage_error("--format csv needs --out for the error trace"));
            let mut text =
                String::from("# polarquant-attend-v1\nquery,output_relative,value_scale_relative,score_sum\n");
            for (i, orel, vrel, ssum) in &traces {
                text += &format!("{i},{orel},{vrel},{ssum}\n");
            }
            std::fs::write(path, text)?;
            emit_json(None, cli.seed, config_json, summary)
        }
        Format::Json => {
            let rows: Vec<serde_json::Value> = traces
                .iter()
                .map(|(i, orel, vrel, ssum)| {
                    json!({
                        "query": i, "output_relative": orel,
                        "value_scale_relative": vrel, "score_sum": ssum,
                    })
                })
                .collect();
            emit_json(
                a.out.as_ref(),
                cli.seed,
                config_json,
                json!({ "summary": summary, "trace": rows }),
            )
        }
    }
}

fn cmd_validate(cli: &Cli, a: &ValidateArgs) -> Result<()> {
    if cli.format == Format::Csv {
        usage_error("validate emits nested reports; use --format json");
    }
    let (config, report) = match a.which {
        WhichArg::Theorem1 => {
            let d = a.d.unwrap_or(64);
            let reports = check_theorem1(d, a.k0, a.trials, cli.seed)?;
            let factors = polarquant::validation::doubling_factors(&reports);
            (
                json!({ "which": "theorem1", "d": d, "k0": a.k0, "trials": a.trials }),
                json!({ "scales": reports, "doubling_factors": factors }),
            )
        }
        WhichArg::Variance => {
            let samples = a.samples.unwrap_or(200_000);
            let report = check_variance_bound(&a.levels.0, samples, cli.seed)?;
            (
                json!({ "which": "variance", "levels": a.levels.0, "samples": samples }),
                serde_json::to_value(&report)?,
            )
        }
        WhichArg::CodebookLemma => {
            let report = check_codebook_size_lemma(a.level, &a.eps.0, cli.seed)?;
            (
                json!({ "which": "codebook-lemma", "level": a.level, "eps": a.eps.0 }),
                serde_json::to_value(&report)?,
            )
        }
        WhichArg::Separability => {
            let d = a.d.unwrap_or(8);
            let samples = a.samples.unwrap_or(100_000);
            let report = check_separability(d, samples, cli.seed)?;
            (
                json!({ "which": "separability", "d": d, "samples": samples }),
                serde_json::to_value(&report)?,
            )
        }
    };
    emit_json(a.out.as_ref(), cli.seed, config, report)
}

fn cmd_bench(cli: &Cli, a: &BenchArgs) -> Result<()> {
    if cli.format == Format::Csv {
        usage_error("bench emits a nested report; use --format json");
    }
    let data = EmbeddingMatrix::generate_gaussian(a.n, a.d, cli.seed)?;
    let queries = EmbeddingMatrix::generate_gaussian(a.queries, a.d, derive_seed(cli.seed, "q"))?;
    let config = QuantizerConfig {
        codebook_mode: CodebookMode::Offline,
        ..QuantizerConfig::standard(rotation_seed(cli, None))
    };
    let rotation = config.build_rotation(a.d)?;
    let books = build_offline(&config.bits, 50_000, derive_seed(cli.seed, "codebook"))?;

    let t0 = Instant::now();
    let entries = encode_batch(&data, &rotation, &books, &config)?;
    let encode_s = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let decoded = decode_batch(&entries, &rotation, &books)?;
    let decode_s = t1.elapsed().as_secs_f64();
    // Keep the decode from being optimized out.
    let checksum: f64 = decoded.row(0).iter().map(|&v| v as f64).sum();

    let kv_config = KVCacheConfig {
        quant: config.clone(),
        offline_samples: 50_000,
        append_mode: AppendMode::FullPrecisionTail,
    };
    let cache = QuantizedKVCache::prefill(&data, &data, &kv_config, cli.seed)?;
    let t2 = Instant::now();
    let results = cache.attend_batch(&queries)?;
    let attend_s = t2.elapsed().as_secs_f64();
    std::io::sink().write_all(&results[0].output[0].to_le_bytes())?;

    emit_json(
        a.out.as_ref(),
        cli.seed,
        json!({ "n": a.n, "d": a.d, "queries": a.queries }),
        json!({
            "encode_vectors_per_sec": a.n as f64 / encode_s,
            "decode_vectors_per_sec": a.n as f64 / decode_s,
            "attend_queries_per_sec": a.queries as f64 / attend_s,
            "encode_seconds": encode_s,
            "decode_seconds": decode_s,
            "attend_seconds": attend_s,
            "decode_checksum": checksum,
        }),
    )
}
