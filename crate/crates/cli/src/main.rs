use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use serde_json::json;

use gradquant::codec::{bit_table, BitReport, IndexStream};
use gradquant::dither::DitherGenerator;
use gradquant::nested::{nested_decode_vector, nested_encode_gradient};
use gradquant::quant::{dithered_decode, dithered_encode, stochastic_decode, stochastic_encode};
use gradquant::simnet::config::ExperimentConfig;
use gradquant::simnet::experiment::{run_experiment, thread_pool, write_csv, VERSION};
use gradquant::verify::{run_verify, VerifyOptions, VerifyReport};
use gradquant::{DitherCoordinates, Error, Gradient, NestedConfig, Scalar, UniformQuantizerCfg};

#[derive(Parser, Debug)]
#[command(name = "gradquant", version, about = "Dithered gradient quantization simulator")]
struct Cli {
    /// TOML experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides `master_seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a synchronous distributed SGD experiment.
    Train(TrainArgs),
    /// Raw bits per worker per round for a fully connected net.
    Bits(BitsArgs),
    /// Run the statistical verification suite.
    Verify(VerifyArgs),
    /// Run the verification suite and print the JSON report.
    StatsTest(VerifyArgs),
    /// Encode/decode throughput and bit counts of each quantizer.
    QuantizeBench(BenchArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    problem: Option<String>,
    #[arg(long)]
    quantizer: Option<String>,
    #[arg(long)]
    delta: Option<String>,
    #[arg(long)]
    workers: Option<String>,
    #[arg(long)]
    rounds: Option<String>,
    /// Any config key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct BitsArgs {
    /// Layer widths, input first.
    #[arg(long, value_delimiter = ',', default_value = "784,300,100,10")]
    layers: Vec<usize>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Test hook: zero the dither index stride.
    #[arg(long, hide = true)]
    corrupt_dither: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, default_value_t = 1_000_000)]
    n: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 0.5)]
    delta: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn run(cli: Cli) -> gradquant::Result<ExitCode> {
    match &cli.command {
        Command::Train(args) => cmd_train(&cli, args),
        Command::Bits(args) => cmd_bits(&cli, args),
        Command::Verify(args) => cmd_verify(&cli, args, false),
        Command::StatsTest(args) => cmd_verify(&cli, args, true),
        Command::QuantizeBench(args) => cmd_bench(&cli, args),
    }
}

fn out_dir(cli: &Cli) -> gradquant::Result<Option<&Path>> {
    match &cli.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Ok(Some(dir))
        }
        None => Ok(None),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> gradquant::Result<()> {
    serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), value)?;
    Ok(())
}

fn resolve_config(cli: &Cli, args: &TrainArgs) -> gradquant::Result<ExperimentConfig> {
    let base = match &cli.config {
        Some(path) => ExperimentConfig::from_toml(&fs::read_to_string(path)?)?,
        None => ExperimentConfig::default(),
    };
    let mut overrides: Vec<(String, String)> = Vec::new();
    for (key, value) in [
        ("problem", &args.problem),
        ("quantizer", &args.quantizer),
        ("delta", &args.delta),
        ("workers", &args.workers),
        ("rounds", &args.rounds),
    ] {
        if let Some(v) = value {
            overrides.push((key.into(), v.clone()));
        }
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {kv:?}")))?;
        overrides.push((k.trim().into(), v.trim().into()));
    }
    if let Some(seed) = cli.seed {
        overrides.push(("master_seed".into(), seed.to_string()));
    }
    let cfg = base.with_overrides(overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> gradquant::Result<ExitCode> {
    let cfg = resolve_config(cli, args)?;
    let run = run_experiment(&cfg)?;
    let dir = out_dir(cli)?.unwrap_or(Path::new("."));
    write_csv(BufWriter::new(File::create(dir.join("train.csv"))?), &cfg, &run.reports)?;
    write_json(&dir.join("summary.json"), &run.summary)?;
    let s = &run.summary;
    println!(
        "{} rounds  final loss {:.6e}  raw bits {:.0}  coded bits {}  decode failures {}",
        s.rounds, s.final_loss, s.total_raw_bits, s.total_coded_bits, s.decode_failures
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_bits(cli: &Cli, args: &BitsArgs) -> gradquant::Result<ExitCode> {
    let rows = bit_table(&args.layers)?;
    let n: usize = args.layers.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    println!("layers {:?}  parameters {n}", args.layers);
    println!("{:<14} {:>7} {:>12}", "scheme", "levels", "Kbit");
    for r in &rows {
        let levels = if r.levels > 1 << 16 { "float".to_string() } else { r.levels.to_string() };
        println!("{:<14} {:>7} {:>12.1}", r.scheme, levels, r.kbits());
    }
    let saving = 1.0 - 3f64.log2() / 5f64.log2();
    println!("nested k=3 vs 5-level saving {:.1}%", 100.0 * saving);
    if let Some(dir) = out_dir(cli)? {
        write_json(
            &dir.join("bits.json"),
            &json!({ "version": VERSION, "layers": args.layers, "parameters": n, "rows": rows, "nested_saving": saving }),
        )?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(cli: &Cli, args: &VerifyArgs, json_stdout: bool) -> gradquant::Result<ExitCode> {
    let mut opts = VerifyOptions::default();
    if let Some(seed) = cli.seed {
        opts.seed = seed;
    }
    if args.corrupt_dither {
        opts.generator = DitherGenerator {
            index_stride: 0,
            ..DitherGenerator::STANDARD
        };
    }
    let report: VerifyReport = thread_pool()?.install(|| run_verify(&opts))?;
    if json_stdout {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        for c in &report.checks {
            println!(
                "{} {:<34} statistic {:>12.5e}  threshold {:>12.5e}",
                if c.pass { "PASS" } else { "FAIL" },
                c.name,
                c.statistic,
                c.threshold
            );
        }
    }
    let path = out_dir(cli)?.unwrap_or(Path::new(".")).join("verify.json");
    write_json(&path, &report)?;
    if report.pass {
        Ok(ExitCode::SUCCESS)
    } else {
        let failed: Vec<&str> = report.failed().map(|c| c.name.as_str()).collect();
        eprintln!("failed checks: {}", failed.join(", "));
        Ok(ExitCode::FAILURE)
    }
}

#[derive(Serialize)]
struct BenchRow {
    quantizer: &'static str,
    scalar: &'static str,
    n: usize,
    encode_ms: f64,
    decode_ms: f64,
    mse: f64,
    bits: BitReport,
}

fn time_ms<R>(reps: usize, mut f: impl FnMut() -> gradquant::Result<R>) -> gradquant::Result<(f64, R)> {
    let start = Instant::now();
    let mut last = f()?;
    for _ in 1..reps {
        last = f()?;
    }
    Ok((start.elapsed().as_secs_f64() * 1e3 / reps as f64, last))
}

fn mse<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.to_f64().unwrap() - y.to_f64().unwrap()).powi(2)).sum::<f64>() / a.len() as f64
}

fn bench_scalar<T: Scalar>(name: &'static str, g: &[f64], args: &BenchArgs, seed: u64) -> gradquant::Result<Vec<BenchRow>> {
    let n = g.len();
    let grad = Gradient::from_vec(g.iter().map(|&x| T::from_f64_lossy(x)).collect::<Vec<T>>())?;
    let coords = DitherCoordinates::new(seed, 0);
    let reps = args.reps.max(1);
    let mut rows = Vec::new();

    let cfg = UniformQuantizerCfg::from_delta(args.delta)?;
    let (enc, msg) = time_ms(reps, || dithered_encode(&grad, &cfg, coords))?;
    let (dec, rec) = time_ms(reps, || dithered_decode::<T>(&msg, &cfg, coords))?;
    let stream = IndexStream::symmetric(msg.indices.clone(), cfg.levels_m)?;
    rows.push(BenchRow {
        quantizer: "dqsg",
        scalar: name,
        n,
        encode_ms: enc,
        decode_ms: dec,
        mse: mse(grad.as_slice(), rec.as_slice()),
        bits: BitReport::for_stream(&stream, 1)?,
    });

    let (enc, msg) = time_ms(reps, || stochastic_encode(&grad, &cfg, coords))?;
    let (dec, rec) = time_ms(reps, || stochastic_decode::<T>(&msg, &cfg))?;
    let stream = IndexStream::symmetric(msg.indices.clone(), cfg.levels_m)?;
    rows.push(BenchRow {
        quantizer: "qsgd",
        scalar: name,
        n,
        encode_ms: enc,
        decode_ms: dec,
        mse: mse(grad.as_slice(), rec.as_slice()),
        bits: BitReport::for_stream(&stream, 1)?,
    });

    let ncfg = NestedConfig::new(1.0 / 3.0, 3, 1.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5349);
    let kappa = grad.inf_norm().to_f64().unwrap();
    let side: Vec<T> = g
        .iter()
        .map(|&x| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::from_f64_lossy(x + 0.05 * kappa * z)
        })
        .collect();
    let (enc, msg) = time_ms(reps, || nested_encode_gradient(&grad, &ncfg, coords))?;
    let (dec, rec) = time_ms(reps, || nested_decode_vector(&msg, &side, &ncfg, coords))?;
    let (lo, hi) = ncfg.rel_range();
    let stream = IndexStream::new(msg.rel_indices.clone(), lo, hi)?;
    rows.push(BenchRow {
        quantizer: "ndqsg_k3",
        scalar: name,
        n,
        encode_ms: enc,
        decode_ms: dec,
        mse: mse(grad.as_slice(), &rec),
        bits: BitReport::for_stream(&stream, 1)?,
    });
    Ok(rows)
}

fn cmd_bench(cli: &Cli, args: &BenchArgs) -> gradquant::Result<ExitCode> {
    if args.n == 0 {
        return Err(Error::Config("n must be positive".into()));
    }
    let seed = cli.seed.unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g: Vec<f64> = (0..args.n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut rows = bench_scalar::<f32>("f32", &g, args, seed)?;
    rows.extend(bench_scalar::<f64>("f64", &g, args, seed)?);
    println!(
        "{:<10} {:>4} {:>10} {:>10} {:>12} {:>12} {:>12}",
        "quantizer", "type", "enc ms", "dec ms", "mse", "raw bits", "coded bits"
    );
    for r in &rows {
        println!(
            "{:<10} {:>4} {:>10.2} {:>10.2} {:>12.4e} {:>12.0} {:>12}",
            r.quantizer, r.scalar, r.encode_ms, r.decode_ms, r.mse, r.bits.raw_bits, r.bits.coded_bits
        );
    }
    if let Some(dir) = out_dir(cli)? {
        write_json(&dir.join("bench.json"), &json!({ "version": VERSION, "delta": args.delta, "rows": rows }))?;
    }
    Ok(ExitCode::SUCCESS)
}
