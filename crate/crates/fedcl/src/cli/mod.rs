//! Command-line surface: `train`, `gradcheck`, `channeltest`, and `sweep`.

pub mod config;
mod gradcheck;

pub use gradcheck::{gradcheck_suite, CheckLine, GRADCHECK_TOLERANCE};

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rand_distr::Distribution;

use crate::channel::{reshape_to_symbols, transmit, ChannelConfig};
use crate::error::{Error, Result};
use crate::metrics::{write_features_csv, write_metrics_csv};
use crate::protocol::{run_training, TrainingResult};
use crate::rng;
use config::ExperimentConfig;

/// Environment variable capping worker parallelism everywhere.
pub const THREADS_ENV: &str = "FEDCL_THREADS";

#[derive(Parser)]
#[command(
    name = "fedcl",
    version,
    about = "Desk-scale simulator of federated split training with contrastive \
             centroid regularization over a noisy wireless link"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training experiment and write metrics/features/config.
    Train(TrainArgs),
    /// Verify every analytic gradient against finite differences.
    Gradcheck,
    /// Measure empirical channel SNR against the configured value.
    Channeltest(ChanneltestArgs),
    /// Run a grid of training cells over one config key.
    Sweep(SweepArgs),
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// Config file (key=value lines); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for metrics.csv, features.csv and config.resolved.
    #[arg(long)]
    out: Option<PathBuf>,
    /// fedcl | fedproto | vanilla | fedavg
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    snr_db: Option<f64>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Extra overrides as KEY=VALUE (repeatable), e.g. --set rounds=50.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Clone)]
struct ChanneltestArgs {
    #[arg(long, default_value_t = 5.0)]
    snr_db: f64,
    #[arg(long, default_value_t = 100_000)]
    symbols: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config key to sweep, e.g. snr_db or m.
    #[arg(long)]
    param: String,
    /// Comma-separated values for the swept key.
    #[arg(long)]
    values: String,
    /// Comma-separated seeds; each (value, seed) pair is one cell.
    #[arg(long, default_value = "0,1,2,3,4")]
    seeds: String,
    #[arg(long)]
    out: PathBuf,
    /// Extra overrides as KEY=VALUE (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

/// Parses `std::env::args` and runs the selected command, returning the
/// process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Gradcheck => cmd_gradcheck(),
        Command::Channeltest(args) => cmd_channeltest(args.snr_db, args.symbols, args.seed),
        Command::Sweep(args) => cmd_sweep(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn env_thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok())
}

fn apply_thread_cap(cfg: &mut ExperimentConfig) {
    if let Some(cap) = env_thread_cap() {
        let cap = cap.max(1);
        cfg.threads = if cfg.threads == 0 { cap } else { cfg.threads.min(cap) };
    }
}

fn build_config(
    file: &Option<PathBuf>,
    sets: &[String],
    args: Option<&TrainArgs>,
) -> Result<ExperimentConfig> {
    let mut cfg = match file {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    for pair in sets {
        let (k, v) = pair.split_once('=').ok_or_else(|| {
            Error::Config(format!("--set expects KEY=VALUE, got `{pair}`"))
        })?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(args) = args {
        if let Some(seed) = args.seed {
            cfg.set("seed", &seed.to_string())?;
        }
        if let Some(out) = &args.out {
            cfg.set("out_dir", &out.display().to_string())?;
        }
        if let Some(scheme) = &args.scheme {
            cfg.set("scheme", scheme)?;
        }
        if let Some(snr) = args.snr_db {
            cfg.set("snr_db", &snr.to_string())?;
        }
        if let Some(clients) = args.clients {
            cfg.set("clients", &clients.to_string())?;
        }
        if let Some(m) = args.m {
            cfg.set("m", &m.to_string())?;
        }
        if let Some(lambda) = args.lambda {
            cfg.set("lambda", &lambda.to_string())?;
        }
    }
    Ok(cfg)
}

/// Writes an experiment's artifacts: metrics.csv, features.csv, and the
/// resolved config for bit-exact reproduction.
pub fn write_experiment(cfg: &ExperimentConfig, result: &TrainingResult) -> Result<()> {
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_metrics_csv(&result.rounds, dir.join("metrics.csv"))?;
    write_features_csv(&result.eval.features, dir.join("features.csv"))?;
    std::fs::write(dir.join("config.resolved"), cfg.render())
        .map_err(|e| Error::io(dir.join("config.resolved"), e))?;
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let mut cfg = build_config(&args.config, &args.set, Some(&args))?;
    apply_thread_cap(&mut cfg);
    let result = run_training(&cfg)?;
    write_experiment(&cfg, &result)?;
    let last = result.rounds.last();
    println!(
        "scheme={} rounds={} final_train_acc={:.4} eval_acc={:.4} separability={:.4}",
        cfg.scheme.name(),
        result.rounds.len(),
        last.map(|r| r.mean_accuracy).unwrap_or(f64::NAN),
        result.eval.mean_accuracy,
        result.eval.separability,
    );
    println!("artifacts written to {}", cfg.out_dir.display());
    Ok(0)
}

fn cmd_gradcheck() -> Result<i32> {
    let lines = gradcheck_suite()?;
    let mut worst = 0.0f64;
    for line in &lines {
        let status = if line.max_rel_error < GRADCHECK_TOLERANCE { "PASS" } else { "FAIL" };
        println!("[{status}] {:<55} max rel error {:.3e}", line.name, line.max_rel_error);
        worst = worst.max(line.max_rel_error);
    }
    println!(
        "layer types checked: affine, relu, softmax cross-entropy, l2 centroid regularizer, \
         contrastive log-sum-exp"
    );
    if worst < GRADCHECK_TOLERANCE {
        println!("gradcheck: PASS (worst {worst:.3e} < {GRADCHECK_TOLERANCE:e})");
        Ok(0)
    } else {
        println!("gradcheck: FAIL (worst {worst:.3e} >= {GRADCHECK_TOLERANCE:e})");
        Ok(1)
    }
}

/// Measured (configured, empirical) SNR in dB over one frame of `n` symbols.
pub fn channel_snr_measurement(snr_db: f64, n_symbols: usize, seed: u64) -> Result<(f64, f64)> {
    if n_symbols == 0 {
        return Err(Error::InvalidArgument("channeltest needs at least one symbol".into()));
    }
    let mut stream = rng::stream(seed, &[rng::salt::UPLINK, u64::MAX]);
    let normal = rand_distr::StandardNormal;
    let entries: Vec<f64> = (0..2 * n_symbols)
        .map(|_| Distribution::<f64>::sample(&normal, &mut stream))
        .collect();
    let frame = reshape_to_symbols(&crate::numerics::Tensor::vector(entries))?;
    let cfg = ChannelConfig::awgn(snr_db, seed);
    if cfg.is_noiseless() {
        return Ok((snr_db, snr_db));
    }
    let (received, info) = transmit(&frame, &cfg, &mut stream)?;
    let noise_power: f64 = received
        .symbols()
        .iter()
        .zip(frame.symbols())
        .map(|(y, s)| (y - s).norm_sqr())
        .sum::<f64>()
        / n_symbols as f64;
    Ok((snr_db, 10.0 * (info.signal_power / noise_power).log10()))
}

const CHANNELTEST_TOLERANCE_DB: f64 = 0.2;

fn cmd_channeltest(snr_db: f64, symbols: usize, seed: u64) -> Result<i32> {
    let (configured, empirical) = channel_snr_measurement(snr_db, symbols, seed)?;
    let delta = (empirical - configured).abs();
    println!(
        "configured {configured:.4} dB, empirical {empirical:.4} dB over {symbols} symbols \
         (delta {delta:.4} dB)"
    );
    if symbols >= 100_000 && delta > CHANNELTEST_TOLERANCE_DB {
        println!("channeltest: FAIL (|delta| > {CHANNELTEST_TOLERANCE_DB} dB)");
        Ok(1)
    } else {
        println!("channeltest: PASS");
        Ok(0)
    }
}

fn cmd_sweep(args: SweepArgs) -> Result<i32> {
    let base = build_config(&args.config, &args.set, None)?;
    let values: Vec<String> =
        args.values.split(',').map(|v| v.trim().to_string()).collect();
    let seeds: Vec<u64> = args
        .seeds
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad seed `{s}` in --seeds")))
        })
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one value and one seed".into()));
    }

    // Build every cell config up front so config errors surface immediately.
    let mut cells = Vec::new();
    for value in &values {
        for &seed in &seeds {
            let mut cfg = base.clone();
            cfg.set(&args.param, value)?;
            cfg.set("seed", &seed.to_string())?;
            cfg.set(
                "out_dir",
                &args
                    .out
                    .join(format!("{}={value}", args.param))
                    .join(format!("seed={seed}"))
                    .display()
                    .to_string(),
            )?;
            cfg.threads = 1; // cells are the parallel unit
            cfg.validate()?;
            cells.push((value.clone(), seed, cfg));
        }
    }

    let workers = env_thread_cap()
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    let results = crate::protocol::parallel_map(cells.len(), workers, |i| {
        let (value, seed, cfg) = &cells[i];
        let result = run_training(cfg)?;
        write_experiment(cfg, &result)?;
        Ok::<_, Error>((value.clone(), *seed, result.eval.mean_accuracy, result.eval.separability))
    });

    let mut summary = String::from("param_value,seed,mean_accuracy,separability\n");
    for res in results {
        let (value, seed, acc, sep) = res?;
        println!("{}={value} seed={seed}: eval accuracy {acc:.4}, separability {sep:.4}", args.param);
        summary.push_str(&format!("{value},{seed},{acc},{sep}\n"));
    }
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let summary_path = args.out.join("summary.csv");
    std::fs::write(&summary_path, summary).map_err(|e| Error::io(&summary_path, e))?;
    println!("sweep summary written to {}", summary_path.display());
    Ok(0)
}
