use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use griduq::data::{
    generate_synthetic, read_dataset, write_dataset, NoiseProfile, RegionName, RegionSpec,
    SyntheticConfig,
};
use griduq::eval;
use griduq::train::{self, RunSet, TrainConfig, UqMethod};
use griduq::{Error, Result};

#[derive(Parser)]
#[command(name = "griduq", version, about = "U-Net bias emulator with MC-Dropout and conformalized quantile regression")]
struct Cli {
    /// Single-threaded, bitwise-reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train one model per seed.
    Train(TrainArgs),
    /// Test-month metrics report.
    Eval(EvalArgs),
    /// Stations with the largest and smallest mean UQ.
    Rank {
        #[command(flatten)]
        io: RunIo,
        #[arg(long, default_value_t = 10)]
        top: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Observed and predicted series at one station.
    Series {
        #[command(flatten)]
        io: RunIo,
        #[arg(long, allow_hyphen_values = true)]
        lat: f64,
        #[arg(long, allow_hyphen_values = true)]
        lon: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full-grid maps for selected days of the test month.
    Extrapolate {
        #[command(flatten)]
        io: RunIo,
        #[arg(long, value_delimiter = ',', default_value = "1,7,15,21,30")]
        days: Vec<u32>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value = "synth")]
    region: RegionName,
    #[arg(long)]
    days: usize,
    #[arg(long, default_value_t = 28)]
    channels: usize,
    /// `homo:SIGMA`, `hetero` or `hetero:BASE`.
    #[arg(long, default_value = "hetero")]
    noise: NoiseProfile,
    #[arg(long, default_value_t = 0.05)]
    density: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Grid height (synthetic region only).
    #[arg(long)]
    height: Option<usize>,
    /// Grid width (synthetic region only).
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    uq: UqMethod,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.1)]
    dropout: f32,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    /// MC-Dropout passes at inference.
    #[arg(long, default_value_t = 30)]
    passes: usize,
    #[arg(long, default_value_t = 32)]
    base_width: usize,
    #[arg(long, default_value_t = 3)]
    depth: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunIo {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    runs: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    io: RunIo,
    #[arg(long)]
    out: PathBuf,
}

fn configure_threads(deterministic: bool) {
    let cap = std::env::var("GRIDUQ_THREADS").ok().and_then(|v| match v.parse::<usize>() {
        Ok(n) if n > 0 => Some(n),
        _ => {
            warn!("ignoring GRIDUQ_THREADS={v}");
            None
        }
    });
    let threads = if deterministic { Some(1) } else { cap };
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            warn!("could not size the worker pool: {e}");
        }
    }
}

fn write(path: &PathBuf, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    }
    fs::write(path, text).map_err(|e| Error::Io { path: path.clone(), source: e })
}

fn load(io: &RunIo) -> Result<(RunSet, griduq::data::Dataset)> {
    Ok((RunSet::load(&io.runs)?, read_dataset(&io.data)?))
}

fn gen(a: GenArgs) -> Result<()> {
    let region = match (a.region, a.height, a.width) {
        (RegionName::Synthetic, h, w) => RegionSpec::synthetic(h.unwrap_or(24), w.unwrap_or(24)),
        (name, None, None) => RegionSpec::for_name(name),
        _ => return Err(Error::Invalid("--height/--width apply to the synth region only".into())),
    };
    let syn = generate_synthetic(&SyntheticConfig {
        region,
        n_days: a.days,
        channels: a.channels,
        noise: a.noise,
        station_density: a.density,
        seed: a.seed,
    })?;
    write_dataset(&a.out, &syn.dataset)?;
    info!("wrote {} days to {}", a.days, a.out.display());
    Ok(())
}

fn run_train(a: TrainArgs, deterministic: bool) -> Result<bool> {
    let ds = read_dataset(&a.data)?;
    let cfg = TrainConfig {
        uq: a.uq,
        epochs: a.epochs,
        lr: a.lr,
        dropout_rate: a.dropout,
        batch_size: a.batch,
        seeds: a.seeds,
        alpha: a.alpha,
        passes: a.passes,
        base_width: a.base_width,
        depth: a.depth,
        ..TrainConfig::default()
    };
    let sweep = train::train_all_seeds(&cfg, &ds, deterministic)?;
    for run in &sweep.runs {
        let rec = train::write_run(&a.out, &cfg, &ds, run)?;
        println!("{}", rec.log_line(cfg.uq));
    }
    let (m, v) = sweep.val_loss;
    println!("best_val_loss_mean={m:.6} best_val_loss_variance={v:.6}");
    for (seed, e) in &sweep.failures {
        eprintln!("seed {seed} failed: {e}");
    }
    Ok(sweep.is_complete())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen(a) => gen(a)?,
        Command::Train(a) => return run_train(a, cli.deterministic),
        Command::Eval(a) => {
            let (runs, ds) = load(&a.io)?;
            let report = eval::evaluate(&runs, &ds)?;
            write(&a.out, &report.render())?;
        }
        Command::Rank { io, top, out } => {
            let (runs, ds) = load(&io)?;
            let test = eval::test_samples(&ds);
            let (points, scores) = eval::ensemble(&runs, &test)?;
            let rank = eval::rank_stations(runs.config.uq, &scores, &points, &test, &ds.region)?;
            write(&out, &rank.to_csv(top))?;
        }
        Command::Series { io, lat, lon, out } => {
            let (runs, ds) = load(&io)?;
            write(&out, &eval::series_csv(&runs, &ds, lat, lon)?)?;
        }
        Command::Extrapolate { io, days, out } => {
            let (runs, ds) = load(&io)?;
            let maps = eval::extrapolate(&runs, &ds, &days)?;
            eval::write_maps(&maps, &ds.region, &out)?;
            info!("wrote {} maps to {}", maps.len(), out.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    configure_threads(cli.deterministic);
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
