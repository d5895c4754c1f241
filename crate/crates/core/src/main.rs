use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crowdflow::commands::{
    checkpoint_path, cmd_evaluate, cmd_ingest, cmd_make_dataset, cmd_predict, cmd_synth, cmd_train, read_grid,
    write_prediction, EvaluateOptions, RunConfig,
};
use crowdflow::eval::ReferenceSet;
use crowdflow::train::Precision;
use crowdflow::{Error, Result};

const DATA_KEYS: &str = "\
  grid                   inline grid: lon_min, lon_max, lat_min, lat_max, rows, cols,
                         interval_seconds, epoch_start (unix seconds)
  data.grid              path to a grid JSON (used when `grid` is absent)
  data.flows             flow-series binary (preferred input)
  data.trajectories      trajectory CSV `traj_id,timestamp,lon,lat` (used when `data.flows` is absent)
  data.timestamp_format  auto | epoch | iso8601
  data.weather           weather CSV `timestamp,condition,temperature_c,wind_mph`
  data.holidays          holiday list, one YYYY-MM-DD per line";

const MODEL_KEYS: &str = "\
  sequence               closeness_len, period_len, trend_len, period, trend_span
                         (default 3, 1, 1, one day, one week)
  model.filters          convolution filters (default 16)
  model.depth            residual units per branch (default 2)
  model.variant          standard | single | bn
  model.external         use external factors (default true)
  model.fusion           learned fusion weights (default true)
  model.external_hidden  hidden width of the external network (default 10)
  external.weather_vocabulary, external.temperature_range, external.wind_range,
  external.weather_source (previous | forecast)
  test_intervals         trailing intervals held out from training";

const TRAIN_KEYS: &str = "\
  seed                   root seed (model init, shuffling); --seed overrides
  train.batch_size, train.max_epochs, train.patience, train.post_earlystop_epochs,
  train.lr, train.train_fraction, train.precision (f32 | f64; --precision overrides)";

const SYNTH_KEYS: &str = "\
  seed                   root seed; --seed overrides
  synth.rows, synth.cols, synth.intervals_per_day, synth.days, synth.epoch_start,
  synth.bbox [lon_min, lon_max, lat_min, lat_max], synth.agents,
  synth.trip_probability, synth.base_level, synth.daily_amplitude,
  synth.weekly_trend, synth.rain_probability, synth.rain_duration,
  synth.suppression, synth.holidays (day offsets), synth.noise";

#[derive(Parser)]
#[command(
    name = "crowdflow",
    version,
    about = "Crowd-flow grids from trajectories and a residual-network forecaster"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON run config; unknown keys are rejected
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed, overriding the config
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Arithmetic precision, overriding `train.precision`
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReferenceArg {
    Taxibj,
    Bikenyc,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic city into the output directory
    #[command(after_help = format!("Config keys read:\n{SYNTH_KEYS}"))]
    Synth {
        /// Write a closed-form flow series instead of agent trajectories
        #[arg(long)]
        direct: bool,
    },
    /// Convert a trajectory CSV into a flow-series binary
    #[command(after_help = "Config keys read:\n  grid, data.grid, data.trajectories, data.timestamp_format")]
    Ingest {
        /// Trajectory CSV; defaults to `data.trajectories`
        #[arg(long)]
        input: Option<PathBuf>,
        /// Grid JSON; defaults to `grid` / `data.grid`
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Pad or cut the series to this many intervals
        #[arg(long)]
        intervals: Option<usize>,
        /// Output file; defaults to <out>/flows.bin
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Build and validate training instances without training
    #[command(name = "make-dataset", after_help = format!("Config keys read:\n{DATA_KEYS}\n{MODEL_KEYS}\n  train.train_fraction"))]
    MakeDataset,
    /// Train and write <out>/model.ckpt, <out>/model.json, <out>/report.json
    #[command(after_help = format!("Config keys read:\n{DATA_KEYS}\n{MODEL_KEYS}\n{TRAIN_KEYS}"))]
    Train,
    /// Forecast one interval from its history
    #[command(after_help = format!("Config keys read:\n{DATA_KEYS}\nModel settings come from the checkpoint's JSON sidecar."))]
    Predict {
        /// Target interval index
        #[arg(long)]
        t: usize,
        /// Checkpoint; defaults to <out>/model.ckpt
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `.bin` writes a flow-series binary, anything else CSV;
        /// defaults to <out>/prediction_<t>.csv
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compare the model with baselines over a test range
    #[command(after_help = format!("Config keys read:\n{DATA_KEYS}\n  test_intervals         default test range is the last `test_intervals` intervals\nModel settings come from the checkpoint's JSON sidecar."))]
    Evaluate {
        /// Checkpoint; defaults to <out>/model.ckpt
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// First target interval of the test range
        #[arg(long, requires = "to")]
        from: Option<usize>,
        /// End (exclusive) of the test range
        #[arg(long, requires = "from")]
        to: Option<usize>,
        /// Add historical-average and persistence rows
        #[arg(long)]
        baselines: bool,
        /// Append published figures for a public dataset
        #[arg(long, value_enum)]
        reference: Option<ReferenceArg>,
    },
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.set_seed(seed);
    }
    if let Some(p) = g.precision {
        cfg.train.precision = match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ckpt_or_default(checkpoint: Option<PathBuf>, out: &Path) -> PathBuf {
    checkpoint.unwrap_or_else(|| checkpoint_path(out))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    let out = &cli.global.out;
    match cli.command {
        Command::Synth { direct } => print_json(&cmd_synth(&cfg.synth, out, direct)?),
        Command::Ingest {
            input,
            grid,
            intervals,
            output,
        } => {
            let input = input
                .or(cfg.data.trajectories.clone())
                .ok_or_else(|| Error::Config("no trajectory CSV: pass --input or set `data.trajectories`".into()))?;
            let grid = match grid {
                Some(path) => read_grid(&path)?,
                None => cfg.resolve_grid()?,
            };
            let output = output.unwrap_or_else(|| out.join("flows.bin"));
            print_json(&cmd_ingest(
                &input,
                &grid,
                cfg.data.timestamp_format,
                intervals,
                &output,
            )?)
        }
        Command::MakeDataset => print_json(&cmd_make_dataset(&cfg)?),
        Command::Train => {
            let mut progress = |rec: &crowdflow::train::EpochRecord| {
                if let Ok(line) = serde_json::to_string(rec) {
                    eprintln!("{line}");
                }
            };
            print_json(&cmd_train(&cfg, out, &mut progress)?)
        }
        Command::Predict { t, checkpoint, output } => {
            let ckpt = ckpt_or_default(checkpoint, out);
            let x = cmd_predict(&cfg, &ckpt, t)?;
            let output = match output {
                Some(p) => p,
                None => {
                    std::fs::create_dir_all(out)
                        .map_err(|e| Error::Config(format!("creating {}: {e}", out.display())))?;
                    out.join(format!("prediction_{t}.csv"))
                }
            };
            write_prediction(&output, &x)?;
            println!("{}", output.display());
            Ok(())
        }
        Command::Evaluate {
            checkpoint,
            from,
            to,
            baselines,
            reference,
        } => {
            let opts = EvaluateOptions {
                range: from.zip(to).map(|(a, b)| a..b),
                baselines,
                reference: reference.map(|r| match r {
                    ReferenceArg::Taxibj => ReferenceSet::TaxiBJ,
                    ReferenceArg::Bikenyc => ReferenceSet::BikeNYC,
                }),
            };
            let table = cmd_evaluate(&cfg, &ckpt_or_default(checkpoint, out), &opts, out)?;
            print!("{}", table.to_text());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
