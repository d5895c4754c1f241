//! Subcommands behind the `crowdflow` binary, callable as library functions.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{
    predict_flows, predict_ha, predict_persistence, reference_rows, rmse, write_instance_errors, ComparisonTable,
    ReferenceSet,
};
use crate::features::{
    build_instances, external_series, instance_at, load_holidays, load_weather, split_train_val, ExternalConfig,
    ExternalFeatures, HolidayCalendar, MinMaxScaler, SequenceConfig, TrainingInstance,
};
use crate::flows::{compute_flow_series, load_flow_series, save_flow_series, FlowTensor, INFLOW, OUTFLOW};
use crate::grid::GridSpec;
use crate::model::{Model, ModelConfig, UnitVariant};
use crate::nn::{seeded_rng, Real};
use crate::synth::{generate, generate_flow_series_direct, write_dataset, write_series, SynthConfig};
use crate::train::{
    load_checkpoint, save_checkpoint, train, CheckpointMeta, EpochRecord, Precision, TrainConfig, TrainReport,
};
use crate::trajectory::{parse_trajectories, TimestampFormat};

/// Row label of the trained network in comparison tables.
pub const MODEL_ROW: &str = "ST-ResNet";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    /// JSON grid spec, used when `grid` is not given inline.
    pub grid: Option<PathBuf>,
    pub trajectories: Option<PathBuf>,
    /// Flow-series binary; takes precedence over `trajectories`.
    pub flows: Option<PathBuf>,
    pub weather: Option<PathBuf>,
    pub holidays: Option<PathBuf>,
    pub timestamp_format: TimestampFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub filters: usize,
    pub depth: usize,
    pub variant: UnitVariant,
    /// Use the external-factor component.
    pub external: bool,
    /// Learned fusion weights; `false` sums the branches with fixed ones.
    pub fusion: bool,
    pub external_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            filters: 16,
            depth: 2,
            variant: UnitVariant::Standard,
            external: true,
            fusion: true,
            external_hidden: 10,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed. Overwrites `train.seed` and `synth.seed`.
    pub seed: u64,
    pub grid: Option<GridSpec>,
    pub data: DataPaths,
    /// Defaults to `l_c = 3, l_p = 1, l_q = 1` with a one-day period and
    /// one-week trend span.
    pub sequence: Option<SequenceConfig>,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub external: ExternalConfig,
    /// Trailing intervals held out from training and from scaler fitting.
    pub test_intervals: usize,
    pub synth: SynthConfig,
}

impl RunConfig {
    /// Parses and validates; relative data paths resolve against the config's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(base) = path.parent() {
            cfg.data.resolve(base);
        }
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.synth.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(g) = &self.grid {
            g.validate()?;
        }
        if let Some(s) = &self.sequence {
            s.validate()?;
        }
        if self.model.filters == 0 || self.model.external_hidden == 0 {
            return Err(Error::Config(
                "model.filters and model.external_hidden must be at least 1".into(),
            ));
        }
        self.train.validate()?;
        self.external.validate()?;
        self.synth.validate()
    }

    pub fn resolve_grid(&self) -> Result<GridSpec> {
        let grid = match (&self.grid, &self.data.grid) {
            (Some(g), _) => *g,
            (None, Some(path)) => read_grid(path)?,
            (None, None) => return Err(Error::Config("no grid: set `grid` or `data.grid`".into())),
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn sequence_for(&self, grid: &GridSpec) -> SequenceConfig {
        self.sequence
            .unwrap_or_else(|| SequenceConfig::daily_weekly(grid.intervals_per_day(), 3, 1, 1))
    }

    pub fn model_config(&self, grid: &GridSpec) -> ModelConfig {
        ModelConfig {
            rows: grid.rows,
            cols: grid.cols,
            filters: self.model.filters,
            depth: self.model.depth,
            sequence: self.sequence_for(grid),
            variant: self.model.variant,
            external_dim: if self.model.external {
                self.external.feature_len()
            } else {
                0
            },
            external_hidden: self.model.external_hidden,
            use_external: self.model.external,
            use_fusion: self.model.fusion,
        }
    }
}

impl DataPaths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.grid,
            &mut self.trajectories,
            &mut self.flows,
            &mut self.weather,
            &mut self.holidays,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

pub fn read_grid(path: &Path) -> Result<GridSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

/// The flow series named by `data.flows`, or computed from `data.trajectories`.
pub fn load_series(cfg: &RunConfig, grid: &GridSpec) -> Result<Vec<FlowTensor>> {
    if let Some(path) = &cfg.data.flows {
        let (series, rows, cols) = load_flow_series(path)?;
        if (rows, cols) != (grid.rows, grid.cols) {
            return Err(Error::shape(format!(
                "{} holds {rows}x{cols} grids, the configured grid is {}x{}",
                path.display(),
                grid.rows,
                grid.cols
            )));
        }
        return Ok(series);
    }
    if let Some(path) = &cfg.data.trajectories {
        let batch = parse_trajectories(path, cfg.data.timestamp_format)?;
        return compute_flow_series(&batch, grid);
    }
    Err(Error::Config(
        "no input data: set `data.flows` or `data.trajectories`".into(),
    ))
}

/// External features for every interval, or none when `external` is `None`.
pub fn load_externals(
    data: &DataPaths,
    grid: &GridSpec,
    n: usize,
    external: Option<&ExternalConfig>,
) -> Result<Vec<ExternalFeatures>> {
    let Some(ext) = external else {
        return Ok(Vec::new());
    };
    let weather = match &data.weather {
        Some(p) => load_weather(p)?,
        None => Vec::new(),
    };
    let holidays = match &data.holidays {
        Some(p) => load_holidays(p)?,
        None => HolidayCalendar::default(),
    };
    external_series(grid, n, &weather, &holidays, ext)
}

/// Scaled instances ready for training, plus the pieces evaluation needs.
pub struct Prepared {
    pub grid: GridSpec,
    pub series: Vec<FlowTensor>,
    pub externals: Vec<ExternalFeatures>,
    pub model: ModelConfig,
    pub scaler: MinMaxScaler,
    /// Instances whose target lies before the held-out tail.
    pub train: Vec<TrainingInstance>,
    /// Held-out target intervals.
    pub test_range: Range<usize>,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let grid = cfg.resolve_grid()?;
    let model = cfg.model_config(&grid);
    model.validate()?;
    let series = load_series(cfg, &grid)?;
    let n = series.len();
    let need = model.sequence.min_history() + 1 + cfg.test_intervals;
    if n < need {
        return Err(Error::InsufficientData(format!(
            "{n} intervals available; need at least {need} ({} history + 1 training target + {} held out)",
            model.sequence.min_history(),
            cfg.test_intervals
        )));
    }
    let train_end = n - cfg.test_intervals;
    let externals = load_externals(&cfg.data, &grid, n, cfg.model.external.then_some(&cfg.external))?;
    let scaler = MinMaxScaler::fit(&series, 0..train_end)?;
    let scaled = scaler.transform_series(&series);
    let mut train = build_instances(&scaled, &externals, &model.sequence)?;
    train.retain(|inst| inst.t < train_end);
    Ok(Prepared {
        grid,
        series,
        externals,
        model,
        scaler,
        train,
        test_range: train_end..n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub intervals: usize,
    pub rows: usize,
    pub cols: usize,
    pub min_history: usize,
    pub train_instances: usize,
    pub fit_instances: usize,
    pub validation_instances: usize,
    pub test_intervals: usize,
    pub external_dim: usize,
    pub scaler: MinMaxScaler,
}

/// Validation-only dry run of the training data path; writes nothing.
pub fn cmd_make_dataset(cfg: &RunConfig) -> Result<DatasetSummary> {
    let p = prepare(cfg)?;
    let (fit, val) = if cfg.train.train_fraction < 1.0 {
        let (f, v) = split_train_val(&p.train, cfg.train.train_fraction)?;
        (f.len(), v.len())
    } else {
        (p.train.len(), 0)
    };
    Ok(DatasetSummary {
        intervals: p.series.len(),
        rows: p.grid.rows,
        cols: p.grid.cols,
        min_history: p.model.sequence.min_history(),
        train_instances: p.train.len(),
        fit_instances: fit,
        validation_instances: val,
        test_intervals: p.test_range.len(),
        external_dim: p.model.external_dim,
        scaler: p.scaler,
    })
}

pub fn checkpoint_path(out: &Path) -> PathBuf {
    out.join("model.ckpt")
}

fn train_typed<T: Real>(
    cfg: &RunConfig,
    p: &Prepared,
    out: &Path,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainReport> {
    let model = Model::<T>::init(p.model, &mut seeded_rng(cfg.seed))?;
    let (model, adam, report) = train(model, &p.train, &p.scaler, &cfg.train, progress)?;
    let meta = CheckpointMeta {
        model: p.model,
        scaler: Some(p.scaler),
        external: cfg.model.external.then(|| cfg.external.clone()),
        precision: cfg.train.precision,
    };
    save_checkpoint(&checkpoint_path(out), &model, Some(&adam), &meta)?;
    Ok(report)
}

/// Trains on everything before the held-out tail and writes `model.ckpt`,
/// `model.json` and `report.json` into `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path, progress: &mut dyn FnMut(&EpochRecord)) -> Result<TrainReport> {
    cfg.validate()?;
    let p = prepare(cfg)?;
    create_dir(out)?;
    let report = match cfg.train.precision {
        Precision::F32 => train_typed::<f32>(cfg, &p, out, progress)?,
        Precision::F64 => train_typed::<f64>(cfg, &p, out, progress)?,
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

/// Loads a checkpoint and the config's data with the checkpoint's sequence
/// and external settings.
struct Restored<T> {
    model: Model<T>,
    scaler: MinMaxScaler,
    series: Vec<FlowTensor>,
    scaled: Vec<FlowTensor>,
    externals: Vec<ExternalFeatures>,
    grid: GridSpec,
}

fn restore<T: Real>(cfg: &RunConfig, checkpoint: &Path) -> Result<Restored<T>> {
    let loaded = load_checkpoint::<T>(checkpoint)?;
    let scaler = loaded
        .meta
        .scaler
        .ok_or_else(|| Error::Config(format!("{} carries no scaler", checkpoint.display())))?;
    let grid = cfg.resolve_grid()?;
    let mc = &loaded.model.config;
    if (grid.rows, grid.cols) != (mc.rows, mc.cols) {
        return Err(Error::shape(format!(
            "checkpoint expects {}x{} grids, the configured grid is {}x{}",
            mc.rows, mc.cols, grid.rows, grid.cols
        )));
    }
    let series = load_series(cfg, &grid)?;
    let external = if mc.has_external() {
        loaded.meta.external.as_ref()
    } else {
        None
    };
    let externals = load_externals(&cfg.data, &grid, series.len(), external)?;
    let scaled = scaler.transform_series(&series);
    Ok(Restored {
        model: loaded.model,
        scaler,
        series,
        scaled,
        externals,
        grid,
    })
}

fn checkpoint_precision(checkpoint: &Path) -> Result<Precision> {
    let mp = crate::train::meta_path(checkpoint);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(format!("reading {}", mp.display()), e))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", mp.display())))?;
    Ok(meta.precision)
}

fn predict_typed<T: Real>(cfg: &RunConfig, checkpoint: &Path, t: usize) -> Result<FlowTensor> {
    let r = restore::<T>(cfg, checkpoint)?;
    let inst = instance_at(&r.scaled, &r.externals, &r.model.config.sequence, t)?;
    let mut out = predict_flows(&r.model, std::slice::from_ref(&inst), &r.scaler)?;
    Ok(out.remove(0))
}

/// Forecast for interval `t` from its history.
pub fn cmd_predict(cfg: &RunConfig, checkpoint: &Path, t: usize) -> Result<FlowTensor> {
    match checkpoint_precision(checkpoint)? {
        Precision::F32 => predict_typed::<f32>(cfg, checkpoint, t),
        Precision::F64 => predict_typed::<f64>(cfg, checkpoint, t),
    }
}

/// `.bin` → flow-series binary holding one tensor; anything else → CSV with
/// `channel,row,col,value`.
pub fn write_prediction(path: &Path, x: &FlowTensor) -> Result<()> {
    if path.extension().is_some_and(|e| e == "bin") {
        return save_flow_series(path, std::slice::from_ref(x), x.rows, x.cols);
    }
    let mut text = String::from("channel,row,col,value\n");
    for (ch, name) in [(INFLOW, "inflow"), (OUTFLOW, "outflow")] {
        for i in 0..x.rows {
            for j in 0..x.cols {
                text.push_str(&format!("{name},{i},{j},{}\n", x.get(ch, i, j)));
            }
        }
    }
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[derive(Debug, Clone, Default)]
pub struct EvaluateOptions {
    /// Target intervals; defaults to the held-out tail of the config.
    pub range: Option<Range<usize>>,
    /// Add HA and persistence rows.
    pub baselines: bool,
    pub reference: Option<ReferenceSet>,
}

fn evaluate_typed<T: Real>(
    cfg: &RunConfig,
    checkpoint: &Path,
    opts: &EvaluateOptions,
) -> Result<(ComparisonTable, Vec<FlowTensor>, Vec<FlowTensor>)> {
    let r = restore::<T>(cfg, checkpoint)?;
    let n = r.series.len();
    let range = match &opts.range {
        Some(range) => range.clone(),
        None => n.saturating_sub(cfg.test_intervals)..n,
    };
    if range.is_empty() {
        return Err(Error::Config(
            "empty test range: set `test_intervals` or pass --from/--to".into(),
        ));
    }
    if range.end > n {
        return Err(Error::InsufficientData(format!(
            "test range ends at {} but the series has {n} intervals",
            range.end
        )));
    }
    let instances = range
        .clone()
        .map(|t| instance_at(&r.scaled, &r.externals, &r.model.config.sequence, t))
        .collect::<Result<Vec<_>>>()?;
    let predictions = predict_flows(&r.model, &instances, &r.scaler)?;
    let targets = &r.series[range.clone()];
    let report = rmse(&predictions, targets)?;
    let mut table = ComparisonTable::new(instances.len(), report.z);
    table.push(MODEL_ROW, &report);
    if opts.baselines {
        let ha = range
            .clone()
            .map(|t| predict_ha(&r.series, t, &r.grid))
            .collect::<Result<Vec<_>>>()?;
        table.push("HA", &rmse(&ha, targets)?);
        let last = range
            .clone()
            .map(|t| predict_persistence(&r.series, t))
            .collect::<Result<Vec<_>>>()?;
        table.push("persistence", &rmse(&last, targets)?);
    }
    if let Some(set) = opts.reference {
        table.rows.extend(reference_rows(set));
    }
    Ok((table, predictions, targets.to_vec()))
}

/// Writes `evaluation.json`, `evaluation.txt` and `instance_errors.csv` into `out`.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path, opts: &EvaluateOptions, out: &Path) -> Result<ComparisonTable> {
    let (table, predictions, targets) = match checkpoint_precision(checkpoint)? {
        Precision::F32 => evaluate_typed::<f32>(cfg, checkpoint, opts)?,
        Precision::F64 => evaluate_typed::<f64>(cfg, checkpoint, opts)?,
    };
    create_dir(out)?;
    write_json(&out.join("evaluation.json"), &table)?;
    let txt = out.join("evaluation.txt");
    fs::write(&txt, table.to_text()).map_err(|e| Error::io(format!("writing {}", txt.display()), e))?;
    let csv_path = out.join("instance_errors.csv");
    let file = fs::File::create(&csv_path).map_err(|e| Error::io(format!("writing {}", csv_path.display()), e))?;
    write_instance_errors(file, &predictions, &targets)?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub intervals: usize,
    pub agents: usize,
    pub trips: Option<usize>,
    pub files: Vec<PathBuf>,
}

/// Agent tier writes trajectories; `direct` writes a flow series instead.
pub fn cmd_synth(cfg: &SynthConfig, out: &Path, direct: bool) -> Result<SynthSummary> {
    let (names, trips) = if direct {
        write_series(out, &generate_flow_series_direct(cfg)?)?;
        (["flows.bin", "weather.csv", "holidays.txt", "grid.json"], None)
    } else {
        let data = generate(cfg)?;
        write_dataset(out, &data)?;
        (
            ["trajectories.csv", "weather.csv", "holidays.txt", "grid.json"],
            Some(data.trips.len()),
        )
    };
    Ok(SynthSummary {
        intervals: cfg.num_intervals(),
        agents: if direct { 0 } else { cfg.agents },
        trips,
        files: names.iter().map(|f| out.join(f)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub intervals: usize,
    pub rows: usize,
    pub cols: usize,
    pub trajectories: usize,
    pub points: usize,
    pub total_inflow: f64,
    pub total_outflow: f64,
    /// Mean flow per cell, channel and interval.
    pub mean_flow: f64,
    pub max_flow: f64,
    /// Share of cell-channel-interval entries above zero.
    pub nonzero_fraction: f64,
}

/// Trajectory CSV → flow-series binary. A CSV with a header but no rows
/// yields `intervals` all-zero tensors (0 when not given).
pub fn cmd_ingest(
    input: &Path,
    grid: &GridSpec,
    format: TimestampFormat,
    intervals: Option<usize>,
    output: &Path,
) -> Result<IngestSummary> {
    grid.validate()?;
    let batch = parse_trajectories(input, format)?;
    let mut series = if batch.num_points() == 0 {
        Vec::new()
    } else {
        compute_flow_series(&batch, grid)?
    };
    if let Some(n) = intervals {
        series.truncate(n);
        while series.len() < n {
            series.push(FlowTensor::zeros(series.len(), grid.rows, grid.cols));
        }
    }
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_flow_series(output, &series, grid.rows, grid.cols)?;
    let entries = series.len() * 2 * grid.num_cells();
    let all = || series.iter().flat_map(|x| x.values.iter().map(|&v| v as f64));
    let total = all().sum::<f64>();
    Ok(IngestSummary {
        intervals: series.len(),
        rows: grid.rows,
        cols: grid.cols,
        trajectories: batch.trajectories.len(),
        points: batch.num_points(),
        total_inflow: series.iter().map(|x| x.total(INFLOW)).sum(),
        total_outflow: series.iter().map(|x| x.total(OUTFLOW)).sum(),
        mean_flow: if entries == 0 { 0.0 } else { total / entries as f64 },
        max_flow: all().fold(0.0, f64::max),
        nonzero_fraction: if entries == 0 {
            0.0
        } else {
            all().filter(|&v| v > 0.0).count() as f64 / entries as f64
        },
    })
}
