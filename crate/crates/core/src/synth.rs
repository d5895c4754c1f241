//! Synthetic city: commuting agents (trajectories) or closed-form flow
//! series, both with daily rhythm, weekly drift, rain that suppresses
//! movement and holidays that look like weekends.

use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{save_holidays, save_weather, HolidayCalendar, WeatherRecord};
use crate::flows::{save_flow_series, FlowTensor, INFLOW, OUTFLOW};
use crate::grid::{utc, GridSpec};
use crate::trajectory::{save_trajectories, TrajPoint, Trajectory, TrajectoryBatch};

const DAY: i64 = 86_400;
const TRAVEL_SECONDS: i64 = 20 * 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub rows: usize,
    pub cols: usize,
    pub intervals_per_day: usize,
    pub days: usize,
    /// Unix seconds of the first interval; should fall on a midnight (UTC).
    pub epoch_start: i64,
    /// `[lon_min, lon_max, lat_min, lat_max]`.
    pub bbox: [f64; 4],
    pub agents: usize,
    /// Chance that a commuter makes a scheduled trip (agent tier).
    pub trip_probability: f64,
    /// Mean flow per cell and channel (closed-form tier).
    pub base_level: f64,
    /// Height of the rush-hour peaks relative to the base level.
    pub daily_amplitude: f64,
    /// Relative growth per week: trip probability (agents) or level (closed form).
    pub weekly_trend: f64,
    /// Chance per interval that a rain spell starts.
    pub rain_probability: f64,
    /// Length of a rain spell in intervals.
    pub rain_duration: usize,
    /// Multiplier on movement while it rains, in `[0, 1]`.
    pub suppression: f64,
    /// Holidays as day offsets from `epoch_start`.
    pub holidays: Vec<usize>,
    /// Agents: chance per agent and day of an extra random round trip.
    /// Closed form: standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            rows: 8,
            cols: 8,
            intervals_per_day: 48,
            days: 28,
            // Monday 2013-07-01 00:00 UTC
            epoch_start: 1_372_636_800,
            bbox: [116.25, 116.55, 39.80, 40.05],
            agents: 400,
            trip_probability: 0.9,
            base_level: 40.0,
            daily_amplitude: 2.0,
            weekly_trend: 0.1,
            rain_probability: 0.02,
            rain_duration: 6,
            suppression: 0.4,
            holidays: vec![],
            noise: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.rows == 0 || self.cols == 0 || self.intervals_per_day == 0 {
            return bad("rows, cols and intervals_per_day must be at least 1".into());
        }
        if DAY % self.intervals_per_day as i64 != 0 {
            return bad(format!("{} intervals do not divide a day", self.intervals_per_day));
        }
        for (name, p) in [
            ("trip_probability", self.trip_probability),
            ("rain_probability", self.rain_probability),
            ("suppression", self.suppression),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        for (name, v) in [
            ("base_level", self.base_level),
            ("daily_amplitude", self.daily_amplitude),
            ("noise", self.noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !self.weekly_trend.is_finite() {
            return bad("weekly_trend must be finite".into());
        }
        self.grid().validate()
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec {
            lon_min: self.bbox[0],
            lon_max: self.bbox[1],
            lat_min: self.bbox[2],
            lat_max: self.bbox[3],
            rows: self.rows,
            cols: self.cols,
            interval_seconds: DAY / self.intervals_per_day.max(1) as i64,
            epoch_start: self.epoch_start,
        }
    }

    pub fn num_intervals(&self) -> usize {
        self.days * self.intervals_per_day
    }

    pub fn holiday_calendar(&self) -> HolidayCalendar {
        let start = utc(self.epoch_start).date_naive();
        HolidayCalendar::new(self.holidays.iter().map(|&d| start + Duration::days(d as i64)))
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(stream);
        r
    }
}

/// Rain flags and one weather record per interval.
fn weather(cfg: &SynthConfig) -> (Vec<bool>, Vec<WeatherRecord>) {
    let grid = cfg.grid();
    let n = cfg.num_intervals();
    let mut rng = cfg.rng(1);
    let mut rain = vec![false; n];
    let mut left = 0usize;
    for r in rain.iter_mut() {
        if left == 0 && cfg.rain_duration > 0 && rng.random::<f64>() < cfg.rain_probability {
            left = cfg.rain_duration;
        }
        if left > 0 {
            *r = true;
            left -= 1;
        }
    }
    let records = (0..n)
        .map(|t| {
            let hour = (t % cfg.intervals_per_day) as f64 * 24.0 / cfg.intervals_per_day as f64;
            let cloudy = rng.random::<f64>() < 0.3;
            let condition = if rain[t] {
                "Rainy"
            } else if cloudy {
                "Cloudy"
            } else {
                "Sunny"
            };
            let temperature =
                18.0 + 7.0 * (std::f64::consts::TAU * (hour - 9.0) / 24.0).sin() - if rain[t] { 4.0 } else { 0.0 };
            let wind: f64 = rng.random_range(2.0..12.0) + if rain[t] { 8.0 } else { 0.0 };
            WeatherRecord {
                timestamp: grid.interval_start(t),
                condition: Some(condition.to_string()),
                temperature_c: (temperature * 10.0).round() / 10.0,
                wind_mph: (wind * 10.0).round() / 10.0,
            }
        })
        .collect();
    (rain, records)
}

fn is_rest_day(cfg: &SynthConfig, day: usize, holidays: &HolidayCalendar) -> bool {
    let ts = cfg.epoch_start + day as i64 * DAY;
    utc(ts).weekday().num_days_from_monday() >= 5 || holidays.contains_timestamp(ts)
}

/// A completed trip of the agent tier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trip {
    pub agent: usize,
    pub depart: i64,
    pub arrive: i64,
    pub from_cell: usize,
    pub to_cell: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub grid: GridSpec,
    pub trajectories: TrajectoryBatch,
    pub trips: Vec<Trip>,
    pub weather: Vec<WeatherRecord>,
    pub rain: Vec<bool>,
    pub holidays: HolidayCalendar,
}

struct Agent {
    home: usize,
    work: usize,
    morning: i64,
    evening: i64,
}

fn point_in(grid: &GridSpec, cell: usize, rng: &mut impl Rng) -> (f64, f64) {
    let (i, j) = (cell / grid.cols, cell % grid.cols);
    let (x0, x1) = (grid.col_edge(j), grid.col_edge(j + 1));
    let (y0, y1) = (grid.row_edge(i), grid.row_edge(i + 1));
    let fx = rng.random_range(0.1..0.9);
    let fy = rng.random_range(0.1..0.9);
    (x0 + fx * (x1 - x0), y0 + fy * (y1 - y0))
}

/// Commuting agents: home → work in the morning and back in the evening on
/// working days, one leisure round trip on weekends and holidays. Agents that
/// never move get no trajectory.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let grid = cfg.grid();
    let cells = grid.num_cells();
    let holidays = cfg.holiday_calendar();
    let (rain, weather) = weather(cfg);
    let mut rng = cfg.rng(2);
    let hour = 3600.0;
    let agents: Vec<Agent> = (0..cfg.agents)
        .map(|_| {
            let home = rng.random_range(0..cells);
            let work = if cells > 1 {
                (home + rng.random_range(1..cells)) % cells
            } else {
                home
            };
            let jitter = Normal::new(0.0, 0.75 * hour).expect("valid normal");
            Agent {
                home,
                work,
                morning: ((8.0 * hour + jitter.sample(&mut rng)) as i64).clamp(5 * 3600, 11 * 3600),
                evening: ((18.0 * hour + jitter.sample(&mut rng)) as i64).clamp(15 * 3600, 22 * 3600),
            }
        })
        .collect();

    let mut trip_rng = cfg.rng(3);
    let mut trips = Vec::new();
    let mut points: Vec<Vec<TrajPoint>> = vec![Vec::new(); cfg.agents];
    let end = cfg.epoch_start + cfg.num_intervals() as i64 * grid.interval_seconds;
    for day in 0..cfg.days {
        let day_start = cfg.epoch_start + day as i64 * DAY;
        let week = (day / 7) as f64;
        let p = (cfg.trip_probability * (1.0 + cfg.weekly_trend * week)).clamp(0.0, 1.0);
        let rest = is_rest_day(cfg, day, &holidays);
        for (k, a) in agents.iter().enumerate() {
            let mut plan: Vec<(i64, usize, usize, f64)> = if rest {
                let dest = trip_rng.random_range(0..cells);
                let out = day_start + 13 * 3600 + trip_rng.random_range(0..3 * 3600);
                vec![(out, a.home, dest, 0.5 * p), (out + 3 * 3600, dest, a.home, 1.0)]
            } else {
                vec![
                    (day_start + a.morning, a.home, a.work, p),
                    (day_start + a.evening, a.work, a.home, p),
                ]
            };
            if cfg.noise > 0.0 && trip_rng.random::<f64>() < cfg.noise {
                let dest = trip_rng.random_range(0..cells);
                let out = day_start + trip_rng.random_range(6 * 3600..20 * 3600);
                plan.push((out, usize::MAX, dest, 1.0));
                plan.push((out + 2 * 3600, dest, usize::MAX, 1.0));
                plan.sort_by_key(|s| s.0);
            }
            let mut here = a.home;
            let mut away_from = a.home;
            for (depart, from, to, prob) in plan {
                // a random excursion starts and ends wherever the agent is
                let from = if from == usize::MAX { here } else { from };
                let to = if to == usize::MAX { away_from } else { to };
                if from != here || depart + TRAVEL_SECONDS >= end {
                    continue;
                }
                let t = grid.interval_of(depart)?;
                let q = if rain[t] { prob * cfg.suppression } else { prob };
                if q < 1.0 && trip_rng.random::<f64>() >= q {
                    continue;
                }
                let arrive = depart + TRAVEL_SECONDS;
                let (lon, lat) = point_in(&grid, from, &mut trip_rng);
                points[k].push(TrajPoint {
                    timestamp: depart,
                    lon,
                    lat,
                });
                let (lon, lat) = point_in(&grid, to, &mut trip_rng);
                points[k].push(TrajPoint {
                    timestamp: arrive,
                    lon,
                    lat,
                });
                trips.push(Trip {
                    agent: k,
                    depart,
                    arrive,
                    from_cell: from,
                    to_cell: to,
                });
                away_from = from;
                here = to;
            }
        }
    }
    let trajectories = TrajectoryBatch::new(
        points
            .into_iter()
            .enumerate()
            .filter(|(_, p)| !p.is_empty())
            .map(|(k, p)| Trajectory::new(format!("agent{k}"), p))
            .collect(),
    );
    Ok(SynthDataset {
        grid,
        trajectories,
        trips,
        weather,
        rain,
        holidays,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSeries {
    pub grid: GridSpec,
    pub series: Vec<FlowTensor>,
    pub weather: Vec<WeatherRecord>,
    pub rain: Vec<bool>,
    pub holidays: HolidayCalendar,
}

fn bump(hour: f64, center: f64, width: f64) -> f64 {
    let z = (hour - center) / width;
    (-0.5 * z * z).exp()
}

/// Closed-form flows without trajectory simulation:
/// `(base · profile(slot, weekday/holiday) + base · trend · t / week) · rain + noise`,
/// clamped at 0. With no noise, rain or holidays, `X_t - X_{t-week}` is the
/// constant `base · trend` per cell and channel.
pub fn generate_flow_series_direct(cfg: &SynthConfig) -> Result<SynthSeries> {
    cfg.validate()?;
    let grid = cfg.grid();
    let holidays = cfg.holiday_calendar();
    let (rain, weather) = weather(cfg);
    let cells = grid.num_cells();
    let ipd = cfg.intervals_per_day;
    let week = (7 * ipd) as f64;

    let mut rng = cfg.rng(2);
    let base: Vec<[f64; 2]> = (0..cells)
        .map(|_| {
            let level = cfg.base_level * rng.random_range(0.4..1.6);
            [level, level * rng.random_range(0.8..1.2)]
        })
        .collect();
    let residential: Vec<f64> = (0..cells).map(|_| rng.random::<f64>()).collect();

    let normal = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("valid normal");
    let mut noise_rng = cfg.rng(4);
    let a = cfg.daily_amplitude;
    let series = (0..cfg.num_intervals())
        .map(|t| {
            let day = t / ipd;
            let hour = (t % ipd) as f64 * 24.0 / ipd as f64;
            let rest = is_rest_day(cfg, day, &holidays);
            let trend = cfg.weekly_trend * t as f64 / week;
            let weather_factor = if rain[t] { cfg.suppression } else { 1.0 };
            let mut values = vec![0.0f32; 2 * cells];
            for k in 0..cells {
                let r = residential[k];
                for ch in [INFLOW, OUTFLOW] {
                    let profile = if rest {
                        1.0 + 0.5 * a * bump(hour, 14.0, 3.0)
                    } else if ch == INFLOW {
                        1.0 + a * ((1.0 - r) * bump(hour, 8.5, 1.2) + r * bump(hour, 18.5, 1.2))
                    } else {
                        1.0 + a * (r * bump(hour, 8.0, 1.2) + (1.0 - r) * bump(hour, 18.0, 1.2))
                    };
                    let mut v = base[k][ch] * (profile + trend) * weather_factor;
                    if cfg.noise > 0.0 {
                        v += normal.sample(&mut noise_rng);
                    }
                    values[ch * cells + k] = v.max(0.0) as f32;
                }
            }
            FlowTensor::from_values(t, cfg.rows, cfg.cols, values)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthSeries {
        grid,
        series,
        weather,
        rain,
        holidays,
    })
}

fn write_grid(dir: &Path, grid: &GridSpec) -> Result<()> {
    let path = dir.join("grid.json");
    let text = serde_json::to_string_pretty(grid).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn prepare(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

/// `trajectories.csv`, `weather.csv`, `holidays.txt`, `grid.json`.
pub fn write_dataset(dir: &Path, data: &SynthDataset) -> Result<()> {
    prepare(dir)?;
    save_trajectories(&dir.join("trajectories.csv"), &data.trajectories)?;
    save_weather(&dir.join("weather.csv"), &data.weather)?;
    save_holidays(&dir.join("holidays.txt"), &data.holidays)?;
    write_grid(dir, &data.grid)
}

/// `flows.bin`, `weather.csv`, `holidays.txt`, `grid.json`.
pub fn write_series(dir: &Path, data: &SynthSeries) -> Result<()> {
    prepare(dir)?;
    save_flow_series(&dir.join("flows.bin"), &data.series, data.grid.rows, data.grid.cols)?;
    save_weather(&dir.join("weather.csv"), &data.weather)?;
    save_holidays(&dir.join("holidays.txt"), &data.holidays)?;
    write_grid(dir, &data.grid)
}

/// First day offset of `date` relative to the config's start, if any.
pub fn day_offset(cfg: &SynthConfig, date: NaiveDate) -> Option<usize> {
    let start = utc(cfg.epoch_start).date_naive();
    usize::try_from((date - start).num_days()).ok()
}
