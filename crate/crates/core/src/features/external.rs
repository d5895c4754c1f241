//! External-factor feature vector `E_t`.
//!
//! Layout: DayOfWeek one-hot (7, Monday first), weekday flag (1 on Monday to
//! Friday), holiday flag, weather-condition one-hot (vocabulary width),
//! temperature and wind speed each min-max scaled into `[0, 1]`.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{utc, GridSpec};
use crate::trajectory::parse_iso8601;

/// Observed temperature span in the Beijing meteorology data, °C.
pub const BEIJING_TEMPERATURE_RANGE: [f64; 2] = [-24.6, 41.0];
/// Observed wind-speed span in the Beijing meteorology data, mph.
pub const BEIJING_WIND_RANGE: [f64; 2] = [0.0, 48.6];

const DOW: usize = 0;
const WEEKDAY: usize = 7;
const HOLIDAY: usize = 8;
const WEATHER: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeatherSource {
    /// Use the observation of interval `t - 1` for target `t`.
    #[default]
    Previous,
    /// Treat the record of interval `t` itself as a forecast.
    Forecast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExternalConfig {
    pub weather_vocabulary: Vec<String>,
    pub temperature_range: [f64; 2],
    pub wind_range: [f64; 2],
    pub weather_source: WeatherSource,
}

impl Default for ExternalConfig {
    fn default() -> Self {
        ExternalConfig {
            weather_vocabulary: ["Sunny", "Cloudy", "Rainy"].map(String::from).to_vec(),
            temperature_range: BEIJING_TEMPERATURE_RANGE,
            wind_range: BEIJING_WIND_RANGE,
            weather_source: WeatherSource::Previous,
        }
    }
}

impl ExternalConfig {
    pub fn feature_len(&self) -> usize {
        WEATHER + self.weather_vocabulary.len() + 2
    }

    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [
            ("temperature_range", self.temperature_range),
            ("wind_range", self.wind_range),
        ] {
            if !(lo < hi) {
                return Err(Error::Config(format!(
                    "{name} must satisfy min < max, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExternalFeatures {
    pub values: Vec<f32>,
    pub weather_width: usize,
}

impl ExternalFeatures {
    pub fn empty() -> Self {
        ExternalFeatures {
            values: Vec::new(),
            weather_width: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Monday = 0.
    pub fn day_of_week(&self) -> Option<usize> {
        self.values[DOW..DOW + 7].iter().position(|&v| v == 1.0)
    }

    pub fn is_weekday(&self) -> bool {
        self.values[WEEKDAY] == 1.0
    }

    pub fn is_weekend(&self) -> bool {
        !self.is_weekday()
    }

    pub fn is_holiday(&self) -> bool {
        self.values[HOLIDAY] == 1.0
    }

    pub fn weather_one_hot(&self) -> &[f32] {
        &self.values[WEATHER..WEATHER + self.weather_width]
    }

    pub fn temperature(&self) -> f32 {
        self.values[WEATHER + self.weather_width]
    }

    pub fn wind(&self) -> f32 {
        self.values[WEATHER + self.weather_width + 1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeatherRecord {
    pub timestamp: i64,
    /// `None` when the condition is unknown (e.g. a carried-forward record).
    pub condition: Option<String>,
    pub temperature_c: f64,
    pub wind_mph: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct HolidayCalendar {
    pub dates: HashSet<NaiveDate>,
}

impl HolidayCalendar {
    pub fn new(dates: impl IntoIterator<Item = NaiveDate>) -> Self {
        HolidayCalendar {
            dates: dates.into_iter().collect(),
        }
    }

    pub fn contains_timestamp(&self, timestamp: i64) -> bool {
        self.dates.contains(&utc(timestamp).date_naive())
    }

    pub fn sorted(&self) -> Vec<NaiveDate> {
        let mut d: Vec<_> = self.dates.iter().copied().collect();
        d.sort();
        d
    }
}

fn unit_scale(v: f64, [lo, hi]: [f64; 2]) -> f32 {
    ((v - lo) / (hi - lo)).clamp(0.0, 1.0) as f32
}

pub fn encode_external(
    timestamp: i64,
    weather: Option<&WeatherRecord>,
    holidays: &HolidayCalendar,
    cfg: &ExternalConfig,
) -> Result<ExternalFeatures> {
    let width = cfg.weather_vocabulary.len();
    let mut values = vec![0.0f32; cfg.feature_len()];
    let date = utc(timestamp);
    let dow = date.weekday().num_days_from_monday() as usize;
    values[DOW + dow] = 1.0;
    values[WEEKDAY] = if dow < 5 { 1.0 } else { 0.0 };
    values[HOLIDAY] = if holidays.contains_timestamp(timestamp) {
        1.0
    } else {
        0.0
    };
    if let Some(w) = weather {
        if let Some(label) = &w.condition {
            let k = cfg
                .weather_vocabulary
                .iter()
                .position(|c| c == label)
                .ok_or_else(|| Error::UnknownWeather {
                    label: label.clone(),
                    vocabulary: cfg.weather_vocabulary.clone(),
                })?;
            values[WEATHER + k] = 1.0;
        }
        values[WEATHER + width] = unit_scale(w.temperature_c, cfg.temperature_range);
        values[WEATHER + width + 1] = unit_scale(w.wind_mph, cfg.wind_range);
    }
    Ok(ExternalFeatures {
        values,
        weather_width: width,
    })
}

/// One feature vector per interval `0..n`.
///
/// Weather records are bucketed by interval (the latest record of an
/// interval wins). An interval without a record gets an all-zero weather
/// one-hot and the continuous readings of the last earlier record.
pub fn external_series(
    grid: &GridSpec,
    n: usize,
    weather: &[WeatherRecord],
    holidays: &HolidayCalendar,
    cfg: &ExternalConfig,
) -> Result<Vec<ExternalFeatures>> {
    cfg.validate()?;
    let mut by_interval: BTreeMap<usize, &WeatherRecord> = BTreeMap::new();
    for w in weather {
        if w.timestamp < grid.epoch_start {
            continue;
        }
        let t = grid.interval_of(w.timestamp)?;
        match by_interval.get(&t) {
            Some(prev) if prev.timestamp > w.timestamp => {}
            _ => {
                by_interval.insert(t, w);
            }
        }
    }
    (0..n)
        .map(|t| {
            let source = match cfg.weather_source {
                WeatherSource::Previous => t.checked_sub(1),
                WeatherSource::Forecast => Some(t),
            };
            let record = source.and_then(|s| match by_interval.get(&s) {
                Some(w) => Some((*w).clone()),
                None => by_interval.range(..s).next_back().map(|(_, w)| WeatherRecord {
                    condition: None,
                    ..(*w).clone()
                }),
            });
            encode_external(grid.interval_start(t), record.as_ref(), holidays, cfg)
        })
        .collect()
}

pub fn read_weather<R: Read>(reader: R, source: &Path) -> Result<Vec<WeatherRecord>> {
    let perr = |line: usize, message: String| Error::Parse {
        path: source.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| perr(1, e.to_string()))?.clone();
    let expected = ["timestamp", "condition", "temperature_c", "wind_mph"];
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(perr(1, format!("expected header {}", expected.join(","))));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| perr(e.position().map(|p| p.line() as usize).unwrap_or(0), e.to_string()))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != 4 {
            return Err(perr(line, format!("expected 4 columns, found {}", rec.len())));
        }
        let timestamp = rec[0]
            .parse::<i64>()
            .ok()
            .or_else(|| parse_iso8601(&rec[0]))
            .ok_or_else(|| perr(line, format!("bad timestamp {:?}", &rec[0])))?;
        let condition = (!rec[1].is_empty()).then(|| rec[1].to_string());
        let num = |k: usize, what: &str| {
            rec[k]
                .parse::<f64>()
                .map_err(|_| perr(line, format!("bad {what} {:?}", &rec[k])))
        };
        out.push(WeatherRecord {
            timestamp,
            condition,
            temperature_c: num(2, "temperature")?,
            wind_mph: num(3, "wind speed")?,
        });
    }
    Ok(out)
}

pub fn load_weather(path: &Path) -> Result<Vec<WeatherRecord>> {
    let f = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_weather(f, path)
}

pub fn save_weather(path: &Path, records: &[WeatherRecord]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(f);
    let ctx = |e| Error::io("writing weather csv", e);
    writeln!(w, "timestamp,condition,temperature_c,wind_mph").map_err(ctx)?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{}",
            r.timestamp,
            r.condition.as_deref().unwrap_or(""),
            r.temperature_c,
            r.wind_mph
        )
        .map_err(ctx)?;
    }
    w.flush().map_err(ctx)
}

pub fn read_holidays<R: Read>(reader: R, source: &Path) -> Result<HolidayCalendar> {
    let mut dates = HashSet::new();
    for (k, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", source.display()), e))?;
        let s = line.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        let d = NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|_| Error::Parse {
            path: source.to_path_buf(),
            line: k + 1,
            message: format!("bad date {s:?}, expected YYYY-MM-DD"),
        })?;
        dates.insert(d);
    }
    Ok(HolidayCalendar { dates })
}

pub fn load_holidays(path: &Path) -> Result<HolidayCalendar> {
    let f = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_holidays(f, path)
}

pub fn save_holidays(path: &Path, cal: &HolidayCalendar) -> Result<()> {
    let mut s = String::new();
    for d in cal.sorted() {
        s.push_str(&d.format("%Y-%m-%d").to_string());
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sixteen() -> ExternalConfig {
        let mut vocab = vec!["Sunny".to_string(), "Rainy".to_string()];
        vocab.extend((2..16).map(|k| format!("Condition{k}")));
        ExternalConfig {
            weather_vocabulary: vocab,
            ..ExternalConfig::default()
        }
    }

    // 2013-07-02 00:00 UTC, a Tuesday
    const TUESDAY: i64 = 1_372_723_200;
    // 2013-07-06, a Saturday
    const SATURDAY: i64 = TUESDAY + 4 * 86_400;

    #[test]
    fn tuesday_sunny_at_range_minimum() {
        let cfg = sixteen();
        let w = WeatherRecord {
            timestamp: TUESDAY,
            condition: Some("Sunny".into()),
            temperature_c: -24.6,
            wind_mph: 0.0,
        };
        let e = encode_external(TUESDAY + 3600, Some(&w), &HolidayCalendar::default(), &cfg).unwrap();
        assert_eq!(e.len(), 7 + 1 + 1 + 16 + 1 + 1);
        assert_eq!(e.day_of_week(), Some(1));
        assert_eq!(&e.values[0..7], &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(e.is_weekday());
        assert!(!e.is_holiday());
        assert_eq!(e.weather_one_hot()[0], 1.0);
        assert_eq!(e.weather_one_hot().iter().sum::<f32>(), 1.0);
        assert_eq!(e.temperature(), 0.0);
        assert_eq!(e.wind(), 0.0);
    }

    #[test]
    fn holiday_saturday_sets_both_flags() {
        let cal = HolidayCalendar::new([NaiveDate::from_ymd_opt(2013, 7, 6).unwrap()]);
        let e = encode_external(SATURDAY + 100, None, &cal, &sixteen()).unwrap();
        assert!(e.is_holiday());
        assert!(e.is_weekend());
        assert_eq!(e.values[WEEKDAY], 0.0);
        assert!(e.weather_one_hot().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unknown_weather_lists_vocabulary() {
        let w = WeatherRecord {
            timestamp: 0,
            condition: Some("Hail".into()),
            temperature_c: 0.0,
            wind_mph: 0.0,
        };
        match encode_external(
            TUESDAY,
            Some(&w),
            &HolidayCalendar::default(),
            &ExternalConfig::default(),
        ) {
            Err(Error::UnknownWeather { label, vocabulary }) => {
                assert_eq!(label, "Hail");
                assert_eq!(vocabulary.len(), 3);
            }
            other => panic!("expected unknown weather, got {other:?}"),
        }
    }

    #[test]
    fn continuous_features_stay_in_unit_interval() {
        let cfg = ExternalConfig::default();
        for (temp, wind) in [(41.0, 48.6), (100.0, -3.0), (8.2, 24.3)] {
            let w = WeatherRecord {
                timestamp: 0,
                condition: None,
                temperature_c: temp,
                wind_mph: wind,
            };
            let e = encode_external(TUESDAY, Some(&w), &HolidayCalendar::default(), &cfg).unwrap();
            assert!((0.0..=1.0).contains(&e.temperature()));
            assert!((0.0..=1.0).contains(&e.wind()));
        }
        let w = WeatherRecord {
            timestamp: 0,
            condition: None,
            temperature_c: 41.0,
            wind_mph: 48.6,
        };
        let e = encode_external(TUESDAY, Some(&w), &HolidayCalendar::default(), &cfg).unwrap();
        assert_eq!((e.temperature(), e.wind()), (1.0, 1.0));
    }

    fn grid() -> GridSpec {
        GridSpec {
            lon_min: 0.0,
            lon_max: 1.0,
            lat_min: 0.0,
            lat_max: 1.0,
            rows: 1,
            cols: 1,
            interval_seconds: 3600,
            epoch_start: TUESDAY,
        }
    }

    #[test]
    fn series_uses_previous_interval_and_carries_forward() {
        let cfg = ExternalConfig::default();
        let weather = vec![
            WeatherRecord {
                timestamp: TUESDAY + 10,
                condition: Some("Rainy".into()),
                temperature_c: 8.2,
                wind_mph: 24.3,
            },
            WeatherRecord {
                timestamp: TUESDAY + 3 * 3600,
                condition: Some("Sunny".into()),
                temperature_c: 41.0,
                wind_mph: 0.0,
            },
        ];
        let ext = external_series(&grid(), 5, &weather, &HolidayCalendar::default(), &cfg).unwrap();
        // t = 0 has no previous interval
        assert!(ext[0].weather_one_hot().iter().all(|&v| v == 0.0));
        assert_eq!(ext[0].temperature(), 0.0);
        // t = 1 sees the rain of interval 0
        assert_eq!(ext[1].weather_one_hot(), &[0.0, 0.0, 1.0]);
        // t = 2: interval 1 missing, continuous readings carried forward
        assert!(ext[2].weather_one_hot().iter().all(|&v| v == 0.0));
        assert_eq!(ext[2].temperature(), ext[1].temperature());
        assert_eq!(ext[4].weather_one_hot(), &[1.0, 0.0, 0.0]);

        let forecast = ExternalConfig {
            weather_source: WeatherSource::Forecast,
            ..cfg
        };
        let ext = external_series(&grid(), 5, &weather, &HolidayCalendar::default(), &forecast).unwrap();
        assert_eq!(ext[0].weather_one_hot(), &[0.0, 0.0, 1.0]);
        assert_eq!(ext[3].weather_one_hot(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn weather_and_holiday_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let weather = vec![
            WeatherRecord {
                timestamp: 5,
                condition: Some("Rainy".into()),
                temperature_c: -3.25,
                wind_mph: 1.5,
            },
            WeatherRecord {
                timestamp: 9,
                condition: None,
                temperature_c: 0.1,
                wind_mph: 0.0,
            },
        ];
        let p = dir.path().join("w.csv");
        save_weather(&p, &weather).unwrap();
        assert_eq!(load_weather(&p).unwrap(), weather);

        let cal = HolidayCalendar::new([
            NaiveDate::from_ymd_opt(2014, 1, 1).unwrap(),
            NaiveDate::from_ymd_opt(2014, 5, 1).unwrap(),
        ]);
        let p = dir.path().join("h.txt");
        save_holidays(&p, &cal).unwrap();
        assert_eq!(load_holidays(&p).unwrap(), cal);
        std::fs::write(&p, "2014-01-01\nJan 2\n").unwrap();
        assert!(matches!(load_holidays(&p), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn feature_length_is_constant() {
        let cfg = sixteen();
        let cal = HolidayCalendar::default();
        for k in 0..50 {
            let e = encode_external(TUESDAY + k * 7919, None, &cal, &cfg).unwrap();
            assert_eq!(e.len(), cfg.feature_len());
            assert_eq!(e.values[0..7].iter().sum::<f32>(), 1.0);
        }
    }

    proptest::proptest! {
        #[test]
        fn encoding_is_well_formed(
            ts in 0i64..2_000_000_000,
            temp in -100.0f64..100.0,
            wind in -10.0f64..200.0,
            cond in proptest::option::of(0usize..16),
            holiday in proptest::bool::ANY,
        ) {
            let cfg = sixteen();
            let w = cond.map(|k| WeatherRecord {
                timestamp: ts,
                condition: Some(cfg.weather_vocabulary[k].clone()),
                temperature_c: temp,
                wind_mph: wind,
            });
            let cal = if holiday {
                HolidayCalendar::new([crate::grid::utc(ts).date_naive()])
            } else {
                HolidayCalendar::default()
            };
            let e = encode_external(ts, w.as_ref(), &cal, &cfg).unwrap();
            proptest::prop_assert_eq!(e.values[0..7].iter().filter(|&&v| v == 1.0).count(), 1);
            proptest::prop_assert_eq!(e.is_holiday(), holiday);
            proptest::prop_assert_eq!(e.is_weekday(), e.day_of_week().unwrap() < 5);
            proptest::prop_assert!(e.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let hot = e.weather_one_hot().iter().filter(|&&v| v == 1.0).count();
            proptest::prop_assert_eq!(hot, usize::from(cond.is_some()));
        }
    }
}
