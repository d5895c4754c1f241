//! Trajectory batches and the `traj_id,timestamp,lon,lat` CSV format.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRAJECTORY_HEADER: [&str; 4] = ["traj_id", "timestamp", "lon", "lat"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajPoint {
    pub timestamp: i64,
    pub lon: f64,
    pub lat: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: String,
    /// Non-decreasing in `timestamp`.
    pub points: Vec<TrajPoint>,
}

impl Trajectory {
    /// Builds a trajectory, stably sorting the points by time.
    pub fn new(id: impl Into<String>, mut points: Vec<TrajPoint>) -> Self {
        points.sort_by_key(|p| p.timestamp);
        Trajectory { id: id.into(), points }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryBatch {
    pub trajectories: Vec<Trajectory>,
}

impl TrajectoryBatch {
    pub fn new(trajectories: Vec<Trajectory>) -> Self {
        TrajectoryBatch { trajectories }
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.iter().all(|t| t.points.is_empty())
    }

    pub fn num_points(&self) -> usize {
        self.trajectories.iter().map(|t| t.points.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimestampFormat {
    /// Decide from the first data row; every later row must agree.
    #[default]
    Auto,
    Epoch,
    Iso8601,
}

pub(crate) fn parse_iso8601(s: &str) -> Option<i64> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    None
}

fn parse_timestamp(s: &str, format: TimestampFormat) -> Option<i64> {
    match format {
        TimestampFormat::Epoch => s.parse::<i64>().ok(),
        TimestampFormat::Iso8601 => parse_iso8601(s),
        TimestampFormat::Auto => unreachable!("format resolved before row parsing"),
    }
}

pub fn parse_trajectories(path: &Path, format: TimestampFormat) -> Result<TrajectoryBatch> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_trajectories(file, path, format)
}

/// Reads trajectory CSV from any reader; `source` only labels errors.
pub fn read_trajectories<R: Read>(reader: R, source: &Path, format: TimestampFormat) -> Result<TrajectoryBatch> {
    let perr = |line: usize, message: String| Error::Parse {
        path: source.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let header = rdr.headers().map_err(|e| perr(1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != TRAJECTORY_HEADER {
        return Err(perr(
            1,
            format!("expected header {:?}, got {:?}", TRAJECTORY_HEADER.join(","), header),
        ));
    }

    let mut resolved = format;
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut trajectories: Vec<Trajectory> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            perr(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != 4 {
            return Err(perr(line, format!("expected 4 columns, found {}", record.len())));
        }
        let ts_field = &record[1];
        if resolved == TimestampFormat::Auto {
            resolved = if ts_field.parse::<i64>().is_ok() {
                TimestampFormat::Epoch
            } else {
                TimestampFormat::Iso8601
            };
        }
        let timestamp = parse_timestamp(ts_field, resolved)
            .ok_or_else(|| perr(line, format!("bad {resolved:?} timestamp {ts_field:?}")))?;
        let lon: f64 = record[2]
            .parse()
            .map_err(|_| perr(line, format!("bad longitude {:?}", &record[2])))?;
        let lat: f64 = record[3]
            .parse()
            .map_err(|_| perr(line, format!("bad latitude {:?}", &record[3])))?;
        if !lon.is_finite() || !lat.is_finite() {
            return Err(perr(line, "non-finite coordinate".into()));
        }
        let id = &record[0];
        let slot = match index.get(id) {
            Some(&k) => k,
            None => {
                index.insert(id.to_string(), trajectories.len());
                trajectories.push(Trajectory {
                    id: id.to_string(),
                    points: Vec::new(),
                });
                trajectories.len() - 1
            }
        };
        trajectories[slot].points.push(TrajPoint { timestamp, lon, lat });
    }
    for tr in &mut trajectories {
        tr.points.sort_by_key(|p| p.timestamp);
    }
    Ok(TrajectoryBatch { trajectories })
}

/// Writes the batch as CSV with integer epoch timestamps.
pub fn write_trajectories<W: Write>(writer: W, batch: &TrajectoryBatch) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let to_io = |e: csv::Error| Error::io("writing trajectory csv", e.into());
    wtr.write_record(TRAJECTORY_HEADER).map_err(to_io)?;
    for tr in &batch.trajectories {
        for p in &tr.points {
            wtr.write_record([
                tr.id.as_str(),
                &p.timestamp.to_string(),
                &p.lon.to_string(),
                &p.lat.to_string(),
            ])
            .map_err(to_io)?;
        }
    }
    wtr.flush().map_err(|e| Error::io("writing trajectory csv", e))?;
    Ok(())
}

pub fn save_trajectories(path: &Path, batch: &TrajectoryBatch) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    write_trajectories(std::io::BufWriter::new(file), batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(s: &str) -> Result<TrajectoryBatch> {
        read_trajectories(s.as_bytes(), Path::new("test.csv"), TimestampFormat::Auto)
    }

    #[test]
    fn single_trajectory() {
        let b = read("traj_id,timestamp,lon,lat\na,10,1.0,2.0\na,20,1.5,2.5\na,30,2.0,3.0\n").unwrap();
        assert_eq!(b.trajectories.len(), 1);
        assert_eq!(b.trajectories[0].points.len(), 3);
    }

    #[test]
    fn interleaved_ids_are_grouped_and_sorted() {
        let b = read("traj_id,timestamp,lon,lat\na,30,0,0\nb,5,1,1\na,10,2,2\nb,1,3,3\na,20,4,4\n").unwrap();
        assert_eq!(b.trajectories.len(), 2);
        let a: Vec<i64> = b.trajectories[0].points.iter().map(|p| p.timestamp).collect();
        let bb: Vec<i64> = b.trajectories[1].points.iter().map(|p| p.timestamp).collect();
        assert_eq!(a, vec![10, 20, 30]);
        assert_eq!(bb, vec![1, 5]);
    }

    #[test]
    fn missing_column_reports_line() {
        let err = read("traj_id,timestamp,lon,lat\na,10,1.0,2.0\na,20,1.5\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn iso_timestamps_are_detected() {
        let b = read("traj_id,timestamp,lon,lat\nx,2013-07-01T00:30:00Z,1,1\nx,2013-07-01 00:00:00,2,2\n").unwrap();
        let ts: Vec<i64> = b.trajectories[0].points.iter().map(|p| p.timestamp).collect();
        assert_eq!(ts, vec![1_372_636_800, 1_372_638_600]);
    }

    #[test]
    fn mixed_formats_in_one_file_are_rejected() {
        assert!(read("traj_id,timestamp,lon,lat\nx,100,1,1\nx,2013-07-01T00:30:00Z,2,2\n").is_err());
    }

    #[test]
    fn wrong_header_is_rejected() {
        assert!(read("id,time,x,y\na,1,1,1\n").is_err());
    }

    #[test]
    fn duplicate_timestamps_keep_input_order() {
        let b = read("traj_id,timestamp,lon,lat\na,5,1,0\na,5,2,0\na,1,3,0\n").unwrap();
        let lons: Vec<f64> = b.trajectories[0].points.iter().map(|p| p.lon).collect();
        assert_eq!(lons, vec![3.0, 1.0, 2.0]);
    }

    #[test]
    fn write_then_read_is_lossless() {
        let batch = TrajectoryBatch::new(vec![
            Trajectory::new(
                "p1",
                vec![
                    TrajPoint {
                        timestamp: 3,
                        lon: 116.123456789012,
                        lat: 39.98765432101,
                    },
                    TrajPoint {
                        timestamp: 9,
                        lon: -0.1,
                        lat: 1e-7,
                    },
                ],
            ),
            Trajectory::new(
                "p2",
                vec![TrajPoint {
                    timestamp: 4,
                    lon: 1.0 / 3.0,
                    lat: 2.0 / 3.0,
                }],
            ),
        ]);
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &batch).unwrap();
        assert_eq!(read(std::str::from_utf8(&buf).unwrap()).unwrap(), batch);
    }
}
