//! City bounding box, its I×J cell partition, and the time-interval clock.
//!
//! Rows run along latitude (row 0 starts at `lat_min`), columns along
//! longitude (column 0 starts at `lon_min`). Every cell is half-open,
//! `[lat_i, lat_{i+1}) × [lon_j, lon_{j+1})`, except the last row and
//! column which also include `lat_max` / `lon_max`.

use chrono::{DateTime, Datelike, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
    pub rows: usize,
    pub cols: usize,
    pub interval_seconds: i64,
    /// Unix seconds of the start of interval 0.
    pub epoch_start: i64,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.lon_min, self.lon_max, self.lat_min, self.lat_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidGrid("bounding box must be finite".into()));
        }
        if self.lon_min >= self.lon_max {
            return Err(Error::InvalidGrid(format!(
                "lon_min {} must be < lon_max {}",
                self.lon_min, self.lon_max
            )));
        }
        if self.lat_min >= self.lat_max {
            return Err(Error::InvalidGrid(format!(
                "lat_min {} must be < lat_max {}",
                self.lat_min, self.lat_max
            )));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidGrid(format!(
                "grid must be at least 1x1, got {}x{}",
                self.rows, self.cols
            )));
        }
        if self.interval_seconds <= 0 {
            return Err(Error::InvalidGrid(format!(
                "interval_seconds must be positive, got {}",
                self.interval_seconds
            )));
        }
        Ok(())
    }

    /// Southern edge of row `i`; `row_edge(rows)` is exactly `lat_max`.
    pub fn row_edge(&self, i: usize) -> f64 {
        if i >= self.rows {
            return self.lat_max;
        }
        self.lat_min + (self.lat_max - self.lat_min) * (i as f64) / (self.rows as f64)
    }

    /// Western edge of column `j`; `col_edge(cols)` is exactly `lon_max`.
    pub fn col_edge(&self, j: usize) -> f64 {
        if j >= self.cols {
            return self.lon_max;
        }
        self.lon_min + (self.lon_max - self.lon_min) * (j as f64) / (self.cols as f64)
    }

    /// Cell `(row, col)` containing the point, or `None` outside the map.
    pub fn cell_of(&self, lon: f64, lat: f64) -> Option<(usize, usize)> {
        if !(lon >= self.lon_min && lon <= self.lon_max && lat >= self.lat_min && lat <= self.lat_max) {
            return None;
        }
        let i = locate(lat, self.lat_min, self.lat_max, self.rows, |k| self.row_edge(k));
        let j = locate(lon, self.lon_min, self.lon_max, self.cols, |k| self.col_edge(k));
        Some((i, j))
    }

    /// Flat index `i * cols + j` of the cell containing the point.
    pub fn cell_index(&self, lon: f64, lat: f64) -> Option<usize> {
        self.cell_of(lon, lat).map(|(i, j)| i * self.cols + j)
    }

    pub fn num_cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn interval_of(&self, timestamp: i64) -> Result<usize> {
        if timestamp < self.epoch_start {
            return Err(Error::BeforeEpoch {
                timestamp,
                epoch_start: self.epoch_start,
            });
        }
        Ok(((timestamp - self.epoch_start) / self.interval_seconds) as usize)
    }

    pub fn interval_start(&self, t: usize) -> i64 {
        self.epoch_start + t as i64 * self.interval_seconds
    }

    pub fn intervals_per_day(&self) -> usize {
        (86_400 / self.interval_seconds).max(1) as usize
    }

    /// Calendar slot of interval `t`: (day of week with Monday = 0, slot within the day).
    pub fn calendar_slot(&self, t: usize) -> (u32, u32) {
        let dt = utc(self.interval_start(t));
        let secs = dt.num_seconds_from_midnight() as i64;
        (
            dt.weekday().num_days_from_monday(),
            (secs / self.interval_seconds) as u32,
        )
    }
}

fn locate(v: f64, lo: f64, hi: f64, n: usize, edge: impl Fn(usize) -> f64) -> usize {
    let guess = ((v - lo) / (hi - lo) * n as f64).floor();
    let mut k = if guess.is_finite() && guess > 0.0 {
        (guess as usize).min(n - 1)
    } else {
        0
    };
    // the float guess can land one cell off near an edge
    while k > 0 && v < edge(k) {
        k -= 1;
    }
    while k + 1 < n && v >= edge(k + 1) {
        k += 1;
    }
    k
}

pub(crate) fn utc(timestamp: i64) -> DateTime<Utc> {
    DateTime::from_timestamp(timestamp, 0).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(rows: usize, cols: usize) -> GridSpec {
        GridSpec {
            lon_min: 116.0,
            lon_max: 117.0,
            lat_min: 39.5,
            lat_max: 40.5,
            rows,
            cols,
            interval_seconds: 1800,
            epoch_start: 1_372_636_800,
        }
    }

    #[test]
    fn center_of_two_by_two_is_cell_one_one() {
        let g = grid(2, 2);
        assert_eq!(g.cell_of(116.5, 40.0), Some((1, 1)));
    }

    #[test]
    fn outside_points_have_no_cell() {
        let g = grid(2, 2);
        assert_eq!(g.cell_of(115.99, 40.0), None);
        assert_eq!(g.cell_of(116.5, 40.6), None);
        assert_eq!(g.cell_of(f64::NAN, 40.0), None);
    }

    #[test]
    fn max_edges_belong_to_last_cell() {
        let g = grid(3, 4);
        assert_eq!(g.cell_of(117.0, 40.5), Some((2, 3)));
        assert_eq!(g.cell_of(116.0, 39.5), Some((0, 0)));
    }

    #[test]
    fn cell_of_matches_exhaustive_scan() {
        let g = grid(7, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 0..1000 {
            // mix in exact edges so the half-open rule is exercised
            let (lon, lat) = if n % 10 == 0 {
                (g.col_edge(rng.random_range(0..=5)), g.row_edge(rng.random_range(0..=7)))
            } else {
                (rng.random_range(115.9..117.1), rng.random_range(39.4..40.6))
            };
            let mut expected = None;
            for i in 0..7 {
                for j in 0..5 {
                    let lat_lo = 39.5 + (40.5 - 39.5) * i as f64 / 7.0;
                    let lat_hi = if i == 6 {
                        40.5
                    } else {
                        39.5 + (40.5 - 39.5) * (i + 1) as f64 / 7.0
                    };
                    let lon_lo = 116.0 + (117.0 - 116.0) * j as f64 / 5.0;
                    let lon_hi = if j == 4 {
                        117.0
                    } else {
                        116.0 + (117.0 - 116.0) * (j + 1) as f64 / 5.0
                    };
                    let in_lat = lat >= lat_lo && (lat < lat_hi || (i == 6 && lat <= lat_hi));
                    let in_lon = lon >= lon_lo && (lon < lon_hi || (j == 4 && lon <= lon_hi));
                    if in_lat && in_lon {
                        assert!(expected.is_none(), "two cells claim ({lon}, {lat})");
                        expected = Some((i, j));
                    }
                }
            }
            assert_eq!(g.cell_of(lon, lat), expected, "point ({lon}, {lat})");
        }
    }

    #[test]
    fn interval_boundaries() {
        let g = grid(2, 2);
        assert_eq!(g.interval_of(g.epoch_start).unwrap(), 0);
        assert_eq!(g.interval_of(g.epoch_start + 1800).unwrap(), 1);
        assert_eq!(g.interval_of(g.epoch_start + 1799).unwrap(), 0);
        assert!(matches!(
            g.interval_of(g.epoch_start - 1),
            Err(Error::BeforeEpoch { .. })
        ));
    }

    #[test]
    fn interval_of_matches_integer_division() {
        let g = grid(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let offset: i64 = rng.random_range(0..10_000_000);
            assert_eq!(g.interval_of(g.epoch_start + offset).unwrap() as i64, offset / 1800);
        }
    }

    #[test]
    fn validation_rejects_bad_grids() {
        let mut g = grid(2, 2);
        g.rows = 0;
        assert!(g.validate().is_err());
        let mut g = grid(2, 2);
        g.lon_max = g.lon_min;
        assert!(g.validate().is_err());
        let mut g = grid(2, 2);
        g.interval_seconds = 0;
        assert!(g.validate().is_err());
        assert!(grid(2, 2).validate().is_ok());
    }

    #[test]
    fn calendar_slot_of_known_date() {
        // 2013-07-01 00:00 UTC was a Monday
        let g = grid(2, 2);
        assert_eq!(g.calendar_slot(0), (0, 0));
        assert_eq!(g.calendar_slot(48 + 19), (1, 19));
        assert_eq!(g.intervals_per_day(), 48);
    }

    proptest::proptest! {
        #[test]
        fn inside_points_land_between_their_cell_edges(
            rows in 1usize..9, cols in 1usize..9, fx in 0.0f64..=1.0, fy in 0.0f64..=1.0,
        ) {
            let g = grid(rows, cols);
            let lon = g.lon_min + fx * (g.lon_max - g.lon_min);
            let lat = g.lat_min + fy * (g.lat_max - g.lat_min);
            let (i, j) = g.cell_of(lon, lat).unwrap();
            proptest::prop_assert!(i < rows && j < cols);
            proptest::prop_assert!(g.row_edge(i) <= lat && (lat < g.row_edge(i + 1) || i + 1 == rows));
            proptest::prop_assert!(g.col_edge(j) <= lon && (lon < g.col_edge(j + 1) || j + 1 == cols));
        }

        #[test]
        fn interval_start_inverts_interval_of(t in 0usize..100_000, offset in 0i64..1800) {
            let g = grid(2, 2);
            let ts = g.interval_start(t) + offset.min(g.interval_seconds - 1);
            proptest::prop_assert_eq!(g.interval_of(ts).unwrap(), t);
        }
    }
}
