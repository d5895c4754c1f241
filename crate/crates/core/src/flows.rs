//! Inflow/outflow tensors per time interval and the binary flow-series file.
//!
//! A transition is a pair of consecutive points `(a, b)` of one trajectory.
//! It is attributed to the interval of `b`. When `a` and `b` lie in
//! different cells, `b`'s cell (if any) gains one inflow and `a`'s cell (if
//! any) gains one outflow. Points outside the map have no cell but still
//! break up the sequence.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::trajectory::{TrajPoint, TrajectoryBatch};

pub const INFLOW: usize = 0;
pub const OUTFLOW: usize = 1;

/// Observation `X_t`: shape `2 × rows × cols`, channel 0 inflow, channel 1 outflow.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTensor {
    pub t: usize,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

impl FlowTensor {
    pub fn zeros(t: usize, rows: usize, cols: usize) -> Self {
        FlowTensor {
            t,
            rows,
            cols,
            values: vec![0.0; 2 * rows * cols],
        }
    }

    pub fn from_values(t: usize, rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != 2 * rows * cols {
            return Err(Error::shape(format!(
                "flow tensor 2x{rows}x{cols} needs {} values, got {}",
                2 * rows * cols,
                values.len()
            )));
        }
        Ok(FlowTensor { t, rows, cols, values })
    }

    #[inline]
    pub fn index(&self, channel: usize, i: usize, j: usize) -> usize {
        (channel * self.rows + i) * self.cols + j
    }

    pub fn get(&self, channel: usize, i: usize, j: usize) -> f32 {
        self.values[self.index(channel, i, j)]
    }

    pub fn channel(&self, channel: usize) -> &[f32] {
        let n = self.rows * self.cols;
        &self.values[channel * n..(channel + 1) * n]
    }

    pub fn total(&self, channel: usize) -> f64 {
        self.channel(channel).iter().map(|&v| v as f64).sum()
    }

    pub fn same_shape(&self, other: &FlowTensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

fn add_transition(grid: &GridSpec, from: &TrajPoint, to: &TrajPoint, inflow: &mut [f32], outflow: &mut [f32]) {
    let a = grid.cell_index(from.lon, from.lat);
    let b = grid.cell_index(to.lon, to.lat);
    if a == b {
        return;
    }
    if let Some(b) = b {
        inflow[b] += 1.0;
    }
    if let Some(a) = a {
        outflow[a] += 1.0;
    }
}

/// Flows of interval `t`: every transition whose later point falls in `t`.
pub fn compute_flows(batch: &TrajectoryBatch, grid: &GridSpec, t: usize) -> FlowTensor {
    let mut out = FlowTensor::zeros(t, grid.rows, grid.cols);
    let cells = grid.num_cells();
    let start = grid.interval_start(t);
    let end = grid.interval_start(t + 1);
    let (inflow, outflow) = out.values.split_at_mut(cells);
    for tr in &batch.trajectories {
        let pts = &tr.points;
        let lo = pts.partition_point(|p| p.timestamp < start);
        let hi = pts.partition_point(|p| p.timestamp < end);
        // the point just before the slice carries the transition into it
        for k in lo.max(1)..hi {
            add_transition(grid, &pts[k - 1], &pts[k], inflow, outflow);
        }
    }
    out
}

/// Flow tensors for intervals `0..=last`, where `last` is the latest interval
/// holding any point at or after the epoch. Empty intervals are all-zero.
pub fn compute_flow_series(batch: &TrajectoryBatch, grid: &GridSpec) -> Result<Vec<FlowTensor>> {
    grid.validate()?;
    let mut last: Option<usize> = None;
    let mut any_inside = false;
    for p in batch.trajectories.iter().flat_map(|tr| tr.points.iter()) {
        if p.timestamp < grid.epoch_start {
            continue;
        }
        let t = grid.interval_of(p.timestamp)?;
        last = Some(last.map_or(t, |l| l.max(t)));
        any_inside |= grid.cell_of(p.lon, p.lat).is_some();
    }
    let last = match last {
        Some(l) if any_inside => l,
        _ => {
            return Err(Error::EmptyDataset(
                "no trajectory point lies inside the map after the epoch start".into(),
            ))
        }
    };

    let cells = grid.num_cells();
    let mut series: Vec<FlowTensor> = (0..=last).map(|t| FlowTensor::zeros(t, grid.rows, grid.cols)).collect();
    for tr in &batch.trajectories {
        for pair in tr.points.windows(2) {
            if pair[1].timestamp < grid.epoch_start {
                continue;
            }
            let t = grid.interval_of(pair[1].timestamp)?;
            let (inflow, outflow) = series[t].values.split_at_mut(cells);
            add_transition(grid, &pair[0], &pair[1], inflow, outflow);
        }
    }
    Ok(series)
}

const FLOW_MAGIC: &[u8; 4] = b"CFLW";
const FLOW_VERSION: u32 = 1;

/// Serializes a series: `"CFLW"`, version, n, I, J (u32 LE), then f32 LE values
/// in (t, channel, i, j) order.
pub fn write_flow_series<W: Write>(mut w: W, series: &[FlowTensor], rows: usize, cols: usize) -> Result<()> {
    let ctx = |e| Error::io("writing flow series", e);
    for x in series {
        if x.rows != rows || x.cols != cols {
            return Err(Error::shape(format!(
                "series mixes grid {}x{} with {rows}x{cols}",
                x.rows, x.cols
            )));
        }
    }
    w.write_all(FLOW_MAGIC).map_err(ctx)?;
    for v in [FLOW_VERSION, series.len() as u32, rows as u32, cols as u32] {
        w.write_all(&v.to_le_bytes()).map_err(ctx)?;
    }
    for x in series {
        for v in &x.values {
            w.write_all(&v.to_le_bytes()).map_err(ctx)?;
        }
    }
    w.flush().map_err(ctx)
}

pub fn read_flow_series<R: Read>(mut r: R) -> Result<(Vec<FlowTensor>, usize, usize)> {
    let mut header = [0u8; 20];
    r.read_exact(&mut header)
        .map_err(|_| Error::Format("flow series header truncated".into()))?;
    if &header[0..4] != FLOW_MAGIC {
        return Err(Error::Format("not a flow series file (bad magic)".into()));
    }
    let word = |k: usize| u32::from_le_bytes(header[4 + 4 * k..8 + 4 * k].try_into().unwrap());
    let version = word(0);
    if version != FLOW_VERSION {
        return Err(Error::Format(format!("unsupported flow series version {version}")));
    }
    let (n, rows, cols) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let per = 2 * rows * cols;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::io("reading flow series", e))?;
    if bytes.len() != n * per * 4 {
        return Err(Error::Format(format!(
            "flow series body has {} bytes, header implies {}",
            bytes.len(),
            n * per * 4
        )));
    }
    let series = bytes
        .chunks_exact(per * 4)
        .enumerate()
        .map(|(t, chunk)| FlowTensor {
            t,
            rows,
            cols,
            values: chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        })
        .collect();
    Ok((series, rows, cols))
}

pub fn save_flow_series(path: &Path, series: &[FlowTensor], rows: usize, cols: usize) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    write_flow_series(BufWriter::new(file), series, rows, cols)
}

pub fn load_flow_series(path: &Path) -> Result<(Vec<FlowTensor>, usize, usize)> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_flow_series(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::Trajectory;
    use proptest::prelude::*;

    fn unit_grid(rows: usize, cols: usize) -> GridSpec {
        GridSpec {
            lon_min: 0.0,
            lon_max: cols as f64,
            lat_min: 0.0,
            lat_max: rows as f64,
            rows,
            cols,
            interval_seconds: 100,
            epoch_start: 0,
        }
    }

    fn pt(timestamp: i64, lon: f64, lat: f64) -> TrajPoint {
        TrajPoint { timestamp, lon, lat }
    }

    /// Literal reading of the inflow/outflow definition on the per-interval
    /// sequence (carry-in point prepended).
    fn oracle(batch: &TrajectoryBatch, grid: &GridSpec, t: usize) -> FlowTensor {
        let mut out = FlowTensor::zeros(t, grid.rows, grid.cols);
        let start = grid.interval_start(t);
        let end = grid.interval_start(t + 1);
        for tr in &batch.trajectories {
            let mut seq: Vec<TrajPoint> = Vec::new();
            for (k, p) in tr.points.iter().enumerate() {
                if p.timestamp >= start && p.timestamp < end {
                    if seq.is_empty() && k > 0 {
                        seq.push(tr.points[k - 1]);
                    }
                    seq.push(*p);
                }
            }
            for i in 0..grid.rows {
                for j in 0..grid.cols {
                    let inside = |g: &TrajPoint| grid.cell_of(g.lon, g.lat) == Some((i, j));
                    // inflow: k > 1 (1-based), g_{k-1} not in cell, g_k in cell
                    for k in 1..seq.len() {
                        if !inside(&seq[k - 1]) && inside(&seq[k]) {
                            out.values[(i * grid.cols) + j] += 1.0;
                        }
                    }
                    // outflow: g_k in cell, g_{k+1} not in cell
                    for k in 0..seq.len().saturating_sub(1) {
                        if inside(&seq[k]) && !inside(&seq[k + 1]) {
                            out.values[grid.rows * grid.cols + i * grid.cols + j] += 1.0;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn two_region_example() {
        // regions r1 | r2 | r3 side by side; r2 is column 1
        let grid = unit_grid(1, 3);
        let phones = TrajectoryBatch::new(vec![
            Trajectory::new("a", vec![pt(0, 0.5, 0.5), pt(10, 1.5, 0.5)]),
            Trajectory::new("b", vec![pt(0, 2.5, 0.5), pt(10, 1.5, 0.5)]),
            Trajectory::new("c", vec![pt(0, 0.2, 0.5), pt(10, 1.2, 0.5), pt(20, 1.7, 0.5)]),
            Trajectory::new("d", vec![pt(0, 1.5, 0.5), pt(10, 2.5, 0.5)]),
        ]);
        let f = compute_flows(&phones, &grid, 0);
        assert_eq!((f.get(INFLOW, 0, 1), f.get(OUTFLOW, 0, 1)), (3.0, 1.0));

        let vehicles = TrajectoryBatch::new(vec![
            Trajectory::new("v1", vec![pt(0, 1.1, 0.5), pt(10, 0.5, 0.5)]),
            Trajectory::new("v2", vec![pt(0, 1.5, 0.5), pt(10, 1.9, 0.5), pt(20, 2.5, 0.5)]),
            Trajectory::new("v3", vec![pt(0, 1.5, 0.5), pt(10, 5.0, 0.5)]),
        ]);
        let f = compute_flows(&vehicles, &grid, 0);
        assert_eq!((f.get(INFLOW, 0, 1), f.get(OUTFLOW, 0, 1)), (0.0, 3.0));
    }

    #[test]
    fn empty_batch_gives_zeros() {
        let grid = unit_grid(3, 2);
        let f = compute_flows(&TrajectoryBatch::default(), &grid, 4);
        assert_eq!(f.values, vec![0.0; 12]);
        assert!(matches!(
            compute_flow_series(&TrajectoryBatch::default(), &grid),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn same_cell_and_last_point_contribute_nothing() {
        let grid = unit_grid(2, 2);
        let b = TrajectoryBatch::new(vec![Trajectory::new(
            "a",
            vec![pt(0, 0.1, 0.1), pt(1, 0.9, 0.9), pt(2, 0.5, 0.5)],
        )]);
        assert!(compute_flows(&b, &grid, 0).values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn series_over_three_intervals_matches_per_interval_flows() {
        let grid = unit_grid(2, 2);
        let b = TrajectoryBatch::new(vec![Trajectory::new(
            "a",
            vec![
                pt(5, 0.5, 0.5),
                pt(50, 1.5, 0.5),
                pt(120, 1.5, 1.5),
                pt(150, 0.5, 1.5),
                pt(210, 0.5, 0.5),
            ],
        )]);
        let series = compute_flow_series(&b, &grid).unwrap();
        assert_eq!(series.len(), 3);
        for (t, x) in series.iter().enumerate() {
            assert_eq!(*x, compute_flows(&b, &grid, t));
            assert_eq!(*x, oracle(&b, &grid, t));
        }
        // the 50 -> 120 transition belongs to interval 1
        assert_eq!(series[1].get(INFLOW, 1, 1), 1.0);
        assert_eq!(series[1].get(OUTFLOW, 0, 1), 1.0);
    }

    #[test]
    fn single_interval_series() {
        let grid = unit_grid(2, 2);
        let b = TrajectoryBatch::new(vec![Trajectory::new("a", vec![pt(1, 0.5, 0.5), pt(99, 1.5, 1.5)])]);
        assert_eq!(compute_flow_series(&b, &grid).unwrap().len(), 1);
    }

    #[test]
    fn outside_points_count_as_leaving_and_entering() {
        let grid = unit_grid(1, 1);
        let b = TrajectoryBatch::new(vec![Trajectory::new(
            "a",
            vec![pt(0, 0.5, 0.5), pt(1, 9.0, 9.0), pt(2, 0.5, 0.5)],
        )]);
        let f = compute_flows(&b, &grid, 0);
        assert_eq!(f.values, vec![1.0, 1.0]);
    }

    fn arb_batch(rows: usize, cols: usize) -> impl Strategy<Value = TrajectoryBatch> {
        let point =
            (0i64..400, -0.5..cols as f64 + 0.5, -0.5..rows as f64 + 0.5).prop_map(|(t, lon, lat)| pt(t, lon, lat));
        prop::collection::vec(prop::collection::vec(point, 0..12), 0..50).prop_map(|trs| {
            TrajectoryBatch::new(
                trs.into_iter()
                    .enumerate()
                    .map(|(k, pts)| Trajectory::new(k.to_string(), pts))
                    .collect(),
            )
        })
    }

    proptest! {
        #[test]
        fn flows_match_pairwise_oracle(batch in arb_batch(4, 4), t in 0usize..4) {
            let grid = unit_grid(4, 4);
            prop_assert_eq!(compute_flows(&batch, &grid, t), oracle(&batch, &grid, t));
        }

        #[test]
        fn permutation_invariant_and_additive(batch in arb_batch(3, 3), other in arb_batch(3, 3)) {
            let grid = unit_grid(3, 3);
            let mut rev = batch.clone();
            rev.trajectories.reverse();
            let mut joined = batch.clone();
            joined.trajectories.extend(other.trajectories.clone());
            for t in 0..4 {
                let a = compute_flows(&batch, &grid, t);
                let b = compute_flows(&other, &grid, t);
                prop_assert_eq!(&a, &compute_flows(&rev, &grid, t));
                let sum: Vec<f32> = a.values.iter().zip(&b.values).map(|(x, y)| x + y).collect();
                prop_assert_eq!(sum, compute_flows(&joined, &grid, t).values);
            }
        }

        #[test]
        fn flow_file_round_trip(values in prop::collection::vec(any::<f32>(), 24)) {
            let series: Vec<FlowTensor> = values
                .chunks(12)
                .enumerate()
                .map(|(t, v)| FlowTensor::from_values(t, 2, 3, v.to_vec()).unwrap())
                .collect();
            let mut buf = Vec::new();
            write_flow_series(&mut buf, &series, 2, 3).unwrap();
            let (back, rows, cols) = read_flow_series(buf.as_slice()).unwrap();
            prop_assert_eq!((rows, cols), (2, 3));
            for (a, b) in series.iter().zip(&back) {
                let bits_a: Vec<u32> = a.values.iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u32> = b.values.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }
    }

    #[test]
    fn flow_file_layout_is_exact() {
        let x = FlowTensor::from_values(0, 1, 1, vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_flow_series(&mut buf, &[x], 1, 1).unwrap();
        let mut expected = b"CFLW".to_vec();
        for w in [1u32, 1, 1, 1] {
            expected.extend(w.to_le_bytes());
        }
        expected.extend(1.0f32.to_le_bytes());
        expected.extend(2.0f32.to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn flow_file_rejects_bad_magic_and_truncation() {
        let mut buf = Vec::new();
        write_flow_series(&mut buf, &[FlowTensor::zeros(0, 2, 2)], 2, 2).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_flow_series(bad.as_slice()).is_err());
        assert!(read_flow_series(&buf[..buf.len() - 1]).is_err());
    }
}
