use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::FlowTensor;

/// Affine map of raw counts onto `[-1, 1]`, shared by both flow channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub data_min: f64,
    pub data_max: f64,
}

impl MinMaxScaler {
    pub fn new(data_min: f64, data_max: f64) -> Result<Self> {
        if !(data_min.is_finite() && data_max.is_finite()) || data_min >= data_max {
            return Err(Error::DegenerateData(format!(
                "scaler needs min < max, got [{data_min}, {data_max}]"
            )));
        }
        Ok(MinMaxScaler { data_min, data_max })
    }

    /// Fits on the frames in `range` only.
    pub fn fit(series: &[FlowTensor], range: Range<usize>) -> Result<Self> {
        if range.is_empty() || range.end > series.len() {
            return Err(Error::InsufficientData(format!(
                "scaler training range {range:?} is empty or exceeds series length {}",
                series.len()
            )));
        }
        let (lo, hi) = series[range]
            .iter()
            .flat_map(|x| x.values.iter())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v as f64), hi.max(v as f64))
            });
        if lo == hi {
            return Err(Error::DegenerateData(format!(
                "training range is constant ({lo}); cannot scale"
            )));
        }
        Self::new(lo, hi)
    }

    #[inline]
    pub fn transform(&self, x: f64) -> f64 {
        2.0 * (x - self.data_min) / (self.data_max - self.data_min) - 1.0
    }

    #[inline]
    pub fn inverse_transform(&self, y: f64) -> f64 {
        (y + 1.0) * 0.5 * (self.data_max - self.data_min) + self.data_min
    }

    pub fn transform_tensor(&self, x: &FlowTensor) -> FlowTensor {
        FlowTensor {
            values: x.values.iter().map(|&v| self.transform(v as f64) as f32).collect(),
            ..x.clone()
        }
    }

    pub fn transform_series(&self, series: &[FlowTensor]) -> Vec<FlowTensor> {
        series.iter().map(|x| self.transform_tensor(x)).collect()
    }
}
