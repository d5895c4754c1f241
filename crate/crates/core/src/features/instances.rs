use serde::{Deserialize, Serialize};

use super::external::ExternalFeatures;
use crate::error::{Error, Result};
use crate::flows::FlowTensor;

/// Dependent-sequence lengths and spans, all in intervals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceConfig {
    pub closeness_len: usize,
    pub period_len: usize,
    pub trend_len: usize,
    /// One day.
    pub period: usize,
    /// One week.
    pub trend_span: usize,
}

impl SequenceConfig {
    /// `p` = one day, `q` = one week.
    pub fn daily_weekly(intervals_per_day: usize, closeness_len: usize, period_len: usize, trend_len: usize) -> Self {
        SequenceConfig {
            closeness_len,
            period_len,
            trend_len,
            period: intervals_per_day,
            trend_span: 7 * intervals_per_day,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.closeness_len == 0 {
            return Err(Error::Config("closeness_len must be at least 1".into()));
        }
        if self.period == 0 {
            return Err(Error::Config("period must be at least 1".into()));
        }
        if self.trend_span < self.period {
            return Err(Error::Config(format!(
                "trend_span {} must be >= period {}",
                self.trend_span, self.period
            )));
        }
        Ok(())
    }

    /// Smallest target index with complete history.
    pub fn min_history(&self) -> usize {
        self.closeness_len
            .max(self.period_len * self.period)
            .max(self.trend_len * self.trend_span)
    }

    pub fn closeness_indices(&self, t: usize) -> Vec<usize> {
        (1..=self.closeness_len).rev().map(|k| t - k).collect()
    }

    pub fn period_indices(&self, t: usize) -> Vec<usize> {
        (1..=self.period_len).rev().map(|k| t - k * self.period).collect()
    }

    pub fn trend_indices(&self, t: usize) -> Vec<usize> {
        (1..=self.trend_len).rev().map(|k| t - k * self.trend_span).collect()
    }
}

/// `({S_c, S_p, S_q, E_t}, X_t)`; sequences ordered oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingInstance {
    pub t: usize,
    pub closeness: Vec<FlowTensor>,
    pub period: Vec<FlowTensor>,
    pub trend: Vec<FlowTensor>,
    pub external: ExternalFeatures,
    pub target: FlowTensor,
}

pub fn first_valid_t(cfg: &SequenceConfig) -> usize {
    cfg.min_history()
}

/// Assembles the instance whose target is `series[t]`.
pub fn instance_at(
    series: &[FlowTensor],
    externals: &[ExternalFeatures],
    cfg: &SequenceConfig,
    t: usize,
) -> Result<TrainingInstance> {
    cfg.validate()?;
    let need = cfg.min_history();
    if t < need {
        return Err(Error::InsufficientData(format!(
            "target interval {t} lacks history: index {} would be negative (need t >= {need})",
            t as i64 - need as i64
        )));
    }
    if t >= series.len() {
        return Err(Error::InsufficientData(format!(
            "target interval {t} is beyond the series (length {})",
            series.len()
        )));
    }
    let pick = |idx: Vec<usize>| idx.into_iter().map(|k| series[k].clone()).collect();
    let external = if externals.is_empty() {
        ExternalFeatures::empty()
    } else {
        externals
            .get(t)
            .cloned()
            .ok_or_else(|| Error::InsufficientData(format!("no external features for interval {t}")))?
    };
    Ok(TrainingInstance {
        t,
        closeness: pick(cfg.closeness_indices(t)),
        period: pick(cfg.period_indices(t)),
        trend: pick(cfg.trend_indices(t)),
        external,
        target: series[t].clone(),
    })
}

/// One instance per `t` in `min_history()..n`, in chronological order.
/// `externals` may be empty (no external factors) or cover every interval.
pub fn build_instances(
    series: &[FlowTensor],
    externals: &[ExternalFeatures],
    cfg: &SequenceConfig,
) -> Result<Vec<TrainingInstance>> {
    cfg.validate()?;
    let n = series.len();
    let start = cfg.min_history();
    if n <= start {
        return Err(Error::InsufficientData(format!(
            "series of {n} intervals yields no instances; need at least {} intervals",
            start + 1
        )));
    }
    if !externals.is_empty() && externals.len() < n {
        return Err(Error::InsufficientData(format!(
            "external features cover {} intervals, series has {n}",
            externals.len()
        )));
    }
    (start..n).map(|t| instance_at(series, externals, cfg, t)).collect()
}

/// Re-derives the index structure from `t` and compares with the stored tensors.
pub fn validate_instance(inst: &TrainingInstance, series: &[FlowTensor], cfg: &SequenceConfig) -> bool {
    let check = |stored: &[FlowTensor], idx: Vec<usize>| {
        stored.len() == idx.len() && stored.iter().zip(idx).all(|(x, k)| x.t == k && *x == series[k])
    };
    inst.t < series.len()
        && inst.t >= cfg.min_history()
        && inst.target == series[inst.t]
        && check(&inst.closeness, cfg.closeness_indices(inst.t))
        && check(&inst.period, cfg.period_indices(inst.t))
        && check(&inst.trend, cfg.trend_indices(inst.t))
}

/// Chronological split: the first `floor(fraction * N)` instances train, the rest validate.
pub fn split_train_val<T: Clone>(instances: &[T], fraction: f64) -> Result<(Vec<T>, Vec<T>)> {
    let n = instances.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 instances to split, got {n}"
        )));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let train = ((fraction * n as f64 + 1e-9).floor() as usize).clamp(1, n - 1);
    Ok((instances[..train].to_vec(), instances[train..].to_vec()))
}
