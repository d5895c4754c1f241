//! RMSE in original units, reference predictors and comparison tables.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{MinMaxScaler, TrainingInstance};
use crate::flows::{FlowTensor, INFLOW, OUTFLOW};
use crate::grid::GridSpec;
use crate::model::{assemble_batch, predict, Model};
use crate::nn::Real;

/// Instances per forward pass during evaluation.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse_total: f64,
    pub rmse_inflow: f64,
    pub rmse_outflow: f64,
    /// Number of predicted values.
    pub z: usize,
    pub z_inflow: usize,
    pub z_outflow: usize,
}

pub fn rmse(predictions: &[FlowTensor], targets: &[FlowTensor]) -> Result<EvalReport> {
    if predictions.len() != targets.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let mut sums = [0.0f64; 2];
    let mut counts = [0usize; 2];
    for (p, t) in predictions.iter().zip(targets) {
        if !p.same_shape(t) {
            return Err(Error::shape(format!(
                "prediction for interval {} is {}x{}, target is {}x{}",
                t.t, p.rows, p.cols, t.rows, t.cols
            )));
        }
        for ch in [INFLOW, OUTFLOW] {
            for (&a, &b) in p.channel(ch).iter().zip(t.channel(ch)) {
                let d = a as f64 - b as f64;
                sums[ch] += d * d;
            }
            counts[ch] += p.channel(ch).len();
        }
    }
    let root = |s: f64, n: usize| if n == 0 { 0.0 } else { (s / n as f64).sqrt() };
    Ok(EvalReport {
        rmse_total: root(sums[0] + sums[1], counts[0] + counts[1]),
        rmse_inflow: root(sums[INFLOW], counts[INFLOW]),
        rmse_outflow: root(sums[OUTFLOW], counts[OUTFLOW]),
        z: counts[0] + counts[1],
        z_inflow: counts[INFLOW],
        z_outflow: counts[OUTFLOW],
    })
}

/// Mean of every earlier interval sharing `t`'s weekday and time-of-day slot.
/// Only `series[..t]` is ever read.
pub fn predict_ha(series: &[FlowTensor], t: usize, grid: &GridSpec) -> Result<FlowTensor> {
    let history = &series[..t.min(series.len())];
    let slot = grid.calendar_slot(t);
    let mut sum: Vec<f64> = Vec::new();
    let mut count = 0usize;
    let mut shape = (0, 0);
    for (k, x) in history.iter().enumerate() {
        if grid.calendar_slot(k) != slot {
            continue;
        }
        if sum.is_empty() {
            sum = vec![0.0; x.values.len()];
            shape = (x.rows, x.cols);
        }
        sum.iter_mut().zip(&x.values).for_each(|(s, &v)| *s += v as f64);
        count += 1;
    }
    if count == 0 {
        return Err(Error::InsufficientData(format!(
            "no interval before {t} shares its weekday and time-of-day slot"
        )));
    }
    let values = sum.iter().map(|s| (s / count as f64) as f32).collect();
    FlowTensor::from_values(t, shape.0, shape.1, values)
}

/// `X_{t-1}`.
pub fn predict_persistence(series: &[FlowTensor], t: usize) -> Result<FlowTensor> {
    if t == 0 || t > series.len() {
        return Err(Error::InsufficientData(format!(
            "persistence needs interval {} (series length {})",
            t as i64 - 1,
            series.len()
        )));
    }
    Ok(FlowTensor {
        t,
        ..series[t - 1].clone()
    })
}

/// Forward passes on scaled instances, mapped back to counts and clamped at 0.
pub fn predict_flows<T: Real>(
    model: &Model<T>,
    instances: &[TrainingInstance],
    scaler: &MinMaxScaler,
) -> Result<Vec<FlowTensor>> {
    let cfg = &model.config;
    let mut out = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(EVAL_CHUNK) {
        let refs: Vec<&TrainingInstance> = chunk.iter().collect();
        let batch = assemble_batch::<T>(&refs, cfg)?;
        let pred = predict(model, &batch)?;
        for (s, inst) in chunk.iter().enumerate() {
            let values = pred
                .sample(s)
                .iter()
                .map(|v| scaler.inverse_transform(v.as_f64()).max(0.0) as f32)
                .collect();
            out.push(FlowTensor::from_values(inst.t, cfg.rows, cfg.cols, values)?);
        }
    }
    Ok(out)
}

/// Targets of scaled instances, mapped back to counts (clamped like predictions).
pub fn rescaled_targets(instances: &[TrainingInstance], scaler: &MinMaxScaler) -> Vec<FlowTensor> {
    instances
        .iter()
        .map(|inst| FlowTensor {
            values: inst
                .target
                .values
                .iter()
                .map(|&v| scaler.inverse_transform(v as f64).max(0.0) as f32)
                .collect(),
            ..inst.target.clone()
        })
        .collect()
}

pub fn evaluate_model<T: Real>(
    model: &Model<T>,
    instances: &[TrainingInstance],
    scaler: &MinMaxScaler,
) -> Result<EvalReport> {
    let predictions = predict_flows(model, instances, scaler)?;
    rmse(&predictions, &rescaled_targets(instances, scaler))
}

/// `t, rmse, rmse_inflow, rmse_outflow` per interval.
pub fn write_instance_errors<W: Write>(w: W, predictions: &[FlowTensor], targets: &[FlowTensor]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let fail = |e: csv::Error| Error::Format(format!("writing per-instance errors: {e}"));
    wr.write_record(["t", "rmse", "rmse_inflow", "rmse_outflow"])
        .map_err(fail)?;
    for (p, t) in predictions.iter().zip(targets) {
        let r = rmse(std::slice::from_ref(p), std::slice::from_ref(t))?;
        wr.write_record([
            t.t.to_string(),
            r.rmse_total.to_string(),
            r.rmse_inflow.to_string(),
            r.rmse_outflow.to_string(),
        ])
        .map_err(fail)?;
    }
    wr.flush().map_err(|e| Error::io("writing per-instance errors", e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub rmse: f64,
    pub rmse_inflow: Option<f64>,
    pub rmse_outflow: Option<f64>,
    /// Set for published figures that were not computed by this run.
    pub reference: Option<String>,
}

/// Values are rounded to four decimals so the JSON and text forms agree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub test_instances: usize,
    pub z: usize,
    pub rows: Vec<ComparisonRow>,
}

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

impl ComparisonTable {
    pub fn new(test_instances: usize, z: usize) -> Self {
        ComparisonTable {
            test_instances,
            z,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, method: &str, report: &EvalReport) {
        self.rows.push(ComparisonRow {
            method: method.to_string(),
            rmse: round4(report.rmse_total),
            rmse_inflow: Some(round4(report.rmse_inflow)),
            rmse_outflow: Some(round4(report.rmse_outflow)),
            reference: None,
        });
    }

    pub fn row(&self, method: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_text(&self) -> String {
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let lines: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.method.clone(),
                    cell(Some(r.rmse)),
                    cell(r.rmse_inflow),
                    cell(r.rmse_outflow),
                    r.reference.clone().unwrap_or_default(),
                ]
            })
            .collect();
        let header = ["method", "rmse", "inflow", "outflow", "source"].map(String::from);
        let mut widths = header.clone().map(|h| h.len());
        for l in &lines {
            for (w, c) in widths.iter_mut().zip(l) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        for l in std::iter::once(&header).chain(&lines) {
            let _ = writeln!(
                out,
                "{:<w0$}  {:>w1$}  {:>w2$}  {:>w3$}  {}",
                l[0],
                l[1],
                l[2],
                l[3],
                l[4],
                w0 = widths[0],
                w1 = widths[1],
                w2 = widths[2],
                w3 = widths[3]
            );
        }
        let _ = writeln!(
            out,
            "test instances: {}, predicted values: {}",
            self.test_instances, self.z
        );
        out.lines().map(str::trim_end).collect::<Vec<_>>().join("\n") + "\n"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceSet {
    TaxiBJ,
    BikeNYC,
}

/// Published RMSEs on the two public datasets; never computed here.
pub fn reference_rows(set: ReferenceSet) -> Vec<ComparisonRow> {
    let (label, rows): (&str, &[(&str, f64)]) = match set {
        ReferenceSet::TaxiBJ => (
            "published TaxiBJ",
            &[
                ("HA", 57.69),
                ("ARIMA", 22.78),
                ("SARIMA", 26.88),
                ("VAR", 22.88),
                ("ST-ANN", 19.57),
                ("DeepST", 18.18),
                ("L2-E", 17.67),
                ("L4-E", 17.51),
                ("L12-E", 16.89),
                ("L12-E-BN", 16.69),
                ("L12-single-E", 17.40),
                ("L12", 17.00),
                ("L12-E-noFusion", 17.96),
            ],
        ),
        ReferenceSet::BikeNYC => (
            "published BikeNYC",
            &[
                ("ARIMA", 10.07),
                ("SARIMA", 10.56),
                ("VAR", 9.92),
                ("DeepST-C", 8.39),
                ("DeepST-CP", 7.64),
                ("DeepST-CPT", 7.56),
                ("DeepST-CPTM", 7.43),
                ("L4", 6.33),
            ],
        ),
    };
    rows.iter()
        .map(|&(m, v)| ComparisonRow {
            method: m.to_string(),
            rmse: v,
            rmse_inflow: None,
            rmse_outflow: None,
            reference: Some(label.to_string()),
        })
        .collect()
}
