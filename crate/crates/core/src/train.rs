//! Mini-batch Adam training with early stopping, then continued training on
//! the full training set.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::evaluate_model;
use crate::features::{split_train_val, ExternalConfig, MinMaxScaler, TrainingInstance};
use crate::model::{assemble_batch, loss_and_grad, Model, ModelConfig};
use crate::nn::{adam_step, read_checkpoint, write_checkpoint, AdamConfig, AdamState, Checkpoint, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Cap on early-stopping epochs.
    pub max_epochs: usize,
    /// Early-stopping epochs without validation improvement.
    pub patience: usize,
    /// Epochs on the full training set after early stopping.
    pub post_earlystop_epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Leading share of the training instances used for fitting during early
    /// stopping; the rest validate. `1.0` skips early stopping and trains
    /// `max_epochs` on everything.
    pub train_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            post_earlystop_epochs: 10,
            lr: 1e-3,
            seed: 0,
            precision: Precision::F32,
            train_fraction: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must lie in (0, 1], got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1 = early stopping on the fitting split, 2 = training on everything.
    pub phase: u8,
    pub epoch: usize,
    /// Mean scaled-space loss over the epoch's batches.
    pub loss: f64,
    /// Rescaled validation RMSE (early-stopping phase only).
    pub val_rmse: Option<f64>,
    #[serde(skip)]
    pub seconds: f64,
}

/// Everything except wall time is a deterministic function of data, config and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_rmse: Option<f64>,
    pub steps: u64,
    pub final_loss: f64,
    #[serde(skip)]
    pub wall_seconds: f64,
}

/// Batch index lists for one shuffled pass; the last batch may be short.
pub fn iterate_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Shuffling stream for one epoch, independent of everything before it so
/// a resumed run draws the same batches.
pub fn epoch_rng(seed: u64, phase: u8, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((phase as u64) << 32) | epoch as u64);
    rng
}

/// One pass over `instances`; returns the mean batch loss.
pub fn fit_epoch<T: Real>(
    model: &mut Model<T>,
    adam: &mut AdamState<T>,
    instances: &[TrainingInstance],
    cfg: &TrainConfig,
    phase: u8,
    epoch: usize,
) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::EmptyDataset("no training instances".into()));
    }
    let mut rng = epoch_rng(cfg.seed, phase, epoch);
    let mut total = 0.0;
    let batches = iterate_batches(instances.len(), cfg.batch_size, &mut rng);
    for (b, idx) in batches.iter().enumerate() {
        let refs: Vec<&TrainingInstance> = idx.iter().map(|&i| &instances[i]).collect();
        let batch = assemble_batch::<T>(&refs, &model.config)?;
        let (loss, grads, cache) = loss_and_grad(model, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss is {loss} at epoch {epoch}, batch {b}")));
        }
        adam_step(model, &grads, adam).map_err(|e| Error::NonFinite(format!("epoch {epoch}, batch {b}: {e}")))?;
        model.absorb_running_stats(&cache);
        total += loss;
    }
    Ok(total / batches.len() as f64)
}

/// Tracks the best validation score and decides when to stop.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Records an epoch's score; returns whether it is a new best.
    pub fn record(&mut self, epoch: usize, score: f64) -> bool {
        match self.best {
            Some((_, b)) if score >= b => {
                self.since_best += 1;
                false
            }
            _ => {
                self.best = Some((epoch, score));
                self.since_best = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// Both phases. `progress` sees every epoch as it completes.
pub fn train<T: Real>(
    mut model: Model<T>,
    instances: &[TrainingInstance],
    scaler: &MinMaxScaler,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<(Model<T>, AdamState<T>, TrainReport)> {
    cfg.validate()?;
    if instances.is_empty() {
        return Err(Error::EmptyDataset("no training instances".into()));
    }
    let start = Instant::now();
    let mut adam = AdamState::new(cfg.adam());
    let mut epochs = Vec::new();
    let mut report_epoch = |rec: EpochRecord, epochs: &mut Vec<EpochRecord>| {
        progress(&rec);
        epochs.push(rec);
    };
    let mut best = None;

    if cfg.train_fraction < 1.0 {
        let (fit, val) = split_train_val(instances, cfg.train_fraction)?;
        let mut stopper = EarlyStopper::new(cfg.patience);
        let mut snapshot = (model.clone(), adam.clone());
        for epoch in 1..=cfg.max_epochs {
            let t0 = Instant::now();
            let loss = fit_epoch(&mut model, &mut adam, &fit, cfg, 1, epoch)?;
            let val_rmse = evaluate_model(&model, &val, scaler)?.rmse_total;
            if !val_rmse.is_finite() {
                return Err(Error::NonFinite(format!(
                    "validation RMSE is {val_rmse} at epoch {epoch}"
                )));
            }
            if stopper.record(epoch, val_rmse) {
                snapshot = (model.clone(), adam.clone());
            }
            report_epoch(
                EpochRecord {
                    phase: 1,
                    epoch,
                    loss,
                    val_rmse: Some(val_rmse),
                    seconds: t0.elapsed().as_secs_f64(),
                },
                &mut epochs,
            );
            if stopper.should_stop() {
                break;
            }
        }
        (model, adam) = snapshot;
        best = stopper.best();
        for epoch in 1..=cfg.post_earlystop_epochs {
            let t0 = Instant::now();
            let loss = fit_epoch(&mut model, &mut adam, instances, cfg, 2, epoch)?;
            report_epoch(
                EpochRecord {
                    phase: 2,
                    epoch,
                    loss,
                    val_rmse: None,
                    seconds: t0.elapsed().as_secs_f64(),
                },
                &mut epochs,
            );
        }
    } else {
        for epoch in 1..=cfg.max_epochs {
            let t0 = Instant::now();
            let loss = fit_epoch(&mut model, &mut adam, instances, cfg, 2, epoch)?;
            report_epoch(
                EpochRecord {
                    phase: 2,
                    epoch,
                    loss,
                    val_rmse: None,
                    seconds: t0.elapsed().as_secs_f64(),
                },
                &mut epochs,
            );
        }
    }

    let report = TrainReport {
        final_loss: epochs.last().map_or(f64::NAN, |e| e.loss),
        best_epoch: best.map(|b| b.0),
        best_val_rmse: best.map(|b| b.1),
        steps: adam.step,
        epochs,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((model, adam, report))
}

/// Sidecar JSON written next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    #[serde(default)]
    pub scaler: Option<MinMaxScaler>,
    #[serde(default)]
    pub external: Option<ExternalConfig>,
    #[serde(default)]
    pub precision: Precision,
}

pub struct LoadedCheckpoint<T> {
    pub model: Model<T>,
    pub adam: Option<AdamState<T>>,
    pub meta: CheckpointMeta,
}

pub fn meta_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

pub fn save_checkpoint<T: Real>(
    path: &Path,
    model: &Model<T>,
    adam: Option<&AdamState<T>>,
    meta: &CheckpointMeta,
) -> Result<()> {
    if meta.model != model.config {
        return Err(Error::Config("checkpoint metadata does not describe the model".into()));
    }
    let ckpt = Checkpoint::capture(model, adam);
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &ckpt)?;
    std::fs::write(path, buf).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    let json = serde_json::to_string_pretty(meta).map_err(|e| Error::Format(e.to_string()))?;
    let mp = meta_path(path);
    std::fs::write(&mp, json + "\n").map_err(|e| Error::io(format!("writing {}", mp.display()), e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<LoadedCheckpoint<T>> {
    let mp = meta_path(path);
    let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(format!("reading {}", mp.display()), e))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", mp.display())))?;
    let file = std::fs::File::open(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let ckpt = read_checkpoint(std::io::BufReader::new(file))?;
    let mut model = Model::<T>::zeros(meta.model)?;
    ckpt.restore(&mut model)?;
    Ok(LoadedCheckpoint {
        model,
        adam: ckpt.adam_state(),
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{ExternalFeatures, SequenceConfig};
    use crate::flows::FlowTensor;
    use crate::nn::{seeded_rng, ParamSet};
    use rand::Rng;

    #[test]
    fn batch_partition() {
        let mut rng = epoch_rng(1, 1, 1);
        let b = iterate_batches(10, 32, &mut rng);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].len(), 10);
        let b = iterate_batches(100, 32, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![32, 32, 32, 4]);
        let mut all: Vec<usize> = b.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn epoch_streams_are_reproducible_and_distinct() {
        let a = iterate_batches(50, 7, &mut epoch_rng(3, 1, 4));
        assert_eq!(a, iterate_batches(50, 7, &mut epoch_rng(3, 1, 4)));
        assert_ne!(a, iterate_batches(50, 7, &mut epoch_rng(3, 1, 5)));
        assert_ne!(a, iterate_batches(50, 7, &mut epoch_rng(3, 2, 4)));
    }

    #[test]
    fn early_stopper_patience_one() {
        let mut s = EarlyStopper::new(1);
        assert!(s.record(1, 5.0));
        assert!(!s.should_stop());
        assert!(!s.record(2, 6.0));
        assert!(s.should_stop());
        assert_eq!(s.best(), Some((1, 5.0)));

        let mut s = EarlyStopper::new(2);
        for (e, v) in [(1, 5.0), (2, 4.0), (3, 4.5), (4, 3.0), (5, 3.0)] {
            s.record(e, v);
        }
        assert!(!s.should_stop());
        s.record(6, 3.5);
        assert!(s.should_stop());
        assert_eq!(s.best(), Some((4, 3.0)));
    }

    fn toy_instances(n: usize, seed: u64) -> Vec<TrainingInstance> {
        let mut rng = seeded_rng(seed);
        let mut frame = |t: usize| {
            FlowTensor::from_values(t, 3, 3, (0..18).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
        };
        (0..n)
            .map(|t| TrainingInstance {
                t,
                closeness: vec![frame(t), frame(t)],
                period: vec![frame(t)],
                trend: vec![],
                external: ExternalFeatures::empty(),
                target: frame(t),
            })
            .collect()
    }

    fn toy_config() -> ModelConfig {
        let s = SequenceConfig {
            closeness_len: 2,
            period_len: 1,
            trend_len: 0,
            period: 2,
            trend_span: 4,
        };
        ModelConfig::new(3, 3, 4, 1, s)
    }

    #[test]
    fn same_seed_gives_identical_reports() {
        let data = toy_instances(20, 1);
        let scaler = MinMaxScaler::new(0.0, 10.0).unwrap();
        let cfg = TrainConfig {
            batch_size: 4,
            max_epochs: 3,
            patience: 2,
            post_earlystop_epochs: 2,
            ..TrainConfig::default()
        };
        let run = || {
            let m = Model::<f32>::init(toy_config(), &mut seeded_rng(9)).unwrap();
            train(m, &data, &scaler, &cfg, &mut |_| {}).unwrap()
        };
        let (m1, _, r1) = run();
        let (m2, _, r2) = run();
        assert_eq!(m1, m2);
        assert_eq!(serde_json::to_string(&r1).unwrap(), serde_json::to_string(&r2).unwrap());
        assert!(r1.best_epoch.unwrap() <= 3);
        assert_eq!(r1.epochs.iter().filter(|e| e.phase == 2).count(), 2);
    }

    #[test]
    fn early_stopping_restores_best_parameters() {
        let data = toy_instances(20, 2);
        let scaler = MinMaxScaler::new(0.0, 10.0).unwrap();
        let cfg = TrainConfig {
            batch_size: 4,
            max_epochs: 6,
            patience: 2,
            post_earlystop_epochs: 0,
            lr: 0.05,
            ..TrainConfig::default()
        };
        let m = Model::<f64>::init(toy_config(), &mut seeded_rng(3)).unwrap();
        let (model, _, report) = train(m, &data, &scaler, &cfg, &mut |_| {}).unwrap();
        let (_, val) = split_train_val(&data, 0.9).unwrap();
        let rmse = evaluate_model(&model, &val, &scaler).unwrap().rmse_total;
        let min = report
            .epochs
            .iter()
            .filter_map(|e| e.val_rmse)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(report.best_val_rmse, Some(min));
        assert!((rmse - min).abs() < 1e-12, "{rmse} vs {min}");
    }

    #[test]
    fn non_finite_input_aborts_with_location() {
        let mut data = toy_instances(6, 3);
        data[2].target.values[0] = f32::NAN;
        let cfg = TrainConfig {
            batch_size: 2,
            ..TrainConfig::default()
        };
        let mut m = Model::<f32>::init(toy_config(), &mut seeded_rng(1)).unwrap();
        let mut adam = AdamState::new(cfg.adam());
        let err = fit_epoch(&mut m, &mut adam, &data, &cfg, 1, 7).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let msg = err.to_string();
        assert!(msg.contains("epoch 7") && msg.contains("batch"), "{msg}");
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let data = toy_instances(12, 4);
        let cfg = TrainConfig {
            batch_size: 5,
            ..TrainConfig::default()
        };
        let meta = CheckpointMeta {
            model: toy_config(),
            scaler: Some(MinMaxScaler::new(1.0, 9.0).unwrap()),
            external: None,
            precision: Precision::F32,
        };

        let mut a = Model::<f32>::init(toy_config(), &mut seeded_rng(5)).unwrap();
        let mut adam_a = AdamState::new(cfg.adam());
        let mut uninterrupted = Vec::new();
        for e in 1..=4 {
            uninterrupted.push(fit_epoch(&mut a, &mut adam_a, &data, &cfg, 1, e).unwrap());
        }

        let mut b = Model::<f32>::init(toy_config(), &mut seeded_rng(5)).unwrap();
        let mut adam_b = AdamState::new(cfg.adam());
        let mut resumed = Vec::new();
        for e in 1..=2 {
            resumed.push(fit_epoch(&mut b, &mut adam_b, &data, &cfg, 1, e).unwrap());
        }
        save_checkpoint(&path, &b, Some(&adam_b), &meta).unwrap();
        let loaded = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(loaded.model, b);
        assert_eq!(loaded.adam.as_ref(), Some(&adam_b));
        assert_eq!(loaded.meta, meta);
        let (mut b, mut adam_b) = (loaded.model, loaded.adam.unwrap());
        for e in 3..=4 {
            resumed.push(fit_epoch(&mut b, &mut adam_b, &data, &cfg, 1, e).unwrap());
        }
        assert_eq!(resumed, uninterrupted);
        assert_eq!(a, b);
    }

    #[test]
    fn double_precision_checkpoint_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m64.ckpt");
        let m = Model::<f64>::init(toy_config(), &mut seeded_rng(8)).unwrap();
        let meta = CheckpointMeta {
            model: toy_config(),
            scaler: None,
            external: None,
            precision: Precision::F64,
        };
        save_checkpoint(&path, &m, None, &meta).unwrap();
        assert_eq!(load_checkpoint::<f64>(&path).unwrap().model, m);
    }

    #[test]
    fn truncated_checkpoint_fails_to_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = Model::<f32>::init(toy_config(), &mut seeded_rng(6)).unwrap();
        let meta = CheckpointMeta {
            model: toy_config(),
            scaler: None,
            external: None,
            precision: Precision::F32,
        };
        save_checkpoint(&path, &m, None, &meta).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"NOPE");
        std::fs::write(&path, &bad).unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
        assert!(m.param_count() > 0);
    }

    proptest::proptest! {
        #[test]
        fn batches_partition_every_index(n in 1usize..200, bs in 1usize..40, epoch in 1usize..5) {
            let batches = iterate_batches(n, bs, &mut epoch_rng(3, 1, epoch));
            proptest::prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= bs));
            let mut seen: Vec<usize> = batches.concat();
            seen.sort_unstable();
            proptest::prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }
    }
}
