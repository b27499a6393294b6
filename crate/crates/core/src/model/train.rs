use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::geom::{apply_rigid, PointCloud, RotationKind};
use crate::seed::derive_seed;

use super::config::{NetworkConfig, RotationRegime, TrainConfig};
use super::metrics::{self, Metrics, SegmentedShape};
use super::network::{Model, Prediction};

// Seed stream identifiers.
const SPLIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const AUGMENT_STREAM: u64 = 3;
const VALIDATION_STREAM: u64 = 4;
const TEST_STREAM: u64 = 5;

/// Version tag written as the first (comment) line of every metrics CSV.
pub const CSV_SCHEMA: &str = "# riconv-metrics v1";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean per-sample training loss over the epoch.
    pub train_loss: f64,
    pub train_accuracy: f64,
    /// Accuracy (classification) or mIoU (segmentation) on the held-out
    /// split; absent when the split is empty.
    pub validation_score: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation score (the last
    /// epoch when there is no validation split).
    pub model: Model,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
}

/// Rotates each cloud by a draw from `kind`, seeded per cloud index.
pub fn rotate_all(clouds: &[PointCloud], kind: RotationKind, seed: u64, stream: &[u64]) -> Vec<PointCloud> {
    clouds
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut path = stream.to_vec();
            path.push(i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &path));
            apply_rigid(c, &kind.sample(&mut rng))
        })
        .collect()
}

/// Trains `model` on `dataset` with Adam. The rotation regime's training
/// side draws a fresh rotation for every sample in every epoch.
pub fn train(mut model: Model, tcfg: &TrainConfig, dataset: &[PointCloud]) -> Result<TrainOutcome> {
    tcfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(tcfg.seed, &[SPLIT_STREAM])));
    let n_val = ((n as f64 * tcfg.validation_fraction).floor() as usize).min(n - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    train_idx.sort_unstable();
    let side = tcfg.rotation_regime.train_side();
    let validation: Vec<PointCloud> = val_idx.iter().map(|&i| dataset[i].clone()).collect();
    let validation = rotate_all(&validation, side, tcfg.seed, &[VALIDATION_STREAM]);

    let mut optimizer = Adam::new(AdamConfig {
        learning_rate: tcfg.learning_rate,
        ..AdamConfig::default()
    });
    let mut history = Vec::with_capacity(tcfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;
    for epoch in 1..=tcfg.epochs {
        let mut shuffled = train_idx.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            tcfg.seed,
            &[SHUFFLE_STREAM, epoch as u64],
        )));
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let mut total = 0;
        for (b, batch) in shuffled.chunks(tcfg.batch_size).enumerate() {
            let clouds: Vec<PointCloud> = batch
                .iter()
                .map(|&i| {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(derive_seed(tcfg.seed, &[AUGMENT_STREAM, epoch as u64, i as u64]));
                    apply_rigid(&dataset[i], &side.sample(&mut rng))
                })
                .collect();
            let stats = model.train_step(&clouds, &mut optimizer)?;
            if !stats.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    loss: stats.loss,
                });
            }
            loss_sum += stats.loss * batch.len() as f64;
            correct += stats.correct;
            total += stats.total;
        }
        let validation_score = if validation.is_empty() {
            None
        } else {
            Some(score(&model, &validation)?)
        };
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / train_idx.len() as f64,
            train_accuracy: correct as f64 / total.max(1) as f64,
            validation_score,
        };
        log::info!(
            "epoch {epoch}: loss {:.4}, train acc {:.3}, validation {}",
            m.train_loss,
            m.train_accuracy,
            validation_score.map_or("-".to_string(), |v| format!("{v:.3}"))
        );
        history.push(m);
        let s = validation_score.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, _, _)| s >= *b) {
            best = Some((s, epoch, model.clone()));
        }
    }
    let (best_epoch, model) = match best {
        Some((_, e, m)) => (e, m),
        None => (0, model),
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}

/// Validation score: accuracy or mIoU depending on the task.
fn score(model: &Model, clouds: &[PointCloud]) -> Result<f64> {
    let m = metrics_for(model, clouds)?;
    Ok(m.mean_per_class_iou.unwrap_or(m.overall_accuracy))
}

fn metrics_for(model: &Model, clouds: &[PointCloud]) -> Result<Metrics> {
    let predictions = model.predict(clouds)?;
    let mut predicted = Vec::new();
    let mut truth = Vec::new();
    let mut shapes = Vec::new();
    let mut point_class = Vec::new();
    for (p, c) in predictions.iter().zip(clouds) {
        match p {
            Prediction::Class(out) => {
                predicted.push(out.prediction);
                truth.push(
                    c.class_label()
                        .ok_or_else(|| Error::InvalidInput("evaluation cloud lacks a class label".into()))?,
                );
            }
            Prediction::Parts { labels, .. } => {
                let parts = c
                    .part_labels()
                    .ok_or_else(|| Error::InvalidInput("evaluation cloud lacks part labels".into()))?;
                predicted.extend_from_slice(labels);
                truth.extend_from_slice(parts);
                let class = c.class_label().unwrap_or(0);
                point_class.extend(std::iter::repeat_n(class, parts.len()));
                shapes.push((class, labels.as_slice(), parts));
            }
        }
    }
    if shapes.is_empty() {
        Ok(Metrics {
            overall_accuracy: metrics::accuracy(&predicted, &truth),
            per_class_accuracy: metrics::per_class_accuracy(&predicted, &truth),
            mean_per_class_iou: None,
            samples: clouds.len(),
        })
    } else {
        let mut per_class = BTreeMap::new();
        for (&class, hits) in &group_hits(&predicted, &truth, &point_class) {
            per_class.insert(class, hits.0 as f64 / hits.1 as f64);
        }
        let seg: Vec<SegmentedShape<'_>> = shapes
            .iter()
            .map(|&(class, predicted, truth)| SegmentedShape {
                class,
                predicted,
                truth,
            })
            .collect();
        Ok(Metrics {
            overall_accuracy: metrics::accuracy(&predicted, &truth),
            per_class_accuracy: per_class,
            mean_per_class_iou: Some(metrics::mean_per_class_iou(&seg)),
            samples: clouds.len(),
        })
    }
}

fn group_hits(predicted: &[usize], truth: &[usize], group: &[usize]) -> BTreeMap<usize, (usize, usize)> {
    let mut out: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for ((p, t), g) in predicted.iter().zip(truth).zip(group) {
        let e = out.entry(*g).or_default();
        e.0 += (p == t) as usize;
        e.1 += 1;
    }
    out
}

/// Evaluates on `dataset` after rotating each cloud by the regime's test
/// side (seeded by `seed`).
pub fn evaluate(model: &Model, dataset: &[PointCloud], regime: RotationRegime, seed: u64) -> Result<Metrics> {
    let rotated = rotate_all(dataset, regime.test_side(), seed, &[TEST_STREAM]);
    metrics_for(model, &rotated)
}

#[derive(Debug, Clone)]
pub struct RegimeResult {
    pub regime: RotationRegime,
    pub metrics: Metrics,
    /// History of the run that trained this regime's model.
    pub history: Vec<EpochMetrics>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub rows: Vec<RegimeResult>,
    /// Sample standard deviation of overall accuracy across regimes.
    pub accuracy_std: f64,
}

impl ExperimentResult {
    pub fn accuracy(&self, regime: RotationRegime) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.regime == regime)
            .map(|r| r.metrics.overall_accuracy)
    }

    /// Largest absolute accuracy difference between any two regimes.
    pub fn max_gap(&self) -> f64 {
        let acc: Vec<f64> = self.rows.iter().map(|r| r.metrics.overall_accuracy).collect();
        let hi = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = acc.iter().cloned().fold(f64::INFINITY, f64::min);
        if acc.is_empty() {
            0.0
        } else {
            hi - lo
        }
    }

    /// One header row of regime names plus `acc_std`, one row of values.
    pub fn write_table_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut out = out;
        writeln!(out, "{CSV_SCHEMA} regime-table").map_err(|e| Error::io("<table>", e))?;
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = self.rows.iter().map(|r| r.regime.name().to_string()).collect();
        header.push("acc_std".into());
        w.write_record(&header)?;
        let mut values: Vec<String> = self
            .rows
            .iter()
            .map(|r| format!("{:.4}", r.metrics.overall_accuracy))
            .collect();
        values.push(format!("{:.4}", self.accuracy_std));
        w.write_record(&values)?;
        w.flush().map_err(|e| Error::io("<table>", e))?;
        Ok(())
    }
}

/// Trains once per distinct training side among `regimes` (z/z and z/SO3
/// share a z-trained model) and evaluates each regime on its test side.
pub fn run_experiment(
    cfg: &NetworkConfig,
    tcfg: &TrainConfig,
    train_set: &[PointCloud],
    test_set: &[PointCloud],
    regimes: &[RotationRegime],
) -> Result<ExperimentResult> {
    if regimes.is_empty() {
        return Err(Error::Config("at least one rotation regime is required".into()));
    }
    let mut trained: Vec<(RotationKind, TrainOutcome)> = Vec::new();
    let mut rows = Vec::with_capacity(regimes.len());
    for &regime in regimes {
        let side = regime.train_side();
        if !trained.iter().any(|(k, _)| *k == side) {
            log::info!("training for {} (train side {:?})", regime, side);
            let run = TrainConfig {
                rotation_regime: regime,
                ..tcfg.clone()
            };
            let outcome = train(Model::new(cfg.clone(), tcfg.seed)?, &run, train_set)?;
            trained.push((side, outcome));
        }
        let (_, outcome) = trained.iter().find(|(k, _)| *k == side).expect("trained above");
        let metrics = evaluate(&outcome.model, test_set, regime, tcfg.seed)?;
        log::info!("{regime}: accuracy {:.4}", metrics.overall_accuracy);
        rows.push(RegimeResult {
            regime,
            metrics,
            history: outcome.history.clone(),
        });
    }
    let acc: Vec<f64> = rows.iter().map(|r| r.metrics.overall_accuracy).collect();
    Ok(ExperimentResult {
        accuracy_std: metrics::sample_std(&acc),
        rows,
    })
}

/// Per-epoch history as CSV.
pub fn write_history_csv<W: Write>(history: &[EpochMetrics], mut out: W) -> Result<()> {
    writeln!(out, "{CSV_SCHEMA} epochs").map_err(|e| Error::io("<history>", e))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "train_loss", "train_accuracy", "validation_score"])?;
    for m in history {
        w.write_record([
            m.epoch.to_string(),
            format!("{:.6}", m.train_loss),
            format!("{:.6}", m.train_accuracy),
            m.validation_score.map_or(String::new(), |v| format!("{v:.6}")),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<history>", e))?;
    Ok(())
}

/// Evaluation metrics as CSV: overall rows followed by per-class rows.
pub fn write_metrics_csv<W: Write>(regime: RotationRegime, m: &Metrics, mut out: W) -> Result<()> {
    writeln!(out, "{CSV_SCHEMA} evaluation").map_err(|e| Error::io("<metrics>", e))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["regime", "metric", "class", "value"])?;
    let r = regime.name();
    w.write_record([r, "overall_accuracy", "", &format!("{:.6}", m.overall_accuracy)])?;
    if let Some(iou) = m.mean_per_class_iou {
        w.write_record([r, "mean_per_class_iou", "", &format!("{iou:.6}")])?;
    }
    for (class, acc) in &m.per_class_accuracy {
        w.write_record([r, "class_accuracy", &class.to_string(), &format!("{acc:.6}")])?;
    }
    w.flush().map_err(|e| Error::io("<metrics>", e))?;
    Ok(())
}

/// Writes `contents` produced by `f` to `path`.
pub fn write_file<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}
