//! Mini-batch SGD training of the toy classifier.
//!
//! Per-sample forward/backward passes run on independent tapes (and may run
//! in parallel); gradient sums and batch-norm running-stat updates are then
//! folded sequentially in sample order, so a seed fixes every byte of the
//! result no matter how many threads participated.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::batch_norm::{BatchStats, BnMode};
use crate::numerics::tape::GradTape;
use crate::numerics::tensor::Tensor;
use crate::pnp::block::search_neighbors;
use crate::rng::Rng;
use crate::spatial::NeighborIndex;
use crate::toy::classifier::{forward, ClassifierConfig, ClassifierParams};
use crate::toy::dataset::{Dataset, LabeledCloud};

pub const SGD_MOMENTUM: f64 = 0.9;

/// One epoch's summary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Full training record. Wall time is kept out of serialization so that
/// reports written with identical seeds stay byte-identical.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub param_count: usize,
    pub epochs: Vec<EpochRecord>,
    pub final_test_accuracy: f64,
    /// confusion[true_class][predicted_class]
    pub confusion: Vec<Vec<usize>>,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Lowest-index argmax.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    fn new(lr: f64, shapes: &[&Tensor]) -> Sgd {
        Sgd {
            lr,
            momentum: SGD_MOMENTUM,
            velocity: shapes.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    fn step(&mut self, leaves: Vec<&mut Tensor>, grads: &[Tensor]) {
        for ((w, v), g) in leaves.into_iter().zip(&mut self.velocity).zip(grads) {
            for i in 0..g.numel() {
                let vel = self.momentum * v.data()[i] + g.data()[i];
                v.data_mut()[i] = vel;
                w.data_mut()[i] -= self.lr * vel;
            }
        }
    }
}

/// Static per-cloud neighbor tables, computed once; `None` entries when the
/// block is disabled.
pub fn neighbor_tables(
    clouds: &[LabeledCloud],
    cfg: &ClassifierConfig,
) -> Result<Vec<Option<NeighborIndex>>> {
    if !cfg.use_pnp {
        return Ok(vec![None; clouds.len()]);
    }
    clouds
        .par_iter()
        .map(|item| search_neighbors(&item.cloud, &cfg.pnp).map(Some))
        .collect()
}

struct SampleResult {
    loss: f64,
    grads: Vec<Tensor>,
    bn_stats: Vec<BatchStats>,
}

fn sample_pass(
    params: &ClassifierParams,
    cfg: &ClassifierConfig,
    item: &LabeledCloud,
    idx: Option<&NeighborIndex>,
) -> Result<SampleResult> {
    let mut tape = GradTape::new();
    let ids = params.register(&mut tape);
    let fwd = forward(&mut tape, params, &ids, &item.cloud, idx, &cfg.pnp)?;
    let loss_id = tape.cross_entropy(fwd.logits, item.label)?;
    let loss = tape.value(loss_id).data()[0];
    let grads = tape.backward(loss_id, Tensor::scalar(1.0))?;
    Ok(SampleResult {
        loss,
        grads: ids.leaves().into_iter().map(|id| grads.get(id)).collect(),
        bn_stats: fwd.bn_stats,
    })
}

/// Accuracy and confusion matrix over labeled clouds with their
/// precomputed neighbor tables.
///
/// Inference normalizes with per-cloud statistics, exactly as training
/// does: with one cloud per tape the cloud is the batch, and frozen
/// running averages fit individual clouds poorly (each cloud's geometry
/// shifts the encoder statistics). Per-cloud statistics are deterministic
/// and permutation-invariant, and no updates are absorbed here.
pub fn evaluate(
    params: &mut ClassifierParams,
    cfg: &ClassifierConfig,
    clouds: &[LabeledCloud],
    tables: &[Option<NeighborIndex>],
) -> Result<(f64, Vec<Vec<usize>>)> {
    params.set_mode(BnMode::Training);
    let snapshot: &ClassifierParams = params;
    let predictions: Vec<usize> = clouds
        .par_iter()
        .zip(tables.par_iter())
        .map(|(item, idx)| -> Result<usize> {
            let mut tape = GradTape::new();
            let ids = snapshot.register(&mut tape);
            let fwd = forward(&mut tape, snapshot, &ids, &item.cloud, idx.as_ref(), &cfg.pnp)?;
            Ok(argmax(tape.value(fwd.logits).data()))
        })
        .collect::<Result<Vec<usize>>>()?;

    let mut confusion = vec![vec![0usize; cfg.classes]; cfg.classes];
    let mut correct = 0usize;
    for (item, &pred) in clouds.iter().zip(&predictions) {
        confusion[item.label][pred] += 1;
        if pred == item.label {
            correct += 1;
        }
    }
    Ok((correct as f64 / clouds.len() as f64, confusion))
}

/// Trains from scratch and reports per-epoch progress.
pub fn train(cfg: &ClassifierConfig, data: &Dataset) -> Result<(ClassifierParams, TrainReport)> {
    let train_tables = neighbor_tables(&data.train, cfg)?;
    let test_tables = neighbor_tables(&data.test, cfg)?;
    train_with_tables(cfg, data, &train_tables, &test_tables)
}

/// Like [`train`], but reuses precomputed neighbor tables — graphs are
/// static per cloud, so sweeps over block variants share them.
pub fn train_with_tables(
    cfg: &ClassifierConfig,
    data: &Dataset,
    train_tables: &[Option<NeighborIndex>],
    test_tables: &[Option<NeighborIndex>],
) -> Result<(ClassifierParams, TrainReport)> {
    cfg.validate()?;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::Param("dataset must have train and test samples".into()));
    }
    if data.class_count() != cfg.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, classifier expects {}",
            data.class_count(),
            cfg.classes
        )));
    }

    let start = Instant::now();
    let mut rng = Rng::new(cfg.seed);
    let mut params = ClassifierParams::init(cfg, &mut rng)?;

    let mut sgd = Sgd::new(cfg.learning_rate, &params.leaves());
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut confusion = vec![vec![0usize; cfg.classes]; cfg.classes];

    for epoch in 1..=cfg.epochs {
        params.set_mode(BnMode::Training);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let snapshot: &ClassifierParams = &params;
            let results: Vec<SampleResult> = batch
                .par_iter()
                .map(|&i| sample_pass(snapshot, cfg, &data.train[i], train_tables[i].as_ref()))
                .collect::<Result<Vec<SampleResult>>>()?;

            // Sequential, order-fixed reduction keeps training deterministic.
            let mut grad_sum: Vec<Tensor> = params
                .leaves()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect();
            for r in &results {
                if !r.loss.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                loss_sum += r.loss;
                for (acc, g) in grad_sum.iter_mut().zip(&r.grads) {
                    acc.add_assign(g);
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grad_sum {
                g.scale(scale);
            }
            for r in &results {
                params.apply_bn_updates(&r.bn_stats);
            }
            sgd.step(params.leaves_mut(), &grad_sum);
        }

        let mean_loss = loss_sum / data.train.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }

        let (train_accuracy, _) = evaluate(&mut params, cfg, &data.train, train_tables)?;
        let (test_accuracy, epoch_confusion) =
            evaluate(&mut params, cfg, &data.test, test_tables)?;
        confusion = epoch_confusion;
        records.push(EpochRecord {
            epoch,
            loss: mean_loss,
            train_accuracy,
            test_accuracy,
        });
    }

    let final_test_accuracy = records.last().map(|r| r.test_accuracy).unwrap_or(0.0);
    let report = TrainReport {
        param_count: params.param_count(),
        epochs: records,
        final_test_accuracy,
        confusion,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok((params, report))
}
