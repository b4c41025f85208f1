//! Shared epoch loop, evaluation and per-epoch history.

use serde::{Deserialize, Serialize};

use crate::data::{batches_augmented, Augment, Dataset};
use crate::error::{config_err, Error, Result};
use crate::nn::ModelGraph;
use crate::optim::{sgd_step, LrSchedule, SgdState};
use crate::scalar::Scalar;

pub const EVAL_BATCH: usize = 500;

/// Hyperparameters of the base training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    /// Decay coefficient, shared with the selective penalty.
    pub mu: f64,
    /// Ordinary weight decay on every decaying parameter.
    pub weight_decay: bool,
    pub seed: u64,
    pub augment: Augment,
}

impl TrainSettings {
    /// LeNet-5/MNIST grid conditions: 10 epochs at a constant 0.1, no
    /// momentum, ordinary decay off, `mu = 5e-4` for the selective term.
    pub fn mnist_grid() -> Self {
        Self {
            epochs: 10,
            batch_size: 128,
            lr: LrSchedule::Constant { lr: 0.1 },
            momentum: 0.0,
            mu: 5e-4,
            weight_decay: false,
            seed: 0,
            augment: Augment::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return config_err("batch_size must be positive");
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return config_err(format!("mu must be a finite non-negative number, got {}", self.mu));
        }
        Ok(())
    }

    pub fn optimizer<T: Scalar>(&self, graph: &ModelGraph<T>) -> Result<SgdState<T>> {
        let decay = if self.weight_decay { self.mu } else { 0.0 };
        SgdState::new(graph, self.lr.at(0, self.epochs.max(1)), self.momentum, decay)
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// One row of the per-epoch training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    /// Global step count at the end of the epoch.
    pub step: usize,
    /// Selective-penalty coefficient at the last step of the epoch.
    pub a: f64,
    pub train_loss: f64,
    /// Test accuracy in percent, NaN when no test set was given.
    pub test_acc: f64,
    pub churn: f64,
    pub selected_count: usize,
}

/// Model and optimizer plus the position in the run. Everything needed to
/// continue training bit-exactly.
#[derive(Debug, Clone)]
pub struct Session<T> {
    pub graph: ModelGraph<T>,
    pub sgd: SgdState<T>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub history: Vec<HistoryRow>,
}

impl<T: Scalar> Session<T> {
    pub fn new(graph: ModelGraph<T>, settings: &TrainSettings) -> Result<Self> {
        settings.validate()?;
        let sgd = settings.optimizer(&graph)?;
        Ok(Self {
            graph,
            sgd,
            epoch: 0,
            step: 0,
            history: Vec::new(),
        })
    }
}

/// Runs one pass over `data`. `before_update` runs after the loss gradient
/// is accumulated and before the optimizer step; it receives the global step
/// index. Returns the mean training loss.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch<T, F>(
    graph: &mut ModelGraph<T>,
    sgd: &mut SgdState<T>,
    data: &Dataset<T>,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    augment: Augment,
    step: &mut usize,
    mut before_update: F,
) -> Result<f64>
where
    T: Scalar,
    F: FnMut(&mut ModelGraph<T>, usize) -> Result<()>,
{
    if data.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let mut total = 0.0;
    for batch in batches_augmented(data, batch_size, seed, epoch, augment)? {
        graph.zero_grad();
        let n = batch.labels.len();
        let loss = graph.accumulate_loss_grad(batch.images, &batch.labels)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step: *step,
                what: format!("loss is {loss}"),
                swd_coefficient: None,
            });
        }
        before_update(graph, *step)?;
        sgd_step(graph, sgd, *step)?;
        total += loss * n as f64;
        *step += 1;
    }
    Ok(total / data.len() as f64)
}

/// Eval-mode top-1 accuracy in percent.
pub fn evaluate<T: Scalar>(graph: &mut ModelGraph<T>, data: &Dataset<T>, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let logits = graph.logits(data.images.gather_rows(chunk))?;
        let k = logits.shape()[1];
        for (row, &i) in logits.data().chunks_exact(k).zip(chunk) {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            correct += (best == data.labels[i]) as usize;
        }
    }
    Ok(100.0 * correct as f64 / data.len() as f64)
}

/// Accuracy when the test set is optional.
pub(crate) fn maybe_evaluate<T: Scalar>(
    graph: &mut ModelGraph<T>,
    test: Option<&Dataset<T>>,
) -> Result<f64> {
    match test {
        Some(t) => evaluate(graph, t, EVAL_BATCH),
        None => Ok(f64::NAN),
    }
}

/// One plain training epoch at the scheduled learning rate, logged.
pub fn plain_epoch<T: Scalar>(
    session: &mut Session<T>,
    train: &Dataset<T>,
    test: Option<&Dataset<T>>,
    settings: &TrainSettings,
) -> Result<HistoryRow> {
    session.sgd.lr = settings.lr.at(session.epoch, settings.epochs);
    let loss = train_epoch(
        &mut session.graph,
        &mut session.sgd,
        train,
        settings.batch_size,
        settings.seed,
        session.epoch,
        settings.augment,
        &mut session.step,
        |_, _| Ok(()),
    )?;
    let row = HistoryRow {
        epoch: session.epoch,
        step: session.step,
        a: 0.0,
        train_loss: loss,
        test_acc: maybe_evaluate(&mut session.graph, test)?,
        churn: 0.0,
        selected_count: 0,
    };
    session.epoch += 1;
    session.history.push(row.clone());
    Ok(row)
}

/// Trains without any pruning term for `settings.epochs` epochs.
pub fn train_baseline<T: Scalar>(
    graph: ModelGraph<T>,
    train: &Dataset<T>,
    test: Option<&Dataset<T>>,
    settings: &TrainSettings,
) -> Result<Session<T>> {
    let mut s = Session::new(graph, settings)?;
    while s.epoch < settings.epochs {
        plain_epoch(&mut s, train, test, settings)?;
    }
    Ok(s)
}
