//! Reference pipelines: iterative magnitude pruning with fine-tuning, and
//! one-shot channel pruning after training with a sparsity penalty on the
//! batchnorm scales.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{config_err, Result};
use crate::nn::{ModelGraph, Role};
use crate::prune::{
    apply_soft_mask, clear_soft_mask, hard_prune_structured, select_structured, select_unstructured,
    PruneMask, PruneTarget, Structure,
};
use crate::scalar::Scalar;
use crate::train::{maybe_evaluate, plain_epoch, train_epoch, HistoryRow, Session, TrainSettings};

/// Learning rate used for every fine-tuning epoch.
pub const FINETUNE_LR: f64 = 1e-3;

/// Prune/fine-tune schedule: iteration `i` (1-based) prunes to
/// `i * final_target / iterations`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterativePlan {
    pub iterations: usize,
    pub final_target: PruneTarget,
    pub finetune_epochs: Vec<usize>,
}

impl IterativePlan {
    pub fn new(iterations: usize, final_target: PruneTarget, epochs_each: usize) -> Result<Self> {
        let plan = Self {
            iterations,
            final_target,
            finetune_epochs: vec![epochs_each; iterations],
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return config_err("an iterative plan needs at least one iteration");
        }
        if self.finetune_epochs.len() != self.iterations {
            return config_err(format!(
                "{} fine-tune epoch counts for {} iterations",
                self.finetune_epochs.len(),
                self.iterations
            ));
        }
        Ok(())
    }

    pub fn targets(&self) -> Vec<PruneTarget> {
        let n = self.iterations as f64;
        (1..=self.iterations)
            .map(|i| {
                let t = if i == self.iterations {
                    self.final_target.fraction()
                } else {
                    i as f64 * self.final_target.fraction() / n
                };
                PruneTarget::new(t).expect("fraction of a valid target")
            })
            .collect()
    }

    /// Fine-tuning epochs actually run; none when nothing is pruned.
    pub fn finetune_total(&self) -> usize {
        if self.final_target.fraction() == 0.0 {
            0
        } else {
            self.finetune_epochs.iter().sum()
        }
    }

    /// `(iteration, epoch within iteration)` of fine-tuning epoch `k`.
    fn locate(&self, mut k: usize) -> (usize, usize) {
        for (i, &e) in self.finetune_epochs.iter().enumerate() {
            if k < e {
                return (i, k);
            }
            k -= e;
        }
        (self.iterations, 0)
    }
}

/// Progress of an iterative run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HanState {
    pub mask: Option<PruneMask>,
    /// Accuracy just before the last pruning step.
    pub acc_before_final: Option<f64>,
}

pub fn han_total_epochs(settings: &TrainSettings, plan: &IterativePlan) -> usize {
    settings.epochs + plan.finetune_total()
}

fn finetune_epoch<T: Scalar>(
    session: &mut Session<T>,
    train: &Dataset<T>,
    test: Option<&Dataset<T>>,
    settings: &TrainSettings,
    selected: usize,
    mut extra: impl FnMut(&mut ModelGraph<T>, usize) -> Result<()>,
) -> Result<HistoryRow> {
    session.sgd.lr = FINETUNE_LR;
    let loss = train_epoch(
        &mut session.graph,
        &mut session.sgd,
        train,
        settings.batch_size,
        settings.seed,
        session.epoch,
        settings.augment,
        &mut session.step,
        &mut extra,
    )?;
    let row = HistoryRow {
        epoch: session.epoch,
        step: session.step,
        a: 0.0,
        train_loss: loss,
        test_acc: maybe_evaluate(&mut session.graph, test)?,
        churn: 0.0,
        selected_count: selected,
    };
    session.epoch += 1;
    session.history.push(row.clone());
    Ok(row)
}

/// Base training for `settings.epochs` epochs, then for each iteration:
/// reselect the smallest weights at the iteration target on the current
/// weights, zero and freeze them, and fine-tune.
pub fn han_epoch<T: Scalar>(
    session: &mut Session<T>,
    state: &mut HanState,
    train: &Dataset<T>,
    test: Option<&Dataset<T>>,
    settings: &TrainSettings,
    plan: &IterativePlan,
) -> Result<HistoryRow> {
    plan.validate()?;
    if session.epoch < settings.epochs {
        return plain_epoch(session, train, test, settings);
    }
    let (iteration, offset) = plan.locate(session.epoch - settings.epochs);
    if iteration >= plan.iterations || plan.finetune_total() == 0 {
        return config_err("iterative run is already complete");
    }
    if offset == 0 {
        if iteration + 1 == plan.iterations {
            state.acc_before_final = Some(maybe_evaluate(&mut session.graph, test)?);
        }
        clear_soft_mask(&mut session.graph);
        let mask = select_unstructured(&session.graph, plan.targets()[iteration])?;
        apply_soft_mask(&mut session.graph, &mask)?;
        state.mask = Some(mask);
    }
    let selected = state.mask.as_ref().map_or(0, |m| m.selected_count());
    finetune_epoch(session, train, test, settings, selected, |_, _| Ok(()))
}

pub fn train_han<T: Scalar>(
    graph: ModelGraph<T>,
    train: &Dataset<T>,
    test: Option<&Dataset<T>>,
    settings: &TrainSettings,
    plan: &IterativePlan,
) -> Result<(Session<T>, HanState)> {
    let mut session = Session::new(graph, settings)?;
    let mut state = HanState::default();
    while session.epoch < han_total_epochs(settings, plan) {
        han_epoch(&mut session, &mut state, train, test, settings, plan)?;
    }
    Ok((session, state))
}

/// `x^2/2` for `|x| < 1`, `|x| - 1/2` otherwise.
pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Adds `lambda * smooth_l1'(gamma)` to every prunable batchnorm scale.
pub fn liu_penalty_gradient<T: Scalar>(graph: &mut ModelGraph<T>, lambda: f64) {
    if lambda == 0.0 {
        return;
    }
    for p in graph.params_mut() {
        if p.role != Role::BnScale || !p.prunable {
            continue;
        }
        if p.tensor.grad().is_none() {
            p.tensor.zero_grad();
        }
        let (w, g) = p.tensor.data_and_grad_mut();
        for (gi, wi) in g.iter_mut().zip(w.iter()) {
            *gi = *gi + T::from_f64_lossy(lambda * smooth_l1_grad(wi.as_f64()));
        }
    }
}

/// `lambda * sum smooth_l1(gamma)` over the prunable batchnorm scales.
pub fn liu_penalty<T: Scalar>(graph: &ModelGraph<T>, lambda: f64) -> f64 {
    graph
        .params()
        .iter()
        .filter(|p| p.role == Role::BnScale && p.prunable)
        .flat_map(|p| p.tensor.data().iter())
        .map(|w| lambda * smooth_l1(w.as_f64()))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LiuPlan {
    pub lambda: f64,
    pub target: PruneTarget,
    pub finetune_epochs: usize,
}

impl LiuPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return config_err(format!("lambda must be finite and non-negative, got {}", self.lambda));
        }
        Ok(())
    }

    pub fn finetune_total(&self) -> usize {
        if self.target.fraction() == 0.0 {
            0
        } else {
            self.finetune_epochs
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LiuState {
    /// Channels removed after base training.
    pub removed: Option<PruneMask>,
    pub acc_before: Option<f64>,
}

pub fn liu_total_epochs(settings: &TrainSettings, plan: &LiuPlan) -> usize {
    settings.epochs + plan.finetune_total()
}

/// Base training with the scale penalty; at the first fine-tuning epoch the
/// channels are selected, physically removed, and the optimizer restarts on
/// the smaller model.
pub fn liu_epoch<T: Scalar>(
    session: &mut Session<T>,
    state: &mut LiuState,
    train: &Dataset<T>,
    test: Option<&Dataset<T>>,
    settings: &TrainSettings,
    plan: &LiuPlan,
) -> Result<HistoryRow> {
    plan.validate()?;
    if session.epoch < settings.epochs {
        session.sgd.lr = settings.lr.at(session.epoch, settings.epochs);
        let lambda = plan.lambda;
        let loss = train_epoch(
            &mut session.graph,
            &mut session.sgd,
            train,
            settings.batch_size,
            settings.seed,
            session.epoch,
            settings.augment,
            &mut session.step,
            |graph, _| {
                liu_penalty_gradient(graph, lambda);
                Ok(())
            },
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
        return Ok(row);
    }
    if session.epoch >= liu_total_epochs(settings, plan) {
        return config_err("one-shot run is already complete");
    }
    if state.removed.is_none() {
        liu_prune(session, state, test, plan.target)?;
    }
    let selected = state.removed.as_ref().map_or(0, |m| m.selected_count());
    finetune_epoch(session, train, test, settings, selected, |_, _| Ok(()))
}

/// Selects channels at `target` and rebuilds the session around the
/// smaller model.
pub fn liu_prune<T: Scalar>(
    session: &mut Session<T>,
    state: &mut LiuState,
    test: Option<&Dataset<T>>,
    target: PruneTarget,
) -> Result<()> {
    state.acc_before = Some(maybe_evaluate(&mut session.graph, test)?);
    let mask = select_structured(&session.graph, target)?;
    let pruned = hard_prune_structured(&session.graph, &mask)?;
    let sgd = crate::optim::SgdState::new(&pruned, FINETUNE_LR, session.sgd.momentum, session.sgd.mu)?;
    session.graph = pruned;
    session.sgd = sgd;
    state.removed = Some(mask);
    Ok(())
}

pub fn train_liu<T: Scalar>(
    graph: ModelGraph<T>,
    train: &Dataset<T>,
    test: Option<&Dataset<T>>,
    settings: &TrainSettings,
    plan: &LiuPlan,
) -> Result<(Session<T>, LiuState)> {
    let mut session = Session::new(graph, settings)?;
    let mut state = LiuState::default();
    while session.epoch < liu_total_epochs(settings, plan) {
        liu_epoch(&mut session, &mut state, train, test, settings, plan)?;
    }
    if state.removed.is_none() && plan.target.fraction() == 0.0 {
        state.acc_before = Some(maybe_evaluate(&mut session.graph, test)?);
        state.removed = Some(PruneMask::empty(Structure::Structured));
    }
    Ok((session, state))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_l1_pieces() {
        assert_eq!(smooth_l1_grad(0.3), 0.3);
        assert_eq!(smooth_l1_grad(2.0), 1.0);
        assert_eq!(smooth_l1_grad(-2.0), -1.0);
        assert!((smooth_l1(0.3) - 0.045).abs() < 1e-15);
        assert_eq!(smooth_l1(2.0), 1.5);
        // continuous at the knee
        assert!((smooth_l1(1.0 - 1e-12) - smooth_l1(1.0)).abs() < 1e-11);
    }

    #[test]
    fn plan_targets() {
        let plan = IterativePlan::new(5, PruneTarget::new(0.9).unwrap(), 3).unwrap();
        let t: Vec<f64> = plan.targets().iter().map(|t| t.fraction()).collect();
        assert_eq!(t.len(), 5);
        assert_eq!(t[4], 0.9);
        assert!((t[0] - 0.18).abs() < 1e-15);
        for w in t.windows(2) {
            assert!(w[0] < w[1]);
        }
        assert!(IterativePlan::new(0, PruneTarget::new(0.5).unwrap(), 3).is_err());
        let one = IterativePlan::new(1, PruneTarget::new(0.5).unwrap(), 2).unwrap();
        assert_eq!(one.targets()[0].fraction(), 0.5);
        assert_eq!(plan.locate(0), (0, 0));
        assert_eq!(plan.locate(4), (1, 1));
        assert_eq!(plan.locate(14), (4, 2));
    }
}
