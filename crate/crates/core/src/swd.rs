//! Selective weight decay: a penalty on the entries the pruning criterion
//! currently targets, with a coefficient that grows exponentially over the
//! run, followed by a single removal at the end.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{config_err, Error, Result};
use crate::nn::{ModelGraph, ParamId};
use crate::prune::{
    apply_soft_mask, channel_entries, hard_prune_structured, select_structured, select_unstructured,
    space_removal, structured_candidates, EntrySet, PruneMask, PruneTarget, Structure,
};
use crate::scalar::Scalar;
use crate::train::{evaluate, maybe_evaluate, train_epoch, HistoryRow, Session, TrainSettings, EVAL_BATCH};

/// Bounds of the exponential coefficient schedule. `a_min = a_max = 0`
/// switches the penalty off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwdSchedule {
    pub a_min: f64,
    pub a_max: f64,
}

impl SwdSchedule {
    pub fn new(a_min: f64, a_max: f64) -> Result<Self> {
        if a_min == 0.0 && a_max == 0.0 {
            return Ok(Self::disabled());
        }
        if !(a_min > 0.0) || !a_min.is_finite() {
            return config_err(format!("a_min must be positive, got {a_min}"));
        }
        if !(a_max >= a_min) || !a_max.is_finite() {
            return config_err(format!("a_max ({a_max}) must be finite and >= a_min ({a_min})"));
        }
        Ok(Self { a_min, a_max })
    }

    pub fn disabled() -> Self {
        Self {
            a_min: 0.0,
            a_max: 0.0,
        }
    }

    pub fn is_disabled(&self) -> bool {
        self.a_max == 0.0
    }

    /// `a(s) = a_min * exp((s / s_final) * ln(a_max / a_min))`, exact at
    /// both ends and clamped to `a_max` past `s_final`.
    pub fn coefficient(&self, s: usize, s_final: usize) -> f64 {
        if self.is_disabled() {
            return 0.0;
        }
        if s == 0 {
            return self.a_min;
        }
        if s >= s_final {
            return self.a_max;
        }
        let frac = s as f64 / s_final as f64;
        self.a_min * (frac * (self.a_max / self.a_min).ln()).exp()
    }
}

/// Checked form of [`SwdSchedule::coefficient`].
pub fn swd_coefficient(a_min: f64, a_max: f64, s: usize, s_final: usize) -> Result<f64> {
    if s > s_final {
        return config_err(format!("step {s} beyond final step {s_final}"));
    }
    Ok(SwdSchedule::new(a_min, a_max)?.coefficient(s, s_final))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwdConfig {
    pub schedule: SwdSchedule,
    pub target: PruneTarget,
    pub structure: Structure,
    /// Steps between recomputations of the targeted set.
    pub reselect_interval: usize,
}

impl SwdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reselect_interval == 0 {
            return config_err("reselect_interval must be at least 1");
        }
        SwdSchedule::new(self.schedule.a_min, self.schedule.a_max).map(|_| ())
    }
}

/// Entries that receive the selective penalty: the selected weights, or for
/// channels the batchnorm scales together with the producing filters.
pub fn penalty_entries<T: Scalar>(
    graph: &ModelGraph<T>,
    mask: &PruneMask,
) -> Result<BTreeMap<ParamId, Vec<bool>>> {
    mask.validate(graph)?;
    match mask {
        PruneMask::Unstructured(m) => Ok(m.clone()),
        PruneMask::Structured(_) => {
            let map = graph.channel_map()?;
            let removal = space_removal(graph, &map, mask)?;
            Ok(channel_entries(graph, &map, &removal, EntrySet::Penalty))
        }
    }
}

fn add_penalty<T: Scalar>(graph: &mut ModelGraph<T>, entries: &BTreeMap<ParamId, Vec<bool>>, coef: f64) {
    if coef == 0.0 {
        return;
    }
    let c = T::from_f64_lossy(coef);
    for (&pid, flags) in entries {
        let p = graph.param_mut(pid);
        if p.tensor.grad().is_none() {
            p.tensor.zero_grad();
        }
        let (w, g) = p.tensor.data_and_grad_mut();
        for i in (0..w.len()).filter(|&i| flags[i]) {
            g[i] = g[i] + c * w[i];
        }
    }
}

/// Adds `a * mu * w` to the gradient of every penalized entry.
pub fn swd_penalty_gradient<T: Scalar>(
    graph: &mut ModelGraph<T>,
    mask: &PruneMask,
    a: f64,
    mu: f64,
) -> Result<()> {
    let entries = penalty_entries(graph, mask)?;
    add_penalty(graph, &entries, a * mu);
    Ok(())
}

/// The targeted set at the current weights, without refusing emptied layers.
pub fn current_selection<T: Scalar>(
    graph: &ModelGraph<T>,
    target: PruneTarget,
    structure: Structure,
) -> Result<PruneMask> {
    match structure {
        Structure::Unstructured => select_unstructured(graph, target),
        Structure::Structured => structured_candidates(graph, target),
    }
}

/// Selection state carried across epochs.
#[derive(Debug, Clone, Default)]
pub struct SwdTracker {
    pub current: Option<PruneMask>,
    /// Selection at the end of the previous logged epoch (or at the first
    /// step), the reference for churn.
    pub reference: Option<PruneMask>,
    entries: BTreeMap<ParamId, Vec<bool>>,
}

impl SwdTracker {
    pub fn restore<T: Scalar>(
        graph: &ModelGraph<T>,
        current: Option<PruneMask>,
        reference: Option<PruneMask>,
    ) -> Result<Self> {
        let entries = match &current {
            Some(m) => penalty_entries(graph, m)?,
            None => BTreeMap::new(),
        };
        Ok(Self {
            current,
            reference,
            entries,
        })
    }
}

/// Total optimizer steps of a run over `n` training examples.
pub fn total_steps(settings: &TrainSettings, n: usize) -> usize {
    settings.epochs * settings.steps_per_epoch(n)
}

/// One epoch of selective-decay training.
pub fn swd_epoch<T: Scalar>(
    session: &mut Session<T>,
    tracker: &mut SwdTracker,
    train: &Dataset<T>,
    test: Option<&Dataset<T>>,
    settings: &TrainSettings,
    cfg: &SwdConfig,
) -> Result<HistoryRow> {
    cfg.validate()?;
    let s_final = total_steps(settings, train.len());
    session.sgd.lr = settings.lr.at(session.epoch, settings.epochs);
    let mu = settings.mu;
    let mut a = cfg.schedule.coefficient(session.step, s_final);
    let result = train_epoch(
        &mut session.graph,
        &mut session.sgd,
        train,
        settings.batch_size,
        settings.seed,
        session.epoch,
        settings.augment,
        &mut session.step,
        |graph, step| {
            if cfg.schedule.is_disabled() {
                return Ok(());
            }
            if tracker.current.is_none() || step % cfg.reselect_interval == 0 {
                let mask = current_selection(graph, cfg.target, cfg.structure)?;
                tracker.entries = penalty_entries(graph, &mask)?;
                if tracker.reference.is_none() {
                    tracker.reference = Some(mask.clone());
                }
                tracker.current = Some(mask);
            }
            a = cfg.schedule.coefficient(step, s_final);
            add_penalty(graph, &tracker.entries, a * mu);
            Ok(())
        },
    );
    let loss = result.map_err(|e| match e {
        Error::Divergence { step, what, .. } => Error::Divergence {
            step,
            what,
            swd_coefficient: Some(a),
        },
        other => other,
    })?;
    let (churn, selected) = match &tracker.current {
        Some(cur) => {
            let churn = tracker.reference.as_ref().map_or(0.0, |r| cur.churn_from(r));
            tracker.reference = Some(cur.clone());
            (churn, cur.selected_count())
        }
        None => (0.0, 0),
    };
    let row = HistoryRow {
        epoch: session.epoch,
        step: session.step,
        a,
        train_loss: loss,
        test_acc: maybe_evaluate(&mut session.graph, test)?,
        churn,
        selected_count: selected,
    };
    session.epoch += 1;
    session.history.push(row.clone());
    Ok(row)
}

/// Trains for `settings.epochs` epochs with the selective penalty.
pub fn train_swd<T: Scalar>(
    graph: ModelGraph<T>,
    train: &Dataset<T>,
    test: Option<&Dataset<T>>,
    settings: &TrainSettings,
    cfg: &SwdConfig,
) -> Result<(Session<T>, SwdTracker)> {
    let mut session = Session::new(graph, settings)?;
    let mut tracker = SwdTracker::default();
    while session.epoch < settings.epochs {
        swd_epoch(&mut session, &mut tracker, train, test, settings, cfg)?;
    }
    Ok((session, tracker))
}

/// Result of the single post-training removal.
#[derive(Debug, Clone)]
pub struct Removal<T> {
    pub graph: ModelGraph<T>,
    pub mask: PruneMask,
    pub acc_before: f64,
    pub acc_after: f64,
}

/// Evaluates, removes the selection at `target` (zeroing for unstructured,
/// physical removal for structured), and evaluates again.
pub fn final_removal<T: Scalar>(
    graph: &ModelGraph<T>,
    test: &Dataset<T>,
    target: PruneTarget,
    structure: Structure,
) -> Result<Removal<T>> {
    let mut before = graph.clone();
    let acc_before = evaluate(&mut before, test, EVAL_BATCH)?;
    let (mut pruned, mask) = match structure {
        Structure::Unstructured => {
            let mask = select_unstructured(graph, target)?;
            let mut g = graph.clone();
            apply_soft_mask(&mut g, &mask)?;
            (g, mask)
        }
        Structure::Structured => {
            let mask = select_structured(graph, target)?;
            (hard_prune_structured(graph, &mask)?, mask)
        }
    };
    let acc_after = evaluate(&mut pruned, test, EVAL_BATCH)?;
    Ok(Removal {
        graph: pruned,
        mask,
        acc_before,
        acc_after,
    })
}
