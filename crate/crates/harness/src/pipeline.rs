//! End-to-end runs: data, model, method loop, final removal, report.

use std::path::Path;
use std::time::Instant;

use swd_core::baselines::{
    han_epoch, han_total_epochs, liu_epoch, liu_total_epochs, HanState, IterativePlan, LiuPlan, LiuState,
};
use swd_core::data::{load_cifar10_bin, load_mnist_dir, synthetic_blobs, Augment, Dataset, Split};
use swd_core::nn::{build_lenet5, build_resnet, init_parameters, MiniResNetSpec, ModelGraph};
use swd_core::prune::{count_macs, count_params, structured_candidates, PruneMask, Structure};
use swd_core::swd::{final_removal, swd_epoch, SwdConfig, SwdSchedule, SwdTracker};
use swd_core::train::{evaluate, plain_epoch, HistoryRow, Session, TrainSettings, EVAL_BATCH};

use crate::config::{DatasetSpec, ExperimentConfig, Method, Model};
use crate::error::{HarnessError, Result};
use crate::report::RunReport;

/// Train and test sets of one experiment.
#[derive(Debug, Clone)]
pub struct Data {
    pub train: Dataset<f32>,
    pub test: Dataset<f32>,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Data> {
    let (train, test) = match &cfg.dataset {
        DatasetSpec::Mnist { dir } => (load_mnist_dir(dir, Split::Train)?, load_mnist_dir(dir, Split::Test)?),
        DatasetSpec::Cifar10 { dir } => {
            let batches: Vec<_> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
            (
                load_cifar10_bin(&batches, Split::Train)?,
                load_cifar10_bin(&[dir.join("test_batch.bin")], Split::Test)?,
            )
        }
        DatasetSpec::Synthetic {
            train,
            test,
            classes,
            shape,
            margin,
        } => {
            // one draw, so both halves share the class directions
            let all = synthetic_blobs(cfg.seed, train + test, *classes, *shape, *margin)?;
            (all.subset(0..*train, Split::Train), all.subset(*train..train + test, Split::Test))
        }
    };
    let cap = |d: Dataset<f32>, n: usize| if n == 0 { d } else { d.take(n) };
    Ok(Data {
        train: cap(train, cfg.train_limit),
        test: cap(test, cfg.test_limit),
    })
}

/// Untrained architecture of `cfg`.
pub fn build_model(cfg: &ExperimentConfig) -> Result<ModelGraph<f32>> {
    let g = match cfg.model {
        Model::Lenet5 => build_lenet5(cfg.num_classes())?,
        Model::MiniResnet { depth_blocks, base_width } => build_resnet(&MiniResNetSpec {
            input_shape: cfg.input_shape(),
            depth_blocks,
            base_width,
            num_classes: cfg.num_classes(),
        })?,
    };
    Ok(g)
}

/// Initialized model of `cfg`.
pub fn initial_model(cfg: &ExperimentConfig) -> Result<ModelGraph<f32>> {
    let mut g = build_model(cfg)?;
    init_parameters(&mut g, cfg.seed);
    Ok(g)
}

pub fn settings(cfg: &ExperimentConfig) -> TrainSettings {
    TrainSettings {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        momentum: cfg.momentum,
        mu: cfg.mu,
        weight_decay: cfg.weight_decay,
        seed: cfg.seed,
        augment: Augment {
            crop_padding: cfg.augment_crop,
            flip: cfg.augment_flip,
        },
    }
}

pub fn swd_config(cfg: &ExperimentConfig) -> Result<SwdConfig> {
    let schedule = if cfg.a_min == 0.0 && cfg.a_max == 0.0 {
        SwdSchedule::disabled()
    } else {
        SwdSchedule::new(cfg.a_min, cfg.a_max)?
    };
    Ok(SwdConfig {
        schedule,
        target: cfg.target,
        structure: cfg.structure,
        reselect_interval: cfg.reselect_interval,
    })
}

pub fn han_plan(cfg: &ExperimentConfig) -> Result<IterativePlan> {
    Ok(IterativePlan::new(cfg.han_iterations, cfg.target, cfg.finetune_epochs)?)
}

pub fn liu_plan(cfg: &ExperimentConfig) -> LiuPlan {
    LiuPlan {
        lambda: cfg.lambda,
        target: cfg.target,
        finetune_epochs: cfg.finetune_epochs,
    }
}

/// Method-specific progress carried between epochs.
#[derive(Debug, Clone)]
pub enum MethodState {
    Baseline,
    Swd(SwdTracker),
    Han(HanState),
    Liu(LiuState),
}

/// A run in progress.
#[derive(Debug, Clone)]
pub struct Run {
    pub cfg: ExperimentConfig,
    pub session: Session<f32>,
    pub state: MethodState,
    /// Seconds spent so far, including earlier processes of a resumed run.
    pub elapsed: f64,
}

impl Run {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let graph = initial_model(cfg)?;
        let state = match cfg.method {
            Method::Baseline => MethodState::Baseline,
            Method::Swd => MethodState::Swd(SwdTracker::default()),
            Method::Han => MethodState::Han(HanState::default()),
            Method::Liu => MethodState::Liu(LiuState::default()),
        };
        Ok(Self {
            session: Session::new(graph, &settings(cfg))?,
            cfg: cfg.clone(),
            state,
            elapsed: 0.0,
        })
    }

    pub fn total_epochs(&self) -> Result<usize> {
        let s = settings(&self.cfg);
        Ok(match self.cfg.method {
            Method::Baseline | Method::Swd => s.epochs,
            Method::Han => han_total_epochs(&s, &han_plan(&self.cfg)?),
            Method::Liu => liu_total_epochs(&s, &liu_plan(&self.cfg)),
        })
    }

    pub fn is_done(&self) -> Result<bool> {
        Ok(self.session.epoch >= self.total_epochs()?)
    }

    pub fn step_epoch(&mut self, data: &Data) -> Result<HistoryRow> {
        let t0 = Instant::now();
        let s = settings(&self.cfg);
        let test = Some(&data.test);
        let row = match &mut self.state {
            MethodState::Baseline => plain_epoch(&mut self.session, &data.train, test, &s),
            MethodState::Swd(tracker) => {
                swd_epoch(&mut self.session, tracker, &data.train, test, &s, &swd_config(&self.cfg)?)
            }
            MethodState::Han(state) => {
                han_epoch(&mut self.session, state, &data.train, test, &s, &han_plan(&self.cfg)?)
            }
            MethodState::Liu(state) => liu_epoch(&mut self.session, state, &data.train, test, &s, &liu_plan(&self.cfg)),
        };
        self.elapsed += t0.elapsed().as_secs_f64();
        Ok(row?)
    }

    /// Evaluates and removes the selection, producing the report row.
    pub fn finish(&mut self, data: &Data) -> Result<RunReport> {
        let t0 = Instant::now();
        let original = build_model(&self.cfg)?;
        let shape = self.cfg.input_shape();
        let params_before = original.param_count();
        let macs_before = count_macs(&original, &PruneMask::empty(Structure::Unstructured), shape)?;
        let graph = &mut self.session.graph;
        let outcome = match &self.state {
            MethodState::Baseline => {
                let acc = evaluate(graph, &data.test, EVAL_BATCH)?;
                Ok((params_before, macs_before, acc, acc))
            }
            MethodState::Swd(_) => match final_removal(graph, &data.test, self.cfg.target, self.cfg.structure) {
                Ok(r) => Ok((
                    count_params(graph, &r.mask)?,
                    count_macs(graph, &r.mask, shape)?,
                    r.acc_before,
                    r.acc_after,
                )),
                Err(e) => Err(e),
            },
            MethodState::Han(state) => {
                let mask = state
                    .mask
                    .clone()
                    .unwrap_or_else(|| PruneMask::empty(Structure::Unstructured));
                let acc = evaluate(graph, &data.test, EVAL_BATCH)?;
                Ok((
                    count_params(graph, &mask)?,
                    count_macs(graph, &mask, shape)?,
                    state.acc_before_final.unwrap_or(acc),
                    acc,
                ))
            }
            MethodState::Liu(state) => {
                // the session graph is already the physically smaller model
                let acc = evaluate(graph, &data.test, EVAL_BATCH)?;
                let none = PruneMask::empty(Structure::Structured);
                Ok((
                    graph.param_count(),
                    count_macs(graph, &none, shape)?,
                    state.acc_before.unwrap_or(acc),
                    acc,
                ))
            }
        };
        self.elapsed += t0.elapsed().as_secs_f64();
        match outcome {
            Ok((params_after, macs_after, before, after)) => Ok(RunReport {
                config: self.cfg.raw.snapshot(),
                params_before,
                params_after,
                params_pct: RunReport::pct(params_after, params_before),
                macs_before,
                macs_after,
                acc_before_removal: before,
                acc_after_removal: after,
                wall_time: self.elapsed,
                error: String::new(),
            }),
            Err(e) => Err(e.into()),
        }
    }

    /// Report row for a structured removal that would empty a layer: chance
    /// accuracy after removal, sizes as if the removal had gone through.
    pub fn collapse_report(&mut self, data: &Data, err: &HarnessError) -> Result<RunReport> {
        let original = build_model(&self.cfg)?;
        let shape = self.cfg.input_shape();
        let graph = &mut self.session.graph;
        let acc_before = match &self.state {
            MethodState::Liu(LiuState { acc_before: Some(a), .. }) => *a,
            _ => evaluate(graph, &data.test, EVAL_BATCH)?,
        };
        let mask = structured_candidates(graph, self.cfg.target)?;
        let params_after = count_params(graph, &mask)?;
        let macs_after = count_macs(graph, &mask, shape)?;
        let params_before = original.param_count();
        Ok(RunReport {
            config: self.cfg.raw.snapshot(),
            params_before,
            params_after,
            params_pct: RunReport::pct(params_after, params_before),
            macs_before: count_macs(&original, &PruneMask::empty(Structure::Unstructured), shape)?,
            macs_after,
            acc_before_removal: acc_before,
            acc_after_removal: 100.0 / self.cfg.num_classes() as f64,
            wall_time: self.elapsed,
            error: err.to_string(),
        })
    }

    /// Trains to completion (or `stop_after` total epochs, returning `None`),
    /// calling `on_epoch` after each epoch.
    pub fn drive(
        &mut self,
        data: &Data,
        stop_after: Option<usize>,
        mut on_epoch: impl FnMut(&Run) -> Result<()>,
    ) -> Result<Option<RunReport>> {
        while !self.is_done()? {
            if stop_after.is_some_and(|n| self.session.epoch >= n) {
                return Ok(None);
            }
            if let Err(e) = self.step_epoch(data) {
                return self.collapse_or(data, e).map(Some);
            }
            on_epoch(self)?;
        }
        match self.finish(data) {
            Ok(r) => Ok(Some(r)),
            Err(e) => self.collapse_or(data, e).map(Some),
        }
    }

    fn collapse_or(&mut self, data: &Data, e: HarnessError) -> Result<RunReport> {
        if matches!(e, HarnessError::Core(swd_core::Error::StructuralCollapse(_))) {
            self.collapse_report(data, &e)
        } else {
            Err(e)
        }
    }
}

/// Runs `cfg` end to end in memory.
pub fn run(cfg: &ExperimentConfig, data: &Data) -> Result<RunReport> {
    let mut r = Run::new(cfg)?;
    Ok(r.drive(data, None, |_| Ok(()))?.expect("no stop requested"))
}

/// Runs `cfg` and writes `report.csv`, `history.csv` and a checkpoint
/// under its output directory. With `stop_after`, stops early and leaves
/// only the checkpoint and the history so far.
pub fn run_to_disk(
    mut run: Run,
    data: &Data,
    stop_after: Option<usize>,
) -> Result<Option<RunReport>> {
    let out = run.cfg.out_dir.clone();
    std::fs::create_dir_all(&out)?;
    let ckpt = out.join("checkpoint");
    let report = run.drive(data, stop_after, |r| crate::checkpoint::save(r, &ckpt, crate::checkpoint::Phase::Training))?;
    crate::report::write_history(&out.join("history.csv"), &run.session.history)?;
    if let Some(rep) = &report {
        crate::checkpoint::save(&run, &ckpt, crate::checkpoint::Phase::Final)?;
        crate::report::append_report(&out.join("report.csv"), rep)?;
    }
    Ok(report)
}

/// Shared by the grid and the CLI: runs at `a_min` x `a_max` with all else
/// from `base`.
pub fn grid(
    base: &ExperimentConfig,
    a_min: &[f64],
    a_max: &[f64],
    data: &Data,
    out: Option<&Path>,
) -> Result<crate::report::GridMatrix> {
    let mut cells = Vec::with_capacity(a_max.len());
    for &hi in a_max {
        let mut row = Vec::with_capacity(a_min.len());
        for &lo in a_min {
            let name = format!("{}-amin{lo:e}-amax{hi:e}", base.name);
            let mut raw = base.raw.clone();
            raw.set("method", "swd")?;
            raw.set("a_min", &lo.to_string())?;
            raw.set("a_max", &hi.to_string())?;
            raw.set("name", &name)?;
            let cfg = raw.validate()?;
            let report = match run(&cfg, data) {
                Ok(r) => r,
                // a diverging cell does not stop the sweep
                Err(e @ HarnessError::Core(swd_core::Error::Divergence { .. })) => RunReport {
                    config: cfg.raw.snapshot(),
                    params_before: 0,
                    params_after: 0,
                    params_pct: 0.0,
                    macs_before: 0,
                    macs_after: 0,
                    acc_before_removal: f64::NAN,
                    acc_after_removal: f64::NAN,
                    wall_time: 0.0,
                    error: e.to_string(),
                },
                Err(e) => return Err(e),
            };
            if let Some(dir) = out {
                crate::report::append_report(&dir.join("report.csv"), &report)?;
            }
            row.push(report);
        }
        cells.push(row);
    }
    let m = crate::report::GridMatrix {
        a_min: a_min.to_vec(),
        a_max: a_max.to_vec(),
        cells,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("grid.csv"), m.to_csv()?)?;
    }
    Ok(m)
}
