//! Flat `key = value` experiment description.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use swd_core::optim::LrSchedule;
use swd_core::prune::{PruneTarget, Structure};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Model {
    Lenet5,
    MiniResnet { depth_blocks: usize, base_width: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Mnist { dir: PathBuf },
    Cifar10 { dir: PathBuf },
    Synthetic {
        train: usize,
        test: usize,
        classes: usize,
        shape: [usize; 3],
        margin: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Baseline,
    Swd,
    Han,
    Liu,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Swd => "swd",
            Method::Han => "han",
            Method::Liu => "liu",
        }
    }
}

/// Validated run description. Built from a [`RawConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: Model,
    pub dataset: DatasetSpec,
    /// Caps on the number of examples used (0 = all).
    pub train_limit: usize,
    pub test_limit: usize,
    pub method: Method,
    pub structure: Structure,
    pub target: PruneTarget,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub mu: f64,
    pub weight_decay: bool,
    pub a_min: f64,
    pub a_max: f64,
    pub reselect_interval: usize,
    pub lambda: f64,
    pub han_iterations: usize,
    pub finetune_epochs: usize,
    pub seed: u64,
    pub augment_crop: usize,
    pub augment_flip: bool,
    pub out_dir: PathBuf,
    /// The accepted key/value pairs, for reports and checkpoints.
    pub raw: RawConfig,
}

/// Unvalidated key/value pairs in file order of precedence.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RawConfig(pub BTreeMap<String, String>);

const KEYS: &[&str] = &[
    "name",
    "model",
    "depth_blocks",
    "base_width",
    "dataset",
    "data_dir",
    "train_limit",
    "test_limit",
    "synthetic_train",
    "synthetic_test",
    "synthetic_classes",
    "synthetic_shape",
    "synthetic_margin",
    "method",
    "structure",
    "target",
    "epochs",
    "batch_size",
    "lr_schedule",
    "lr",
    "momentum",
    "mu",
    "weight_decay",
    "a_min",
    "a_max",
    "reselect_interval",
    "lambda",
    "han_iterations",
    "finetune_epochs",
    "seed",
    "augment_crop",
    "augment_flip",
    "out_dir",
];

fn field_err<T>(key: &str, msg: impl std::fmt::Display) -> Result<T> {
    Err(HarnessError::Config {
        field: key.to_string(),
        message: msg.to_string(),
    })
}

impl RawConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return field_err(&format!("line {}", n + 1), format!("expected key = value, got {line:?}"));
            };
            raw.set(k.trim(), v.trim())?;
        }
        Ok(raw)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim_start_matches("--").replace('-', "_");
        if !KEYS.contains(&key.as_str()) {
            return field_err(&key, "unknown key");
        }
        self.0.insert(key, value.to_string());
        Ok(())
    }

    /// Applies `--key value` or `--key=value` overrides.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<()> {
        let mut it = args.iter();
        while let Some(arg) = it.next() {
            let Some(flag) = arg.strip_prefix("--") else {
                return field_err(arg, "overrides must look like --key value");
            };
            match flag.split_once('=') {
                Some((k, v)) => self.set(k, v)?,
                None => {
                    let Some(v) = it.next() else {
                        return field_err(flag, "missing value");
                    };
                    self.set(flag, v)?;
                }
            }
        }
        Ok(())
    }

    /// Canonical `key=value;...` rendering.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.0 {
            if !s.is_empty() {
                s.push(';');
            }
            let _ = write!(s, "{k}={v}");
        }
        s
    }

    /// Inverse of [`RawConfig::snapshot`].
    pub fn from_snapshot(s: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        for pair in s.split(';').filter(|p| !p.is_empty()) {
            let Some((k, v)) = pair.split_once('=') else {
                return field_err(pair, "malformed snapshot entry");
            };
            raw.set(k, v)?;
        }
        Ok(raw)
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .or_else(|e| field_err(key, format!("cannot parse {v:?}: {e}"))),
        }
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    fn required<T: FromStr>(&self, key: &str, why: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.parsed(key)? {
            Some(v) => Ok(v),
            None => field_err(key, format!("required {why}")),
        }
    }

    pub fn validate(&self) -> Result<ExperimentConfig> {
        let model = match self.get("model").unwrap_or("lenet5") {
            "lenet5" => Model::Lenet5,
            "mini_resnet" => Model::MiniResnet {
                depth_blocks: self.or("depth_blocks", 3)?,
                base_width: self.or("base_width", 16)?,
            },
            other => return field_err("model", format!("unknown model {other:?} (lenet5 | mini_resnet)")),
        };
        if let Model::MiniResnet { depth_blocks, base_width } = model {
            if depth_blocks == 0 {
                return field_err("depth_blocks", "must be at least 1");
            }
            if base_width == 0 {
                return field_err("base_width", "must be at least 1");
            }
        }
        let data_dir = |default: &str| PathBuf::from(self.get("data_dir").unwrap_or(default));
        let dataset = match self.get("dataset").unwrap_or("mnist") {
            "mnist" => DatasetSpec::Mnist { dir: data_dir("data/mnist") },
            "cifar10" => DatasetSpec::Cifar10 { dir: data_dir("data/cifar10") },
            "synthetic" => {
                let shape = match self.get("synthetic_shape") {
                    None => match model {
                        Model::Lenet5 => [1, 28, 28],
                        Model::MiniResnet { .. } => [3, 32, 32],
                    },
                    Some(s) => parse_shape(s)?,
                };
                let margin: f64 = self.or("synthetic_margin", 3.0)?;
                if !(margin > 0.0 && margin.is_finite()) {
                    return field_err("synthetic_margin", "must be positive");
                }
                DatasetSpec::Synthetic {
                    train: self.or("synthetic_train", 512)?,
                    test: self.or("synthetic_test", 256)?,
                    classes: self.or("synthetic_classes", 10)?,
                    shape,
                    margin,
                }
            }
            other => return field_err("dataset", format!("unknown dataset {other:?} (mnist | cifar10 | synthetic)")),
        };
        if let (Model::Lenet5, DatasetSpec::Synthetic { shape, .. }) = (model, &dataset) {
            if *shape != [1, 28, 28] {
                return field_err("synthetic_shape", "lenet5 needs 1x28x28 input");
            }
        }
        if let (Model::Lenet5, DatasetSpec::Cifar10 { .. }) = (model, &dataset) {
            return field_err("dataset", "lenet5 takes 1x28x28 input; use mini_resnet for cifar10");
        }
        let method = match self.get("method").unwrap_or("baseline") {
            "baseline" => Method::Baseline,
            "swd" => Method::Swd,
            "han" => Method::Han,
            "liu" => Method::Liu,
            other => return field_err("method", format!("unknown method {other:?} (baseline | swd | han | liu)")),
        };
        let structure = match self.get("structure") {
            None => match method {
                Method::Liu => Structure::Structured,
                _ => Structure::Unstructured,
            },
            Some(s) => Structure::from_str(s).or_else(|e| field_err("structure", e))?,
        };
        match (method, structure) {
            (Method::Han, Structure::Structured) => return field_err("structure", "han is unstructured only"),
            (Method::Liu, Structure::Unstructured) => return field_err("structure", "liu is structured only"),
            _ => {}
        }
        if structure == Structure::Structured && model == Model::Lenet5 && method != Method::Baseline {
            return field_err("structure", "structured pruning needs batchnorm layers (use mini_resnet)");
        }
        let target = match method {
            Method::Baseline => self.or("target", 0.0)?,
            _ => self.required("target", "for pruning methods")?,
        };
        let target = PruneTarget::new(target).or_else(|e| field_err("target", e))?;
        let epochs: usize = self.or("epochs", 10)?;
        let batch_size: usize = self.or("batch_size", 128)?;
        if batch_size == 0 {
            return field_err("batch_size", "must be positive");
        }
        let base_lr: f64 = self.or("lr", 0.1)?;
        if !(base_lr > 0.0 && base_lr.is_finite()) {
            return field_err("lr", "must be positive");
        }
        let lr = match self.get("lr_schedule").unwrap_or("constant") {
            "constant" => LrSchedule::Constant { lr: base_lr },
            "three_phase" => LrSchedule::ThreePhase { base: base_lr },
            other => return field_err("lr_schedule", format!("unknown schedule {other:?} (constant | three_phase)")),
        };
        let momentum: f64 = self.or("momentum", 0.0)?;
        if !(0.0..1.0).contains(&momentum) {
            return field_err("momentum", "must lie in [0, 1)");
        }
        let mu: f64 = self.or("mu", 5e-4)?;
        if !(mu >= 0.0 && mu.is_finite()) {
            return field_err("mu", "must be finite and non-negative");
        }
        let (a_min, a_max) = if method == Method::Swd {
            let a_min: f64 = self.required("a_min", "for method swd")?;
            let a_max: f64 = self.required("a_max", "for method swd")?;
            if a_min > a_max {
                return field_err("a_min", format!("must be <= a_max ({a_min} > {a_max})"));
            }
            let disabled = a_min == 0.0 && a_max == 0.0;
            if !disabled && !(a_min > 0.0 && a_max.is_finite()) {
                return field_err("a_min", "must be positive (or a_min = a_max = 0 to disable)");
            }
            (a_min, a_max)
        } else {
            (0.0, 0.0)
        };
        let reselect_interval: usize = self.or("reselect_interval", 1)?;
        if reselect_interval == 0 {
            return field_err("reselect_interval", "must be at least 1");
        }
        let lambda: f64 = if method == Method::Liu {
            self.required("lambda", "for method liu")?
        } else {
            self.or("lambda", 0.0)?
        };
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return field_err("lambda", "must be finite and non-negative");
        }
        let han_iterations: usize = self.or("han_iterations", 5)?;
        if method == Method::Han && han_iterations == 0 {
            return field_err("han_iterations", "must be at least 1");
        }
        let finetune_default = if method == Method::Liu { 10 } else { 3 };
        let name = match self.get("name") {
            Some(n) => n.to_string(),
            None => format!("{}-T{}", method.name(), target.fraction()),
        };
        if name.is_empty() || name.contains(['/', '\\', ',']) {
            return field_err("name", "must be non-empty without path separators or commas");
        }
        Ok(ExperimentConfig {
            out_dir: PathBuf::from(self.get("out_dir").unwrap_or("runs")).join(&name),
            model,
            dataset,
            train_limit: self.or("train_limit", 0)?,
            test_limit: self.or("test_limit", 0)?,
            method,
            structure,
            target,
            epochs,
            batch_size,
            lr,
            momentum,
            mu,
            weight_decay: self.or("weight_decay", false)?,
            a_min,
            a_max,
            reselect_interval,
            lambda,
            han_iterations,
            finetune_epochs: self.or("finetune_epochs", finetune_default)?,
            seed: self.or("seed", 0)?,
            augment_crop: self.or("augment_crop", 0)?,
            augment_flip: self.or("augment_flip", false)?,
            raw: {
                let mut r = self.clone();
                r.0.insert("name".into(), name.clone());
                r
            },
            name,
        })
    }
}

fn parse_shape(s: &str) -> Result<[usize; 3]> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| d.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .or_else(|e| field_err("synthetic_shape", format!("{s:?}: {e}")))?;
    match dims.as_slice() {
        &[c, h, w] if c > 0 && h > 0 && w > 0 => Ok([c, h, w]),
        _ => field_err("synthetic_shape", format!("expected CxHxW, got {s:?}")),
    }
}

impl ExperimentConfig {
    /// `[C, H, W]` of one example.
    pub fn input_shape(&self) -> [usize; 3] {
        match &self.dataset {
            DatasetSpec::Mnist { .. } => [1, 28, 28],
            DatasetSpec::Cifar10 { .. } => [3, 32, 32],
            DatasetSpec::Synthetic { shape, .. } => *shape,
        }
    }

    pub fn num_classes(&self) -> usize {
        match &self.dataset {
            DatasetSpec::Synthetic { classes, .. } => *classes,
            _ => 10,
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        RawConfig::parse(text)?.validate()
    }

    /// Same run with one key changed.
    pub fn with(&self, key: &str, value: &str) -> Result<Self> {
        let mut raw = self.raw.clone();
        raw.set(key, value)?;
        raw.validate()
    }
}
