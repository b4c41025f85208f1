//! Versioned checkpoint directory: `manifest.json` plus one little-endian
//! `f32` blob per tensor.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use swd_core::baselines::{HanState, LiuState};
use swd_core::nn::{LayerKind, ModelGraph};
use swd_core::optim::SgdState;
use swd_core::prune::{hard_prune_structured, PruneMask};
use swd_core::swd::SwdTracker;
use swd_core::train::{HistoryRow, Session};

use crate::config::{ExperimentConfig, RawConfig};
use crate::error::{HarnessError, Result};
use crate::pipeline::{initial_model, MethodState, Run};

pub const VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Saved between epochs; resumable.
    Training,
    /// Saved after the last epoch, before the final removal.
    Final,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Velocity,
    RunningMean,
    RunningVar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub role: Option<String>,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MethodManifest {
    Baseline,
    Swd {
        current: Option<serde_json::Value>,
        reference: Option<serde_json::Value>,
    },
    Han {
        mask: Option<serde_json::Value>,
        acc_before_final: Option<f64>,
    },
    /// `removed` is keyed by the unpruned architecture.
    Liu {
        removed: Option<serde_json::Value>,
        acc_before: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub dtype: String,
    pub config: String,
    pub phase: Phase,
    pub epoch: usize,
    pub step: usize,
    pub elapsed: f64,
    pub lr: f64,
    pub momentum: f64,
    pub mu: f64,
    pub tensors: Vec<TensorEntry>,
    /// Frozen entry indices per parameter name.
    pub frozen: BTreeMap<String, Vec<usize>>,
    pub history: Vec<HistoryRow>,
    pub state: MethodManifest,
}

fn corrupt(msg: impl Into<String>) -> HarnessError {
    HarnessError::Checkpoint(msg.into())
}

fn mask_value(graph: &ModelGraph<f32>, m: &Option<PruneMask>) -> Result<Option<serde_json::Value>> {
    m.as_ref()
        .map(|m| Ok(serde_json::from_str(&m.to_json(graph)?)?))
        .transpose()
}

fn mask_from(graph: &ModelGraph<f32>, v: &Option<serde_json::Value>) -> Result<Option<PruneMask>> {
    v.as_ref()
        .map(|v| Ok(PruneMask::from_json(graph, &v.to_string())?))
        .transpose()
}

/// Batchnorm layer name and running-statistics slot, in layer order.
fn stats_layers(graph: &ModelGraph<f32>) -> Vec<(String, usize)> {
    graph
        .layers()
        .iter()
        .filter_map(|l| match l.kind {
            LayerKind::BatchNorm { stats, .. } => Some((l.name.clone(), stats)),
            _ => None,
        })
        .collect()
}

fn to_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes `run` to `dir`, replacing any previous checkpoint there.
pub fn save(run: &Run, dir: &Path, phase: Phase) -> Result<()> {
    let graph = &run.session.graph;
    let staging = dir.with_extension("tmp");
    if staging.exists() {
        std::fs::remove_dir_all(&staging)?;
    }
    std::fs::create_dir_all(&staging)?;
    let mut tensors = Vec::new();
    let mut put = |name: String, kind: TensorKind, shape: Vec<usize>, role: Option<String>, data: &[f32]| -> Result<()> {
        let file = format!("t{:04}.bin", tensors.len());
        let bytes = to_bytes(data);
        std::fs::write(staging.join(&file), &bytes)?;
        tensors.push(TensorEntry {
            name,
            kind,
            shape,
            role,
            file,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(())
    };
    let mut frozen = BTreeMap::new();
    for (i, p) in graph.params().iter().enumerate() {
        put(p.name.clone(), TensorKind::Param, p.tensor.shape().to_vec(), Some(format!("{:?}", p.role)), p.tensor.data())?;
        put(p.name.clone(), TensorKind::Velocity, vec![p.tensor.len()], None, &run.session.sgd.velocity()[i])?;
        if let Some(f) = &p.frozen {
            frozen.insert(p.name.clone(), f.iter().enumerate().filter(|(_, &b)| b).map(|(k, _)| k).collect());
        }
    }
    for (name, i) in stats_layers(graph) {
        let st = &graph.running_stats()[i];
        put(name.clone(), TensorKind::RunningMean, vec![st.mean.len()], None, &st.mean)?;
        put(name, TensorKind::RunningVar, vec![st.var.len()], None, &st.var)?;
    }
    let state = match &run.state {
        MethodState::Baseline => MethodManifest::Baseline,
        MethodState::Swd(t) => MethodManifest::Swd {
            current: mask_value(graph, &t.current)?,
            reference: mask_value(graph, &t.reference)?,
        },
        MethodState::Han(h) => MethodManifest::Han {
            mask: mask_value(graph, &h.mask)?,
            acc_before_final: h.acc_before_final,
        },
        MethodState::Liu(l) => MethodManifest::Liu {
            removed: mask_value(&initial_model(&run.cfg)?, &l.removed)?,
            acc_before: l.acc_before,
        },
    };
    let manifest = Manifest {
        version: VERSION,
        dtype: "f32".into(),
        config: run.cfg.raw.snapshot(),
        phase,
        epoch: run.session.epoch,
        step: run.session.step,
        elapsed: run.elapsed,
        lr: run.session.sgd.lr,
        momentum: run.session.sgd.momentum,
        mu: run.session.sgd.mu,
        tensors,
        frozen,
        history: run.session.history.clone(),
        state,
    };
    std::fs::write(staging.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    if dir.exists() {
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::rename(&staging, dir)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| corrupt(format!("{}: {e}", dir.join(MANIFEST).display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| corrupt(format!("unreadable manifest: {e}")))?;
    let version = value.get("version").and_then(|v| v.as_u64());
    if version != Some(VERSION as u64) {
        return Err(corrupt(format!("unsupported checkpoint version {version:?}, expected {VERSION}")));
    }
    let m: Manifest = serde_json::from_value(value).map_err(|e| corrupt(format!("malformed manifest: {e}")))?;
    if m.dtype != "f32" {
        return Err(corrupt(format!("unsupported dtype {}", m.dtype)));
    }
    Ok(m)
}

/// Config stored in the checkpoint at `dir`.
pub fn stored_config(dir: &Path) -> Result<RawConfig> {
    RawConfig::from_snapshot(&read_manifest(dir)?.config)
}

fn read_blob(dir: &Path, e: &TensorEntry) -> Result<Vec<f32>> {
    let bytes = std::fs::read(dir.join(&e.file)).map_err(|err| corrupt(format!("{}: {err}", e.file)))?;
    let n: usize = e.shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(corrupt(format!(
            "{} ({}) holds {} bytes, expected {}",
            e.file,
            e.name,
            bytes.len(),
            4 * n
        )));
    }
    if hex::encode(Sha256::digest(&bytes)) != e.sha256 {
        return Err(corrupt(format!("digest mismatch in {} ({})", e.file, e.name)));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn shape_check(name: &str, stored: &[usize], model: &[usize]) -> Result<()> {
    if stored != model {
        return Err(corrupt(format!(
            "shape mismatch for {name}: checkpoint {stored:?}, model {model:?}"
        )));
    }
    Ok(())
}

/// Restores the run saved in `dir` onto the architecture described by `cfg`.
pub fn load(dir: &Path, cfg: &ExperimentConfig) -> Result<Run> {
    let m = read_manifest(dir)?;
    let original = initial_model(cfg)?;
    let mut graph = match &m.state {
        MethodManifest::Liu { removed: Some(v), .. } => {
            let mask = mask_from(&original, &Some(v.clone()))?.expect("present");
            hard_prune_structured(&original, &mask)?
        }
        _ => original.clone(),
    };
    let mut seen = vec![false; graph.params().len()];
    let mut velocity = vec![None; graph.params().len()];
    let mut stats_seen = vec![[false; 2]; graph.running_stats().len()];
    let slots: BTreeMap<String, usize> = stats_layers(&graph).into_iter().collect();
    for e in &m.tensors {
        match e.kind {
            TensorKind::Param | TensorKind::Velocity => {
                let pid = graph
                    .param_by_name(&e.name)
                    .ok_or_else(|| corrupt(format!("checkpoint tensor {} has no counterpart in the model", e.name)))?;
                let p = graph.param(pid);
                if e.kind == TensorKind::Param {
                    shape_check(&e.name, &e.shape, p.tensor.shape())?;
                    let data = read_blob(dir, e)?;
                    graph.param_mut(pid).tensor.data_mut().copy_from_slice(&data);
                    seen[pid] = true;
                } else {
                    shape_check(&e.name, &e.shape, &[p.tensor.len()])?;
                    velocity[pid] = Some(read_blob(dir, e)?);
                }
            }
            TensorKind::RunningMean | TensorKind::RunningVar => {
                let i = slots
                    .get(&e.name)
                    .copied()
                    .ok_or_else(|| corrupt(format!("running statistics of {} have no counterpart in the model", e.name)))?;
                let k = (e.kind == TensorKind::RunningVar) as usize;
                let st = &mut graph.running_stats_mut()[i];
                let target = if k == 0 { &mut st.mean } else { &mut st.var };
                shape_check(&format!("{} running statistics", e.name), &e.shape, &[target.len()])?;
                let data = read_blob(dir, e)?;
                target.copy_from_slice(&data);
                stats_seen[i][k] = true;
            }
        }
    }
    if let Some(pid) = seen.iter().position(|s| !s) {
        return Err(corrupt(format!("model tensor {} is missing from the checkpoint", graph.param(pid).name)));
    }
    if stats_seen.iter().flatten().any(|s| !s) {
        return Err(corrupt("running statistics are missing from the checkpoint"));
    }
    for (name, idx) in &m.frozen {
        let pid = graph
            .param_by_name(name)
            .ok_or_else(|| corrupt(format!("frozen entries for unknown tensor {name}")))?;
        let len = graph.param(pid).tensor.len();
        let mut flags = vec![false; len];
        for &k in idx {
            *flags.get_mut(k).ok_or_else(|| corrupt(format!("frozen index {k} out of range for {name}")))? = true;
        }
        graph.param_mut(pid).frozen = Some(flags);
    }
    let mut sgd = SgdState::new(&graph, m.lr, m.momentum, m.mu)?;
    for (pid, v) in velocity.into_iter().enumerate() {
        let v = v.ok_or_else(|| corrupt(format!("velocity of {} is missing", graph.param(pid).name)))?;
        sgd.velocity_mut()[pid].copy_from_slice(&v);
    }
    let state = match &m.state {
        MethodManifest::Baseline => MethodState::Baseline,
        MethodManifest::Swd { current, reference } => MethodState::Swd(SwdTracker::restore(
            &graph,
            mask_from(&graph, current)?,
            mask_from(&graph, reference)?,
        )?),
        MethodManifest::Han { mask, acc_before_final } => MethodState::Han(HanState {
            mask: mask_from(&graph, mask)?,
            acc_before_final: *acc_before_final,
        }),
        MethodManifest::Liu { removed, acc_before } => MethodState::Liu(LiuState {
            removed: mask_from(&original, removed)?,
            acc_before: *acc_before,
        }),
    };
    let expected = cfg.method.name();
    let stored = match &state {
        MethodState::Baseline => "baseline",
        MethodState::Swd(_) => "swd",
        MethodState::Han(_) => "han",
        MethodState::Liu(_) => "liu",
    };
    if expected != stored {
        return Err(corrupt(format!("checkpoint holds a {stored} run, config asks for {expected}")));
    }
    Ok(Run {
        cfg: cfg.clone(),
        session: Session {
            graph,
            sgd,
            epoch: m.epoch,
            step: m.step,
            history: m.history,
        },
        state,
        elapsed: m.elapsed,
    })
}
