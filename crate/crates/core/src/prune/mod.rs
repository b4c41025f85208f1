//! Pruning masks, selection criteria, accounting and removal.

mod apply;
mod count;
mod select;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::nn::{LayerId, LayerKind, ModelGraph, ParamId};
use crate::scalar::Scalar;

pub use apply::{apply_soft_mask, clear_soft_mask, hard_prune_structured};
pub use count::{count_macs, count_params, guard_layer_survival, removed_params};
pub use select::{select, select_structured, select_unstructured, structured_candidates};

pub(crate) use count::{channel_entries, space_removal, EntrySet};

/// Granularity of a pruning criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    Unstructured,
    Structured,
}

impl std::str::FromStr for Structure {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unstructured" => Ok(Structure::Unstructured),
            "structured" => Ok(Structure::Structured),
            other => config_err(format!("unknown structure {other:?}")),
        }
    }
}

impl std::fmt::Display for Structure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Structure::Unstructured => "unstructured",
            Structure::Structured => "structured",
        })
    }
}

/// Fraction of all parameters to remove.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct PruneTarget(f64);

impl PruneTarget {
    pub fn new(fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return config_err(format!("pruning target {fraction} outside [0, 1]"));
        }
        Ok(Self(fraction))
    }

    pub fn fraction(self) -> f64 {
        self.0
    }

    /// Percentage of parameters kept, `100 * (1 - T)`.
    pub fn params_target_pct(self) -> f64 {
        100.0 * (1.0 - self.0)
    }
}

impl TryFrom<f64> for PruneTarget {
    type Error = crate::Error;

    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<PruneTarget> for f64 {
    fn from(t: PruneTarget) -> f64 {
        t.0
    }
}

/// A set of selected entries (`true` = selected for pruning).
///
/// Unstructured masks are keyed by parameter id and hold one flag per
/// tensor entry; structured masks are keyed by batchnorm layer id and hold
/// one flag per channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PruneMask {
    Unstructured(BTreeMap<ParamId, Vec<bool>>),
    Structured(BTreeMap<LayerId, Vec<bool>>),
}

#[derive(Serialize, Deserialize)]
struct MaskDocument {
    kind: Structure,
    tensors: BTreeMap<String, Vec<usize>>,
}

impl PruneMask {
    pub fn empty(kind: Structure) -> Self {
        match kind {
            Structure::Unstructured => PruneMask::Unstructured(BTreeMap::new()),
            Structure::Structured => PruneMask::Structured(BTreeMap::new()),
        }
    }

    pub fn kind(&self) -> Structure {
        match self {
            PruneMask::Unstructured(_) => Structure::Unstructured,
            PruneMask::Structured(_) => Structure::Structured,
        }
    }

    fn flags(&self) -> &BTreeMap<usize, Vec<bool>> {
        match self {
            PruneMask::Unstructured(m) | PruneMask::Structured(m) => m,
        }
    }

    /// Number of `true` flags. For structured masks every member of a
    /// coupled space counts its own flag.
    pub fn selected_count(&self) -> usize {
        self.flags()
            .values()
            .map(|v| v.iter().filter(|&&b| b).count())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.selected_count() == 0
    }

    fn selected_set(&self) -> BTreeSet<(usize, usize)> {
        self.flags()
            .iter()
            .flat_map(|(&k, v)| {
                v.iter()
                    .enumerate()
                    .filter(|(_, &b)| b)
                    .map(move |(i, _)| (k, i))
            })
            .collect()
    }

    /// Checks lengths against the graph and the coupling invariant.
    pub fn validate<T: Scalar>(&self, graph: &ModelGraph<T>) -> Result<()> {
        match self {
            PruneMask::Unstructured(m) => {
                for (&pid, flags) in m {
                    let Some(p) = graph.params().get(pid) else {
                        return config_err(format!("mask refers to unknown parameter {pid}"));
                    };
                    if flags.len() != p.tensor.len() {
                        return config_err(format!(
                            "mask for {} has {} flags, tensor has {} entries",
                            p.name,
                            flags.len(),
                            p.tensor.len()
                        ));
                    }
                }
                Ok(())
            }
            PruneMask::Structured(_) => {
                let map = graph.channel_map()?;
                space_removal(graph, &map, self).map(|_| ())
            }
        }
    }

    /// Fraction of selections that differ between `prev` and `self`:
    /// `|prev xor self| / (|prev| + |self|)`, zero when both are empty.
    pub fn churn_from(&self, prev: &PruneMask) -> f64 {
        let a = prev.selected_set();
        let b = self.selected_set();
        let total = a.len() + b.len();
        if total == 0 {
            return 0.0;
        }
        a.symmetric_difference(&b).count() as f64 / total as f64
    }

    /// JSON document `{kind, tensors: {name: [selected indices]}}`, keyed by
    /// parameter name (unstructured) or batchnorm layer name (structured).
    pub fn to_json<T: Scalar>(&self, graph: &ModelGraph<T>) -> Result<String> {
        self.validate(graph)?;
        let mut tensors = BTreeMap::new();
        for (&key, flags) in self.flags() {
            let name = match self {
                PruneMask::Unstructured(_) => graph.param(key).name.clone(),
                PruneMask::Structured(_) => graph.layers()[key].name.clone(),
            };
            let idx = flags
                .iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(|(i, _)| i)
                .collect();
            tensors.insert(name, idx);
        }
        let doc = MaskDocument {
            kind: self.kind(),
            tensors,
        };
        serde_json::to_string_pretty(&doc).map_err(|e| crate::Error::Config(e.to_string()))
    }

    pub fn from_json<T: Scalar>(graph: &ModelGraph<T>, json: &str) -> Result<Self> {
        let doc: MaskDocument =
            serde_json::from_str(json).map_err(|e| crate::Error::Config(format!("mask json: {e}")))?;
        let mut flags = BTreeMap::new();
        for (name, idx) in doc.tensors {
            let (key, len) = match doc.kind {
                Structure::Unstructured => {
                    let pid = graph
                        .param_by_name(&name)
                        .ok_or_else(|| crate::Error::Config(format!("unknown parameter {name}")))?;
                    (pid, graph.param(pid).tensor.len())
                }
                Structure::Structured => {
                    let lid = graph
                        .layers()
                        .iter()
                        .position(|l| l.name == name)
                        .ok_or_else(|| crate::Error::Config(format!("unknown layer {name}")))?;
                    match graph.layers()[lid].kind {
                        LayerKind::BatchNorm { scale, .. } => (lid, graph.param(scale).tensor.len()),
                        _ => return config_err(format!("{name} is not a batchnorm layer")),
                    }
                }
            };
            let mut v = vec![false; len];
            for i in idx {
                if i >= len {
                    return config_err(format!("index {i} out of range for {name}"));
                }
                v[i] = true;
            }
            flags.insert(key, v);
        }
        let mask = match doc.kind {
            Structure::Unstructured => PruneMask::Unstructured(flags),
            Structure::Structured => PruneMask::Structured(flags),
        };
        mask.validate(graph)?;
        Ok(mask)
    }
}
