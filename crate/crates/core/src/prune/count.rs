use std::collections::BTreeMap;

use super::PruneMask;
use crate::error::{config_err, Result};
use crate::nn::{ChannelMap, LayerKind, ModelGraph, ParamId};
use crate::scalar::Scalar;

/// Per-space channel removal flags implied by `mask`. Unstructured masks
/// remove no channel.
pub(crate) fn space_removal<T: Scalar>(
    graph: &ModelGraph<T>,
    map: &ChannelMap,
    mask: &PruneMask,
) -> Result<Vec<Vec<bool>>> {
    let mut removal: Vec<Vec<bool>> = map.spaces.iter().map(|s| vec![false; s.width]).collect();
    let PruneMask::Structured(m) = mask else {
        return Ok(removal);
    };
    let mut seen: Vec<Option<&Vec<bool>>> = vec![None; map.spaces.len()];
    for (lid, flags) in m {
        let Some(&s) = map.bn_space.get(lid) else {
            return config_err(format!("structured mask key {lid} is not a batchnorm layer"));
        };
        let name = &graph.layers()[*lid].name;
        let space = &map.spaces[s];
        if flags.len() != space.width {
            return config_err(format!(
                "mask for {name} has {} flags, layer has {} channels",
                flags.len(),
                space.width
            ));
        }
        if flags.iter().any(|&b| b) && !space.prunable() {
            return config_err(format!("channels of {name} cannot be removed"));
        }
        match seen[s] {
            Some(prev) if prev != flags => {
                return config_err(format!(
                    "mask for {name} differs from other members of its coupling group"
                ));
            }
            _ => seen[s] = Some(flags),
        }
        removal[s].clone_from(flags);
    }
    Ok(removal)
}

/// Which tensor entries belong to a removed channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum EntrySet {
    /// Everything that vanishes structurally: producer filters and biases,
    /// batchnorm scales and shifts, consumer input slices.
    Removal,
    /// Batchnorm scales and producer filters.
    Penalty,
}

pub(crate) fn channel_entries<T: Scalar>(
    graph: &ModelGraph<T>,
    map: &ChannelMap,
    removal: &[Vec<bool>],
    set: EntrySet,
) -> BTreeMap<ParamId, Vec<bool>> {
    let mut out: BTreeMap<ParamId, Vec<bool>> = BTreeMap::new();
    let mut mark = |pid: ParamId, idx: std::ops::Range<usize>| {
        let len = graph.param(pid).tensor.len();
        let v = out.entry(pid).or_insert_with(|| vec![false; len]);
        v[idx].fill(true);
    };
    for (s, space) in map.spaces.iter().enumerate() {
        for c in (0..space.width).filter(|&c| removal[s][c]) {
            for &bn in &space.bns {
                if let LayerKind::BatchNorm { scale, shift, .. } = graph.layers()[bn].kind {
                    mark(scale, c..c + 1);
                    if set == EntrySet::Removal {
                        mark(shift, c..c + 1);
                    }
                }
            }
            for &conv in &space.producers {
                if let LayerKind::Conv { kernel, bias, .. } = graph.layers()[conv].kind {
                    let shape = graph.param(kernel).tensor.shape();
                    let row = shape[1] * shape[2] * shape[3];
                    mark(kernel, c * row..(c + 1) * row);
                    if let (Some(b), EntrySet::Removal) = (bias, set) {
                        mark(b, c..c + 1);
                    }
                }
            }
            if set == EntrySet::Penalty {
                continue;
            }
            for &conv in &space.conv_consumers {
                if let LayerKind::Conv { kernel, .. } = graph.layers()[conv].kind {
                    let shape = graph.param(kernel).tensor.shape().to_vec();
                    let area = shape[2] * shape[3];
                    for o in 0..shape[0] {
                        let start = (o * shape[1] + c) * area;
                        mark(kernel, start..start + area);
                    }
                }
            }
            for &(dense, per) in &space.dense_consumers {
                if let LayerKind::Dense { weight, .. } = graph.layers()[dense].kind {
                    let shape = graph.param(weight).tensor.shape().to_vec();
                    for g in 0..shape[0] {
                        let start = g * shape[1] + c * per;
                        mark(weight, start..start + per);
                    }
                }
            }
        }
    }
    out
}

fn kept(removal: &[Vec<bool>], s: usize) -> usize {
    removal[s].iter().filter(|&&r| !r).count()
}

/// Parameters left after physically removing the channels in `removal`.
pub(crate) fn structured_param_count<T: Scalar>(
    graph: &ModelGraph<T>,
    map: &ChannelMap,
    removal: &[Vec<bool>],
) -> usize {
    let mut total = 0;
    for (id, layer) in graph.layers().iter().enumerate() {
        match layer.kind {
            LayerKind::Conv { kernel, bias, .. } => {
                let (si, so) = map.conv_io[&id];
                let k = graph.param(kernel).tensor.shape();
                let ko = kept(removal, so);
                total += ko * kept(removal, si) * k[2] * k[3] + bias.map_or(0, |_| ko);
            }
            LayerKind::BatchNorm { .. } => total += 2 * kept(removal, map.bn_space[&id]),
            LayerKind::Dense { weight, bias, .. } => {
                let w = graph.param(weight).tensor.shape();
                let f = match map.dense_in.get(&id) {
                    Some(&(s, per)) => kept(removal, s) * per,
                    None => w[1],
                };
                total += w[0] * f + bias.map_or(0, |_| w[0]);
            }
            _ => {}
        }
    }
    total
}

/// Scalar parameters remaining after applying `mask` as a removal.
pub fn count_params<T: Scalar>(graph: &ModelGraph<T>, mask: &PruneMask) -> Result<usize> {
    mask.validate(graph)?;
    match mask {
        PruneMask::Unstructured(_) => Ok(graph.param_count() - mask.selected_count()),
        PruneMask::Structured(_) => {
            let map = graph.channel_map()?;
            let removal = space_removal(graph, &map, mask)?;
            Ok(structured_param_count(graph, &map, &removal))
        }
    }
}

pub fn removed_params<T: Scalar>(graph: &ModelGraph<T>, mask: &PruneMask) -> Result<usize> {
    Ok(graph.param_count() - count_params(graph, mask)?)
}

/// Multiply-accumulate count of one forward pass over a single example of
/// shape `input_shape`, on the architecture left after structured removal.
/// Unstructured masks do not change the count.
pub fn count_macs<T: Scalar>(
    graph: &ModelGraph<T>,
    mask: &PruneMask,
    input_shape: [usize; 3],
) -> Result<u64> {
    mask.validate(graph)?;
    let shapes = graph.infer_shapes(input_shape)?;
    let map = graph.channel_map()?;
    let removal = space_removal(graph, &map, mask)?;
    let mut total = 0u64;
    for (id, layer) in graph.layers().iter().enumerate() {
        match layer.kind {
            LayerKind::Conv { kernel, .. } => {
                let (si, so) = map.conv_io[&id];
                let k = graph.param(kernel).tensor.shape();
                let area = (shapes[id][1] * shapes[id][2]) as u64;
                total += (kept(&removal, so) * kept(&removal, si) * k[2] * k[3]) as u64 * area;
            }
            LayerKind::Dense { input, weight, .. } => {
                let g = graph.param(weight).tensor.shape()[0];
                let f = match map.dense_in.get(&id) {
                    Some(&(s, _)) => {
                        let per = shapes[input][0] / map.spaces[s].width;
                        kept(&removal, s) * per
                    }
                    None => shapes[input][0],
                };
                total += (f * g) as u64;
            }
            _ => {}
        }
    }
    Ok(total)
}

/// Names of convolutions whose every output channel is removed.
pub(crate) fn collapsed_layers<T: Scalar>(
    graph: &ModelGraph<T>,
    map: &ChannelMap,
    removal: &[Vec<bool>],
) -> Vec<String> {
    map.spaces
        .iter()
        .enumerate()
        .filter(|(s, space)| !space.producers.is_empty() && kept(removal, *s) == 0)
        .flat_map(|(_, space)| space.producers.iter().map(|&l| graph.layers()[l].name.clone()))
        .collect()
}

/// True iff every convolution (and therefore every coupling group) keeps at
/// least one channel.
pub fn guard_layer_survival<T: Scalar>(graph: &ModelGraph<T>, mask: &PruneMask) -> Result<bool> {
    let map = graph.channel_map()?;
    let removal = space_removal(graph, &map, mask)?;
    Ok(collapsed_layers(graph, &map, &removal).is_empty())
}
