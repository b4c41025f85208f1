use std::collections::BTreeMap;

use super::count::{collapsed_layers, structured_param_count};
use super::{PruneMask, PruneTarget, Structure};
use crate::error::{config_err, Error, Result};
use crate::nn::{LayerKind, ModelGraph};
use crate::scalar::Scalar;

/// Selects the `round(T * n)` smallest-magnitude entries of the global pool
/// of prunable convolution kernels and dense weights. Ties go to the earlier
/// parameter in the registry, then to the lower flat index.
pub fn select_unstructured<T: Scalar>(graph: &ModelGraph<T>, target: PruneTarget) -> Result<PruneMask> {
    let pool: Vec<usize> = graph
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.in_unstructured_pool())
        .map(|(i, _)| i)
        .collect();
    if pool.is_empty() {
        return config_err("model has no prunable weights");
    }
    let mut keys: Vec<(f64, u32)> = Vec::new();
    for &pid in &pool {
        let base = keys.len() as u32;
        keys.extend(
            graph
                .param(pid)
                .tensor
                .data()
                .iter()
                .enumerate()
                .map(|(i, w)| (w.as_f64().abs(), base + i as u32)),
        );
    }
    let n = keys.len();
    let k = ((target.fraction() * n as f64 + 0.5).floor() as usize).min(n);
    let cmp = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k > 0 && k < n {
        keys.select_nth_unstable_by(k - 1, cmp);
    }
    let mut flat = vec![false; n];
    for &(_, i) in &keys[..k] {
        flat[i as usize] = true;
    }
    let mut map = BTreeMap::new();
    let mut offset = 0;
    for pid in pool {
        let len = graph.param(pid).tensor.len();
        map.insert(pid, flat[offset..offset + len].to_vec());
        offset += len;
    }
    Ok(PruneMask::Unstructured(map))
}

/// Structured selection without the survival guard: channels are taken in
/// ascending order of their score (largest `|gamma|` among the batchnorms of
/// their channel space) while the removed parameter count stays within
/// `T * n(w)`. Used to pick the penalized set during training, where an
/// emptied layer is allowed.
pub fn structured_candidates<T: Scalar>(
    graph: &ModelGraph<T>,
    target: PruneTarget,
) -> Result<PruneMask> {
    let map = graph.channel_map()?;
    let spaces: Vec<usize> = map.prunable_spaces().map(|(s, _)| s).collect();
    if spaces.is_empty() {
        return config_err("model has no prunable batchnorm channels");
    }
    let mut units: Vec<(f64, usize, usize)> = Vec::new();
    for &s in &spaces {
        let space = &map.spaces[s];
        for c in 0..space.width {
            let score = space
                .bns
                .iter()
                .map(|&bn| match graph.layers()[bn].kind {
                    LayerKind::BatchNorm { scale, .. } => graph.param(scale).tensor.data()[c].as_f64().abs(),
                    _ => unreachable!("channel space lists a non-batchnorm layer"),
                })
                .fold(f64::NEG_INFINITY, f64::max);
            units.push((score, s, c));
        }
    }
    units.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let total = graph.param_count();
    // relative slack so that a target computed as `count / total` admits `count`
    let budget = target.fraction() * total as f64 * (1.0 + 1e-12);
    let mut removal: Vec<Vec<bool>> = map.spaces.iter().map(|s| vec![false; s.width]).collect();
    for (_, s, c) in units {
        removal[s][c] = true;
        let removed = total - structured_param_count(graph, &map, &removal);
        if removed as f64 > budget {
            removal[s][c] = false;
            break;
        }
    }
    let mut mask = BTreeMap::new();
    for s in spaces {
        for &bn in &map.spaces[s].bns {
            mask.insert(bn, removal[s].clone());
        }
    }
    Ok(PruneMask::Structured(mask))
}

/// [`structured_candidates`] refusing selections that empty a layer.
pub fn select_structured<T: Scalar>(graph: &ModelGraph<T>, target: PruneTarget) -> Result<PruneMask> {
    let mask = structured_candidates(graph, target)?;
    let map = graph.channel_map()?;
    let removal = super::space_removal(graph, &map, &mask)?;
    let collapsed = collapsed_layers(graph, &map, &removal);
    if !collapsed.is_empty() {
        return Err(Error::StructuralCollapse(collapsed.join(", ")));
    }
    Ok(mask)
}

pub fn select<T: Scalar>(
    graph: &ModelGraph<T>,
    target: PruneTarget,
    structure: Structure,
) -> Result<PruneMask> {
    match structure {
        Structure::Unstructured => select_unstructured(graph, target),
        Structure::Structured => select_structured(graph, target),
    }
}
