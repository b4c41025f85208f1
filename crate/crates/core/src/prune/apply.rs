use super::count::{channel_entries, collapsed_layers, space_removal, EntrySet};
use super::PruneMask;
use crate::error::{config_err, Error, Result};
use crate::nn::{ChannelMap, LayerKind, ModelGraph};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Zeroes the selected entries and freezes them so the optimizer keeps them
/// at zero. Structured masks zero every entry that would vanish on removal.
/// Existing freezes are kept.
pub fn apply_soft_mask<T: Scalar>(graph: &mut ModelGraph<T>, mask: &PruneMask) -> Result<()> {
    mask.validate(graph)?;
    let entries = match mask {
        PruneMask::Unstructured(m) => m.clone(),
        PruneMask::Structured(_) => {
            let map = graph.channel_map()?;
            let removal = space_removal(graph, &map, mask)?;
            channel_entries(graph, &map, &removal, EntrySet::Removal)
        }
    };
    for (pid, flags) in entries {
        if !flags.iter().any(|&b| b) {
            continue;
        }
        let p = graph.param_mut(pid);
        for (w, _) in p.tensor.data_mut().iter_mut().zip(&flags).filter(|(_, &f)| f) {
            *w = T::zero();
        }
        match &mut p.frozen {
            Some(frozen) => frozen.iter_mut().zip(&flags).for_each(|(a, &b)| *a |= b),
            None => p.frozen = Some(flags),
        }
    }
    Ok(())
}

/// Lifts every freeze.
pub fn clear_soft_mask<T: Scalar>(graph: &mut ModelGraph<T>) {
    for p in graph.params_mut() {
        p.frozen = None;
    }
}

/// Keeps the listed indices of `axis`.
fn gather_axis<E: Copy>(data: &[E], shape: &[usize], axis: usize, keep: &[usize]) -> Vec<E> {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let n = shape[axis];
    let mut out = Vec::with_capacity(outer * keep.len() * inner);
    for o in 0..outer {
        for &k in keep {
            let base = (o * n + k) * inner;
            out.extend_from_slice(&data[base..base + inner]);
        }
    }
    out
}

/// Shrinks one parameter along the given axes, carrying its freeze flags.
fn shrink<T: Scalar>(
    graph: &mut ModelGraph<T>,
    pid: usize,
    cuts: &[(usize, Vec<usize>)],
) -> Result<()> {
    let p = graph.param_mut(pid);
    let mut shape = p.tensor.shape().to_vec();
    let mut data = p.tensor.data().to_vec();
    let mut frozen = p.frozen.take();
    for (axis, keep) in cuts {
        data = gather_axis(&data, &shape, *axis, keep);
        frozen = frozen.map(|f| gather_axis(&f, &shape, *axis, keep));
        shape[*axis] = keep.len();
    }
    p.tensor = Tensor::new(shape, data)?;
    p.frozen = frozen;
    Ok(())
}

/// Builds a smaller graph without the removed channels. The result computes
/// the same function as the soft-masked original. `graph` is never modified.
pub fn hard_prune_structured<T: Scalar>(
    graph: &ModelGraph<T>,
    mask: &PruneMask,
) -> Result<ModelGraph<T>> {
    if mask.kind() != super::Structure::Structured && !mask.is_empty() {
        return config_err("hard removal needs a structured mask");
    }
    let map = graph.channel_map()?;
    let removal = space_removal(graph, &map, mask)?;
    let collapsed = collapsed_layers(graph, &map, &removal);
    if !collapsed.is_empty() {
        return Err(Error::StructuralCollapse(collapsed.join(", ")));
    }
    let keep: Vec<Vec<usize>> = removal
        .iter()
        .map(|r| (0..r.len()).filter(|&c| !r[c]).collect())
        .collect();
    let mut out = graph.clone();
    for (id, layer) in graph.layers().iter().enumerate() {
        match layer.kind {
            LayerKind::Conv { kernel, bias, .. } => {
                let (si, so) = map.conv_io[&id];
                shrink(&mut out, kernel, &[(0, keep[so].clone()), (1, keep[si].clone())])?;
                if let Some(b) = bias {
                    shrink(&mut out, b, &[(0, keep[so].clone())])?;
                }
            }
            LayerKind::BatchNorm {
                scale, shift, stats, ..
            } => {
                let s = map.bn_space[&id];
                shrink(&mut out, scale, &[(0, keep[s].clone())])?;
                shrink(&mut out, shift, &[(0, keep[s].clone())])?;
                let st = &mut out.stats[stats];
                st.mean = keep[s].iter().map(|&c| st.mean[c]).collect();
                st.var = keep[s].iter().map(|&c| st.var[c]).collect();
            }
            LayerKind::Dense { weight, .. } => {
                if let Some(&(s, per)) = map.dense_in.get(&id) {
                    let cols = keep[s]
                        .iter()
                        .flat_map(|&c| c * per..(c + 1) * per)
                        .collect();
                    shrink(&mut out, weight, &[(1, cols)])?;
                }
            }
            _ => {}
        }
    }
    out.infer_shapes(out.input_shape)?;
    out.residual_groups = ChannelMap::analyze(&out)?.coupling_groups();
    Ok(out)
}
