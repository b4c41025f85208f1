//! Channel-space analysis.
//!
//! A channel space is a set of feature-map channels that must be kept or
//! removed together: a convolution creates one, batchnorm/relu/pooling carry
//! it through, and a residual addition merges the spaces of its addends.

use std::collections::BTreeMap;

use super::graph::{CouplingGroup, LayerId, LayerKind, ModelGraph};
use crate::error::Result;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChannelSpace {
    pub width: usize,
    /// Convolutions whose output filters live in this space.
    pub producers: Vec<LayerId>,
    /// Batchnorm layers normalizing this space, in graph order.
    pub bns: Vec<LayerId>,
    /// Convolutions reading this space as input channels.
    pub conv_consumers: Vec<LayerId>,
    /// Dense layers reading this space through flatten/pooling, with the
    /// number of input features per channel.
    pub dense_consumers: Vec<(LayerId, usize)>,
    pub contains_input: bool,
}

impl ChannelSpace {
    /// Channels here can be removed by structured pruning.
    pub fn prunable(&self) -> bool {
        !self.bns.is_empty() && !self.producers.is_empty() && !self.contains_input
    }
}

#[derive(Debug, Clone, Default)]
pub struct ChannelMap {
    pub spaces: Vec<ChannelSpace>,
    /// conv layer -> (input space, output space)
    pub conv_io: BTreeMap<LayerId, (usize, usize)>,
    pub bn_space: BTreeMap<LayerId, usize>,
    /// dense layer -> (space, features per channel) when its input comes
    /// from a feature map
    pub dense_in: BTreeMap<LayerId, (usize, usize)>,
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn make(&mut self) -> usize {
        self.0.push(self.0.len());
        self.0.len() - 1
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        // keep the older token as root so space order follows the graph
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.0[hi] = lo;
    }
}

impl ChannelMap {
    pub fn analyze<T: Scalar>(graph: &ModelGraph<T>) -> Result<Self> {
        let shapes = graph.infer_shapes(graph.input_shape)?;
        let mut uf = UnionFind(Vec::new());
        let mut token: Vec<Option<usize>> = Vec::with_capacity(graph.layers.len());
        let mut flat_origin: Vec<Option<(usize, usize)>> = Vec::with_capacity(graph.layers.len());
        let mut input_tokens = Vec::new();
        for layer in &graph.layers {
            let (tok, origin) = match layer.kind {
                LayerKind::Input => {
                    let t = uf.make();
                    input_tokens.push(t);
                    (Some(t), None)
                }
                LayerKind::Conv { .. } => (Some(uf.make()), None),
                LayerKind::BatchNorm { input, .. }
                | LayerKind::Relu { input }
                | LayerKind::MaxPool { input, .. } => (token[input], None),
                LayerKind::Add { lhs, rhs } => {
                    if let (Some(a), Some(b)) = (token[lhs], token[rhs]) {
                        uf.union(a, b);
                    }
                    (token[lhs], None)
                }
                LayerKind::GlobalAvgPool { input } => (None, token[input].map(|t| (t, 1))),
                LayerKind::Flatten { input } => {
                    let per = shapes[input][1..].iter().product();
                    (None, token[input].map(|t| (t, per)))
                }
                LayerKind::Dense { .. } => (None, None),
            };
            token.push(tok);
            flat_origin.push(origin);
        }

        // Number roots by first appearance.
        let mut root_index: BTreeMap<usize, usize> = BTreeMap::new();
        let mut map = ChannelMap::default();
        let mut space_of = |uf: &mut UnionFind, t: usize, map: &mut ChannelMap| -> usize {
            let r = uf.find(t);
            let next = root_index.len();
            let idx = *root_index.entry(r).or_insert(next);
            if idx == map.spaces.len() {
                map.spaces.push(ChannelSpace::default());
            }
            idx
        };
        for (id, layer) in graph.layers.iter().enumerate() {
            if let Some(t) = token[id] {
                let s = space_of(&mut uf, t, &mut map);
                map.spaces[s].width = shapes[id][0];
            }
            match layer.kind {
                LayerKind::Input => {
                    let s = space_of(&mut uf, token[id].unwrap(), &mut map);
                    map.spaces[s].contains_input = true;
                }
                LayerKind::Conv { input, .. } => {
                    let si = space_of(&mut uf, token[input].unwrap(), &mut map);
                    let so = space_of(&mut uf, token[id].unwrap(), &mut map);
                    map.spaces[si].conv_consumers.push(id);
                    map.spaces[so].producers.push(id);
                    map.conv_io.insert(id, (si, so));
                }
                LayerKind::BatchNorm { .. } => {
                    let s = space_of(&mut uf, token[id].unwrap(), &mut map);
                    map.spaces[s].bns.push(id);
                    map.bn_space.insert(id, s);
                }
                LayerKind::Dense { input, .. } => {
                    if let Some((t, per)) = flat_origin[input] {
                        let s = space_of(&mut uf, t, &mut map);
                        map.spaces[s].dense_consumers.push((id, per));
                        map.dense_in.insert(id, (s, per));
                    }
                }
                _ => {}
            }
        }
        Ok(map)
    }

    /// Spaces shared by more than one batchnorm layer.
    pub fn coupling_groups(&self) -> Vec<CouplingGroup> {
        self.spaces
            .iter()
            .filter(|s| s.bns.len() > 1)
            .map(|s| CouplingGroup {
                member_bn_ids: s.bns.clone(),
                channel_count: s.width,
            })
            .collect()
    }

    pub fn prunable_spaces(&self) -> impl Iterator<Item = (usize, &ChannelSpace)> {
        self.spaces.iter().enumerate().filter(|(_, s)| s.prunable())
    }
}
