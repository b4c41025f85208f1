use serde::{Deserialize, Serialize};

use super::channels::ChannelMap;
use crate::autograd::{BnMode, RunningStats, Tape, Var};
use crate::error::{config_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type ParamId = usize;
pub type LayerId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    ConvKernel,
    ConvBias,
    BnScale,
    BnShift,
    DenseWeight,
    DenseBias,
}

impl Role {
    /// Roles subject to ordinary weight decay.
    pub fn decays(self) -> bool {
        matches!(self, Role::ConvKernel | Role::DenseWeight | Role::BnScale)
    }
}

/// A trainable tensor in the registry.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub role: Role,
    pub prunable: bool,
    /// Entries pinned at zero by a soft mask; the optimizer skips them.
    pub frozen: Option<Vec<bool>>,
}

impl<T: Scalar> Parameter<T> {
    /// Member of the global magnitude pool used by unstructured selection.
    pub fn in_unstructured_pool(&self) -> bool {
        self.prunable && matches!(self.role, Role::ConvKernel | Role::DenseWeight)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Input,
    Conv {
        input: LayerId,
        kernel: ParamId,
        bias: Option<ParamId>,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        input: LayerId,
        scale: ParamId,
        shift: ParamId,
        stats: usize,
    },
    Relu {
        input: LayerId,
    },
    MaxPool {
        input: LayerId,
        k: usize,
        stride: usize,
    },
    GlobalAvgPool {
        input: LayerId,
    },
    Flatten {
        input: LayerId,
    },
    Dense {
        input: LayerId,
        weight: ParamId,
        bias: Option<ParamId>,
    },
    Add {
        lhs: LayerId,
        rhs: LayerId,
    },
}

impl LayerKind {
    pub fn inputs(&self) -> Vec<LayerId> {
        match *self {
            LayerKind::Input => vec![],
            LayerKind::Conv { input, .. }
            | LayerKind::BatchNorm { input, .. }
            | LayerKind::Relu { input }
            | LayerKind::MaxPool { input, .. }
            | LayerKind::GlobalAvgPool { input }
            | LayerKind::Flatten { input }
            | LayerKind::Dense { input, .. } => vec![input],
            LayerKind::Add { lhs, rhs } => vec![lhs, rhs],
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match *self {
            LayerKind::Conv { kernel, bias, .. } => std::iter::once(kernel).chain(bias).collect(),
            LayerKind::BatchNorm { scale, shift, .. } => vec![scale, shift],
            LayerKind::Dense { weight, bias, .. } => std::iter::once(weight).chain(bias).collect(),
            _ => vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

/// Batchnorm layers whose channel masks must be identical because their
/// outputs meet at residual additions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CouplingGroup {
    pub member_bn_ids: Vec<LayerId>,
    pub channel_count: usize,
}

/// Layers in topological order plus the parameter registry they reference.
/// The last layer produces the logits.
#[derive(Debug, Clone)]
pub struct ModelGraph<T> {
    pub(crate) layers: Vec<Layer>,
    pub(crate) params: Vec<Parameter<T>>,
    pub(crate) stats: Vec<RunningStats<T>>,
    pub(crate) residual_groups: Vec<CouplingGroup>,
    pub(crate) input_shape: [usize; 3],
    pub(crate) num_classes: usize,
}

pub struct ForwardPass {
    pub logits: Var,
    pub params: Vec<Var>,
    /// Output of every layer, indexed by layer id.
    pub outputs: Vec<Var>,
}

impl<T: Scalar> ModelGraph<T> {
    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id]
    }

    pub fn param_by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.stats
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.stats
    }

    pub fn residual_groups(&self) -> &[CouplingGroup] {
        &self.residual_groups
    }

    /// `[C, H, W]` of a single example.
    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Batchnorm layer ids in graph order.
    pub fn bn_layers(&self) -> Vec<LayerId> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.kind, LayerKind::BatchNorm { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn channel_map(&self) -> Result<ChannelMap> {
        ChannelMap::analyze(self)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Per-layer output shapes (without the batch axis) for an input of
    /// shape `[C, H, W]`.
    pub fn infer_shapes(&self, input: [usize; 3]) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.layers.len());
        for (id, layer) in self.layers.iter().enumerate() {
            let s = |i: LayerId| -> &Vec<usize> { &shapes[i] };
            let out = match layer.kind {
                LayerKind::Input => input.to_vec(),
                LayerKind::Conv {
                    input,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let x = s(input);
                    let k = self.params[kernel].tensor.shape();
                    if x.len() != 3 || x[0] != k[1] {
                        return config_err(format!(
                            "layer {id} ({}): input {x:?} vs kernel {k:?}",
                            layer.name
                        ));
                    }
                    if k[2] > x[1] + 2 * padding || k[3] > x[2] + 2 * padding {
                        return config_err(format!("layer {id}: kernel larger than input"));
                    }
                    vec![
                        k[0],
                        (x[1] + 2 * padding - k[2]) / stride + 1,
                        (x[2] + 2 * padding - k[3]) / stride + 1,
                    ]
                }
                LayerKind::BatchNorm { input, scale, .. } => {
                    let x = s(input).clone();
                    if x.len() != 3 || self.params[scale].tensor.len() != x[0] {
                        return config_err(format!("layer {id}: batchnorm width mismatch"));
                    }
                    x
                }
                LayerKind::Relu { input } => s(input).clone(),
                LayerKind::MaxPool { input, k, stride } => {
                    let x = s(input);
                    if x.len() != 3 || k > x[1] || k > x[2] {
                        return config_err(format!("layer {id}: pool window too large"));
                    }
                    vec![x[0], (x[1] - k) / stride + 1, (x[2] - k) / stride + 1]
                }
                LayerKind::GlobalAvgPool { input } => vec![s(input)[0]],
                LayerKind::Flatten { input } => vec![s(input).iter().product()],
                LayerKind::Dense { input, weight, .. } => {
                    let x = s(input);
                    let w = self.params[weight].tensor.shape();
                    if x.len() != 1 || x[0] != w[1] {
                        return config_err(format!("layer {id}: dense input {x:?} vs {w:?}"));
                    }
                    vec![w[0]]
                }
                LayerKind::Add { lhs, rhs } => {
                    if s(lhs) != s(rhs) {
                        return config_err(format!(
                            "layer {id}: residual addends {:?} vs {:?}",
                            s(lhs),
                            s(rhs)
                        ));
                    }
                    s(lhs).clone()
                }
            };
            shapes.push(out);
        }
        Ok(shapes)
    }

    /// Records the network on `tape`. Parameters become leaves that require
    /// gradients when `track_params` is set.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        images: Tensor<T>,
        mode: BnMode,
        track_params: bool,
    ) -> Result<ForwardPass> {
        let xs = images.shape();
        if xs.len() != 4 || xs[1..] != self.input_shape {
            return Err(Error::Config(format!(
                "input batch {:?} does not match model input {:?}",
                xs, self.input_shape
            )));
        }
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                let mut t = p.tensor.clone();
                t.clear_grad();
                tape.leaf(t, track_params)
            })
            .collect();
        let mut outs: Vec<Var> = Vec::with_capacity(self.layers.len());
        let input = tape.leaf(images, false);
        for layer in &self.layers {
            let v = match layer.kind {
                LayerKind::Input => input,
                LayerKind::Conv {
                    input,
                    kernel,
                    bias,
                    stride,
                    padding,
                } => tape.conv2d(
                    outs[input],
                    params[kernel],
                    bias.map(|b| params[b]),
                    stride,
                    padding,
                )?,
                LayerKind::BatchNorm {
                    input,
                    scale,
                    shift,
                    stats,
                } => tape.batchnorm(
                    outs[input],
                    params[scale],
                    params[shift],
                    &mut self.stats[stats],
                    mode,
                )?,
                LayerKind::Relu { input } => tape.relu(outs[input])?,
                LayerKind::MaxPool { input, k, stride } => tape.maxpool2d(outs[input], k, stride)?,
                LayerKind::GlobalAvgPool { input } => tape.global_avgpool(outs[input])?,
                LayerKind::Flatten { input } => tape.flatten(outs[input])?,
                LayerKind::Dense {
                    input,
                    weight,
                    bias,
                } => tape.dense(outs[input], params[weight], bias.map(|b| params[b]))?,
                LayerKind::Add { lhs, rhs } => tape.add(outs[lhs], outs[rhs])?,
            };
            outs.push(v);
        }
        let logits = *outs
            .last()
            .ok_or_else(|| Error::Config("empty model graph".into()))?;
        Ok(ForwardPass {
            logits,
            params,
            outputs: outs,
        })
    }

    /// One training forward/backward pass. Gradients of the mean
    /// cross-entropy are accumulated into the parameter gradient slots;
    /// returns the loss.
    pub fn accumulate_loss_grad(&mut self, images: Tensor<T>, labels: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, images, BnMode::Train, true)?;
        let loss = tape.softmax_cross_entropy(fwd.logits, labels)?;
        let value = tape.value(loss).data()[0].as_f64();
        let mut grads = tape.backward(loss)?;
        for (p, v) in self.params.iter_mut().zip(fwd.params) {
            if let Some(g) = grads.take(v) {
                p.tensor.accumulate_grad(&g)?;
            }
        }
        Ok(value)
    }

    /// Eval-mode logits.
    pub fn logits(&mut self, images: Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let fwd = self.forward(&mut tape, images, BnMode::Eval, false)?;
        Ok(tape.value(fwd.logits).clone())
    }

    /// Eval-mode mean cross-entropy, used by finite-difference oracles.
    pub fn loss(&mut self, images: Tensor<T>, labels: &[usize], mode: BnMode) -> Result<f64> {
        let mut tape = Tape::inference();
        let fwd = self.forward(&mut tape, images, mode, false)?;
        let loss = tape.softmax_cross_entropy(fwd.logits, labels)?;
        Ok(tape.value(loss).data()[0].as_f64())
    }

    /// Copies every parameter value and running statistic from `other`.
    pub fn copy_state_from(&mut self, other: &ModelGraph<T>) -> Result<()> {
        if self.params.len() != other.params.len() || self.stats.len() != other.stats.len() {
            return config_err("graphs have different parameter registries");
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.tensor.shape() != src.tensor.shape() {
                return config_err(format!("shape mismatch for {}", dst.name));
            }
            dst.tensor.data_mut().copy_from_slice(src.tensor.data());
            dst.frozen.clone_from(&src.frozen);
        }
        self.stats.clone_from(&other.stats);
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelGraph<U> {
        ModelGraph {
            layers: self.layers.clone(),
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    role: p.role,
                    prunable: p.prunable,
                    frozen: p.frozen.clone(),
                })
                .collect(),
            stats: self
                .stats
                .iter()
                .map(|s| RunningStats {
                    mean: s.mean.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
                    var: s.var.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
                })
                .collect(),
            residual_groups: self.residual_groups.clone(),
            input_shape: self.input_shape,
            num_classes: self.num_classes,
        }
    }
}

/// Incremental constructor for [`ModelGraph`]. Parameters start at zero
/// (batchnorm scales at one) until [`super::init_parameters`] runs.
pub struct GraphBuilder<T> {
    graph: ModelGraph<T>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> GraphBuilder<T> {
    pub fn new(input_shape: [usize; 3]) -> Self {
        Self {
            graph: ModelGraph {
                layers: vec![Layer {
                    name: "input".into(),
                    kind: LayerKind::Input,
                }],
                params: Vec::new(),
                stats: Vec::new(),
                residual_groups: Vec::new(),
                input_shape,
                num_classes: 0,
            },
            shapes: vec![input_shape.to_vec()],
        }
    }

    pub fn input(&self) -> LayerId {
        0
    }

    pub fn shape(&self, id: LayerId) -> &[usize] {
        &self.shapes[id]
    }

    fn param(&mut self, name: String, shape: &[usize], role: Role, prunable: bool) -> ParamId {
        let init = if role == Role::BnScale {
            T::one()
        } else {
            T::zero()
        };
        self.graph.params.push(Parameter {
            name,
            tensor: Tensor::full(shape, init),
            role,
            prunable,
            frozen: None,
        });
        self.graph.params.len() - 1
    }

    fn push(&mut self, name: &str, kind: LayerKind) -> Result<LayerId> {
        self.graph.layers.push(Layer {
            name: name.to_string(),
            kind,
        });
        match self.graph.infer_shapes(self.graph.input_shape) {
            Ok(shapes) => {
                self.shapes = shapes;
                Ok(self.graph.layers.len() - 1)
            }
            Err(e) => {
                self.graph.layers.pop();
                Err(e)
            }
        }
    }

    fn channels(&self, x: LayerId) -> Result<usize> {
        match self.shapes[x].as_slice() {
            [c, _, _] => Ok(*c),
            other => config_err(format!("expected a feature map, got shape {other:?}")),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        x: LayerId,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<LayerId> {
        let cin = self.channels(x)?;
        if stride == 0 || cout == 0 {
            return config_err(format!("{name}: stride and width must be positive"));
        }
        let kernel = self.param(format!("{name}.weight"), &[cout, cin, k, k], Role::ConvKernel, true);
        let bias = bias.then(|| self.param(format!("{name}.bias"), &[cout], Role::ConvBias, false));
        self.push(
            name,
            LayerKind::Conv {
                input: x,
                kernel,
                bias,
                stride,
                padding,
            },
        )
    }

    pub fn batchnorm(&mut self, name: &str, x: LayerId) -> Result<LayerId> {
        let c = self.channels(x)?;
        let scale = self.param(format!("{name}.scale"), &[c], Role::BnScale, true);
        let shift = self.param(format!("{name}.shift"), &[c], Role::BnShift, false);
        self.graph.stats.push(RunningStats::new(c));
        let stats = self.graph.stats.len() - 1;
        self.push(
            name,
            LayerKind::BatchNorm {
                input: x,
                scale,
                shift,
                stats,
            },
        )
    }

    pub fn relu(&mut self, x: LayerId) -> Result<LayerId> {
        self.push("relu", LayerKind::Relu { input: x })
    }

    pub fn maxpool(&mut self, x: LayerId, k: usize, stride: usize) -> Result<LayerId> {
        if k == 0 || stride == 0 {
            return config_err("pool window and stride must be positive");
        }
        self.push("maxpool", LayerKind::MaxPool { input: x, k, stride })
    }

    pub fn global_avgpool(&mut self, x: LayerId) -> Result<LayerId> {
        self.channels(x)?;
        self.push("avgpool", LayerKind::GlobalAvgPool { input: x })
    }

    pub fn flatten(&mut self, x: LayerId) -> Result<LayerId> {
        self.push("flatten", LayerKind::Flatten { input: x })
    }

    pub fn dense(&mut self, name: &str, x: LayerId, out: usize, bias: bool) -> Result<LayerId> {
        let f = match self.shapes[x].as_slice() {
            [f] => *f,
            other => return config_err(format!("{name}: dense input must be flat, got {other:?}")),
        };
        let weight = self.param(format!("{name}.weight"), &[out, f], Role::DenseWeight, true);
        let bias = bias.then(|| self.param(format!("{name}.bias"), &[out], Role::DenseBias, false));
        self.push(
            name,
            LayerKind::Dense {
                input: x,
                weight,
                bias,
            },
        )
    }

    pub fn add(&mut self, lhs: LayerId, rhs: LayerId) -> Result<LayerId> {
        self.push("add", LayerKind::Add { lhs, rhs })
    }

    /// Validates the output width and derives the residual coupling groups.
    pub fn finish(mut self, num_classes: usize) -> Result<ModelGraph<T>> {
        let last = self.shapes.last().cloned().unwrap_or_default();
        if last != [num_classes] {
            return config_err(format!(
                "model output {last:?} does not match {num_classes} classes"
            ));
        }
        self.graph.num_classes = num_classes;
        let map = ChannelMap::analyze(&self.graph)?;
        self.graph.residual_groups = map.coupling_groups();
        Ok(self.graph)
    }
}
