//! Model graphs, builders and the channel analysis used for pruning.

mod channels;
mod graph;
mod models;

pub use channels::{ChannelMap, ChannelSpace};
pub use graph::{
    CouplingGroup, ForwardPass, GraphBuilder, Layer, LayerId, LayerKind, ModelGraph, ParamId,
    Parameter, Role,
};
pub use models::{build_lenet5, build_mini_resnet, build_resnet, init_parameters, MiniResNetSpec};
