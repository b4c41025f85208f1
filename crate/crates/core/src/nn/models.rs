use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use super::graph::{GraphBuilder, LayerId, ModelGraph, Role};
use crate::error::{config_err, Result};
use crate::scalar::Scalar;

/// LeNet-5 on `1x28x28` input: conv(1->6, 5x5, pad 2) -> relu -> maxpool2
/// -> conv(6->16, 5x5) -> relu -> maxpool2 -> dense(400->120) -> relu ->
/// dense(120->84) -> relu -> dense(84->classes).
pub fn build_lenet5<T: Scalar>(num_classes: usize) -> Result<ModelGraph<T>> {
    if num_classes < 2 {
        return config_err("LeNet-5 needs at least 2 classes");
    }
    let mut b = GraphBuilder::new([1, 28, 28]);
    let x = b.input();
    let x = b.conv("conv1", x, 6, 5, 1, 2, true)?;
    let x = b.relu(x)?;
    let x = b.maxpool(x, 2, 2)?;
    let x = b.conv("conv2", x, 16, 5, 1, 0, true)?;
    let x = b.relu(x)?;
    let x = b.maxpool(x, 2, 2)?;
    let x = b.flatten(x)?;
    let x = b.dense("fc1", x, 120, true)?;
    let x = b.relu(x)?;
    let x = b.dense("fc2", x, 84, true)?;
    let x = b.relu(x)?;
    b.dense("fc3", x, num_classes, true)?;
    b.finish(num_classes)
}

/// Shape of a residual network with three stages of widths `w, 2w, 4w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MiniResNetSpec {
    pub input_shape: [usize; 3],
    /// Residual blocks per stage.
    pub depth_blocks: usize,
    pub base_width: usize,
    pub num_classes: usize,
}

impl MiniResNetSpec {
    /// ResNet-20 layout on 32x32 RGB input.
    pub fn resnet20(num_classes: usize) -> Self {
        Self {
            input_shape: [3, 32, 32],
            depth_blocks: 3,
            base_width: 16,
            num_classes,
        }
    }
}

pub fn build_mini_resnet<T: Scalar>(
    depth_blocks: usize,
    base_width: usize,
    num_classes: usize,
) -> Result<ModelGraph<T>> {
    build_resnet(&MiniResNetSpec {
        input_shape: [3, 32, 32],
        depth_blocks,
        base_width,
        num_classes,
    })
}

/// Residual network whose every addition is followed by a batchnorm, so the
/// addends and the sum share one prunable channel space.
///
/// Block: conv-bn-relu-conv-bn, add skip, bn, relu. The first block of stages
/// two and three halves the resolution and uses a 1x1 strided projection with
/// its own batchnorm on the skip path.
pub fn build_resnet<T: Scalar>(spec: &MiniResNetSpec) -> Result<ModelGraph<T>> {
    if spec.depth_blocks < 1 || spec.base_width < 1 || spec.num_classes < 2 {
        return config_err("mini-ResNet needs depth_blocks >= 1, base_width >= 1, classes >= 2");
    }
    let mut b = GraphBuilder::new(spec.input_shape);
    let x = b.input();
    let x = b.conv("stem", x, spec.base_width, 3, 1, 1, false)?;
    let x = b.batchnorm("stem.bn", x)?;
    let mut x: LayerId = b.relu(x)?;
    for stage in 0..3 {
        let width = spec.base_width << stage;
        for block in 0..spec.depth_blocks {
            let name = format!("s{stage}.b{block}");
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let y = b.conv(&format!("{name}.conv1"), x, width, 3, stride, 1, false)?;
            let y = b.batchnorm(&format!("{name}.bn1"), y)?;
            let y = b.relu(y)?;
            let y = b.conv(&format!("{name}.conv2"), y, width, 3, 1, 1, false)?;
            let y = b.batchnorm(&format!("{name}.bn2"), y)?;
            let skip = if stride != 1 || b.shape(x)[0] != width {
                let s = b.conv(&format!("{name}.proj"), x, width, 1, stride, 0, false)?;
                b.batchnorm(&format!("{name}.proj_bn"), s)?
            } else {
                x
            };
            let sum = b.add(y, skip)?;
            let sum = b.batchnorm(&format!("{name}.bn_post"), sum)?;
            x = b.relu(sum)?;
        }
    }
    let x = b.global_avgpool(x)?;
    b.dense("head", x, spec.num_classes, true)?;
    b.finish(spec.num_classes)
}

/// He-style uniform initialization, `U(-sqrt(6/fan_in), sqrt(6/fan_in))` for
/// convolution and dense weights; biases and shifts zero, scales one.
/// Running statistics are reset. Fully determined by `seed`.
pub fn init_parameters<T: Scalar>(graph: &mut ModelGraph<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in graph.params.iter_mut() {
        let shape = p.tensor.shape().to_vec();
        match p.role {
            Role::ConvKernel | Role::DenseWeight => {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                for v in p.tensor.data_mut() {
                    *v = T::from_f64_lossy(dist.sample(&mut rng));
                }
            }
            Role::BnScale => p.tensor.data_mut().fill(T::one()),
            Role::ConvBias | Role::DenseBias | Role::BnShift => p.tensor.data_mut().fill(T::zero()),
        }
        p.tensor.clear_grad();
        p.frozen = None;
    }
    for s in graph.stats.iter_mut() {
        s.mean.fill(T::zero());
        s.var.fill(T::one());
    }
}
