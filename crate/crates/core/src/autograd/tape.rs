use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Batchnorm running-stat momentum.
pub const BN_MOMENTUM: f64 = 0.1;
/// Batchnorm variance epsilon.
pub const BN_EPS: f64 = 1e-5;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    tape: u64,
}

/// Per-channel running mean and (unbiased) variance of a batchnorm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Dense {
        input: usize,
        weight: usize,
        bias: Option<usize>,
    },
    Relu {
        input: usize,
    },
    MaxPool {
        input: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: usize,
    },
    Reshape {
        input: usize,
    },
    Add {
        lhs: usize,
        rhs: usize,
    },
    Mul {
        lhs: usize,
        rhs: usize,
    },
    Scale {
        input: usize,
        factor: T,
    },
    Sum {
        input: usize,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    needs_grad: bool,
    op: Op<T>,
}

/// Define-by-run record of a forward computation.
///
/// Records are appended in execution order, so every record's inputs precede
/// it and a single reverse sweep visits each record once.
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    record: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.idx).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get_mut(var.idx).and_then(Option::take)
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<R>(op: &str, detail: String) -> Result<R> {
    Err(Error::Config(format!("{op}: {detail}")))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A tape that keeps no backward state; [`Tape::backward`] fails on it.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Usage("variable was not produced by this tape".into()));
        }
        Ok(v.idx)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable was not produced by this tape");
        &self.nodes[v.idx].value
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, op: Op<T>) -> Var {
        let needs_grad = needs_grad && self.record;
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Var {
            idx: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    /// Records an input. Gradients are only tracked when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xi, ki) = (self.idx(input)?, self.idx(kernel)?);
        let bi = bias.map(|b| self.idx(b)).transpose()?;
        let xs = self.nodes[xi].value.shape();
        let ks = self.nodes[ki].value.shape();
        if xs.len() != 4 || ks.len() != 4 {
            return shape_err("conv2d", format!("input {xs:?} / kernel {ks:?} must be 4-d"));
        }
        if xs[1] != ks[1] {
            return shape_err(
                "conv2d",
                format!("input has {} channels, kernel expects {}", xs[1], ks[1]),
            );
        }
        if stride == 0 {
            return shape_err("conv2d", "stride must be >= 1".into());
        }
        if ks[2] > xs[2] + 2 * padding || ks[3] > xs[3] + 2 * padding {
            return shape_err("conv2d", format!("kernel {ks:?} larger than padded input {xs:?}"));
        }
        if let Some(b) = bi {
            if self.nodes[b].value.shape() != [ks[0]] {
                return shape_err("conv2d", format!("bias must have shape [{}]", ks[0]));
            }
        }
        let geom = ConvGeom {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            padding,
        };
        let (out, cols) = kernels::conv2d_forward(
            &geom,
            self.nodes[xi].value.data(),
            self.nodes[ki].value.data(),
            bi.map(|b| self.nodes[b].value.data()),
        );
        let shape = vec![geom.n, geom.cout, geom.out_h(), geom.out_w()];
        let needs = self.needs(xi) || self.needs(ki) || bi.is_some_and(|b| self.needs(b));
        let cols = if needs && self.record { cols } else { Vec::new() };
        Ok(self.push(
            Tensor::new(shape, out)?,
            needs,
            Op::Conv2d {
                input: xi,
                kernel: ki,
                bias: bi,
                geom,
                cols,
            },
        ))
    }

    /// Batch normalization over NCHW input. In train mode `stats` is updated
    /// by an exponential moving average; in eval mode it is only read.
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: BnMode,
    ) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(input)?, self.idx(gamma)?, self.idx(beta)?);
        let xs = self.nodes[xi].value.shape().to_vec();
        if xs.len() != 4 {
            return shape_err("batchnorm", format!("input {xs:?} must be 4-d"));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        for (name, i) in [("gamma", gi), ("beta", bi)] {
            if self.nodes[i].value.shape() != [c] {
                return shape_err("batchnorm", format!("{name} must have shape [{c}]"));
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return shape_err("batchnorm", format!("running stats must have {c} channels"));
        }
        let m = n * hw;
        let train = mode == BnMode::Train;
        if train && m < 2 {
            return Err(Error::DegenerateBatch(m));
        }
        let x = self.nodes[xi].value.data();
        let gamma_v = self.nodes[gi].value.data();
        let beta_v = self.nodes[bi].value.data();
        let mut out = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![0.0f64; c];
        for ch in 0..c {
            let planes = (0..n).map(|s| &x[(s * c + ch) * hw..][..hw]);
            let (mean, var) = if train {
                let mut sum = 0.0f64;
                for p in planes.clone() {
                    sum += p.iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mean = sum / m as f64;
                let mut sq = 0.0f64;
                for p in planes.clone() {
                    sq += p.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>();
                }
                let var = sq / m as f64;
                let unbiased = sq / (m - 1) as f64;
                stats.mean[ch] = T::from_f64_lossy(
                    (1.0 - BN_MOMENTUM) * stats.mean[ch].as_f64() + BN_MOMENTUM * mean,
                );
                stats.var[ch] = T::from_f64_lossy(
                    (1.0 - BN_MOMENTUM) * stats.var[ch].as_f64() + BN_MOMENTUM * unbiased,
                );
                (mean, var)
            } else {
                (stats.mean[ch].as_f64(), stats.var[ch].as_f64())
            };
            let is = 1.0 / (var + BN_EPS).sqrt();
            inv_std[ch] = is;
            let (g, b) = (gamma_v[ch].as_f64(), beta_v[ch].as_f64());
            for s in 0..n {
                let off = (s * c + ch) * hw;
                for k in off..off + hw {
                    let xh = (x[k].as_f64() - mean) * is;
                    xhat[k] = T::from_f64_lossy(xh);
                    out[k] = T::from_f64_lossy(g * xh + b);
                }
            }
        }
        let needs = self.needs(xi) || self.needs(gi) || self.needs(bi);
        Ok(self.push(
            Tensor::new(xs, out)?,
            needs,
            Op::BatchNorm {
                input: xi,
                gamma: gi,
                beta: bi,
                xhat,
                inv_std,
                train,
            },
        ))
    }

    /// `x [N,F] * weight[G,F]^T + bias[G]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xi, wi) = (self.idx(input)?, self.idx(weight)?);
        let bi = bias.map(|b| self.idx(b)).transpose()?;
        let xs = self.nodes[xi].value.shape();
        let ws = self.nodes[wi].value.shape();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return shape_err("dense", format!("input {xs:?} incompatible with weight {ws:?}"));
        }
        let (n, f, g) = (xs[0], xs[1], ws[0]);
        if let Some(b) = bi {
            if self.nodes[b].value.shape() != [g] {
                return shape_err("dense", format!("bias must have shape [{g}]"));
            }
        }
        let mut out = vec![T::zero(); n * g];
        if let Some(b) = bi {
            let bv = self.nodes[b].value.data();
            for row in out.chunks_mut(g) {
                row.copy_from_slice(bv);
            }
        }
        T::gemm(
            n,
            f,
            g,
            T::one(),
            self.nodes[xi].value.data(),
            f as isize,
            1,
            self.nodes[wi].value.data(),
            1,
            f as isize,
            T::one(),
            &mut out,
            g as isize,
            1,
        );
        let needs = self.needs(xi) || self.needs(wi) || bi.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Tensor::new(vec![n, g], out)?,
            needs,
            Op::Dense {
                input: xi,
                weight: wi,
                bias: bi,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let xi = self.idx(input)?;
        let x = &self.nodes[xi].value;
        let out: Vec<T> = x.data().iter().map(|&v| v.max(T::zero())).collect();
        let t = Tensor::new(x.shape().to_vec(), out)?;
        let needs = self.needs(xi);
        Ok(self.push(t, needs, Op::Relu { input: xi }))
    }

    pub fn maxpool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let xi = self.idx(input)?;
        let xs = self.nodes[xi].value.shape().to_vec();
        if xs.len() != 4 || k == 0 || stride == 0 || k > xs[2] || k > xs[3] {
            return shape_err("maxpool2d", format!("window {k} / stride {stride} on {xs:?}"));
        }
        let (out, argmax) = kernels::maxpool_forward(
            self.nodes[xi].value.data(),
            xs[0] * xs[1],
            xs[2],
            xs[3],
            k,
            stride,
        );
        let shape = vec![xs[0], xs[1], (xs[2] - k) / stride + 1, (xs[3] - k) / stride + 1];
        let needs = self.needs(xi);
        Ok(self.push(
            Tensor::new(shape, out)?,
            needs,
            Op::MaxPool { input: xi, argmax },
        ))
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avgpool(&mut self, input: Var) -> Result<Var> {
        let xi = self.idx(input)?;
        let xs = self.nodes[xi].value.shape().to_vec();
        if xs.len() != 4 {
            return shape_err("global_avgpool", format!("input {xs:?} must be 4-d"));
        }
        let hw = xs[2] * xs[3];
        let out: Vec<T> = self.nodes[xi]
            .value
            .data()
            .chunks(hw)
            .map(|p| T::from_f64_lossy(p.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64))
            .collect();
        let needs = self.needs(xi);
        Ok(self.push(
            Tensor::new(vec![xs[0], xs[1]], out)?,
            needs,
            Op::GlobalAvgPool { input: xi },
        ))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let xi = self.idx(input)?;
        let x = &self.nodes[xi].value;
        let n = x.shape()[0];
        let f = x.len().checked_div(n).unwrap_or(0);
        let t = x.clone().reshape(vec![n, f])?;
        let needs = self.needs(xi);
        Ok(self.push(t, needs, Op::Reshape { input: xi }))
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.idx(lhs)?, self.idx(rhs)?);
        let (x, y) = (&self.nodes[a].value, &self.nodes[b].value);
        if x.shape() != y.shape() {
            return shape_err("add", format!("{:?} vs {:?}", x.shape(), y.shape()));
        }
        let out = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let t = Tensor::new(x.shape().to_vec(), out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, needs, Op::Add { lhs: a, rhs: b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.idx(lhs)?, self.idx(rhs)?);
        let (x, y) = (&self.nodes[a].value, &self.nodes[b].value);
        if x.shape() != y.shape() {
            return shape_err("mul", format!("{:?} vs {:?}", x.shape(), y.shape()));
        }
        let out = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let t = Tensor::new(x.shape().to_vec(), out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, needs, Op::Mul { lhs: a, rhs: b }))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let xi = self.idx(input)?;
        let x = &self.nodes[xi].value;
        let out = x.data().iter().map(|&v| v * factor).collect();
        let t = Tensor::new(x.shape().to_vec(), out)?;
        let needs = self.needs(xi);
        Ok(self.push(t, needs, Op::Scale { input: xi, factor }))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let xi = self.idx(input)?;
        let s = crate::scalar::sum_f64(self.nodes[xi].value.data());
        let needs = self.needs(xi);
        Ok(self.push(
            Tensor::scalar(T::from_f64_lossy(s)),
            needs,
            Op::Sum { input: xi },
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let li = self.idx(logits)?;
        let ls = self.nodes[li].value.shape();
        if ls.len() != 2 {
            return shape_err("softmax_cross_entropy", format!("logits {ls:?} must be 2-d"));
        }
        let (n, k) = (ls[0], ls[1]);
        if labels.len() != n {
            return Err(Error::Data(format!("{} labels for a batch of {n}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Data(format!("label {bad} outside [0, {k})")));
        }
        let x = self.nodes[li].value.data();
        let mut probs = vec![T::zero(); n * k];
        let mut loss = 0.0f64;
        for (row, (p, &y)) in x.chunks(k).zip(probs.chunks_mut(k).zip(labels)) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let z: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
            let log_z = z.ln();
            for (pi, v) in p.iter_mut().zip(row) {
                *pi = T::from_f64_lossy((v.as_f64() - max - log_z).exp());
            }
            loss -= row[y].as_f64() - max - log_z;
        }
        loss /= n.max(1) as f64;
        let needs = self.needs(li);
        Ok(self.push(
            Tensor::scalar(T::from_f64_lossy(loss)),
            needs,
            Op::SoftmaxCrossEntropy {
                logits: li,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let li = self.idx(loss)?;
        if !self.record {
            return Err(Error::Usage("backward on an inference tape".into()));
        }
        if self.nodes[li].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(vec![T::one()]);
        for i in (0..=li).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = Some(dy);
                continue;
            }
            self.backward_node(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn backward_node(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |i: usize| self.nodes[i].value.data();
        let mut acc = |i: usize, g: Vec<T>| {
            if !self.nodes[i].needs_grad {
                return;
            }
            match &mut grads[i] {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, v)| *e = *e + *v),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let g = kernels::conv2d_backward(geom, cols, val(*kernel), dy, self.needs(*input));
                if let Some(dx) = g.input {
                    acc(*input, dx);
                }
                acc(*kernel, g.kernel);
                if let Some(b) = bias {
                    acc(*b, g.bias);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let s = self.nodes[*input].value.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let m = (n * hw) as f64;
                let gv = val(*gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); dy.len()];
                for ch in 0..c {
                    let (mut sdy, mut sdyx) = (0.0f64, 0.0f64);
                    for smp in 0..n {
                        let off = (smp * c + ch) * hw;
                        for k in off..off + hw {
                            sdy += dy[k].as_f64();
                            sdyx += dy[k].as_f64() * xhat[k].as_f64();
                        }
                    }
                    dgamma[ch] = T::from_f64_lossy(sdyx);
                    dbeta[ch] = T::from_f64_lossy(sdy);
                    let scale = gv[ch].as_f64() * inv_std[ch];
                    for smp in 0..n {
                        let off = (smp * c + ch) * hw;
                        for k in off..off + hw {
                            let v = if *train {
                                scale / m * (m * dy[k].as_f64() - sdy - xhat[k].as_f64() * sdyx)
                            } else {
                                scale * dy[k].as_f64()
                            };
                            dx[k] = T::from_f64_lossy(v);
                        }
                    }
                }
                acc(*input, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let xs = self.nodes[*input].value.shape();
                let (n, f) = (xs[0], xs[1]);
                let g = self.nodes[*weight].value.shape()[0];
                if self.needs(*input) {
                    let mut dx = vec![T::zero(); n * f];
                    T::gemm(
                        n,
                        g,
                        f,
                        T::one(),
                        dy,
                        g as isize,
                        1,
                        val(*weight),
                        f as isize,
                        1,
                        T::zero(),
                        &mut dx,
                        f as isize,
                        1,
                    );
                    acc(*input, dx);
                }
                let mut dw = vec![T::zero(); g * f];
                T::gemm(
                    g,
                    n,
                    f,
                    T::one(),
                    dy,
                    1,
                    g as isize,
                    val(*input),
                    f as isize,
                    1,
                    T::zero(),
                    &mut dw,
                    f as isize,
                    1,
                );
                acc(*weight, dw);
                if let Some(b) = bias {
                    let db = (0..g)
                        .map(|j| {
                            T::from_f64_lossy((0..n).map(|r| dy[r * g + j].as_f64()).sum())
                        })
                        .collect();
                    acc(*b, db);
                }
            }
            Op::Relu { input } => {
                let dx = val(*input)
                    .iter()
                    .zip(dy)
                    .map(|(&x, &d)| if x > T::zero() { d } else { T::zero() })
                    .collect();
                acc(*input, dx);
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![T::zero(); self.nodes[*input].value.len()];
                for (&a, &d) in argmax.iter().zip(dy) {
                    dx[a] = dx[a] + d;
                }
                acc(*input, dx);
            }
            Op::GlobalAvgPool { input } => {
                let s = self.nodes[*input].value.shape();
                let hw = s[2] * s[3];
                let inv = T::from_f64_lossy(1.0 / hw as f64);
                let dx = dy
                    .iter()
                    .flat_map(|&d| std::iter::repeat_n(d * inv, hw))
                    .collect();
                acc(*input, dx);
            }
            Op::Reshape { input } => acc(*input, dy.to_vec()),
            Op::Add { lhs, rhs } => {
                acc(*lhs, dy.to_vec());
                acc(*rhs, dy.to_vec());
            }
            Op::Mul { lhs, rhs } => {
                let dl = dy.iter().zip(val(*rhs)).map(|(&d, &r)| d * r).collect();
                let dr = dy.iter().zip(val(*lhs)).map(|(&d, &l)| d * l).collect();
                acc(*lhs, dl);
                acc(*rhs, dr);
            }
            Op::Scale { input, factor } => {
                acc(*input, dy.iter().map(|&d| d * *factor).collect());
            }
            Op::Sum { input } => {
                acc(*input, vec![dy[0]; self.nodes[*input].value.len()]);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let k = self.nodes[*logits].value.shape()[1];
                let n = labels.len().max(1);
                let scale = dy[0].as_f64() / n as f64;
                let mut dx: Vec<T> = probs
                    .iter()
                    .map(|&p| T::from_f64_lossy(p.as_f64() * scale))
                    .collect();
                for (r, &y) in labels.iter().enumerate() {
                    let i = r * k + y;
                    dx[i] = T::from_f64_lossy(dx[i].as_f64() - scale);
                }
                acc(*logits, dx);
            }
        }
    }
}
