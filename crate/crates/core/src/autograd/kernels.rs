//! Raw NCHW kernels shared by the tape's forward and backward passes.

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.kw) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// Number of output positions over the whole batch.
    fn positions(&self) -> usize {
        self.n * self.out_h() * self.out_w()
    }
}

/// Output columns `ow` whose input column `ow*stride + j - pad` lies in
/// `0..w`, as a half-open range.
fn valid_range(out: usize, stride: usize, j: usize, pad: usize, w: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(j).div_ceil(stride);
    let hi = if w + pad > j {
        ((w + pad - j - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unrolls `input` into a `[cin*kh*kw, n*ho*wo]` matrix.
pub fn im2col<T: Scalar>(g: &ConvGeom, input: &[T]) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let l = g.positions();
    let mut cols = vec![T::zero(); g.patch() * l];
    let (pad, s) = (g.padding, g.stride);
    for ci in 0..g.cin {
        for i in 0..g.kh {
            let (ylo, yhi) = valid_range(ho, s, i, pad, g.h);
            for j in 0..g.kw {
                let (xlo, xhi) = valid_range(wo, s, j, pad, g.w);
                let row = (ci * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * l..(row + 1) * l];
                for n in 0..g.n {
                    let plane = &input[(n * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    for oh in ylo..yhi {
                        let y = oh * s + i - pad;
                        let src = &plane[y * g.w..][..g.w];
                        let d = &mut dst[(n * ho + oh) * wo..][..wo];
                        if s == 1 {
                            let x0 = xlo + j - pad;
                            d[xlo..xhi].copy_from_slice(&src[x0..x0 + xhi - xlo]);
                        } else {
                            for ow in xlo..xhi {
                                d[ow] = src[ow * s + j - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a column matrix back into an NCHW gradient buffer.
pub fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], out: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let l = g.positions();
    let (pad, s) = (g.padding, g.stride);
    for ci in 0..g.cin {
        for i in 0..g.kh {
            let (ylo, yhi) = valid_range(ho, s, i, pad, g.h);
            for j in 0..g.kw {
                let (xlo, xhi) = valid_range(wo, s, j, pad, g.w);
                let row = (ci * g.kh + i) * g.kw + j;
                let src = &cols[row * l..(row + 1) * l];
                for n in 0..g.n {
                    let plane = &mut out[(n * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    for oh in ylo..yhi {
                        let y = oh * s + i - pad;
                        let dst = &mut plane[y * g.w..][..g.w];
                        let c = &src[(n * ho + oh) * wo..][..wo];
                        if s == 1 {
                            let x0 = xlo + j - pad;
                            for (d, v) in dst[x0..x0 + xhi - xlo].iter_mut().zip(&c[xlo..xhi]) {
                                *d = *d + *v;
                            }
                        } else {
                            for ow in xlo..xhi {
                                let x = ow * s + j - pad;
                                dst[x] = dst[x] + c[ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation forward. Returns the NCHW output and the unrolled input.
pub fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
) -> (Vec<T>, Vec<T>) {
    let cols = im2col(g, input);
    let l = g.positions();
    let k = g.patch();
    let mut tmp = vec![T::zero(); g.cout * l];
    T::gemm(
        g.cout,
        k,
        l,
        T::one(),
        kernel,
        k as isize,
        1,
        &cols,
        l as isize,
        1,
        T::zero(),
        &mut tmp,
        l as isize,
        1,
    );
    let hw = g.out_h() * g.out_w();
    let mut out = vec![T::zero(); g.n * g.cout * hw];
    for co in 0..g.cout {
        let b = bias.map_or(T::zero(), |b| b[co]);
        for n in 0..g.n {
            let src = &tmp[co * l + n * hw..][..hw];
            let dst = &mut out[(n * g.cout + co) * hw..][..hw];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *s + b;
            }
        }
    }
    (out, cols)
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    cols: &[T],
    kernel: &[T],
    grad_out: &[T],
    need_input: bool,
) -> ConvGrads<T> {
    let l = g.positions();
    let k = g.patch();
    let hw = g.out_h() * g.out_w();
    // [cout, n*hw] view of the upstream gradient
    let mut dyt = vec![T::zero(); g.cout * l];
    let mut bias = vec![T::zero(); g.cout];
    for co in 0..g.cout {
        let mut acc = 0.0f64;
        for n in 0..g.n {
            let src = &grad_out[(n * g.cout + co) * hw..][..hw];
            dyt[co * l + n * hw..][..hw].copy_from_slice(src);
            acc += src.iter().map(|x| x.as_f64()).sum::<f64>();
        }
        bias[co] = T::from_f64_lossy(acc);
    }
    let mut dk = vec![T::zero(); g.cout * k];
    T::gemm(
        g.cout,
        l,
        k,
        T::one(),
        &dyt,
        l as isize,
        1,
        cols,
        1,
        l as isize,
        T::zero(),
        &mut dk,
        k as isize,
        1,
    );
    let input = need_input.then(|| {
        let mut dcols = vec![T::zero(); k * l];
        T::gemm(
            k,
            g.cout,
            l,
            T::one(),
            kernel,
            1,
            k as isize,
            &dyt,
            l as isize,
            1,
            T::zero(),
            &mut dcols,
            l as isize,
            1,
        );
        let mut dx = vec![T::zero(); g.n * g.cin * g.h * g.w];
        col2im(g, &dcols, &mut dx);
        dx
    });
    ConvGrads {
        input,
        kernel: dk,
        bias,
    }
}

/// Max pooling without padding; returns output and flat argmax per output.
pub fn maxpool_forward<T: Scalar>(
    input: &[T],
    nc: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>) {
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(nc * ho * wo);
    let mut arg = Vec::with_capacity(nc * ho * wo);
    for p in 0..nc {
        let base = p * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = base + oh * stride * w + ow * stride;
                for i in 0..k {
                    for j in 0..k {
                        let idx = base + (oh * stride + i) * w + ow * stride + j;
                        if input[idx] > input[best] {
                            best = idx;
                        }
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}
