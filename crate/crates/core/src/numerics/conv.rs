//! 2-D cross-correlation over a single `[C, H, W]` sample.
//!
//! The raw kernels accumulate into caller-provided buffers so that layers
//! can run them over every person in a batch without reallocating.

use super::Tensor;
use crate::error::{dim_err, Result};

/// Shapes and hyper-parameters of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        if sh == 0 || sw == 0 {
            return Err(dim_err!("stride must be >= 1, got {:?}", self.stride));
        }
        if kh == 0 || kw == 0 {
            return Err(dim_err!("empty kernel {:?}", self.kernel));
        }
        if self.height + 2 * self.padding.0 < kh || self.width + 2 * self.padding.1 < kw {
            return Err(dim_err!(
                "kernel {:?} does not fit padded input {}x{} (padding {:?})",
                self.kernel,
                self.height,
                self.width,
                self.padding
            ));
        }
        Ok(())
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding.0 - self.kernel.0) / self.stride.0 + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding.1 - self.kernel.1) / self.stride.1 + 1
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn output_len(&self) -> usize {
        self.out_channels * self.out_height() * self.out_width()
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel.0 * self.kernel.1
    }

    /// Kernels that only slide along the first axis with unit stride on the
    /// second take the row-contiguous path.
    fn is_columnar(&self) -> bool {
        self.kernel.1 == 1 && self.padding.1 == 0 && self.stride.1 == 1
    }

    /// Output rows `[lo, hi)` whose input row `oh * sh + k - ph` is in range.
    fn valid_rows(&self, k: usize) -> (usize, usize) {
        let (sh, ph) = (self.stride.0, self.padding.0);
        let oh = self.out_height();
        let lo = if ph > k { (ph - k).div_ceil(sh).min(oh) } else { 0 };
        // largest oh with oh*sh + k - ph <= height - 1
        let hi = if self.height + ph > k {
            ((self.height + ph - k - 1) / sh + 1).min(oh)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Accumulates `conv(input, weight)` into `out`.
pub(crate) fn forward_into(g: &ConvGeometry, input: &[f64], weight: &[f64], out: &mut [f64]) {
    debug_assert_eq!(input.len(), g.input_len());
    debug_assert_eq!(weight.len(), g.weight_len());
    debug_assert_eq!(out.len(), g.output_len());
    let (kh, kw) = g.kernel;
    let (oh_n, ow_n) = (g.out_height(), g.out_width());
    let (h, w) = (g.height, g.width);

    if g.is_columnar() {
        for co in 0..g.out_channels {
            let out_c = &mut out[co * oh_n * w..(co + 1) * oh_n * w];
            for ci in 0..g.in_channels {
                let in_c = &input[ci * h * w..(ci + 1) * h * w];
                let w_base = (co * g.in_channels + ci) * kh;
                for k in 0..kh {
                    let wv = weight[w_base + k];
                    let (lo, hi) = g.valid_rows(k);
                    if lo == hi {
                        continue;
                    }
                    if g.stride.0 == 1 {
                        let ih0 = lo + k - g.padding.0;
                        axpy(&mut out_c[lo * w..hi * w], wv, &in_c[ih0 * w..(ih0 + hi - lo) * w]);
                    } else {
                        for oh in lo..hi {
                            let ih = oh * g.stride.0 + k - g.padding.0;
                            axpy(&mut out_c[oh * w..(oh + 1) * w], wv, &in_c[ih * w..(ih + 1) * w]);
                        }
                    }
                }
            }
        }
        return;
    }

    for co in 0..g.out_channels {
        for ci in 0..g.in_channels {
            for ki in 0..kh {
                for kj in 0..kw {
                    let wv = weight[((co * g.in_channels + ci) * kh + ki) * kw + kj];
                    for oh in 0..oh_n {
                        let ih = (oh * g.stride.0 + ki) as isize - g.padding.0 as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for ow in 0..ow_n {
                            let iw = (ow * g.stride.1 + kj) as isize - g.padding.1 as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            out[(co * oh_n + oh) * ow_n + ow] += wv * input[(ci * h + ih as usize) * w + iw as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates input and weight gradients for `conv(input, weight)`.
pub(crate) fn backward_into(
    g: &ConvGeometry,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    grad_input: &mut [f64],
    grad_weight: &mut [f64],
) {
    debug_assert_eq!(grad_out.len(), g.output_len());
    debug_assert_eq!(grad_input.len(), g.input_len());
    debug_assert_eq!(grad_weight.len(), g.weight_len());
    let (kh, kw) = g.kernel;
    let (oh_n, ow_n) = (g.out_height(), g.out_width());
    let (h, w) = (g.height, g.width);

    if g.is_columnar() {
        for co in 0..g.out_channels {
            let go_c = &grad_out[co * oh_n * w..(co + 1) * oh_n * w];
            for ci in 0..g.in_channels {
                let in_c = &input[ci * h * w..(ci + 1) * h * w];
                let gi_c = &mut grad_input[ci * h * w..(ci + 1) * h * w];
                let w_base = (co * g.in_channels + ci) * kh;
                for k in 0..kh {
                    let wv = weight[w_base + k];
                    let (lo, hi) = g.valid_rows(k);
                    if lo == hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    if g.stride.0 == 1 {
                        let ih0 = lo + k - g.padding.0;
                        let span = ih0 * w..(ih0 + hi - lo) * w;
                        acc += dot(&go_c[lo * w..hi * w], &in_c[span.clone()]);
                        axpy(&mut gi_c[span], wv, &go_c[lo * w..hi * w]);
                    } else {
                        for oh in lo..hi {
                            let ih = oh * g.stride.0 + k - g.padding.0;
                            let go_row = &go_c[oh * w..(oh + 1) * w];
                            acc += dot(go_row, &in_c[ih * w..(ih + 1) * w]);
                            axpy(&mut gi_c[ih * w..(ih + 1) * w], wv, go_row);
                        }
                    }
                    grad_weight[w_base + k] += acc;
                }
            }
        }
        return;
    }

    for co in 0..g.out_channels {
        for ci in 0..g.in_channels {
            for ki in 0..kh {
                for kj in 0..kw {
                    let widx = ((co * g.in_channels + ci) * kh + ki) * kw + kj;
                    let wv = weight[widx];
                    let mut acc = 0.0;
                    for oh in 0..oh_n {
                        let ih = (oh * g.stride.0 + ki) as isize - g.padding.0 as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for ow in 0..ow_n {
                            let iw = (ow * g.stride.1 + kj) as isize - g.padding.1 as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let go = grad_out[(co * oh_n + oh) * ow_n + ow];
                            let ii = (ci * h + ih as usize) * w + iw as usize;
                            acc += go * input[ii];
                            grad_input[ii] += go * wv;
                        }
                    }
                    grad_weight[widx] += acc;
                }
            }
        }
    }
}

fn geometry(input: &Tensor, weight: &Tensor, stride: (usize, usize), padding: (usize, usize)) -> Result<ConvGeometry> {
    let &[cin, h, w] = input.shape() else {
        return Err(dim_err!("conv2d input must be [C, H, W], got {:?}", input.shape()));
    };
    let &[cout, wcin, kh, kw] = weight.shape() else {
        return Err(dim_err!(
            "conv2d weight must be [C_out, C_in, kH, kW], got {:?}",
            weight.shape()
        ));
    };
    if wcin != cin {
        return Err(dim_err!("conv2d input has {cin} channels but weight expects {wcin}"));
    }
    let g = ConvGeometry {
        in_channels: cin,
        height: h,
        width: w,
        out_channels: cout,
        kernel: (kh, kw),
        stride,
        padding,
    };
    g.validate()?;
    Ok(g)
}

/// Cross-correlation of a `[C_in, H, W]` input with a `[C_out, C_in, kH, kW]`
/// kernel (no kernel flip).
pub fn conv2d(input: &Tensor, weight: &Tensor, stride: (usize, usize), padding: (usize, usize)) -> Result<Tensor> {
    let g = geometry(input, weight, stride, padding)?;
    let mut out = vec![0.0; g.output_len()];
    forward_into(&g, input.data(), weight.data(), &mut out);
    Tensor::new(vec![g.out_channels, g.out_height(), g.out_width()], out)
}

/// Gradients of `sum(grad_out * conv2d(input, weight))` with respect to the
/// input and the weight.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    stride: (usize, usize),
    padding: (usize, usize),
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let g = geometry(input, weight, stride, padding)?;
    let expected = [g.out_channels, g.out_height(), g.out_width()];
    if grad_out.shape() != expected {
        return Err(dim_err!(
            "conv2d grad_out shape {:?}, expected {:?}",
            grad_out.shape(),
            expected
        ));
    }
    let mut gi = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(weight.shape());
    backward_into(
        &g,
        input.data(),
        weight.data(),
        grad_out.data(),
        gi.data_mut(),
        gw.data_mut(),
    );
    Ok((gi, gw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Straight six-loop reference with explicit zero padding.
    fn naive(input: &Tensor, weight: &Tensor, s: (usize, usize), p: (usize, usize)) -> Tensor {
        let [cin, h, w] = input.shape().try_into().unwrap();
        let [cout, _, kh, kw] = weight.shape().try_into().unwrap();
        let oh = (h + 2 * p.0 - kh) / s.0 + 1;
        let ow = (w + 2 * p.1 - kw) / s.1 + 1;
        let mut out = Tensor::zeros(&[cout, oh, ow]);
        for co in 0..cout {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * s.0 + i) as isize - p.0 as isize;
                                let ix = (x * s.1 + j) as isize - p.1 as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += input.get(&[ci, iy as usize, ix as usize]) * weight.get(&[co, ci, i, j]);
                                }
                            }
                        }
                    }
                    out.set(&[co, y, x], acc);
                }
            }
        }
        out
    }

    #[test]
    fn scalar_product() {
        let x = Tensor::new(vec![1, 1, 1], vec![3.0]).unwrap();
        let w = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        assert_eq!(conv2d(&x, &w, (1, 1), (0, 0)).unwrap().data(), &[6.0]);
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::random(&[1, 4, 5], 1.0, &mut rng);
        let w = Tensor::ones(&[1, 1, 1, 1]);
        assert_eq!(conv2d(&x, &w, (1, 1), (0, 0)).unwrap().data(), x.data());
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::random(&[2, 3, 4], 1.0, &mut rng);
        let w = Tensor::random(&[2, 2, 1, 3], 1.0, &mut rng);
        let got = conv2d(&x, &w, (1, 1), (0, 1)).unwrap();
        assert!(got.max_abs_diff(&naive(&x, &w, (1, 1), (0, 1))) < 1e-12);
    }

    #[test]
    fn columnar_path_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, t) in &[(1usize, 9usize), (2, 9), (2, 10), (1, 3), (2, 1), (3, 7)] {
            let x = Tensor::random(&[3, t, 5], 1.0, &mut rng);
            let w = Tensor::random(&[4, 3, 9, 1], 1.0, &mut rng);
            let got = conv2d(&x, &w, (stride, 1), (4, 0)).unwrap();
            assert!(got.max_abs_diff(&naive(&x, &w, (stride, 1), (4, 0))) < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let x = Tensor::zeros(&[2, 3, 3]);
        let w = Tensor::zeros(&[1, 3, 1, 1]);
        assert!(matches!(
            conv2d(&x, &w, (1, 1), (0, 0)),
            Err(crate::Error::Dimension(_))
        ));
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 1, 1]), (0, 1), (0, 0)).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 5, 1]), (1, 1), (0, 0)).is_err());
    }

    #[test]
    fn linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::random(&[2, 6, 3], 1.0, &mut rng);
        let y = Tensor::random(&[2, 6, 3], 1.0, &mut rng);
        let w = Tensor::random(&[3, 2, 3, 1], 1.0, &mut rng);
        let (a, b) = (0.7, -1.3);
        let combo = x.scale(a).add(&y.scale(b)).unwrap();
        let lhs = conv2d(&combo, &w, (2, 1), (1, 0)).unwrap();
        let rhs = conv2d(&x, &w, (2, 1), (1, 0))
            .unwrap()
            .scale(a)
            .add(&conv2d(&y, &w, (2, 1), (1, 0)).unwrap().scale(b))
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-9);
    }

    fn check_backward(x: &Tensor, w: &Tensor, s: (usize, usize), p: (usize, usize), seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = conv2d(x, w, s, p).unwrap();
        let probe = Tensor::random(out.shape(), 1.0, &mut rng);
        let (gi, gw) = conv2d_backward(x, w, s, p, &probe).unwrap();
        let loss = |inp: &Tensor, wt: &Tensor| {
            let o = conv2d(inp, wt, s, p).unwrap();
            o.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let ngi = finite_diff_grad(|v| loss(v, w), x, 1e-5).unwrap();
        let ngw = finite_diff_grad(|v| loss(x, v), w, 1e-5).unwrap();
        assert!(gi.max_abs_diff(&ngi) < 1e-8, "input grad");
        assert!(gw.max_abs_diff(&ngw) < 1e-8, "weight grad");
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::random(&[2, 7, 4], 1.0, &mut rng);
        check_backward(&x, &Tensor::random(&[3, 2, 9, 1], 1.0, &mut rng), (1, 1), (4, 0), 6);
        check_backward(&x, &Tensor::random(&[3, 2, 9, 1], 1.0, &mut rng), (2, 1), (4, 0), 7);
        check_backward(&x, &Tensor::random(&[2, 2, 2, 3], 1.0, &mut rng), (2, 2), (1, 1), 8);
        check_backward(&x, &Tensor::random(&[4, 2, 1, 1], 1.0, &mut rng), (1, 1), (0, 0), 9);
    }
}
