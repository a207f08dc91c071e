//! Per-channel batch normalization with hand-written backward.

use serde::{Deserialize, Serialize};

use super::{ParamRole, Parameter, Tensor};
use crate::error::{dim_err, Error, Result};

/// Momentum of the running-statistics moving average.
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Whether normalization uses batch statistics or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// A tensor viewed as `[outer, channels, inner]`; statistics are taken per
/// channel over the outer and inner extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormLayout {
    pub outer: usize,
    pub channels: usize,
    pub inner: usize,
}

impl NormLayout {
    pub fn len(&self) -> usize {
        self.outer * self.channels * self.inner
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements contributing to each channel's statistics.
    pub fn per_channel(&self) -> usize {
        self.outer * self.inner
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
        }
    }

    /// Folds a train-mode batch into the moving averages.
    pub fn update(&mut self, cache: &BnCache, momentum: f64) {
        if cache.mode != Mode::Train {
            return;
        }
        for (r, b) in self.mean.data_mut().iter_mut().zip(&cache.batch_mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.data_mut().iter_mut().zip(&cache.batch_var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

/// Values saved by the forward pass for backward and the running update.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub layout: NormLayout,
    pub mode: Mode,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    /// Unbiased batch variance (biased when a channel has one element).
    batch_var: Vec<f64>,
}

pub(crate) fn forward_raw(
    x: &[f64],
    layout: NormLayout,
    gamma: &[f64],
    beta: &[f64],
    stats: &RunningStats,
    mode: Mode,
    eps: f64,
) -> Result<(Vec<f64>, BnCache)> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("batch-norm eps must be > 0, got {eps}")));
    }
    let NormLayout { outer, channels, inner } = layout;
    if x.len() != layout.len() {
        return Err(dim_err!(
            "batch-norm input has {} values, layout {:?} needs {}",
            x.len(),
            layout,
            layout.len()
        ));
    }
    if gamma.len() != channels || beta.len() != channels || stats.mean.len() != channels {
        return Err(dim_err!(
            "batch-norm has {} channels but input has {channels}",
            gamma.len()
        ));
    }
    let m = layout.per_channel();
    if m == 0 {
        return Err(dim_err!("batch-norm over an empty channel slab"));
    }

    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    let mut batch_var = vec![0.0; channels];
    match mode {
        Mode::Train => {
            for o in 0..outer {
                for c in 0..channels {
                    let base = (o * channels + c) * inner;
                    mean[c] += x[base..base + inner].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|v| *v /= m as f64);
            for o in 0..outer {
                for c in 0..channels {
                    let base = (o * channels + c) * inner;
                    var[c] += x[base..base + inner]
                        .iter()
                        .map(|v| (v - mean[c]) * (v - mean[c]))
                        .sum::<f64>();
                }
            }
            for c in 0..channels {
                let ss = var[c];
                var[c] = ss / m as f64;
                batch_var[c] = if m > 1 { ss / (m - 1) as f64 } else { var[c] };
            }
        }
        Mode::Eval => {
            mean.copy_from_slice(stats.mean.data());
            var.copy_from_slice(stats.var.data());
        }
    }

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for c in 0..channels {
            let base = (o * channels + c) * inner;
            for i in base..base + inner {
                let h = (x[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                y[i] = gamma[c] * h + beta[c];
            }
        }
    }
    Ok((
        y,
        BnCache {
            layout,
            mode,
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn backward_raw(dy: &[f64], cache: &BnCache, gamma: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let NormLayout { outer, channels, inner } = cache.layout;
    let m = cache.layout.per_channel() as f64;
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for o in 0..outer {
        for c in 0..channels {
            let base = (o * channels + c) * inner;
            for i in base..base + inner {
                dbeta[c] += dy[i];
                dgamma[c] += dy[i] * cache.xhat[i];
            }
        }
    }
    let mut dx = vec![0.0; dy.len()];
    for o in 0..outer {
        for c in 0..channels {
            let base = (o * channels + c) * inner;
            let k = gamma[c] * cache.inv_std[c];
            for i in base..base + inner {
                dx[i] = match cache.mode {
                    Mode::Eval => k * dy[i],
                    Mode::Train => k * (dy[i] - (dbeta[c] + cache.xhat[i] * dgamma[c]) / m),
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Batch normalization over the leading (channel) axis of `input`.
///
/// Train mode normalizes with batch statistics and folds them into `stats`;
/// eval mode uses `stats`. A channel with a single element has zero batch
/// variance, so it normalizes to zero and outputs `beta`.
pub fn batchnorm(
    input: &Tensor,
    gamma: &Parameter,
    beta: &Parameter,
    stats: &mut RunningStats,
    mode: Mode,
    eps: f64,
) -> Result<Tensor> {
    let (out, cache) = forward_raw(
        input.data(),
        channel_first_layout(input)?,
        gamma.value.data(),
        beta.value.data(),
        stats,
        mode,
        eps,
    )?;
    stats.update(&cache, BN_MOMENTUM);
    Tensor::new(input.shape().to_vec(), out)
}

/// Gradients `(dx, dgamma, dbeta)` of [`batchnorm`] given its cache.
pub fn batchnorm_backward(grad_out: &Tensor, cache: &BnCache, gamma: &Parameter) -> Result<(Tensor, Tensor, Tensor)> {
    if grad_out.len() != cache.layout.len() {
        return Err(dim_err!("batch-norm grad_out does not match cached layout"));
    }
    let (dx, dg, db) = backward_raw(grad_out.data(), cache, gamma.value.data());
    Ok((
        Tensor::new(grad_out.shape().to_vec(), dx)?,
        Tensor::from_vec(dg),
        Tensor::from_vec(db),
    ))
}

/// Like [`batchnorm`] but returns the cache and leaves `stats` untouched.
pub fn batchnorm_with_cache(
    input: &Tensor,
    gamma: &Parameter,
    beta: &Parameter,
    stats: &RunningStats,
    mode: Mode,
    eps: f64,
) -> Result<(Tensor, BnCache)> {
    let (out, cache) = forward_raw(
        input.data(),
        channel_first_layout(input)?,
        gamma.value.data(),
        beta.value.data(),
        stats,
        mode,
        eps,
    )?;
    Ok((Tensor::new(input.shape().to_vec(), out)?, cache))
}

fn channel_first_layout(input: &Tensor) -> Result<NormLayout> {
    let (&channels, rest) = input
        .shape()
        .split_first()
        .ok_or_else(|| dim_err!("batch-norm input needs a channel axis"))?;
    Ok(NormLayout {
        outer: 1,
        channels,
        inner: rest.iter().product(),
    })
}

/// Batch-norm layer: affine parameters plus running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub stats: RunningStats,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Parameter::new(Tensor::ones(&[channels]), ParamRole::NormAffine),
            beta: Parameter::new(Tensor::zeros(&[channels]), ParamRole::NormAffine),
            stats: RunningStats::new(channels),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    /// Scale initialized to zero, so the layer outputs `beta` (zero).
    pub fn zero_init(channels: usize) -> Self {
        let mut bn = Self::new(channels);
        bn.gamma.value.fill(0.0);
        bn
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &[f64], layout: NormLayout, mode: Mode) -> Result<(Vec<f64>, BnCache)> {
        forward_raw(
            x,
            layout,
            self.gamma.value.data(),
            self.beta.value.data(),
            &self.stats,
            mode,
            self.eps,
        )
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &[f64], cache: &BnCache) -> Vec<f64> {
        let (dx, dg, db) = backward_raw(dy, cache, self.gamma.value.data());
        self.gamma.accumulate(&dg);
        self.beta.accumulate(&db);
        dx
    }

    pub fn commit(&mut self, cache: &BnCache) {
        self.stats.update(cache, self.momentum);
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(c: usize, g: f64, b: f64) -> (Parameter, Parameter) {
        (
            Parameter::weight(Tensor::full(&[c], g)),
            Parameter::weight(Tensor::full(&[c], b)),
        )
    }

    #[test]
    fn zero_gamma_outputs_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::random(&[3, 7], 5.0, &mut rng);
        let (g, mut b) = params(3, 0.0, 0.0);
        let mut stats = RunningStats::new(3);
        let y = batchnorm(&x, &g, &b, &mut stats, Mode::Train, BN_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        b.value = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
        for mode in [Mode::Train, Mode::Eval] {
            let y = batchnorm(&x, &g, &b, &mut stats, mode, BN_EPS).unwrap();
            for c in 0..3 {
                for i in 0..7 {
                    assert_eq!(y.get(&[c, i]), b.value.data()[c]);
                }
            }
        }
    }

    #[test]
    fn standardized_input_is_fixed_point() {
        // per-channel mean 0, variance 1 (biased)
        let x = Tensor::new(
            vec![2, 4],
            vec![1.0, -1.0, 1.0, -1.0, 2f64.sqrt(), 0.0, -(2f64.sqrt()), 0.0],
        )
        .unwrap();
        let (g, b) = params(2, 1.0, 0.0);
        let mut stats = RunningStats::new(2);
        // The fixed point is exact only as eps -> 0; the default eps rescales by
        // 1/sqrt(1 + eps).
        let y = batchnorm(&x, &g, &b, &mut stats, Mode::Train, 1e-12).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-9);
        let y = batchnorm(&x, &g, &b, &mut stats, Mode::Train, BN_EPS).unwrap();
        let s = 1.0 / (1.0 + BN_EPS).sqrt();
        assert!(y.max_abs_diff(&x.scale(s)) < 1e-9);
    }

    #[test]
    fn matches_explicit_loop_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::random(&[3, 5], 2.0, &mut rng);
        let (g, b) = params(3, 1.0, 0.0);
        let mut stats = RunningStats::new(3);
        let y = batchnorm(&x, &g, &b, &mut stats, Mode::Train, BN_EPS).unwrap();
        for c in 0..3 {
            let mut mean = 0.0;
            for i in 0..5 {
                mean += x.get(&[c, i]);
            }
            mean /= 5.0;
            let mut var = 0.0;
            for i in 0..5 {
                var += (x.get(&[c, i]) - mean).powi(2);
            }
            var /= 5.0;
            for i in 0..5 {
                let expect = (x.get(&[c, i]) - mean) / (var + BN_EPS).sqrt();
                assert!((y.get(&[c, i]) - expect).abs() < 1e-10);
            }
            // running stats: momentum 0.1 toward batch mean and unbiased variance
            assert!((stats.mean.data()[c] - 0.1 * mean).abs() < 1e-12);
            assert!((stats.var.data()[c] - (0.9 + 0.1 * var * 5.0 / 4.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_uses_running_stats() {
        let x = Tensor::new(vec![1, 2], vec![3.0, 5.0]).unwrap();
        let (g, b) = params(1, 2.0, 1.0);
        let mut stats = RunningStats {
            mean: Tensor::from_vec(vec![1.0]),
            var: Tensor::from_vec(vec![4.0]),
        };
        let y = batchnorm(&x, &g, &b, &mut stats, Mode::Eval, 1e-12).unwrap();
        assert!((y.data()[0] - 3.0).abs() < 1e-9);
        assert!((y.data()[1] - 5.0).abs() < 1e-9);
    }

    #[test]
    fn nonpositive_eps_is_config_error() {
        let x = Tensor::zeros(&[1, 2]);
        let (g, b) = params(1, 1.0, 0.0);
        let mut stats = RunningStats::new(1);
        assert!(matches!(
            batchnorm(&x, &g, &b, &mut stats, Mode::Train, 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_element_channel_outputs_beta() {
        let x = Tensor::new(vec![2, 1], vec![3.0, -7.0]).unwrap();
        let (g, b) = params(2, 1.5, 0.25);
        let mut stats = RunningStats::new(2);
        let y = batchnorm(&x, &g, &b, &mut stats, Mode::Train, BN_EPS).unwrap();
        assert_eq!(y.data(), &[0.25, 0.25]);
        assert!(y.all_finite() && stats.var.all_finite());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::random(&[3, 6], 1.0, &mut rng);
        let gamma = Parameter::weight(Tensor::random(&[3], 1.5, &mut rng));
        let beta = Parameter::weight(Tensor::random(&[3], 1.0, &mut rng));
        let probe = Tensor::random(&[3, 6], 1.0, &mut rng);
        let stats = RunningStats {
            mean: Tensor::random(&[3], 0.5, &mut rng),
            var: Tensor::from_vec(vec![0.5, 1.0, 2.0]),
        };
        for mode in [Mode::Train, Mode::Eval] {
            let (_, cache) = batchnorm_with_cache(&x, &gamma, &beta, &stats, mode, BN_EPS).unwrap();
            let (dx, dg, db) = batchnorm_backward(&probe, &cache, &gamma).unwrap();
            let f = |inp: &Tensor, g: &Parameter, b: &Parameter| {
                let (y, _) = batchnorm_with_cache(inp, g, b, &stats, mode, BN_EPS).unwrap();
                y.data().iter().zip(probe.data()).map(|(a, p)| a * p).sum::<f64>()
            };
            let ndx = finite_diff_grad(|v| f(v, &gamma, &beta), &x, 1e-5).unwrap();
            let ndg = finite_diff_grad(|v| f(&x, &Parameter::weight(v.clone()), &beta), &gamma.value, 1e-5).unwrap();
            let ndb = finite_diff_grad(|v| f(&x, &gamma, &Parameter::weight(v.clone())), &beta.value, 1e-5).unwrap();
            assert!(dx.max_abs_diff(&ndx) < 1e-7, "{mode:?} dx");
            assert!(dg.max_abs_diff(&ndg) < 1e-7, "{mode:?} dgamma");
            assert!(db.max_abs_diff(&ndb) < 1e-7, "{mode:?} dbeta");
        }
    }
}
