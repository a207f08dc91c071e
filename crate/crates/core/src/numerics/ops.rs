use super::Tensor;
use crate::error::{dim_err, Result};

/// Numerically stable softmax along `axis`.
pub fn softmax(input: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = input.shape();
    if axis >= shape.len() {
        return Err(dim_err!("softmax axis {axis} out of range for {shape:?}"));
    }
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..n {
                let e = (x[at(k)] - max).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..n {
                out[at(k)] /= total;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Mean over the `T x V` slab of each channel of a `[C, T, V]` tensor.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let &[c, t, v] = input.shape() else {
        return Err(dim_err!("global_avg_pool expects [C, T, V], got {:?}", input.shape()));
    };
    let slab = t * v;
    if slab == 0 {
        return Err(dim_err!("global_avg_pool over an empty T x V slab"));
    }
    let out = input
        .data()
        .chunks_exact(slab)
        .map(|s| s.iter().sum::<f64>() / slab as f64)
        .collect::<Vec<_>>();
    debug_assert_eq!(out.len(), c);
    Ok(Tensor::from_vec(out))
}

/// Broadcasts each channel's pooled gradient back over its slab.
pub fn global_avg_pool_backward(grad_out: &Tensor, t: usize, v: usize) -> Result<Tensor> {
    let c = grad_out.len();
    let slab = t * v;
    if slab == 0 {
        return Err(dim_err!("global_avg_pool over an empty T x V slab"));
    }
    let mut out = Vec::with_capacity(c * slab);
    for &g in grad_out.data() {
        out.extend(std::iter::repeat_n(g / slab as f64, slab));
    }
    Tensor::new(vec![c, t, v], out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `grad` wherever the activation output was not positive.
pub(crate) fn relu_backward_inplace(grad: &mut [f64], activated: &[f64]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_uniform() {
        let y = softmax(&Tensor::from_vec(vec![0.0; 3]), 0).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_inputs_do_not_overflow() {
        let y = softmax(&Tensor::from_vec(vec![1000.0, 0.0]), 0).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!(y.data()[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_high_precision_values() {
        // exp(x_i) / sum_j exp(x_j) evaluated at 40 significant digits
        let expect = [
            0.090_030_573_170_380_46,
            0.244_728_471_054_797_64,
            0.665_240_955_774_821_9,
        ];
        let y = softmax(&Tensor::from_vec(vec![1.0, 2.0, 3.0]), 0).unwrap();
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_slices_sum_to_one_on_any_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::random(&[3, 4, 5], 20.0, &mut rng);
        for axis in 0..3 {
            let y = softmax(&x, axis).unwrap();
            assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let (a, b) = match axis {
                0 => (4, 5),
                1 => (3, 5),
                _ => (3, 4),
            };
            for i in 0..a {
                for j in 0..b {
                    let s: f64 = (0..x.shape()[axis])
                        .map(|k| match axis {
                            0 => y.get(&[k, i, j]),
                            1 => y.get(&[i, k, j]),
                            _ => y.get(&[i, j, k]),
                        })
                        .sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
        assert!(softmax(&x, 3).is_err());
    }

    #[test]
    fn gap_constant_and_identity() {
        let y = global_avg_pool(&Tensor::full(&[4, 3, 2], 2.5)).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.5));
        let one = Tensor::new(vec![1, 1, 1], vec![-4.0]).unwrap();
        assert_eq!(global_avg_pool(&one).unwrap().data(), &[-4.0]);
        assert!(global_avg_pool(&Tensor::zeros(&[2, 0, 3])).is_err());
    }

    #[test]
    fn gap_matches_loop_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::random(&[2, 3, 4], 1.0, &mut rng);
        let y = global_avg_pool(&x).unwrap();
        for c in 0..2 {
            let mut s = 0.0;
            for t in 0..3 {
                for v in 0..4 {
                    s += x.get(&[c, t, v]);
                }
            }
            assert!((y.data()[c] - s / 12.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }
}
