//! Finite-difference checks of every hand-written backward pass, bundled
//! so the CLI and the acceptance suite run the same thing.
//!
//! Coordinates whose `±h` probes change which ReLUs are active sit on a
//! kink, where central differences do not estimate the derivative. Those
//! are excluded from the error and counted in [`GradcheckReport::skipped`].

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::loss::cross_entropy_batch;
use super::trainer::{unrolled_loss_with_pattern, unrolled_step};
use crate::error::{Error, Result};
use crate::feedback::{ControlFeedbackBlock, SemanticAttentionBlock, Variant, FB_DIM};
use crate::graph::{build_partitioned_adjacency, SkeletonLayout};
use crate::net::{GcnLayer, Network, NetworkConfig, Slot, StGcnBlock};
use crate::numerics::{finite_diff_grad, max_relative_error, BatchNorm, Mode, NormLayout, Tensor, FD_STEP};

pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const UNROLLED_TOLERANCE: f64 = 1e-3;
/// At most this fraction of coordinates may be skipped as kinks.
pub const MAX_SKIPPED_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Which gradient produced the worst error.
    pub worst: String,
    pub checked: usize,
    pub skipped: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance && self.skipped as f64 <= MAX_SKIPPED_FRACTION * self.checked as f64
    }
}

struct Worst {
    err: f64,
    at: String,
    checked: usize,
    skipped: usize,
}

impl Worst {
    fn new() -> Self {
        Self {
            err: 0.0,
            at: String::new(),
            checked: 0,
            skipped: 0,
        }
    }

    fn record(&mut self, at: &str, analytic: &Tensor, numeric: &Tensor) {
        self.record_smooth(at, analytic, numeric, &vec![true; numeric.len()]);
    }

    fn record_smooth(&mut self, at: &str, analytic: &Tensor, numeric: &Tensor, smooth: &[bool]) {
        let keep = |t: &Tensor| Tensor::from_vec(t.data().iter().zip(smooth).filter(|p| *p.1).map(|p| *p.0).collect());
        let e = if analytic.shape() == numeric.shape() {
            max_relative_error(&keep(analytic), &keep(numeric))
        } else {
            f64::INFINITY
        };
        self.checked += smooth.len();
        self.skipped += smooth.iter().filter(|s| !**s).count();
        if e >= self.err {
            self.err = e;
            self.at = at.to_string();
        }
    }

    fn report(self, name: &str, tolerance: f64) -> GradcheckReport {
        GradcheckReport {
            name: name.to_string(),
            max_rel_err: self.err,
            tolerance,
            worst: self.at,
            checked: self.checked,
            skipped: self.skipped,
        }
    }
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Central differences of a function that also reports its ReLU pattern.
/// The mask is false where either probe changes the pattern.
fn fd_smooth<F>(mut f: F, x: &Tensor) -> Result<(Tensor, Vec<bool>)>
where
    F: FnMut(&Tensor) -> Result<(f64, Vec<bool>)>,
{
    let (_, base) = f(x)?;
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    let mut smooth = vec![true; x.len()];
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let (up, pu) = f(&probe)?;
        probe.data_mut()[i] = orig - FD_STEP;
        let (down, pd) = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Oracle(format!("non-finite value probing element {i}")));
        }
        grad.data_mut()[i] = (up - down) / (2.0 * FD_STEP);
        smooth[i] = pu == base && pd == base;
    }
    Ok((grad, smooth))
}

/// FD gradient of `loss` with respect to the tensor selected by `get`.
fn fd_field<S: Clone>(state: &S, get: fn(&mut S) -> &mut Tensor, loss: impl Fn(&S) -> f64) -> Result<Tensor> {
    let mut base = state.clone();
    let x0 = get(&mut base).clone();
    finite_diff_grad(
        |w| {
            let mut s = state.clone();
            *get(&mut s) = w.clone();
            loss(&s)
        },
        &x0,
        FD_STEP,
    )
}

fn check_gcn(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let adj = Arc::new(build_partitioned_adjacency(&SkeletonLayout::coco18())?);
    let mut layer = GcnLayer::new(3, 4, adj, true, rng);
    let mask = layer.edge_importance.as_mut().expect("mask requested");
    mask.value = Tensor::random(mask.value.shape(), 0.5, rng).map(|v| v + 1.0);
    let x = Tensor::random(&[2, 3, 3, 18], 1.0, rng);
    let (y, cache) = layer.forward(&x)?;
    let probe = Tensor::random(y.shape(), 1.0, rng);
    let dx = layer.backward(&cache, &probe)?;
    let loss = |l: &GcnLayer, x: &Tensor| dot(&l.forward(x).expect("shape checked").0, &probe);

    let mut w = Worst::new();
    w.record("x", &dx, &finite_diff_grad(|v| loss(&layer, v), &x, FD_STEP)?);
    w.record(
        "weight",
        &layer.weight.grad,
        &fd_field(&layer, |l| &mut l.weight.value, |l| loss(l, &x))?,
    );
    w.record(
        "bias",
        &layer.bias.grad,
        &fd_field(&layer, |l| &mut l.bias.value, |l| loss(l, &x))?,
    );
    let nm = fd_field(
        &layer,
        |l| &mut l.edge_importance.as_mut().expect("mask").value,
        |l| loss(l, &x),
    )?;
    w.record(
        "edge_importance",
        &layer.edge_importance.as_ref().expect("mask").grad,
        &nm,
    );
    Ok(w.report("gcn", LAYER_TOLERANCE))
}

fn block_field<F>(block: &StGcnBlock, get: fn(&mut StGcnBlock) -> &mut Tensor, loss: F) -> Result<(Tensor, Vec<bool>)>
where
    F: Fn(&StGcnBlock) -> Result<(f64, Vec<bool>)>,
{
    let x0 = get(&mut block.clone()).clone();
    fd_smooth(
        |w| {
            let mut b = block.clone();
            *get(&mut b) = w.clone();
            loss(&b)
        },
        &x0,
    )
}

fn check_tcn(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let layout = SkeletonLayout::new(5, vec![(0, 1), (1, 2), (1, 3), (3, 4)], 1)?;
    let adj = Arc::new(build_partitioned_adjacency(&layout)?);
    // stride 2 with a channel change exercises the projected residual
    let mut base = StGcnBlock::new(3, 4, 2, false, adj, false, rng);
    for bn in [&mut base.bn, &mut base.tcn.bn] {
        bn.gamma.value = Tensor::random(&[4], 0.5, rng).map(|v| v + 1.0);
        bn.beta.value = Tensor::random(&[4], 0.5, rng);
        bn.stats.mean = Tensor::random(&[4], 0.5, rng);
        bn.stats.var = Tensor::random(&[4], 0.5, rng).map(|v| v + 1.0);
    }
    let x = Tensor::random(&[2, 3, 11, 5], 1.0, rng);
    let mut w = Worst::new();
    // Biases feeding a train-mode norm have an identically zero gradient, so
    // they are compared in eval mode only.
    for mode in [Mode::Train, Mode::Eval] {
        let mut block = base.clone();
        let (y, cache) = block.forward(&x, mode)?;
        let probe = Tensor::random(y.shape(), 1.0, rng);
        let dx = block.backward(&cache, &probe)?;
        let loss = |b: &StGcnBlock, x: &Tensor| -> Result<(f64, Vec<bool>)> {
            let (y, c) = b.forward(x, mode)?;
            Ok((dot(&y, &probe), c.relu_pattern().collect()))
        };
        let tag = if mode == Mode::Train { "train" } else { "eval" };
        let (n, m) = fd_smooth(|v| loss(&block, v), &x)?;
        w.record_smooth(&format!("{tag} x"), &dx, &n, &m);
        let l = |b: &StGcnBlock| loss(b, &x);
        let (n, m) = block_field(&block, |b| &mut b.tcn.weight.value, l)?;
        w.record_smooth(&format!("{tag} tcn.weight"), &block.tcn.weight.grad, &n, &m);
        let (n, m) = block_field(&block, |b| &mut b.tcn.bn.gamma.value, l)?;
        w.record_smooth(&format!("{tag} tcn.bn.gamma"), &block.tcn.bn.gamma.grad, &n, &m);
        let (n, m) = block_field(&block, |b| &mut b.gcn.weight.value, l)?;
        w.record_smooth(&format!("{tag} gcn.weight"), &block.gcn.weight.grad, &n, &m);
        if mode == Mode::Eval {
            let (n, m) = block_field(&block, |b| &mut b.tcn.bias.value, l)?;
            w.record_smooth("eval tcn.bias", &block.tcn.bias.grad, &n, &m);
            let (n, m) = block_field(&block, |b| &mut b.gcn.bias.value, l)?;
            w.record_smooth("eval gcn.bias", &block.gcn.bias.grad, &n, &m);
        }
    }
    Ok(w.report("tcn", LAYER_TOLERANCE))
}

fn check_batchnorm(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let layout = NormLayout {
        outer: 3,
        channels: 4,
        inner: 5,
    };
    let mut bn = BatchNorm::new(4);
    bn.gamma.value = Tensor::random(&[4], 0.5, rng).map(|v| v + 1.0);
    bn.beta.value = Tensor::random(&[4], 0.5, rng);
    let x = Tensor::random(&[layout.len()], 2.0, rng);
    let probe = Tensor::random(&[layout.len()], 1.0, rng);
    let (_, cache) = bn.forward(x.data(), layout, Mode::Train)?;
    let dx = Tensor::from_vec(bn.backward(probe.data(), &cache));
    let loss = |b: &BatchNorm, x: &Tensor| {
        let (y, _) = b.forward(x.data(), layout, Mode::Train).expect("layout checked");
        y.iter().zip(probe.data()).map(|(a, p)| a * p).sum::<f64>()
    };

    let mut w = Worst::new();
    w.record("x", &dx, &finite_diff_grad(|v| loss(&bn, v), &x, FD_STEP)?);
    w.record(
        "gamma",
        &bn.gamma.grad,
        &fd_field(&bn, |b| &mut b.gamma.value, |b| loss(b, &x))?,
    );
    w.record(
        "beta",
        &bn.beta.grad,
        &fd_field(&bn, |b| &mut b.beta.value, |b| loss(b, &x))?,
    );
    Ok(w.report("batch_norm", LAYER_TOLERANCE))
}

fn check_semantic(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let mut block = SemanticAttentionBlock::new(3, rng);
    block.res_gate.value.fill(rng.gen_range(0.3..1.0));
    block.gate_bn.gamma.value = Tensor::random(&[3], 0.5, rng).map(|v| v + 1.0);
    block.gate_bn.beta.value = Tensor::random(&[3], 0.3, rng);
    let x = Tensor::random(&[4, 3, 4, 5], 1.0, rng);
    let fb = Tensor::random(&[2, FB_DIM], 1.0, rng);
    let (y, cache) = block.forward(&x, 2, &fb, Mode::Train)?;
    let probe = Tensor::random(y.shape(), 1.0, rng);
    let (dx, dfb) = block.backward(&cache, &probe)?;
    let loss = |b: &SemanticAttentionBlock, x: &Tensor, fb: &Tensor| {
        dot(&b.forward(x, 2, fb, Mode::Train).expect("shape checked").0, &probe)
    };

    let mut w = Worst::new();
    w.record("x", &dx, &finite_diff_grad(|v| loss(&block, v, &fb), &x, FD_STEP)?);
    w.record("fb", &dfb, &finite_diff_grad(|v| loss(&block, &x, v), &fb, FD_STEP)?);
    let l = |b: &SemanticAttentionBlock| loss(b, &x, &fb);
    w.record(
        "q_proj",
        &block.q_proj.grad,
        &fd_field(&block, |b| &mut b.q_proj.value, l)?,
    );
    w.record(
        "kv_proj",
        &block.kv_proj.grad,
        &fd_field(&block, |b| &mut b.kv_proj.value, l)?,
    );
    w.record(
        "gate_conv",
        &block.gate_conv.grad,
        &fd_field(&block, |b| &mut b.gate_conv.value, l)?,
    );
    w.record(
        "gate_bn.gamma",
        &block.gate_bn.gamma.grad,
        &fd_field(&block, |b| &mut b.gate_bn.gamma.value, l)?,
    );
    w.record(
        "gate_bn.beta",
        &block.gate_bn.beta.grad,
        &fd_field(&block, |b| &mut b.gate_bn.beta.value, l)?,
    );
    w.record(
        "res_gate",
        &block.res_gate.grad,
        &fd_field(&block, |b| &mut b.res_gate.value, l)?,
    );
    Ok(w.report("semantic_attention", LAYER_TOLERANCE))
}

fn check_control(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let mut block = ControlFeedbackBlock::new(4, rng);
    block.gate.value.fill(rng.gen_range(0.3..1.0));
    block.proj_bias.value = Tensor::random(&[4], 0.5, rng);
    let x = Tensor::random(&[4, 4, 3, 5], 1.0, rng);
    let fb = Tensor::random(&[2, FB_DIM], 1.0, rng);
    let (y, cache) = block.forward(&x, 2, &fb)?;
    let probe = Tensor::random(y.shape(), 1.0, rng);
    let (dx, dfb) = block.backward(&cache, &probe)?;
    let loss =
        |b: &ControlFeedbackBlock, x: &Tensor, fb: &Tensor| dot(&b.forward(x, 2, fb).expect("shape checked").0, &probe);

    let mut w = Worst::new();
    w.record("x", &dx, &finite_diff_grad(|v| loss(&block, v, &fb), &x, FD_STEP)?);
    w.record("fb", &dfb, &finite_diff_grad(|v| loss(&block, &x, v), &fb, FD_STEP)?);
    let l = |b: &ControlFeedbackBlock| loss(b, &x, &fb);
    w.record("proj", &block.proj.grad, &fd_field(&block, |b| &mut b.proj.value, l)?);
    w.record(
        "proj_bias",
        &block.proj_bias.grad,
        &fd_field(&block, |b| &mut b.proj_bias.value, l)?,
    );
    w.record(
        "eca_kernel",
        &block.eca_kernel.grad,
        &fd_field(&block, |b| &mut b.eca_kernel.value, l)?,
    );
    w.record("gate", &block.gate.grad, &fd_field(&block, |b| &mut b.gate.value, l)?);
    Ok(w.report("control_feedback", LAYER_TOLERANCE))
}

fn check_loss(rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let logits = Tensor::random(&[3, 5], 3.0, rng);
    let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..5)).collect();
    let (_, grad) = cross_entropy_batch(&logits, &labels)?;
    let num = finite_diff_grad(
        |l| cross_entropy_batch(l, &labels).expect("shape checked").0,
        &logits,
        FD_STEP,
    )?;
    let mut w = Worst::new();
    w.record("logits", &grad, &num);
    Ok(w.report("cross_entropy", LAYER_TOLERANCE))
}

/// The tiny network used for the unrolled check: 2 -> 4 -> 4 channels,
/// two blocks, a five-joint tree.
pub fn tiny_network(seed: u64, variant: Variant) -> Result<Network> {
    let layout = SkeletonLayout::new(5, vec![(0, 1), (1, 2), (1, 3), (3, 4)], 1)?;
    let mut net = Network::new(NetworkConfig::from_plan(2, 3, layout, &[(4, 1), (4, 1)]).with_seed(seed))?;
    net.grow(variant)?;
    Ok(net)
}

fn set_param(net: &mut Network, name: &str, value: &Tensor) {
    net.visit_mut(&mut |n, slot| {
        if n == name {
            if let Slot::Param(p) = slot {
                p.value = value.clone();
            }
        }
    });
}

fn check_unrolled(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradcheckReport> {
    let mut net = tiny_network(seed, Variant::Semantic)?;
    let sa = net.semantic.as_mut().expect("grown");
    sa.res_gate.value.fill(rng.gen_range(0.3..1.0));
    sa.gate_bn.gamma.value = Tensor::random(&[2], 0.5, rng).map(|v| v + 1.0);
    let comp = net.compressor.as_mut().expect("grown");
    comp.bias.value = Tensor::random(&[FB_DIM], 0.5, rng);

    let persons = 2;
    let windows: Vec<Tensor> = (0..3).map(|_| Tensor::random(&[4, 2, 4, 5], 1.0, rng)).collect();
    let labels: Vec<usize> = (0..2).map(|_| rng.gen_range(0..3)).collect();
    net.zero_grad();
    let (_, _, dx) = unrolled_step(&mut net, &windows, persons, &labels, Mode::Train, false, false)?;

    let mut w = Worst::new();
    for k in 0..windows.len() {
        let (num, smooth) = fd_smooth(
            |v| {
                let mut ws = windows.clone();
                ws[k] = v.clone();
                unrolled_loss_with_pattern(&net, &ws, persons, &labels, Mode::Train)
            },
            &windows[k],
        )?;
        w.record_smooth(&format!("window[{k}]"), &dx[k], &num, &smooth);
    }

    let mut params = Vec::new();
    net.for_each_param(|name, p| {
        if p.trainable {
            params.push((name.to_string(), p.value.clone(), p.grad.clone()));
        }
    });
    for (name, value, grad) in params {
        let (num, smooth) = fd_smooth(
            |v| {
                let mut n = net.clone();
                set_param(&mut n, &name, v);
                unrolled_loss_with_pattern(&n, &windows, persons, &labels, Mode::Train)
            },
            &value,
        )?;
        w.record_smooth(&name, &grad, &num, &smooth);
    }
    Ok(w.report("unrolled_3_window", UNROLLED_TOLERANCE))
}

/// Runs every check once with inputs drawn from `seed`.
pub fn run_gradcheck(seed: u64) -> Result<Vec<GradcheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(vec![
        check_gcn(&mut rng)?,
        check_tcn(&mut rng)?,
        check_batchnorm(&mut rng)?,
        check_semantic(&mut rng)?,
        check_control(&mut rng)?,
        check_loss(&mut rng)?,
        check_unrolled(&mut rng, seed)?,
    ])
}
