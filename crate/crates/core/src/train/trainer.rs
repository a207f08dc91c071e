use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::cross_entropy_batch;
use super::optim::{nesterov_step, schedule_lr, Nesterov, OptimizerConfig};
use super::toy::ToyDataset;
use crate::engine::ClipTensor;
use crate::error::{dim_err, Error, Result};
use crate::feedback::{Variant, FB_DIM};
use crate::net::{ForwardCache, Network};
use crate::noise::{dynamic_batch, repeat_pad, LambdaPolicy};
use crate::numerics::{Mode, Tensor};

/// Attach feedback blocks at the start of `attach_epoch`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowPlan {
    pub attach_epoch: usize,
    pub variant: Variant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub window_len: usize,
    /// Person slots after batching.
    pub lambda: usize,
    /// Stop gradients at the feedback vector between windows. The
    /// compressor is still trained through the next window's blocks.
    pub detach_feedback: bool,
    pub grow: Option<GrowPlan>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            window_len: 8,
            lambda: 1,
            detach_feedback: false,
            grow: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.window_len == 0 || self.lambda == 0 {
            return Err(Error::Config(
                "batch size, window length and lambda must be >= 1".into(),
            ));
        }
        if let Some(g) = &self.grow {
            if g.attach_epoch == 0 {
                return Err(Error::Config("grow epoch must be >= 1".into()));
            }
            if !g.variant.uses_feedback() {
                return Err(Error::Config("grow plan needs a feedback variant".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Eval-mode accuracy on the whole training set after the epoch.
    pub acc: f64,
}

/// Loss on the first batch of the attach epoch, just before and just
/// after attaching.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowEvent {
    pub epoch: usize,
    pub loss_before: f64,
    pub loss_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub grow: Option<GrowEvent>,
}

/// Batches clips (repeat-padding to a whole number of windows) and cuts
/// the batch into windows of `[B * lambda, C, W, V]`.
pub fn window_batch(clips: &[&ClipTensor], lambda: usize, window_len: usize) -> Result<(Vec<Tensor>, usize)> {
    if window_len == 0 {
        return Err(Error::Config("window length must be >= 1".into()));
    }
    let t_max = clips.iter().map(|c| c.frames()).max().unwrap_or(0);
    let target = t_max.div_ceil(window_len) * window_len;
    let padded = clips
        .iter()
        .map(|c| repeat_pad(c, target))
        .collect::<Result<Vec<_>>>()?;
    let batch = dynamic_batch(&padded, &LambdaPolicy::new(lambda)?)?;
    let x = batch.to_network_input();
    let &[n, c, t, v] = x.shape() else { unreachable!() };
    let windows = (0..t / window_len)
        .map(|k| {
            let mut out = Vec::with_capacity(n * c * window_len * v);
            for row in x.data().chunks_exact(t * v) {
                out.extend_from_slice(&row[k * window_len * v..(k + 1) * window_len * v]);
            }
            Tensor::new(vec![n, c, window_len, v], out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((windows, batch.persons()))
}

struct Unrolled {
    caches: Vec<ForwardCache>,
    /// Person-0 pooled features per window, `[B, C_f]`.
    pooled: Vec<Tensor>,
    consensus: Tensor,
}

fn compress_batch(net: &Network, pooled: &Tensor) -> Result<Tensor> {
    let c = net
        .compressor
        .as_ref()
        .ok_or_else(|| Error::State("feedback network has no compressor".into()))?;
    let &[b, cf] = pooled.shape() else { unreachable!() };
    let data = (0..b)
        .flat_map(|s| c.project(&pooled.data()[s * cf..(s + 1) * cf]))
        .collect();
    Tensor::new(vec![b, FB_DIM], data)
}

fn unrolled_forward(net: &Network, windows: &[Tensor], persons: usize, mode: Mode) -> Result<Unrolled> {
    if windows.is_empty() {
        return Err(dim_err!("no windows to process"));
    }
    let uses_fb = net.variant().uses_feedback();
    let mut fb: Option<Tensor> = None;
    let mut caches = Vec::with_capacity(windows.len());
    let mut pooled = Vec::new();
    let mut sum: Option<Tensor> = None;
    for w in windows {
        let (out, cache) = net.forward(w, persons, fb.as_ref(), mode)?;
        if uses_fb {
            let p = out.first_person_pooled(persons);
            fb = Some(compress_batch(net, &p)?);
            pooled.push(p);
        }
        match &mut sum {
            Some(s) => s.add_assign(&out.logits)?,
            None => sum = Some(out.logits),
        }
        caches.push(cache);
    }
    let consensus = sum.expect("non-empty").scale(1.0 / windows.len() as f64);
    Ok(Unrolled {
        caches,
        pooled,
        consensus,
    })
}

/// Cross-entropy of the consensus logits after running every window in
/// order with feedback threaded through (forward only).
pub fn unrolled_loss(net: &Network, windows: &[Tensor], persons: usize, labels: &[usize], mode: Mode) -> Result<f64> {
    let u = unrolled_forward(net, windows, persons, mode)?;
    Ok(cross_entropy_batch(&u.consensus, labels)?.0)
}

/// [`unrolled_loss`] plus the ReLU activity of every window, so a
/// finite-difference probe can tell when it straddles a kink.
pub(crate) fn unrolled_loss_with_pattern(
    net: &Network,
    windows: &[Tensor],
    persons: usize,
    labels: &[usize],
    mode: Mode,
) -> Result<(f64, Vec<bool>)> {
    let u = unrolled_forward(net, windows, persons, mode)?;
    let pattern = u.caches.iter().flat_map(|c| c.relu_pattern()).collect();
    Ok((cross_entropy_batch(&u.consensus, labels)?.0, pattern))
}

/// Forward and full backward through the window sequence. Parameter
/// gradients accumulate into `net`; returns the loss, the consensus logits
/// and the gradient of each window input. With `commit` the batch
/// statistics are folded into the running statistics afterwards.
pub fn unrolled_step(
    net: &mut Network,
    windows: &[Tensor],
    persons: usize,
    labels: &[usize],
    mode: Mode,
    detach_feedback: bool,
    commit: bool,
) -> Result<(f64, Tensor, Vec<Tensor>)> {
    let u = unrolled_forward(net, windows, persons, mode)?;
    let (loss, dcons) = cross_entropy_batch(&u.consensus, labels)?;
    let dlogits = dcons.scale(1.0 / windows.len() as f64);
    let mut dx = vec![Tensor::zeros(&[0]); windows.len()];
    let mut dfb_next: Option<Tensor> = None;
    for k in (0..windows.len()).rev() {
        let dpooled = match dfb_next.take() {
            Some(dfb) => {
                let comp = net.compressor.as_mut().expect("feedback implies compressor");
                let p = &u.pooled[k];
                let &[b, cf] = p.shape() else { unreachable!() };
                let mut d = Vec::with_capacity(b * cf);
                for s in 0..b {
                    d.extend(comp.backward(
                        &p.data()[s * cf..(s + 1) * cf],
                        &dfb.data()[s * FB_DIM..(s + 1) * FB_DIM],
                    ));
                }
                (!detach_feedback).then(|| Tensor::new(vec![b, cf], d)).transpose()?
            }
            None => None,
        };
        let g = net.backward(&u.caches[k], &dlogits, dpooled.as_ref())?;
        dfb_next = g.dfb;
        dx[k] = g.dx;
    }
    if commit {
        for c in &u.caches {
            net.commit_running_stats(c);
        }
    }
    Ok((loss, u.consensus, dx))
}

/// Eval-mode mean loss and accuracy over a dataset.
pub fn evaluate(net: &Network, data: &ToyDataset, window_len: usize, lambda: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(16) {
        let clips: Vec<&ClipTensor> = chunk.iter().map(|&i| &data.clips[i]).collect();
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let (windows, persons) = window_batch(&clips, lambda, window_len)?;
        let u = unrolled_forward(net, &windows, persons, Mode::Eval)?;
        loss += cross_entropy_batch(&u.consensus, &labels)?.0 * chunk.len() as f64;
        let k = net.num_classes();
        for (s, &l) in labels.iter().enumerate() {
            let row = Tensor::from_vec(u.consensus.data()[s * k..(s + 1) * k].to_vec());
            correct += usize::from(row.argmax() == l);
        }
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Windowed training with unrolled backpropagation through feedback.
pub fn train(net: &mut Network, data: &ToyDataset, opt: &OptimizerConfig, config: &TrainConfig) -> Result<TrainReport> {
    opt.validate()?;
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    for &l in &data.labels {
        if l >= net.num_classes() {
            return Err(Error::Data(format!(
                "label {l} exceeds the network's {} classes",
                net.num_classes()
            )));
        }
    }
    let mut state = Nesterov::new();
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut grow = None;
    let mut step = 0;
    for epoch in 0..config.epochs {
        let lr = schedule_lr(epoch, opt);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(
            config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9),
        ));

        let batch_of = |idx: &[usize]| -> Result<(Vec<Tensor>, usize, Vec<usize>)> {
            let clips: Vec<&ClipTensor> = idx.iter().map(|&i| &data.clips[i]).collect();
            let (w, p) = window_batch(&clips, config.lambda, config.window_len)?;
            Ok((w, p, idx.iter().map(|&i| data.labels[i]).collect()))
        };

        if let Some(plan) = config.grow.filter(|g| g.attach_epoch == epoch) {
            let first = &order[..config.batch_size.min(order.len())];
            let (w, p, labels) = batch_of(first)?;
            let loss_before = unrolled_loss(net, &w, p, &labels, Mode::Train)?;
            net.grow(plan.variant)?;
            let loss_after = unrolled_loss(net, &w, p, &labels, Mode::Train)?;
            grow = Some(GrowEvent {
                epoch,
                loss_before,
                loss_after,
            });
        }

        let mut total = 0.0;
        for idx in order.chunks(config.batch_size) {
            let (w, p, labels) = batch_of(idx)?;
            net.zero_grad();
            let (loss, _, _) = unrolled_step(net, &w, p, &labels, Mode::Train, config.detach_feedback, true)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, step, loss });
            }
            nesterov_step(net, &mut state, lr, opt);
            total += loss * idx.len() as f64;
            step += 1;
        }
        let (_, acc) = evaluate(net, data, config.window_len, config.lambda)?;
        metrics.push(EpochMetrics {
            epoch,
            lr,
            loss: total / data.len() as f64,
            acc,
        });
    }
    Ok(TrainReport { metrics, grow })
}
