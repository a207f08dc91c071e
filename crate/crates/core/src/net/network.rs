use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::block::{BlockCache, StGcnBlock};
use super::{init_uniform, visit_bn, visit_bn_mut, Slot, SlotRef};
use crate::error::{dim_err, Error, Result};
use crate::feedback::{
    ControlCache, ControlFeedbackBlock, FeedbackCompressor, SemanticAttentionBlock, SemanticCache, Variant, FB_DIM,
};
use crate::graph::{build_partitioned_adjacency, PartitionedAdjacency, SkeletonLayout};
use crate::numerics::{BatchNorm, BnCache, Mode, NormLayout, Parameter, Tensor};

/// One row of the channel plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

/// Architecture description; enough to rebuild a network from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub layout: SkeletonLayout,
    pub blocks: Vec<BlockSpec>,
    pub edge_importance: bool,
    pub seed: u64,
}

impl NetworkConfig {
    /// The standard 12-block plan: 64 x 4, 128 x 4, 256 x 4 with stride 2
    /// entering the second and third stage, on the COCO-18 graph.
    pub fn standard(num_classes: usize) -> Self {
        let plan = [
            (64, 1),
            (64, 1),
            (64, 1),
            (64, 1),
            (128, 2),
            (128, 1),
            (128, 1),
            (128, 1),
            (256, 2),
            (256, 1),
            (256, 1),
            (256, 1),
        ];
        Self::from_plan(2, num_classes, SkeletonLayout::coco18(), &plan)
    }

    /// Builds a config from `(out_channels, stride)` pairs.
    pub fn from_plan(in_channels: usize, num_classes: usize, layout: SkeletonLayout, plan: &[(usize, usize)]) -> Self {
        let mut cin = in_channels;
        let blocks = plan
            .iter()
            .map(|&(out_channels, stride)| {
                let spec = BlockSpec {
                    in_channels: cin,
                    out_channels,
                    stride,
                };
                cin = out_channels;
                spec
            })
            .collect();
        Self {
            in_channels,
            num_classes,
            layout,
            blocks,
            edge_importance: true,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        if self.in_channels == 0 || self.num_classes == 0 {
            return Err(Error::Config("in_channels and num_classes must be >= 1".into()));
        }
        if self.blocks.is_empty() {
            return Err(Error::Config("network needs at least one block".into()));
        }
        let mut cin = self.in_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.in_channels != cin {
                return Err(Error::Config(format!(
                    "block {i} expects {} input channels but receives {cin}",
                    b.in_channels
                )));
            }
            if b.out_channels == 0 || b.stride == 0 {
                return Err(Error::Config(format!("block {i} has zero channels or stride")));
            }
            cin = b.out_channels;
        }
        Ok(())
    }

    /// Shortest clip for which every strided block still sees a full
    /// stride: the product of the block strides.
    pub fn min_frames(&self) -> usize {
        self.blocks.iter().map(|b| b.stride).product()
    }

    pub fn feature_channels(&self) -> usize {
        self.blocks.last().map_or(self.in_channels, |b| b.out_channels)
    }

    /// Indices of blocks that close a channel stage (the next block
    /// changes width, or there is no next block).
    pub fn stage_ends(&self) -> Vec<usize> {
        (0..self.blocks.len())
            .filter(|&i| i + 1 == self.blocks.len() || self.blocks[i + 1].out_channels != self.blocks[i].out_channels)
            .collect()
    }

    /// Final temporal length for an input of `t` frames.
    pub fn output_frames(&self, t: usize) -> usize {
        self.blocks.iter().fold(t, |t, b| super::strided_len(t, b.stride))
    }
}

/// Network outputs for a batch of `B` samples with `M` persons each.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[B, K]`
    pub logits: Tensor,
    /// Pre-pooling final features, `[B * M, C_f, T_f, V]`.
    pub features: Tensor,
    /// Per-person pooled features, `[B * M, C_f]`.
    pub pooled: Tensor,
}

impl ForwardOutput {
    /// Pooled features of person slot 0 for each sample, `[B, C_f]`.
    pub fn first_person_pooled(&self, persons: usize) -> Tensor {
        let &[n, cf] = self.pooled.shape() else {
            unreachable!("pooled is rank 2")
        };
        let data = (0..n / persons)
            .flat_map(|b| {
                self.pooled.data()[b * persons * cf..(b * persons + 1) * cf]
                    .iter()
                    .copied()
            })
            .collect();
        Tensor::new(vec![n / persons, cf], data).expect("consistent pooled shape")
    }
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    shape: [usize; 4],
    persons: usize,
    data_bn: BnCache,
    semantic: Option<SemanticCache>,
    blocks: Vec<BlockCache>,
    control: Vec<Option<ControlCache>>,
    final_shape: [usize; 4],
    mean_pooled: Vec<f64>,
    used_feedback: bool,
}

impl ForwardCache {
    /// ReLU activity across every block.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.blocks.iter().flat_map(|b| b.relu_pattern()).collect()
    }
}

/// Gradients flowing out of one network backward pass.
#[derive(Debug, Clone)]
pub struct NetworkGrad {
    /// `[B * M, C, T, V]`
    pub dx: Tensor,
    /// `[B, 32]` when feedback blocks were active.
    pub dfb: Option<Tensor>,
}

/// The full stack: input norm, optional semantic feedback, blocks with
/// optional control feedback at stage ends, pooling and a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    adjacency: Arc<PartitionedAdjacency>,
    pub data_bn: BatchNorm,
    pub blocks: Vec<StGcnBlock>,
    /// `[C_f, K]`
    pub fc_weight: Parameter,
    pub fc_bias: Parameter,
    pub semantic: Option<SemanticAttentionBlock>,
    /// One slot per block; populated at stage ends once control feedback
    /// is attached.
    pub control: Vec<Option<ControlFeedbackBlock>>,
    pub compressor: Option<FeedbackCompressor>,
}

// Seed tags for the independent init streams of lazily attached parts.
const TAG_COMPRESSOR: u64 = 0xC0;
const TAG_SEMANTIC: u64 = 0x5F;
const TAG_CONTROL: u64 = 0xCF00;

fn tagged_rng(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let adjacency = Arc::new(build_partitioned_adjacency(&config.layout)?);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let v = config.layout.num_joints;
        let blocks = config
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                StGcnBlock::new(
                    b.in_channels,
                    b.out_channels,
                    b.stride,
                    i == 0,
                    adjacency.clone(),
                    config.edge_importance,
                    &mut rng,
                )
            })
            .collect::<Vec<_>>();
        let cf = config.feature_channels();
        let k = config.num_classes;
        Ok(Self {
            data_bn: BatchNorm::new(config.in_channels * v),
            control: vec![None; blocks.len()],
            blocks,
            fc_weight: Parameter::weight(init_uniform(&[cf, k], cf, &mut rng)),
            fc_bias: Parameter::weight(init_uniform(&[k], cf, &mut rng)),
            semantic: None,
            compressor: None,
            adjacency,
            config,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn adjacency(&self) -> &PartitionedAdjacency {
        &self.adjacency
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn num_joints(&self) -> usize {
        self.config.layout.num_joints
    }

    pub fn min_frames(&self) -> usize {
        self.config.min_frames()
    }

    /// Feedback blocks currently attached.
    pub fn variant(&self) -> Variant {
        Variant::from_flags(self.semantic.is_some(), self.control.iter().any(Option::is_some))
    }

    /// Attaches the feedback blocks of `variant` with zero gates. Growing
    /// `Semantic` onto a `Control` network (or vice versa) is allowed;
    /// attaching a block that is already present is not.
    pub fn grow(&mut self, variant: Variant) -> Result<()> {
        let have = self.variant();
        if (variant.semantic() && have.semantic()) || (variant.control() && have.control()) {
            return Err(Error::State(format!(
                "cannot attach {variant}: network already carries {have}"
            )));
        }
        if variant.uses_feedback() && self.compressor.is_none() {
            let mut rng = tagged_rng(self.config.seed, TAG_COMPRESSOR);
            self.compressor = Some(FeedbackCompressor::new(self.config.feature_channels(), &mut rng));
        }
        if variant.semantic() {
            let mut rng = tagged_rng(self.config.seed, TAG_SEMANTIC);
            self.semantic = Some(SemanticAttentionBlock::new(self.config.in_channels, &mut rng));
        }
        if variant.control() {
            for i in self.config.stage_ends() {
                let mut rng = tagged_rng(self.config.seed, TAG_CONTROL + i as u64);
                self.control[i] = Some(ControlFeedbackBlock::new(self.config.blocks[i].out_channels, &mut rng));
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor, persons: usize) -> Result<[usize; 4]> {
        let &[n, c, t, v] = x.shape() else {
            return Err(dim_err!("network input must be [N, C, T, V], got {:?}", x.shape()));
        };
        if c != self.config.in_channels {
            return Err(dim_err!(
                "network expects {} channels, got {c}",
                self.config.in_channels
            ));
        }
        if v != self.num_joints() {
            return Err(dim_err!("network expects {} joints, got {v}", self.num_joints()));
        }
        let min = self.min_frames();
        if t < min {
            return Err(dim_err!("clip has {t} frames; this network needs at least {min}"));
        }
        if persons == 0 || n == 0 || n % persons != 0 {
            return Err(dim_err!("{n} person slices do not form groups of {persons}"));
        }
        Ok([n, c, t, v])
    }

    /// Batched forward.
    ///
    /// `x` is `[B * M, C, T, V]` with the `M` persons of a sample adjacent.
    /// `fb` is `[B, 32]`; when `None` every feedback block is bypassed, as
    /// for the first window of a stream.
    pub fn forward(
        &self,
        x: &Tensor,
        persons: usize,
        fb: Option<&Tensor>,
        mode: Mode,
    ) -> Result<(ForwardOutput, ForwardCache)> {
        let [n, c, t, v] = self.check_input(x, persons)?;
        let b = n / persons;
        if let Some(fb) = fb {
            if fb.shape() != [b, FB_DIM] {
                return Err(dim_err!("feedback must be [{b}, {FB_DIM}], got {:?}", fb.shape()));
            }
        }

        // input norm over the C*V axis: [N, C, T, V] -> [N, C, V, T]
        let xt = swap_last(x.data(), n * c, t, v);
        let layout = NormLayout {
            outer: n,
            channels: c * v,
            inner: t,
        };
        let (normed, data_bn) = self.data_bn.forward(&xt, layout, mode)?;
        let mut h = Tensor::new(vec![n, c, t, v], swap_last(&normed, n * c, v, t))?;

        let semantic = match (&self.semantic, fb) {
            (Some(sa), Some(fb)) => {
                let (y, cache) = sa.forward(&h, persons, fb, mode)?;
                h = y;
                Some(cache)
            }
            _ => None,
        };

        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut control = Vec::with_capacity(self.blocks.len());
        for (block, cf) in self.blocks.iter().zip(&self.control) {
            let (y, cache) = block.forward(&h, mode)?;
            h = y;
            blocks.push(cache);
            control.push(match (cf, fb) {
                (Some(cf), Some(fb)) => {
                    let (y, cache) = cf.forward(&h, persons, fb)?;
                    h = y;
                    Some(cache)
                }
                _ => None,
            });
        }

        let &[_, cf, tf, _] = h.shape() else { unreachable!() };
        let slab = tf * v;
        let pooled: Vec<f64> = h
            .data()
            .chunks_exact(slab)
            .map(|s| s.iter().sum::<f64>() / slab as f64)
            .collect();
        let mut mean_pooled = vec![0.0; b * cf];
        for (i, row) in pooled.chunks_exact(cf).enumerate() {
            let dst = &mut mean_pooled[(i / persons) * cf..(i / persons + 1) * cf];
            for (d, p) in dst.iter_mut().zip(row) {
                *d += p / persons as f64;
            }
        }
        let k = self.num_classes();
        let w = self.fc_weight.value.data();
        let mut logits = Vec::with_capacity(b * k);
        for s in 0..b {
            let f = &mean_pooled[s * cf..(s + 1) * cf];
            for j in 0..k {
                let mut acc = self.fc_bias.value.data()[j];
                for (ci, fv) in f.iter().enumerate() {
                    acc += fv * w[ci * k + j];
                }
                logits.push(acc);
            }
        }
        let used_feedback = fb.is_some() && (semantic.is_some() || control.iter().any(Option::is_some));
        Ok((
            ForwardOutput {
                logits: Tensor::new(vec![b, k], logits)?,
                pooled: Tensor::new(vec![n, cf], pooled)?,
                features: h,
            },
            ForwardCache {
                shape: [n, c, t, v],
                persons,
                data_bn,
                semantic,
                blocks,
                control,
                final_shape: [n, cf, tf, v],
                mean_pooled,
                used_feedback,
            },
        ))
    }

    /// Backward through one forward pass.
    ///
    /// `dlogits` is `[B, K]`. `dpooled_first`, when given, is an extra
    /// gradient on the person-0 pooled features `[B, C_f]` (the path into
    /// the next window's feedback vector).
    pub fn backward(
        &mut self,
        cache: &ForwardCache,
        dlogits: &Tensor,
        dpooled_first: Option<&Tensor>,
    ) -> Result<NetworkGrad> {
        let [n, c, t, v] = cache.shape;
        let [_, cf, tf, _] = cache.final_shape;
        let persons = cache.persons;
        let b = n / persons;
        let k = self.num_classes();
        if dlogits.shape() != [b, k] {
            return Err(dim_err!("dlogits must be [{b}, {k}], got {:?}", dlogits.shape()));
        }
        if let Some(d) = dpooled_first {
            if d.shape() != [b, cf] {
                return Err(dim_err!("pooled gradient must be [{b}, {cf}], got {:?}", d.shape()));
            }
        }

        let dl = dlogits.data();
        let mut dw = vec![0.0; cf * k];
        let mut dbias = vec![0.0; k];
        let mut dmean = vec![0.0; b * cf];
        let w = self.fc_weight.value.data();
        for s in 0..b {
            let f = &cache.mean_pooled[s * cf..(s + 1) * cf];
            let g = &dl[s * k..(s + 1) * k];
            for (j, gj) in g.iter().enumerate() {
                dbias[j] += gj;
            }
            for ci in 0..cf {
                let mut acc = 0.0;
                for j in 0..k {
                    dw[ci * k + j] += f[ci] * g[j];
                    acc += w[ci * k + j] * g[j];
                }
                dmean[s * cf + ci] = acc;
            }
        }
        self.fc_weight.accumulate(&dw);
        self.fc_bias.accumulate(&dbias);

        let slab = tf * v;
        let mut dh = vec![0.0; n * cf * slab];
        for i in 0..n {
            let s = i / persons;
            for ci in 0..cf {
                let mut g = dmean[s * cf + ci] / persons as f64;
                if let (Some(d), 0) = (dpooled_first, i % persons) {
                    g += d.data()[s * cf + ci];
                }
                let g = g / slab as f64;
                dh[(i * cf + ci) * slab..(i * cf + ci + 1) * slab]
                    .iter_mut()
                    .for_each(|e| *e = g);
            }
        }
        let mut dh = Tensor::new(vec![n, cf, tf, v], dh)?;

        let mut dfb = cache.used_feedback.then(|| Tensor::zeros(&[b, FB_DIM]));
        for i in (0..self.blocks.len()).rev() {
            if let (Some(cfb), Some(cc)) = (&mut self.control[i], &cache.control[i]) {
                let (dx, df) = cfb.backward(cc, &dh)?;
                dh = dx;
                dfb.as_mut().expect("feedback active").add_assign(&df)?;
            }
            dh = self.blocks[i].backward(&cache.blocks[i], &dh)?;
        }
        if let (Some(sa), Some(sc)) = (&mut self.semantic, &cache.semantic) {
            let (dx, df) = sa.backward(sc, &dh)?;
            dh = dx;
            dfb.as_mut().expect("feedback active").add_assign(&df)?;
        }

        let dt = swap_last(dh.data(), n * c, t, v);
        let dn = self.data_bn.backward(&dt, &cache.data_bn);
        Ok(NetworkGrad {
            dx: Tensor::new(vec![n, c, t, v], swap_last(&dn, n * c, v, t))?,
            dfb,
        })
    }

    /// Folds the batch statistics of a training forward into the running
    /// statistics.
    pub fn commit_running_stats(&mut self, cache: &ForwardCache) {
        self.data_bn.commit(&cache.data_bn);
        if let (Some(sa), Some(sc)) = (&mut self.semantic, &cache.semantic) {
            sa.commit(sc);
        }
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks) {
            block.commit(bc);
        }
    }

    /// Visits every named parameter and buffer in a stable order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, SlotRef<'_>)) {
        visit_bn(&self.data_bn, "data_bn", f);
        if let Some(sa) = &self.semantic {
            sa.visit("semantic", f);
        }
        for (i, (block, cf)) in self.blocks.iter().zip(&self.control).enumerate() {
            block.visit(&format!("blocks.{i}"), f);
            if let Some(cf) = cf {
                cf.visit(&format!("control.{i}"), f);
            }
        }
        f("fc.weight", SlotRef::Param(&self.fc_weight));
        f("fc.bias", SlotRef::Param(&self.fc_bias));
        if let Some(c) = &self.compressor {
            f("compressor.weight", SlotRef::Param(&c.weight));
            f("compressor.bias", SlotRef::Param(&c.bias));
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, Slot<'_>)) {
        visit_bn_mut(&mut self.data_bn, "data_bn", f);
        if let Some(sa) = &mut self.semantic {
            sa.visit_mut("semantic", f);
        }
        for (i, (block, cf)) in self.blocks.iter_mut().zip(&mut self.control).enumerate() {
            block.visit_mut(&format!("blocks.{i}"), f);
            if let Some(cf) = cf {
                cf.visit_mut(&format!("control.{i}"), f);
            }
        }
        f("fc.weight", Slot::Param(&mut self.fc_weight));
        f("fc.bias", Slot::Param(&mut self.fc_bias));
        if let Some(c) = &mut self.compressor {
            f("compressor.weight", Slot::Param(&mut c.weight));
            f("compressor.bias", Slot::Param(&mut c.bias));
        }
    }

    /// Calls `f` on every parameter.
    pub fn for_each_param(&mut self, mut f: impl FnMut(&str, &mut Parameter)) {
        self.visit_mut(&mut |name, slot| {
            if let Slot::Param(p) = slot {
                f(name, p)
            }
        });
    }

    pub fn zero_grad(&mut self) {
        self.for_each_param(|_, p| p.zero_grad());
    }

    /// Trainable scalar count grouped by top-level layer
    /// (`data_bn`, `blocks.3`, `control.7`, `fc`, ...).
    pub fn parameter_breakdown(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        self.visit(&mut |name, slot| {
            if let SlotRef::Param(p) = slot {
                if p.trainable {
                    *out.entry(layer_key(name)).or_insert(0) += p.len();
                }
            }
        });
        out
    }
}

fn layer_key(name: &str) -> String {
    let mut parts = name.split('.');
    let head = parts.next().unwrap_or_default();
    match head {
        "blocks" | "control" => format!("{head}.{}", parts.next().unwrap_or_default()),
        _ => head.to_string(),
    }
}

/// Swaps the two innermost axes of `outer` row-major `[a, b]` matrices.
fn swap_last(x: &[f64], outer: usize, a: usize, b: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        let src = &x[o * a * b..(o + 1) * a * b];
        let dst = &mut out[o * a * b..(o + 1) * a * b];
        for i in 0..a {
            for j in 0..b {
                dst[j * a + i] = src[i * b + j];
            }
        }
    }
    out
}

/// Exact number of trainable scalars.
pub fn count_parameters(net: &Network) -> usize {
    net.parameter_breakdown().values().sum()
}

/// Single-clip inference without feedback: `clip` is `[M, C, T, V]`.
/// Returns the logits `[K]` and person 0's final features `[C_f, T_f, V]`.
pub fn network_forward(net: &Network, clip: &Tensor) -> Result<(Tensor, Tensor)> {
    let m = clip.shape().first().copied().unwrap_or(0);
    let (out, _) = net.forward(clip, m.max(1), None, Mode::Eval)?;
    let k = net.num_classes();
    let feats = out.features.slice_outer(0)?;
    Ok((out.logits.reshape(&[k])?, feats))
}
