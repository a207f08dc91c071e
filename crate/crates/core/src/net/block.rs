use std::sync::Arc;

use rand::Rng;

use super::gcn::{GcnCache, GcnLayer};
use super::{init_uniform, Slot, SlotRef};
use crate::error::{dim_err, Result};
use crate::graph::PartitionedAdjacency;
use crate::numerics::{
    conv_backward_into, conv_forward_into, relu_backward_inplace, relu_inplace, BatchNorm, BnCache, ConvGeometry, Mode,
    NormLayout, Parameter, Tensor,
};

/// Temporal kernel extent.
pub const TEMPORAL_KERNEL: usize = 9;
const TEMPORAL_PAD: usize = (TEMPORAL_KERNEL - 1) / 2;

/// Output length of a padded 9-tap temporal convolution.
pub fn strided_len(t: usize, stride: usize) -> usize {
    (t - 1) / stride + 1
}

/// Strided `9 x 1` convolution along the frame axis, then batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct TcnLayer {
    /// `[C, C, 9, 1]`
    pub weight: Parameter,
    pub bias: Parameter,
    pub stride: usize,
    pub bn: BatchNorm,
}

impl TcnLayer {
    pub fn new<R: Rng + ?Sized>(channels: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = channels * TEMPORAL_KERNEL;
        Self {
            weight: Parameter::weight(init_uniform(&[channels, channels, TEMPORAL_KERNEL, 1], fan_in, rng)),
            bias: Parameter::weight(init_uniform(&[channels], fan_in, rng)),
            stride,
            bn: BatchNorm::new(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.bias.len()
    }

    fn geometry(&self, t: usize, v: usize) -> ConvGeometry {
        let c = self.channels();
        ConvGeometry {
            in_channels: c,
            height: t,
            width: v,
            out_channels: c,
            kernel: (TEMPORAL_KERNEL, 1),
            stride: (self.stride, 1),
            padding: (TEMPORAL_PAD, 0),
        }
    }
}

/// 1x1 strided projection with bias and batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `[C_out, C_in, 1, 1]`
    pub weight: Parameter,
    pub bias: Parameter,
    pub bn: BatchNorm,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Residual {
    None,
    Identity,
    Projection(Box<Projection>),
}

impl Residual {
    /// No residual on the first block, identity when shapes line up,
    /// projection otherwise.
    pub fn for_block<R: Rng + ?Sized>(first: bool, cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        if first {
            Residual::None
        } else if cin == cout && stride == 1 {
            Residual::Identity
        } else {
            Residual::Projection(Box::new(Projection {
                weight: Parameter::weight(init_uniform(&[cout, cin, 1, 1], cin, rng)),
                bias: Parameter::weight(init_uniform(&[cout], cin, rng)),
                bn: BatchNorm::new(cout),
                stride,
            }))
        }
    }
}

/// GCN -> BN -> ReLU -> TCN (conv + BN) -> + residual -> ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct StGcnBlock {
    pub gcn: GcnLayer,
    pub bn: BatchNorm,
    pub tcn: TcnLayer,
    pub residual: Residual,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    gcn: GcnCache,
    bn: BnCache,
    /// Post-ReLU TCN input.
    hidden: Tensor,
    tcn_bn: BnCache,
    residual: Option<(Tensor, BnCache)>,
    output: Tensor,
}

impl BlockCache {
    /// Which ReLU outputs are active, in a fixed order.
    pub fn relu_pattern(&self) -> impl Iterator<Item = bool> + '_ {
        self.hidden.data().iter().chain(self.output.data()).map(|&v| v > 0.0)
    }
}

impl StGcnBlock {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        first: bool,
        adjacency: Arc<PartitionedAdjacency>,
        edge_importance: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            gcn: GcnLayer::new(in_channels, out_channels, adjacency, edge_importance, rng),
            bn: BatchNorm::new(out_channels),
            tcn: TcnLayer::new(out_channels, stride, rng),
            residual: Residual::for_block(first, in_channels, out_channels, stride, rng),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.gcn.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.gcn.out_channels()
    }

    pub fn stride(&self) -> usize {
        self.tcn.stride
    }

    /// `x: [N, C_in, T, V]` to `[N, C_out, T', V]`.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, BlockCache)> {
        let &[n, cin, t, v] = x.shape() else {
            return Err(dim_err!("block input must be [N, C, T, V], got {:?}", x.shape()));
        };
        if t == 0 {
            return Err(dim_err!("block input has no frames"));
        }
        let cout = self.out_channels();
        let (g, gcn_cache) = self.gcn.forward(x)?;
        let layout = NormLayout {
            outer: n,
            channels: cout,
            inner: t * v,
        };
        let (mut hidden, bn_cache) = self.bn.forward(g.data(), layout, mode)?;
        relu_inplace(&mut hidden);

        let geo = self.tcn.geometry(t, v);
        let t_out = geo.out_height();
        let out_len = cout * t_out * v;
        let mut conv = vec![0.0; n * out_len];
        for i in 0..n {
            let o = &mut conv[i * out_len..(i + 1) * out_len];
            for (row, &b) in o.chunks_exact_mut(t_out * v).zip(self.tcn.bias.value.data()) {
                row.iter_mut().for_each(|e| *e = b);
            }
            conv_forward_into(
                &geo,
                &hidden[i * cout * t * v..(i + 1) * cout * t * v],
                self.tcn.weight.value.data(),
                o,
            );
        }
        let out_layout = NormLayout {
            outer: n,
            channels: cout,
            inner: t_out * v,
        };
        let (mut out, tcn_bn) = self.tcn.bn.forward(&conv, out_layout, mode)?;

        let residual = match &self.residual {
            Residual::None => None,
            Residual::Identity => {
                for (o, r) in out.iter_mut().zip(x.data()) {
                    *o += r;
                }
                None
            }
            Residual::Projection(proj) => {
                let pg = ConvGeometry {
                    in_channels: cin,
                    height: t,
                    width: v,
                    out_channels: cout,
                    kernel: (1, 1),
                    stride: (proj.stride, 1),
                    padding: (0, 0),
                };
                debug_assert_eq!(pg.out_height(), t_out);
                let mut p = vec![0.0; n * out_len];
                for i in 0..n {
                    let o = &mut p[i * out_len..(i + 1) * out_len];
                    for (row, &b) in o.chunks_exact_mut(t_out * v).zip(proj.bias.value.data()) {
                        row.iter_mut().for_each(|e| *e = b);
                    }
                    conv_forward_into(
                        &pg,
                        &x.data()[i * cin * t * v..(i + 1) * cin * t * v],
                        proj.weight.value.data(),
                        o,
                    );
                }
                let (r, rc) = proj.bn.forward(&p, out_layout, mode)?;
                for (o, rv) in out.iter_mut().zip(&r) {
                    *o += rv;
                }
                Some((x.clone(), rc))
            }
        };
        relu_inplace(&mut out);
        let out = Tensor::new(vec![n, cout, t_out, v], out)?;
        Ok((
            out.clone(),
            BlockCache {
                gcn: gcn_cache,
                bn: bn_cache,
                hidden: Tensor::new(vec![n, cout, t, v], hidden)?,
                tcn_bn,
                residual,
                output: out,
            },
        ))
    }

    pub fn backward(&mut self, cache: &BlockCache, grad_out: &Tensor) -> Result<Tensor> {
        if grad_out.shape() != cache.output.shape() {
            return Err(dim_err!("block grad_out shape {:?} mismatched", grad_out.shape()));
        }
        let &[n, cout, t, v] = cache.hidden.shape() else {
            unreachable!("cached hidden is rank 4")
        };
        let t_out = cache.output.shape()[2];
        let mut ds = grad_out.data().to_vec();
        relu_backward_inplace(&mut ds, cache.output.data());

        let dconv = self.tcn.bn.backward(&ds, &cache.tcn_bn);
        let geo = self.tcn.geometry(t, v);
        let out_len = cout * t_out * v;
        let in_len = cout * t * v;
        let mut dhidden = vec![0.0; n * in_len];
        let mut dw = vec![0.0; self.tcn.weight.len()];
        let mut db = vec![0.0; cout];
        for i in 0..n {
            let go = &dconv[i * out_len..(i + 1) * out_len];
            for (acc, row) in db.iter_mut().zip(go.chunks_exact(t_out * v)) {
                *acc += row.iter().sum::<f64>();
            }
            conv_backward_into(
                &geo,
                &cache.hidden.data()[i * in_len..(i + 1) * in_len],
                self.tcn.weight.value.data(),
                go,
                &mut dhidden[i * in_len..(i + 1) * in_len],
                &mut dw,
            );
        }
        self.tcn.weight.accumulate(&dw);
        self.tcn.bias.accumulate(&db);

        relu_backward_inplace(&mut dhidden, cache.hidden.data());
        let dg = self.bn.backward(&dhidden, &cache.bn);
        let dg = Tensor::new(vec![n, cout, t, v], dg)?;
        let mut dx = self.gcn.backward(&cache.gcn, &dg)?;

        match (&mut self.residual, &cache.residual) {
            (Residual::None, _) => {}
            (Residual::Identity, _) => {
                for (d, s) in dx.data_mut().iter_mut().zip(&ds) {
                    *d += s;
                }
            }
            (Residual::Projection(proj), Some((x, rc))) => {
                let cin = x.shape()[1];
                let dp = proj.bn.backward(&ds, rc);
                let pg = ConvGeometry {
                    in_channels: cin,
                    height: t,
                    width: v,
                    out_channels: cout,
                    kernel: (1, 1),
                    stride: (proj.stride, 1),
                    padding: (0, 0),
                };
                let xin = cin * t * v;
                let mut dw = vec![0.0; proj.weight.len()];
                let mut db = vec![0.0; cout];
                for i in 0..n {
                    let go = &dp[i * out_len..(i + 1) * out_len];
                    for (acc, row) in db.iter_mut().zip(go.chunks_exact(t_out * v)) {
                        *acc += row.iter().sum::<f64>();
                    }
                    conv_backward_into(
                        &pg,
                        &x.data()[i * xin..(i + 1) * xin],
                        proj.weight.value.data(),
                        go,
                        &mut dx.data_mut()[i * xin..(i + 1) * xin],
                        &mut dw,
                    );
                }
                proj.weight.accumulate(&dw);
                proj.bias.accumulate(&db);
            }
            (Residual::Projection(_), None) => unreachable!("projection cache missing"),
        }
        Ok(dx)
    }

    pub fn commit(&mut self, cache: &BlockCache) {
        self.bn.commit(&cache.bn);
        self.tcn.bn.commit(&cache.tcn_bn);
        if let (Residual::Projection(p), Some((_, rc))) = (&mut self.residual, &cache.residual) {
            p.bn.commit(rc);
        }
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotRef<'_>)) {
        self.gcn.visit(&format!("{prefix}.gcn"), f);
        visit_bn(&self.bn, &format!("{prefix}.bn"), f);
        f(&format!("{prefix}.tcn.weight"), SlotRef::Param(&self.tcn.weight));
        f(&format!("{prefix}.tcn.bias"), SlotRef::Param(&self.tcn.bias));
        visit_bn(&self.tcn.bn, &format!("{prefix}.tcn.bn"), f);
        if let Residual::Projection(p) = &self.residual {
            f(&format!("{prefix}.residual.weight"), SlotRef::Param(&p.weight));
            f(&format!("{prefix}.residual.bias"), SlotRef::Param(&p.bias));
            visit_bn(&p.bn, &format!("{prefix}.residual.bn"), f);
        }
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.gcn.visit_mut(&format!("{prefix}.gcn"), f);
        visit_bn_mut(&mut self.bn, &format!("{prefix}.bn"), f);
        f(&format!("{prefix}.tcn.weight"), Slot::Param(&mut self.tcn.weight));
        f(&format!("{prefix}.tcn.bias"), Slot::Param(&mut self.tcn.bias));
        visit_bn_mut(&mut self.tcn.bn, &format!("{prefix}.tcn.bn"), f);
        if let Residual::Projection(p) = &mut self.residual {
            f(&format!("{prefix}.residual.weight"), Slot::Param(&mut p.weight));
            f(&format!("{prefix}.residual.bias"), Slot::Param(&mut p.bias));
            visit_bn_mut(&mut p.bn, &format!("{prefix}.residual.bn"), f);
        }
    }
}

pub(crate) fn visit_bn(bn: &BatchNorm, prefix: &str, f: &mut dyn FnMut(&str, SlotRef<'_>)) {
    f(&format!("{prefix}.gamma"), SlotRef::Param(&bn.gamma));
    f(&format!("{prefix}.beta"), SlotRef::Param(&bn.beta));
    f(&format!("{prefix}.running_mean"), SlotRef::Buffer(&bn.stats.mean));
    f(&format!("{prefix}.running_var"), SlotRef::Buffer(&bn.stats.var));
}

pub(crate) fn visit_bn_mut(bn: &mut BatchNorm, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
    f(&format!("{prefix}.gamma"), Slot::Param(&mut bn.gamma));
    f(&format!("{prefix}.beta"), Slot::Param(&mut bn.beta));
    f(&format!("{prefix}.running_mean"), Slot::Buffer(&mut bn.stats.mean));
    f(&format!("{prefix}.running_var"), Slot::Buffer(&mut bn.stats.var));
}
