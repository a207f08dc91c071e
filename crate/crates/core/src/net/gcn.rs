//! Spatial graph convolution `Y = sum_p (X W_p) A_p`.

use std::sync::Arc;

use rand::Rng;

use super::{init_uniform, Slot, SlotRef};
use crate::error::{dim_err, Result};
use crate::graph::PartitionedAdjacency;
use crate::numerics::{conv_backward_into, conv_forward_into, ConvGeometry, Parameter, Tensor};

/// One pointwise projection per adjacency partition, followed by
/// aggregation over the joint axis.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnLayer {
    /// `[P * C_out, C_in, 1, 1]`; rows `p*C_out..(p+1)*C_out` belong to
    /// partition `p`.
    pub weight: Parameter,
    /// `[P * C_out]`
    pub bias: Parameter,
    /// Optional `[P, V, V]` multiplicative mask on the adjacency.
    pub edge_importance: Option<Parameter>,
    adjacency: Arc<PartitionedAdjacency>,
    in_channels: usize,
    out_channels: usize,
}

#[derive(Debug, Clone)]
pub struct GcnCache {
    input: Tensor,
    projected: Vec<f64>,
    masked: Vec<Vec<f64>>,
}

impl GcnLayer {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        adjacency: Arc<PartitionedAdjacency>,
        edge_importance: bool,
        rng: &mut R,
    ) -> Self {
        let p = adjacency.num_partitions();
        let v = adjacency.num_joints();
        Self {
            weight: Parameter::weight(init_uniform(&[p * out_channels, in_channels, 1, 1], in_channels, rng)),
            bias: Parameter::weight(init_uniform(&[p * out_channels], in_channels, rng)),
            edge_importance: edge_importance.then(|| Parameter::weight(Tensor::ones(&[p, v, v]))),
            adjacency,
            in_channels,
            out_channels,
        }
    }

    /// A layer with explicit weights; `weight` must be `[P * C_out, C_in, 1, 1]`.
    pub fn from_parts(
        weight: Tensor,
        bias: Tensor,
        adjacency: Arc<PartitionedAdjacency>,
        edge_importance: Option<Tensor>,
    ) -> Result<Self> {
        let p = adjacency.num_partitions();
        let &[rows, cin, 1, 1] = weight.shape() else {
            return Err(dim_err!(
                "gcn weight must be [P*C_out, C_in, 1, 1], got {:?}",
                weight.shape()
            ));
        };
        if rows % p != 0 {
            return Err(dim_err!("gcn weight rows {rows} not divisible by P = {p}"));
        }
        if bias.shape() != [rows] {
            return Err(dim_err!("gcn bias must be [{rows}], got {:?}", bias.shape()));
        }
        let v = adjacency.num_joints();
        if let Some(m) = &edge_importance {
            if m.shape() != [p, v, v] {
                return Err(dim_err!("edge importance must be [{p}, {v}, {v}]"));
            }
        }
        Ok(Self {
            weight: Parameter::weight(weight),
            bias: Parameter::weight(bias),
            edge_importance: edge_importance.map(Parameter::weight),
            adjacency,
            in_channels: cin,
            out_channels: rows / p,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn adjacency(&self) -> &PartitionedAdjacency {
        &self.adjacency
    }

    fn geometry(&self, t: usize, v: usize) -> ConvGeometry {
        ConvGeometry {
            in_channels: self.in_channels,
            height: t,
            width: v,
            out_channels: self.adjacency.num_partitions() * self.out_channels,
            kernel: (1, 1),
            stride: (1, 1),
            padding: (0, 0),
        }
    }

    /// Adjacency partitions with the edge-importance mask applied.
    fn masked_adjacency(&self) -> Vec<Vec<f64>> {
        let v = self.adjacency.num_joints();
        self.adjacency
            .matrices()
            .iter()
            .enumerate()
            .map(|(p, a)| match &self.edge_importance {
                Some(m) => a
                    .data()
                    .iter()
                    .zip(&m.value.data()[p * v * v..(p + 1) * v * v])
                    .map(|(x, w)| x * w)
                    .collect(),
                None => a.data().to_vec(),
            })
            .collect()
    }

    /// `x: [N, C_in, T, V]` to `[N, C_out, T, V]`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, GcnCache)> {
        let &[n, cin, t, v] = x.shape() else {
            return Err(dim_err!("gcn input must be [N, C, T, V], got {:?}", x.shape()));
        };
        if cin != self.in_channels {
            return Err(dim_err!("gcn expects {} channels, got {cin}", self.in_channels));
        }
        if v != self.adjacency.num_joints() {
            return Err(dim_err!(
                "gcn adjacency has {} joints, input has {v}",
                self.adjacency.num_joints()
            ));
        }
        let g = self.geometry(t, v);
        let pc = g.out_channels;
        let cout = self.out_channels;
        let tv = t * v;
        let masked = self.masked_adjacency();
        let mut projected = vec![0.0; n * pc * tv];
        let mut out = vec![0.0; n * cout * tv];
        for i in 0..n {
            let y = &mut projected[i * pc * tv..(i + 1) * pc * tv];
            for (row, &b) in y.chunks_exact_mut(tv).zip(self.bias.value.data()) {
                row.iter_mut().for_each(|e| *e = b);
            }
            conv_forward_into(
                &g,
                &x.data()[i * cin * tv..(i + 1) * cin * tv],
                self.weight.value.data(),
                y,
            );
            let z = &mut out[i * cout * tv..(i + 1) * cout * tv];
            for (p, a) in masked.iter().enumerate() {
                for c in 0..cout {
                    let y_pc = &y[(p * cout + c) * tv..(p * cout + c + 1) * tv];
                    let z_c = &mut z[c * tv..(c + 1) * tv];
                    for (y_row, z_row) in y_pc.chunks_exact(v).zip(z_c.chunks_exact_mut(v)) {
                        for (src, &yv) in y_row.iter().enumerate() {
                            let a_row = &a[src * v..(src + 1) * v];
                            for (zw, aw) in z_row.iter_mut().zip(a_row) {
                                *zw += yv * aw;
                            }
                        }
                    }
                }
            }
        }
        Ok((
            Tensor::new(vec![n, cout, t, v], out)?,
            GcnCache {
                input: x.clone(),
                projected,
                masked,
            },
        ))
    }

    /// Accumulates parameter gradients; returns the input gradient.
    pub fn backward(&mut self, cache: &GcnCache, grad_out: &Tensor) -> Result<Tensor> {
        let &[n, cin, t, v] = cache.input.shape() else {
            unreachable!("cached gcn input is rank 4")
        };
        let cout = self.out_channels;
        if grad_out.shape() != [n, cout, t, v] {
            return Err(dim_err!("gcn grad_out shape {:?} mismatched", grad_out.shape()));
        }
        let g = self.geometry(t, v);
        let pc = g.out_channels;
        let np = self.adjacency.num_partitions();
        let tv = t * v;
        let mut dproj = vec![0.0; pc * tv];
        let mut dmask = vec![vec![0.0; v * v]; np];
        let mut dweight = vec![0.0; self.weight.len()];
        let mut dbias = vec![0.0; pc];
        let mut dx = vec![0.0; n * cin * tv];
        for i in 0..n {
            let y = &cache.projected[i * pc * tv..(i + 1) * pc * tv];
            let dz = &grad_out.data()[i * cout * tv..(i + 1) * cout * tv];
            dproj.iter_mut().for_each(|e| *e = 0.0);
            for (p, a) in cache.masked.iter().enumerate() {
                let da = &mut dmask[p];
                for c in 0..cout {
                    let row = (p * cout + c) * tv;
                    for tt in 0..t {
                        let dz_row = &dz[c * tv + tt * v..c * tv + (tt + 1) * v];
                        for src in 0..v {
                            let a_row = &a[src * v..(src + 1) * v];
                            dproj[row + tt * v + src] = dz_row.iter().zip(a_row).map(|(d, w)| d * w).sum::<f64>();
                            let yv = y[row + tt * v + src];
                            for (dw, dzw) in da[src * v..(src + 1) * v].iter_mut().zip(dz_row) {
                                *dw += yv * dzw;
                            }
                        }
                    }
                }
            }
            for (db, row) in dbias.iter_mut().zip(dproj.chunks_exact(tv)) {
                *db += row.iter().sum::<f64>();
            }
            conv_backward_into(
                &g,
                &cache.input.data()[i * cin * tv..(i + 1) * cin * tv],
                self.weight.value.data(),
                &dproj,
                &mut dx[i * cin * tv..(i + 1) * cin * tv],
                &mut dweight,
            );
        }
        self.weight.accumulate(&dweight);
        self.bias.accumulate(&dbias);
        if let Some(m) = &mut self.edge_importance {
            let mut dm = Vec::with_capacity(np * v * v);
            for (p, da) in dmask.iter().enumerate() {
                let a = self.adjacency.partition(p).data();
                dm.extend(da.iter().zip(a).map(|(d, x)| d * x));
            }
            m.accumulate(&dm);
        }
        Tensor::new(vec![n, cin, t, v], dx)
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotRef<'_>)) {
        f(&format!("{prefix}.weight"), SlotRef::Param(&self.weight));
        f(&format!("{prefix}.bias"), SlotRef::Param(&self.bias));
        if let Some(m) = &self.edge_importance {
            f(&format!("{prefix}.edge_importance"), SlotRef::Param(m));
        }
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        f(&format!("{prefix}.weight"), Slot::Param(&mut self.weight));
        f(&format!("{prefix}.bias"), Slot::Param(&mut self.bias));
        if let Some(m) = &mut self.edge_importance {
            f(&format!("{prefix}.edge_importance"), Slot::Param(m));
        }
    }
}

/// Single-person convenience wrapper: `x: [C_in, T, V]`.
pub fn gcn_forward(layer: &GcnLayer, x: &Tensor) -> Result<Tensor> {
    let &[c, t, v] = x.shape() else {
        return Err(dim_err!("gcn_forward expects [C, T, V], got {:?}", x.shape()));
    };
    let batched = x.clone().reshape(&[1, c, t, v])?;
    let (y, _) = layer.forward(&batched)?;
    let cout = layer.out_channels();
    y.reshape(&[cout, t, v])
}
