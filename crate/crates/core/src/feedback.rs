//! Attentive feedback between consecutive windows.
//!
//! The final features of window `k` are pooled and compressed into a
//! 32-vector (`FB`). Window `k + 1` consumes it in two ways:
//!
//! * **semantic**: each joint-frame token of the input scores itself
//!   against `FB`; the scores weight a single key/value projection of `FB`,
//!   and the result is added back through a 1x1 conv, a zero-initialized
//!   batch norm and a zero-initialized scalar gate;
//! * **control**: `FB` is mapped to one weight per channel through an
//!   efficient-channel-attention style 1-D conv, and the channels are
//!   rescaled by `1 + gamma * (2 w - 1)`.
//!
//! Both blocks are exact identities when first attached.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::net::{init_uniform, Network, Slot, SlotRef};
use crate::numerics::{
    conv_backward_into, conv_forward_into, global_avg_pool, sigmoid, BatchNorm, BnCache, ConvGeometry, Mode,
    NormLayout, ParamRole, Parameter, Tensor,
};

/// Length of the compressed feedback vector.
pub const FB_DIM: usize = 32;

/// Kernel size of the channel-attention conv.
pub const ECA_KERNEL: usize = 3;

/// Which feedback blocks a network carries (or a session uses).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "consensus")]
    Consensus,
    #[serde(rename = "sf")]
    Semantic,
    #[serde(rename = "cf")]
    Control,
    #[serde(rename = "sf+cf")]
    SemanticControl,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Consensus,
        Variant::Semantic,
        Variant::Control,
        Variant::SemanticControl,
    ];

    pub fn semantic(self) -> bool {
        matches!(self, Variant::Semantic | Variant::SemanticControl)
    }

    pub fn control(self) -> bool {
        matches!(self, Variant::Control | Variant::SemanticControl)
    }

    pub fn uses_feedback(self) -> bool {
        self != Variant::Consensus
    }

    pub fn from_flags(semantic: bool, control: bool) -> Self {
        match (semantic, control) {
            (false, false) => Variant::Consensus,
            (true, false) => Variant::Semantic,
            (false, true) => Variant::Control,
            (true, true) => Variant::SemanticControl,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Consensus => "consensus",
            Variant::Semantic => "sf",
            Variant::Control => "cf",
            Variant::SemanticControl => "sf+cf",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "consensus" => Ok(Variant::Consensus),
            "sf" | "semantic" => Ok(Variant::Semantic),
            "cf" | "control" => Ok(Variant::Control),
            "sf+cf" | "sfcf" | "both" => Ok(Variant::SemanticControl),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected consensus, sf, cf or sf+cf)"
            ))),
        }
    }
}

/// Compressed summary of the previous window, owned by one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackState {
    vector: Tensor,
    pub window_index: usize,
    valid: bool,
}

impl Default for FeedbackState {
    fn default() -> Self {
        Self::empty()
    }
}

impl FeedbackState {
    /// The state before any window has completed: all zeros, invalid.
    pub fn empty() -> Self {
        Self {
            vector: Tensor::zeros(&[FB_DIM]),
            window_index: 0,
            valid: false,
        }
    }

    pub fn new(vector: Tensor, window_index: usize) -> Result<Self> {
        if vector.shape() != [FB_DIM] {
            return Err(dim_err!("feedback vector must be [{FB_DIM}], got {:?}", vector.shape()));
        }
        Ok(Self {
            vector,
            window_index,
            valid: true,
        })
    }

    pub fn vector(&self) -> &Tensor {
        &self.vector
    }

    pub fn is_valid(&self) -> bool {
        self.valid
    }
}

/// Linear map from pooled final features to the feedback vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackCompressor {
    /// `[32, C_f]`
    pub weight: Parameter,
    /// `[32]`, zero-initialized.
    pub bias: Parameter,
}

impl FeedbackCompressor {
    pub fn new<R: Rng + ?Sized>(feature_channels: usize, rng: &mut R) -> Self {
        Self {
            weight: Parameter::weight(init_uniform(&[FB_DIM, feature_channels], feature_channels, rng)),
            bias: Parameter::weight(Tensor::zeros(&[FB_DIM])),
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    /// `pooled: [C_f]` to `[32]`.
    pub fn project(&self, pooled: &[f64]) -> Vec<f64> {
        let cf = self.feature_channels();
        let w = self.weight.value.data();
        (0..FB_DIM)
            .map(|k| {
                self.bias.value.data()[k]
                    + w[k * cf..(k + 1) * cf]
                        .iter()
                        .zip(pooled)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect()
    }

    /// Accumulates parameter gradients; returns `d pooled`.
    pub fn backward(&mut self, pooled: &[f64], dfb: &[f64]) -> Vec<f64> {
        let cf = self.feature_channels();
        let mut dw = vec![0.0; FB_DIM * cf];
        let mut dpooled = vec![0.0; cf];
        let w = self.weight.value.data();
        for k in 0..FB_DIM {
            for c in 0..cf {
                dw[k * cf + c] = dfb[k] * pooled[c];
                dpooled[c] += w[k * cf + c] * dfb[k];
            }
        }
        self.weight.accumulate(&dw);
        self.bias.accumulate(dfb);
        dpooled
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Pools `[C_f, T_f, V]` features over frames and joints and compresses
/// them into a valid feedback state.
pub fn compress_features(features: &Tensor, compressor: &FeedbackCompressor) -> Result<FeedbackState> {
    let pooled = global_avg_pool(features)?;
    if pooled.len() != compressor.feature_channels() {
        return Err(dim_err!(
            "compressor expects {} channels, features have {}",
            compressor.feature_channels(),
            pooled.len()
        ));
    }
    FeedbackState::new(Tensor::from_vec(compressor.project(pooled.data())), 1)
}

fn check_input(x: &Tensor, channels: usize, persons: usize, fb: &Tensor) -> Result<(usize, usize, usize)> {
    let &[n, c, t, v] = x.shape() else {
        return Err(dim_err!("feedback input must be [N, C, T, V], got {:?}", x.shape()));
    };
    if c != channels {
        return Err(dim_err!("feedback block has {channels} channels, input has {c}"));
    }
    if persons == 0 || n % persons != 0 {
        return Err(dim_err!("{n} person slices do not split into groups of {persons}"));
    }
    let b = n / persons;
    if fb.shape() != [b, FB_DIM] {
        return Err(dim_err!(
            "feedback vectors must be [{b}, {FB_DIM}], got {:?}",
            fb.shape()
        ));
    }
    Ok((n, t * v, b))
}

/// Cross-attention of the current tokens against the feedback vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticAttentionBlock {
    /// Query projection `[32, C]`.
    pub q_proj: Parameter,
    /// Combined key/value projection `[C, 32]`.
    pub kv_proj: Parameter,
    /// 1x1 conv `[C, C, 1, 1]`, no bias.
    pub gate_conv: Parameter,
    pub gate_bn: BatchNorm,
    /// Residual gate, zero at construction.
    pub res_gate: Parameter,
}

#[derive(Debug, Clone)]
pub struct SemanticCache {
    input: Tensor,
    fb: Tensor,
    persons: usize,
    /// Per-sample query direction `W_q^T fb / sqrt(32)`, `[B, C]`.
    query: Vec<f64>,
    /// Per-sample value `W_kv fb`, `[B, C]`.
    value: Vec<f64>,
    /// Token scores `[N, T*V]`.
    scores: Vec<f64>,
    attended: Vec<f64>,
    bn: BnCache,
    gated: Vec<f64>,
}

impl SemanticAttentionBlock {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        Self {
            q_proj: Parameter::weight(init_uniform(&[FB_DIM, channels], channels, rng)),
            kv_proj: Parameter::weight(init_uniform(&[channels, FB_DIM], FB_DIM, rng)),
            gate_conv: Parameter::weight(init_uniform(&[channels, channels, 1, 1], channels, rng)),
            gate_bn: BatchNorm::zero_init(channels),
            res_gate: Parameter::new(Tensor::zeros(&[1]), ParamRole::Gate),
        }
    }

    pub fn channels(&self) -> usize {
        self.kv_proj.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.q_proj.len() + self.kv_proj.len() + self.gate_conv.len() + self.gate_bn.param_count() + self.res_gate.len()
    }

    fn conv_geometry(&self, tv: usize) -> ConvGeometry {
        let c = self.channels();
        ConvGeometry {
            in_channels: c,
            height: tv,
            width: 1,
            out_channels: c,
            kernel: (1, 1),
            stride: (1, 1),
            padding: (0, 0),
        }
    }

    /// `x: [N, C, T, V]` with `N = B * persons`; `fb: [B, 32]`.
    pub fn forward(&self, x: &Tensor, persons: usize, fb: &Tensor, mode: Mode) -> Result<(Tensor, SemanticCache)> {
        let c = self.channels();
        let (n, tv, b) = check_input(x, c, persons, fb)?;
        let scale = 1.0 / (FB_DIM as f64).sqrt();
        let q = self.q_proj.value.data();
        let kv = self.kv_proj.value.data();
        let mut query = vec![0.0; b * c];
        let mut value = vec![0.0; b * c];
        for s in 0..b {
            let f = &fb.data()[s * FB_DIM..(s + 1) * FB_DIM];
            for ch in 0..c {
                query[s * c + ch] = (0..FB_DIM).map(|k| q[k * c + ch] * f[k]).sum::<f64>() * scale;
                value[s * c + ch] = (0..FB_DIM).map(|k| kv[ch * FB_DIM + k] * f[k]).sum::<f64>();
            }
        }

        let per = c * tv;
        let mut scores = vec![0.0; n * tv];
        let mut attended = vec![0.0; n * per];
        let mut conv = vec![0.0; n * per];
        let geo = self.conv_geometry(tv);
        for i in 0..n {
            let s = i / persons;
            let xi = &x.data()[i * per..(i + 1) * per];
            let sc = &mut scores[i * tv..(i + 1) * tv];
            for ch in 0..c {
                let u = query[s * c + ch];
                for (acc, xv) in sc.iter_mut().zip(&xi[ch * tv..(ch + 1) * tv]) {
                    *acc += u * xv;
                }
            }
            let att = &mut attended[i * per..(i + 1) * per];
            for ch in 0..c {
                let vv = value[s * c + ch];
                for (a, sv) in att[ch * tv..(ch + 1) * tv].iter_mut().zip(sc.iter()) {
                    *a = vv * sv;
                }
            }
            conv_forward_into(
                &geo,
                att,
                self.gate_conv.value.data(),
                &mut conv[i * per..(i + 1) * per],
            );
        }
        let layout = NormLayout {
            outer: n,
            channels: c,
            inner: tv,
        };
        let (gated, bn) = self.gate_bn.forward(&conv, layout, mode)?;
        let gamma = self.res_gate.value.data()[0];
        let out: Vec<f64> = x.data().iter().zip(&gated).map(|(xv, h)| xv + gamma * h).collect();
        Ok((
            Tensor::new(x.shape().to_vec(), out)?,
            SemanticCache {
                input: x.clone(),
                fb: fb.clone(),
                persons,
                query,
                value,
                scores,
                attended,
                bn,
                gated,
            },
        ))
    }

    /// Accumulates parameter gradients; returns `(dx, dfb)`.
    pub fn backward(&mut self, cache: &SemanticCache, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
        let x = &cache.input;
        if grad_out.shape() != x.shape() {
            return Err(dim_err!("semantic grad_out shape {:?} mismatched", grad_out.shape()));
        }
        let c = self.channels();
        let n = x.shape()[0];
        let tv = x.shape()[2] * x.shape()[3];
        let per = c * tv;
        let b = n / cache.persons;
        let dout = grad_out.data();
        let gamma = self.res_gate.value.data()[0];

        let dgamma: f64 = dout.iter().zip(&cache.gated).map(|(d, h)| d * h).sum();
        self.res_gate.accumulate(&[dgamma]);
        let dh: Vec<f64> = dout.iter().map(|d| gamma * d).collect();
        let dconv = self.gate_bn.backward(&dh, &cache.bn);

        let geo = self.conv_geometry(tv);
        let mut datt = vec![0.0; n * per];
        let mut dwg = vec![0.0; self.gate_conv.len()];
        for i in 0..n {
            conv_backward_into(
                &geo,
                &cache.attended[i * per..(i + 1) * per],
                self.gate_conv.value.data(),
                &dconv[i * per..(i + 1) * per],
                &mut datt[i * per..(i + 1) * per],
                &mut dwg,
            );
        }
        self.gate_conv.accumulate(&dwg);

        let mut dx = dout.to_vec();
        let mut dquery = vec![0.0; b * c];
        let mut dvalue = vec![0.0; b * c];
        let mut dscore = vec![0.0; tv];
        for i in 0..n {
            let s = i / cache.persons;
            let sc = &cache.scores[i * tv..(i + 1) * tv];
            let da = &datt[i * per..(i + 1) * per];
            dscore.iter_mut().for_each(|e| *e = 0.0);
            for ch in 0..c {
                let vv = cache.value[s * c + ch];
                let row = &da[ch * tv..(ch + 1) * tv];
                dvalue[s * c + ch] += row.iter().zip(sc).map(|(d, sv)| d * sv).sum::<f64>();
                for (ds, d) in dscore.iter_mut().zip(row) {
                    *ds += d * vv;
                }
            }
            let xi = &x.data()[i * per..(i + 1) * per];
            let dxi = &mut dx[i * per..(i + 1) * per];
            for ch in 0..c {
                let u = cache.query[s * c + ch];
                dquery[s * c + ch] += dscore
                    .iter()
                    .zip(&xi[ch * tv..(ch + 1) * tv])
                    .map(|(d, xv)| d * xv)
                    .sum::<f64>();
                for (d, ds) in dxi[ch * tv..(ch + 1) * tv].iter_mut().zip(&dscore) {
                    *d += ds * u;
                }
            }
        }

        let scale = 1.0 / (FB_DIM as f64).sqrt();
        let q = self.q_proj.value.data();
        let kv = self.kv_proj.value.data();
        let mut dq = vec![0.0; self.q_proj.len()];
        let mut dkv = vec![0.0; self.kv_proj.len()];
        let mut dfb = vec![0.0; b * FB_DIM];
        for s in 0..b {
            let f = &cache.fb.data()[s * FB_DIM..(s + 1) * FB_DIM];
            let df = &mut dfb[s * FB_DIM..(s + 1) * FB_DIM];
            for k in 0..FB_DIM {
                for ch in 0..c {
                    let du = dquery[s * c + ch] * scale;
                    let dv = dvalue[s * c + ch];
                    dq[k * c + ch] += f[k] * du;
                    df[k] += q[k * c + ch] * du + kv[ch * FB_DIM + k] * dv;
                    dkv[ch * FB_DIM + k] += dv * f[k];
                }
            }
        }
        self.q_proj.accumulate(&dq);
        self.kv_proj.accumulate(&dkv);
        Ok((Tensor::new(x.shape().to_vec(), dx)?, Tensor::new(vec![b, FB_DIM], dfb)?))
    }

    pub fn commit(&mut self, cache: &SemanticCache) {
        self.gate_bn.commit(&cache.bn);
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotRef<'_>)) {
        f(&format!("{prefix}.q_proj"), SlotRef::Param(&self.q_proj));
        f(&format!("{prefix}.kv_proj"), SlotRef::Param(&self.kv_proj));
        f(&format!("{prefix}.gate_conv"), SlotRef::Param(&self.gate_conv));
        crate::net::visit_bn(&self.gate_bn, &format!("{prefix}.gate_bn"), f);
        f(&format!("{prefix}.res_gate"), SlotRef::Param(&self.res_gate));
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        f(&format!("{prefix}.q_proj"), Slot::Param(&mut self.q_proj));
        f(&format!("{prefix}.kv_proj"), Slot::Param(&mut self.kv_proj));
        f(&format!("{prefix}.gate_conv"), Slot::Param(&mut self.gate_conv));
        crate::net::visit_bn_mut(&mut self.gate_bn, &format!("{prefix}.gate_bn"), f);
        f(&format!("{prefix}.res_gate"), Slot::Param(&mut self.res_gate));
    }
}

/// Channel reweighting driven by the feedback vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlFeedbackBlock {
    /// `[C, 32]`
    pub proj: Parameter,
    /// `[C]`
    pub proj_bias: Parameter,
    /// 1-D conv over the channel axis, `[3]`, zero padded, no bias.
    pub eca_kernel: Parameter,
    /// Zero at construction.
    pub gate: Parameter,
}

#[derive(Debug, Clone)]
pub struct ControlCache {
    input: Tensor,
    fb: Tensor,
    persons: usize,
    /// `proj(fb)` per sample, `[B, C]`.
    descriptor: Vec<f64>,
    /// Sigmoid channel weights, `[B, C]`.
    weights: Vec<f64>,
}

impl ControlFeedbackBlock {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        Self {
            proj: Parameter::weight(init_uniform(&[channels, FB_DIM], FB_DIM, rng)),
            proj_bias: Parameter::weight(Tensor::zeros(&[channels])),
            eca_kernel: Parameter::weight(init_uniform(&[ECA_KERNEL], ECA_KERNEL, rng)),
            gate: Parameter::new(Tensor::zeros(&[1]), ParamRole::Gate),
        }
    }

    pub fn channels(&self) -> usize {
        self.proj_bias.len()
    }

    pub fn param_count(&self) -> usize {
        self.proj.len() + self.proj_bias.len() + self.eca_kernel.len() + self.gate.len()
    }

    /// Per-channel sigmoid weights `w` for one feedback vector.
    fn channel_weights(&self, fb: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let c = self.channels();
        let p = self.proj.value.data();
        let desc: Vec<f64> = (0..c)
            .map(|ch| {
                self.proj_bias.value.data()[ch]
                    + p[ch * FB_DIM..(ch + 1) * FB_DIM]
                        .iter()
                        .zip(fb)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect();
        let k = self.eca_kernel.value.data();
        let half = ECA_KERNEL / 2;
        let w = (0..c)
            .map(|ch| {
                let mut e = 0.0;
                for (j, kj) in k.iter().enumerate() {
                    let src = ch + j;
                    if src >= half && src - half < c {
                        e += kj * desc[src - half];
                    }
                }
                sigmoid(e)
            })
            .collect();
        (desc, w)
    }

    pub fn forward(&self, x: &Tensor, persons: usize, fb: &Tensor) -> Result<(Tensor, ControlCache)> {
        let c = self.channels();
        let (n, tv, b) = check_input(x, c, persons, fb)?;
        let gamma = self.gate.value.data()[0];
        let mut descriptor = Vec::with_capacity(b * c);
        let mut weights = Vec::with_capacity(b * c);
        for s in 0..b {
            let (d, w) = self.channel_weights(&fb.data()[s * FB_DIM..(s + 1) * FB_DIM]);
            descriptor.extend(d);
            weights.extend(w);
        }
        let mut out = x.data().to_vec();
        for i in 0..n {
            let s = i / persons;
            for ch in 0..c {
                let m = 1.0 + gamma * (2.0 * weights[s * c + ch] - 1.0);
                let base = (i * c + ch) * tv;
                out[base..base + tv].iter_mut().for_each(|e| *e *= m);
            }
        }
        Ok((
            Tensor::new(x.shape().to_vec(), out)?,
            ControlCache {
                input: x.clone(),
                fb: fb.clone(),
                persons,
                descriptor,
                weights,
            },
        ))
    }

    /// Accumulates parameter gradients; returns `(dx, dfb)`.
    pub fn backward(&mut self, cache: &ControlCache, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
        let x = &cache.input;
        if grad_out.shape() != x.shape() {
            return Err(dim_err!("control grad_out shape {:?} mismatched", grad_out.shape()));
        }
        let c = self.channels();
        let n = x.shape()[0];
        let tv = x.shape()[2] * x.shape()[3];
        let b = n / cache.persons;
        let gamma = self.gate.value.data()[0];
        let dout = grad_out.data();

        let mut dx = vec![0.0; x.len()];
        let mut dm = vec![0.0; b * c];
        for i in 0..n {
            let s = i / cache.persons;
            for ch in 0..c {
                let w = cache.weights[s * c + ch];
                let m = 1.0 + gamma * (2.0 * w - 1.0);
                let base = (i * c + ch) * tv;
                let mut acc = 0.0;
                for j in base..base + tv {
                    dx[j] = dout[j] * m;
                    acc += dout[j] * x.data()[j];
                }
                dm[s * c + ch] += acc;
            }
        }

        let k = self.eca_kernel.value.data().to_vec();
        let p = self.proj.value.data().to_vec();
        let half = ECA_KERNEL / 2;
        let mut dgamma = 0.0;
        let mut dk = vec![0.0; ECA_KERNEL];
        let mut dproj = vec![0.0; c * FB_DIM];
        let mut dbias = vec![0.0; c];
        let mut dfb = vec![0.0; b * FB_DIM];
        for s in 0..b {
            let w = &cache.weights[s * c..(s + 1) * c];
            let desc = &cache.descriptor[s * c..(s + 1) * c];
            let mut ddesc = vec![0.0; c];
            for ch in 0..c {
                let dms = dm[s * c + ch];
                dgamma += dms * (2.0 * w[ch] - 1.0);
                let de = dms * 2.0 * gamma * w[ch] * (1.0 - w[ch]);
                for j in 0..ECA_KERNEL {
                    let src = ch + j;
                    if src >= half && src - half < c {
                        dk[j] += de * desc[src - half];
                        ddesc[src - half] += de * k[j];
                    }
                }
            }
            let f = &cache.fb.data()[s * FB_DIM..(s + 1) * FB_DIM];
            let df = &mut dfb[s * FB_DIM..(s + 1) * FB_DIM];
            for ch in 0..c {
                dbias[ch] += ddesc[ch];
                for kk in 0..FB_DIM {
                    dproj[ch * FB_DIM + kk] += ddesc[ch] * f[kk];
                    df[kk] += p[ch * FB_DIM + kk] * ddesc[ch];
                }
            }
        }
        self.gate.accumulate(&[dgamma]);
        self.eca_kernel.accumulate(&dk);
        self.proj.accumulate(&dproj);
        self.proj_bias.accumulate(&dbias);
        Ok((Tensor::new(x.shape().to_vec(), dx)?, Tensor::new(vec![b, FB_DIM], dfb)?))
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotRef<'_>)) {
        f(&format!("{prefix}.proj"), SlotRef::Param(&self.proj));
        f(&format!("{prefix}.proj_bias"), SlotRef::Param(&self.proj_bias));
        f(&format!("{prefix}.eca_kernel"), SlotRef::Param(&self.eca_kernel));
        f(&format!("{prefix}.gate"), SlotRef::Param(&self.gate));
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        f(&format!("{prefix}.proj"), Slot::Param(&mut self.proj));
        f(&format!("{prefix}.proj_bias"), Slot::Param(&mut self.proj_bias));
        f(&format!("{prefix}.eca_kernel"), Slot::Param(&mut self.eca_kernel));
        f(&format!("{prefix}.gate"), Slot::Param(&mut self.gate));
    }
}

/// Single-stream semantic attention on `x: [C, T, V]`. An invalid feedback
/// state bypasses the block.
pub fn semantic_attention_forward(
    block: &SemanticAttentionBlock,
    x: &Tensor,
    fb: &FeedbackState,
    mode: Mode,
) -> Result<Tensor> {
    let &[c, t, v] = x.shape() else {
        return Err(dim_err!("expected [C, T, V], got {:?}", x.shape()));
    };
    if c != block.channels() {
        return Err(dim_err!(
            "semantic block has {} channels, input has {c}",
            block.channels()
        ));
    }
    if !fb.is_valid() {
        return Ok(x.clone());
    }
    let xb = x.clone().reshape(&[1, c, t, v])?;
    let fbb = fb.vector().clone().reshape(&[1, FB_DIM])?;
    let (y, _) = block.forward(&xb, 1, &fbb, mode)?;
    y.reshape(&[c, t, v])
}

/// Single-stream control feedback on `x: [C, T, V]`. An invalid feedback
/// state bypasses the block.
pub fn control_feedback_forward(block: &ControlFeedbackBlock, x: &Tensor, fb: &FeedbackState) -> Result<Tensor> {
    let &[c, t, v] = x.shape() else {
        return Err(dim_err!("expected [C, T, V], got {:?}", x.shape()));
    };
    if c != block.channels() {
        return Err(dim_err!(
            "control block has {} channels, input has {c}",
            block.channels()
        ));
    }
    if !fb.is_valid() {
        return Ok(x.clone());
    }
    let xb = x.clone().reshape(&[1, c, t, v])?;
    let fbb = fb.vector().clone().reshape(&[1, FB_DIM])?;
    let (y, _) = block.forward(&xb, 1, &fbb)?;
    y.reshape(&[c, t, v])
}

/// Attaches the feedback blocks of `variant` with zero-initialized gates.
pub fn grow_attach(mut net: Network, variant: Variant) -> Result<Network> {
    net.grow(variant)?;
    Ok(net)
}
