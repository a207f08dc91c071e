//! The spatial-temporal graph network: graph convolution, temporal
//! convolution, residual blocks and the classifier head.

mod block;
mod gcn;
mod network;

use rand::Rng;

use crate::numerics::{Parameter, Tensor};

pub use block::{strided_len, BlockCache, Projection, Residual, StGcnBlock, TcnLayer, TEMPORAL_KERNEL};
pub(crate) use block::{visit_bn, visit_bn_mut};
pub use gcn::{gcn_forward, GcnCache, GcnLayer};
pub use network::{
    count_parameters, network_forward, BlockSpec, ForwardCache, ForwardOutput, Network, NetworkConfig, NetworkGrad,
};

/// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub(crate) fn init_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::random(shape, bound, rng)
}

/// Mutable view of one named tensor in a network.
pub enum Slot<'a> {
    Param(&'a mut Parameter),
    Buffer(&'a mut Tensor),
}

/// Shared view of one named tensor in a network.
pub enum SlotRef<'a> {
    Param(&'a Parameter),
    Buffer(&'a Tensor),
}

impl SlotRef<'_> {
    pub fn tensor(&self) -> &Tensor {
        match self {
            SlotRef::Param(p) => &p.value,
            SlotRef::Buffer(t) => t,
        }
    }

    pub fn trainable(&self) -> bool {
        matches!(self, SlotRef::Param(p) if p.trainable)
    }
}
