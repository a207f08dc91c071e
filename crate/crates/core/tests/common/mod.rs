#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rwgcn_core::{ClipTensor, Network, NetworkConfig, SkeletonLayout, Tensor, Variant};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn five_joint_tree() -> SkeletonLayout {
    SkeletonLayout::new(5, vec![(0, 1), (1, 2), (1, 3), (3, 4)], 1).unwrap()
}

pub fn small_net(seed: u64, classes: usize) -> Network {
    Network::new(NetworkConfig::from_plan(2, classes, five_joint_tree(), &[(6, 1), (6, 2)]).with_seed(seed)).unwrap()
}

/// Grows `variant` and opens every gate so feedback actually changes
/// outputs.
pub fn open_gates(net: &mut Network, variant: Variant, r: &mut ChaCha8Rng) {
    net.grow(variant).unwrap();
    if let Some(sa) = net.semantic.as_mut() {
        sa.res_gate.value.fill(r.gen_range(0.3..1.0));
        let c = sa.gate_bn.gamma.len();
        sa.gate_bn.gamma.value = Tensor::random(&[c], 0.5, r).map(|v| v + 1.0);
    }
    for cf in net.control.iter_mut().flatten() {
        cf.gate.value.fill(r.gen_range(0.3..1.0));
    }
}

pub fn random_clip(m: usize, t: usize, v: usize, r: &mut ChaCha8Rng) -> ClipTensor {
    ClipTensor::new(Tensor::random(&[m, 2, t, v], 1.0, r), 30.0).unwrap()
}

/// Random labelled tree: joint `i > 0` hangs off a uniformly chosen
/// earlier joint, then labels are shuffled.
pub fn random_tree(v: usize, r: &mut ChaCha8Rng) -> SkeletonLayout {
    use rand::seq::SliceRandom;
    let mut perm: Vec<usize> = (0..v).collect();
    perm.shuffle(r);
    let edges = (1..v).map(|i| (perm[r.gen_range(0..i)], perm[i])).collect();
    SkeletonLayout::new(v, edges, r.gen_range(0..v)).unwrap()
}
