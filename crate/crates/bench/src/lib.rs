//! Criterion benchmarks for the hot paths: graph convolution, the full
//! network, windowed streaming, and the noise and batching passes.

use std::hint::black_box;
use std::sync::Arc;

use criterion::{BenchmarkId, Criterion, Throughput};
use rwgcn_core::engine::classify_clip;
use rwgcn_core::graph::build_partitioned_adjacency;
use rwgcn_core::net::{gcn_forward, network_forward, GcnLayer};
use rwgcn_core::noise::{dynamic_batch, inject_spatial_noise, inject_temporal_noise, LambdaPolicy, NoiseConfig};
use rwgcn_core::{ClipTensor, Network, NetworkConfig, SkeletonLayout, Tensor, Variant, WindowConfig};

/// Deterministic values in `[-0.5, 0.5)` so runs are comparable.
pub fn fixed_tensor(shape: &[usize]) -> Tensor {
    let n = shape.iter().product::<usize>();
    let data = (0..n).map(|i| ((i * 7919) % 997) as f64 / 997.0 - 0.5).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

pub fn fixed_clip(persons: usize, frames: usize) -> ClipTensor {
    ClipTensor::new(fixed_tensor(&[persons, 2, frames, 18]), 30.0).expect("valid clip")
}

/// The standard 120-class network grown to `variant`.
pub fn standard_network(variant: Variant) -> Network {
    let mut net = Network::new(NetworkConfig::standard(120)).expect("standard config is valid");
    if variant.uses_feedback() {
        net.grow(variant).expect("fresh network can grow");
    }
    net
}

fn gcn(c: &mut Criterion) {
    let adjacency = Arc::new(build_partitioned_adjacency(&SkeletonLayout::coco18()).expect("coco18 is a tree"));
    let mut group = c.benchmark_group("gcn_forward");
    for channels in [64, 128, 256] {
        let layer = GcnLayer::from_parts(
            fixed_tensor(&[3 * channels, channels, 1, 1]),
            fixed_tensor(&[3 * channels]),
            adjacency.clone(),
            None,
        )
        .expect("consistent shapes");
        let x = fixed_tensor(&[channels, 16, 18]);
        group.bench_with_input(BenchmarkId::from_parameter(channels), &x, |b, x| {
            b.iter(|| gcn_forward(&layer, black_box(x)).unwrap())
        });
    }
    group.finish();
}

fn network(c: &mut Criterion) {
    let net = standard_network(Variant::Consensus);
    let mut group = c.benchmark_group("network_forward");
    group.sample_size(10);
    for frames in [8, 30] {
        let clip = fixed_clip(1, frames);
        group.throughput(Throughput::Elements(frames as u64));
        group.bench_with_input(BenchmarkId::from_parameter(frames), &clip, |b, clip| {
            b.iter(|| network_forward(&net, black_box(&clip.data)).unwrap())
        });
    }
    group.finish();
}

fn streaming(c: &mut Criterion) {
    let mut group = c.benchmark_group("classify_clip");
    group.sample_size(10);
    let clip = fixed_clip(1, 16);
    for variant in Variant::ALL {
        let net = standard_network(variant);
        let config = WindowConfig::new(16, 8, 30.0, variant).expect("valid window config");
        group.bench_function(variant.as_str(), |b| {
            b.iter(|| classify_clip(&net, black_box(&clip), &config).unwrap())
        });
    }
    group.finish();
}

fn noise(c: &mut Criterion) {
    let clip = fixed_clip(2, 300);
    let config = NoiseConfig {
        spatial_drop_p: 0.1,
        frame_drop_p: 0.1,
        id_confusion_p: 0.1,
        seed: 1,
    };
    c.bench_function("noise/spatial_then_temporal", |b| {
        b.iter(|| inject_temporal_noise(&inject_spatial_noise(black_box(&clip), &config).unwrap(), &config).unwrap())
    });
    let clips: Vec<ClipTensor> = (0..8).map(|i| fixed_clip(1 + i % 3, 100 + 25 * i)).collect();
    let policy = LambdaPolicy::new(2).expect("lambda >= 1");
    c.bench_function("noise/dynamic_batch", |b| {
        b.iter(|| dynamic_batch(black_box(&clips), &policy).unwrap())
    });
}

/// Every benchmark in this crate.
pub fn benchmarks(c: &mut Criterion) {
    gcn(c);
    network(c);
    streaming(c);
    noise(c);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_deterministic_and_centered() {
        let a = fixed_clip(2, 8);
        assert_eq!(a, fixed_clip(2, 8));
        assert_eq!(a.data.shape(), &[2, 2, 8, 18]);
        assert!(a.data.data().iter().all(|x| (-0.5..0.5).contains(x)));
    }

    #[test]
    fn grown_networks_carry_their_variant() {
        for v in Variant::ALL {
            assert_eq!(standard_network(v).variant(), v);
        }
    }
}
