mod common;

use proptest::prelude::*;
use rwgcn_core::noise::{dynamic_batch, inject_spatial_noise, inject_temporal_noise, LambdaPolicy, NoiseConfig};
use rwgcn_core::{ClipTensor, Error, Tensor};

fn seq_clip(m: usize, t: usize, v: usize) -> ClipTensor {
    let data = (0..m * 2 * t * v).map(|i| i as f64 + 1.0).collect();
    ClipTensor::new(Tensor::new(vec![m, 2, t, v], data).unwrap(), 30.0).unwrap()
}

fn skeleton(clip: &ClipTensor, m: usize, f: usize) -> Vec<f64> {
    let (t, v) = (clip.frames(), clip.joints());
    (0..2)
        .flat_map(|c| (0..v).map(move |j| (c, j)))
        .map(|(c, j)| clip.data.data()[((m * 2 + c) * t + f) * v + j])
        .collect()
}

#[test]
fn frame_drop_rate_is_close_to_p() {
    let clip = seq_clip(4, 2500, 1);
    let cfg = NoiseConfig {
        frame_drop_p: 0.3,
        seed: 4,
        ..Default::default()
    };
    let out = inject_temporal_noise(&clip, &cfg).unwrap();
    let mut dropped = 0;
    for m in 0..4 {
        for f in 0..2500 {
            dropped += usize::from(skeleton(&out, m, f).iter().all(|&x| x == 0.0));
        }
    }
    let rate = dropped as f64 / 10_000.0;
    assert!((rate - 0.3).abs() < 0.02, "{rate}");
}

#[test]
fn full_confusion_swaps_two_slots() {
    let clip = seq_clip(2, 5, 3);
    let cfg = NoiseConfig {
        id_confusion_p: 1.0,
        ..Default::default()
    };
    let out = inject_temporal_noise(&clip, &cfg).unwrap();
    for f in 0..5 {
        assert_eq!(skeleton(&out, 0, f), skeleton(&clip, 1, f));
        assert_eq!(skeleton(&out, 1, f), skeleton(&clip, 0, f));
    }
}

#[test]
fn confusion_is_a_no_op_for_one_person() {
    let clip = seq_clip(1, 6, 3);
    let cfg = NoiseConfig {
        id_confusion_p: 1.0,
        seed: 9,
        ..Default::default()
    };
    assert_eq!(inject_temporal_noise(&clip, &cfg).unwrap(), clip);
}

#[test]
fn drop_wins_over_confusion() {
    let clip = seq_clip(3, 4, 2);
    let cfg = NoiseConfig {
        frame_drop_p: 1.0,
        id_confusion_p: 1.0,
        ..Default::default()
    };
    let out = inject_temporal_noise(&clip, &cfg).unwrap();
    assert!(out.data.data().iter().all(|&x| x == 0.0));
}

#[test]
fn invalid_probability_is_config_error() {
    let clip = seq_clip(1, 2, 2);
    let cfg = NoiseConfig {
        spatial_drop_p: 1.5,
        ..Default::default()
    };
    assert!(matches!(inject_spatial_noise(&clip, &cfg), Err(Error::Config(_))));
    assert!(matches!(LambdaPolicy::new(0), Err(Error::Config(_))));
}

#[test]
fn mismatched_joints_cannot_batch() {
    let r = dynamic_batch(&[seq_clip(1, 2, 3), seq_clip(1, 2, 4)], &LambdaPolicy::new(1).unwrap());
    assert!(matches!(r, Err(Error::Dimension(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn noise_is_deterministic_and_only_removes(
        m in 1usize..4, t in 1usize..6, p in 0.0f64..1.0, q in 0.0f64..1.0, seed in any::<u64>()
    ) {
        let clip = seq_clip(m, t, 4);
        let cfg = NoiseConfig { spatial_drop_p: p, frame_drop_p: q, id_confusion_p: 0.0, seed };
        let a = inject_temporal_noise(&inject_spatial_noise(&clip, &cfg).unwrap(), &cfg).unwrap();
        let b = inject_temporal_noise(&inject_spatial_noise(&clip, &cfg).unwrap(), &cfg).unwrap();
        prop_assert_eq!(&a, &b);
        for (x, y) in a.data.data().iter().zip(clip.data.data()) {
            prop_assert!(*x == 0.0 || x == y);
        }
    }

    #[test]
    fn batching_preserves_total_mass_per_sample(
        lens in proptest::collection::vec(1usize..7, 1..4), m in 1usize..5, lambda in 1usize..4
    ) {
        let clips: Vec<ClipTensor> = lens.iter().map(|&t| seq_clip(m, t, 2)).collect();
        let batch = dynamic_batch(&clips, &LambdaPolicy::new(lambda).unwrap()).unwrap();
        let t_max = *lens.iter().max().unwrap();
        prop_assert_eq!(batch.data.shape(), &[clips.len(), lambda, 2, t_max, 2][..]);
        for (b, clip) in clips.iter().enumerate() {
            let slot_len = 2 * t_max * 2;
            let got: f64 = batch.data.data()[b * lambda * slot_len..(b + 1) * lambda * slot_len].iter().sum();
            let t = clip.frames();
            // repeat padding: frame f copies frame f mod t
            let want: f64 = (0..m)
                .flat_map(|pm| (0..2).map(move |c| (pm, c)))
                .map(|(pm, c)| {
                    (0..t_max)
                        .map(|f| (0..2).map(|j| clip.data.get(&[pm, c, f % t, j])).sum::<f64>())
                        .sum::<f64>()
                })
                .sum();
            prop_assert!((got - want).abs() < 1e-9);
        }
    }
}
