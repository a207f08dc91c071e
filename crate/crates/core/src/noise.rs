//! Emulation of upstream pose-estimation and tracking errors, and the
//! batching preprocessor that evens out clip length and person count.
//!
//! Randomness is counter based: every decision hashes
//! `(seed, stream, person, frame, joint)` so results do not depend on
//! iteration order.

use serde::{Deserialize, Serialize};

use crate::engine::ClipTensor;
use crate::error::{dim_err, Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Per keypoint.
    #[serde(default)]
    pub spatial_drop_p: f64,
    /// Per (person, frame).
    #[serde(default)]
    pub frame_drop_p: f64,
    /// Per (person, frame).
    #[serde(default)]
    pub id_confusion_p: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            spatial_drop_p: 0.0,
            frame_drop_p: 0.0,
            id_confusion_p: 0.0,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("spatial_drop_p", self.spatial_drop_p),
            ("frame_drop_p", self.frame_drop_p),
            ("id_confusion_p", self.id_confusion_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

/// Target person-slot count after reduction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LambdaPolicy {
    pub lambda: usize,
}

impl LambdaPolicy {
    pub fn new(lambda: usize) -> Result<Self> {
        if lambda == 0 {
            return Err(Error::Config("lambda must be >= 1".into()));
        }
        Ok(Self { lambda })
    }
}

// Stream tags keep the draws of different decisions independent.
const STREAM_SPATIAL: u64 = 1;
const STREAM_FRAME_DROP: u64 = 2;
const STREAM_CONFUSE: u64 = 3;
const STREAM_CONFUSE_TARGET: u64 = 4;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform draw in `[0, 1)` addressed by `(seed, stream, a, b, c)`.
pub fn counter_uniform(seed: u64, stream: u64, a: u64, b: u64, c: u64) -> f64 {
    const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
    let mut h = mix(seed.wrapping_add(GOLDEN));
    for word in [stream, a, b, c] {
        h = mix(h ^ word.wrapping_add(GOLDEN).wrapping_add(h << 6).wrapping_add(h >> 2));
    }
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn dims(clip: &ClipTensor) -> [usize; 4] {
    [clip.persons(), clip.channels(), clip.frames(), clip.joints()]
}

/// Zeroes each keypoint (all channels) independently with
/// probability `spatial_drop_p`.
pub fn inject_spatial_noise(clip: &ClipTensor, config: &NoiseConfig) -> Result<ClipTensor> {
    config.validate()?;
    let [m, c, t, v] = dims(clip);
    let p = config.spatial_drop_p;
    if p == 0.0 {
        return Ok(clip.clone());
    }
    let mut out = clip.data.clone();
    let data = out.data_mut();
    for pm in 0..m {
        for f in 0..t {
            for j in 0..v {
                if counter_uniform(config.seed, STREAM_SPATIAL, pm as u64, f as u64, j as u64) < p {
                    for ch in 0..c {
                        data[((pm * c + ch) * t + f) * v + j] = 0.0;
                    }
                }
            }
        }
    }
    ClipTensor::new(out, clip.fps)
}

/// Copies person `from`'s skeleton at frame `f` onto slot `to`; `dims` is `[C, T, V]`.
fn copy_skeleton(src: &[f64], dst: &mut [f64], from: usize, to: usize, f: usize, [c, t, v]: [usize; 3]) {
    for ch in 0..c {
        let s = ((from * c + ch) * t + f) * v;
        let d = ((to * c + ch) * t + f) * v;
        dst[d..d + v].copy_from_slice(&src[s..s + v]);
    }
}

/// Per (person, frame): drop the skeleton with probability
/// `frame_drop_p`; otherwise move it to a uniformly chosen other slot
/// with probability `id_confusion_p`.
///
/// Moves happen simultaneously and leave the source slot empty. Staying
/// skeletons are placed first, moved ones overwrite them in slot order.
/// With a single person slot, confusion does nothing.
pub fn inject_temporal_noise(clip: &ClipTensor, config: &NoiseConfig) -> Result<ClipTensor> {
    config.validate()?;
    let [m, c, t, v] = dims(clip);
    let src = clip.data.data();
    let mut out = vec![0.0; src.len()];
    let seed = config.seed;
    for f in 0..t {
        let mut moves = Vec::new();
        for pm in 0..m {
            let (a, b) = (pm as u64, f as u64);
            if counter_uniform(seed, STREAM_FRAME_DROP, a, b, 0) < config.frame_drop_p {
                continue;
            }
            if m > 1 && counter_uniform(seed, STREAM_CONFUSE, a, b, 0) < config.id_confusion_p {
                let k = (counter_uniform(seed, STREAM_CONFUSE_TARGET, a, b, 0) * (m - 1) as f64) as usize;
                let k = k.min(m - 2);
                moves.push((pm, if k < pm { k } else { k + 1 }));
            } else {
                copy_skeleton(src, &mut out, pm, pm, f, [c, t, v]);
            }
        }
        for (from, to) in moves {
            copy_skeleton(src, &mut out, from, to, f, [c, t, v]);
        }
    }
    ClipTensor::new(Tensor::new(clip.data.shape().to_vec(), out)?, clip.fps)
}

/// Repeats the clip from frame 0 until it is `frames` long (truncating
/// if it is longer).
pub fn repeat_pad(clip: &ClipTensor, frames: usize) -> Result<ClipTensor> {
    let [m, c, t, v] = dims(clip);
    if t == 0 {
        return Err(dim_err!("cannot repeat-pad an empty clip"));
    }
    let mut out = Vec::with_capacity(m * c * frames * v);
    for row in clip.data.data().chunks_exact(t * v) {
        for f in 0..frames {
            let s = (f % t) * v;
            out.extend_from_slice(&row[s..s + v]);
        }
    }
    ClipTensor::new(Tensor::new(vec![m, c, frames, v], out)?, clip.fps)
}

/// A rank-5 batch `[B, lambda, C, T, V]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTensor {
    pub data: Tensor,
}

impl BatchTensor {
    pub fn batch_size(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn persons(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[3]
    }

    /// The same values viewed as a network input `[B * lambda, C, T, V]`.
    pub fn to_network_input(&self) -> Tensor {
        let s = self.data.shape();
        self.data
            .clone()
            .reshape(&[s[0] * s[1], s[2], s[3], s[4]])
            .expect("rank-5 batch")
    }
}

/// Pads every clip to the longest length by repetition, then folds the
/// person axis onto `lambda` slots: slot `m` is summed into `m % lambda`,
/// and missing slots stay zero.
pub fn dynamic_batch(clips: &[ClipTensor], policy: &LambdaPolicy) -> Result<BatchTensor> {
    let first = clips
        .first()
        .ok_or_else(|| Error::Domain("dynamic_batch needs at least one clip".into()))?;
    let lambda = LambdaPolicy::new(policy.lambda)?.lambda;
    let (c, v) = (first.channels(), first.joints());
    if let Some(bad) = clips.iter().position(|k| k.channels() != c || k.joints() != v) {
        return Err(dim_err!(
            "clip {bad} has {} channels and {} joints, expected {c} and {v}",
            clips[bad].channels(),
            clips[bad].joints()
        ));
    }
    let t_max = clips.iter().map(ClipTensor::frames).max().unwrap_or(0);
    let per_slot = c * t_max * v;
    let mut out = vec![0.0; clips.len() * lambda * per_slot];
    for (b, clip) in clips.iter().enumerate() {
        let padded = repeat_pad(clip, t_max)?;
        for (m, slot) in padded.data.data().chunks_exact(per_slot).enumerate() {
            let dst = &mut out[(b * lambda + m % lambda) * per_slot..][..per_slot];
            for (d, s) in dst.iter_mut().zip(slot) {
                *d += s;
            }
        }
    }
    Ok(BatchTensor {
        data: Tensor::new(vec![clips.len(), lambda, c, t_max, v], out)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_clip(m: usize, t: usize, v: usize) -> ClipTensor {
        let data = (0..m * 2 * t * v).map(|i| i as f64 + 1.0).collect();
        ClipTensor::new(Tensor::new(vec![m, 2, t, v], data).unwrap(), 30.0).unwrap()
    }

    #[test]
    fn uniform_draws_are_in_range_and_keyed() {
        let a = counter_uniform(1, 1, 2, 3, 4);
        assert!((0.0..1.0).contains(&a));
        assert_eq!(a, counter_uniform(1, 1, 2, 3, 4));
        assert_ne!(a, counter_uniform(1, 1, 2, 4, 3));
        assert_ne!(a, counter_uniform(2, 1, 2, 3, 4));
    }

    #[test]
    fn spatial_extremes() {
        let c = seq_clip(2, 5, 18);
        let mut cfg = NoiseConfig::default();
        assert_eq!(inject_spatial_noise(&c, &cfg).unwrap(), c);
        cfg.spatial_drop_p = 1.0;
        assert!(inject_spatial_noise(&c, &cfg)
            .unwrap()
            .data
            .data()
            .iter()
            .all(|&x| x == 0.0));
    }

    #[test]
    fn spatial_drops_whole_keypoints() {
        let c = seq_clip(1, 20, 18);
        let cfg = NoiseConfig {
            spatial_drop_p: 0.5,
            seed: 3,
            ..Default::default()
        };
        let n = inject_spatial_noise(&c, &cfg).unwrap();
        for f in 0..20 {
            for j in 0..18 {
                let x = n.data.get(&[0, 0, f, j]);
                let y = n.data.get(&[0, 1, f, j]);
                assert_eq!(x == 0.0, y == 0.0);
                if x != 0.0 {
                    assert_eq!(x, c.data.get(&[0, 0, f, j]));
                }
            }
        }
    }

    #[test]
    fn invalid_probability_is_config_error() {
        let cfg = NoiseConfig {
            frame_drop_p: 1.5,
            ..Default::default()
        };
        assert!(matches!(
            inject_temporal_noise(&seq_clip(1, 2, 3), &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn temporal_extremes() {
        let c = seq_clip(3, 4, 5);
        assert_eq!(inject_temporal_noise(&c, &NoiseConfig::default()).unwrap(), c);
        let drop = NoiseConfig {
            frame_drop_p: 1.0,
            id_confusion_p: 1.0,
            ..Default::default()
        };
        assert!(inject_temporal_noise(&c, &drop)
            .unwrap()
            .data
            .data()
            .iter()
            .all(|&x| x == 0.0));
    }

    #[test]
    fn full_confusion_with_two_people_swaps_every_frame() {
        let c = seq_clip(2, 3, 4);
        let cfg = NoiseConfig {
            id_confusion_p: 1.0,
            seed: 9,
            ..Default::default()
        };
        let n = inject_temporal_noise(&c, &cfg).unwrap();
        for f in 0..3 {
            for ch in 0..2 {
                for j in 0..4 {
                    assert_eq!(n.data.get(&[0, ch, f, j]), c.data.get(&[1, ch, f, j]));
                    assert_eq!(n.data.get(&[1, ch, f, j]), c.data.get(&[0, ch, f, j]));
                }
            }
        }
    }

    #[test]
    fn confusion_with_one_slot_is_noop() {
        let c = seq_clip(1, 6, 4);
        let cfg = NoiseConfig {
            id_confusion_p: 1.0,
            ..Default::default()
        };
        assert_eq!(inject_temporal_noise(&c, &cfg).unwrap(), c);
    }

    #[test]
    fn temporal_noise_keeps_surviving_coordinates() {
        let c = seq_clip(4, 30, 3);
        let cfg = NoiseConfig {
            frame_drop_p: 0.3,
            id_confusion_p: 0.3,
            seed: 5,
            ..Default::default()
        };
        let n = inject_temporal_noise(&c, &cfg).unwrap();
        // every non-empty skeleton in the output is some input skeleton of the same frame
        for f in 0..30 {
            for m in 0..4 {
                let out: Vec<f64> = (0..2)
                    .flat_map(|ch| (0..3).map(move |j| (ch, j)))
                    .map(|(ch, j)| n.data.get(&[m, ch, f, j]))
                    .collect();
                if out.iter().all(|&x| x == 0.0) {
                    continue;
                }
                let found = (0..4).any(|src| {
                    (0..2)
                        .flat_map(|ch| (0..3).map(move |j| (ch, j)))
                        .map(|(ch, j)| c.data.get(&[src, ch, f, j]))
                        .eq(out.iter().copied())
                });
                assert!(found);
            }
        }
    }

    #[test]
    fn repeat_padding() {
        let c = seq_clip(1, 5, 2);
        let p = repeat_pad(&c, 8).unwrap();
        for f in 0..8 {
            for ch in 0..2 {
                assert_eq!(p.data.get(&[0, ch, f, 1]), c.data.get(&[0, ch, f % 5, 1]));
            }
        }
    }

    #[test]
    fn batch_lengths_and_slots() {
        let a = seq_clip(2, 5, 3);
        let b = seq_clip(2, 8, 3);
        let batch = dynamic_batch(&[a.clone(), b.clone()], &LambdaPolicy { lambda: 2 }).unwrap();
        assert_eq!(batch.data.shape(), &[2, 2, 2, 8, 3]);
        for f in 5..8 {
            assert_eq!(batch.data.get(&[0, 1, 0, f, 2]), a.data.get(&[1, 0, f - 5, 2]));
        }
        for f in 0..8 {
            assert_eq!(batch.data.get(&[1, 0, 1, f, 0]), b.data.get(&[0, 1, f, 0]));
        }
    }

    #[test]
    fn id_agnostic_sum_and_zero_pad() {
        let c = seq_clip(2, 3, 2);
        let one = dynamic_batch(std::slice::from_ref(&c), &LambdaPolicy { lambda: 1 }).unwrap();
        for ch in 0..2 {
            for f in 0..3 {
                for j in 0..2 {
                    let want = c.data.get(&[0, ch, f, j]) + c.data.get(&[1, ch, f, j]);
                    assert_eq!(one.data.get(&[0, 0, ch, f, j]), want);
                }
            }
        }
        let four = dynamic_batch(std::slice::from_ref(&c), &LambdaPolicy { lambda: 4 }).unwrap();
        assert_eq!(four.data.shape(), &[1, 4, 2, 3, 2]);
        assert_eq!(four.data.sum(), c.data.sum());
        assert!(four.data.data()[2 * 12..].iter().all(|&x| x == 0.0));
        assert!(dynamic_batch(&[], &LambdaPolicy { lambda: 1 }).is_err());
    }
}
