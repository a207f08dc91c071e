//! Two-class synthetic dataset: a standing skeleton sliding left-to-right
//! (class 0) or right-to-left (class 1).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::ClipTensor;
use crate::error::{Error, Result};
use crate::graph::SkeletonLayout;
use crate::io::{DatasetManifest, ManifestEntry, Split};
use crate::net::NetworkConfig;
use crate::numerics::Tensor;

/// Rest pose in COCO-18 order, roughly unit height.
const REST_POSE: [[f64; 2]; 18] = [
    [0.0, 0.6],
    [0.0, 0.45],
    [-0.15, 0.45],
    [-0.2, 0.25],
    [-0.22, 0.05],
    [0.15, 0.45],
    [0.2, 0.25],
    [0.22, 0.05],
    [-0.1, 0.0],
    [-0.1, -0.3],
    [-0.1, -0.6],
    [0.1, 0.0],
    [0.1, -0.3],
    [0.1, -0.6],
    [-0.04, 0.65],
    [0.04, 0.65],
    [-0.08, 0.62],
    [0.08, 0.62],
];

/// Reduced channel plan used for the toy task.
pub const TOY_PLAN: [(usize, usize); 4] = [(16, 1), (16, 1), (32, 2), (32, 1)];

/// Two-class COCO-18 network with [`TOY_PLAN`].
pub fn toy_network_config(seed: u64) -> NetworkConfig {
    NetworkConfig::from_plan(2, 2, SkeletonLayout::coco18(), &TOY_PLAN).with_seed(seed)
}

const JITTER: f64 = 0.02;
const TOY_FPS: f64 = 30.0;

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub manifest: DatasetManifest,
    pub clips: Vec<ClipTensor>,
    pub labels: Vec<usize>,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

/// Class-0 clip of pair `pair`: `[1, 2, T, 18]`.
fn rightward_clip(seed: u64, pair: u64, frames: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ pair);
    let start = rng.gen_range(-0.6..-0.2);
    let travel = rng.gen_range(0.4..0.8);
    let lift = rng.gen_range(-0.1..0.1);
    let mut data = Tensor::zeros(&[1, 2, frames, 18]);
    for f in 0..frames {
        let dx = start + travel * f as f64 / (frames - 1) as f64;
        for (j, &[x, y]) in REST_POSE.iter().enumerate() {
            data.set(&[0, 0, f, j], x + dx + rng.gen_range(-JITTER..JITTER));
            data.set(&[0, 1, f, j], y + lift + rng.gen_range(-JITTER..JITTER));
        }
    }
    data
}

/// `num_samples` single-person clips of `frames` frames. Sample `2p` is
/// class 0 and sample `2p + 1` is the same clip with `x` negated.
pub fn make_toy_dataset(num_samples: usize, frames: usize, seed: u64) -> Result<ToyDataset> {
    if frames < 8 {
        return Err(Error::Config(format!("toy clips need at least 8 frames, got {frames}")));
    }
    let mut clips = Vec::with_capacity(num_samples);
    let mut labels = Vec::with_capacity(num_samples);
    let mut entries = Vec::with_capacity(num_samples);
    for i in 0..num_samples {
        let base = rightward_clip(seed, (i / 2) as u64, frames);
        let label = i % 2;
        let data = if label == 0 {
            base
        } else {
            let mut mirrored = base;
            let n = frames * 18;
            mirrored.data_mut()[..n].iter_mut().for_each(|x| *x = -*x);
            mirrored
        };
        clips.push(ClipTensor::new(data, TOY_FPS)?);
        labels.push(label);
        entries.push(ManifestEntry {
            path: format!("toy/{i:04}.json"),
            split: Split::Train,
        });
    }
    Ok(ToyDataset {
        manifest: DatasetManifest {
            entries,
            classes: vec!["left_to_right".into(), "right_to_left".into()],
        },
        clips,
        labels,
    })
}
