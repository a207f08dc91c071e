//! Clip documents, checkpoints and configuration files.

mod checkpoint;
mod clip;
mod config;

pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint, CheckpointHeader, TensorEntry,
    TensorKind, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
pub use clip::{
    from_tensor, parse_clip, parse_clip_file, read_clips_jsonl, serialize_clip, to_tensor, ClipRecord, DatasetManifest,
    FrameRecord, ManifestEntry, PersonRecord, Split, NUM_KEYPOINTS,
};
pub use config::{load_config, parse_config, FileConfig, NoiseSection, WindowSection};
