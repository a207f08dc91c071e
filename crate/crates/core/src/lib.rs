//! Streaming skeleton action recognition with windowed ST-GCNs and
//! attentive feedback.
//!
//! The crate is organized bottom-up:
//!
//! * [`numerics`]: dense tensors, convolutions, batch norm and their
//!   backward passes, plus a finite-difference gradient oracle.
//! * [`graph`]: the COCO-18 skeleton and its partitioned adjacency.
//! * [`net`]: ST-GCN blocks and the full network.
//! * [`feedback`]: semantic-attention and control feedback blocks.
//! * [`engine`]: windowed streaming sessions and throughput metrics.
//! * [`noise`]: keypoint and frame noise emulation, dynamic batching.
//! * [`io`]: clip documents, checkpoints and configuration files.
//! * [`train`]: loss, optimizer, schedules and the toy training loop.

pub mod engine;
pub mod error;
pub mod feedback;
pub mod graph;
pub mod io;
pub mod net;
pub mod noise;
pub mod numerics;
pub mod train;

pub use engine::{ClassificationEvent, ClipTensor, StreamSession, WindowConfig};
pub use error::{Error, Result};
pub use feedback::{FeedbackState, Variant};
pub use graph::{PartitionedAdjacency, SkeletonLayout};
pub use net::{Network, NetworkConfig};
pub use numerics::{Mode, Parameter, Tensor};
