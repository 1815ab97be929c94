//! Dataset manifests, condition assembly, splits and checkpoints.

pub mod checkpoint;
pub mod conditions;
pub mod manifest;
pub mod split;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, HostData, HostTensor};
pub use conditions::{nearest_k, select_attention_set, select_conditions, ConditionSet};
pub use manifest::{load_manifest, ManifestRecord, PanoramaRef, SampleRecord};
pub use split::{split_ids, SplitSpec};
