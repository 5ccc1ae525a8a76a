//! The two end-to-end classifiers, their weights, checkpoints and cost model.

mod checkpoint;
mod config;
mod flops;
mod forward;
mod weights;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, Pipeline};
pub use flops::{flops_estimate, FlopsReport, LayerFlops};
pub use forward::{classification_head, distracted_forward, drowsy_forward, forward, grad_check_pipeline, predict, ClassProbs};
pub use weights::{layout, param_count, Init, ParamSpec, Weights};
