//! Compact end-to-end tracker: patch-embedding backbone, register extractor
//! and retriever, cross-attention head, and the online tracking step.

mod checkpoint;
mod config;
mod model;
mod state;

pub use checkpoint::{
    load_checkpoint, load_optimizer, read_manifest, save_checkpoint, Manifest, ParamRecord,
    MANIFEST_FILE, OPTIM_FILE, PARAMS_FILE,
};
pub use config::TrackerConfig;
pub use model::{
    cross_attention_head, embed_patches, patchify, AttentionBlock, BackboneParams, CropKind,
    HeadParams, Model,
};
pub use state::{crop_pixels, decode, track_step, tracker_init, window, Prediction, TrackerState};
