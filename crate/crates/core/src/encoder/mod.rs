//! Shared ViT backbone for 6-channel pairs and 4-frame clips, plus the
//! attentive-pooling probe head and the dense (DPT-style) decoder.

mod config;
mod dpt;
mod patch;
mod pool;
mod vit;

pub use config::{EncoderConfig, EncoderMode, PosEmbeddingKind, TUBELET_FRAMES};
pub use dpt::{dpt_decode_tape, init_dpt_params, DptConfig};
pub use patch::{patchify, unpatchify, Grid, PatchGrid};
pub use pool::{attentive_pool, attentive_pool_tape, init_probe_params, AttentiveProbeConfig};
pub use vit::{
    encode, encode_with_taps, init_encoder_params, pos_embedding_for, tap_depths, vit_forward,
    TokenEmbeddings, VitOut,
};
