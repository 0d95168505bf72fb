//! Encoder geometry configuration and named presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frames per temporal tubelet for clip inputs.
pub const TUBELET_FRAMES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    /// 6-channel temporal image pair.
    Image6,
    /// 4-frame clip consumed as 2-frame tubelets.
    Clip,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosEmbeddingKind {
    FixedSincos2d,
    FixedSincos3d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub n_heads: usize,
    pub mlp_ratio: f64,
    pub n_registers: usize,
    pub mode: EncoderMode,
    pub pos_embedding: PosEmbeddingKind,
}

impl EncoderConfig {
    /// ViT-B/14, the paper-scale backbone.
    pub fn vit_base(mode: EncoderMode) -> Self {
        Self::sized(768, 12, 12, mode)
    }

    /// ViT-S/14.
    pub fn vit_small(mode: EncoderMode) -> Self {
        Self::sized(384, 12, 6, mode)
    }

    /// Desk-scale encoder: depth 4, dim 64, heads 4, patch 14 (side 112).
    pub fn tiny(mode: EncoderMode) -> Self {
        EncoderConfig {
            patch_size: 14,
            embed_dim: 64,
            depth: 4,
            n_heads: 4,
            mlp_ratio: 4.0,
            n_registers: 4,
            mode,
            pos_embedding: pos_for(mode),
        }
    }

    /// Gradient-check scale: depth 2, dim 32, patch 7 (side 28).
    pub fn micro(mode: EncoderMode) -> Self {
        EncoderConfig {
            patch_size: 7,
            embed_dim: 32,
            depth: 2,
            n_heads: 4,
            mlp_ratio: 2.0,
            n_registers: 2,
            mode,
            pos_embedding: pos_for(mode),
        }
    }

    fn sized(embed_dim: usize, depth: usize, n_heads: usize, mode: EncoderMode) -> Self {
        EncoderConfig {
            patch_size: 14,
            embed_dim,
            depth,
            n_heads,
            mlp_ratio: 4.0,
            n_registers: 4,
            mode,
            pos_embedding: pos_for(mode),
        }
    }

    pub fn by_name(name: &str, mode: EncoderMode) -> Result<Self> {
        match name {
            "base" => Ok(Self::vit_base(mode)),
            "small" => Ok(Self::vit_small(mode)),
            "tiny" => Ok(Self::tiny(mode)),
            "micro" => Ok(Self::micro(mode)),
            other => Err(Error::Config(format!("unknown encoder preset {other}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.embed_dim % 4 != 0 {
            return Err(Error::invalid("embed_dim must be a multiple of 4"));
        }
        if self.patch_size == 0 || self.depth == 0 {
            return Err(Error::invalid("patch_size and depth must be positive"));
        }
        match (self.mode, self.pos_embedding) {
            (EncoderMode::Image6, PosEmbeddingKind::FixedSincos2d) => Ok(()),
            (EncoderMode::Clip, PosEmbeddingKind::FixedSincos3d) => Ok(()),
            _ => Err(Error::invalid(
                "pos embedding kind must match encoder mode (2d image / 3d clip)",
            )),
        }
    }

    /// Flattened patch vector length. Pair patches carry 6 channels, clip
    /// tubelets 2 frames of 3 channels, so both modes have the same length.
    pub fn patch_dim(&self) -> usize {
        match self.mode {
            EncoderMode::Image6 => self.patch_size * self.patch_size * 6,
            EncoderMode::Clip => TUBELET_FRAMES * self.patch_size * self.patch_size * 3,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }
}

fn pos_for(mode: EncoderMode) -> PosEmbeddingKind {
    match mode {
        EncoderMode::Image6 => PosEmbeddingKind::FixedSincos2d,
        EncoderMode::Clip => PosEmbeddingKind::FixedSincos3d,
    }
}
