//! Core tactile data types.

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use crate::error::{Error, Result};

/// One RGB tactile frame with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct TactileFrame {
    pub pixels: Array3<f64>,
    pub timestamp_us: i64,
    pub sensor_id: String,
    pub sequence_id: String,
    pub frame_index: usize,
}

impl TactileFrame {
    /// Construct a frame, clamping pixel values into [0, 1].
    pub fn new(
        mut pixels: Array3<f64>,
        timestamp_us: i64,
        sensor_id: impl Into<String>,
        sequence_id: impl Into<String>,
        frame_index: usize,
    ) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(Error::invalid("frame dimensions must be positive"));
        }
        if c != 3 {
            return Err(Error::shape(format!("frame must have 3 channels, got {c}")));
        }
        pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Ok(TactileFrame {
            pixels,
            timestamp_us,
            sensor_id: sensor_id.into(),
            sequence_id: sequence_id.into(),
            frame_index,
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SensorType {
    Digit,
    GelSight2017,
    GelSightMini,
}

/// Static description of a tactile sensor stream.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SensorProfile {
    pub sensor_type: SensorType,
    /// (height, width) of the native stream.
    pub native_resolution: (usize, usize),
    pub fps: f64,
    pub has_markers: bool,
    /// Path to a no-contact reference PNG, relative to the manifest root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background_path: Option<PathBuf>,
    /// Loaded no-contact reference; populated from `background_path` or set
    /// directly for in-memory corpora.
    #[serde(skip)]
    pub background_reference: Option<Array3<f64>>,
}

impl SensorProfile {
    pub fn validate(&self) -> Result<()> {
        if self.fps <= 0.0 {
            return Err(Error::invalid("sensor fps must be positive"));
        }
        if let Some(bg) = &self.background_reference {
            let (h, w, _) = bg.dim();
            if (h, w) != self.native_resolution {
                return Err(Error::shape(format!(
                    "background reference {h}x{w} does not match native resolution {:?}",
                    self.native_resolution
                )));
            }
        }
        Ok(())
    }
}

/// Indenter geometry used by the synthetic generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Indenter {
    Sphere,
    Flat,
    Sharp,
}

/// Model input: a 6-channel temporal image pair or a 4-frame clip.
#[derive(Clone, Debug, PartialEq)]
pub enum WindowData {
    /// `h x w x 6`: current frame concatenated with the strided past frame.
    Pair(Array3<f64>),
    /// `4 x h x w x 3`: frames at offsets `[t, t-2, t-4, t-6]`.
    Clip(Array4<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TactileWindow {
    pub data: WindowData,
    pub anchor_index: usize,
    pub span_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowMode {
    Pair,
    Clip,
}

impl TactileWindow {
    pub fn mode(&self) -> WindowMode {
        match self.data {
            WindowData::Pair(_) => WindowMode::Pair,
            WindowData::Clip(_) => WindowMode::Clip,
        }
    }

    /// (height, width) of the window content.
    pub fn spatial_dims(&self) -> (usize, usize) {
        match &self.data {
            WindowData::Pair(a) => (a.dim().0, a.dim().1),
            WindowData::Clip(a) => (a.dim().1, a.dim().2),
        }
    }

    pub fn n_channels(&self) -> usize {
        match &self.data {
            WindowData::Pair(a) => a.dim().2,
            WindowData::Clip(a) => a.dim().3,
        }
    }

    pub fn n_frames(&self) -> usize {
        match &self.data {
            WindowData::Pair(_) => 1,
            WindowData::Clip(a) => a.dim().0,
        }
    }
}

