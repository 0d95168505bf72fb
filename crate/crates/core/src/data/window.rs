//! Background subtraction, temporal windowing, and encoder-side resizing.

use ndarray::{Array3, Array4, Axis};

use crate::autodiff::resize_bilinear_raw;
use crate::error::{Error, Result};

use super::types::{SensorProfile, TactileFrame, TactileWindow, WindowData};

/// Signed background difference remapped affinely into [0, 1]: zero
/// difference maps to 0.5, preserving shear-direction sign information.
pub fn subtract_background(frame: &TactileFrame, profile: &SensorProfile) -> Result<TactileFrame> {
    let reference = profile
        .background_reference
        .as_ref()
        .ok_or_else(|| Error::MissingBackground(frame.sensor_id.clone()))?;
    if reference.dim() != frame.pixels.dim() {
        return Err(Error::shape(format!(
            "background {:?} vs frame {:?}",
            reference.dim(),
            frame.pixels.dim()
        )));
    }
    let mut out = frame.pixels.clone();
    out.zip_mut_with(reference, |p, r| {
        *p = (0.5 + (*p - r) * 0.5).clamp(0.0, 1.0);
    });
    Ok(TactileFrame {
        pixels: out,
        ..frame.clone()
    })
}

/// Apply [`subtract_background`] against an explicit reference image.
pub fn subtract_reference(frame: &Array3<f64>, reference: &Array3<f64>) -> Result<Array3<f64>> {
    if reference.dim() != frame.dim() {
        return Err(Error::shape(format!(
            "background {:?} vs frame {:?}",
            reference.dim(),
            frame.dim()
        )));
    }
    let mut out = frame.clone();
    out.zip_mut_with(reference, |p, r| {
        *p = (0.5 + (*p - r) * 0.5).clamp(0.0, 1.0);
    });
    Ok(out)
}

/// 6-channel pair window `I_t (+) I_{t-stride}`, indices clamped at the
/// sequence start so every frame can anchor a window.
pub fn make_pair_window(
    seq: &[TactileFrame],
    t: usize,
    stride: usize,
    fps: f64,
) -> Result<TactileWindow> {
    if t >= seq.len() {
        return Err(Error::IndexOutOfRange {
            index: t,
            len: seq.len(),
        });
    }
    let past = t.saturating_sub(stride);
    let cur = &seq[t].pixels;
    let prev = &seq[past].pixels;
    if cur.dim() != prev.dim() {
        return Err(Error::shape("frames in sequence differ in shape"));
    }
    let data = ndarray::concatenate(Axis(2), &[cur.view(), prev.view()])
        .map_err(|e| Error::shape(e.to_string()))?;
    Ok(TactileWindow {
        data: WindowData::Pair(data),
        anchor_index: t,
        span_ms: stride as f64 / fps * 1000.0,
    })
}

/// 4-frame clip window at offsets `[t, t-2, t-4, t-6]`, clamped at 0.
pub fn make_clip_window(seq: &[TactileFrame], t: usize, fps: f64) -> Result<TactileWindow> {
    if t >= seq.len() {
        return Err(Error::IndexOutOfRange {
            index: t,
            len: seq.len(),
        });
    }
    let (h, w, c) = seq[t].pixels.dim();
    let mut data = Array4::<f64>::zeros((4, h, w, c));
    for (slot, off) in [0usize, 2, 4, 6].iter().enumerate() {
        let idx = t.saturating_sub(*off);
        if seq[idx].pixels.dim() != (h, w, c) {
            return Err(Error::shape("frames in sequence differ in shape"));
        }
        data.index_axis_mut(Axis(0), slot).assign(&seq[idx].pixels);
    }
    Ok(TactileWindow {
        data: WindowData::Clip(data),
        anchor_index: t,
        span_ms: 6.0 / fps * 1000.0,
    })
}

/// Bilinear resize of every channel/frame to `side x side`.
pub fn resize_for_encoder(window: &TactileWindow, side: usize) -> Result<TactileWindow> {
    if side == 0 {
        return Err(Error::invalid("resize side must be positive"));
    }
    let data = match &window.data {
        WindowData::Pair(a) => {
            if a.dim().0 == side && a.dim().1 == side {
                WindowData::Pair(a.clone())
            } else {
                WindowData::Pair(resize_bilinear_raw(a, side, side))
            }
        }
        WindowData::Clip(a) => {
            let (t, h, w, c) = a.dim();
            if h == side && w == side {
                WindowData::Clip(a.clone())
            } else {
                let mut out = Array4::<f64>::zeros((t, side, side, c));
                for i in 0..t {
                    let frame = a.index_axis(Axis(0), i).to_owned();
                    out.index_axis_mut(Axis(0), i)
                        .assign(&resize_bilinear_raw(&frame, side, side));
                }
                WindowData::Clip(out)
            }
        }
    };
    Ok(TactileWindow {
        data,
        anchor_index: window.anchor_index,
        span_ms: window.span_ms,
    })
}
