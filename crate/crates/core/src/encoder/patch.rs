//! Patchification of tactile windows into flat token vectors and back.

use ndarray::{Array2, Array3, Array4};

use crate::data::{TactileWindow, WindowData};
use crate::error::{Error, Result};

use super::config::{EncoderConfig, EncoderMode, TUBELET_FRAMES};

/// Token grid geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grid {
    Image { gh: usize, gw: usize },
    Clip { gt: usize, gh: usize, gw: usize },
}

impl Grid {
    pub fn n_tokens(&self) -> usize {
        match self {
            Grid::Image { gh, gw } => gh * gw,
            Grid::Clip { gt, gh, gw } => gt * gh * gw,
        }
    }

    pub fn spatial(&self) -> (usize, usize) {
        match self {
            Grid::Image { gh, gw } => (*gh, *gw),
            Grid::Clip { gh, gw, .. } => (*gh, *gw),
        }
    }
}

/// Flattened patches: one row per token, channels-last `(py, px, c)` order
/// within a patch (tubelets prepend the frame index: `(f, py, px, c)`).
#[derive(Clone, Debug)]
pub struct PatchGrid {
    pub patches: Array2<f64>,
    pub grid: Grid,
    pub patch_size: usize,
}

pub fn patchify(window: &TactileWindow, cfg: &EncoderConfig) -> Result<PatchGrid> {
    let p = cfg.patch_size;
    match (&window.data, cfg.mode) {
        (WindowData::Pair(img), EncoderMode::Image6) => {
            let (h, w, c) = img.dim();
            if c != 6 {
                return Err(Error::shape(format!("pair window must have 6 channels, got {c}")));
            }
            if h % p != 0 || w % p != 0 {
                return Err(Error::shape(format!(
                    "window {h}x{w} not divisible by patch size {p}"
                )));
            }
            let (gh, gw) = (h / p, w / p);
            let mut out = Array2::<f64>::zeros((gh * gw, p * p * c));
            for gy in 0..gh {
                for gx in 0..gw {
                    let row = gy * gw + gx;
                    let mut k = 0;
                    for py in 0..p {
                        for px in 0..p {
                            for ch in 0..c {
                                out[[row, k]] = img[[gy * p + py, gx * p + px, ch]];
                                k += 1;
                            }
                        }
                    }
                }
            }
            Ok(PatchGrid {
                patches: out,
                grid: Grid::Image { gh, gw },
                patch_size: p,
            })
        }
        (WindowData::Clip(clip), EncoderMode::Clip) => {
            let (t, h, w, c) = clip.dim();
            if t % TUBELET_FRAMES != 0 {
                return Err(Error::shape(format!(
                    "clip frames {t} not divisible by tubelet {TUBELET_FRAMES}"
                )));
            }
            if h % p != 0 || w % p != 0 {
                return Err(Error::shape(format!(
                    "window {h}x{w} not divisible by patch size {p}"
                )));
            }
            let (gt, gh, gw) = (t / TUBELET_FRAMES, h / p, w / p);
            let mut out = Array2::<f64>::zeros((gt * gh * gw, TUBELET_FRAMES * p * p * c));
            for tt in 0..gt {
                for gy in 0..gh {
                    for gx in 0..gw {
                        let row = tt * gh * gw + gy * gw + gx;
                        let mut k = 0;
                        for f in 0..TUBELET_FRAMES {
                            for py in 0..p {
                                for px in 0..p {
                                    for ch in 0..c {
                                        out[[row, k]] = clip[[
                                            tt * TUBELET_FRAMES + f,
                                            gy * p + py,
                                            gx * p + px,
                                            ch,
                                        ]];
                                        k += 1;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Ok(PatchGrid {
                patches: out,
                grid: Grid::Clip { gt, gh, gw },
                patch_size: p,
            })
        }
        (WindowData::Pair(_), EncoderMode::Clip) | (WindowData::Clip(_), EncoderMode::Image6) => {
            Err(Error::invalid("window kind does not match encoder mode"))
        }
    }
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(grid: &PatchGrid) -> Result<WindowData> {
    let p = grid.patch_size;
    match grid.grid {
        Grid::Image { gh, gw } => {
            let c = grid.patches.ncols() / (p * p);
            if c * p * p != grid.patches.ncols() {
                return Err(Error::shape("patch length not divisible by patch area"));
            }
            let mut img = Array3::<f64>::zeros((gh * p, gw * p, c));
            for gy in 0..gh {
                for gx in 0..gw {
                    let row = gy * gw + gx;
                    let mut k = 0;
                    for py in 0..p {
                        for px in 0..p {
                            for ch in 0..c {
                                img[[gy * p + py, gx * p + px, ch]] = grid.patches[[row, k]];
                                k += 1;
                            }
                        }
                    }
                }
            }
            Ok(WindowData::Pair(img))
        }
        Grid::Clip { gt, gh, gw } => {
            let c = grid.patches.ncols() / (TUBELET_FRAMES * p * p);
            if c * TUBELET_FRAMES * p * p != grid.patches.ncols() {
                return Err(Error::shape("patch length not divisible by tubelet volume"));
            }
            let mut clip = Array4::<f64>::zeros((gt * TUBELET_FRAMES, gh * p, gw * p, c));
            for tt in 0..gt {
                for gy in 0..gh {
                    for gx in 0..gw {
                        let row = tt * gh * gw + gy * gw + gx;
                        let mut k = 0;
                        for f in 0..TUBELET_FRAMES {
                            for py in 0..p {
                                for px in 0..p {
                                    for ch in 0..c {
                                        clip[[
                                            tt * TUBELET_FRAMES + f,
                                            gy * p + py,
                                            gx * p + px,
                                            ch,
                                        ]] = grid.patches[[row, k]];
                                        k += 1;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Ok(WindowData::Clip(clip))
        }
    }
}
