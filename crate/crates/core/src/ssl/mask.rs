//! Masking samplers: uniform random (MAE), rectangular block targets
//! (I-JEPA), and spatial tubes replicated over time (V-JEPA).

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rectangular block on the token grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y0 + self.h && x >= self.x0 && x < self.x0 + self.w
    }

    pub fn token_indices(&self, gw: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.h * self.w);
        for y in self.y0..self.y0 + self.h {
            for x in self.x0..self.x0 + self.w {
                out.push(y * gw + x);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum MaskKind {
    Random { ratio: f64 },
    Block { blocks: Vec<Rect> },
    Tube { spatial_blocks: Vec<Rect>, gt: usize },
}

/// A partition of token indices into visible and masked sets.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub visible_idx: Vec<usize>,
    pub masked_idx: Vec<usize>,
    pub kind: MaskKind,
}

impl MaskSpec {
    fn from_masked(n_tokens: usize, masked: BTreeSet<usize>, kind: MaskKind) -> Result<Self> {
        if masked.is_empty() {
            return Err(Error::invalid("mask selects no tokens"));
        }
        if masked.len() >= n_tokens {
            return Err(Error::invalid("mask leaves no visible tokens"));
        }
        let visible: Vec<usize> = (0..n_tokens).filter(|i| !masked.contains(i)).collect();
        Ok(MaskSpec {
            visible_idx: visible,
            masked_idx: masked.into_iter().collect(),
            kind,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.visible_idx.len() + self.masked_idx.len()
    }

    /// Partition invariant: visible and masked are disjoint, sorted, and
    /// jointly cover `0..n`.
    pub fn check_partition(&self) -> Result<()> {
        let n = self.n_tokens();
        let mut seen = vec![false; n];
        for &i in self.visible_idx.iter().chain(self.masked_idx.iter()) {
            if i >= n || seen[i] {
                return Err(Error::invalid("mask is not a partition"));
            }
            seen[i] = true;
        }
        if self.visible_idx.windows(2).any(|w| w[0] >= w[1])
            || self.masked_idx.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::invalid("mask index sets not sorted"));
        }
        Ok(())
    }
}

/// Uniformly random mask of `floor(ratio * n)` tokens.
pub fn sample_random_mask(n_tokens: usize, ratio: f64, rng: &mut ChaCha8Rng) -> Result<MaskSpec> {
    if !(0.0..1.0).contains(&ratio) || ratio <= 0.0 {
        return Err(Error::invalid("mask ratio must be in (0, 1)"));
    }
    let n_masked = (ratio * n_tokens as f64).floor() as usize;
    if n_masked == 0 || n_masked >= n_tokens {
        return Err(Error::invalid(format!(
            "ratio {ratio} yields a degenerate mask for {n_tokens} tokens"
        )));
    }
    let mut idx: Vec<usize> = (0..n_tokens).collect();
    for i in 0..n_masked {
        let j = rng.random_range(i..n_tokens);
        idx.swap(i, j);
    }
    let masked: BTreeSet<usize> = idx[..n_masked].iter().copied().collect();
    MaskSpec::from_masked(n_tokens, masked, MaskKind::Random { ratio })
}

fn sample_rect(
    gh: usize,
    gw: usize,
    scale_range: (f64, f64),
    aspect_range: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Rect {
    let n = (gh * gw) as f64;
    let area = n * rng.random_range(scale_range.0..=scale_range.1);
    let aspect = rng.random_range(aspect_range.0..=aspect_range.1);
    let h = ((area * aspect).sqrt().round() as usize).clamp(1, gh);
    let w = ((area / aspect).sqrt().round() as usize).clamp(1, gw);
    let y0 = if gh > h { rng.random_range(0..=gh - h) } else { 0 };
    let x0 = if gw > w { rng.random_range(0..=gw - w) } else { 0 };
    Rect { y0, x0, h, w }
}

/// Union of `n_targets` rectangular blocks with areas in
/// `scale_range * n_tokens` and aspect ratios in `aspect_range`.
pub fn sample_block_mask(
    grid: (usize, usize),
    n_targets: usize,
    scale_range: (f64, f64),
    aspect_range: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Result<MaskSpec> {
    let (gh, gw) = grid;
    if gh == 0 || gw == 0 {
        return Err(Error::invalid("degenerate token grid"));
    }
    if n_targets == 0 {
        return Err(Error::invalid("need at least one target block"));
    }
    let mut blocks = Vec::with_capacity(n_targets);
    let mut masked = BTreeSet::new();
    for _ in 0..n_targets {
        let r = sample_rect(gh, gw, scale_range, aspect_range, rng);
        masked.extend(r.token_indices(gw));
        blocks.push(r);
    }
    MaskSpec::from_masked(gh * gw, masked, MaskKind::Block { blocks })
}

/// Spatial footprint for a tube mask: blocks are accumulated until the
/// covered fraction reaches `ratio`.
pub fn sample_tube_footprint(
    gh: usize,
    gw: usize,
    ratio: f64,
    aspect_range: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Result<(BTreeSet<usize>, Vec<Rect>)> {
    if gh == 0 || gw == 0 {
        return Err(Error::invalid("degenerate token grid"));
    }
    if !(0.0..1.0).contains(&ratio) || ratio <= 0.0 {
        return Err(Error::invalid("tube ratio must be in (0, 1)"));
    }
    let n_spatial = gh * gw;
    let want = ((ratio * n_spatial as f64).round() as usize).max(1);
    let mut covered = BTreeSet::new();
    let mut blocks = Vec::new();
    let mut guard = 0;
    while covered.len() < want && guard < 256 {
        let r = sample_rect(gh, gw, (0.08, 0.24), aspect_range, rng);
        covered.extend(r.token_indices(gw));
        blocks.push(r);
        guard += 1;
    }
    // never mask everything: drop cells back off the end if saturated
    while covered.len() >= n_spatial {
        let last = *covered.iter().next_back().unwrap();
        covered.remove(&last);
    }
    Ok((covered, blocks))
}

/// Spatial block mask replicated across all `gt` temporal slices.
pub fn sample_tube_mask(
    grid: (usize, usize, usize),
    ratio: f64,
    aspect_range: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Result<MaskSpec> {
    let (gt, gh, gw) = grid;
    if gt == 0 {
        return Err(Error::invalid("tube grid needs gt >= 1"));
    }
    let (footprint, blocks) = sample_tube_footprint(gh, gw, ratio, aspect_range, rng)?;
    let mut masked = BTreeSet::new();
    for t in 0..gt {
        for &s in &footprint {
            masked.insert(t * gh * gw + s);
        }
    }
    MaskSpec::from_masked(
        gt * gh * gw,
        masked,
        MaskKind::Tube {
            spatial_blocks: blocks,
            gt,
        },
    )
}
