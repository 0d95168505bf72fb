//! Task label types: 3-axis forces, friction-cone slip states, SE(2) pose
//! deltas with regression-by-classification bins, grasp outcomes, and
//! textile classes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of textile classes in the recognition task.
pub const N_TEXTILE_CLASSES: usize = 20;

/// Number of bins per pose degree of freedom.
pub const N_POSE_BINS: usize = 11;

/// 3-axis contact force in Newtons (or normalized units when `normalized`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForceLabel {
    pub fx: f64,
    pub fy: f64,
    pub fz: f64,
    pub normalized: bool,
}

impl ForceLabel {
    pub fn new(fx: f64, fy: f64, fz: f64) -> Self {
        ForceLabel {
            fx,
            fy,
            fz,
            normalized: false,
        }
    }

    /// Tangential (shear) magnitude.
    pub fn tangential(&self) -> f64 {
        (self.fx * self.fx + self.fy * self.fy).sqrt()
    }

    /// Normal magnitude.
    pub fn normal(&self) -> f64 {
        self.fz.abs()
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.fx, self.fy, self.fz]
    }
}

/// Componentwise `f / fmax`, clamped into [-1, 1]. Returns the normalized
/// label and whether any component had to be clamped.
pub fn normalize_force(f: &ForceLabel, fmax: [f64; 3]) -> Result<(ForceLabel, bool)> {
    if fmax.iter().any(|&m| m <= 0.0) {
        return Err(Error::invalid("fmax must be positive per axis"));
    }
    let raw = [f.fx / fmax[0], f.fy / fmax[1], f.fz / fmax[2]];
    let clamped = raw.iter().any(|v| v.abs() > 1.0);
    let c = |v: f64| v.clamp(-1.0, 1.0);
    Ok((
        ForceLabel {
            fx: c(raw[0]),
            fy: c(raw[1]),
            fz: c(raw[2]),
            normalized: true,
        },
        clamped,
    ))
}

/// Inverse of [`normalize_force`]: scale back to Newtons.
pub fn denormalize_force(f: &ForceLabel, fmax: [f64; 3]) -> ForceLabel {
    ForceLabel {
        fx: f.fx * fmax[0],
        fy: f.fy * fmax[1],
        fz: f.fz * fmax[2],
        normalized: false,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlipState {
    NoSlip,
    Slip,
}

/// Slip state plus the normalized force change across the inference window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlipLabel {
    pub state: SlipState,
    pub delta_force: [f64; 3],
}

/// Friction-cone slip labeling: slip iff the tangential force leaves the
/// cone `|F_t| <= mu * |F_n|`. Equality (the cone boundary) labels no-slip;
/// a degenerate cone (`fz == 0`) with any tangential load labels slip.
pub fn label_slip(force: &ForceLabel, mu: f64) -> SlipState {
    assert!(mu > 0.0, "friction coefficient must be positive");
    if force.tangential() > mu * force.normal() {
        SlipState::Slip
    } else {
        SlipState::NoSlip
    }
}

/// Least-squares fit of `|F_t| = mu * |F_n|` through the origin over
/// annotated slip-onset samples `(tangential, normal)`.
pub fn estimate_friction_coefficient(onsets: &[(f64, f64)]) -> Result<f64> {
    if onsets.is_empty() {
        return Err(Error::invalid(
            "friction estimation requires at least one slip-onset sample",
        ));
    }
    let num: f64 = onsets.iter().map(|(t, n)| t * n).sum();
    let den: f64 = onsets.iter().map(|(_, n)| n * n).sum();
    if den <= 0.0 {
        return Err(Error::invalid("onset samples have zero normal force"));
    }
    let mu = num / den;
    if mu <= 0.0 {
        return Err(Error::invalid("fitted friction coefficient not positive"));
    }
    Ok(mu)
}

/// Detect slip onsets in a force trajectory: the first sample of each
/// episode where the tangential force stops increasing after a sustained
/// rise while normal load is still applied.
pub fn detect_slip_onsets(traj: &[ForceLabel]) -> Vec<usize> {
    let mut onsets = Vec::new();
    let max_t = traj.iter().map(|f| f.tangential()).fold(0.0, f64::max);
    if max_t <= 0.0 {
        return onsets;
    }
    let floor = 0.1 * max_t;
    let mut rise_run = 0usize;
    for i in 1..traj.len() {
        let prev = traj[i - 1].tangential();
        let cur = traj[i].tangential();
        if cur > prev + 1e-12 {
            rise_run += 1;
        } else {
            if rise_run >= 3 && prev > floor && traj[i].normal() > 0.0 {
                onsets.push(i - 1);
            }
            rise_run = 0;
        }
    }
    onsets
}

/// SE(2) pose change of the object relative to the sensor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseDelta {
    pub dx_mm: f64,
    pub dy_mm: f64,
    pub dtheta_deg: f64,
}

/// Per-DOF class indices into the pose bins.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoseClass {
    pub dx: usize,
    pub dy: usize,
    pub dtheta: usize,
}

/// Bin construction parameters: symmetric log-uniform bins, a center bin
/// straddling zero, clamping at the per-DOF range limit.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BinningSpec {
    pub range_mm: f64,
    pub range_deg: f64,
    pub n_bins: usize,
    /// Innermost edge as a fraction of the range limit.
    pub inner_frac: f64,
}

impl Default for BinningSpec {
    fn default() -> Self {
        BinningSpec {
            range_mm: 5.0,
            range_deg: 2.0,
            n_bins: N_POSE_BINS,
            inner_frac: 0.02,
        }
    }
}

/// Edges for one degree of freedom: `n_bins + 1` strictly increasing values,
/// odd-symmetric about zero.
#[derive(Clone, Debug)]
pub struct DofBins {
    pub edges: Vec<f64>,
}

impl DofBins {
    fn build(limit: f64, n_bins: usize, inner_frac: f64) -> Result<Self> {
        if limit <= 0.0 || inner_frac <= 0.0 || inner_frac >= 1.0 {
            return Err(Error::invalid("binning spec out of range"));
        }
        if n_bins < 3 || n_bins % 2 == 0 {
            return Err(Error::invalid("n_bins must be odd and >= 3"));
        }
        let per_sign = (n_bins - 1) / 2;
        let e0 = inner_frac * limit;
        // geometric ladder e0 * r^k with r chosen so the top edge lands on the limit
        let r = (limit / e0).powf(1.0 / per_sign as f64);
        let mut pos = Vec::with_capacity(per_sign + 1);
        for k in 0..=per_sign {
            pos.push(e0 * r.powi(k as i32));
        }
        *pos.last_mut().unwrap() = limit;
        let mut edges = Vec::with_capacity(n_bins + 1);
        for p in pos.iter().rev() {
            edges.push(-p);
        }
        edges.extend(pos.iter());
        for w in edges.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::invalid("bin edges not strictly increasing"));
            }
        }
        Ok(DofBins { edges })
    }

    pub fn n_bins(&self) -> usize {
        self.edges.len() - 1
    }

    /// Class index for a value; values outside the range clamp to the
    /// extreme bins. Bin `i` covers `[edge_i, edge_{i+1})`, the last bin is
    /// closed above.
    pub fn classify(&self, v: f64) -> usize {
        let n = self.n_bins();
        let lo = self.edges[0];
        let hi = *self.edges.last().unwrap();
        if v <= lo {
            return 0;
        }
        if v >= hi {
            return n - 1;
        }
        match self
            .edges
            .binary_search_by(|e| e.partial_cmp(&v).unwrap())
        {
            Ok(i) => i.min(n - 1),
            Err(i) => i - 1,
        }
    }

    /// Representative value of a class: zero for the center bin, otherwise
    /// the signed geometric midpoint of the bin.
    pub fn representative(&self, class: usize) -> f64 {
        let n = self.n_bins();
        assert!(class < n);
        let center = n / 2;
        if class == center {
            return 0.0;
        }
        let (lo, hi) = (self.edges[class], self.edges[class + 1]);
        let sign = if lo >= 0.0 { 1.0 } else { -1.0 };
        sign * (lo.abs() * hi.abs()).sqrt()
    }
}

/// Bins for all three degrees of freedom.
#[derive(Clone, Debug)]
pub struct PoseBins {
    pub x: DofBins,
    pub y: DofBins,
    pub theta: DofBins,
}

pub fn make_pose_bins(spec: &BinningSpec) -> Result<PoseBins> {
    Ok(PoseBins {
        x: DofBins::build(spec.range_mm, spec.n_bins, spec.inner_frac)?,
        y: DofBins::build(spec.range_mm, spec.n_bins, spec.inner_frac)?,
        theta: DofBins::build(spec.range_deg, spec.n_bins, spec.inner_frac)?,
    })
}

pub fn pose_to_class(bins: &PoseBins, delta: &PoseDelta) -> PoseClass {
    PoseClass {
        dx: bins.x.classify(delta.dx_mm),
        dy: bins.y.classify(delta.dy_mm),
        dtheta: bins.theta.classify(delta.dtheta_deg),
    }
}

pub fn class_to_pose(bins: &PoseBins, class: &PoseClass) -> PoseDelta {
    PoseDelta {
        dx_mm: bins.x.representative(class.dx),
        dy_mm: bins.y.representative(class.dy),
        dtheta_deg: bins.theta.representative(class.dtheta),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GraspOutcome {
    Failure,
    Success,
}

impl GraspOutcome {
    pub fn as_index(&self) -> usize {
        match self {
            GraspOutcome::Failure => 0,
            GraspOutcome::Success => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            GraspOutcome::Failure
        } else {
            GraspOutcome::Success
        }
    }
}

/// Textile identity in `0..N_TEXTILE_CLASSES`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextileClass(pub u32);

impl TextileClass {
    pub fn index(&self) -> usize {
        self.0 as usize
    }
}
