//! Synthetic tactile corpus generator.
//!
//! Renders gel-deformation image sequences with a stick-slip contact model:
//! a textured object is dragged across the sensor while a spring-friction
//! anchor decides when the contact patch sticks or slides. Every frame gets
//! ground-truth force, slip (from the generator's own friction cone), pose
//! delta, grasp outcome, and textile labels, all deterministic per seed.
//!
//! The renderer composes a Gaussian-dome indentation with tri-directional
//! Lambertian-style shading, a shear-induced tilt of the dome, an optional
//! 8x8 marker grid displaced by the shear field, an object-anchored texture
//! per textile class, and additive Gaussian noise.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::rng_for;
use crate::tasks::labels::{label_slip, ForceLabel, PoseDelta, SlipState};

use super::io::{save_png, write_label_csv, LabelRow};
use super::manifest::{DatasetManifest, SequenceEntry, Split};
use super::types::{Indenter, SensorProfile, SensorType, TactileFrame};

/// Pixels per millimeter of gel surface.
const MM_TO_PX: f64 = 2.0;
/// Tangential spring constant, N per mm of gel stretch.
const K_SPRING: f64 = 1.5;
/// Grasp succeeds when the peak normal force exceeds this threshold; the
/// generator samples peaks away from it so the labels carry a wide margin.
const GRASP_THRESHOLD_N: f64 = 2.5;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_sequences: usize,
    pub frames_per_sequence: usize,
    pub indenter: Indenter,
    /// Gel compliance in arbitrary units; scales the contact radius.
    pub gel_stiffness: f64,
    pub friction_mu: f64,
    /// Additive pixel noise standard deviation.
    pub noise_sigma: f64,
    pub seed: u64,
    #[serde(default = "default_resolution")]
    pub resolution: (usize, usize),
    #[serde(default = "default_fps")]
    pub fps: f64,
    #[serde(default = "default_sensor_type")]
    pub sensor_type: SensorType,
    #[serde(default)]
    pub marker_grid: bool,
    /// Temporal stride used for the stored pose-delta labels.
    #[serde(default = "default_pair_stride")]
    pub pair_stride: usize,
}

fn default_resolution() -> (usize, usize) {
    (64, 64)
}
fn default_fps() -> f64 {
    60.0
}
fn default_sensor_type() -> SensorType {
    SensorType::Digit
}
fn default_pair_stride() -> usize {
    5
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_sequences: 8,
            frames_per_sequence: 64,
            indenter: Indenter::Sharp,
            gel_stiffness: 1.0,
            friction_mu: 0.8,
            noise_sigma: 0.01,
            seed: 0,
            resolution: default_resolution(),
            fps: default_fps(),
            sensor_type: default_sensor_type(),
            marker_grid: false,
            pair_stride: default_pair_stride(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sequences == 0 || self.frames_per_sequence == 0 {
            return Err(Error::invalid("sequence counts must be positive"));
        }
        if self.gel_stiffness <= 0.0 {
            return Err(Error::invalid("gel_stiffness must be positive"));
        }
        if self.friction_mu <= 0.0 {
            return Err(Error::invalid("friction_mu must be positive"));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::invalid("noise_sigma must be nonnegative"));
        }
        if self.fps <= 0.0 {
            return Err(Error::invalid("fps must be positive"));
        }
        Ok(())
    }

    pub fn sensor_profile(&self) -> SensorProfile {
        SensorProfile {
            sensor_type: self.sensor_type,
            native_resolution: self.resolution,
            fps: self.fps,
            has_markers: self.marker_grid,
            background_path: None,
            background_reference: None,
        }
    }
}

/// An in-memory corpus: raw (not background-subtracted) frame sequences with
/// per-frame labels.
pub struct SynthCorpus {
    pub sequences: Vec<(Vec<TactileFrame>, Vec<LabelRow>)>,
    pub profile: SensorProfile,
}

/// One motion phase of the commanded drag plan.
struct Phase {
    frames: usize,
    /// mm per frame
    v: f64,
    /// drag direction, radians
    psi: f64,
    /// deg per frame
    omega: f64,
}

struct Trajectory {
    fn_peak: f64,
    grasp_success: bool,
    textile_id: u32,
    phases: Vec<Phase>,
    press_frames: usize,
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

fn plan_trajectory(cfg: &SynthConfig, seq_idx: usize) -> Trajectory {
    let mut rng = rng_for(cfg.seed, "synth-plan", seq_idx as u64);
    let grasp_success = rng.random_bool(0.5);
    // peaks sampled away from the threshold so grasp labels carry a margin
    let fn_peak = if grasp_success {
        rng.random_range(GRASP_THRESHOLD_N + 0.5..GRASP_THRESHOLD_N + 2.0)
    } else {
        rng.random_range(GRASP_THRESHOLD_N - 1.5..GRASP_THRESHOLD_N - 0.5)
    };
    let textile_id = (seq_idx % 20) as u32;
    let press_frames = (cfg.frames_per_sequence / 8).clamp(4, 12);
    let slip_seq = seq_idx % 2 == 1;

    let mut phases = Vec::new();
    let mut budget = cfg.frames_per_sequence.saturating_sub(press_frames + 1);
    // initial settle
    let settle = 2.min(budget);
    phases.push(Phase {
        frames: settle,
        v: 0.0,
        psi: 0.0,
        omega: 0.0,
    });
    budget -= settle;
    while budget > 0 {
        let drag_frames = rng.random_range(8..=18).min(budget);
        let v = if slip_seq {
            // long fast drags cross the friction cone and slide
            log_uniform(&mut rng, 0.25, 0.9)
        } else {
            log_uniform(&mut rng, 0.02, 0.12)
        };
        let psi = rng.random_range(0.0..std::f64::consts::TAU);
        let omega = {
            let mag = log_uniform(&mut rng, 0.004, 0.35);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        };
        phases.push(Phase {
            frames: drag_frames,
            v,
            psi,
            omega,
        });
        budget -= drag_frames;
        if budget == 0 {
            break;
        }
        let hold = rng.random_range(3..=6).min(budget);
        phases.push(Phase {
            frames: hold,
            v: 0.0,
            psi: 0.0,
            omega: 0.0,
        });
        budget -= hold;
    }
    Trajectory {
        fn_peak,
        grasp_success,
        textile_id,
        phases,
        press_frames,
    }
}

/// Per-frame simulated contact state.
struct ContactState {
    /// object position, mm
    p_obj: [f64; 2],
    /// object orientation, deg
    theta: f64,
    /// contact anchor (gel stick point), mm
    anchor: [f64; 2],
    fn_now: f64,
    ft_vec: [f64; 2],
    slipping: bool,
}

fn smoothstep(x: f64) -> f64 {
    let t = x.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Render one full sequence: raw frames (index 0 is contact-free) plus
/// per-frame labels.
pub fn render_sequence(
    cfg: &SynthConfig,
    seq_idx: usize,
) -> Result<(Vec<TactileFrame>, Vec<LabelRow>)> {
    cfg.validate()?;
    let traj = plan_trajectory(cfg, seq_idx);
    let mut noise_rng = rng_for(cfg.seed, "synth-noise", seq_idx as u64);
    let (h, w) = cfg.resolution;
    let center = [w as f64 / 2.0 / MM_TO_PX, h as f64 / 2.0 / MM_TO_PX];
    let sequence_id = format!("seq_{seq_idx:04}");
    let sensor_id = format!("{:?}", cfg.sensor_type).to_lowercase();
    let period_us = (1e6 / cfg.fps) as i64;

    let mut state = ContactState {
        p_obj: center,
        theta: 0.0,
        anchor: center,
        fn_now: 0.0,
        ft_vec: [0.0, 0.0],
        slipping: false,
    };

    // expanded per-frame plan
    let mut plan: Vec<(f64, f64, f64)> = Vec::new(); // (v, psi, omega)
    for ph in &traj.phases {
        for _ in 0..ph.frames {
            plan.push((ph.v, ph.psi, ph.omega));
        }
    }

    let mut frames = Vec::with_capacity(cfg.frames_per_sequence);
    let mut labels: Vec<LabelRow> = Vec::new();
    let mut poses: Vec<([f64; 2], f64)> = Vec::new();
    let half_extent = (w.min(h) as f64 / MM_TO_PX) * 0.30;

    for t in 0..cfg.frames_per_sequence {
        // normal force: zero on frame 0, smooth ramp, then mild wobble
        state.fn_now = if t == 0 {
            0.0
        } else if t <= traj.press_frames {
            traj.fn_peak * smoothstep(t as f64 / traj.press_frames as f64)
        } else {
            traj.fn_peak * (1.0 + 0.04 * ((t as f64) * 0.37).sin())
        };

        // commanded drag (only after the press phase)
        if t > traj.press_frames {
            let step = t - traj.press_frames - 1;
            if let Some(&(v, psi, omega)) = plan.get(step) {
                // steer back toward the sensor center when near the edge
                let off = [
                    state.p_obj[0] - center[0],
                    state.p_obj[1] - center[1],
                ];
                let dist = (off[0] * off[0] + off[1] * off[1]).sqrt();
                let (dx, dy) = if dist > half_extent {
                    let inward = (-off[1]).atan2(-off[0]);
                    (v * inward.cos(), v * inward.sin())
                } else {
                    (v * psi.cos(), v * psi.sin())
                };
                state.p_obj[0] += dx;
                state.p_obj[1] += dy;
                state.theta += omega;
            }
        }

        // spring-friction contact model
        let stretch = [
            state.p_obj[0] - state.anchor[0],
            state.p_obj[1] - state.anchor[1],
        ];
        let stretch_mag = (stretch[0] * stretch[0] + stretch[1] * stretch[1]).sqrt();
        let ft_stick = K_SPRING * stretch_mag;
        let cone = cfg.friction_mu * state.fn_now;
        if ft_stick > cone && stretch_mag > 1e-12 {
            // kinetic slip: anchor catches up to the cone, stored tangential
            // force carries a velocity-dependent overshoot
            state.slipping = true;
            let dir = [stretch[0] / stretch_mag, stretch[1] / stretch_mag];
            let target_stretch = cone / K_SPRING;
            let slip_dist = stretch_mag - target_stretch;
            state.anchor[0] += dir[0] * slip_dist;
            state.anchor[1] += dir[1] * slip_dist;
            let overshoot = 1.10 + 0.25 * (slip_dist / 0.5).min(1.0);
            let ft_mag = cone * overshoot;
            state.ft_vec = [dir[0] * ft_mag, dir[1] * ft_mag];
        } else {
            state.slipping = false;
            state.ft_vec = [K_SPRING * stretch[0], K_SPRING * stretch[1]];
        }

        let force = ForceLabel::new(state.ft_vec[0], state.ft_vec[1], state.fn_now);
        let slip = label_slip(&force, cfg.friction_mu);
        debug_assert_eq!(
            slip == SlipState::Slip,
            state.slipping && state.fn_now > 0.0 || (state.fn_now == 0.0 && force.tangential() > 0.0)
        );

        poses.push((state.p_obj, state.theta));
        let past = t.saturating_sub(cfg.pair_stride);
        let pose_delta = PoseDelta {
            dx_mm: poses[t].0[0] - poses[past].0[0],
            dy_mm: poses[t].0[1] - poses[past].0[1],
            dtheta_deg: poses[t].1 - poses[past].1,
        };

        let gel_disp_mm = {
            let capped = stretch_mag.min(cone / K_SPRING.max(1e-9));
            if stretch_mag > 1e-12 {
                [
                    stretch[0] / stretch_mag * capped,
                    stretch[1] / stretch_mag * capped,
                ]
            } else {
                [0.0, 0.0]
            }
        };

        let pixels = render_frame(cfg, seq_idx, &state, traj.textile_id, gel_disp_mm, &mut noise_rng);
        frames.push(TactileFrame::new(
            pixels,
            t as i64 * period_us,
            sensor_id.clone(),
            sequence_id.clone(),
            t,
        )?);
        labels.push(LabelRow {
            timestamp_us: t as i64 * period_us,
            force,
            slip: Some((slip, cfg.friction_mu)),
            pose: Some(pose_delta),
            grasp_success: Some(traj.grasp_success),
            textile_id: Some(traj.textile_id),
        });
    }
    Ok((frames, labels))
}

/// Texture parameters for one textile class: wavelengths in px, angle, and
/// a waveform sharpening exponent.
fn textile_params(class: u32) -> (f64, f64, f64, f64) {
    let c = class as f64;
    let lambda1 = 6.0 + 1.1 * (class % 5) as f64;
    let lambda2 = 9.0 + 1.7 * (class % 7) as f64;
    let angle = std::f64::consts::PI * c / 20.0;
    let sharpness = 1.0 + (class % 4) as f64;
    (lambda1, lambda2, angle, sharpness)
}

fn render_frame(
    cfg: &SynthConfig,
    seq_idx: usize,
    state: &ContactState,
    textile_id: u32,
    gel_disp_mm: [f64; 2],
    noise_rng: &mut ChaCha8Rng,
) -> Array3<f64> {
    let (h, w) = cfg.resolution;
    let mut img = Array3::<f64>::zeros((h, w, 3));

    // contact geometry in px
    let cx = state.p_obj[0] * MM_TO_PX;
    let cy = state.p_obj[1] * MM_TO_PX;
    let sigma0 = (3.5 + 2.2 * (state.fn_now / cfg.gel_stiffness).max(0.0).sqrt()) * MM_TO_PX / 2.0;
    let (sx, sy, super_g) = match cfg.indenter {
        Indenter::Sphere => (sigma0, sigma0, 1.0),
        Indenter::Flat => (1.5 * sigma0, 1.5 * sigma0, 3.0),
        Indenter::Sharp => (1.7 * sigma0, 0.65 * sigma0, 1.0),
    };
    let amp = (0.22 + 0.17 * state.fn_now).min(0.95);
    let theta_rad = state.theta.to_radians();
    let (ct, st) = (theta_rad.cos(), theta_rad.sin());
    let (l1, l2, tex_angle, sharp) = textile_params(textile_id);
    let (ta_c, ta_s) = ((tex_angle + theta_rad).cos(), (tex_angle + theta_rad).sin());

    // per-sensor static baseline (what background subtraction removes)
    let base_seed = crate::nn::derive_seed(cfg.seed, "synth-baseline", 0);
    let bphase = (base_seed % 628) as f64 / 100.0;

    // shear tilt inside the contact: normalized tangential load
    let tilt_scale = 0.10;
    let ftn = if state.fn_now > 1e-9 {
        [
            state.ft_vec[0] / (cfg.friction_mu * state.fn_now).max(1e-9),
            state.ft_vec[1] / (cfg.friction_mu * state.fn_now).max(1e-9),
        ]
    } else {
        [0.0, 0.0]
    };

    let height_at = |xf: f64, yf: f64| -> f64 {
        let dx = xf - cx;
        let dy = yf - cy;
        let qx = ct * dx + st * dy;
        let qy = -st * dx + ct * dy;
        let r2 = (qx * qx) / (2.0 * sx * sx) + (qy * qy) / (2.0 * sy * sy);
        amp * (-r2.powf(super_g)).exp()
    };

    for y in 0..h {
        for x in 0..w {
            let xf = x as f64;
            let yf = y as f64;
            let hc = height_at(xf, yf);
            // finite-difference surface gradient for shading
            let gx = (height_at(xf + 1.0, yf) - height_at(xf - 1.0, yf)) / 2.0;
            let gy = (height_at(xf, yf + 1.0) - height_at(xf, yf - 1.0)) / 2.0;
            let mask = (hc / amp.max(1e-9)).clamp(0.0, 1.0);

            // object-anchored texture (moves and rotates with the object)
            let ox = xf - cx;
            let oy = yf - cy;
            let u = ta_c * ox + ta_s * oy;
            let v = -ta_s * ox + ta_c * oy;
            let w1 = (std::f64::consts::TAU * u / l1).sin();
            let w2 = (std::f64::consts::TAU * v / l2).sin();
            let tex = 0.10 * w1.signum() * w1.abs().powf(sharp) + 0.07 * w2;
            let tex_vis = tex * (0.05 + 0.90 * mask);

            // shear tilt: planar shading offset inside the contact patch
            let tilt = tilt_scale * mask * (ftn[0] * (ox / (sx.max(1e-9))) + ftn[1] * (oy / (sy.max(1e-9))));

            // static sensor baseline
            let bx = 0.45
                + 0.05 * ((xf / w as f64) * 2.1 + bphase).sin()
                + 0.04 * ((yf / h as f64) * 1.7 - bphase).cos();

            // tri-directional Lambertian-style shading: each channel lit
            // from a different direction
            const LIGHTS: [(f64, f64); 3] = [
                (1.0, 0.0),
                (-0.5, 0.866_025_403_784_438_6),
                (-0.5, -0.866_025_403_784_438_6),
            ];
            for (c, (lx, ly)) in LIGHTS.iter().enumerate() {
                let shade = 2.2 * (gx * lx + gy * ly);
                let v = bx + 0.35 * hc + shade + tex_vis + tilt;
                img[[y, x, c]] = v;
            }
        }
    }

    // marker dot grid displaced by the gel shear field
    if cfg.marker_grid {
        let disp_px = [gel_disp_mm[0] * MM_TO_PX, gel_disp_mm[1] * MM_TO_PX];
        let two_sigma2 = 2.0 * (2.0 * sx).powi(2);
        for my in 0..8 {
            for mx in 0..8 {
                let gx0 = (mx as f64 + 0.5) * w as f64 / 8.0;
                let gy0 = (my as f64 + 0.5) * h as f64 / 8.0;
                let d2 = (gx0 - cx).powi(2) + (gy0 - cy).powi(2);
                let falloff = (-d2 / two_sigma2).exp();
                let px = gx0 + disp_px[0] * falloff;
                let py = gy0 + disp_px[1] * falloff;
                stamp_dot(&mut img, px, py, 1.5, -0.25);
            }
        }
    }

    // additive noise, then clamp
    if cfg.noise_sigma > 0.0 {
        for v in img.iter_mut() {
            *v += cfg.noise_sigma * crate::nn::normal(noise_rng);
        }
    }
    let _ = seq_idx;
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    img
}

fn stamp_dot(img: &mut Array3<f64>, px: f64, py: f64, radius: f64, delta: f64) {
    let (h, w, _) = img.dim();
    let r = radius.ceil() as isize + 1;
    let x0 = px.round() as isize;
    let y0 = py.round() as isize;
    for dy in -r..=r {
        for dx in -r..=r {
            let x = x0 + dx;
            let y = y0 + dy;
            if x < 0 || y < 0 || x as usize >= w || y as usize >= h {
                continue;
            }
            let d2 = ((x as f64 - px).powi(2) + (y as f64 - py).powi(2)) / (radius * radius);
            let k = (-d2).exp();
            for c in 0..3 {
                img[[y as usize, x as usize, c]] += delta * k;
            }
        }
    }
}

/// Generate a corpus in memory (raw frames; apply background subtraction at
/// window assembly).
pub fn synth_generate_in_memory(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut sequences = Vec::with_capacity(cfg.n_sequences);
    for s in 0..cfg.n_sequences {
        sequences.push(render_sequence(cfg, s)?);
    }
    Ok(SynthCorpus {
        sequences,
        profile: cfg.sensor_profile(),
    })
}

/// Generate a corpus on disk: PNG frames, per-sequence label CSVs, and a
/// `manifest.json` at the root. Returns the manifest and all labels.
pub fn synth_generate(cfg: &SynthConfig, out_dir: &Path) -> Result<(DatasetManifest, Vec<Vec<LabelRow>>)> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let sensor_id = format!("{:?}", cfg.sensor_type).to_lowercase();
    let mut entries = Vec::with_capacity(cfg.n_sequences);
    let mut all_labels = Vec::with_capacity(cfg.n_sequences);
    for s in 0..cfg.n_sequences {
        let (frames, labels) = render_sequence(cfg, s)?;
        let seq_dir_rel = format!("sequences/seq_{s:04}");
        let seq_dir = out_dir.join(&seq_dir_rel);
        std::fs::create_dir_all(&seq_dir)?;
        for f in &frames {
            save_png(
                &seq_dir.join(format!("frame_{:06}.png", f.frame_index)),
                &f.pixels,
            )?;
        }
        let label_rel = format!("{seq_dir_rel}/labels.csv");
        write_label_csv(&out_dir.join(&label_rel), &labels)?;
        entries.push(SequenceEntry {
            sequence_id: format!("seq_{s:04}"),
            sensor_id: sensor_id.clone(),
            frame_glob: format!("{seq_dir_rel}/frame_*.png"),
            label_files: vec![label_rel],
            no_contact_frame: Some(0),
        });
        all_labels.push(labels);
    }
    let mut profiles = BTreeMap::new();
    profiles.insert(sensor_id, cfg.sensor_profile());
    let manifest = DatasetManifest {
        root_path: out_dir.to_path_buf(),
        sequences: entries,
        sensor_profiles: profiles,
        split: Split::Train,
        selected_windows: None,
    };
    let mut stored = manifest.clone();
    stored.root_path = ".".into();
    stored.save(&out_dir.join("manifest.json"))?;
    Ok((manifest, all_labels))
}
