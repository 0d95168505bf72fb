//! Dense decoder: reassembles intermediate token grids from four encoder
//! depths, fuses them, and progressively upsamples to full input resolution.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tid};
use crate::error::{Error, Result};
use crate::nn::{init_normal, zeros, Bound, ParamSet};

use super::patch::Grid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DptConfig {
    /// Encoder embedding width feeding each level.
    pub embed_dim: usize,
    /// Fusion width.
    pub fusion_dim: usize,
    /// Output channels of the task head.
    pub out_channels: usize,
    /// Disable activations so the decoder is purely linear (test/probing
    /// configurations).
    pub linear_head: bool,
}

impl DptConfig {
    pub fn new(embed_dim: usize, fusion_dim: usize, out_channels: usize) -> Self {
        DptConfig {
            embed_dim,
            fusion_dim,
            out_channels,
            linear_head: false,
        }
    }

    fn head_hidden(&self) -> usize {
        (self.fusion_dim / 2).max(4)
    }
}

/// Parameter names: `level{l}/proj/{w,b}`, `fuse{l}/{w,b}` for l in 0..3,
/// `up{i}/{w,b}` for i in 0..2, `head/{w1,b1,w2,b2}`.
pub fn init_dpt_params(cfg: &DptConfig, rng: &mut ChaCha8Rng) -> ParamSet {
    let d = cfg.embed_dim;
    let f = cfg.fusion_dim;
    let std = 0.05;
    let mut ps = ParamSet::new();
    for l in 0..4 {
        ps.insert(format!("level{l}/proj/w"), init_normal(&[d, f], std, rng));
        ps.insert(format!("level{l}/proj/b"), zeros(&[f]));
    }
    for l in 0..3 {
        ps.insert(format!("fuse{l}/w"), init_normal(&[f, f], std, rng));
        ps.insert(format!("fuse{l}/b"), zeros(&[f]));
    }
    for i in 0..2 {
        ps.insert(format!("up{i}/w"), init_normal(&[f, f], std, rng));
        ps.insert(format!("up{i}/b"), zeros(&[f]));
    }
    let h = cfg.head_hidden();
    ps.insert("head/w1", init_normal(&[f, h], std, rng));
    ps.insert("head/b1", zeros(&[h]));
    ps.insert("head/w2", init_normal(&[h, cfg.out_channels], std, rng));
    ps.insert("head/b2", zeros(&[cfg.out_channels]));
    ps
}

/// Decode four tapped feature levels (each `n x d` on the tape, shallow to
/// deep) into a dense `target_h x target_w x out_channels` map.
pub fn dpt_decode_tape(
    tape: &mut Tape,
    features: &[Tid],
    grid: &Grid,
    target: (usize, usize),
    cfg: &DptConfig,
    bound: &Bound,
    prefix: &str,
) -> Result<Tid> {
    if features.len() != 4 {
        return Err(Error::invalid(format!(
            "dpt expects 4 feature levels, got {}",
            features.len()
        )));
    }
    let (gh, gw) = grid.spatial();
    let n_spatial = gh * gw;
    let f = cfg.fusion_dim;
    let act = |tape: &mut Tape, x: Tid| -> Tid {
        if cfg.linear_head {
            x
        } else {
            tape.relu(x)
        }
    };

    // project each level to the fusion width (clip grids average pooled
    // over time by taking the anchor tube's spatial rows)
    let mut maps = Vec::with_capacity(4);
    for (l, &feat) in features.iter().enumerate() {
        let rows = tape.shape(feat)[0];
        let spatial = if rows == n_spatial {
            feat
        } else if rows % n_spatial == 0 {
            // anchor tube rows come first in the clip token ordering
            tape.slice_rows(feat, 0, n_spatial)
        } else {
            return Err(Error::shape(format!(
                "feature rows {rows} incompatible with grid {gh}x{gw}"
            )));
        };
        let w = bound.id(&format!("{prefix}level{l}/proj/w"));
        let b = bound.id(&format!("{prefix}level{l}/proj/b"));
        let m = tape.matmul(spatial, w);
        let m = tape.add_bias(m, b);
        maps.push(m);
    }

    // fuse deep-to-shallow with residual linear units
    let mut h = maps[3];
    for l in (0..3).rev() {
        let w = bound.id(&format!("{prefix}fuse{l}/w"));
        let b = bound.id(&format!("{prefix}fuse{l}/b"));
        let t = tape.matmul(h, w);
        let t = tape.add_bias(t, b);
        let s = tape.add(t, maps[l]);
        h = act(tape, s);
    }

    // progressive upsampling: grid -> 2x -> 4x -> full resolution
    let mut cur = tape.reshape(h, &[gh, gw, f]);
    let (mut ch, mut cw) = (gh, gw);
    for i in 0..2 {
        let (nh, nw) = ((ch * 2).min(target.0), (cw * 2).min(target.1));
        cur = tape.resize_bilinear(cur, nh, nw);
        let flat = tape.reshape(cur, &[nh * nw, f]);
        let w = bound.id(&format!("{prefix}up{i}/w"));
        let b = bound.id(&format!("{prefix}up{i}/b"));
        let t = tape.matmul(flat, w);
        let t = tape.add_bias(t, b);
        let t = act(tape, t);
        cur = tape.reshape(t, &[nh, nw, f]);
        (ch, cw) = (nh, nw);
    }
    cur = tape.resize_bilinear(cur, target.0, target.1);

    // task head
    let flat = tape.reshape(cur, &[target.0 * target.1, f]);
    let w1 = bound.id(&format!("{prefix}head/w1"));
    let b1 = bound.id(&format!("{prefix}head/b1"));
    let w2 = bound.id(&format!("{prefix}head/w2"));
    let b2 = bound.id(&format!("{prefix}head/b2"));
    let t = tape.matmul(flat, w1);
    let t = tape.add_bias(t, b1);
    let t = act(tape, t);
    let t = tape.matmul(t, w2);
    let t = tape.add_bias(t, b2);
    Ok(tape.reshape(t, &[target.0, target.1, cfg.out_channels]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::rng_for;
    use ndarray::Array2;
    use rand::Rng;

    fn setup(
        linear: bool,
        zero_bias: bool,
        features: &[Array2<f64>],
    ) -> (Tape, Tid, DptConfig, ParamSet) {
        let cfg = DptConfig {
            embed_dim: 16,
            fusion_dim: 8,
            out_channels: 2,
            linear_head: linear,
        };
        let mut rng = rng_for(7, "dpt", 0);
        let mut params = init_dpt_params(&cfg, &mut rng);
        if zero_bias {
            let names: Vec<String> = params
                .names()
                .filter(|n| n.ends_with("/b") || n.ends_with("b1") || n.ends_with("b2"))
                .cloned()
                .collect();
            for n in names {
                params.get_mut(&n).unwrap().fill(0.0);
            }
        }
        let mut tape = Tape::new();
        let ids: Vec<Tid> = features
            .iter()
            .map(|a| tape.constant(a.clone().into_dyn()))
            .collect();
        let bound = Bound::bind(&mut tape, &params);
        let out = dpt_decode_tape(
            &mut tape,
            &ids,
            &Grid::Image { gh: 4, gw: 4 },
            (28, 28),
            &cfg,
            &bound,
            "",
        )
        .unwrap();
        (tape, out, cfg, params)
    }

    fn rand_features(seed: u64) -> Vec<Array2<f64>> {
        let mut rng = rng_for(seed, "dpt-f", 0);
        (0..4)
            .map(|_| Array2::from_shape_fn((16, 16), |_| rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn output_matches_target_resolution() {
        let (tape, out, _, _) = setup(false, false, &rand_features(0));
        assert_eq!(tape.shape(out), &[28, 28, 2]);
        assert!(tape.val(out).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_features_zero_bias_give_zero_map() {
        let zeroes: Vec<Array2<f64>> = (0..4).map(|_| Array2::zeros((16, 16))).collect();
        let (tape, out, _, _) = setup(false, true, &zeroes);
        assert!(tape.val(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_config_is_homogeneous() {
        let feats = rand_features(1);
        let (tape_a, out_a, _, _) = setup(true, true, &feats);
        let doubled: Vec<Array2<f64>> = feats.iter().map(|f| f * 2.0).collect();
        let (tape_b, out_b, _, _) = setup(true, true, &doubled);
        for (a, b) in tape_a.val(out_a).iter().zip(tape_b.val(out_b).iter()) {
            assert!((2.0 * a - b).abs() < 1e-9, "{a} doubled != {b}");
        }
    }

    #[test]
    fn wrong_level_count_errors() {
        let cfg = DptConfig::new(16, 8, 1);
        let mut rng = rng_for(8, "dpt", 0);
        let params = init_dpt_params(&cfg, &mut rng);
        let mut tape = Tape::new();
        let f = tape.constant(Array2::<f64>::zeros((16, 16)).into_dyn());
        let bound = Bound::bind(&mut tape, &params);
        let r = dpt_decode_tape(
            &mut tape,
            &[f, f],
            &Grid::Image { gh: 4, gw: 4 },
            (28, 28),
            &cfg,
            &bound,
            "",
        );
        assert!(r.is_err());
    }
}
