//! The ViT backbone: fixed sin-cos positional embeddings, pre-LN
//! transformer blocks, register tokens, no class token.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tid};
use crate::data::TactileWindow;
use crate::error::{Error, Result};
use crate::nn::{init_normal, ones, zeros, Bound, ParamSet};

use super::config::EncoderConfig;
use super::patch::{patchify, Grid};

/// Patch representations produced by the encoder.
#[derive(Clone, Debug)]
pub struct TokenEmbeddings {
    pub tokens: Array2<f64>,
    pub grid: Grid,
    pub registers: Array2<f64>,
}

fn sincos_1d(n: usize, dim: usize) -> Array2<f64> {
    assert!(dim % 2 == 0, "1d sincos dim must be even");
    let half = dim / 2;
    let mut out = Array2::<f64>::zeros((n, dim));
    for pos in 0..n {
        for i in 0..half {
            let omega = 1.0 / 10000f64.powf(i as f64 / half as f64);
            out[[pos, i]] = (pos as f64 * omega).sin();
            out[[pos, half + i]] = (pos as f64 * omega).cos();
        }
    }
    out
}

/// Fixed 2-D sin-cos embedding over a `gh x gw` grid (row-major tokens).
pub fn sincos_2d(gh: usize, gw: usize, dim: usize) -> Array2<f64> {
    assert!(dim % 4 == 0, "2d sincos dim must be a multiple of 4");
    let half = dim / 2;
    let eh = sincos_1d(gh, half);
    let ew = sincos_1d(gw, half);
    let mut out = Array2::<f64>::zeros((gh * gw, dim));
    for y in 0..gh {
        for x in 0..gw {
            let row = y * gw + x;
            for k in 0..half {
                out[[row, k]] = eh[[y, k]];
                out[[row, half + k]] = ew[[x, k]];
            }
        }
    }
    out
}

/// Fixed 3-D sin-cos embedding over a `gt x gh x gw` grid: a quarter of the
/// width encodes time, the rest splits evenly between the two spatial axes.
pub fn sincos_3d(gt: usize, gh: usize, gw: usize, dim: usize) -> Array2<f64> {
    assert!(dim % 4 == 0, "3d sincos dim must be a multiple of 4");
    let dt = (dim / 4 + 1) & !1; // even
    let ds = (dim - dt) / 2 & !1;
    let dt = dim - 2 * ds;
    let et = sincos_1d(gt, dt);
    let eh = sincos_1d(gh, ds);
    let ew = sincos_1d(gw, ds);
    let mut out = Array2::<f64>::zeros((gt * gh * gw, dim));
    for t in 0..gt {
        for y in 0..gh {
            for x in 0..gw {
                let row = t * gh * gw + y * gw + x;
                for k in 0..dt {
                    out[[row, k]] = et[[t, k]];
                }
                for k in 0..ds {
                    out[[row, dt + k]] = eh[[y, k]];
                    out[[row, dt + ds + k]] = ew[[x, k]];
                }
            }
        }
    }
    out
}

/// Positional embedding matching a token grid.
pub fn pos_embedding_for(grid: &Grid, dim: usize) -> Array2<f64> {
    match *grid {
        Grid::Image { gh, gw } => sincos_2d(gh, gw, dim),
        Grid::Clip { gt, gh, gw } => sincos_3d(gt, gh, gw, dim),
    }
}

/// Initialize encoder parameters. Names are stable and documented in the
/// checkpoint format: `patch_embed/{w,b}`, `registers`,
/// `block{i}/{ln1,ln2}/{g,b}`, `block{i}/attn/{w_qkv,b_qkv,w_proj,b_proj}`,
/// `block{i}/mlp/{w1,b1,w2,b2}`, `final_ln/{g,b}`.
pub fn init_encoder_params(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> ParamSet {
    let d = cfg.embed_dim;
    let p = cfg.patch_dim();
    let h = cfg.mlp_hidden();
    let std = 0.02;
    let mut ps = ParamSet::new();
    ps.insert("patch_embed/w", init_normal(&[p, d], std, rng));
    ps.insert("patch_embed/b", zeros(&[d]));
    ps.insert(
        "registers",
        init_normal(&[cfg.n_registers.max(1), d], std, rng),
    );
    for i in 0..cfg.depth {
        ps.insert(format!("block{i}/ln1/g"), ones(&[d]));
        ps.insert(format!("block{i}/ln1/b"), zeros(&[d]));
        ps.insert(format!("block{i}/attn/w_qkv"), init_normal(&[d, 3 * d], std, rng));
        ps.insert(format!("block{i}/attn/b_qkv"), zeros(&[3 * d]));
        ps.insert(format!("block{i}/attn/w_proj"), init_normal(&[d, d], std, rng));
        ps.insert(format!("block{i}/attn/b_proj"), zeros(&[d]));
        ps.insert(format!("block{i}/ln2/g"), ones(&[d]));
        ps.insert(format!("block{i}/ln2/b"), zeros(&[d]));
        ps.insert(format!("block{i}/mlp/w1"), init_normal(&[d, h], std, rng));
        ps.insert(format!("block{i}/mlp/b1"), zeros(&[h]));
        ps.insert(format!("block{i}/mlp/w2"), init_normal(&[h, d], std, rng));
        ps.insert(format!("block{i}/mlp/b2"), zeros(&[d]));
    }
    ps.insert("final_ln/g", ones(&[d]));
    ps.insert("final_ln/b", zeros(&[d]));
    ps
}

/// Geometry of one transformer block, shared by the encoder, the MAE
/// decoder, and the JEPA predictor.
#[derive(Clone, Copy, Debug)]
pub struct BlockDims {
    pub dim: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
}

/// Allocate the parameters of one pre-LN block under `prefix`.
pub fn init_block_params(
    ps: &mut ParamSet,
    prefix: &str,
    dims: &BlockDims,
    std: f64,
    rng: &mut ChaCha8Rng,
) {
    let d = dims.dim;
    let h = dims.mlp_hidden;
    ps.insert(format!("{prefix}ln1/g"), ones(&[d]));
    ps.insert(format!("{prefix}ln1/b"), zeros(&[d]));
    ps.insert(format!("{prefix}attn/w_qkv"), init_normal(&[d, 3 * d], std, rng));
    ps.insert(format!("{prefix}attn/b_qkv"), zeros(&[3 * d]));
    ps.insert(format!("{prefix}attn/w_proj"), init_normal(&[d, d], std, rng));
    ps.insert(format!("{prefix}attn/b_proj"), zeros(&[d]));
    ps.insert(format!("{prefix}ln2/g"), ones(&[d]));
    ps.insert(format!("{prefix}ln2/b"), zeros(&[d]));
    ps.insert(format!("{prefix}mlp/w1"), init_normal(&[d, h], std, rng));
    ps.insert(format!("{prefix}mlp/b1"), zeros(&[h]));
    ps.insert(format!("{prefix}mlp/w2"), init_normal(&[h, d], std, rng));
    ps.insert(format!("{prefix}mlp/b2"), zeros(&[d]));
}

fn self_attention(tape: &mut Tape, x: Tid, bound: &Bound, prefix: &str, dims: &BlockDims) -> Tid {
    let d = dims.dim;
    let dh = d / dims.n_heads;
    let qkv_w = bound.id(&format!("{prefix}attn/w_qkv"));
    let qkv_b = bound.id(&format!("{prefix}attn/b_qkv"));
    let mm = tape.matmul(x, qkv_w);
    let qkv = tape.add_bias(mm, qkv_b);
    let mut heads = Vec::with_capacity(dims.n_heads);
    for h in 0..dims.n_heads {
        let q = tape.slice_cols(qkv, h * dh, dh);
        let k = tape.slice_cols(qkv, d + h * dh, dh);
        let v = tape.slice_cols(qkv, 2 * d + h * dh, dh);
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt);
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.row_softmax(scaled);
        heads.push(tape.matmul(attn, v));
    }
    let cat = tape.concat_cols(&heads);
    let proj_w = bound.id(&format!("{prefix}attn/w_proj"));
    let proj_b = bound.id(&format!("{prefix}attn/b_proj"));
    let mm = tape.matmul(cat, proj_w);
    tape.add_bias(mm, proj_b)
}

fn mlp(tape: &mut Tape, x: Tid, bound: &Bound, prefix: &str) -> Tid {
    let w1 = bound.id(&format!("{prefix}mlp/w1"));
    let b1 = bound.id(&format!("{prefix}mlp/b1"));
    let w2 = bound.id(&format!("{prefix}mlp/w2"));
    let b2 = bound.id(&format!("{prefix}mlp/b2"));
    let h = tape.matmul(x, w1);
    let h = tape.add_bias(h, b1);
    let h = tape.gelu(h);
    let h = tape.matmul(h, w2);
    tape.add_bias(h, b2)
}

/// One pre-LN transformer block with residuals.
pub fn transformer_block(
    tape: &mut Tape,
    x: Tid,
    bound: &Bound,
    prefix: &str,
    dims: &BlockDims,
) -> Tid {
    let g1 = bound.id(&format!("{prefix}ln1/g"));
    let b1 = bound.id(&format!("{prefix}ln1/b"));
    let normed = tape.layer_norm(x, g1, b1, 1e-6);
    let att = self_attention(tape, normed, bound, prefix, dims);
    let x = tape.add(x, att);
    let g2 = bound.id(&format!("{prefix}ln2/g"));
    let b2 = bound.id(&format!("{prefix}ln2/b"));
    let normed = tape.layer_norm(x, g2, b2, 1e-6);
    let m = mlp(tape, normed, bound, prefix);
    tape.add(x, m)
}

/// Encoder forward output on the tape.
pub struct VitOut {
    /// Final (post-LN) patch tokens, `n x d`.
    pub tokens: Tid,
    /// Final register outputs, `r x d`.
    pub registers: Tid,
    /// Requested intermediate block outputs (patch token rows only).
    pub tapped: Vec<Tid>,
}

/// Run the transformer over already-embedded patch rows.
///
/// `patches` is an `n x patch_dim` tape node; `pos` the matching positional
/// embedding rows (constant). Register tokens are appended after the patch
/// tokens. `taps` lists block indices whose outputs are returned.
pub fn vit_forward(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    bound: &Bound,
    prefix: &str,
    patches: Tid,
    pos: &Array2<f64>,
    taps: &[usize],
) -> VitOut {
    let n = tape.shape(patches)[0];
    let w = bound.id(&format!("{prefix}patch_embed/w"));
    let b = bound.id(&format!("{prefix}patch_embed/b"));
    let emb = tape.matmul(patches, w);
    let emb = tape.add_bias(emb, b);
    let emb = tape.add_const(emb, &pos.clone().into_dyn());

    let regs = bound.id(&format!("{prefix}registers"));
    let mut x = tape.concat_rows(&[emb, regs]);

    let mut collected: Vec<Option<Tid>> = vec![None; taps.len()];

    for i in 0..cfg.depth {
        let pfx = format!("{prefix}block{i}/");
        let g1 = bound.id(&format!("{pfx}ln1/g"));
        let b1 = bound.id(&format!("{pfx}ln1/b"));
        let normed = tape.layer_norm(x, g1, b1, 1e-6);
        let att = self_attention(tape, normed, bound, &pfx, cfg);
        x = tape.add(x, att);
        let g2 = bound.id(&format!("{pfx}ln2/g"));
        let b2 = bound.id(&format!("{pfx}ln2/b"));
        let normed = tape.layer_norm(x, g2, b2, 1e-6);
        let m = mlp(tape, normed, bound, &pfx);
        x = tape.add(x, m);
        for (slot, &t) in taps.iter().enumerate() {
            if t == i {
                collected[slot] = Some(tape.slice_rows(x, 0, n));
            }
        }
    }
    let gf = bound.id(&format!("{prefix}final_ln/g"));
    let bf = bound.id(&format!("{prefix}final_ln/b"));
    let x = tape.layer_norm(x, gf, bf, 1e-6);
    let tokens = tape.slice_rows(x, 0, n);
    let registers = tape.slice_rows(x, n, tape.shape(x)[0] - n);
    let tapped = collected
        .into_iter()
        .map(|t| t.expect("tap depth beyond encoder depth"))
        .collect();
    VitOut {
        tokens,
        registers,
        tapped,
    }
}

/// Intermediate-feature tap depths: `[2, 5, 8, 11]` for 12 blocks, scaled
/// proportionally (floored) for other depths.
pub fn tap_depths(depth: usize) -> [usize; 4] {
    [2usize, 5, 8, 11].map(|d| (d * depth) / 12)
}

fn check_finite(params: &ParamSet) -> Result<()> {
    for (k, v) in params.iter() {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("non-finite value in parameter {k}")));
        }
    }
    Ok(())
}

/// Evaluation-mode encode: window -> token embeddings. Deterministic; two
/// identical calls produce bit-identical outputs.
pub fn encode(
    window: &TactileWindow,
    cfg: &EncoderConfig,
    params: &ParamSet,
) -> Result<TokenEmbeddings> {
    let (emb, _) = encode_with_taps(window, cfg, params, &[])?;
    Ok(emb)
}

/// Evaluation-mode encode that also returns intermediate block outputs
/// (for dense decoding).
pub fn encode_with_taps(
    window: &TactileWindow,
    cfg: &EncoderConfig,
    params: &ParamSet,
    taps: &[usize],
) -> Result<(TokenEmbeddings, Vec<Array2<f64>>)> {
    cfg.validate()?;
    check_finite(params)?;
    let pg = patchify(window, cfg)?;
    let pos = pos_embedding_for(&pg.grid, cfg.embed_dim);
    let mut tape = Tape::new();
    let patches = tape.constant(pg.patches.clone().into_dyn());
    let bound = Bound::bind(&mut tape, params);
    let out = vit_forward(&mut tape, cfg, &bound, "", patches, &pos, taps);
    let to2 = |t: Tid, tape: &Tape| -> Array2<f64> {
        tape.val(t)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
    };
    let tokens = to2(out.tokens, &tape);
    let registers = to2(out.registers, &tape);
    let tapped = out.tapped.iter().map(|&t| to2(t, &tape)).collect();
    Ok((
        TokenEmbeddings {
            tokens,
            grid: pg.grid,
            registers,
        },
        tapped,
    ))
}
