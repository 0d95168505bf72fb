//! SSL loss functions. Each has a plain-array form (used by tests and
//! oracles) and a tape form (used by training); both follow the same
//! mean-per-element convention so magnitudes are config-independent.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tid};
use crate::error::{Error, Result};

use super::mask::MaskSpec;

/// Per-patch standardization of pixel targets (MAE-lineage default).
pub fn normalize_patch_targets(patches: &Array2<f64>) -> Array2<f64> {
    let mut out = patches.clone();
    for mut row in out.rows_mut() {
        let n = row.len() as f64;
        let mu = row.sum() / n;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        let s = (var + 1e-6).sqrt();
        row.mapv_inplace(|v| (v - mu) / s);
    }
    out
}

/// Mean squared reconstruction error over masked patches only.
pub fn mae_loss(
    reconstruction: &Array2<f64>,
    target_patches: &Array2<f64>,
    mask: &MaskSpec,
    normalize_targets: bool,
) -> Result<f64> {
    if reconstruction.dim() != target_patches.dim() {
        return Err(Error::shape(format!(
            "reconstruction {:?} vs target {:?}",
            reconstruction.dim(),
            target_patches.dim()
        )));
    }
    if mask.masked_idx.is_empty() {
        return Err(Error::invalid("empty mask"));
    }
    if mask.n_tokens() != target_patches.nrows() {
        return Err(Error::shape("mask token count != patch rows"));
    }
    let target = if normalize_targets {
        normalize_patch_targets(target_patches)
    } else {
        target_patches.clone()
    };
    let mut acc = 0.0;
    let p = target.ncols();
    for &i in &mask.masked_idx {
        for j in 0..p {
            let d = reconstruction[[i, j]] - target[[i, j]];
            acc += d * d;
        }
    }
    Ok(acc / (mask.masked_idx.len() * p) as f64)
}

/// Tape form: MSE between predicted masked-patch rows and constant targets.
pub fn mse_rows_tape(tape: &mut Tape, pred: Tid, target: &Array2<f64>) -> Tid {
    let diff = tape.sub_const(pred, &target.clone().into_dyn());
    let sq = tape.square(diff);
    tape.mean_all(sq)
}

/// Running state of the DINO prototype head: the centering vector and the
/// two softmax temperatures. The prototype-layer weights themselves live in
/// the student/teacher parameter sets.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DinoHeadState {
    pub n_prototypes: usize,
    pub center: Vec<f64>,
    pub student_temp: f64,
    pub teacher_temp: f64,
    pub center_momentum: f64,
    /// Centering can be disabled to study collapse; the entropy diagnostic
    /// then becomes the detector.
    pub centering: bool,
}

impl DinoHeadState {
    pub fn new(n_prototypes: usize, student_temp: f64, teacher_temp: f64) -> Result<Self> {
        if student_temp <= 0.0 || teacher_temp <= 0.0 {
            return Err(Error::invalid("temperatures must be positive"));
        }
        Ok(DinoHeadState {
            n_prototypes,
            center: vec![0.0; n_prototypes],
            student_temp,
            teacher_temp,
            center_momentum: 0.9,
            centering: true,
        })
    }

    /// Teacher probabilities with centering and sharpening (no gradient by
    /// construction: operates on plain values).
    pub fn teacher_probs(&self, teacher_scores: &Array2<f64>) -> Result<Array2<f64>> {
        if teacher_scores.ncols() != self.n_prototypes {
            return Err(Error::shape("teacher score width != prototypes"));
        }
        let mut out = teacher_scores.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                let c = if self.centering { self.center[j] } else { 0.0 };
                *v = (*v - c) / self.teacher_temp;
            }
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        Ok(out)
    }

    /// EMA update of the center from a batch of teacher scores.
    pub fn update_center(&mut self, teacher_scores: &Array2<f64>) {
        if teacher_scores.nrows() == 0 {
            return;
        }
        let mean = teacher_scores.mean_axis(Axis(0)).unwrap();
        for (c, m) in self.center.iter_mut().zip(mean.iter()) {
            *c = self.center_momentum * *c + (1.0 - self.center_momentum) * m;
        }
    }

    /// Mean entropy of teacher probability rows, in nats. Collapse drives
    /// this toward zero.
    pub fn teacher_entropy(&self, teacher_scores: &Array2<f64>) -> Result<f64> {
        let probs = self.teacher_probs(teacher_scores)?;
        let mut h = 0.0;
        for row in probs.rows() {
            for &p in row {
                if p > 0.0 {
                    h -= p * p.ln();
                }
            }
        }
        Ok(h / probs.nrows() as f64)
    }

    /// Entropy-collapse detector: fires when teacher entropy falls below a
    /// tenth of the uniform entropy.
    pub fn collapse_detected(&self, teacher_scores: &Array2<f64>) -> Result<bool> {
        let h = self.teacher_entropy(teacher_scores)?;
        Ok(h < 0.1 * (self.n_prototypes as f64).ln())
    }
}

/// Cross-entropy self-distillation loss, averaged over (teacher view,
/// student view) pairs excluding same-view pairs. The center is then
/// EMA-updated from the teacher batch mean.
pub fn dino_loss(
    student_scores: &Array2<f64>,
    teacher_scores: &Array2<f64>,
    head: &mut DinoHeadState,
) -> Result<f64> {
    let loss = dino_loss_frozen(student_scores, teacher_scores, head)?;
    head.update_center(teacher_scores);
    Ok(loss)
}

/// The DINO loss without the center update (pure function of its inputs).
pub fn dino_loss_frozen(
    student_scores: &Array2<f64>,
    teacher_scores: &Array2<f64>,
    head: &DinoHeadState,
) -> Result<f64> {
    if student_scores.ncols() != head.n_prototypes {
        return Err(Error::shape("student score width != prototypes"));
    }
    let p_t = head.teacher_probs(teacher_scores)?;
    let mut acc = 0.0;
    let mut pairs = 0usize;
    for (ti, trow) in p_t.rows().into_iter().enumerate() {
        for (si, srow) in student_scores.rows().into_iter().enumerate() {
            if si == ti {
                continue;
            }
            // log softmax of student row at student temperature
            let scaled: Vec<f64> = srow.iter().map(|v| v / head.student_temp).collect();
            let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + scaled.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            let ce: f64 = trow
                .iter()
                .zip(scaled.iter())
                .map(|(p, s)| -p * (s - lse))
                .sum();
            acc += ce;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::invalid("no teacher/student view pairs"));
    }
    Ok(acc / pairs as f64)
}

/// Tape form of the DINO loss: student score rows are tape nodes, teacher
/// probabilities are precomputed constants.
pub fn dino_loss_tape(
    tape: &mut Tape,
    student_rows: &[Tid],
    teacher_probs: &[(usize, Array1<f64>)],
    student_temp: f64,
) -> Result<Tid> {
    let mut terms = Vec::new();
    for (t_view, p_t) in teacher_probs {
        for (s_view, &s) in student_rows.iter().enumerate() {
            if s_view == *t_view {
                continue;
            }
            let scaled = tape.scale(s, 1.0 / student_temp);
            let logp = tape.row_log_softmax(scaled);
            let pt_row = p_t
                .clone()
                .insert_axis(Axis(0))
                .into_dyn();
            let weighted = tape.mul_const(logp, &pt_row);
            let s_sum = tape.sum_all(weighted);
            terms.push(tape.scale(s_sum, -1.0));
        }
    }
    if terms.is_empty() {
        return Err(Error::invalid("no teacher/student view pairs"));
    }
    Ok(tape.mean_of(&terms))
}

/// L2 feature-prediction loss: mean over masks, target blocks, tokens, and
/// feature dimensions of squared differences. Targets carry no gradient.
pub fn jepa_loss(predicted: &[Array2<f64>], target: &[Array2<f64>]) -> Result<f64> {
    if predicted.len() != target.len() || predicted.is_empty() {
        return Err(Error::shape("predicted/target block counts differ"));
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for (p, t) in predicted.iter().zip(target.iter()) {
        if p.dim() != t.dim() {
            return Err(Error::shape(format!(
                "block shapes differ: {:?} vs {:?}",
                p.dim(),
                t.dim()
            )));
        }
        for (a, b) in p.iter().zip(t.iter()) {
            let d = a - b;
            acc += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("no latent elements to compare"));
    }
    Ok(acc / n as f64)
}

/// Tape form: predicted blocks are tape nodes, targets constants. Blocks
/// are concatenated so the mean runs over every element at once.
pub fn jepa_loss_tape(
    tape: &mut Tape,
    predicted: &[Tid],
    target: &[Array2<f64>],
) -> Result<Tid> {
    if predicted.len() != target.len() || predicted.is_empty() {
        return Err(Error::shape("predicted/target block counts differ"));
    }
    for (i, (&p, t)) in predicted.iter().zip(target.iter()).enumerate() {
        if tape.shape(p) != t.shape() {
            return Err(Error::shape(format!("block {i} shape mismatch")));
        }
    }
    let cat_pred = if predicted.len() == 1 {
        predicted[0]
    } else {
        tape.concat_rows(predicted)
    };
    let views: Vec<_> = target.iter().map(|t| t.view()).collect();
    let cat_target = ndarray::concatenate(Axis(0), &views).unwrap();
    Ok(mse_rows_tape(tape, cat_pred, &cat_target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::rng_for;
    use crate::ssl::mask::sample_random_mask;
    use rand::Rng;

    #[test]
    fn mae_zero_when_equal() {
        let mut rng = rng_for(0, "loss", 0);
        let t = Array2::from_shape_fn((16, 12), |_| rng.random_range(0.0..1.0));
        let m = sample_random_mask(16, 0.5, &mut rng).unwrap();
        assert_eq!(mae_loss(&t, &t, &m, false).unwrap(), 0.0);
    }

    #[test]
    fn mae_constant_offset_is_one() {
        let mut rng = rng_for(1, "loss", 0);
        let t = Array2::from_shape_fn((16, 12), |_| rng.random_range(0.0..1.0));
        let r = &t + 1.0;
        let m = sample_random_mask(16, 0.5, &mut rng).unwrap();
        let l = mae_loss(&r, &t, &m, false).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mae_matches_loop_oracle() {
        let mut rng = rng_for(2, "loss", 0);
        for trial in 0..20 {
            let t = Array2::from_shape_fn((20, 8), |_| rng.random_range(-1.0..1.0));
            let r = Array2::from_shape_fn((20, 8), |_| rng.random_range(-1.0..1.0));
            let mut mrng = rng_for(3, "loss-mask", trial);
            let m = sample_random_mask(20, 0.6, &mut mrng).unwrap();
            let got = mae_loss(&r, &t, &m, false).unwrap();
            let mut acc = 0.0;
            let mut n = 0;
            for &i in &m.masked_idx {
                for j in 0..8 {
                    let d = r[[i, j]] - t[[i, j]];
                    acc += d * d;
                    n += 1;
                }
            }
            assert!((got - acc / n as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn dino_uniform_student_gives_log_k() {
        // teacher nearly one-hot, student uniform over K=8 -> loss -> ln 8
        let k = 8;
        let mut head = DinoHeadState::new(k, 1.0, 1.0).unwrap();
        let mut teacher = Array2::<f64>::zeros((1, k));
        teacher[[0, 3]] = 60.0; // softmax at temp 1 -> essentially one-hot
        let student = Array2::<f64>::zeros((2, k)); // row 1 pairs with teacher row 0
        let loss = dino_loss(&student, &teacher, &mut head).unwrap();
        assert!(
            (loss - (k as f64).ln()).abs() < 1e-9,
            "loss {loss} vs ln8 {}",
            (k as f64).ln()
        );
    }

    #[test]
    fn dino_self_distribution_attains_entropy() {
        // p_s == p_t: the cross-entropy equals the entropy of p_t, which is
        // the minimum over student distributions (Gibbs)
        let k = 16;
        let head = DinoHeadState::new(k, 1.0, 1.0).unwrap();
        let mut rng = rng_for(4, "loss", 0);
        let scores = Array2::from_shape_fn((1, k), |_| rng.random_range(-1.0..1.0));
        // teacher row 0 vs student view 1 (distinct views, same scores)
        let student = ndarray::concatenate(
            Axis(0),
            &[Array2::<f64>::zeros((1, k)).view(), scores.view()],
        )
        .unwrap();
        let loss = dino_loss_frozen(&student, &scores, &head).unwrap();
        let p = head.teacher_probs(&scores).unwrap();
        let entropy: f64 = -p.row(0).iter().map(|&x| x * x.ln()).sum::<f64>();
        assert!((loss - entropy).abs() < 1e-9);
        // any other student distribution does worse
        let other = Array2::from_shape_fn((2, k), |_| rng.random_range(-1.0..1.0));
        let worse = dino_loss_frozen(&other, &scores, &head).unwrap();
        assert!(worse >= entropy - 1e-12);
    }

    #[test]
    fn dino_matches_softmax_loop_oracle() {
        let k = 12;
        let mut rng = rng_for(5, "loss", 0);
        for _ in 0..20 {
            let mut head = DinoHeadState::new(k, 0.1, 0.04).unwrap();
            for c in head.center.iter_mut() {
                *c = rng.random_range(-0.5..0.5);
            }
            let teacher = Array2::from_shape_fn((2, k), |_| rng.random_range(-2.0..2.0));
            let student = Array2::from_shape_fn((4, k), |_| rng.random_range(-2.0..2.0));
            let got = dino_loss_frozen(&student, &teacher, &head).unwrap();

            // direct loop oracle
            let mut acc = 0.0;
            let mut pairs = 0;
            for ti in 0..2 {
                let mut pt = vec![0.0; k];
                let mut z = 0.0;
                for j in 0..k {
                    pt[j] = ((teacher[[ti, j]] - head.center[j]) / head.teacher_temp).exp();
                    z += pt[j];
                }
                for p in pt.iter_mut() {
                    *p /= z;
                }
                for si in 0..4 {
                    if si == ti {
                        continue;
                    }
                    let mut zs = 0.0;
                    for j in 0..k {
                        zs += (student[[si, j]] / head.student_temp).exp();
                    }
                    for j in 0..k {
                        let logp = student[[si, j]] / head.student_temp - zs.ln();
                        acc -= pt[j] * logp;
                    }
                    pairs += 1;
                }
            }
            assert!((got - acc / pairs as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn dino_rejects_bad_temperature() {
        assert!(DinoHeadState::new(8, 0.0, 0.04).is_err());
        assert!(DinoHeadState::new(8, 0.1, -1.0).is_err());
    }

    #[test]
    fn collapse_detector_fires_on_degenerate_scores() {
        let k = 64;
        let mut head = DinoHeadState::new(k, 0.1, 0.04).unwrap();
        head.centering = false;
        // all mass on one prototype for every sample
        let mut scores = Array2::<f64>::zeros((8, k));
        for i in 0..8 {
            scores[[i, 5]] = 50.0;
        }
        assert!(head.collapse_detected(&scores).unwrap());
        // healthy spread does not fire
        let mut rng = rng_for(6, "loss", 0);
        let healthy = Array2::from_shape_fn((8, k), |_| rng.random_range(-0.01..0.01));
        assert!(!head.collapse_detected(&healthy).unwrap());
    }

    #[test]
    fn jepa_identity_and_offset() {
        let mut rng = rng_for(7, "loss", 0);
        let t: Vec<Array2<f64>> = (0..3)
            .map(|_| Array2::from_shape_fn((5, 6), |_| rng.random_range(-1.0..1.0)))
            .collect();
        assert_eq!(jepa_loss(&t, &t).unwrap(), 0.0);
        let shifted: Vec<Array2<f64>> = t.iter().map(|a| a + 0.3).collect();
        let l = jepa_loss(&shifted, &t).unwrap();
        assert!((l - 0.09).abs() < 1e-12);
    }

    #[test]
    fn jepa_matches_triple_loop_oracle() {
        let mut rng = rng_for(8, "loss", 0);
        for _ in 0..20 {
            let t: Vec<Array2<f64>> = (0..4)
                .map(|_| Array2::from_shape_fn((3, 7), |_| rng.random_range(-1.0..1.0)))
                .collect();
            let p: Vec<Array2<f64>> = (0..4)
                .map(|_| Array2::from_shape_fn((3, 7), |_| rng.random_range(-1.0..1.0)))
                .collect();
            let got = jepa_loss(&p, &t).unwrap();
            let mut acc = 0.0;
            let mut n = 0;
            for b in 0..4 {
                for i in 0..3 {
                    for j in 0..7 {
                        let d = p[b][[i, j]] - t[b][[i, j]];
                        acc += d * d;
                        n += 1;
                    }
                }
            }
            assert!((got - acc / n as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn jepa_shape_mismatch_errors() {
        let a = vec![Array2::<f64>::zeros((2, 3))];
        let b = vec![Array2::<f64>::zeros((3, 3))];
        assert!(jepa_loss(&a, &b).is_err());
    }

    #[test]
    fn tape_losses_match_value_losses() {
        let mut rng = rng_for(9, "loss", 0);
        // jepa
        let t: Vec<Array2<f64>> = (0..2)
            .map(|_| Array2::from_shape_fn((4, 5), |_| rng.random_range(-1.0..1.0)))
            .collect();
        let p: Vec<Array2<f64>> = (0..2)
            .map(|_| Array2::from_shape_fn((4, 5), |_| rng.random_range(-1.0..1.0)))
            .collect();
        let mut tape = Tape::new();
        let pids: Vec<Tid> = p.iter().map(|a| tape.leaf(a.clone().into_dyn())).collect();
        let root = jepa_loss_tape(&mut tape, &pids, &t).unwrap();
        let got = tape.val(root)[[]];
        assert!((got - jepa_loss(&p, &t).unwrap()).abs() < 1e-12);

        // dino
        let k = 10;
        let head = DinoHeadState::new(k, 0.2, 0.05).unwrap();
        let teacher = Array2::from_shape_fn((2, k), |_| rng.random_range(-1.0..1.0));
        let student = Array2::from_shape_fn((3, k), |_| rng.random_range(-1.0..1.0));
        let expect = dino_loss_frozen(&student, &teacher, &head).unwrap();
        let pt = head.teacher_probs(&teacher).unwrap();
        let mut tape = Tape::new();
        let srows: Vec<Tid> = (0..3)
            .map(|i| tape.leaf(student.row(i).to_owned().insert_axis(Axis(0)).into_dyn()))
            .collect();
        let tp: Vec<(usize, Array1<f64>)> =
            (0..2).map(|i| (i, pt.row(i).to_owned())).collect();
        let root = dino_loss_tape(&mut tape, &srows, &tp, head.student_temp).unwrap();
        assert!((tape.val(root)[[]] - expect).abs() < 1e-10);
    }
}
