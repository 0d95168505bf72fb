//! EMA teacher state: a gradient-free shadow of the student parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum MomentumSchedule {
    Constant(f64),
}

impl MomentumSchedule {
    pub fn at(&self, _step: u64) -> f64 {
        match self {
            MomentumSchedule::Constant(m) => *m,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EmaState {
    pub teacher_params: ParamSet,
    pub schedule: MomentumSchedule,
}

impl EmaState {
    pub fn new(student: &ParamSet, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) || momentum <= 0.0 {
            return Err(Error::invalid("EMA momentum must be in (0, 1)"));
        }
        Ok(EmaState {
            teacher_params: student.clone(),
            schedule: MomentumSchedule::Constant(momentum),
        })
    }
}

/// `teacher <- m * teacher + (1 - m) * student`, elementwise.
pub fn ema_update(student: &ParamSet, ema: &mut EmaState, step: u64) -> Result<()> {
    if !ema.teacher_params.congruent(student) {
        return Err(Error::invalid("EMA parameter trees are not congruent"));
    }
    let m = ema.schedule.at(step);
    let names: Vec<String> = ema.teacher_params.names().cloned().collect();
    for k in names {
        let s = student.get(&k).unwrap();
        let t = ema.teacher_params.get_mut(&k).unwrap();
        t.zip_mut_with(s, |tv, sv| {
            *tv = m * *tv + (1.0 - m) * sv;
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn single(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", arr1(&[v]).into_dyn());
        p
    }

    #[test]
    fn single_step_formula() {
        let student = single(1.0);
        let mut ema = EmaState::new(&single(0.0), 0.996).unwrap();
        ema_update(&student, &mut ema, 0).unwrap();
        let t = ema.teacher_params.get("w").unwrap()[[0]];
        assert!((t - 0.004).abs() < 1e-15);
    }

    #[test]
    fn fixed_point_when_equal() {
        let student = single(0.7);
        let mut ema = EmaState::new(&student, 0.998).unwrap();
        ema_update(&student, &mut ema, 0).unwrap();
        assert_eq!(ema.teacher_params.get("w").unwrap()[[0]], 0.7);
    }

    #[test]
    fn geometric_convergence_matches_closed_form() {
        let student = single(1.0);
        let mut ema = EmaState::new(&single(0.0), 0.996).unwrap();
        let m: f64 = 0.996;
        for n in 1..=200u32 {
            ema_update(&student, &mut ema, n as u64).unwrap();
            let t = ema.teacher_params.get("w").unwrap()[[0]];
            let expect = 1.0 - m.powi(n as i32);
            assert!(
                (t - expect).abs() < 1e-12,
                "step {n}: {t} vs closed form {expect}"
            );
        }
    }

    #[test]
    fn tree_mismatch_errors() {
        let mut other = single(0.0);
        other.insert("extra", arr1(&[1.0]).into_dyn());
        let mut ema = EmaState::new(&single(0.0), 0.5).unwrap();
        assert!(ema_update(&other, &mut ema, 0).is_err());
    }
}
