//! Central finite-difference verification of tape gradients.
//!
//! Relative error for one coordinate is `|a - n| / max(|a|, |n|, floor)` where
//! `a` is the analytic and `n` the numeric derivative. The floor keeps
//! coordinates whose true derivative is zero from dividing round-off by zero.

use crate::error::Result;
use crate::params::{ParamId, ParamSet};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
    /// Check at most this many coordinates per parameter (evenly strided).
    pub max_per_param: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-4,
            tolerance: 1e-4,
            floor: 1e-6,
            max_per_param: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

impl GradCheck {
    pub fn rel_err(&self, analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(self.floor)
    }

    /// Compares the tape gradient of `loss_fn` against central differences for
    /// every coordinate of every trainable parameter in `params`.
    pub fn run<F>(&self, params: &ParamSet, loss_fn: F) -> Result<GradCheckReport>
    where
        F: for<'t> Fn(&'t Tape<'t>) -> Result<Var<'t>>,
    {
        let ids: Vec<ParamId> = params.ids().filter(|&id| params.is_trainable(id)).collect();
        self.run_on(params, &ids, loss_fn)
    }

    pub fn run_on<F>(&self, params: &ParamSet, ids: &[ParamId], loss_fn: F) -> Result<GradCheckReport>
    where
        F: for<'t> Fn(&'t Tape<'t>) -> Result<Var<'t>>,
    {
        let analytic = {
            let tape = Tape::new(params);
            let loss = loss_fn(&tape)?;
            tape.backward(loss)?.into_params()
        };
        let eval = |p: &ParamSet| -> Result<f64> {
            let tape = Tape::new(p);
            Ok(loss_fn(&tape)?.item())
        };

        let mut work = params.clone();
        let mut report = GradCheckReport {
            checked: 0,
            max_rel_err: 0.0,
            worst: None,
        };
        for &id in ids {
            let grad = analytic.dense(id, params);
            let n = grad.len();
            let stride = match self.max_per_param {
                Some(k) if k > 0 && n > k => n.div_ceil(k),
                _ => 1,
            };
            for idx in (0..n).step_by(stride) {
                let orig = work.get(id).data()[idx];
                work.get_mut(id).data_mut()[idx] = orig + self.step;
                let plus = eval(&work)?;
                work.get_mut(id).data_mut()[idx] = orig - self.step;
                let minus = eval(&work)?;
                work.get_mut(id).data_mut()[idx] = orig;

                let numeric = (plus - minus) / (2.0 * self.step);
                let a = grad.data()[idx];
                let err = self.rel_err(a, numeric);
                report.checked += 1;
                if report.worst.is_none() || err > report.max_rel_err {
                    report.max_rel_err = err;
                    report.worst = Some(Mismatch {
                        param: params.name(id).to_string(),
                        index: idx,
                        analytic: a,
                        numeric,
                        rel_err: err,
                    });
                }
            }
        }
        Ok(report)
    }
}
