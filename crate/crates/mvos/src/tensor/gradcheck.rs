//! Central finite-difference verification of analytic gradients.
//!
//! Runs in f64 only: the two-sided difference loses roughly half the mantissa,
//! which f32 cannot afford.

use crate::error::Result;
use crate::scalar::Scalar;

use super::{Tape, Tensor, VarId};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
}

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_RTOL: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Check d(loss)/d(inputs) for a scalar-valued tape function against central
/// differences. Every input gets a gradient slot.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64, rtol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[VarId]) -> Result<VarId>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let ids: Vec<VarId> = inputs.iter().map(|t| tape.leaf_grad(t.clone())).collect();
        let loss = f(&mut tape, &ids)?;
        tape.backward(loss)?;
        ids.iter()
            .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.value(id).numel()]))
            .collect()
    };

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<VarId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &ids)?;
        Ok(tape.value(loss).item())
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut max_rel: f64 = 0.0;
    for ti in 0..work.len() {
        for i in 0..work[ti].data.len() {
            let orig = work[ti].data[i];
            work[ti].data[i] = orig + eps;
            let fp = eval(&work)?;
            work[ti].data[i] = orig - eps;
            let fm = eval(&work)?;
            work[ti].data[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            max_rel = max_rel.max(rel_err(analytic[ti][i], numeric));
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        pass: max_rel <= rtol,
    })
}

/// A model (or any parameterized computation) exposed to the FD driver:
/// scalar storage behind (param index, coordinate) plus a loss evaluation.
pub trait FdTarget {
    fn param_count(&self) -> usize;
    fn param_len(&self, p: usize) -> usize;
    fn param_name(&self, p: usize) -> String;
    fn get(&self, p: usize, i: usize) -> f64;
    fn set(&mut self, p: usize, i: usize, v: f64);
    /// Loss at the current parameter values.
    fn eval(&self) -> Result<f64>;
    /// Analytic gradients at the current parameter values, in param order.
    fn analytic(&self) -> Result<Vec<Vec<f64>>>;
}

/// Worst offending coordinate of an FD sweep over a whole model.
#[derive(Debug, Clone)]
pub struct ParamGradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    pub worst_param: String,
    pub worst_coord: usize,
    pub checked: usize,
}

pub fn grad_check_params<T: FdTarget>(target: &mut T, eps: f64, rtol: f64) -> Result<ParamGradCheckReport> {
    let analytic = target.analytic()?;
    let mut report = ParamGradCheckReport {
        max_rel_err: 0.0,
        pass: true,
        worst_param: String::new(),
        worst_coord: 0,
        checked: 0,
    };
    for p in 0..target.param_count() {
        for i in 0..target.param_len(p) {
            let orig = target.get(p, i);
            target.set(p, i, orig + eps);
            let fp = target.eval()?;
            target.set(p, i, orig - eps);
            let fm = target.eval()?;
            target.set(p, i, orig);
            let numeric = (fp - fm) / (2.0 * eps);
            let e = rel_err(analytic[p][i], numeric);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst_param = target.param_name(p);
                report.worst_coord = i;
            }
        }
    }
    report.pass = report.max_rel_err <= rtol;
    Ok(report)
}

/// Deterministic pseudo-random fill for tests and harnesses: uniform in
/// [lo, hi) from a splitmix64 stream.
pub fn fill_uniform<E: Scalar>(t: &mut Tensor<E>, lo: f64, hi: f64, seed: u64) {
    let mut s = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    for v in t.data.iter_mut() {
        s = splitmix64(&mut s);
        let u = (s >> 11) as f64 / (1u64 << 53) as f64;
        *v = E::from_f64(lo + (hi - lo) * u);
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
