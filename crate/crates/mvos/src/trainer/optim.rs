//! SGD-with-momentum and Adam, with per-group learning rates (recurrent vs
//! non-recurrent) and an optional recurrent-group freeze for phase 1.

use crate::scalar::Scalar;
use crate::tensor::{ParamGroup, Parameter};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimKind {
    pub fn sgd_default() -> OptimKind {
        OptimKind::SgdMomentum { momentum: 0.9 }
    }

    pub fn adam_default() -> OptimKind {
        OptimKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Slot<E> {
    m: Vec<E>,
    v: Vec<E>,
}

pub struct Optimizer<E> {
    kind: OptimKind,
    slots: Vec<Slot<E>>,
    t: usize,
}

impl<E: Scalar> Optimizer<E> {
    pub fn new(kind: OptimKind, params: &[&Parameter<E>]) -> Optimizer<E> {
        let needs_v = matches!(kind, OptimKind::Adam { .. });
        Optimizer {
            kind,
            slots: params
                .iter()
                .map(|p| Slot {
                    m: vec![E::ZERO; p.numel()],
                    v: if needs_v { vec![E::ZERO; p.numel()] } else { Vec::new() },
                })
                .collect(),
            t: 0,
        }
    }

    /// Apply one update. `grads` aligns with `params`; `None` entries (and
    /// frozen recurrent parameters) are left untouched, including their
    /// optimizer state.
    pub fn step(
        &mut self,
        params: &mut [&mut Parameter<E>],
        grads: &[Option<Vec<E>>],
        lr_recurrent: f64,
        lr_non_recurrent: f64,
        freeze_recurrent: bool,
    ) {
        assert_eq!(params.len(), self.slots.len(), "optimizer bound to a different model");
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        for ((p, g), slot) in params.iter_mut().zip(grads).zip(&mut self.slots) {
            let Some(g) = g else { continue };
            if freeze_recurrent && p.group == ParamGroup::Recurrent {
                continue;
            }
            let lr = E::from_f64(match p.group {
                ParamGroup::Recurrent => lr_recurrent,
                ParamGroup::NonRecurrent => lr_non_recurrent,
            });
            match self.kind {
                OptimKind::SgdMomentum { momentum } => {
                    let mu = E::from_f64(momentum);
                    for i in 0..g.len() {
                        slot.m[i] = slot.m[i] * mu + g[i];
                        p.value.data[i] -= lr * slot.m[i];
                    }
                }
                OptimKind::Adam { beta1, beta2, eps } => {
                    let b1 = E::from_f64(beta1);
                    let b2 = E::from_f64(beta2);
                    let eps = E::from_f64(eps);
                    let c1 = E::from_f64(1.0 - beta1.powi(self.t as i32));
                    let c2 = E::from_f64(1.0 - beta2.powi(self.t as i32));
                    for i in 0..g.len() {
                        slot.m[i] = slot.m[i] * b1 + g[i] * (E::ONE - b1);
                        slot.v[i] = slot.v[i] * b2 + g[i] * g[i] * (E::ONE - b2);
                        let mhat = slot.m[i] / c1;
                        let vhat = slot.v[i] / c2;
                        p.value.data[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};

    fn params() -> Vec<Parameter<f64>> {
        vec![
            Parameter::new("r", Tensor::full(Shape::scalar(), 1.0), ParamGroup::Recurrent),
            Parameter::new("n", Tensor::full(Shape::scalar(), 1.0), ParamGroup::NonRecurrent),
        ]
    }

    #[test]
    fn sgd_first_step_moves_by_group_lr() {
        let mut ps = params();
        let mut opt = Optimizer::new(OptimKind::SgdMomentum { momentum: 0.9 }, &ps.iter().collect::<Vec<_>>());
        let grads = vec![Some(vec![1.0]), Some(vec![1.0])];
        let mut refs: Vec<&mut Parameter<f64>> = ps.iter_mut().collect();
        opt.step(&mut refs, &grads, 0.1, 0.01, false);
        assert!((ps[0].value.data[0] - 0.9).abs() < 1e-12); // recurrent lr
        assert!((ps[1].value.data[0] - 0.99).abs() < 1e-12); // non-recurrent lr
    }

    #[test]
    fn freeze_skips_recurrent_bitwise() {
        let mut ps = params();
        let before = ps[0].value.data[0].to_bits();
        let mut opt = Optimizer::new(OptimKind::adam_default(), &ps.iter().collect::<Vec<_>>());
        let grads = vec![Some(vec![5.0]), Some(vec![5.0])];
        let mut refs: Vec<&mut Parameter<f64>> = ps.iter_mut().collect();
        opt.step(&mut refs, &grads, 0.1, 0.1, true);
        assert_eq!(ps[0].value.data[0].to_bits(), before);
        assert_ne!(ps[1].value.data[0], 1.0);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        // bias-corrected Adam moves ~lr on the first step regardless of grad scale
        let mut ps = params();
        let mut opt = Optimizer::new(OptimKind::adam_default(), &ps.iter().collect::<Vec<_>>());
        let grads = vec![Some(vec![3.7]), Some(vec![-0.02])];
        let mut refs: Vec<&mut Parameter<f64>> = ps.iter_mut().collect();
        opt.step(&mut refs, &grads, 0.05, 0.05, false);
        assert!((ps[0].value.data[0] - (1.0 - 0.05)).abs() < 1e-6);
        assert!((ps[1].value.data[0] - (1.0 + 0.05)).abs() < 1e-6);
    }

    #[test]
    fn none_grads_leave_params_untouched() {
        let mut ps = params();
        let mut opt = Optimizer::new(OptimKind::adam_default(), &ps.iter().collect::<Vec<_>>());
        let grads = vec![None, Some(vec![1.0])];
        let mut refs: Vec<&mut Parameter<f64>> = ps.iter_mut().collect();
        opt.step(&mut refs, &grads, 0.1, 0.1, false);
        assert_eq!(ps[0].value.data[0], 1.0);
    }
}
