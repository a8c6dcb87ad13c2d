//! Convolutional LSTM: the standard peephole-free cell with every matrix
//! product replaced by a 3x3 convolution, so hidden state keeps the spatial
//! layout of its input. Kernel size 3, padding 1: hidden resolution always
//! equals input resolution.

use rand::Rng;

use crate::error::Result;
use crate::init;
use crate::scalar::Scalar;
use crate::tensor::{ParamGroup, Parameter, Shape, Tape, Tensor, VarId};

/// Orthogonal initializer for hidden-to-hidden kernels.
pub fn orthogonal_init<E: Scalar>(shape: Shape, seed: u64) -> Tensor<E> {
    init::orthogonal_kernel(shape, seed)
}

/// Hidden/cell maps carried across frames, as plain values.
#[derive(Debug, Clone)]
pub struct ConvLstmState<E> {
    pub h: Tensor<E>,
    pub c: Tensor<E>,
}

/// All-zero sequence-start state.
pub fn init_state<E: Scalar>(n: usize, c_hid: usize, h: usize, w: usize) -> ConvLstmState<E> {
    let shape = Shape::new(n, c_hid, h, w);
    ConvLstmState {
        h: Tensor::zeros(shape),
        c: Tensor::zeros(shape),
    }
}

/// Hidden/cell slots of one sequence bound into a tape.
#[derive(Debug, Clone, Copy)]
pub struct StateVars {
    pub h: VarId,
    pub c: VarId,
}

impl StateVars {
    pub fn bind<E: Scalar>(tape: &mut Tape<E>, state: &ConvLstmState<E>) -> StateVars {
        StateVars {
            h: tape.leaf(state.h.clone()),
            c: tape.leaf(state.c.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvLstmCell<E: Scalar> {
    pub w_xi: Parameter<E>,
    pub w_xf: Parameter<E>,
    pub w_xo: Parameter<E>,
    pub w_xc: Parameter<E>,
    pub w_hi: Parameter<E>,
    pub w_hf: Parameter<E>,
    pub w_ho: Parameter<E>,
    pub w_hc: Parameter<E>,
    pub b_i: Parameter<E>,
    pub b_f: Parameter<E>,
    pub b_o: Parameter<E>,
    pub b_c: Parameter<E>,
    pub c_in: usize,
    pub c_hid: usize,
}

impl<E: Scalar> ConvLstmCell<E> {
    /// Input-to-hidden kernels share the encoder's fan-in-scaled uniform
    /// init; hidden-to-hidden kernels are orthogonal; forget bias starts at
    /// +1 so early training does not wash the cell state out.
    pub fn new(prefix: &str, c_in: usize, c_hid: usize, rng: &mut impl Rng) -> ConvLstmCell<E> {
        let xk = Shape::new(c_hid, c_in, 3, 3);
        let hk = Shape::new(c_hid, c_hid, 3, 3);
        let bs = Shape::new(1, c_hid, 1, 1);
        let group = ParamGroup::Recurrent;
        fn x_kernel<E: Scalar>(prefix: &str, name: &str, shape: Shape, rng: &mut impl Rng) -> Parameter<E> {
            Parameter::new(
                format!("{prefix}.{name}"),
                init::fan_in_uniform(shape, rng),
                ParamGroup::Recurrent,
            )
        }
        fn h_kernel<E: Scalar>(prefix: &str, name: &str, shape: Shape, rng: &mut impl Rng) -> Parameter<E> {
            let seed = rng.gen::<u64>();
            Parameter::new(format!("{prefix}.{name}"), orthogonal_init(shape, seed), ParamGroup::Recurrent)
        }
        let w_xi = x_kernel(prefix, "W_xi", xk, rng);
        let w_xf = x_kernel(prefix, "W_xf", xk, rng);
        let w_xo = x_kernel(prefix, "W_xo", xk, rng);
        let w_xc = x_kernel(prefix, "W_xc", xk, rng);
        let w_hi = h_kernel(prefix, "W_hi", hk, rng);
        let w_hf = h_kernel(prefix, "W_hf", hk, rng);
        let w_ho = h_kernel(prefix, "W_ho", hk, rng);
        let w_hc = h_kernel(prefix, "W_hc", hk, rng);
        let bias = |name: &str, v: f64| {
            Parameter::new(format!("{prefix}.{name}"), Tensor::full(bs, E::from_f64(v)), group)
        };
        ConvLstmCell {
            w_xi,
            w_xf,
            w_xo,
            w_xc,
            w_hi,
            w_hf,
            w_ho,
            w_hc,
            b_i: bias("b_i", 0.0),
            b_f: bias("b_f", 1.0),
            b_o: bias("b_o", 0.0),
            b_c: bias("b_c", 0.0),
            c_in,
            c_hid,
        }
    }

    pub fn params(&self) -> Vec<&Parameter<E>> {
        vec![
            &self.w_xi, &self.w_xf, &self.w_xo, &self.w_xc, &self.w_hi, &self.w_hf, &self.w_ho,
            &self.w_hc, &self.b_i, &self.b_f, &self.b_o, &self.b_c,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<E>> {
        vec![
            &mut self.w_xi,
            &mut self.w_xf,
            &mut self.w_xo,
            &mut self.w_xc,
            &mut self.w_hi,
            &mut self.w_hf,
            &mut self.w_ho,
            &mut self.w_hc,
            &mut self.b_i,
            &mut self.b_f,
            &mut self.b_o,
            &mut self.b_c,
        ]
    }

    /// One timestep:
    ///   i = sig(W_xi*x + W_hi*h + b_i)     f = sig(W_xf*x + W_hf*h + b_f)
    ///   o = sig(W_xo*x + W_ho*h + b_o)     g = tanh(W_xc*x + W_hc*h + b_c)
    ///   c' = f.c + i.g                     h' = o.tanh(c')
    /// Returns h' (which is also the new hidden) and the new state slots.
    pub fn step(&self, tape: &mut Tape<E>, x: VarId, state: StateVars) -> Result<(VarId, StateVars)> {
        let gate = |tape: &mut Tape<E>, wx: &Parameter<E>, wh: &Parameter<E>, b: &Parameter<E>| -> Result<VarId> {
            let wx = tape.param(wx);
            let wh = tape.param(wh);
            let b = tape.param(b);
            let from_x = tape.conv2d(x, wx, Some(b), 1, 1)?;
            let from_h = tape.conv2d(state.h, wh, None, 1, 1)?;
            tape.add(from_x, from_h)
        };
        let i_pre = gate(tape, &self.w_xi, &self.w_hi, &self.b_i)?;
        let f_pre = gate(tape, &self.w_xf, &self.w_hf, &self.b_f)?;
        let o_pre = gate(tape, &self.w_xo, &self.w_ho, &self.b_o)?;
        let g_pre = gate(tape, &self.w_xc, &self.w_hc, &self.b_c)?;
        let i = tape.sigmoid(i_pre)?;
        let f = tape.sigmoid(f_pre)?;
        let o = tape.sigmoid(o_pre)?;
        let g = tape.tanh(g_pre)?;
        let keep = tape.mul(f, state.c)?;
        let write = tape.mul(i, g)?;
        let c_new = tape.add(keep, write)?;
        let c_act = tape.tanh(c_new)?;
        let h_new = tape.mul(o, c_act)?;
        Ok((h_new, StateVars { h: h_new, c: c_new }))
    }

    /// Run one step on plain values (fresh single-use tape).
    pub fn step_value(&self, x: &Tensor<E>, state: &ConvLstmState<E>) -> Result<(Tensor<E>, ConvLstmState<E>)> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let sv = StateVars::bind(&mut tape, state);
        let (h, s) = self.step(&mut tape, xv, sv)?;
        Ok((
            tape.detach(h),
            ConvLstmState {
                h: tape.detach(s.h),
                c: tape.detach(s.c),
            },
        ))
    }
}
