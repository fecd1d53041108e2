//! Reference recurrent cells: Elman RNN, LSTM, GRU, and their convolutional
//! variants. These are the comparison baselines for the LIAF/LIF layers, so
//! their arithmetic follows the textbook definitions exactly:
//!
//! ```text
//! RNN   c' = act(W x + U c + b)            (no output projection)
//! LSTM  f,i,o = sigmoid(W. x + U. h + b.)
//!       g     = tanh(Wc x + Uc h + bc)
//!       c'    = f.c + i.g ,  h' = o.tanh(c')
//! GRU   z,r   = sigmoid(W. x + U. h + b.)
//!       g     = tanh(Wh x + Uh (r.h) + bh)
//!       h'    = (1-z).h + z.g
//! ```
//!
//! A cell is convolutional when its gate tensors are rank 4; `W * x` and
//! `U * h` are then 2-D cross-correlations with shared zero padding.

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::tensor::{self, OpCounter, Tensor};

#[derive(Debug, Clone)]
pub struct GateParams {
    /// input weights: (K, L) dense or (I, J, K, L) conv
    pub w: Tensor,
    /// recurrent weights: (L, L) dense or (I, J, L, L) conv
    pub u: Tensor,
    /// per-channel bias (L)
    pub b: Tensor,
}

impl GateParams {
    fn validate(&self, context: &'static str) -> Result<()> {
        let ok = match (self.w.rank(), self.u.rank()) {
            (2, 2) => {
                self.w.shape()[1] == self.u.shape()[0]
                    && self.u.shape()[0] == self.u.shape()[1]
                    && self.b.len() == self.u.shape()[1]
            }
            (4, 4) => {
                self.w.shape()[3] == self.u.shape()[3]
                    && self.u.shape()[2] == self.u.shape()[3]
                    && self.b.len() == self.w.shape()[3]
            }
            _ => false,
        };
        if !ok {
            return Err(Error::ShapeMismatch {
                context,
                expected: self.w.shape().to_vec(),
                got: self.u.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn is_conv(&self) -> bool {
        self.w.rank() == 4
    }

    pub fn hidden(&self) -> usize {
        match self.w.rank() {
            2 => self.w.shape()[1],
            _ => self.w.shape()[3],
        }
    }
}

/// W x + U h + b, the shared affine block of every gate.
fn gate_affine(
    gp: &GateParams,
    x: &Tensor,
    h: &Tensor,
    padding: usize,
    mut counter: Option<&mut OpCounter>,
) -> Result<Tensor> {
    let wx;
    let uh;
    if gp.is_conv() {
        wx = tensor::conv2d(x, &gp.w, padding, counter.as_deref_mut())?;
        uh = tensor::conv2d(h, &gp.u, padding, counter.as_deref_mut())?;
    } else {
        wx = tensor::matmul(x, &gp.w, counter.as_deref_mut())?;
        uh = tensor::matmul(h, &gp.u, counter.as_deref_mut())?;
    }
    let s = tensor::add(&wx, &uh, counter.as_deref_mut())?;
    tensor::add_bias(&s, &gp.b, counter)
}

fn activated(
    x: &Tensor,
    act: Activation,
    counter: &mut Option<&mut OpCounter>,
) -> Tensor {
    if let Some(c) = counter.as_deref_mut() {
        c.other += x.len() as u64;
    }
    tensor::map(x, |v| act.eval(v))
}

/// 1 - x, ledgered as a selection-class operation.
fn complement(x: &Tensor, counter: &mut Option<&mut OpCounter>) -> Tensor {
    if let Some(c) = counter.as_deref_mut() {
        c.other += x.len() as u64;
    }
    tensor::map(x, |v| 1.0 - v)
}

#[derive(Debug, Clone)]
pub struct RnnParams {
    pub gate: GateParams,
    pub act: Activation,
    pub padding: usize,
}

impl RnnParams {
    pub fn new(gate: GateParams, act: Activation, padding: usize) -> Result<Self> {
        gate.validate("rnn gate")?;
        Ok(Self { gate, act, padding })
    }
}

#[derive(Debug, Clone)]
pub struct LstmParams {
    pub f: GateParams,
    pub i: GateParams,
    pub o: GateParams,
    pub c: GateParams,
    pub padding: usize,
}

impl LstmParams {
    pub fn new(
        f: GateParams,
        i: GateParams,
        o: GateParams,
        c: GateParams,
        padding: usize,
    ) -> Result<Self> {
        f.validate("lstm forget gate")?;
        i.validate("lstm input gate")?;
        o.validate("lstm output gate")?;
        c.validate("lstm candidate gate")?;
        Ok(Self { f, i, o, c, padding })
    }
}

#[derive(Debug, Clone)]
pub struct GruParams {
    pub z: GateParams,
    pub r: GateParams,
    pub h: GateParams,
    pub padding: usize,
}

impl GruParams {
    pub fn new(z: GateParams, r: GateParams, h: GateParams, padding: usize) -> Result<Self> {
        z.validate("gru update gate")?;
        r.validate("gru reset gate")?;
        h.validate("gru candidate gate")?;
        Ok(Self { z, r, h, padding })
    }
}

#[derive(Debug, Clone)]
pub enum BaselineCell {
    Rnn(RnnParams),
    Lstm(LstmParams),
    Gru(GruParams),
}

#[derive(Debug, Clone)]
pub struct BaselineState {
    pub h: Tensor,
    /// LSTM cell state; None for RNN and GRU
    pub c: Option<Tensor>,
}

impl BaselineCell {
    fn first_gate(&self) -> &GateParams {
        match self {
            BaselineCell::Rnn(p) => &p.gate,
            BaselineCell::Lstm(p) => &p.f,
            BaselineCell::Gru(p) => &p.z,
        }
    }

    /// Hidden-state shape for inputs shaped `x_shape`.
    pub fn state_shape(&self, x_shape: &[usize]) -> Result<Vec<usize>> {
        let gp = self.first_gate();
        if gp.is_conv() {
            if x_shape.len() != 4 || x_shape[3] != gp.w.shape()[2] {
                return Err(Error::ShapeMismatch {
                    context: "baseline conv input",
                    expected: vec![gp.w.shape()[2]],
                    got: x_shape.to_vec(),
                });
            }
            let padding = match self {
                BaselineCell::Rnn(p) => p.padding,
                BaselineCell::Lstm(p) => p.padding,
                BaselineCell::Gru(p) => p.padding,
            };
            let oh = x_shape[1] + 2 * padding - gp.w.shape()[0] + 1;
            let ow = x_shape[2] + 2 * padding - gp.w.shape()[1] + 1;
            // the recurrent conv must preserve extents or states drift in size
            if oh != x_shape[1] || ow != x_shape[2] {
                return Err(Error::InvalidConfig(
                    "conv baseline cells need extent-preserving padding".into(),
                ));
            }
            Ok(vec![x_shape[0], oh, ow, gp.hidden()])
        } else {
            if x_shape.len() != 2 || x_shape[1] != gp.w.shape()[0] {
                return Err(Error::ShapeMismatch {
                    context: "baseline dense input",
                    expected: vec![gp.w.shape()[0]],
                    got: x_shape.to_vec(),
                });
            }
            Ok(vec![x_shape[0], gp.hidden()])
        }
    }

    pub fn init_state(&self, x_shape: &[usize]) -> Result<BaselineState> {
        let shape = self.state_shape(x_shape)?;
        let h = Tensor::zeros(&shape)?;
        let c = match self {
            BaselineCell::Lstm(_) => Some(Tensor::zeros(&shape)?),
            _ => None,
        };
        Ok(BaselineState { h, c })
    }

    /// One step. Returns the new state; the cell output is `state.h`.
    pub fn step(
        &self,
        state: &BaselineState,
        x: &Tensor,
        mut counter: Option<&mut OpCounter>,
    ) -> Result<BaselineState> {
        match self {
            BaselineCell::Rnn(p) => {
                let s = gate_affine(&p.gate, x, &state.h, p.padding, counter.as_deref_mut())?;
                let h = activated(&s, p.act, &mut counter);
                Ok(BaselineState { h, c: None })
            }
            BaselineCell::Lstm(p) => {
                let c_prev = state.c.as_ref().ok_or_else(|| {
                    Error::InvalidConfig("lstm step without cell state".into())
                })?;
                let f = gate_affine(&p.f, x, &state.h, p.padding, counter.as_deref_mut())?;
                let f = activated(&f, Activation::Sigmoid, &mut counter);
                let i = gate_affine(&p.i, x, &state.h, p.padding, counter.as_deref_mut())?;
                let i = activated(&i, Activation::Sigmoid, &mut counter);
                let o = gate_affine(&p.o, x, &state.h, p.padding, counter.as_deref_mut())?;
                let o = activated(&o, Activation::Sigmoid, &mut counter);
                let g = gate_affine(&p.c, x, &state.h, p.padding, counter.as_deref_mut())?;
                let g = activated(&g, Activation::Tanh, &mut counter);
                let fc = tensor::hadamard(&f, c_prev, counter.as_deref_mut())?;
                let ig = tensor::hadamard(&i, &g, counter.as_deref_mut())?;
                let c = tensor::add(&fc, &ig, counter.as_deref_mut())?;
                let tc = activated(&c, Activation::Tanh, &mut counter);
                let h = tensor::hadamard(&o, &tc, counter.as_deref_mut())?;
                Ok(BaselineState { h, c: Some(c) })
            }
            BaselineCell::Gru(p) => {
                let z = gate_affine(&p.z, x, &state.h, p.padding, counter.as_deref_mut())?;
                let z = activated(&z, Activation::Sigmoid, &mut counter);
                let r = gate_affine(&p.r, x, &state.h, p.padding, counter.as_deref_mut())?;
                let r = activated(&r, Activation::Sigmoid, &mut counter);
                let rh = tensor::hadamard(&r, &state.h, counter.as_deref_mut())?;
                let g = gate_affine(&p.h, x, &rh, p.padding, counter.as_deref_mut())?;
                let g = activated(&g, Activation::Tanh, &mut counter);
                let zc = complement(&z, &mut counter);
                let keep = tensor::hadamard(&zc, &state.h, counter.as_deref_mut())?;
                let take = tensor::hadamard(&z, &g, counter.as_deref_mut())?;
                let h = tensor::add(&keep, &take, counter.as_deref_mut())?;
                Ok(BaselineState { h, c: None })
            }
        }
    }

    /// Unrolls `step` over (B, T, ...) input from a zero state; returns the
    /// stacked hidden states and the final state.
    pub fn run_sequence(
        &self,
        x: &Tensor,
        mut counter: Option<&mut OpCounter>,
    ) -> Result<(Tensor, BaselineState)> {
        let t = x.shape()[1];
        let x0 = tensor::select_time(x, 0)?;
        let mut state = self.init_state(x0.shape())?;
        let mut hs = Vec::with_capacity(t);
        for ti in 0..t {
            let xt = tensor::select_time(x, ti)?;
            state = self.step(&state, &xt, counter.as_deref_mut())?;
            hs.push(state.h.clone());
        }
        Ok((tensor::stack_time(&hs)?, state))
    }
}
