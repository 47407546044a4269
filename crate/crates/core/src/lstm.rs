//! Single-layer LSTM cell composed from tape primitives.
//!
//! The cell keeps one combined weight matrix of shape `[4h, input + h]`
//! applied to `[x; h_prev]` and one combined bias of shape `[4h]`. The gate
//! block order is input, forget, cell, output; the forget-gate bias block is
//! initialized to +1 so early training does not flush cell state.

use rand::Rng;

use crate::tape::{Tape, TapeError, VarId};
use crate::tensor::Tensor;

/// Trainable parameters of one LSTM cell.
#[derive(Debug, Clone)]
pub struct LstmParams {
    /// `[4 * hidden, input_dim + hidden]`.
    pub w: Tensor,
    /// `[4 * hidden]`.
    pub b: Tensor,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmParams {
    /// Uniform init on `[-1/sqrt(hidden), 1/sqrt(hidden)]` with the forget
    /// bias block set to +1.
    pub fn init<R: Rng>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w = Tensor::uniform(&[4 * hidden, input_dim + hidden], -bound, bound, rng).tracked();
        let mut b = Tensor::zeros(&[4 * hidden]);
        for j in hidden..2 * hidden {
            b.values[j] = 1.0;
        }
        LstmParams {
            w,
            b: b.tracked(),
            input_dim,
            hidden,
        }
    }
}

/// Hidden and cell state at one timestep, as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: VarId,
    pub c: VarId,
}

/// LSTM parameters bound onto a tape for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w: VarId,
    pub b: VarId,
    pub hidden: usize,
}

impl LstmVars {
    pub fn bind(tape: &mut Tape, params: &LstmParams) -> Self {
        LstmVars {
            w: tape.leaf(&params.w),
            b: tape.leaf(&params.b),
            hidden: params.hidden,
        }
    }

    /// All-zero initial state.
    pub fn zero_state(&self, tape: &mut Tape) -> Result<LstmState, TapeError> {
        let h = tape.constant(&[self.hidden], vec![0.0; self.hidden])?;
        let c = tape.constant(&[self.hidden], vec![0.0; self.hidden])?;
        Ok(LstmState { h, c })
    }

    /// One step: consumes `x` and the previous state, returns the next state.
    pub fn step(
        &self,
        tape: &mut Tape,
        x: VarId,
        prev: &LstmState,
    ) -> Result<LstmState, TapeError> {
        let h = self.hidden;
        let xin = tape.concat(&[x, prev.h])?;
        let lin = tape.matvec(self.w, xin)?;
        let pre = tape.add(lin, self.b)?;
        let i_pre = tape.slice(pre, 0, h)?;
        let f_pre = tape.slice(pre, h, h)?;
        let g_pre = tape.slice(pre, 2 * h, h)?;
        let o_pre = tape.slice(pre, 3 * h, h)?;
        let i = tape.sigmoid(i_pre);
        let f = tape.sigmoid(f_pre);
        let g = tape.tanh(g_pre);
        let o = tape.sigmoid(o_pre);
        let fc = tape.mul(f, prev.c)?;
        let ig = tape.mul(i, g)?;
        let c = tape.add(fc, ig)?;
        let ct = tape.tanh(c);
        let h_next = tape.mul(o, ct)?;
        Ok(LstmState { h: h_next, c })
    }
}
