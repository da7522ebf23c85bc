//! LSTM cell and bi-directional layer on top of the tape.
//!
//! Gate layout along the `4H` axis is `[input | forget | cell | output]`.
//! Initial hidden and cell states are zero.

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{DrfError, Result};

/// Parameter handles for one LSTM direction.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub input_dim: usize,
    pub hidden: usize,
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
}

impl Lstm {
    /// Weights uniform in `[-1/√H, 1/√H]`, forget-gate bias 1, other biases 0.
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_x = store.add_uniform(format!("{prefix}.w_x"), &[input_dim, 4 * hidden], bound, rng);
        let w_h = store.add_uniform(format!("{prefix}.w_h"), &[hidden, 4 * hidden], bound, rng);
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let bias = store.add(format!("{prefix}.bias"), Tensor::new(vec![4 * hidden], b).expect("bias length"));
        Self { input_dim, hidden, w_x, w_h, bias }
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> BoundLstm {
        BoundLstm {
            input_dim: self.input_dim,
            hidden: self.hidden,
            w_x: tape.param(store, self.w_x),
            w_h: tape.param(store, self.w_h),
            bias: tape.param(store, self.bias),
        }
    }
}

/// LSTM weights recorded on a particular tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundLstm {
    pub input_dim: usize,
    pub hidden: usize,
    pub w_x: Var,
    pub w_h: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl BoundLstm {
    pub fn zero_state(&self, tape: &mut Tape, batch: usize) -> LstmState {
        let z = tape.constant(&Tensor::zeros(&[batch, self.hidden]));
        LstmState { h: z, c: z }
    }

    /// `x · W_x + b` for any number of rows.
    pub fn project_input(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let [_, d] = tape.shape(x);
        if d != self.input_dim {
            return Err(DrfError::Shape { op: "lstm", detail: format!("input width {d}, expected {}", self.input_dim) });
        }
        let xw = tape.matmul(x, self.w_x)?;
        tape.add_row(xw, self.bias)
    }

    /// One recurrence step given the already projected input.
    pub fn step_projected(&self, tape: &mut Tape, xw: Var, state: LstmState) -> Result<LstmState> {
        let h = self.hidden;
        let [rows, _] = tape.shape(xw);
        let [hr, hc] = tape.shape(state.h);
        if hr != rows || hc != h {
            return Err(DrfError::Shape { op: "lstm", detail: format!("hidden state {hr}x{hc}, expected {rows}x{h}") });
        }
        let hw = tape.matmul(state.h, self.w_h)?;
        let gates = tape.add(xw, hw)?;
        let i = tape.slice_cols(gates, 0, h)?;
        let i = tape.sigmoid(i);
        let f = tape.slice_cols(gates, h, 2 * h)?;
        let f = tape.sigmoid(f);
        let g = tape.slice_cols(gates, 2 * h, 3 * h)?;
        let g = tape.tanh(g);
        let o = tape.slice_cols(gates, 3 * h, 4 * h)?;
        let o = tape.sigmoid(o);
        let keep = tape.mul(f, state.c)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        Ok(LstmState { h, c })
    }

    pub fn step(&self, tape: &mut Tape, x: Var, state: LstmState) -> Result<LstmState> {
        let xw = self.project_input(tape, x)?;
        self.step_projected(tape, xw, state)
    }
}

/// Single LSTM cell evaluation: returns `(h_t, c_t)`.
pub fn lstm_cell(tape: &mut Tape, x: Var, h_prev: Var, c_prev: Var, weights: &BoundLstm) -> Result<(Var, Var)> {
    let s = weights.step(tape, x, LstmState { h: h_prev, c: c_prev })?;
    Ok((s.h, s.c))
}

/// Bi-directional layer over a sequence stored as `steps` stacked row blocks
/// of `batch` rows each. Output has the same layout with width `2H`: forward
/// hidden state followed by the backward (time-reversed) hidden state.
pub fn bilstm_layer(
    tape: &mut Tape,
    seq: Var,
    steps: usize,
    batch: usize,
    forward: &BoundLstm,
    backward: &BoundLstm,
) -> Result<Var> {
    let [rows, _] = tape.shape(seq);
    if steps == 0 || rows != steps * batch {
        return Err(DrfError::Shape { op: "bilstm", detail: format!("{rows} rows for {steps} steps of batch {batch}") });
    }
    let proj_f = forward.project_input(tape, seq)?;
    let proj_b = backward.project_input(tape, seq)?;

    let mut fwd = Vec::with_capacity(steps);
    let mut state = forward.zero_state(tape, batch);
    for t in 0..steps {
        let xw = tape.slice_rows(proj_f, t * batch, (t + 1) * batch)?;
        state = forward.step_projected(tape, xw, state)?;
        fwd.push(state.h);
    }

    let mut bwd = vec![None; steps];
    let mut state = backward.zero_state(tape, batch);
    for t in (0..steps).rev() {
        let xw = tape.slice_rows(proj_b, t * batch, (t + 1) * batch)?;
        state = backward.step_projected(tape, xw, state)?;
        bwd[t] = Some(state.h);
    }

    let mut outs = Vec::with_capacity(steps);
    for (f, b) in fwd.into_iter().zip(bwd) {
        outs.push(tape.concat_cols(&[f, b.expect("filled above")])?);
    }
    tape.stack_rows(&outs)
}
