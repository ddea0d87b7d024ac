//! Gated recurrent cells.
//!
//! Both cells act on batches `[m×dim]` (or single vectors) and use one
//! parameter set for every timestep of an unroll.

use super::params::{Binding, ParamId, ParamKind, ParameterStore, Tag};
use super::NnError;
use crate::autodiff::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Gru,
    Lstm,
}

fn check_width(tape: &Tape, v: Var, expected: usize, what: &'static str) -> Result<usize, NnError> {
    match *tape.shape(v) {
        [n] if n == expected => Ok(0),
        [m, n] if n == expected => Ok(m),
        _ => Err(NnError::Dim {
            what,
            expected,
            got: tape.shape(v).last().copied().unwrap_or(0),
        }),
    }
}

fn as_batch(tape: &mut Tape, v: Var) -> Result<Var, NnError> {
    match *tape.shape(v) {
        [n] => Ok(tape.reshape(v, vec![1, n])?),
        _ => Ok(v),
    }
}

fn restore(tape: &mut Tape, v: Var, batched: bool) -> Result<Var, NnError> {
    if batched {
        Ok(v)
    } else {
        let n = tape.shape(v)[1];
        Ok(tape.reshape(v, vec![n])?)
    }
}

/// GRU with update gate `u`, reset gate `r` and candidate `h̃`:
///
/// ```text
/// u  = σ(W_u·[x, h] + b_u)
/// r  = σ(W_r·[x, h] + b_r)
/// h̃  = tanh(W_c·[x, r⊙h] + b_c)
/// h′ = (1 − u)⊙h + u⊙h̃
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct GruCell {
    pub input_dim: usize,
    pub state_dim: usize,
    /// Stacked `[W_u; W_r]`, shape `[2H × (in+H)]`.
    pub w_gates: ParamId,
    pub b_gates: ParamId,
    pub w_cand: ParamId,
    pub b_cand: ParamId,
}

impl GruCell {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        tag: Tag,
        input_dim: usize,
        state_dim: usize,
    ) -> Result<Self, NnError> {
        let cols = input_dim + state_dim;
        let h = state_dim;
        let w_gates = store.register(
            format!("{name}.w_gates"),
            tag,
            &[2 * h, cols],
            ParamKind::Weight {
                fan_in: cols,
                fan_out: h,
            },
        )?;
        let b_gates = store.register(format!("{name}.b_gates"), tag, &[2 * h], ParamKind::Bias)?;
        let w_cand = store.register(
            format!("{name}.w_cand"),
            tag,
            &[h, cols],
            ParamKind::Weight {
                fan_in: cols,
                fan_out: h,
            },
        )?;
        let b_cand = store.register(format!("{name}.b_cand"), tag, &[h], ParamKind::Bias)?;
        Ok(GruCell {
            input_dim,
            state_dim,
            w_gates,
            b_gates,
            w_cand,
            b_cand,
        })
    }

    pub fn kind(&self) -> CellKind {
        CellKind::Gru
    }

    pub fn step(&self, tape: &mut Tape, params: &Binding, x: Var, h: Var) -> Result<Var, NnError> {
        let mx = check_width(tape, x, self.input_dim, "gru input")?;
        let mh = check_width(tape, h, self.state_dim, "gru state")?;
        if mx != mh {
            return Err(NnError::Batch { lhs: mx, rhs: mh });
        }
        let batched = tape.shape(x).len() == 2;
        let (x, h) = (as_batch(tape, x)?, as_batch(tape, h)?);
        let n = self.state_dim;

        let xh = tape.concat(&[x, h], 1)?;
        let pre = tape.matmul_t(xh, params.var(self.w_gates))?;
        let pre = tape.add(pre, params.var(self.b_gates))?;
        let gates = tape.sigmoid(pre)?;
        let u = tape.slice(gates, 1, 0..n)?;
        let r = tape.slice(gates, 1, n..2 * n)?;
        let rh = tape.mul(r, h)?;
        let xrh = tape.concat(&[x, rh], 1)?;
        let cand = tape.matmul_t(xrh, params.var(self.w_cand))?;
        let cand = tape.add(cand, params.var(self.b_cand))?;
        let cand = tape.tanh(cand)?;
        // h + u⊙(h̃ − h)
        let delta = tape.sub(cand, h)?;
        let step = tape.mul(u, delta)?;
        let h_next = tape.add(h, step)?;
        restore(tape, h_next, batched)
    }
}

/// LSTM with input, forget, candidate and output blocks stacked in that
/// order:
///
/// ```text
/// [i, f, g, o] = [σ, σ, tanh, σ](W·[x, h] + b)
/// c′ = f⊙c + i⊙g
/// h′ = o⊙tanh(c′)
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell {
    pub input_dim: usize,
    pub state_dim: usize,
    /// `[4H × (in+H)]`
    pub weight: ParamId,
    /// `[4H]`; entries `H..2H` are the forget-gate bias.
    pub bias: ParamId,
}

impl LstmCell {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        tag: Tag,
        input_dim: usize,
        state_dim: usize,
    ) -> Result<Self, NnError> {
        let cols = input_dim + state_dim;
        let weight = store.register(
            format!("{name}.w"),
            tag,
            &[4 * state_dim, cols],
            ParamKind::Weight {
                fan_in: cols,
                fan_out: state_dim,
            },
        )?;
        let bias = store.register(format!("{name}.b"), tag, &[4 * state_dim], ParamKind::Bias)?;
        Ok(LstmCell {
            input_dim,
            state_dim,
            weight,
            bias,
        })
    }

    pub fn kind(&self) -> CellKind {
        CellKind::Lstm
    }

    pub fn step(
        &self,
        tape: &mut Tape,
        params: &Binding,
        x: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var), NnError> {
        let mx = check_width(tape, x, self.input_dim, "lstm input")?;
        let mh = check_width(tape, h, self.state_dim, "lstm hidden")?;
        let mc = check_width(tape, c, self.state_dim, "lstm cell")?;
        if mx != mh || mh != mc {
            return Err(NnError::Batch {
                lhs: mx,
                rhs: if mx != mh { mh } else { mc },
            });
        }
        let batched = tape.shape(x).len() == 2;
        let (x, h, c) = (as_batch(tape, x)?, as_batch(tape, h)?, as_batch(tape, c)?);
        let n = self.state_dim;

        let xh = tape.concat(&[x, h], 1)?;
        let pre = tape.matmul_t(xh, params.var(self.weight))?;
        let pre = tape.add(pre, params.var(self.bias))?;
        let sig_if = tape.slice(pre, 1, 0..2 * n)?;
        let sig_if = tape.sigmoid(sig_if)?;
        let i = tape.slice(sig_if, 1, 0..n)?;
        let f = tape.slice(sig_if, 1, n..2 * n)?;
        let g = tape.slice(pre, 1, 2 * n..3 * n)?;
        let g = tape.tanh(g)?;
        let o = tape.slice(pre, 1, 3 * n..4 * n)?;
        let o = tape.sigmoid(o)?;

        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_next = tape.add(fc, ig)?;
        let tc = tape.tanh(c_next)?;
        let h_next = tape.mul(o, tc)?;
        Ok((
            restore(tape, h_next, batched)?,
            restore(tape, c_next, batched)?,
        ))
    }
}
