//! LSTM cell built from graph primitives.
//!
//! Parameters for a cell named `p` are four gate layers `p.{i,f,o,g}` with
//! weights `[H, in + H]` applied to `concat(x, h_prev)`.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{ParamSet, Session};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

pub const GATES: [&str; 4] = ["i", "f", "o", "g"];

pub fn init_lstm(params: &mut ParamSet, prefix: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) {
    for gate in GATES {
        params.insert_xavier(format!("{prefix}.{gate}.w"), &[hidden, input + hidden], rng);
        params.insert_zeros(format!("{prefix}.{gate}.b"), &[hidden]);
    }
}

pub fn zero_state(sess: &mut Session, hidden: usize) -> LstmState {
    LstmState {
        h: sess.input("h0", Tensor::zeros(&[hidden])),
        c: sess.input("c0", Tensor::zeros(&[hidden])),
    }
}

/// `i, f, o = sigmoid(.)`, `g = tanh(.)`, `c = f*c_prev + i*g`, `h = o*tanh(c)`.
pub fn lstm_step(sess: &mut Session, prefix: &str, x: Var, state: LstmState) -> Result<LstmState> {
    let (hs, cs) = (sess.graph.shape(state.h).to_vec(), sess.graph.shape(state.c).to_vec());
    if hs != cs || hs.len() != 1 {
        return Err(Error::shape("lstm state", &hs, &cs));
    }
    let xh = sess.graph.concat(&[x, state.h])?;
    let mut pre = Vec::with_capacity(4);
    for gate in GATES {
        let (w, b) = sess.layer(&format!("{prefix}.{gate}"))?;
        if sess.graph.shape(w)[0] != hs[0] {
            return Err(Error::shape("lstm gate", sess.graph.shape(w), &hs));
        }
        pre.push(sess.graph.linear(xh, w, b)?);
    }
    let i = sess.graph.sigmoid(pre[0]);
    let f = sess.graph.sigmoid(pre[1]);
    let o = sess.graph.sigmoid(pre[2]);
    let g = sess.graph.tanh(pre[3]);
    let keep = sess.graph.mul(f, state.c)?;
    let write = sess.graph.mul(i, g)?;
    let c = sess.graph.add(keep, write)?;
    let tc = sess.graph.tanh(c);
    let h = sess.graph.mul(o, tc)?;
    Ok(LstmState { h, c })
}
