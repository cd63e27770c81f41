//! LSTM cell and bidirectional encoder built from tape primitives.
//!
//! Gate layout in the fused `[input, 4·hidden]` weight is input, forget,
//! candidate, output.

use rand::Rng;

use super::params::{Bound, ParamId, ParamStore};
use super::{Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmIds {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmIds {
    /// Registers the weights of one direction; the forget bias starts at 1.
    pub fn register<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, input: usize, hidden: usize) -> Self {
        let wx = store.insert_weight(rng, &format!("{prefix}.wx"), input, 4 * hidden);
        let wh = store.insert_weight(rng, &format!("{prefix}.wh"), hidden, 4 * hidden);
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].fill(1.0);
        let b = store.insert(&format!("{prefix}.b"), &[4 * hidden], bias);
        Self { wx, wh, b, hidden }
    }
}

/// One step given the precomputed input projection `x·wx` (shape `[4h]`).
pub fn lstm_cell(
    tape: &Tape,
    projected_input: Tensor,
    h: Tensor,
    c: Tensor,
    ids: &LstmIds,
    p: &Bound,
) -> Result<(Tensor, Tensor)> {
    let hd = ids.hidden;
    let gates = tape.matmul(h, p[ids.wh])?;
    let gates = tape.add(gates, projected_input)?;
    let gates = tape.add(gates, p[ids.b])?;
    let i = tape.sigmoid(tape.slice(gates, 0, hd)?);
    let f = tape.sigmoid(tape.slice(gates, hd, hd)?);
    let g = tape.tanh(tape.slice(gates, 2 * hd, hd)?);
    let o = tape.sigmoid(tape.slice(gates, 3 * hd, hd)?);
    let c_next = tape.add(tape.mul(f, c)?, tape.mul(i, g)?)?;
    let h_next = tape.mul(o, tape.tanh(c_next))?;
    Ok((h_next, c_next))
}

fn run_direction(tape: &Tape, projected: Tensor, steps: usize, ids: &LstmIds, p: &Bound, reverse: bool) -> Result<Vec<Tensor>> {
    let hd = ids.hidden;
    let mut h = tape.zeros(&[hd]);
    let mut c = tape.zeros(&[hd]);
    let mut out = vec![h; steps];
    let order: Vec<usize> = if reverse { (0..steps).rev().collect() } else { (0..steps).collect() };
    for s in order {
        let xs = tape.row(projected, s)?;
        (h, c) = lstm_cell(tape, xs, h, c, ids, p)?;
        out[s] = h;
    }
    Ok(out)
}

/// Encodes `[S, input]` embeddings. Returns per-word states `[S, 2h]` (forward
/// then backward half) and the summary `[fwd_S ; bwd_1]` of length `2h`.
pub fn bilstm_encode(
    tape: &Tape,
    embedded: Tensor,
    forward: &LstmIds,
    backward: &LstmIds,
    p: &Bound,
) -> Result<(Tensor, Tensor)> {
    let shape = tape.shape(embedded);
    let steps = match shape.as_slice() {
        [0, _] => return Err(Error::Input("cannot encode an empty sequence".into())),
        [s, _] => *s,
        s => return Err(Error::shape("bilstm_encode", format!("embedded shape {s:?}"))),
    };
    let proj_f = tape.matmul(embedded, p[forward.wx])?;
    let proj_b = tape.matmul(embedded, p[backward.wx])?;
    let fwd = run_direction(tape, proj_f, steps, forward, p, false)?;
    let bwd = run_direction(tape, proj_b, steps, backward, p, true)?;
    let mut rows = Vec::with_capacity(steps);
    for s in 0..steps {
        rows.push(tape.concat(&[fwd[s], bwd[s]])?);
    }
    let states = tape.stack_rows(&rows)?;
    let summary = tape.concat(&[fwd[steps - 1], bwd[0]])?;
    Ok((states, summary))
}
