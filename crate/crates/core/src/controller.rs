//! Question encoder and the per-step layout controller.
//!
//! At step `t` the controller forms
//!
//! ```text
//! u    = W2 [W1(t) q + b1 ; c(t-1)] + b2
//! w    = softmax(MLP(u))                     module weights
//! cv_s = softmax_s(W3 (u ⊙ h_s))             word attention
//! c    = Σ_s cv_s h_s                        textual parameter
//! ```
//!
//! where `h_s` are the bidirectional LSTM states and `q` is the final forward
//! state concatenated with the final backward state. `W1(t)` is separate for
//! every step; the remaining weights are shared.

use rand::Rng;

use crate::error::{Error, Result};
use crate::modules::ModuleKind;
use crate::tensor::{bilstm_encode, Bound, LstmIds, ParamId, ParamStore, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderIds {
    /// `[vocab, d]`.
    pub embed: ParamId,
    pub forward: LstmIds,
    pub backward: LstmIds,
    pub vocab_size: usize,
}

impl EncoderIds {
    /// Each LSTM direction gets `hidden / 2` units; `hidden` must be even.
    pub fn register<R: Rng>(store: &mut ParamStore, rng: &mut R, vocab_size: usize, hidden: usize) -> Self {
        let embed = store.insert_weight(rng, "encoder.embed", vocab_size, hidden);
        let forward = LstmIds::register(store, rng, "encoder.fwd", hidden, hidden / 2);
        let backward = LstmIds::register(store, rng, "encoder.bwd", hidden, hidden / 2);
        Self {
            embed,
            forward,
            backward,
            vocab_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ControllerIds {
    /// One `[d, d]` matrix per step.
    pub w1: Vec<ParamId>,
    pub b1: ParamId,
    /// `[2d, d]`.
    pub w2: ParamId,
    pub b2: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    /// `[d, |M|]`.
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
    /// `[d]`, the word-attention projection.
    pub w3: ParamId,
}

impl ControllerIds {
    pub fn register<R: Rng>(store: &mut ParamStore, rng: &mut R, hidden: usize, steps: usize) -> Self {
        let d = hidden;
        let w1 = (0..steps)
            .map(|t| store.insert_weight(rng, &format!("controller.w1_t{t}"), d, d))
            .collect();
        Self {
            w1,
            b1: store.insert_filled("controller.b1", &[d], 0.0),
            w2: store.insert_weight(rng, "controller.w2", 2 * d, d),
            b2: store.insert_filled("controller.b2", &[d], 0.0),
            mlp_w1: store.insert_weight(rng, "controller.mlp_w1", d, d),
            mlp_b1: store.insert_filled("controller.mlp_b1", &[d], 0.0),
            mlp_w2: store.insert_weight(rng, "controller.mlp_w2", d, ModuleKind::COUNT),
            mlp_b2: store.insert_filled("controller.mlp_b2", &[ModuleKind::COUNT], 0.0),
            w3: {
                let v = crate::tensor::xavier_uniform(rng, d, d, 1);
                store.insert("controller.w3", &[d], v)
            },
        }
    }

    pub fn steps(&self) -> usize {
        self.w1.len()
    }
}

#[derive(Clone, Debug)]
pub struct EncodedText {
    pub token_ids: Vec<usize>,
    /// `[S, d]`.
    pub states: Tensor,
    /// `[d]`.
    pub summary: Tensor,
}

impl EncodedText {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

pub fn encode(tape: &Tape, token_ids: &[usize], p: &Bound, ids: &EncoderIds) -> Result<EncodedText> {
    if token_ids.is_empty() {
        return Err(Error::Input("cannot encode an empty token sequence".into()));
    }
    if let Some(&bad) = token_ids.iter().find(|&&t| t >= ids.vocab_size) {
        return Err(Error::Vocabulary {
            token: format!("#{bad}"),
        });
    }
    let embedded = tape.gather_rows(p[ids.embed], token_ids)?;
    let (states, summary) = bilstm_encode(tape, embedded, &ids.forward, &ids.backward, p)?;
    Ok(EncodedText {
        token_ids: token_ids.to_vec(),
        states,
        summary,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct ControllerStep {
    pub t: usize,
    /// MLP output before the softmax, `[|M|]`.
    pub logits: Tensor,
    /// Module weights, `[|M|]`.
    pub w: Tensor,
    /// Textual parameter, `[d]`.
    pub c: Tensor,
    /// Word attention, `[S]`.
    pub cv: Tensor,
    pub u: Tensor,
}

pub fn controller_step(
    tape: &Tape,
    enc: &EncodedText,
    c_prev: Tensor,
    t: usize,
    p: &Bound,
    ids: &ControllerIds,
) -> Result<ControllerStep> {
    let w1 = *ids.w1.get(t).ok_or(Error::Index {
        what: "controller step",
        index: t,
        limit: ids.steps(),
    })?;
    let projected = tape.add(tape.matmul(enc.summary, p[w1])?, p[ids.b1])?;
    let joint = tape.concat(&[projected, c_prev])?;
    let u = tape.add(tape.matmul(joint, p[ids.w2])?, p[ids.b2])?;

    let hidden = tape.elu(tape.add(tape.matmul(u, p[ids.mlp_w1])?, p[ids.mlp_b1])?);
    let logits = tape.add(tape.matmul(hidden, p[ids.mlp_w2])?, p[ids.mlp_b2])?;
    let w = tape.softmax(logits, 0)?;

    let d = tape.numel(u);
    let query = tape.reshape(tape.mul(u, p[ids.w3])?, &[d, 1])?;
    let scores = tape.matmul(enc.states, query)?;
    let scores = tape.reshape(scores, &[enc.len()])?;
    let cv = tape.softmax(scores, 0)?;
    let c = tape.matmul(cv, enc.states)?;
    Ok(ControllerStep {
        t,
        logits,
        w,
        c,
        cv,
        u,
    })
}

/// Mean over steps of `-log w(t)[expert_t]`.
pub fn layout_supervision_loss(tape: &Tape, steps: &[ControllerStep], expert: &[ModuleKind]) -> Result<Tensor> {
    if steps.len() != expert.len() || steps.is_empty() {
        return Err(Error::Layout(format!(
            "expert layout has {} steps, controller ran {}",
            expert.len(),
            steps.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    for (s, m) in steps.iter().zip(expert) {
        let ce = tape.cross_entropy(s.logits, m.index())?;
        total = Some(match total {
            None => ce,
            Some(acc) => tape.add(acc, ce)?,
        });
    }
    Ok(tape.scale(total.unwrap(), 1.0 / steps.len() as f64))
}

/// Shannon entropy in nats; zero entries contribute nothing.
pub fn entropy(w: &[f64]) -> f64 {
    -w.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}
