//! Central finite-difference checks of tape gradients.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of every backward rule it is checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::executor::{execute, ExecMode, ExecutionConfig};
use crate::model::{Model, ModelConfig};
use crate::modules::FeatureMap;
use crate::stack::{MemoryStack, Sharpening};
use crate::tensor::{Bound, ShiftDirection, Tape, Tensor};
use crate::training::{ref_loss, RefTarget};

/// Denominator floor of the relative error, so entries whose true gradient
/// is zero are judged on absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// (input index, element index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares `tape.backward` against central differences of step `eps` for
/// every element of every input. `f` must return a single-element tensor.
pub fn check<F>(inputs: &[(Vec<usize>, Vec<f64>)], eps: f64, f: F) -> Result<GradReport>
where
    F: Fn(&Tape, &[Tensor]) -> Result<Tensor>,
{
    let tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|(s, v)| tape.leaf(s, v.clone())).collect();
    let out = f(&tape, &leaves)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .zip(inputs)
        .map(|(&t, (_, v))| tape.grad(t).unwrap_or_else(|| vec![0.0; v.len()]))
        .collect();

    let eval = |which: usize, elem: usize, delta: f64| -> Result<f64> {
        let tape = Tape::new();
        let ts: Vec<Tensor> = inputs
            .iter()
            .enumerate()
            .map(|(i, (s, v))| {
                let mut v = v.clone();
                if i == which {
                    v[elem] += delta;
                }
                tape.constant(s, v)
            })
            .collect();
        let out = f(&tape, &ts)?;
        Ok(tape.scalar(out))
    };

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (i, (_, values)) in inputs.iter().enumerate() {
        for j in 0..values.len() {
            let numeric = (eval(i, j, eps)? - eval(i, j, -eps)?) / (2.0 * eps);
            let a = analytic[i][j];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.checked == 1 {
                report.max_rel_err = err;
                report.worst = (i, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Step used by [`suites`].
pub const SUITE_EPS: f64 = 1e-4;

/// Largest relative error [`suites`] accepts.
pub const SUITE_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: String,
    pub report: GradReport,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err < SUITE_TOLERANCE
    }
}

type Build = fn(&Tape, &[Tensor]) -> Result<Tensor>;

fn primitives() -> Vec<(&'static str, Build)> {
    vec![
        ("add", |t, x| t.add(x[0], x[1])),
        ("sub", |t, x| t.sub(x[0], x[1])),
        ("mul", |t, x| t.mul(x[0], x[1])),
        ("minimum", |t, x| t.minimum(x[0], x[1])),
        ("maximum", |t, x| t.maximum(x[0], x[1])),
        ("affine", |t, x| Ok(t.affine(x[0], -2.0, 0.5))),
        ("tanh", |t, x| Ok(t.tanh(x[0]))),
        ("sigmoid", |t, x| Ok(t.sigmoid(x[0]))),
        ("elu", |t, x| Ok(t.elu(x[0]))),
        ("exp", |t, x| Ok(t.exp(x[0]))),
        ("smooth_l1", |t, x| Ok(t.smooth_l1(t.affine(x[0], 3.0, 0.0)))),
        ("softmax", |t, x| t.softmax(t.reshape(x[0], &[2, 3])?, 0)),
        ("log_softmax", |t, x| t.log_softmax(x[0])),
        ("cross_entropy", |t, x| t.cross_entropy(x[0], 4)),
        ("shift_up", |t, x| t.shift_1d(x[0], ShiftDirection::Up)),
        ("shift_down", |t, x| t.shift_1d(x[0], ShiftDirection::Down)),
        ("matmul", |t, x| t.matmul(t.reshape(x[0], &[2, 3])?, t.reshape(x[1], &[3, 2])?)),
        ("matmul_vector", |t, x| t.matmul(t.slice(x[0], 0, 3)?, t.reshape(x[1], &[3, 2])?)),
        ("conv_1x1", |t, x| {
            let img = t.reshape(x[0], &[1, 3, 2])?;
            let w = t.reshape(t.slice(x[1], 0, 4)?, &[2, 2])?;
            t.conv_1x1(img, w, t.slice(x[1], 4, 2)?)
        }),
        ("attended_sum", |t, x| {
            let feats = t.reshape(t.concat(&[x[0], x[1]])?, &[3, 4])?;
            t.attended_sum(t.slice(x[1], 0, 3)?, feats)
        }),
        ("gather_rows", |t, x| t.gather_rows(t.reshape(x[0], &[3, 2])?, &[2, 0, 2])),
        ("stack_rows", |t, x| t.stack_rows(&[x[0], x[1], x[0]])),
        ("stack_ops", |t, x| {
            let values = t.reshape(x[0], &[3, 2])?;
            let s = MemoryStack::new(t, values, t.softmax(t.slice(x[1], 0, 3)?, 0)?)?;
            let pushed = s.push(t, t.slice(x[1], 3, 2)?)?;
            let (z, popped) = pushed.pop(t)?;
            let again = popped.push(t, t.mul(z, t.slice(x[1], 4, 2)?)?)?;
            let w = t.softmax(t.slice(x[0], 0, 2)?, 0)?;
            let mixed = MemoryStack::combine(t, &[again, popped], w)?;
            mixed.sharpen(t, Sharpening::Softmax { temperature: 0.5 })?.read_top(t)
        }),
    ]
}

/// 2x2 grid, T = 2 model with small random biases.
fn tiny_instance(seed: u64) -> Result<(Model, FeatureMap)> {
    let config = ModelConfig {
        hidden: 4,
        steps: 2,
        stack_depth: 3,
        grid: 2,
        features: 3,
        vocab_size: 5,
        answers: 3,
        sharpen_temperature: 0.5,
    };
    let mut model = Model::new(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params.iter_mut().filter(|p| p.shape.len() == 1) {
        p.values.iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
    }
    let data = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Ok((model, FeatureMap::new(2, 2, 3, data)?))
}

/// Checks every tape primitive (contracted with a fixed random probe), the
/// stack operations, and the full VQA and REF losses of a 2x2, T = 2 model
/// with respect to all of its parameters.
pub fn suites(seed: u64) -> Result<Vec<SuiteReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vec6 = || (0..6).map(|_| rng.gen_range(-1.5..1.5)).collect::<Vec<f64>>();
    let (a, b, probe) = (vec6(), vec6(), vec6());
    let mut out = Vec::new();
    for (name, op) in primitives() {
        let report = check(&[(vec![6], a.clone()), (vec![6], b.clone())], SUITE_EPS, |t, x| {
            let y = op(t, x)?;
            let n = t.numel(y);
            let w = t.constant(&[n], probe.iter().cycle().take(n).copied().collect());
            Ok(t.sum(t.mul(t.reshape(y, &[n])?, w)?))
        })?;
        out.push(SuiteReport {
            name: name.to_string(),
            report,
        });
    }

    let (model, features) = tiny_instance(seed)?;
    let inputs: Vec<(Vec<usize>, Vec<f64>)> = model.params.iter().map(|p| (p.shape.clone(), p.values.clone())).collect();
    let cfg = ExecutionConfig::for_model(&model, ExecMode::Soft);
    let tokens = [4, 0, 2];
    let report = check(&inputs, SUITE_EPS, |t, leaves| {
        let p = Bound::from_tensors(leaves.to_vec());
        let r = execute(t, &model, &p, &tokens, &features, &cfg, None)?;
        t.cross_entropy(r.answer_logits, 1)
    })?;
    out.push(SuiteReport {
        name: "vqa_loss".into(),
        report,
    });
    let target = RefTarget {
        cell: 2,
        bbox: [0.1, 1.2, 0.8, 1.9],
    };
    let report = check(&inputs, SUITE_EPS, |t, leaves| {
        let p = Bound::from_tensors(leaves.to_vec());
        let r = execute(t, &model, &p, &tokens, &features, &cfg, None)?;
        ref_loss(t, r.final_attention, r.bbox.offsets, &target, 2, 0.1)
    })?;
    out.push(SuiteReport {
        name: "ref_loss".into(),
        report,
    });
    Ok(out)
}
