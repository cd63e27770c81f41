//! Soft program execution.
//!
//! Every step runs each module on the current stack, averages the resulting
//! stacks by the controller's module weights, sharpens the pointer and adds
//! the weighted answer logits of Answer and Compare to the running total.
//! Modules whose weight is exactly zero are skipped; they would contribute
//! nothing to the mixture.

pub mod symbolic;

use serde::{Deserialize, Serialize};

use crate::controller::{controller_step, encode, ControllerStep};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::modules::{FeatureMap, ModuleContext, ModuleIds, ModuleKind};
use crate::stack::{MemoryStack, Sharpening};
use crate::tensor::{Bound, ParamId, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    #[default]
    Soft,
    /// Module weights replaced by the one-hot argmax.
    Discretized,
}

impl std::str::FromStr for ExecMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(ExecMode::Soft),
            "discretized" => Ok(ExecMode::Discretized),
            _ => Err(Error::Config(format!("unknown mode {s:?} (soft|discretized)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExecutionConfig {
    pub steps: usize,
    pub depth: usize,
    pub mode: ExecMode,
    pub sharpening: Sharpening,
    pub strict_bounds: bool,
}

impl ExecutionConfig {
    pub fn for_model(model: &Model, mode: ExecMode) -> Self {
        let c = &model.config;
        Self {
            steps: c.steps,
            depth: c.stack_depth,
            mode,
            sharpening: Sharpening::Softmax {
                temperature: c.sharpen_temperature,
            },
            strict_bounds: false,
        }
    }
}

/// Uniform map `1/(H·W)` in row 0, zeros above, pointer at row 0.
pub fn init_stack(tape: &Tape, cells: usize, depth: usize) -> Result<MemoryStack> {
    if cells == 0 || depth == 0 {
        return Err(Error::shape("init_stack", format!("{cells} cells, depth {depth}")));
    }
    let mut values = vec![0.0; depth * cells];
    values[..cells].fill(1.0 / cells as f64);
    let mut pointer = vec![0.0; depth];
    pointer[0] = 1.0;
    MemoryStack::from_arrays(tape, depth, cells, values, pointer)
}

/// Applies module `m` alone: pops its inputs, pushes its attention output
/// (or, for Answer and Compare, the first popped map) and returns any
/// answer logits.
pub fn run_module(
    tape: &Tape,
    m: ModuleKind,
    stack: &MemoryStack,
    ctx: &ModuleContext,
    c: Tensor,
    p: &Bound,
    ids: &ModuleIds,
) -> Result<(MemoryStack, Option<Tensor>)> {
    let pop1 = || stack.pop(tape);
    let pop2 = || -> Result<(Tensor, Tensor, MemoryStack)> {
        let (a1, s) = stack.pop(tape)?;
        let (a2, s) = s.pop(tape)?;
        Ok((a1, a2, s))
    };
    Ok(match m {
        ModuleKind::Find => (stack.push(tape, ctx.find(tape, c, p, ids)?)?, None),
        ModuleKind::Transform => {
            let (a, s) = pop1()?;
            (s.push(tape, ctx.transform(tape, a, c, p, ids)?)?, None)
        }
        ModuleKind::And => {
            let (a1, a2, s) = pop2()?;
            (s.push(tape, ctx.and(tape, a1, a2)?)?, None)
        }
        ModuleKind::Or => {
            let (a1, a2, s) = pop2()?;
            (s.push(tape, ctx.or(tape, a1, a2)?)?, None)
        }
        ModuleKind::Filter => {
            let (a, s) = pop1()?;
            (s.push(tape, ctx.filter(tape, a, c, p, ids)?)?, None)
        }
        ModuleKind::Scene => (stack.push(tape, ctx.scene())?, None),
        ModuleKind::Answer => {
            let (a, s) = pop1()?;
            let y = ctx.answer(tape, a, c, p, ids)?;
            (s.push(tape, a)?, Some(y))
        }
        ModuleKind::Compare => {
            let (a1, a2, s) = pop2()?;
            let y = ctx.compare(tape, a1, a2, c, p, ids)?;
            (s.push(tape, a1)?, Some(y))
        }
        ModuleKind::NoOp => (*stack, None),
    })
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    /// Mixture of the module stacks before sharpening.
    pub mixed: MemoryStack,
    pub stack: MemoryStack,
    /// `Σ_{m ∈ {Answer, Compare}} w_m y_m`, zeros when neither runs.
    pub partial_answer: Tensor,
}

/// One execution step with executed module weights `w` (`[|M|]`).
#[allow(clippy::too_many_arguments)]
pub fn step(
    tape: &Tape,
    stack: &MemoryStack,
    ctx: &ModuleContext,
    c: Tensor,
    w: Tensor,
    p: &Bound,
    ids: &ModuleIds,
    answers: usize,
    sharpening: Sharpening,
) -> Result<StepOutput> {
    let weights = tape.value(w);
    if weights.len() != ModuleKind::COUNT {
        return Err(Error::shape("step", format!("{} module weights", weights.len())));
    }
    let active: Vec<ModuleKind> = ModuleKind::ALL
        .into_iter()
        .filter(|m| weights[m.index()] != 0.0)
        .collect();
    let mut stacks = Vec::with_capacity(active.len());
    let mut partial: Option<Tensor> = None;
    for &m in &active {
        let (s, y) = run_module(tape, m, stack, ctx, c, p, ids)?;
        stacks.push(s);
        if let Some(y) = y {
            let wy = tape.mul(y, tape.pick(w, m.index())?)?;
            partial = Some(match partial {
                None => wy,
                Some(acc) => tape.add(acc, wy)?,
            });
        }
    }
    let mix_w = if active.len() == ModuleKind::COUNT {
        w
    } else {
        let parts = active
            .iter()
            .map(|m| tape.pick(w, m.index()))
            .collect::<Result<Vec<_>>>()?;
        tape.concat(&parts)?
    };
    let mixed = MemoryStack::combine(tape, &stacks, mix_w)?;
    let sharpened = mixed.sharpen(tape, sharpening)?;
    Ok(StepOutput {
        mixed,
        stack: sharpened,
        partial_answer: partial.unwrap_or_else(|| tape.zeros(&[answers])),
    })
}

fn one_hot(tape: &Tape, index: usize) -> Tensor {
    let mut v = vec![0.0; ModuleKind::COUNT];
    v[index] = 1.0;
    tape.constant(&[ModuleKind::COUNT], v)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Values recorded for one step, for traces and metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    /// Controller output.
    pub soft_weights: Vec<f64>,
    /// Weights the step actually executed with.
    pub weights: Vec<f64>,
    pub word_attention: Vec<f64>,
    /// Read of the stack top after the step, `[H·W]`.
    pub stack_top: Vec<f64>,
    pub partial_answer: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BoxPrediction {
    /// `(Δcx, Δcy, Δlog w, Δlog h)` in cell units, `[4]`.
    pub offsets: Tensor,
    /// Flat index of the anchor cell.
    pub anchor: usize,
    /// `(x_min, y_min, x_max, y_max)` with one cell as the unit; x runs along
    /// columns.
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug)]
pub struct ExecutionResult {
    /// `[answers]`.
    pub answer_logits: Tensor,
    /// Top of the final stack, `[H·W]`.
    pub final_attention: Tensor,
    pub bbox: BoxPrediction,
    pub controller: Vec<ControllerStep>,
    pub records: Vec<StepRecord>,
    pub final_stack: MemoryStack,
}

/// The unit box of cell `(row, col)` moved and scaled by `o`.
pub fn apply_offsets(row: usize, col: usize, o: [f64; 4]) -> [f64; 4] {
    let cx = col as f64 + 0.5 + o[0];
    let cy = row as f64 + 0.5 + o[1];
    let w = o[2].exp();
    let h = o[3].exp();
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}

/// Inverse of [`apply_offsets`].
pub fn encode_offsets(row: usize, col: usize, b: [f64; 4]) -> [f64; 4] {
    let cx = (b[0] + b[2]) / 2.0;
    let cy = (b[1] + b[3]) / 2.0;
    [
        cx - (col as f64 + 0.5),
        cy - (row as f64 + 0.5),
        (b[2] - b[0]).ln(),
        (b[3] - b[1]).ln(),
    ]
}

/// Anchors at the argmax cell and regresses offsets from the feature
/// attended by `softmax(attention)`.
pub fn decode_bbox(
    tape: &Tape,
    attention: Tensor,
    features: Tensor,
    width: usize,
    p: &Bound,
    w: ParamId,
    b: ParamId,
) -> Result<BoxPrediction> {
    let normalized = tape.softmax(attention, 0)?;
    let attended = tape.attended_sum(normalized, features)?;
    let offsets = tape.add(tape.matmul(attended, p[w])?, p[b])?;
    let anchor = argmax(&tape.value(attention));
    let o = tape.value(offsets);
    let bbox = apply_offsets(anchor / width, anchor % width, [o[0], o[1], o[2], o[3]]);
    Ok(BoxPrediction { offsets, anchor, bbox })
}

/// Encodes `tokens`, runs `config.steps` controller and execution steps and
/// decodes both outputs. `layout` forces the executed module at each step
/// (missing trailing steps are NoOp); the controller still supplies the
/// textual parameters.
pub fn execute(
    tape: &Tape,
    model: &Model,
    p: &Bound,
    tokens: &[usize],
    features: &FeatureMap,
    config: &ExecutionConfig,
    layout: Option<&[ModuleKind]>,
) -> Result<ExecutionResult> {
    let mc = &model.config;
    if config.steps > model.ids.controller.steps() {
        return Err(Error::Config(format!(
            "{} steps requested, the controller has {}",
            config.steps,
            model.ids.controller.steps()
        )));
    }
    if let Some(l) = layout {
        if l.len() > config.steps {
            return Err(Error::Layout(format!("layout of {} steps exceeds T = {}", l.len(), config.steps)));
        }
    }
    if features.depth != mc.features {
        return Err(Error::shape(
            "execute",
            format!("{} feature channels, model expects {}", features.depth, mc.features),
        ));
    }
    let ids = &model.ids;
    let x = features.to_tensor(tape);
    let ctx = ModuleContext::prepare(tape, x, p, &ids.modules)?;
    let enc = encode(tape, tokens, p, &ids.encoder)?;
    let mut stack = init_stack(tape, features.cells(), config.depth)?.with_strict_bounds(config.strict_bounds);
    let mut c_prev = tape.zeros(&[mc.hidden]);
    let mut answer = tape.zeros(&[mc.answers]);
    let mut controller = Vec::with_capacity(config.steps);
    let mut records = Vec::with_capacity(config.steps);
    for t in 0..config.steps {
        let cs = controller_step(tape, &enc, c_prev, t, p, &ids.controller)?;
        let soft = tape.value(cs.w);
        let w = match (layout, config.mode) {
            (Some(l), _) => one_hot(tape, l.get(t).copied().unwrap_or(ModuleKind::NoOp).index()),
            (None, ExecMode::Soft) => cs.w,
            (None, ExecMode::Discretized) => one_hot(tape, argmax(&soft)),
        };
        let out = step(tape, &stack, &ctx, cs.c, w, p, &ids.modules, mc.answers, config.sharpening)?;
        answer = tape.add(answer, out.partial_answer)?;
        stack = out.stack;
        records.push(StepRecord {
            t,
            soft_weights: soft,
            weights: tape.value(w),
            word_attention: tape.value(cs.cv),
            stack_top: tape.value(stack.read_top(tape)?),
            partial_answer: tape.value(out.partial_answer),
        });
        c_prev = cs.c;
        controller.push(cs);
    }
    let final_attention = stack.read_top(tape)?;
    let bbox = decode_bbox(tape, final_attention, ctx.features, features.width, p, ids.bbox_w, ids.bbox_b)?;
    Ok(ExecutionResult {
        answer_logits: answer,
        final_attention,
        bbox,
        controller,
        records,
        final_stack: stack,
    })
}
