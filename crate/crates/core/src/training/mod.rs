//! Losses, the optimization loop, evaluation and metrics.
//!
//! VQA examples are scored with the softmax cross-entropy of the summed
//! answer logits. REF examples use the cross-entropy of the final attention
//! against the cell holding the center of the target box, plus a weighted
//! smooth-L1 term on the box offsets encoded relative to that cell. Layout
//! supervision, when enabled, adds the mean per-step cross-entropy of the
//! controller's module logits against the expert layout.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{entropy, layout_supervision_loss};
use crate::error::{Error, Result};
use crate::executor::{encode_offsets, execute, ExecMode, ExecutionConfig, ExecutionResult};
use crate::gridworld::{render_features, Record, TaskKind, Vocabulary};
use crate::model::Model;
use crate::modules::{FeatureMap, ModuleKind};
use crate::tensor::{AdamConfig, AdamState, Tape, Tensor};


#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMix {
    Vqa,
    Ref,
    #[default]
    Both,
}

impl TaskMix {
    pub fn includes(self, kind: TaskKind) -> bool {
        matches!(
            (self, kind),
            (TaskMix::Both, _) | (TaskMix::Vqa, TaskKind::Vqa) | (TaskMix::Ref, TaskKind::Ref)
        )
    }
}

impl std::str::FromStr for TaskMix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vqa" => Ok(TaskMix::Vqa),
            "ref" => Ok(TaskMix::Ref),
            "both" => Ok(TaskMix::Both),
            _ => Err(Error::Config(format!("unknown task {s:?} (vqa|ref|both)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub layout_supervision: bool,
    pub layout_loss_weight: f64,
    /// Weight of the smooth-L1 box term in the REF loss.
    pub bbox_loss_weight: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub task_mix: TaskMix,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr: 1e-4,
            layout_supervision: false,
            layout_loss_weight: 1.0,
            bbox_loss_weight: 0.1,
            clip_norm: 10.0,
            task_mix: TaskMix::Both,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return fail(format!(
                "epochs ({}) and batch_size ({}) must be positive",
                self.epochs, self.batch_size
            ));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("layout_loss_weight", self.layout_loss_weight),
            ("bbox_loss_weight", self.bbox_loss_weight),
            ("clip_norm", self.clip_norm),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefTarget {
    /// Flat index of the cell holding the box center.
    pub cell: usize,
    pub bbox: [f64; 4],
}

/// A record converted to ids and features.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: u64,
    pub kind: TaskKind,
    pub tokens: Vec<usize>,
    pub features: FeatureMap,
    pub answer: Option<usize>,
    pub target: Option<RefTarget>,
    /// Expert layout padded with NoOp to the controller length; `None` when
    /// it needs more steps than the controller has.
    pub expert: Option<Vec<ModuleKind>>,
}

/// Cell containing the center of `bbox` on a `grid × grid` map.
pub fn center_cell(bbox: [f64; 4], grid: usize) -> usize {
    let clamp = |v: f64| (v.floor().max(0.0) as usize).min(grid - 1);
    let col = clamp((bbox[0] + bbox[2]) / 2.0);
    let row = clamp((bbox[1] + bbox[3]) / 2.0);
    row * grid + col
}

pub fn prepare_examples(records: &[Record], vocab: &Vocabulary, answers: &Vocabulary, steps: usize) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            let t = &r.task;
            let answer = t.answer.as_deref().map(|a| answers.id(a)).transpose()?;
            let target = match (t.kind, t.target) {
                (TaskKind::Ref, Some(i)) => {
                    let o = r.scene.objects.get(i).ok_or(Error::Index {
                        what: "ref target",
                        index: i,
                        limit: r.scene.objects.len(),
                    })?;
                    Some(RefTarget {
                        cell: center_cell(o.bbox, r.scene.grid),
                        bbox: o.bbox,
                    })
                }
                (TaskKind::Ref, None) => return Err(Error::Input(format!("ref record {} has no target", r.id))),
                _ => None,
            };
            if t.kind == TaskKind::Vqa && answer.is_none() {
                return Err(Error::Input(format!("vqa record {} has no answer", r.id)));
            }
            Ok(Example {
                id: r.id,
                kind: t.kind,
                tokens: vocab.ids(&t.tokens)?,
                features: render_features(&r.scene),
                answer,
                target,
                expert: t.expert_modules(steps).ok(),
            })
        })
        .collect()
}

/// `-log softmax(logits)[answer]`.
pub fn vqa_loss(tape: &Tape, logits: Tensor, answer: usize) -> Result<Tensor> {
    tape.cross_entropy(logits, answer)
}

/// Attention cross-entropy against `target.cell` plus `bbox_weight` times the
/// summed smooth-L1 of the offset error. Ground-truth offsets are encoded
/// relative to the target cell.
pub fn ref_loss(
    tape: &Tape,
    attention: Tensor,
    offsets: Tensor,
    target: &RefTarget,
    width: usize,
    bbox_weight: f64,
) -> Result<Tensor> {
    let ce = tape.cross_entropy(attention, target.cell)?;
    let gt = encode_offsets(target.cell / width, target.cell % width, target.bbox);
    let diff = tape.sub(offsets, tape.constant(&[4], gt.to_vec()))?;
    let reg = tape.sum(tape.smooth_l1(diff));
    tape.add(ce, tape.scale(reg, bbox_weight))
}

/// Intersection over union of two `(x0, y0, x1, y1)` boxes.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Task loss of one example (without layout supervision) and the run.
pub fn task_loss(
    tape: &Tape,
    model: &Model,
    p: &crate::tensor::Bound,
    ex: &Example,
    exec: &ExecutionConfig,
    bbox_weight: f64,
) -> Result<(Tensor, ExecutionResult)> {
    let r = execute(tape, model, p, &ex.tokens, &ex.features, exec, None)?;
    let loss = match ex.kind {
        TaskKind::Vqa => vqa_loss(tape, r.answer_logits, ex.answer.unwrap_or_default())?,
        TaskKind::Ref => {
            let target = ex
                .target
                .ok_or_else(|| Error::Input(format!("ref example {} has no target", ex.id)))?;
            ref_loss(tape, r.final_attention, r.bbox.offsets, &target, ex.features.width, bbox_weight)?
        }
    };
    Ok((loss, r))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub examples: usize,
    /// Mean task loss.
    pub loss: f64,
    pub vqa_accuracy: Option<f64>,
    pub ref_grid_accuracy: Option<f64>,
    pub ref_iou_at_0_5: Option<f64>,
    /// Mean entropy of the controller's module weights over all steps.
    pub mean_module_weight_entropy: f64,
}

impl Metrics {
    /// Mean of the available accuracies; used for model selection.
    pub fn score(&self) -> f64 {
        let accs: Vec<f64> = [self.vqa_accuracy, self.ref_grid_accuracy].into_iter().flatten().collect();
        if accs.is_empty() {
            0.0
        } else {
            accs.iter().sum::<f64>() / accs.len() as f64
        }
    }
}

/// One example's contribution to [`Metrics`].
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: u64,
    pub kind: TaskKind,
    pub loss: f64,
    pub correct: bool,
    pub iou: Option<f64>,
    pub step_entropies: Vec<f64>,
}

pub fn predict(model: &Model, ex: &Example, mode: ExecMode, bbox_weight: f64) -> Result<Prediction> {
    let tape = Tape::new();
    let p = model.params.bind(&tape, false);
    let exec = ExecutionConfig::for_model(model, mode);
    let (loss, r) = task_loss(&tape, model, &p, ex, &exec, bbox_weight)?;
    let step_entropies = r.records.iter().map(|s| entropy(&s.soft_weights)).collect();
    let (correct, iou_value) = match ex.kind {
        TaskKind::Vqa => {
            let logits = tape.value(r.answer_logits);
            (Some(crate::executor::argmax(&logits)) == ex.answer, None)
        }
        TaskKind::Ref => {
            let target = ex.target.unwrap();
            let cell = crate::executor::argmax(&tape.value(r.final_attention));
            (cell == target.cell, Some(iou(r.bbox.bbox, target.bbox)))
        }
    };
    Ok(Prediction {
        id: ex.id,
        kind: ex.kind,
        loss: tape.scalar(loss),
        correct,
        iou: iou_value,
        step_entropies,
    })
}

pub fn summarize(predictions: &[Prediction]) -> Metrics {
    let rate = |kind: TaskKind, f: &dyn Fn(&Prediction) -> bool| {
        let of_kind: Vec<&Prediction> = predictions.iter().filter(|p| p.kind == kind).collect();
        (!of_kind.is_empty()).then(|| of_kind.iter().filter(|p| f(p)).count() as f64 / of_kind.len() as f64)
    };
    let entropies: Vec<f64> = predictions.iter().flat_map(|p| p.step_entropies.iter().copied()).collect();
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let losses: Vec<f64> = predictions.iter().map(|p| p.loss).collect();
    Metrics {
        examples: predictions.len(),
        loss: mean(&losses),
        vqa_accuracy: rate(TaskKind::Vqa, &|p| p.correct),
        ref_grid_accuracy: rate(TaskKind::Ref, &|p| p.correct),
        ref_iou_at_0_5: rate(TaskKind::Ref, &|p| p.iou.is_some_and(|v| v >= 0.5)),
        mean_module_weight_entropy: mean(&entropies),
    }
}

pub fn evaluate(model: &Model, examples: &[Example], mode: ExecMode) -> Result<Metrics> {
    evaluate_with(model, examples, mode, TrainConfig::default().bbox_loss_weight)
}

pub fn evaluate_with(model: &Model, examples: &[Example], mode: ExecMode, bbox_weight: f64) -> Result<Metrics> {
    let preds = examples
        .iter()
        .map(|ex| predict(model, ex, mode, bbox_weight))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(&preds))
}

/// Accuracy of always predicting the most frequent answer (VQA) or cell
/// (REF) of `examples`.
pub fn majority_baseline(examples: &[Example], kind: TaskKind) -> Option<f64> {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    let mut n = 0;
    for ex in examples.iter().filter(|e| e.kind == kind) {
        let key = match kind {
            TaskKind::Vqa => ex.answer?,
            TaskKind::Ref => ex.target?.cell,
        };
        *counts.entry(key).or_default() += 1;
        n += 1;
    }
    counts.values().max().map(|&m| m as f64 / n as f64)
}

/// Batches of example indices for one epoch. Each task is shuffled and
/// chunked on its own; with both tasks present the batches alternate,
/// starting with VQA, until one task runs out.
pub fn schedule(examples: &[Example], cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(epoch as u64);
    let mut per_task = Vec::new();
    for kind in [TaskKind::Vqa, TaskKind::Ref] {
        if !cfg.task_mix.includes(kind) {
            continue;
        }
        let mut idx: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].kind == kind).collect();
        idx.shuffle(&mut rng);
        let batches: Vec<Vec<usize>> = idx.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect();
        per_task.push(batches.into_iter());
    }
    let mut out = Vec::new();
    loop {
        let before = out.len();
        for it in per_task.iter_mut() {
            out.extend(it.next());
        }
        if out.len() == before {
            return out;
        }
    }
}

fn clip(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Runs one batch: batch-averaged gradients, clipping, one Adam step.
/// Returns the mean training loss.
pub fn train_batch(model: &mut Model, adam: &mut AdamState, examples: &[&Example], cfg: &TrainConfig) -> Result<f64> {
    let exec = ExecutionConfig::for_model(model, ExecMode::Soft);
    let mut sum: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.values.len()]).collect();
    let mut total = 0.0;
    for ex in examples {
        let tape = Tape::new();
        let p = model.params.bind(&tape, true);
        let (mut loss, r) = task_loss(&tape, model, &p, ex, &exec, cfg.bbox_loss_weight)?;
        if cfg.layout_supervision && cfg.layout_loss_weight > 0.0 {
            let expert = ex.expert.as_ref().ok_or_else(|| {
                Error::Layout(format!("example {} has no expert layout within {} steps", ex.id, r.controller.len()))
            })?;
            let l = layout_supervision_loss(&tape, &r.controller, expert)?;
            loss = tape.add(loss, tape.scale(l, cfg.layout_loss_weight))?;
        }
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                example_id: ex.id,
                norms: model.params.norms(),
            });
        }
        total += value;
        tape.backward(loss)?;
        for (acc, g) in sum.iter_mut().zip(model.params.gradients(&tape, &p)) {
            acc.iter_mut().zip(g).for_each(|(a, g)| *a += g);
        }
    }
    let n = examples.len().max(1) as f64;
    sum.iter_mut().flatten().for_each(|g| *g /= n);
    clip(&mut sum, cfg.clip_norm);
    adam.step(&mut model.params, &sum)?;
    Ok(total / n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 0 is the untrained model.
    pub epoch: usize,
    /// Mean batch loss during the epoch.
    pub train_loss: Option<f64>,
    pub val: Metrics,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation score.
    pub model: Model,
    pub best_epoch: usize,
    pub history: Vec<EpochMetrics>,
}

/// Trains `model` on the examples selected by `cfg.task_mix`, validating
/// after every epoch. With `out`, writes `metrics.jsonl`,
/// `checkpoints/epoch-NNN/` and `best/` below it.
pub fn train(
    mut model: Model,
    cfg: &TrainConfig,
    train_set: &[Example],
    val_set: &[Example],
    out: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let val: Vec<Example> = val_set.iter().filter(|e| cfg.task_mix.includes(e.kind)).cloned().collect();
    let mut log = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir.join("checkpoints"))?;
            Some(std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.jsonl"))?))
        }
        None => None,
    };
    let mut adam = AdamState::new(
        &model.params,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut history = Vec::with_capacity(cfg.epochs + 1);
    let mut best: Option<(f64, usize, Model)> = None;
    for epoch in 0..=cfg.epochs {
        let train_loss = if epoch == 0 {
            None
        } else {
            let batches = schedule(train_set, cfg, epoch);
            let mut total = 0.0;
            for b in &batches {
                let exs: Vec<&Example> = b.iter().map(|&i| &train_set[i]).collect();
                total += train_batch(&mut model, &mut adam, &exs, cfg)?;
            }
            Some(total / batches.len().max(1) as f64)
        };
        let record = EpochMetrics {
            epoch,
            train_loss,
            val: evaluate_with(&model, &val, ExecMode::Soft, cfg.bbox_loss_weight)?,
        };
        let score = record.val.score();
        let improved = best.as_ref().map_or(true, |(s, _, _)| score > *s);
        if let Some(dir) = out {
            let line = serde_json::to_string(&record).map_err(|e| Error::Input(e.to_string()))?;
            if let Some(w) = log.as_mut() {
                writeln!(w, "{line}")?;
                w.flush()?;
            }
            model.save(&dir.join("checkpoints").join(format!("epoch-{epoch:03}")))?;
            if improved {
                model.save(&dir.join("best"))?;
            }
        }
        if improved {
            best = Some((score, epoch, model.clone()));
        }
        on_epoch(&record);
        history.push(record);
    }
    let (_, best_epoch, model) = best.expect("at least one epoch is evaluated");
    Ok(TrainOutcome {
        model,
        best_epoch,
        history,
    })
}
