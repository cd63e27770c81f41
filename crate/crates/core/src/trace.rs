//! Per-step interpretability traces.
//!
//! A trace records, for every controller step, the executed module weights,
//! the word attention with its top words, the attention map on top of the
//! stack and any answer logits produced at that step. [`export_trace`]
//! writes it as JSON next to one binary PGM heatmap per step.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::executor::{argmax, execute, ExecMode, ExecutionConfig};
use crate::gridworld::Vocabulary;
use crate::model::Model;
use crate::modules::ModuleKind;
use crate::tensor::Tape;
use crate::training::Example;

pub const TRACE_VERSION: u32 = 1;

/// Words kept in [`TraceStep::top_words`].
pub const TOP_WORDS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: usize,
    /// Executed weights, indexed like [`ModuleKind::ALL`].
    pub module_weights: Vec<f64>,
    pub argmax_module: ModuleKind,
    pub word_attention: Vec<f64>,
    pub top_words: Vec<String>,
    /// `H` rows of `W` values.
    pub stack_top_attention: Vec<Vec<f64>>,
    /// Present when Answer or Compare carries weight at this step.
    pub partial_answer_logits: Option<Vec<f64>>,
    /// File name of the step's heatmap, relative to the trace file.
    pub heatmap: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub trace_version: u32,
    pub example_id: u64,
    pub mode: ExecMode,
    pub tokens: Vec<String>,
    pub steps: Vec<TraceStep>,
    /// Softmax of the final answer logits, in answer-vocabulary order.
    pub answer_distribution: Vec<f64>,
    pub predicted_answer: String,
    /// `(x_min, y_min, x_max, y_max)` in cell units.
    pub bbox: [f64; 4],
}

/// Tokens with the largest scores, best first; ties go to the earlier
/// position.
pub fn top_words(tokens: &[String], scores: &[f64], k: usize) -> Vec<String> {
    let mut order: Vec<usize> = (0..scores.len().min(tokens.len())).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.into_iter().take(k).map(|i| tokens[i].clone()).collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

pub fn heatmap_name(example_id: u64, t: usize) -> String {
    format!("trace-{example_id}-step-{t}.pgm")
}

pub fn trace_name(example_id: u64) -> String {
    format!("trace-{example_id}.json")
}

pub fn build_trace(model: &Model, ex: &Example, vocab: &Vocabulary, answers: &Vocabulary, mode: ExecMode) -> Result<Trace> {
    let tape = Tape::new();
    let p = model.params.bind(&tape, false);
    let cfg = ExecutionConfig::for_model(model, mode);
    let r = execute(&tape, model, &p, &ex.tokens, &ex.features, &cfg, None)?;
    let tokens: Vec<String> = ex
        .tokens
        .iter()
        .map(|&i| {
            vocab.word(i).map(str::to_string).ok_or(Error::Vocabulary {
                token: format!("#{i}"),
            })
        })
        .collect::<Result<_>>()?;
    let width = ex.features.width;
    let steps = r
        .records
        .iter()
        .map(|s| {
            let answers_used = [ModuleKind::Answer, ModuleKind::Compare]
                .iter()
                .any(|m| s.weights[m.index()] > 0.0);
            Ok(TraceStep {
                t: s.t,
                module_weights: s.weights.clone(),
                argmax_module: ModuleKind::from_index(argmax(&s.weights))?,
                word_attention: s.word_attention.clone(),
                top_words: top_words(&tokens, &s.word_attention, TOP_WORDS),
                stack_top_attention: s.stack_top.chunks(width).map(<[f64]>::to_vec).collect(),
                partial_answer_logits: answers_used.then(|| s.partial_answer.clone()),
                heatmap: heatmap_name(ex.id, s.t),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let answer_distribution = softmax(&tape.value(r.answer_logits));
    let best = argmax(&answer_distribution);
    Ok(Trace {
        trace_version: TRACE_VERSION,
        example_id: ex.id,
        mode,
        tokens,
        steps,
        predicted_answer: answers.word(best).unwrap_or("?").to_string(),
        answer_distribution,
        bbox: r.bbox.bbox,
    })
}

/// Min-max normalizes `map` to bytes; a constant map becomes mid-gray.
pub fn quantize(map: &[f64]) -> Vec<u8> {
    let lo = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![128; map.len()];
    }
    map.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::shape("write_pgm", format!("{} pixels for {width}x{height}", pixels.len())));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Parses a binary PGM with maxval 255 into `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    let bad = |d: &str| Error::Parse {
        line: 1,
        detail: format!("{}: {d}", path.display()),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("not an 8-bit binary graymap"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let pixels = bytes.get(pos..).unwrap_or_default().to_vec();
    if pixels.len() != w * h {
        return Err(bad("pixel count"));
    }
    Ok((w, h, pixels))
}

/// Writes `trace-<id>.json` and one heatmap per step into `dir`. Returns
/// the trace file path.
pub fn export_trace(trace: &Trace, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    for s in &trace.steps {
        let height = s.stack_top_attention.len();
        let width = s.stack_top_attention.first().map_or(0, Vec::len);
        let flat: Vec<f64> = s.stack_top_attention.concat();
        write_pgm(&dir.join(&s.heatmap), width, height, &quantize(&flat))?;
    }
    let path = dir.join(trace_name(trace.example_id));
    let json = serde_json::to_string_pretty(trace).map_err(|e| Error::Input(e.to_string()))?;
    std::fs::write(&path, json + "\n")?;
    Ok(path)
}

pub fn read_trace(path: &Path) -> Result<Trace> {
    let text = std::fs::read_to_string(path)?;
    let trace: Trace = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        detail: e.to_string(),
    })?;
    if trace.trace_version != TRACE_VERSION {
        return Err(Error::Parse {
            line: 1,
            detail: format!("unsupported trace_version {}", trace.trace_version),
        });
    }
    Ok(trace)
}
