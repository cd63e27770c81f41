//! The neural module library.
//!
//! | module    | pops | output    |
//! |-----------|------|-----------|
//! | Find      | 0    | attention |
//! | Transform | 1    | attention |
//! | And       | 2    | attention |
//! | Or        | 2    | attention |
//! | Filter    | 1    | attention |
//! | Scene     | 0    | attention |
//! | Answer    | 1    | answer    |
//! | Compare   | 2    | answer    |
//! | NoOp      | 0    | none      |
//!
//! Attention maps are unnormalized scores over feature-grid cells, flattened
//! to `[H·W]`. Feature maps are flattened to `[H·W, D]`. Parts of a module
//! that depend only on the image (the first 1×1 convolutions) are computed
//! once per example in [`ModuleContext`].
//!
//! The two answering modules put a bias and an ELU between the elementwise
//! product and the output projection. Without them the logits scale
//! linearly with the attention mass, so the argmax cannot change with the
//! number of attended objects and counting is not learnable.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Bound, ParamId, ParamStore, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModuleKind {
    Find,
    Transform,
    And,
    Or,
    Filter,
    Scene,
    Answer,
    Compare,
    NoOp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputKind {
    Attention,
    Answer,
    Nothing,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 9] = [
        ModuleKind::Find,
        ModuleKind::Transform,
        ModuleKind::And,
        ModuleKind::Or,
        ModuleKind::Filter,
        ModuleKind::Scene,
        ModuleKind::Answer,
        ModuleKind::Compare,
        ModuleKind::NoOp,
    ];

    pub const COUNT: usize = 9;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL.get(i).copied().ok_or(Error::Index {
            what: "module id",
            index: i,
            limit: Self::COUNT,
        })
    }

    /// Number of attention maps popped from the stack.
    pub fn arity(self) -> usize {
        match self {
            ModuleKind::Find | ModuleKind::Scene | ModuleKind::NoOp => 0,
            ModuleKind::Transform | ModuleKind::Filter | ModuleKind::Answer => 1,
            ModuleKind::And | ModuleKind::Or | ModuleKind::Compare => 2,
        }
    }

    pub fn output(self) -> OutputKind {
        match self {
            ModuleKind::Answer | ModuleKind::Compare => OutputKind::Answer,
            ModuleKind::NoOp => OutputKind::Nothing,
            _ => OutputKind::Attention,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::Find => "Find",
            ModuleKind::Transform => "Transform",
            ModuleKind::And => "And",
            ModuleKind::Or => "Or",
            ModuleKind::Filter => "Filter",
            ModuleKind::Scene => "Scene",
            ModuleKind::Answer => "Answer",
            ModuleKind::Compare => "Compare",
            ModuleKind::NoOp => "NoOp",
        }
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModuleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Layout(format!("unknown module {s:?}")))
    }
}

/// Image features on an `height × width` grid with `depth` channels,
/// stored row-major as `[height, width, depth]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, depth: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * depth {
            return Err(Error::shape(
                "feature map",
                format!("{} values for {height}x{width}x{depth}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("feature map contains non-finite values".into()));
        }
        Ok(Self {
            height,
            width,
            depth,
            data,
        })
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.width + col) * self.depth;
        &self.data[i..i + self.depth]
    }

    /// Places the map on the tape as a `[H·W, D]` constant.
    pub fn to_tensor(&self, tape: &Tape) -> Tensor {
        tape.constant(&[self.cells(), self.depth], self.data.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FindIds {
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub text_w: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformIds {
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub attended_w: ParamId,
    pub text_w: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SceneIds {
    pub conv_w: ParamId,
    pub conv_b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnswerIds {
    pub attended_w: ParamId,
    pub text_w: ParamId,
    pub hidden_b: ParamId,
    pub out_w: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CompareIds {
    pub first_w: ParamId,
    pub second_w: ParamId,
    pub text_w: ParamId,
    pub hidden_b: ParamId,
    pub out_w: ParamId,
}

/// Parameter handles of every module. Filter has no entry of its own: it
/// runs Find's parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModuleIds {
    pub find: FindIds,
    pub transform: TransformIds,
    pub scene: SceneIds,
    pub answer: AnswerIds,
    pub compare: CompareIds,
}

impl ModuleIds {
    /// `features` is the channel count D, `hidden` both the text size d and
    /// the intermediate conv width.
    pub fn register<R: Rng>(store: &mut ParamStore, rng: &mut R, features: usize, hidden: usize, answers: usize) -> Self {
        let d = hidden;
        let find = FindIds {
            conv1_w: store.insert_weight(rng, "find.conv1_w", features, d),
            conv1_b: store.insert_filled("find.conv1_b", &[d], 0.0),
            text_w: store.insert_weight(rng, "find.text_w", d, d),
            conv2_w: store.insert_weight(rng, "find.conv2_w", d, 1),
            conv2_b: store.insert_filled("find.conv2_b", &[1], 0.0),
        };
        let transform = TransformIds {
            conv1_w: store.insert_weight(rng, "transform.conv1_w", features, d),
            conv1_b: store.insert_filled("transform.conv1_b", &[d], 0.0),
            attended_w: store.insert_weight(rng, "transform.attended_w", features, d),
            text_w: store.insert_weight(rng, "transform.text_w", d, d),
            conv2_w: store.insert_weight(rng, "transform.conv2_w", d, 1),
            conv2_b: store.insert_filled("transform.conv2_b", &[1], 0.0),
        };
        let scene = SceneIds {
            conv_w: store.insert_weight(rng, "scene.conv_w", features, 1),
            conv_b: store.insert_filled("scene.conv_b", &[1], 0.0),
        };
        let answer = AnswerIds {
            attended_w: store.insert_weight(rng, "answer.attended_w", features, d),
            text_w: store.insert_weight(rng, "answer.text_w", d, d),
            hidden_b: store.insert_filled("answer.hidden_b", &[d], 0.0),
            out_w: store.insert_weight(rng, "answer.out_w", d, answers),
        };
        let compare = CompareIds {
            first_w: store.insert_weight(rng, "compare.first_w", features, d),
            second_w: store.insert_weight(rng, "compare.second_w", features, d),
            text_w: store.insert_weight(rng, "compare.text_w", d, d),
            hidden_b: store.insert_filled("compare.hidden_b", &[d], 0.0),
            out_w: store.insert_weight(rng, "compare.out_w", d, answers),
        };
        Self {
            find,
            transform,
            scene,
            answer,
            compare,
        }
    }
}

/// Per-example, text-independent module inputs.
#[derive(Clone, Copy, Debug)]
pub struct ModuleContext {
    /// `[H·W, D]`.
    pub features: Tensor,
    find_conv1: Tensor,
    transform_conv1: Tensor,
    scene_map: Tensor,
    pub cells: usize,
}

fn conv(tape: &Tape, x: Tensor, w: Tensor, b: Tensor) -> Result<Tensor> {
    tape.conv_1x1(x, w, b)
}

impl ModuleContext {
    pub fn prepare(tape: &Tape, features: Tensor, p: &Bound, ids: &ModuleIds) -> Result<Self> {
        let cells = match tape.shape(features).as_slice() {
            [c, _] => *c,
            s => return Err(Error::shape("module context", format!("features {s:?}"))),
        };
        let find_conv1 = conv(tape, features, p[ids.find.conv1_w], p[ids.find.conv1_b])?;
        let transform_conv1 = conv(tape, features, p[ids.transform.conv1_w], p[ids.transform.conv1_b])?;
        let scene = conv(tape, features, p[ids.scene.conv_w], p[ids.scene.conv_b])?;
        let scene_map = tape.reshape(scene, &[cells])?;
        Ok(Self {
            features,
            find_conv1,
            transform_conv1,
            scene_map,
            cells,
        })
    }

    fn check_map(&self, tape: &Tape, a: Tensor) -> Result<()> {
        if tape.shape(a) != [self.cells] {
            return Err(Error::shape(
                "module",
                format!("attention {:?} on a grid of {} cells", tape.shape(a), self.cells),
            ));
        }
        Ok(())
    }

    fn to_map(&self, tape: &Tape, hidden: Tensor, w: Tensor, b: Tensor) -> Result<Tensor> {
        let out = conv(tape, hidden, w, b)?;
        tape.reshape(out, &[self.cells])
    }

    /// `conv2(conv1(x) ⊙ W c)`.
    pub fn find(&self, tape: &Tape, c: Tensor, p: &Bound, ids: &ModuleIds) -> Result<Tensor> {
        let f = &ids.find;
        let text = tape.matmul(c, p[f.text_w])?;
        let hidden = tape.mul(self.find_conv1, text)?;
        self.to_map(tape, hidden, p[f.conv2_w], p[f.conv2_b])
    }

    /// `conv2(conv1(x) ⊙ W1 Σ(a ⊙ x) ⊙ W2 c)`.
    pub fn transform(&self, tape: &Tape, a: Tensor, c: Tensor, p: &Bound, ids: &ModuleIds) -> Result<Tensor> {
        self.check_map(tape, a)?;
        let tr = &ids.transform;
        let attended = tape.attended_sum(a, self.features)?;
        let attended = tape.matmul(attended, p[tr.attended_w])?;
        let text = tape.matmul(c, p[tr.text_w])?;
        let hidden = tape.mul(self.transform_conv1, tape.mul(attended, text)?)?;
        self.to_map(tape, hidden, p[tr.conv2_w], p[tr.conv2_b])
    }

    pub fn and(&self, tape: &Tape, a1: Tensor, a2: Tensor) -> Result<Tensor> {
        tape.minimum(a1, a2)
    }

    pub fn or(&self, tape: &Tape, a1: Tensor, a2: Tensor) -> Result<Tensor> {
        tape.maximum(a1, a2)
    }

    /// `And(a, Find())` with Find's own parameters.
    pub fn filter(&self, tape: &Tape, a: Tensor, c: Tensor, p: &Bound, ids: &ModuleIds) -> Result<Tensor> {
        self.check_map(tape, a)?;
        let found = self.find(tape, c, p, ids)?;
        self.and(tape, a, found)
    }

    /// `conv1(x)` with a single output channel.
    pub fn scene(&self) -> Tensor {
        self.scene_map
    }

    /// `W1ᵀ elu(W2 Σ(a ⊙ x) ⊙ W3 c + b)`.
    pub fn answer(&self, tape: &Tape, a: Tensor, c: Tensor, p: &Bound, ids: &ModuleIds) -> Result<Tensor> {
        self.check_map(tape, a)?;
        let an = &ids.answer;
        let attended = tape.matmul(tape.attended_sum(a, self.features)?, p[an.attended_w])?;
        let text = tape.matmul(c, p[an.text_w])?;
        let hidden = tape.add(tape.mul(attended, text)?, p[an.hidden_b])?;
        tape.matmul(tape.elu(hidden), p[an.out_w])
    }

    /// `W1ᵀ elu(W2 Σ(a1 ⊙ x) ⊙ W3 Σ(a2 ⊙ x) ⊙ W4 c + b)`.
    pub fn compare(&self, tape: &Tape, a1: Tensor, a2: Tensor, c: Tensor, p: &Bound, ids: &ModuleIds) -> Result<Tensor> {
        self.check_map(tape, a1)?;
        self.check_map(tape, a2)?;
        let cm = &ids.compare;
        let first = tape.matmul(tape.attended_sum(a1, self.features)?, p[cm.first_w])?;
        let second = tape.matmul(tape.attended_sum(a2, self.features)?, p[cm.second_w])?;
        let text = tape.matmul(c, p[cm.text_w])?;
        let joint = tape.mul(tape.mul(first, second)?, text)?;
        let hidden = tape.add(joint, p[cm.hidden_b])?;
        tape.matmul(tape.elu(hidden), p[cm.out_w])
    }
}
