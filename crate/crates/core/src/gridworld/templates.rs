//! Question and referring-expression templates.
//!
//! Answers are computed directly from the scene here. The symbolic executor
//! recomputes them from the emitted layout, which gives an independent
//! check of both.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::words::{Phrase, Relation};
use super::{Color, Object, Scene, Shape, Size};
use crate::error::{Error, Result};
use crate::modules::ModuleKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Vqa,
    Ref,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Exist,
    Count,
    QueryAttr,
    RelateExist,
    RelateQuery,
    CompareCount,
    CompareAttr,
    RefSimple,
    RefRelational,
}

impl Family {
    pub const ALL: [Family; 9] = [
        Family::Exist,
        Family::Count,
        Family::QueryAttr,
        Family::RelateExist,
        Family::RelateQuery,
        Family::CompareCount,
        Family::CompareAttr,
        Family::RefSimple,
        Family::RefRelational,
    ];

    pub fn kind(self) -> TaskKind {
        match self {
            Family::RefSimple | Family::RefRelational => TaskKind::Ref,
            _ => TaskKind::Vqa,
        }
    }

    pub fn of_kind(kind: TaskKind) -> Vec<Family> {
        Self::ALL.into_iter().filter(|f| f.kind() == kind).collect()
    }
}

/// One postorder layout step; `span` is the half-open token range holding
/// the step's argument words.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutStep {
    pub module: ModuleKind,
    pub span: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub kind: TaskKind,
    pub family: Family,
    pub template_id: String,
    pub tokens: Vec<String>,
    pub layout: Vec<LayoutStep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    /// Index into the scene's objects.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<usize>,
}

impl TaskRecord {
    /// Module ids padded with NoOp to `steps`.
    pub fn expert_modules(&self, steps: usize) -> Result<Vec<ModuleKind>> {
        if self.layout.len() > steps {
            return Err(Error::Layout(format!(
                "layout of {} steps exceeds T = {steps}",
                self.layout.len()
            )));
        }
        let mut m: Vec<ModuleKind> = self.layout.iter().map(|s| s.module).collect();
        m.resize(steps, ModuleKind::NoOp);
        Ok(m)
    }
}

#[derive(Default)]
struct Builder {
    tokens: Vec<String>,
    layout: Vec<LayoutStep>,
}

impl Builder {
    fn words(&mut self, ws: &[&str]) -> [usize; 2] {
        let start = self.tokens.len();
        self.tokens.extend(ws.iter().map(|w| w.to_string()));
        [start, self.tokens.len()]
    }

    fn step(&mut self, module: ModuleKind, span: [usize; 2]) {
        self.layout.push(LayoutStep { module, span });
    }

    /// A Find on `phrase`, emitting its words.
    fn find(&mut self, phrase: &Phrase, plural: bool) {
        let span = self.words(&phrase.words(plural));
        self.step(ModuleKind::Find, span);
    }

    fn finish(self, family: Family, template: &str, answer: Option<String>, target: Option<usize>) -> TaskRecord {
        TaskRecord {
            kind: family.kind(),
            family,
            template_id: template.to_string(),
            tokens: self.tokens,
            layout: self.layout,
            answer,
            target,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Attr {
    Size,
    Color,
    Shape,
}

impl Attr {
    const ALL: [Attr; 3] = [Attr::Size, Attr::Color, Attr::Shape];

    fn word(self) -> &'static str {
        match self {
            Attr::Size => "size",
            Attr::Color => "color",
            Attr::Shape => "shape",
        }
    }

    fn value(self, o: &Object) -> &'static str {
        match self {
            Attr::Size => o.size.word(),
            Attr::Color => o.color.word(),
            Attr::Shape => o.shape.word(),
        }
    }
}

fn retry(why: &str) -> Error {
    Error::Retry(why.to_string())
}

fn yes_no(b: bool) -> String {
    if b { "yes" } else { "no" }.to_string()
}

/// A non-empty phrase, describing a real object more often than not so
/// that existence questions are not almost always "no".
fn sample_phrase<R: Rng>(scene: &Scene, rng: &mut R) -> Phrase {
    let mut p = if !scene.objects.is_empty() && rng.gen_bool(0.6) {
        let o = scene.objects.choose(rng).unwrap();
        Phrase {
            size: rng.gen_bool(0.4).then_some(o.size),
            color: rng.gen_bool(0.6).then_some(o.color),
            shape: rng.gen_bool(0.6).then_some(o.shape),
        }
    } else {
        Phrase {
            size: rng.gen_bool(0.4).then(|| *Size::ALL.choose(rng).unwrap()),
            color: rng.gen_bool(0.6).then(|| *Color::ALL.choose(rng).unwrap()),
            shape: rng.gen_bool(0.6).then(|| *Shape::ALL.choose(rng).unwrap()),
        }
    };
    if p == Phrase::default() {
        p.shape = Some(*Shape::ALL.choose(rng).unwrap());
    }
    p
}

/// A non-empty phrase, never mentioning `exclude`, that `target` satisfies
/// and no other member of `pool` does.
fn unique_phrase<R: Rng>(pool: &[&Object], target: &Object, exclude: Option<Attr>, rng: &mut R) -> Option<Phrase> {
    let allowed: Vec<Attr> = Attr::ALL.into_iter().filter(|a| Some(*a) != exclude).collect();
    let mut subsets: Vec<Vec<Attr>> = (1u32..(1 << allowed.len()))
        .map(|mask| {
            allowed
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, a)| *a)
                .collect()
        })
        .collect();
    subsets.shuffle(rng);
    subsets.into_iter().find_map(|attrs| {
        let mut p = Phrase::default();
        for a in attrs {
            match a {
                Attr::Size => p.size = Some(target.size),
                Attr::Color => p.color = Some(target.color),
                Attr::Shape => p.shape = Some(target.shape),
            }
        }
        (pool.iter().filter(|o| p.matches(o)).count() == 1).then_some(p)
    })
}

/// A random object with a scene-unique description.
fn anchor<R: Rng>(scene: &Scene, rng: &mut R, avoid: Option<usize>) -> Result<(usize, Phrase)> {
    let all: Vec<&Object> = scene.objects.iter().collect();
    let candidates: Vec<usize> = (0..all.len()).filter(|&i| Some(i) != avoid).collect();
    let &i = candidates.choose(rng).ok_or_else(|| retry("no anchor object"))?;
    let p = unique_phrase(&all, all[i], None, rng).ok_or_else(|| retry("anchor cannot be described uniquely"))?;
    Ok((i, p))
}

fn related<'a>(scene: &'a Scene, rel: Relation, anchor: usize) -> Vec<(usize, &'a Object)> {
    let a = &scene.objects[anchor];
    scene
        .objects
        .iter()
        .enumerate()
        .filter(|(_, o)| rel.holds(o, a))
        .collect()
}

/// Emits `Find(anchor) Transform(rel)` and returns the related objects.
fn relate<'a, R: Rng>(b: &mut Builder, scene: &'a Scene, rng: &mut R, avoid: Option<usize>) -> Result<(usize, Vec<(usize, &'a Object)>)> {
    let (a, phrase) = anchor(scene, rng, avoid)?;
    let rel = *Relation::ALL.choose(rng).unwrap();
    let rel_span = b.words(rel.words());
    b.words(&["the"]);
    b.find(&phrase, false);
    b.step(ModuleKind::Transform, rel_span);
    Ok((a, related(scene, rel, a)))
}

fn count(scene: &Scene, p: &Phrase) -> usize {
    scene.objects.iter().filter(|o| p.matches(o)).count()
}

/// Generates one task of `family`, or [`Error::Retry`] when the scene does
/// not support it.
pub fn generate_task<R: Rng>(scene: &Scene, family: Family, rng: &mut R) -> Result<TaskRecord> {
    let mut b = Builder::default();
    let all: Vec<&Object> = scene.objects.iter().collect();
    match family {
        Family::Exist => {
            if rng.gen_bool(0.6) {
                let p = sample_phrase(scene, rng);
                let ask = b.words(&["is", "there"]);
                b.words(&["a"]);
                b.find(&p, false);
                b.words(&["?"]);
                b.step(ModuleKind::Answer, ask);
                Ok(b.finish(family, "exist_simple", Some(yes_no(count(scene, &p) > 0)), None))
            } else {
                let p1 = sample_phrase(scene, rng);
                let p2 = sample_phrase(scene, rng);
                if p1 == p2 {
                    return Err(retry("identical alternatives"));
                }
                let ask = b.words(&["is", "there"]);
                b.words(&["a"]);
                b.find(&p1, false);
                let or = b.words(&["or"]);
                b.words(&["a"]);
                b.find(&p2, false);
                b.words(&["?"]);
                b.step(ModuleKind::Or, or);
                b.step(ModuleKind::Answer, ask);
                let yes = scene.objects.iter().any(|o| p1.matches(o) || p2.matches(o));
                Ok(b.finish(family, "exist_or", Some(yes_no(yes)), None))
            }
        }
        Family::Count => {
            let r: f64 = rng.gen();
            if r < 0.35 {
                let p = sample_phrase(scene, rng);
                let ask = b.words(&["how", "many"]);
                b.find(&p, true);
                b.words(&["are", "there", "?"]);
                b.step(ModuleKind::Answer, ask);
                Ok(b.finish(family, "count_simple", Some(count(scene, &p).to_string()), None))
            } else if r < 0.5 {
                let ask = b.words(&["how", "many"]);
                let things = b.words(&["things"]);
                b.step(ModuleKind::Scene, things);
                b.words(&["are", "there", "?"]);
                b.step(ModuleKind::Answer, ask);
                Ok(b.finish(family, "count_scene", Some(scene.objects.len().to_string()), None))
            } else if r < 0.8 {
                let p = sample_phrase(scene, rng);
                let ask = b.words(&["how", "many"]);
                let filter = b.words(&p.words(true));
                b.words(&["are"]);
                let (_, rel) = relate(&mut b, scene, rng, None)?;
                b.words(&["?"]);
                b.step(ModuleKind::Filter, filter);
                b.step(ModuleKind::Answer, ask);
                let n = rel.iter().filter(|(_, o)| p.matches(o)).count();
                Ok(b.finish(family, "count_relate", Some(n.to_string()), None))
            } else {
                let ask = b.words(&["how", "many"]);
                b.words(&["things", "are"]);
                let (a1, first) = relate(&mut b, scene, rng, None)?;
                let and = b.words(&["and"]);
                let (_, second) = relate(&mut b, scene, rng, Some(a1))?;
                b.words(&["?"]);
                b.step(ModuleKind::And, and);
                b.step(ModuleKind::Answer, ask);
                let n = first
                    .iter()
                    .filter(|(i, _)| second.iter().any(|(j, _)| i == j))
                    .count();
                Ok(b.finish(family, "count_and", Some(n.to_string()), None))
            }
        }
        Family::QueryAttr => {
            let attr = *Attr::ALL.choose(rng).unwrap();
            let &target = all.choose(rng).ok_or_else(|| retry("empty scene"))?;
            let p = unique_phrase(&all, target, Some(attr), rng).ok_or_else(|| retry("no unique description"))?;
            let ask = b.words(&["what", attr.word()]);
            b.words(&["is", "the"]);
            b.find(&p, false);
            b.words(&["?"]);
            b.step(ModuleKind::Answer, ask);
            let template = format!("query_{}", attr.word());
            Ok(b.finish(family, &template, Some(attr.value(target).to_string()), None))
        }
        Family::RelateExist => {
            let ask = b.words(&["is", "there"]);
            b.words(&["a"]);
            let p = sample_phrase(scene, rng);
            let filter = b.words(&p.words(false));
            let (_, rel) = relate(&mut b, scene, rng, None)?;
            b.words(&["?"]);
            b.step(ModuleKind::Filter, filter);
            b.step(ModuleKind::Answer, ask);
            let yes = rel.iter().any(|(_, o)| p.matches(o));
            Ok(b.finish(family, "relate_exist", Some(yes_no(yes)), None))
        }
        Family::RelateQuery | Family::RefRelational => {
            let attr = (family == Family::RelateQuery).then(|| *Attr::ALL.choose(rng).unwrap());
            let ask = match attr {
                Some(a) => {
                    let s = b.words(&["what", a.word()]);
                    b.words(&["is", "the"]);
                    Some(s)
                }
                None => {
                    b.words(&["the"]);
                    None
                }
            };
            let filter_at = b.tokens.len();
            let (_, rel) = relate(&mut b, scene, rng, None)?;
            let &(target, obj) = rel.choose(rng).ok_or_else(|| retry("nothing in relation"))?;
            let pool: Vec<&Object> = rel.iter().map(|(_, o)| *o).collect();
            let p = unique_phrase(&pool, obj, attr, rng).ok_or_else(|| retry("no unique description"))?;
            // The filter phrase goes between the question words and the relation.
            let words = p.words(false);
            let n = words.len();
            for (k, w) in words.iter().enumerate() {
                b.tokens.insert(filter_at + k, w.to_string());
            }
            for s in &mut b.layout {
                s.span = [s.span[0] + n, s.span[1] + n];
            }
            b.step(ModuleKind::Filter, [filter_at, filter_at + n]);
            match (attr, ask) {
                (Some(a), Some(ask)) => {
                    b.words(&["?"]);
                    b.step(ModuleKind::Answer, ask);
                    let template = format!("relate_query_{}", a.word());
                    Ok(b.finish(family, &template, Some(a.value(obj).to_string()), None))
                }
                _ => Ok(b.finish(family, "ref_relational", None, Some(target))),
            }
        }
        Family::CompareCount => {
            let p1 = sample_phrase(scene, rng);
            let p2 = sample_phrase(scene, rng);
            if p1 == p2 {
                return Err(retry("identical phrases"));
            }
            let (n1, n2) = (count(scene, &p1), count(scene, &p2));
            let (template, cmp, yes) = match rng.gen_range(0..3) {
                0 => {
                    b.words(&["are", "there"]);
                    let cmp = b.words(&["more"]);
                    b.find(&p1, true);
                    b.words(&["than"]);
                    b.find(&p2, true);
                    ("compare_more", cmp, n1 > n2)
                }
                1 => {
                    b.words(&["are", "there"]);
                    let cmp = b.words(&["fewer"]);
                    b.find(&p1, true);
                    b.words(&["than"]);
                    b.find(&p2, true);
                    ("compare_fewer", cmp, n1 < n2)
                }
                _ => {
                    b.words(&["are", "there", "the"]);
                    let cmp = b.words(&["same", "number"]);
                    b.words(&["of"]);
                    b.find(&p1, true);
                    b.words(&["and"]);
                    b.find(&p2, true);
                    ("compare_same_number", cmp, n1 == n2)
                }
            };
            b.words(&["?"]);
            b.step(ModuleKind::Compare, cmp);
            Ok(b.finish(family, template, Some(yes_no(yes)), None))
        }
        Family::CompareAttr => {
            if all.len() < 2 {
                return Err(retry("need two objects"));
            }
            let attr = *Attr::ALL.choose(rng).unwrap();
            let picked: Vec<&&Object> = all.choose_multiple(rng, 2).collect();
            let (o1, o2) = (*picked[0], *picked[1]);
            let p1 = unique_phrase(&all, o1, Some(attr), rng).ok_or_else(|| retry("no unique description"))?;
            let p2 = unique_phrase(&all, o2, Some(attr), rng).ok_or_else(|| retry("no unique description"))?;
            b.words(&["does", "the"]);
            b.find(&p1, false);
            b.words(&["have", "the"]);
            let cmp = b.words(&["same", attr.word()]);
            b.words(&["as", "the"]);
            b.find(&p2, false);
            b.words(&["?"]);
            b.step(ModuleKind::Compare, cmp);
            let template = format!("compare_{}", attr.word());
            Ok(b.finish(family, &template, Some(yes_no(attr.value(o1) == attr.value(o2))), None))
        }
        Family::RefSimple => {
            let i = rng.gen_range(0..all.len().max(1));
            let &target = all.get(i).ok_or_else(|| retry("empty scene"))?;
            let p = unique_phrase(&all, target, None, rng).ok_or_else(|| retry("no unique description"))?;
            b.words(&["the"]);
            b.find(&p, false);
            Ok(b.finish(family, "ref_simple", None, Some(i)))
        }
    }
}
