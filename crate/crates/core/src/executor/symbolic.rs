//! Exact set-semantics interpreter of expert layouts over symbolic scenes.
//!
//! The stack holds sets of object indices. Its base entry is the set of
//! all objects (the counterpart of the uniform initial attention) and may
//! not be popped. Answer pushes its input back and Compare pushes back the
//! first set it popped, mirroring the soft executor.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::gridworld::{LayoutStep, Phrase, Relation, Scene};
use crate::modules::ModuleKind;

pub type ObjectSet = BTreeSet<usize>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymbolicResult {
    /// The last answer produced, if any step answered.
    pub answer: Option<String>,
    /// Set on top of the stack after the final step.
    pub top: ObjectSet,
}

fn yes_no(b: bool) -> String {
    if b { "yes" } else { "no" }.to_string()
}

fn attribute(scene: &Scene, set: &ObjectSet, attr: &str) -> Result<&'static str> {
    let &[i] = set.iter().collect::<Vec<_>>().as_slice() else {
        return Err(Error::Layout(format!("{attr} query over {} objects", set.len())));
    };
    let o = &scene.objects[*i];
    Ok(match attr {
        "color" => o.color.word(),
        "shape" => o.shape.word(),
        "size" => o.size.word(),
        _ => unreachable!(),
    })
}

fn attr_word<'a>(words: &[&'a str]) -> Option<&'a str> {
    words.iter().copied().find(|w| matches!(*w, "color" | "shape" | "size"))
}

pub fn execute_expert<S: AsRef<str>>(layout: &[LayoutStep], tokens: &[S], scene: &Scene) -> Result<SymbolicResult> {
    let all: ObjectSet = (0..scene.objects.len()).collect();
    let mut stack: Vec<ObjectSet> = vec![all.clone()];
    let mut answer = None;
    for (t, step) in layout.iter().enumerate() {
        let [a, b] = step.span;
        if a > b || b > tokens.len() {
            return Err(Error::Layout(format!("step {t}: span {a}..{b} outside {} tokens", tokens.len())));
        }
        let words: Vec<&str> = tokens[a..b].iter().map(|w| w.as_ref()).collect();
        let needed = step.module.arity();
        if stack.len() <= needed {
            return Err(Error::Layout(format!(
                "step {t}: {} needs {needed} inputs, the stack holds {}",
                step.module,
                stack.len() - 1
            )));
        }
        let mut pop = || stack.pop().unwrap();
        let matching = |p: &Phrase| -> ObjectSet {
            scene
                .objects
                .iter()
                .enumerate()
                .filter(|(_, o)| p.matches(o))
                .map(|(i, _)| i)
                .collect()
        };
        let pushed = match step.module {
            ModuleKind::Find => Some(matching(&Phrase::parse(&words)?)),
            ModuleKind::Scene => Some(all.clone()),
            ModuleKind::Transform => {
                let anchors = pop();
                let rel = words
                    .iter()
                    .find_map(|w| Relation::from_word(w))
                    .ok_or_else(|| Error::Layout(format!("step {t}: no relation in {words:?}")))?;
                Some(
                    (0..scene.objects.len())
                        .filter(|&i| {
                            anchors
                                .iter()
                                .any(|&j| rel.holds(&scene.objects[i], &scene.objects[j]))
                        })
                        .collect(),
                )
            }
            ModuleKind::Filter => {
                let s = pop();
                let m = matching(&Phrase::parse(&words)?);
                Some(s.intersection(&m).copied().collect())
            }
            ModuleKind::And => {
                let (x, y) = (pop(), pop());
                Some(x.intersection(&y).copied().collect())
            }
            ModuleKind::Or => {
                let (x, y) = (pop(), pop());
                Some(x.union(&y).copied().collect())
            }
            ModuleKind::Answer => {
                let s = pop();
                answer = Some(if words.contains(&"how") {
                    s.len().to_string()
                } else if words.contains(&"there") {
                    yes_no(!s.is_empty())
                } else if let Some(attr) = attr_word(&words) {
                    attribute(scene, &s, attr)?.to_string()
                } else {
                    return Err(Error::Layout(format!("step {t}: unknown question words {words:?}")));
                });
                Some(s)
            }
            ModuleKind::Compare => {
                let first = pop();
                let second = pop();
                answer = Some(if words.contains(&"more") {
                    yes_no(second.len() > first.len())
                } else if words.contains(&"fewer") {
                    yes_no(second.len() < first.len())
                } else if words.contains(&"number") {
                    yes_no(second.len() == first.len())
                } else if let Some(attr) = attr_word(&words) {
                    yes_no(attribute(scene, &second, attr)? == attribute(scene, &first, attr)?)
                } else {
                    return Err(Error::Layout(format!("step {t}: unknown comparison {words:?}")));
                });
                Some(first)
            }
            ModuleKind::NoOp => None,
        };
        if let Some(s) = pushed {
            stack.push(s);
        }
    }
    Ok(SymbolicResult {
        answer,
        top: stack.pop().unwrap(),
    })
}
