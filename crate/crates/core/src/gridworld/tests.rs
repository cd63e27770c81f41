use std::collections::{BTreeSet, HashMap};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::executor::symbolic::execute_expert;
use crate::modules::ModuleKind;

fn small_spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        train: 120,
        val: 40,
        test: 40,
        seed,
        ..DatasetSpec::default()
    }
}

fn object(row: usize, col: usize, color: Color, shape: Shape, size: Size) -> Object {
    let (x, y) = (col as f64, row as f64);
    Object {
        row,
        col,
        color,
        shape,
        size,
        bbox: [x + 0.2, y + 0.2, x + 0.8, y + 0.8],
    }
}

fn scene(objects: Vec<Object>) -> Scene {
    Scene {
        grid: 5,
        objects,
        seed: 0,
    }
}

fn words(s: &str) -> Vec<String> {
    s.split(' ').map(str::to_string).collect()
}

fn step(module: ModuleKind, a: usize, b: usize) -> LayoutStep {
    LayoutStep { module, span: [a, b] }
}

#[test]
fn scene_generation_examples() {
    assert!(generate_scene(5, 0, 1).unwrap().objects.is_empty());
    assert!(matches!(generate_scene(1, 2, 1), Err(Error::Generation(_))));
    assert_eq!(generate_scene(5, 6, 42).unwrap(), generate_scene(5, 6, 42).unwrap());
    assert_ne!(generate_scene(5, 6, 42).unwrap(), generate_scene(5, 6, 43).unwrap());
}

proptest! {
    #[test]
    fn scenes_are_well_formed(seed in any::<u64>(), n in 0usize..=25) {
        let s = generate_scene(5, n, seed).unwrap();
        prop_assert_eq!(s.objects.len(), n);
        let cells: BTreeSet<(usize, usize)> = s.objects.iter().map(|o| (o.row, o.col)).collect();
        prop_assert_eq!(cells.len(), n);
        for o in &s.objects {
            let [x0, y0, x1, y1] = o.bbox;
            prop_assert!(x0 < x1 && y0 < y1);
            let (c, r) = (o.col as f64, o.row as f64);
            prop_assert!(x0 >= c - 0.2 && x1 <= c + 1.2 && y0 >= r - 0.2 && y1 <= r + 1.2);
        }
    }

    #[test]
    fn tiny_datasets_fill(seed in any::<u64>(), train in 0usize..24) {
        let spec = DatasetSpec { train, val: 1, test: 0, seed, ..DatasetSpec::default() };
        let d = generate_dataset(&spec).unwrap();
        prop_assert_eq!(d.train.len(), 2 * train);
    }
}

#[test]
fn feature_rendering() {
    let empty = render_features(&scene(vec![]));
    assert_eq!((empty.height, empty.width, empty.depth), (5, 5, FEATURES));
    for i in 0..5 {
        for j in 0..5 {
            let c = empty.cell(i, j);
            assert_eq!(c[8], 0.0);
            assert_eq!(c[9], (i as f64 + 0.5) / 5.0);
            assert_eq!(c[10], (j as f64 + 0.5) / 5.0);
        }
    }
    let one = render_features(&scene(vec![object(0, 0, Color::Red, Shape::Circle, Size::Small)]));
    let present: Vec<(usize, usize)> = (0..25)
        .filter(|k| one.cell(k / 5, k % 5)[8] == 1.0)
        .map(|k| (k / 5, k % 5))
        .collect();
    assert_eq!(present, vec![(0, 0)]);
    assert_eq!(one.cell(0, 0)[..9], [1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
}

#[test]
fn vocabulary_behaviour() {
    let v = Vocabulary::questions();
    assert_eq!(v.len(), WORDS.len());
    assert_eq!(v.word(v.id("red").unwrap()), Some("red"));
    assert!(matches!(v.id("purple"), Err(Error::Vocabulary { .. })));
    assert!(Vocabulary::new(&["a", "a"]).is_err());
    assert_eq!(Vocabulary::answers().len(), 19);
}

#[test]
fn symbolic_find_and_transform_examples() {
    let s = scene(vec![
        object(0, 0, Color::Red, Shape::Circle, Size::Small),
        object(2, 3, Color::Red, Shape::Square, Size::Large),
        object(4, 4, Color::Blue, Shape::Square, Size::Small),
    ]);
    let r = execute_expert(&[step(ModuleKind::Find, 0, 1)], &words("red"), &s).unwrap();
    assert_eq!(r.top, BTreeSet::from([0, 1]));

    let toks = words("left of the red circle");
    let r = execute_expert(&[step(ModuleKind::Find, 3, 5), step(ModuleKind::Transform, 0, 2)], &toks, &s).unwrap();
    assert!(r.top.is_empty());

    let toks = words("how many objects are right of the red circle ?");
    let layout = [
        step(ModuleKind::Find, 7, 9),
        step(ModuleKind::Transform, 4, 6),
        step(ModuleKind::Filter, 2, 3),
        step(ModuleKind::Answer, 0, 2),
    ];
    assert_eq!(execute_expert(&layout, &toks, &s).unwrap().answer.as_deref(), Some("2"));
}

#[test]
fn symbolic_arity_violation_is_a_layout_error() {
    let s = scene(vec![object(0, 0, Color::Red, Shape::Circle, Size::Small)]);
    let bad = [step(ModuleKind::Find, 0, 1), step(ModuleKind::And, 0, 0)];
    assert!(matches!(execute_expert(&bad, &words("red"), &s), Err(Error::Layout(_))));
    let out_of_range = [step(ModuleKind::Find, 0, 4)];
    assert!(matches!(execute_expert(&out_of_range, &words("red"), &s), Err(Error::Layout(_))));
}

#[test]
fn task_examples() {
    let s = scene(vec![
        object(1, 1, Color::Red, Shape::Circle, Size::Small),
        object(1, 3, Color::Blue, Shape::Square, Size::Small),
        object(3, 4, Color::Green, Shape::Triangle, Size::Large),
    ]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut saw_red_circle_yes = false;
    for _ in 0..400 {
        let t = match generate_task(&s, Family::Exist, &mut rng) {
            Ok(t) => t,
            Err(_) => continue,
        };
        if t.tokens.join(" ") == "is there a red circle ?" {
            assert_eq!(t.answer.as_deref(), Some("yes"));
            saw_red_circle_yes = true;
        }
    }
    assert!(saw_red_circle_yes);

    // Two identical objects can never be referred to uniquely.
    let twins = scene(vec![
        object(0, 0, Color::Red, Shape::Circle, Size::Small),
        object(4, 4, Color::Red, Shape::Circle, Size::Small),
    ]);
    for _ in 0..50 {
        assert!(matches!(generate_task(&twins, Family::RefSimple, &mut rng), Err(Error::Retry(_))));
    }
}

#[test]
fn padded_expert_layouts() {
    let s = generate_scene(5, 6, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = loop {
        if let Ok(t) = generate_task(&s, Family::Count, &mut rng) {
            break t;
        }
    };
    let m = t.expert_modules(6).unwrap();
    assert_eq!(m.len(), 6);
    assert_eq!(m[t.layout.len()..].iter().filter(|&&k| k != ModuleKind::NoOp).count(), 0);
    assert!(t.expert_modules(t.layout.len() - 1).is_err());
}

#[test]
fn generated_corpus_invariants() {
    let spec = small_spec(5);
    let d = generate_dataset(&spec).unwrap();
    let vocab = Vocabulary::questions();
    let answers = Vocabulary::answers();
    let mut templates = BTreeSet::new();
    let mut modules = BTreeSet::new();
    for s in Split::ALL {
        let recs = d.split(s);
        assert_eq!(recs.len(), 2 * spec.split_size(s));
        let mut per_family: HashMap<Family, HashMap<String, usize>> = HashMap::new();
        for r in recs {
            templates.insert(r.task.template_id.clone());
            vocab.ids(&r.task.tokens).unwrap();
            assert!(r.task.layout.len() <= 6);
            for st in &r.task.layout {
                modules.insert(st.module);
            }
            let sym = execute_expert(&r.task.layout, &r.task.tokens, &r.scene).unwrap();
            match r.task.kind {
                TaskKind::Vqa => {
                    let a = r.task.answer.clone().unwrap();
                    answers.id(&a).unwrap();
                    assert_eq!(sym.answer.as_ref(), Some(&a), "{:?}", r.task.tokens);
                    *per_family.entry(r.task.family).or_default().entry(a).or_default() += 1;
                }
                TaskKind::Ref => {
                    assert_eq!(sym.top, BTreeSet::from([r.task.target.unwrap()]), "{:?}", r.task.tokens);
                }
            }
        }
        for (family, counts) in per_family {
            let total: usize = counts.values().sum();
            let top = *counts.values().max().unwrap();
            assert!(top as f64 <= 0.6 * total as f64 + 1.0, "{family:?} {counts:?}");
        }
    }
    for m in ModuleKind::ALL {
        if m != ModuleKind::NoOp {
            assert!(modules.contains(&m), "{m} never used");
        }
    }
    assert!(templates.len() >= 18, "{templates:?}");
}

#[test]
fn generation_is_deterministic() {
    let a = generate_dataset(&small_spec(9)).unwrap();
    let b = generate_dataset(&small_spec(9)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.train, generate_dataset(&small_spec(10)).unwrap().train);
}

#[test]
fn dataset_files_round_trip() {
    let d = generate_dataset(&small_spec(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    write_dataset(&path, &d.train[..100]).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), d.train[..100].to_vec());

    std::fs::write(&path, "").unwrap();
    assert!(read_dataset(&path).unwrap().is_empty());

    write_dataset(&path, &d.train[..3]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let cut = text.len() - 20;
    std::fs::write(&path, &text[..cut]).unwrap();
    match read_dataset(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }

    d.write_dir(dir.path()).unwrap();
    assert_eq!(Dataset::read_dir(dir.path()).unwrap(), d);
    assert_eq!(read_lines(&dir.path().join("vocab.txt")).unwrap(), WORDS);
    assert_eq!(read_lines(&dir.path().join("answers.txt")).unwrap(), ANSWERS);
}
