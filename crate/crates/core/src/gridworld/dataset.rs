//! Split generation and line-delimited JSON storage.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::templates::{generate_task, Family, TaskKind, TaskRecord};
use super::words::{ANSWERS, WORDS};
use super::{generate_scene, Scene};
use crate::error::{Error, Result};

/// Largest share any single answer may take within a family of a split.
pub const MAJORITY_CAP: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: u64,
    pub scene: Scene,
    #[serde(flatten)]
    pub task: TaskRecord,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub grid: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Examples per task (VQA and REF each) in every split.
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            grid: 5,
            min_objects: 3,
            max_objects: 8,
            train: 2000,
            val: 500,
            test: 500,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    /// Examples per task in split `s`.
    pub fn split_size(&self, s: Split) -> usize {
        match s {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Record>,
    pub val: Vec<Record>,
    pub test: Vec<Record>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[Record] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Writes the three splits plus `vocab.txt` and `answers.txt`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for s in Split::ALL {
            write_dataset(&dir.join(s.file_name()), self.split(s))?;
        }
        write_lines(&dir.join("vocab.txt"), WORDS)?;
        write_lines(&dir.join("answers.txt"), ANSWERS)
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        Ok(Self {
            train: read_dataset(&dir.join(Split::Train.file_name()))?,
            val: read_dataset(&dir.join(Split::Val.file_name()))?,
            test: read_dataset(&dir.join(Split::Test.file_name()))?,
        })
    }
}

fn quotas(total: usize, families: &[Family]) -> Vec<(Family, usize)> {
    let n = families.len();
    families
        .iter()
        .enumerate()
        .map(|(i, &f)| (f, total / n + usize::from(i < total % n)))
        .collect()
}

fn generate_split(spec: &DatasetSpec, split: Split, per_task: usize) -> Result<Vec<Record>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(split as u64);
    let mut records = Vec::with_capacity(2 * per_task);
    for kind in [TaskKind::Vqa, TaskKind::Ref] {
        for (family, quota) in quotas(per_task, &Family::of_kind(kind)) {
            let cap = ((quota as f64 * MAJORITY_CAP).floor() as usize).max(quota.div_ceil(2)).max(1);
            let mut seen: HashMap<String, usize> = HashMap::new();
            let mut accepted = 0;
            let mut attempts = 0usize;
            while accepted < quota {
                attempts += 1;
                if attempts > 1000 * quota.max(1) {
                    return Err(Error::Generation(format!(
                        "could not fill {quota} {family:?} examples for the {} split",
                        split.name()
                    )));
                }
                let n = rng.gen_range(spec.min_objects..=spec.max_objects);
                let scene = generate_scene(spec.grid, n, rng.gen())?;
                let task = match generate_task(&scene, family, &mut rng) {
                    Ok(t) => t,
                    Err(Error::Retry(_)) => continue,
                    Err(e) => return Err(e),
                };
                if let Some(a) = &task.answer {
                    let c = seen.entry(a.clone()).or_default();
                    if *c >= cap {
                        continue;
                    }
                    *c += 1;
                }
                records.push(Record {
                    id: records.len() as u64,
                    scene,
                    task,
                });
                accepted += 1;
            }
        }
    }
    Ok(records)
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.min_objects > spec.max_objects || spec.max_objects > spec.grid * spec.grid {
        return Err(Error::Config(format!(
            "object range {}..={} does not fit a {}x{} grid",
            spec.min_objects, spec.max_objects, spec.grid, spec.grid
        )));
    }
    Ok(Dataset {
        train: generate_split(spec, Split::Train, spec.train)?,
        val: generate_split(spec, Split::Val, spec.val)?,
        test: generate_split(spec, Split::Test, spec.test)?,
    })
}

pub fn write_dataset(path: &Path, records: &[Record]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Input(e.to_string()))?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads one record per non-empty line; errors carry the 1-based line.
pub fn read_dataset(path: &Path) -> Result<Vec<Record>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            detail: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(l.as_ref());
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}
