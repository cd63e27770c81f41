//! Named parameter storage and the checkpoint archive.
//!
//! Archive layout: a UTF-8 header
//!
//! ```text
//! stack-nmn-archive 1
//! <count>
//! <name> <dim,dim,...> <byte offset>     (one line per tensor)
//! end
//! ```
//!
//! followed by the concatenated little-endian `f64` payloads. Offsets are
//! relative to the first payload byte.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::ops::Index;
use std::path::Path;

use rand::Rng;

use super::{Tape, Tensor};
use crate::error::{Error, Result};

const MAGIC: &str = "stack-nmn-archive 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

/// Parameters placed on a tape as leaves, indexable by [`ParamId`].
pub struct Bound(Vec<Tensor>);

impl Index<ParamId> for Bound {
    type Output = Tensor;

    fn index(&self, id: ParamId) -> &Tensor {
        &self.0[id.0]
    }
}

impl Bound {
    /// Wraps tensors laid out in [`ParamStore`] order.
    pub fn from_tensors(tensors: Vec<Tensor>) -> Self {
        Self(tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.0
    }
}

/// Uniform(-s, s) with s = sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform<R: Rng>(rng: &mut R, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-s..s)).collect()
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Adds (or replaces) a parameter.
    pub fn insert(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), values.len(), "parameter {name}");
        let param = Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            values,
        };
        if let Some(&i) = self.by_name.get(name) {
            self.params[i] = param;
            return ParamId(i);
        }
        self.params.push(param);
        self.by_name.insert(name.to_string(), self.params.len() - 1);
        ParamId(self.params.len() - 1)
    }

    /// Weight matrix `[fan_in, fan_out]` with Xavier-uniform entries.
    pub fn insert_weight<R: Rng>(&mut self, rng: &mut R, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let values = xavier_uniform(rng, fan_in * fan_out, fan_in, fan_out);
        self.insert(name, &[fan_in, fan_out], values)
    }

    pub fn insert_filled(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.insert(name, shape, vec![value; shape.iter().product()])
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| &self.params[id.0])
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    pub fn bind(&self, tape: &Tape, requires_grad: bool) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| tape.input(&p.shape, p.values.clone(), requires_grad))
                .collect(),
        )
    }

    /// Gradients of every bound parameter after `tape.backward`; zeros where
    /// a parameter did not influence the root.
    pub fn gradients(&self, tape: &Tape, bound: &Bound) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .zip(&bound.0)
            .map(|(p, &t)| tape.grad(t).unwrap_or_else(|| vec![0.0; p.values.len()]))
            .collect()
    }

    /// `name=L2 norm` pairs, used in diagnostics.
    pub fn norms(&self) -> String {
        self.params
            .iter()
            .map(|p| {
                let n = p.values.iter().map(|v| v * v).sum::<f64>().sqrt();
                format!("{}={n:.4e}", p.name)
            })
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn write_archive<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = format!("{MAGIC}\n{}\n", self.params.len());
        let mut offset = 0usize;
        for p in &self.params {
            let dims: Vec<String> = p.shape.iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("{} {} {offset}\n", p.name, dims.join(",")));
            offset += p.values.len() * 8;
        }
        header.push_str("end\n");
        w.write_all(header.as_bytes())?;
        for p in &self.params {
            for v in &p.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_archive<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line_no = 0;
        let mut next_line = |r: &mut BufReader<R>| -> Result<(usize, String)> {
            let mut s = String::new();
            line_no += 1;
            if r.read_line(&mut s)? == 0 {
                return Err(Error::Parse {
                    line: line_no,
                    detail: "unexpected end of archive header".into(),
                });
            }
            Ok((line_no, s.trim_end_matches('\n').to_string()))
        };
        let bad = |line: usize, detail: &str| Error::Parse {
            line,
            detail: detail.to_string(),
        };
        let (l, magic) = next_line(&mut r)?;
        if magic != MAGIC {
            return Err(bad(l, "not a stack-nmn archive"));
        }
        let (l, count) = next_line(&mut r)?;
        let count: usize = count.parse().map_err(|_| bad(l, "bad tensor count"))?;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let (l, entry) = next_line(&mut r)?;
            let fields: Vec<&str> = entry.split(' ').collect();
            let [name, dims, offset] = fields[..] else {
                return Err(bad(l, "expected `name dims offset`"));
            };
            let shape = if dims.is_empty() {
                Vec::new()
            } else {
                dims.split(',')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad(l, "bad dimension"))?
            };
            let offset: usize = offset.parse().map_err(|_| bad(l, "bad offset"))?;
            manifest.push((name.to_string(), shape, offset));
        }
        let (l, end) = next_line(&mut r)?;
        if end != "end" {
            return Err(bad(l, "missing `end` after manifest"));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let mut store = ParamStore::new();
        for (name, shape, offset) in manifest {
            let n: usize = shape.iter().product();
            let bytes = payload
                .get(offset..offset + n * 8)
                .ok_or_else(|| bad(l, &format!("payload for {name} out of range")))?;
            let values = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.insert(&name, &shape, values);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_archive(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_archive(std::fs::File::open(path)?)
    }
}
