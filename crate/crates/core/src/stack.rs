//! Differentiable LIFO memory.
//!
//! A stack is a value matrix `A` of `depth` rows (each a flattened attention
//! map) and a soft pointer `p` over the rows. Push moves the pointer up one
//! row and blends the new vector into the rows it now points at; pop reads
//! the pointer-weighted row average and moves the pointer down. Both moves
//! are zero-padded shifts, so pointer mass at the boundary row falls off.
//!
//! Stacks are immutable values: every operation returns a new stack and
//! leaves its input untouched.

use crate::error::{Error, Result};
use crate::tensor::{ShiftDirection, Tape, Tensor};

/// Slack allowed on pointer mass and mixture weights.
pub const MASS_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sharpening {
    /// `softmax(p_raw / temperature)`.
    Softmax { temperature: f64 },
    /// Keep the averaged pointer as is.
    Off,
}

impl Default for Sharpening {
    fn default() -> Self {
        Sharpening::Softmax { temperature: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryStack {
    /// `[depth, map_size]`.
    pub values: Tensor,
    /// `[depth]`.
    pub pointer: Tensor,
    pub depth: usize,
    pub map_size: usize,
    /// Raise instead of silently dropping pointer mass at either end.
    pub strict_bounds: bool,
}

impl MemoryStack {
    pub fn new(tape: &Tape, values: Tensor, pointer: Tensor) -> Result<Self> {
        let (depth, map_size) = match tape.shape(values).as_slice() {
            [l, m] if *l > 0 => (*l, *m),
            s => return Err(Error::shape("stack", format!("values shape {s:?}"))),
        };
        if tape.shape(pointer) != [depth] {
            return Err(Error::shape(
                "stack",
                format!("pointer shape {:?} for depth {depth}", tape.shape(pointer)),
            ));
        }
        Ok(Self {
            values,
            pointer,
            depth,
            map_size,
            strict_bounds: false,
        })
    }

    /// Builds a stack from plain arrays (row-major `[depth, map_size]`).
    pub fn from_arrays(tape: &Tape, depth: usize, map_size: usize, values: Vec<f64>, pointer: Vec<f64>) -> Result<Self> {
        if values.len() != depth * map_size || pointer.len() != depth {
            return Err(Error::shape("stack", "array sizes do not match depth/map_size"));
        }
        let v = tape.constant(&[depth, map_size], values);
        let p = tape.constant(&[depth], pointer);
        Self::new(tape, v, p)
    }

    pub fn with_strict_bounds(mut self, strict: bool) -> Self {
        self.strict_bounds = strict;
        self
    }

    fn with(&self, values: Tensor, pointer: Tensor) -> Self {
        Self {
            values,
            pointer,
            ..*self
        }
    }

    pub fn pointer_mass(&self, tape: &Tape) -> f64 {
        tape.with_value(self.pointer, |p| p.iter().sum())
    }

    /// `Σ_i p_i · A_i`, without moving the pointer.
    pub fn read_top(&self, tape: &Tape) -> Result<Tensor> {
        tape.matmul(self.pointer, self.values)
    }

    pub fn push(&self, tape: &Tape, z: Tensor) -> Result<Self> {
        if tape.shape(z) != [self.map_size] {
            return Err(Error::shape(
                "push",
                format!("vector {:?} onto map size {}", tape.shape(z), self.map_size),
            ));
        }
        let p = tape.shift_1d(self.pointer, ShiftDirection::Up)?;
        if self.strict_bounds {
            let mass: f64 = tape.with_value(p, |v| v.iter().sum());
            if mass < 1.0 - MASS_TOLERANCE {
                return Err(Error::StackOverflow {
                    mass: tape.with_value(self.pointer, |v| v[self.depth - 1]),
                });
            }
        }
        let col = tape.reshape(p, &[self.depth, 1])?;
        let keep = tape.affine(col, -1.0, 1.0);
        let kept = tape.mul(self.values, keep)?;
        let written = tape.mul(col, z)?;
        let values = tape.add(kept, written)?;
        Ok(self.with(values, p))
    }

    pub fn pop(&self, tape: &Tape) -> Result<(Tensor, Self)> {
        if self.strict_bounds {
            let bottom = tape.with_value(self.pointer, |v| v[0]);
            if bottom >= 1.0 - MASS_TOLERANCE {
                return Err(Error::StackUnderflow);
            }
        }
        let z = self.read_top(tape)?;
        let p = tape.shift_1d(self.pointer, ShiftDirection::Down)?;
        Ok((z, self.with(self.values, p)))
    }

    /// Weighted average of values and pointers. The pointer is left
    /// unsharpened.
    pub fn combine(tape: &Tape, stacks: &[MemoryStack], weights: Tensor) -> Result<Self> {
        let first = stacks
            .first()
            .ok_or_else(|| Error::shape("combine", "no stacks"))?;
        if stacks
            .iter()
            .any(|s| s.depth != first.depth || s.map_size != first.map_size)
        {
            return Err(Error::shape("combine", "stacks differ in depth or map size"));
        }
        if tape.shape(weights) != [stacks.len()] {
            return Err(Error::shape(
                "combine",
                format!("{:?} weights for {} stacks", tape.shape(weights), stacks.len()),
            ));
        }
        let total: f64 = tape.with_value(weights, |w| w.iter().sum());
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::Input(format!("mixture weights sum to {total}")));
        }
        let mut values = None;
        let mut pointer = None;
        for (m, s) in stacks.iter().enumerate() {
            let w = tape.pick(weights, m)?;
            let v = tape.mul(s.values, w)?;
            let p = tape.mul(s.pointer, w)?;
            values = Some(match values {
                None => v,
                Some(acc) => tape.add(acc, v)?,
            });
            pointer = Some(match pointer {
                None => p,
                Some(acc) => tape.add(acc, p)?,
            });
        }
        Ok(first.with(values.unwrap(), pointer.unwrap()))
    }

    pub fn sharpen(&self, tape: &Tape, sharpening: Sharpening) -> Result<Self> {
        let pointer = sharpen_pointer(tape, self.pointer, sharpening)?;
        Ok(self.with(self.values, pointer))
    }
}

pub fn sharpen_pointer(tape: &Tape, raw: Tensor, sharpening: Sharpening) -> Result<Tensor> {
    match sharpening {
        Sharpening::Off => Ok(raw),
        Sharpening::Softmax { temperature } => {
            let scaled = if temperature == 1.0 {
                raw
            } else {
                tape.scale(raw, 1.0 / temperature)
            };
            tape.softmax(scaled, 0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use proptest::prelude::*;

    fn rows3() -> Vec<f64> {
        vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
    }

    #[test]
    fn push_into_hard_pointer_substitutes_row() {
        let t = Tape::new();
        let s = MemoryStack::from_arrays(&t, 3, 2, rows3(), vec![1.0, 0.0, 0.0]).unwrap();
        let z = t.constant(&[2], vec![9.0, 8.0]);
        let s2 = s.push(&t, z).unwrap();
        assert_eq!(t.value(s2.pointer), vec![0.0, 1.0, 0.0]);
        assert_eq!(t.value(s2.values), vec![1.0, 2.0, 9.0, 8.0, 5.0, 6.0]);
        // Input stack untouched.
        assert_eq!(t.value(s.values), rows3());
        assert_eq!(t.value(s.pointer), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn push_at_top_drops_mass() {
        let t = Tape::new();
        let s = MemoryStack::from_arrays(&t, 3, 2, rows3(), vec![0.0, 0.0, 1.0]).unwrap();
        let z = t.constant(&[2], vec![9.0, 8.0]);
        let s2 = s.push(&t, z).unwrap();
        assert_eq!(t.value(s2.pointer), vec![0.0; 3]);
        assert_eq!(t.value(s2.values), rows3());
        let strict = s.with_strict_bounds(true);
        assert!(matches!(strict.push(&t, z), Err(Error::StackOverflow { .. })));
    }

    #[test]
    fn push_with_soft_pointer() {
        let t = Tape::new();
        let s = MemoryStack::from_arrays(&t, 3, 2, rows3(), vec![0.5, 0.5, 0.0]).unwrap();
        let s2 = s.push(&t, t.constant(&[2], vec![9.0, 8.0])).unwrap();
        assert_eq!(t.value(s2.pointer), vec![0.0, 0.5, 0.5]);
        assert_eq!(
            t.value(s2.values),
            vec![1.0, 2.0, 0.5 * 3.0 + 4.5, 0.5 * 4.0 + 4.0, 0.5 * 5.0 + 4.5, 0.5 * 6.0 + 4.0]
        );
    }

    #[test]
    fn push_size_mismatch() {
        let t = Tape::new();
        let s = MemoryStack::from_arrays(&t, 3, 2, rows3(), vec![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(s.push(&t, t.zeros(&[3])), Err(Error::Shape { .. })));
    }

    #[test]
    fn pop_examples() {
        let t = Tape::new();
        let s = MemoryStack::from_arrays(&t, 3, 2, rows3(), vec![0.0, 1.0, 0.0]).unwrap();
        let (z, s2) = s.pop(&t).unwrap();
        assert_eq!(t.value(z), vec![3.0, 4.0]);
        assert_eq!(t.value(s2.pointer), vec![1.0, 0.0, 0.0]);
        assert_eq!(t.value(s2.values), rows3());

        let s = MemoryStack::from_arrays(&t, 3, 2, rows3(), vec![0.5, 0.5, 0.0]).unwrap();
        let (z, _) = s.pop(&t).unwrap();
        assert_eq!(t.value(z), vec![2.0, 3.0]);

        let bottom = MemoryStack::from_arrays(&t, 3, 2, rows3(), vec![1.0, 0.0, 0.0])
            .unwrap()
            .with_strict_bounds(true);
        assert!(matches!(bottom.pop(&t), Err(Error::StackUnderflow)));
    }

    #[test]
    fn pop_after_push_round_trips() {
        let t = Tape::new();
        let s = MemoryStack::from_arrays(&t, 4, 2, vec![0.5; 8], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let z = t.constant(&[2], vec![-1.0, 7.0]);
        let (back, s2) = s.push(&t, z).unwrap().pop(&t).unwrap();
        assert_eq!(t.value(back), vec![-1.0, 7.0]);
        assert_eq!(t.value(s2.pointer), t.value(s.pointer));
    }

    #[test]
    fn combine_degenerate_and_fixed_point() {
        let t = Tape::new();
        let a = MemoryStack::from_arrays(&t, 3, 2, rows3(), vec![0.0, 1.0, 0.0]).unwrap();
        let b = MemoryStack::from_arrays(&t, 3, 2, vec![0.25; 6], vec![0.2, 0.3, 0.5]).unwrap();
        let one_hot = t.constant(&[2], vec![0.0, 1.0]);
        let c = MemoryStack::combine(&t, &[a, b], one_hot).unwrap();
        assert_eq!(t.value(c.values), t.value(b.values));
        assert_eq!(t.value(c.pointer), t.value(b.pointer));

        let w = t.constant(&[2], vec![0.3, 0.7]);
        let c = MemoryStack::combine(&t, &[b, b], w).unwrap();
        for (x, y) in t.value(c.values).iter().zip(t.value(b.values)) {
            assert!((x - y).abs() < 1e-15);
        }

        let bad = t.constant(&[2], vec![0.3, 0.6]);
        assert!(MemoryStack::combine(&t, &[a, b], bad).is_err());
        let short = MemoryStack::from_arrays(&t, 2, 2, vec![0.0; 4], vec![1.0, 0.0]).unwrap();
        assert!(matches!(MemoryStack::combine(&t, &[a, short], w), Err(Error::Shape { .. })));
    }

    #[test]
    fn combine_matches_loop_oracle() {
        let t = Tape::new();
        let va: Vec<f64> = (0..6).map(|i| (i as f64 * 0.7).sin()).collect();
        let vb: Vec<f64> = (0..6).map(|i| (i as f64 * 1.3).cos()).collect();
        let (pa, pb) = (vec![0.1, 0.6, 0.3], vec![0.5, 0.25, 0.25]);
        let a = MemoryStack::from_arrays(&t, 3, 2, va.clone(), pa.clone()).unwrap();
        let b = MemoryStack::from_arrays(&t, 3, 2, vb.clone(), pb.clone()).unwrap();
        let w = [0.35, 0.65];
        let c = MemoryStack::combine(&t, &[a, b], t.constant(&[2], w.to_vec())).unwrap();
        let vals = t.value(c.values);
        for i in 0..6 {
            assert_eq!(vals[i], va[i] * w[0] + vb[i] * w[1]);
        }
        let ptr = t.value(c.pointer);
        for i in 0..3 {
            assert_eq!(ptr[i], pa[i] * w[0] + pb[i] * w[1]);
        }
    }

    #[test]
    fn sharpen_examples() {
        let t = Tape::new();
        let p = sharpen_pointer(&t, t.constant(&[3], vec![1.0, 0.0, 0.0]), Sharpening::default()).unwrap();
        let v = t.value(p);
        let e = std::f64::consts::E;
        assert!((v[0] - e / (e + 2.0)).abs() < 1e-15);
        assert!((v[0] - 0.576).abs() < 1e-3 && (v[1] - 0.212).abs() < 1e-3);
        let u = t.value(sharpen_pointer(&t, t.constant(&[4], vec![0.25; 4]), Sharpening::default()).unwrap());
        assert!(u.iter().all(|x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn gradients_flow_through_push_pop_combine_sharpen() {
        let inputs = vec![
            (vec![3, 2], vec![0.3, -0.4, 0.9, 0.2, -0.5, 0.1]),
            (vec![3], vec![0.6, 0.3, 0.1]),
            (vec![2], vec![0.7, -0.2]),
            (vec![2], vec![0.2, 0.5]),
        ];
        let report = gradcheck::check(&inputs, 1e-4, |t, x| {
            let s = MemoryStack::new(t, x[0], x[1])?;
            let pushed = s.push(t, x[2])?;
            let (z, popped) = pushed.pop(t)?;
            let pushed_again = popped.push(t, t.mul(z, x[3])?)?;
            let w = t.softmax(x[3], 0)?;
            let mixed = MemoryStack::combine(t, &[pushed_again, popped], w)?;
            let sharp = mixed.sharpen(t, Sharpening::default())?;
            let top = sharp.read_top(t)?;
            Ok(t.sum(t.mul(top, top)?))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }

    fn hard_pointer(depth: usize, at: usize) -> Vec<f64> {
        let mut p = vec![0.0; depth];
        p[at] = 1.0;
        p
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn hard_interior_round_trip(
            depth in 3usize..8,
            at_frac in 0.0f64..1.0,
            rows in prop::collection::vec(-5.0f64..5.0, 8 * 4),
            z in prop::collection::vec(-5.0f64..5.0, 4),
        ) {
            let at = 1 + ((depth - 2) as f64 * at_frac) as usize % (depth - 2);
            let t = Tape::new();
            let s = MemoryStack::from_arrays(&t, depth, 4, rows[..depth * 4].to_vec(), hard_pointer(depth, at)).unwrap();
            let zt = t.constant(&[4], z.clone());
            let (back, s2) = s.push(&t, zt).unwrap().pop(&t).unwrap();
            prop_assert_eq!(t.value(back), z);
            prop_assert_eq!(t.value(s2.pointer), hard_pointer(depth, at));
        }

        #[test]
        fn push_pop_are_linear_under_mixtures(
            rows_a in prop::collection::vec(-3.0f64..3.0, 12),
            rows_b in prop::collection::vec(-3.0f64..3.0, 12),
            ptr in prop::collection::vec(0.0f64..1.0, 4),
            za in prop::collection::vec(-3.0f64..3.0, 3),
            zb in prop::collection::vec(-3.0f64..3.0, 3),
            w1 in 0.0f64..1.0,
        ) {
            let total: f64 = ptr.iter().sum::<f64>().max(1e-9);
            let ptr: Vec<f64> = ptr.iter().map(|x| x / total).collect();
            let w = [w1, 1.0 - w1];
            let t = Tape::new();
            let a = MemoryStack::from_arrays(&t, 4, 3, rows_a, ptr.clone()).unwrap();
            let b = MemoryStack::from_arrays(&t, 4, 3, rows_b, ptr.clone()).unwrap();
            let weights = t.constant(&[2], w.to_vec());
            let mixed = MemoryStack::combine(&t, &[a, b], weights).unwrap();
            let zmix: Vec<f64> = za.iter().zip(&zb).map(|(x, y)| w[0] * x + w[1] * y).collect();
            let lhs = mixed.push(&t, t.constant(&[3], zmix)).unwrap();
            let pa = a.push(&t, t.constant(&[3], za)).unwrap();
            let pb = b.push(&t, t.constant(&[3], zb)).unwrap();
            let rhs = MemoryStack::combine(&t, &[pa, pb], weights).unwrap();
            for (x, y) in t.value(lhs.values).iter().zip(t.value(rhs.values)) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            for (x, y) in t.value(lhs.pointer).iter().zip(t.value(rhs.pointer)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let (zl, sl) = mixed.pop(&t).unwrap();
            let (z1, s1) = a.pop(&t).unwrap();
            let (z2, s2) = b.pop(&t).unwrap();
            let zr: Vec<f64> = t.value(z1).iter().zip(t.value(z2)).map(|(x, y)| w[0] * x + w[1] * y).collect();
            for (x, y) in t.value(zl).iter().zip(zr) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            let sr = MemoryStack::combine(&t, &[s1, s2], weights).unwrap();
            for (x, y) in t.value(sl.pointer).iter().zip(t.value(sr.pointer)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn mass_accounting(ptr in prop::collection::vec(0.0f64..1.0, 2..9)) {
            let total: f64 = ptr.iter().sum::<f64>().max(1e-9);
            let ptr: Vec<f64> = ptr.iter().map(|x| x / total).collect();
            let depth = ptr.len();
            let t = Tape::new();
            let s = MemoryStack::from_arrays(&t, depth, 2, vec![0.0; depth * 2], ptr.clone()).unwrap();
            let before = s.pointer_mass(&t);
            let pushed = s.push(&t, t.zeros(&[2])).unwrap();
            prop_assert!((before - ptr[depth - 1] - pushed.pointer_mass(&t)).abs() < 1e-12);
            let (_, popped) = s.pop(&t).unwrap();
            prop_assert!((before - ptr[0] - popped.pointer_mass(&t)).abs() < 1e-12);
        }

        #[test]
        fn sharpening_preserves_argmax(raw in prop::collection::vec(-3.0f64..3.0, 1..10)) {
            let t = Tape::new();
            let n = raw.len();
            let p = t.value(sharpen_pointer(&t, t.constant(&[n], raw.clone()), Sharpening::default()).unwrap());
            let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b });
            prop_assert_eq!(argmax(&p), argmax(&raw));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
