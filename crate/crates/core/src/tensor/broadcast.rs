//! Right-aligned broadcasting: missing leading axes and axes of extent one
//! stretch to match the other operand.

#[derive(Debug)]
pub(super) struct Broadcast {
    shape: Vec<usize>,
    // Source offsets per output element; `None` when both shapes are equal.
    index: Option<(Vec<usize>, Vec<usize>)>,
    len_a: usize,
    len_b: usize,
}

fn strides_for(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let pad = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[pad + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

impl Broadcast {
    pub(super) fn new(a: &[usize], b: &[usize]) -> Option<Self> {
        let len_a = a.iter().product();
        let len_b = b.iter().product();
        if a == b {
            return Some(Self {
                shape: a.to_vec(),
                index: None,
                len_a,
                len_b,
            });
        }
        let rank = a.len().max(b.len());
        let dim = |s: &[usize], i: usize| {
            let pad = rank - s.len();
            if i < pad {
                1
            } else {
                s[i - pad]
            }
        };
        let mut shape = Vec::with_capacity(rank);
        for i in 0..rank {
            let (da, db) = (dim(a, i), dim(b, i));
            shape.push(match (da, db) {
                _ if da == db => da,
                (1, d) | (d, 1) => d,
                _ => return None,
            });
        }
        let (sa, sb) = (strides_for(a, &shape), strides_for(b, &shape));
        let total: usize = shape.iter().product();
        let mut ia = Vec::with_capacity(total);
        let mut ib = Vec::with_capacity(total);
        let mut counter = vec![0usize; rank];
        let (mut oa, mut ob) = (0usize, 0usize);
        for _ in 0..total {
            ia.push(oa);
            ib.push(ob);
            for ax in (0..rank).rev() {
                counter[ax] += 1;
                oa += sa[ax];
                ob += sb[ax];
                if counter[ax] < shape[ax] {
                    break;
                }
                oa -= sa[ax] * shape[ax];
                ob -= sb[ax] * shape[ax];
                counter[ax] = 0;
            }
        }
        Some(Self {
            shape,
            index: Some((ia, ib)),
            len_a,
            len_b,
        })
    }

    pub(super) fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub(super) fn apply(&self, a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        match &self.index {
            None => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
            Some((ia, ib)) => ia.iter().zip(ib).map(|(&i, &j)| f(a[i], b[j])).collect(),
        }
    }

    pub(super) fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        match &self.index {
            None => (0..self.len_a).for_each(|i| f(i, i, i)),
            Some((ia, ib)) => {
                for (o, (&i, &j)) in ia.iter().zip(ib).enumerate() {
                    f(o, i, j)
                }
            }
        }
    }

    /// Sums per-output contributions back onto operand `a`.
    pub(super) fn reduce_a(&self, d: &[f64], ga: &mut [f64]) {
        debug_assert_eq!(ga.len(), self.len_a);
        match &self.index {
            None => ga.iter_mut().zip(d).for_each(|(x, y)| *x += y),
            Some((ia, _)) => ia.iter().zip(d).for_each(|(&i, y)| ga[i] += y),
        }
    }

    pub(super) fn reduce_b(&self, d: &[f64], gb: &mut [f64]) {
        debug_assert_eq!(gb.len(), self.len_b);
        match &self.index {
            None => gb.iter_mut().zip(d).for_each(|(x, y)| *x += y),
            Some((_, ib)) => ib.iter().zip(d).for_each(|(&j, y)| gb[j] += y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trailing_singleton_expands() {
        let b = Broadcast::new(&[3, 1], &[3, 2]).unwrap();
        assert_eq!(b.shape(), &[3, 2]);
        let out = b.apply(&[1.0, 2.0, 3.0], &[0.0; 6], |x, y| x + y);
        assert_eq!(out, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn leading_axis_expands() {
        let b = Broadcast::new(&[2, 3], &[3]).unwrap();
        let out = b.apply(&[0.0; 6], &[1.0, 2.0, 3.0], |x, y| x + y);
        assert_eq!(out, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn incompatible_shapes() {
        assert!(Broadcast::new(&[2, 3], &[2]).is_none());
        assert!(Broadcast::new(&[4], &[3]).is_none());
    }
}
