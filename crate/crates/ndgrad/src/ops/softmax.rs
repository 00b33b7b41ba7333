//! Stable softmax (max-subtraction) and its masked variant. Masked entries
//! receive exactly zero weight; a fully-masked row yields an all-zero row.

use crate::array::Array;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{record, Var};

fn softmax_row_plain<T: Scalar>(xs: &[T], orow: &mut [T]) {
    let mut mx = xs[0];
    for &v in &xs[1..] {
        mx = mx.maximum(v);
    }
    let mut sum = T::ZERO;
    for (o, &v) in orow.iter_mut().zip(xs) {
        let e = (v - mx).exp();
        *o = e;
        sum = sum + e;
    }
    for o in orow.iter_mut() {
        *o = *o / sum;
    }
}

fn softmax_row_masked<T: Scalar>(xs: &[T], ms: &[T], orow: &mut [T]) {
    let mut mx: Option<T> = None;
    for (&v, &m) in xs.iter().zip(ms) {
        if m != T::ZERO {
            mx = Some(match mx {
                None => v,
                Some(acc) => acc.maximum(v),
            });
        }
    }
    let Some(mx) = mx else { return }; // fully masked row stays zero
    let mut sum = T::ZERO;
    for ((o, &v), &m) in orow.iter_mut().zip(xs).zip(ms) {
        if m != T::ZERO {
            let e = (v - mx).exp();
            *o = e;
            sum = sum + e;
        }
    }
    for o in orow.iter_mut() {
        *o = *o / sum;
    }
}

/// Row softmax; `mask` rows repeat across `head_repeat` consecutive row
/// groups (mask row count * head_repeat == x row count).
fn softmax_rows<T: Scalar>(x: &Array<T>, mask: Option<(&Array<T>, usize)>) -> Array<T> {
    let d = x.last_dim();
    let rows = x.len() / d;
    let mut out = vec![T::ZERO; x.len()];
    match mask {
        None => {
            for r in 0..rows {
                softmax_row_plain(&x.data()[r * d..(r + 1) * d], &mut out[r * d..(r + 1) * d]);
            }
        }
        Some((m, head_repeat)) => {
            // x rows laid out as [n, head, lq]; mask rows as [n, lq]
            let lq_rows = m.len() / d; // n * lq
            let lq = if head_repeat == 1 { lq_rows } else { x.shape()[x.rank() - 2] };
            for r in 0..rows {
                let (block, lqi) = (r / lq, r % lq);
                let n = block / head_repeat;
                let mrow = &m.data()[(n * lq + lqi) * d..(n * lq + lqi + 1) * d];
                let xs = &x.data()[r * d..(r + 1) * d];
                let orow = &mut out[r * d..(r + 1) * d];
                if mrow.iter().all(|&v| v != T::ZERO) {
                    softmax_row_plain(xs, orow);
                } else {
                    softmax_row_masked(xs, mrow, orow);
                }
            }
        }
    }
    Array::from_vec(x.shape().to_vec(), out).expect("softmax shape")
}

fn softmax_backward<T: Scalar>(g: &Array<T>, y: &Array<T>) -> Array<T> {
    let d = y.last_dim();
    let rows = y.len() / d;
    let mut gx = vec![T::ZERO; y.len()];
    for r in 0..rows {
        let ys = &y.data()[r * d..(r + 1) * d];
        let gs = &g.data()[r * d..(r + 1) * d];
        let mut dot = T::ZERO;
        for i in 0..d {
            dot = dot + gs[i] * ys[i];
        }
        let out = &mut gx[r * d..(r + 1) * d];
        for i in 0..d {
            out[i] = ys[i] * (gs[i] - dot);
        }
    }
    Array::from_vec(y.shape().to_vec(), gx).expect("softmax grad shape")
}

impl<T: Scalar> Var<T> {
    /// Softmax along `axis`; entries in (0,1), sums to 1 along the axis.
    pub fn softmax(&self, axis: usize) -> Result<Var<T>> {
        let rank = self.shape().len();
        if axis >= rank {
            return Err(Error::BadShape {
                op: "softmax",
                shape: self.shape().to_vec(),
                msg: format!("axis {axis} out of range"),
            });
        }
        if self.shape()[axis] == 0 {
            return Err(Error::BadShape {
                op: "softmax",
                shape: self.shape().to_vec(),
                msg: "empty axis".into(),
            });
        }
        if axis == rank - 1 {
            return self.softmax_last(None);
        }
        // Move the axis last, apply, move back; grads compose through permute.
        let mut perm: Vec<usize> = (0..rank).filter(|&a| a != axis).collect();
        perm.push(axis);
        let mut inv = vec![0usize; rank];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        self.permute(&perm)?.softmax_last(None)?.permute(&inv)
    }

    /// Softmax over the last axis with a 0/1 mask of equal shape.
    pub fn masked_softmax_last(&self, mask: &Array<T>) -> Result<Var<T>> {
        if mask.shape() != self.shape() {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax",
                lhs: self.shape().to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        self.softmax_last(Some((mask, 1)))
    }

    /// Masked softmax for per-head score tensors [N*heads, Lq, Lk] sharing
    /// one mask [N, Lq, Lk] across heads, without materializing the tiled
    /// mask.
    pub fn masked_softmax_heads(&self, mask: &Array<T>, heads: usize) -> Result<Var<T>> {
        let ok = heads >= 1
            && self.rank() == 3
            && mask.rank() == 3
            && self.shape()[0] == mask.shape()[0] * heads
            && self.shape()[1..] == mask.shape()[1..];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax_heads",
                lhs: self.shape().to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        self.softmax_last(Some((mask, heads)))
    }

    fn rank(&self) -> usize {
        self.shape().len()
    }

    fn softmax_last(&self, mask: Option<(&Array<T>, usize)>) -> Result<Var<T>> {
        if self.value().last_dim() == 0 {
            return Err(Error::BadShape {
                op: "softmax",
                shape: self.shape().to_vec(),
                msg: "empty axis".into(),
            });
        }
        let out = softmax_rows(self.value(), mask);
        let y = out.clone();
        record(&[self], out, move |g| vec![softmax_backward(g, &y)])
    }
}
