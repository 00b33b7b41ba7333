//! Shape manipulation: reshape, permute, concat, axis indexing, expand.

use crate::array::{strides_of, Array};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{record, Var};

fn permute_raw<T: Scalar>(x: &Array<T>, perm: &[usize]) -> Array<T> {
    let in_shape = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&a| in_shape[a]).collect();
    let rank = perm.len();
    if rank == 0 || x.is_empty() {
        return Array::from_vec(out_shape, x.data().to_vec()).expect("permute shape");
    }
    let in_strides = strides_of(in_shape);
    // walk the output in row-major order, tracking the source index with an
    // odometer over the permuted source strides
    let src_strides: Vec<usize> = perm.iter().map(|&a| in_strides[a]).collect();
    let mut counters = vec![0usize; rank];
    let mut src = 0usize;
    let data = x.data();
    let mut out = Vec::with_capacity(x.len());
    for _ in 0..x.len() {
        out.push(data[src]);
        for a in (0..rank).rev() {
            counters[a] += 1;
            src += src_strides[a];
            if counters[a] < out_shape[a] {
                break;
            }
            counters[a] = 0;
            src -= src_strides[a] * out_shape[a];
        }
    }
    Array::from_vec(out_shape, out).expect("permute shape")
}

impl<T: Scalar> Var<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        let out = self.value().reshaped(shape.to_vec())?;
        let orig = self.shape().to_vec();
        record(&[self], out, move |g| {
            vec![g.reshaped(orig.clone()).expect("reshape grad")]
        })
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<T>> {
        if perm.len() != self.shape().len() {
            return Err(Error::BadShape {
                op: "permute",
                shape: self.shape().to_vec(),
                msg: format!("perm {perm:?} has wrong arity"),
            });
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::Config(format!("permute: invalid axes {perm:?}")));
            }
            seen[p] = true;
        }
        let out = permute_raw(self.value(), perm);
        let mut inv = vec![0usize; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        record(&[self], out, move |g| vec![permute_raw(g, &inv)])
    }

    /// Select index `i` along `axis`, dropping that axis.
    pub fn index_axis(&self, axis: usize, i: usize) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || i >= shape[axis] {
            return Err(Error::BadShape {
                op: "index_axis",
                shape,
                msg: format!("axis {axis} index {i} out of range"),
            });
        }
        let strides = strides_of(&shape);
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(a, _)| a != axis)
            .map(|(_, &d)| d)
            .collect();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = strides[axis];
        let block = shape[axis] * inner;
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = o * block + i * inner;
            out.extend_from_slice(&self.value().data()[base..base + inner]);
        }
        let out = Array::from_vec(out_shape, out)?;
        record(&[self], out, move |g| {
            let mut gx = vec![T::ZERO; outer * block];
            for o in 0..outer {
                let base = o * block + i * inner;
                gx[base..base + inner].copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
            }
            vec![Array::from_vec(shape.clone(), gx).expect("index grad")]
        })
    }

    /// Contiguous slice [start, start+len) along `axis`, keeping rank.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::BadShape {
                op: "narrow",
                shape,
                msg: format!("axis {axis} range {start}..{} out of bounds", start + len),
            });
        }
        let strides = strides_of(&shape);
        let inner = strides[axis];
        let outer: usize = shape[..axis].iter().product();
        let block = shape[axis] * inner;
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * block + start * inner;
            out.extend_from_slice(&self.value().data()[base..base + len * inner]);
        }
        let out = Array::from_vec(out_shape, out)?;
        record(&[self], out, move |g| {
            let mut gx = vec![T::ZERO; outer * block];
            for o in 0..outer {
                let base = o * block + start * inner;
                gx[base..base + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Array::from_vec(shape.clone(), gx).expect("narrow grad")]
        })
    }

    /// Broadcast a size-1 axis up to size n by tiling.
    pub fn expand(&self, axis: usize, n: usize) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || shape[axis] != 1 {
            return Err(Error::BadShape {
                op: "expand",
                shape,
                msg: format!("axis {axis} must exist and have size 1"),
            });
        }
        let strides = strides_of(&shape);
        let inner = strides[axis];
        let outer: usize = shape[..axis].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = n;
        let mut out = Vec::with_capacity(self.value().len() * n);
        for o in 0..outer {
            let chunk = &self.value().data()[o * inner..(o + 1) * inner];
            for _ in 0..n {
                out.extend_from_slice(chunk);
            }
        }
        let out = Array::from_vec(out_shape, out)?;
        record(&[self], out, move |g| {
            let mut gx = vec![T::ZERO; outer * inner];
            for o in 0..outer {
                for r in 0..n {
                    let base = (o * n + r) * inner;
                    for i in 0..inner {
                        gx[o * inner + i] = gx[o * inner + i] + g.data()[base + i];
                    }
                }
            }
            vec![Array::from_vec(shape.clone(), gx).expect("expand grad")]
        })
    }
}

/// Concatenate along `axis`; all other dims must match.
pub fn concat<T: Scalar>(parts: &[&Var<T>], axis: usize) -> Result<Var<T>> {
    if parts.is_empty() {
        return Err(Error::Contract("concat: no operands".into()));
    }
    let base = parts[0].shape().to_vec();
    if axis >= base.len() {
        return Err(Error::BadShape {
            op: "concat",
            shape: base,
            msg: format!("axis {axis} out of range"),
        });
    }
    let mut axis_sizes = Vec::with_capacity(parts.len());
    for p in parts {
        let s = p.shape();
        let compatible = s.len() == base.len()
            && s.iter()
                .zip(&base)
                .enumerate()
                .all(|(a, (&d, &bd))| a == axis || d == bd);
        if !compatible {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: base,
                rhs: s.to_vec(),
            });
        }
        axis_sizes.push(s[axis]);
    }
    let total: usize = axis_sizes.iter().sum();
    let mut out_shape = base.clone();
    out_shape[axis] = total;

    let strides = strides_of(&base);
    let inner = strides[axis];
    let outer: usize = base[..axis].iter().product();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (p, &sz) in parts.iter().zip(&axis_sizes) {
            let blk = sz * inner;
            out.extend_from_slice(&p.value().data()[o * blk..(o + 1) * blk]);
        }
    }
    let out = Array::from_vec(out_shape, out)?;
    let sizes = axis_sizes.clone();
    record(parts.to_vec().as_slice(), out, move |g| {
        let mut grads: Vec<Vec<T>> = sizes.iter().map(|&sz| Vec::with_capacity(outer * sz * inner)).collect();
        let mut offset = 0usize;
        let row = total * inner;
        for o in 0..outer {
            let _ = o;
            let mut pos = offset;
            for (gi, &sz) in grads.iter_mut().zip(&sizes) {
                gi.extend_from_slice(&g.data()[pos..pos + sz * inner]);
                pos += sz * inner;
            }
            offset += row;
        }
        grads
            .into_iter()
            .zip(&sizes)
            .map(|(gd, &sz)| {
                let mut s = base.clone();
                s[axis] = sz;
                Array::from_vec(s, gd).expect("concat grad")
            })
            .collect()
    })
}
