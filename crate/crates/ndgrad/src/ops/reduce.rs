//! Reductions over all elements or a single axis.

use crate::array::{strides_of, Array};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{record, Var};

impl<T: Scalar> Var<T> {
    pub fn sum_all(&self) -> Result<Var<T>> {
        let total: T = self.value().data().iter().copied().sum();
        let shape = self.shape().to_vec();
        record(&[self], Array::scalar(total), move |g| {
            vec![Array::full(&shape, g.first())]
        })
    }

    pub fn mean_all(&self) -> Result<Var<T>> {
        if self.value().is_empty() {
            return Err(Error::Contract("mean_all of empty array".into()));
        }
        let n = T::from_f64(self.value().len() as f64);
        let total: T = self.value().data().iter().copied().sum();
        let shape = self.shape().to_vec();
        record(&[self], Array::scalar(total / n), move |g| {
            vec![Array::full(&shape, g.first() / n)]
        })
    }

    /// Sum over one axis. `keepdim` keeps it with size 1.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::BadShape {
                op: "sum_axis",
                shape,
                msg: format!("axis {axis} out of range"),
            });
        }
        let strides = strides_of(&shape);
        let inner = strides[axis];
        let outer: usize = shape[..axis].iter().product();
        let d = shape[axis];
        let mut out = vec![T::ZERO; outer * inner];
        for o in 0..outer {
            for a in 0..d {
                let base = (o * d + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + self.value().data()[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let out = Array::from_vec(out_shape, out)?;
        record(&[self], out, move |g| {
            let mut gx = vec![T::ZERO; outer * d * inner];
            for o in 0..outer {
                for a in 0..d {
                    let base = (o * d + a) * inner;
                    for i in 0..inner {
                        gx[base + i] = g.data()[o * inner + i];
                    }
                }
            }
            vec![Array::from_vec(shape.clone(), gx).expect("sum_axis grad")]
        })
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Var<T>> {
        let d = *self.shape().get(axis).ok_or_else(|| Error::BadShape {
            op: "mean_axis",
            shape: self.shape().to_vec(),
            msg: format!("axis {axis} out of range"),
        })?;
        if d == 0 {
            return Err(Error::BadShape {
                op: "mean_axis",
                shape: self.shape().to_vec(),
                msg: "empty axis".into(),
            });
        }
        self.sum_axis(axis, keepdim)?.scale(1.0 / d as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn sum_axis_middle() {
        let x = Array::<f64>::from_fn(&[2, 3, 2], |i| i as f64);
        let v = Var::constant(x);
        let s = v.sum_axis(1, false).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        // axis-1 sums: [0+2+4, 1+3+5] = [6, 9]; second block [18,21]
        assert_eq!(s.value().data(), &[6., 9., 24., 27.]);
    }

    #[test]
    fn grad_of_sum_squared() {
        let tape = Tape::new();
        let x = tape.leaf(Array::from_vec(vec![3], vec![1., 2., 3.]).unwrap());
        let loss = x.square().unwrap().sum_all().unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get_or_zeros(&x).data(), &[2., 4., 6.]);
    }

    #[test]
    fn mean_axis_keepdim_broadcasts_back() {
        let tape = Tape::new();
        let x = tape.leaf(Array::from_vec(vec![2, 2], vec![1., 3., 5., 7.]).unwrap());
        let m = x.mean_axis(1, true).unwrap();
        assert_eq!(m.shape(), &[2, 1]);
        assert_eq!(m.value().data(), &[2., 6.]);
        let centered = x.sub(&m.expand(1, 2).unwrap()).unwrap();
        assert_eq!(centered.value().data(), &[-1., 1., -1., 1.]);
        let loss = centered.square().unwrap().sum_all().unwrap();
        let g = tape.backward(&loss).unwrap();
        // d/dx of sum (x - mean)^2 = 2(x-mean) - mean-pullback; per row sums to 0
        let gx = g.get_or_zeros(&x);
        assert!((gx.data()[0] + gx.data()[1]).abs() < 1e-12);
    }
}
