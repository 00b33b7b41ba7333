//! Pointwise ops and limited numpy-style broadcasting (equal rank, axes
//! either matching or 1 on the broadcast operand).

use crate::array::{strides_of, Array};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{record, Var};

fn check_same_shape<T: Scalar>(op: &'static str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn zip<T: Scalar>(a: &Array<T>, b: &Array<T>, f: impl Fn(T, T) -> T) -> Array<T> {
    let data: Vec<T> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Array::from_vec(a.shape().to_vec(), data).expect("zip shape")
}

/// Walk all flat indices of `xshape` in row-major order together with the
/// matching flat index into `yshape` (whose size-1 axes broadcast). Index
/// arithmetic is incremental, no per-element division.
fn for_each_broadcast(xshape: &[usize], yshape: &[usize], mut f: impl FnMut(usize, usize)) {
    let total: usize = xshape.iter().product();
    if total == 0 {
        return;
    }
    let rank = xshape.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let ys = strides_of(yshape);
    let eff: Vec<usize> = (0..rank).map(|a| if yshape[a] == 1 { 0 } else { ys[a] }).collect();
    let mut counters = vec![0usize; rank];
    let mut yidx = 0usize;
    for xi in 0..total {
        f(xi, yidx);
        for a in (0..rank).rev() {
            counters[a] += 1;
            yidx += eff[a];
            if counters[a] < xshape[a] {
                break;
            }
            counters[a] = 0;
            yidx -= eff[a] * xshape[a];
        }
    }
}

fn check_broadcast<T: Scalar>(op: &'static str, x: &Var<T>, y: &Var<T>) -> Result<()> {
    let ok = x.shape().len() == y.shape().len()
        && x.shape()
            .iter()
            .zip(y.shape())
            .all(|(&xd, &yd)| yd == xd || yd == 1);
    if !ok {
        return Err(Error::ShapeMismatch {
            op,
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    Ok(())
}

/// Sum `g` (shaped like x) down to `yshape` over the broadcast axes.
fn reduce_to<T: Scalar>(g: &[T], xshape: &[usize], yshape: &[usize], scale_by: Option<&[T]>) -> Array<T> {
    let n: usize = yshape.iter().product();
    let mut out = vec![T::ZERO; n];
    match scale_by {
        None => for_each_broadcast(xshape, yshape, |xi, yi| {
            out[yi] = out[yi] + g[xi];
        }),
        Some(s) => for_each_broadcast(xshape, yshape, |xi, yi| {
            out[yi] = out[yi] + g[xi] * s[xi];
        }),
    }
    Array::from_vec(yshape.to_vec(), out).expect("reduce_to shape")
}

impl<T: Scalar> Var<T> {
    pub fn add(&self, rhs: &Var<T>) -> Result<Var<T>> {
        check_same_shape("add", self, rhs)?;
        let out = zip(self.value(), rhs.value(), |a, b| a + b);
        record(&[self, rhs], out, |g| vec![g.clone(), g.clone()])
    }

    pub fn sub(&self, rhs: &Var<T>) -> Result<Var<T>> {
        check_same_shape("sub", self, rhs)?;
        let out = zip(self.value(), rhs.value(), |a, b| a - b);
        record(&[self, rhs], out, |g| vec![g.clone(), g.map(|v| -v)])
    }

    pub fn mul(&self, rhs: &Var<T>) -> Result<Var<T>> {
        check_same_shape("mul", self, rhs)?;
        let out = zip(self.value(), rhs.value(), |a, b| a * b);
        let av = self.value().clone();
        let bv = rhs.value().clone();
        record(&[self, rhs], out, move |g| {
            vec![zip(g, &bv, |x, y| x * y), zip(g, &av, |x, y| x * y)]
        })
    }

    pub fn div(&self, rhs: &Var<T>) -> Result<Var<T>> {
        check_same_shape("div", self, rhs)?;
        let out = zip(self.value(), rhs.value(), |a, b| a / b);
        let av = self.value().clone();
        let bv = rhs.value().clone();
        record(&[self, rhs], out, move |g| {
            let ga = zip(g, &bv, |x, b| x / b);
            let gb_data: Vec<T> = g
                .data()
                .iter()
                .zip(av.data().iter().zip(bv.data()))
                .map(|(&gi, (&a, &b))| -gi * a / (b * b))
                .collect();
            let gb = Array::from_vec(g.shape().to_vec(), gb_data).expect("div gb");
            vec![ga, gb]
        })
    }

    /// self + rhs with rhs broadcast (equal rank, rhs axes match or are 1).
    pub fn add_b(&self, rhs: &Var<T>) -> Result<Var<T>> {
        check_broadcast("add_b", self, rhs)?;
        let rv = rhs.value().clone();
        let xv = self.value().data();
        let mut data = vec![T::ZERO; xv.len()];
        for_each_broadcast(self.shape(), rhs.shape(), |xi, yi| {
            data[xi] = xv[xi] + rv.data()[yi];
        });
        let out = Array::from_vec(self.shape().to_vec(), data)?;
        let xshape = self.shape().to_vec();
        let yshape = rhs.shape().to_vec();
        record(&[self, rhs], out, move |g| {
            vec![g.clone(), reduce_to(g.data(), &xshape, &yshape, None)]
        })
    }

    /// self * rhs with rhs broadcast.
    pub fn mul_b(&self, rhs: &Var<T>) -> Result<Var<T>> {
        check_broadcast("mul_b", self, rhs)?;
        let xv = self.value().clone();
        let rv = rhs.value().clone();
        let mut data = vec![T::ZERO; xv.len()];
        for_each_broadcast(self.shape(), rhs.shape(), |xi, yi| {
            data[xi] = xv.data()[xi] * rv.data()[yi];
        });
        let out = Array::from_vec(self.shape().to_vec(), data)?;
        let xshape = self.shape().to_vec();
        let yshape = rhs.shape().to_vec();
        record(&[self, rhs], out, move |g| {
            let mut gx = vec![T::ZERO; g.len()];
            for_each_broadcast(&xshape, &yshape, |xi, yi| {
                gx[xi] = g.data()[xi] * rv.data()[yi];
            });
            let gx = Array::from_vec(xshape.clone(), gx).expect("mul_b gx");
            let gy = reduce_to(g.data(), &xshape, &yshape, Some(xv.data()));
            vec![gx, gy]
        })
    }

    /// Bias add: rhs is rank-1 of the last-axis width, broadcast over rows.
    pub fn add_bias(&self, bias: &Var<T>) -> Result<Var<T>> {
        let d = self.value().last_dim();
        if bias.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let bv = bias.value().clone();
        let mut data = Vec::with_capacity(self.value().len());
        for row in self.value().data().chunks_exact(d) {
            data.extend(row.iter().zip(bv.data()).map(|(&x, &b)| x + b));
        }
        let out = Array::from_vec(self.shape().to_vec(), data)?;
        record(&[self, bias], out, move |g| {
            let mut gb = vec![T::ZERO; d];
            for row in g.data().chunks_exact(d) {
                for (acc, &gi) in gb.iter_mut().zip(row) {
                    *acc = *acc + gi;
                }
            }
            vec![g.clone(), Array::from_vec(vec![d], gb).expect("bias grad")]
        })
    }

    pub fn scale(&self, c: f64) -> Result<Var<T>> {
        let k = T::from_f64(c);
        let out = self.value().map(|v| v * k);
        record(&[self], out, move |g| vec![g.map(|v| v * k)])
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<T>> {
        let k = T::from_f64(c);
        let out = self.value().map(|v| v + k);
        record(&[self], out, |g| vec![g.clone()])
    }

    pub fn neg(&self) -> Result<Var<T>> {
        let out = self.value().map(|v| -v);
        record(&[self], out, |g| vec![g.map(|v| -v)])
    }

    pub fn exp(&self) -> Result<Var<T>> {
        let out = self.value().map(|v| v.exp());
        let ov = out.clone();
        record(&[self], out, move |g| vec![zip(g, &ov, |x, y| x * y)])
    }

    pub fn ln(&self) -> Result<Var<T>> {
        let xv = self.value().clone();
        let out = self.value().map(|v| v.ln());
        record(&[self], out, move |g| vec![zip(g, &xv, |x, v| x / v)])
    }

    pub fn sqrt(&self) -> Result<Var<T>> {
        let out = self.value().map(|v| v.sqrt());
        let ov = out.clone();
        let half = T::from_f64(0.5);
        record(&[self], out, move |g| {
            vec![zip(g, &ov, |x, y| x * half / y)]
        })
    }

    pub fn square(&self) -> Result<Var<T>> {
        let xv = self.value().clone();
        let out = self.value().map(|v| v * v);
        let two = T::from_f64(2.0);
        record(&[self], out, move |g| vec![zip(g, &xv, |x, v| x * two * v)])
    }

    pub fn abs(&self) -> Result<Var<T>> {
        let xv = self.value().clone();
        let out = self.value().map(|v| v.abs());
        record(&[self], out, move |g| {
            vec![zip(g, &xv, |x, v| {
                if v > T::ZERO {
                    x
                } else if v < T::ZERO {
                    -x
                } else {
                    T::ZERO
                }
            })]
        })
    }

    pub fn recip(&self) -> Result<Var<T>> {
        let xv = self.value().clone();
        let out = self.value().map(|v| T::ONE / v);
        record(&[self], out, move |g| {
            vec![zip(g, &xv, |x, v| -x / (v * v))]
        })
    }

    pub fn tanh(&self) -> Result<Var<T>> {
        let out = self.value().map(|v| v.tanh());
        let ov = out.clone();
        record(&[self], out, move |g| {
            vec![zip(g, &ov, |x, y| x * (T::ONE - y * y))]
        })
    }

    pub fn sigmoid(&self) -> Result<Var<T>> {
        let out = self.value().map(sigmoid_scalar);
        let ov = out.clone();
        record(&[self], out, move |g| {
            vec![zip(g, &ov, |x, y| x * y * (T::ONE - y))]
        })
    }

    pub fn softplus(&self) -> Result<Var<T>> {
        let xv = self.value().clone();
        let out = self.value().map(softplus_scalar);
        record(&[self], out, move |g| {
            vec![zip(g, &xv, |x, v| x * sigmoid_scalar(v))]
        })
    }

    pub fn relu(&self) -> Result<Var<T>> {
        let xv = self.value().clone();
        let out = self.value().map(|v| v.maximum(T::ZERO));
        record(&[self], out, move |g| {
            vec![zip(g, &xv, |x, v| if v > T::ZERO { x } else { T::ZERO })]
        })
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Var<T>> {
        let s = T::from_f64(slope);
        let xv = self.value().clone();
        let out = self.value().map(|v| if v > T::ZERO { v } else { v * s });
        record(&[self], out, move |g| {
            vec![zip(g, &xv, |x, v| if v > T::ZERO { x } else { x * s })]
        })
    }
}

pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

pub fn softplus_scalar<T: Scalar>(x: T) -> T {
    // max(x, 0) + ln(1 + exp(-|x|)), stable for large |x|
    x.maximum(T::ZERO) + (T::ONE + (-x.abs()).exp()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn arr(v: &[f64]) -> Array<f64> {
        Array::from_vec(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn add_shape_mismatch_reports_both() {
        let a = Var::constant(arr(&[1.0, 2.0]));
        let b = Var::constant(arr(&[1.0, 2.0, 3.0]));
        match a.add(&b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2]);
                assert_eq!(rhs, vec![3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn mul_grads() {
        let tape = Tape::new();
        let a = tape.leaf(arr(&[2.0, 3.0]));
        let b = tape.leaf(arr(&[4.0, 5.0]));
        let loss = a.mul(&b).unwrap().sum_all().unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get_or_zeros(&a).data(), &[4.0, 5.0]);
        assert_eq!(g.get_or_zeros(&b).data(), &[2.0, 3.0]);
    }

    #[test]
    fn broadcast_add_reduces_grad() {
        let tape = Tape::new();
        let x = tape.leaf(Array::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let y = tape.leaf(Array::from_vec(vec![1, 3], vec![10., 20., 30.]).unwrap());
        let out = x.add_b(&y).unwrap();
        assert_eq!(out.value().data(), &[11., 22., 33., 14., 25., 36.]);
        let loss = out.sum_all().unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get_or_zeros(&y).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn broadcast_mul_grads() {
        let tape = Tape::new();
        let x = tape.leaf(Array::from_vec(vec![2, 2], vec![1., 2., 3., 4.]).unwrap());
        let m = tape.leaf(Array::from_vec(vec![2, 1], vec![5., 7.]).unwrap());
        let loss = x.mul_b(&m).unwrap().sum_all().unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get_or_zeros(&x).data(), &[5., 5., 7., 7.]);
        assert_eq!(g.get_or_zeros(&m).data(), &[3., 7.]);
    }

    #[test]
    fn abs_grad_sign() {
        let tape = Tape::new();
        let x = tape.leaf(arr(&[-2.0, 0.0, 3.0]));
        let loss = x.abs().unwrap().sum_all().unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get_or_zeros(&x).data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn stable_sigmoid_softplus_extremes() {
        assert!((sigmoid_scalar(800.0f64) - 1.0).abs() < 1e-15);
        assert!(sigmoid_scalar(-800.0f64) >= 0.0);
        assert!(softplus_scalar(-800.0f64) >= 0.0);
        assert!((softplus_scalar(800.0f64) - 800.0).abs() < 1e-9);
    }
}
