//! 2D and batched matrix products with registered gradients.

use crate::array::Array;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{record, Var};

/// out[m,n] += a[m,k] * b[k,n]
fn mm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::ZERO {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + aip * brow[j];
            }
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T
fn mm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for p in 0..k {
                acc = acc + arow[p] * brow[p];
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

/// out[m,n] += a[k,m]^T * b[k,n]
fn mm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let aip = arow[i];
            if aip == T::ZERO {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + aip * brow[j];
            }
        }
    }
}

fn dims2<T: Scalar>(op: &'static str, v: &Var<T>) -> Result<(usize, usize)> {
    match v.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::BadShape {
            op,
            shape: other.to_vec(),
            msg: "expected rank 2".into(),
        }),
    }
}

fn dims3<T: Scalar>(op: &'static str, v: &Var<T>) -> Result<(usize, usize, usize)> {
    match v.shape() {
        [b, r, c] => Ok((*b, *r, *c)),
        other => Err(Error::BadShape {
            op,
            shape: other.to_vec(),
            msg: "expected rank 3".into(),
        }),
    }
}

impl<T: Scalar> Var<T> {
    /// Standard matrix product [m,k] x [k,n] -> [m,n].
    pub fn matmul(&self, rhs: &Var<T>) -> Result<Var<T>> {
        let (m, k) = dims2("matmul", self)?;
        let (k2, n) = dims2("matmul", rhs)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let mut out = vec![T::ZERO; m * n];
        mm_nn(self.value().data(), rhs.value().data(), &mut out, m, k, n);
        let out = Array::from_vec(vec![m, n], out)?;
        let av = self.value().clone();
        let bv = rhs.value().clone();
        record(&[self, rhs], out, move |g| {
            // dA = G * B^T, dB = A^T * G
            let mut da = vec![T::ZERO; m * k];
            mm_nt(g.data(), bv.data(), &mut da, m, n, k);
            let mut db = vec![T::ZERO; k * n];
            mm_tn(av.data(), g.data(), &mut db, k, m, n);
            vec![
                Array::from_vec(vec![m, k], da).expect("da"),
                Array::from_vec(vec![k, n], db).expect("db"),
            ]
        })
    }

    /// Batched matmul [B,m,k] x [B,k,n] -> [B,m,n].
    pub fn bmm(&self, rhs: &Var<T>) -> Result<Var<T>> {
        let (b, m, k) = dims3("bmm", self)?;
        let (b2, k2, n) = dims3("bmm", rhs)?;
        if b != b2 || k != k2 {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let mut out = vec![T::ZERO; b * m * n];
        for i in 0..b {
            mm_nn(
                &self.value().data()[i * m * k..],
                &rhs.value().data()[i * k * n..],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let out = Array::from_vec(vec![b, m, n], out)?;
        let av = self.value().clone();
        let bv = rhs.value().clone();
        record(&[self, rhs], out, move |g| {
            let mut da = vec![T::ZERO; b * m * k];
            let mut db = vec![T::ZERO; b * k * n];
            for i in 0..b {
                mm_nt(
                    &g.data()[i * m * n..],
                    &bv.data()[i * k * n..],
                    &mut da[i * m * k..(i + 1) * m * k],
                    m,
                    n,
                    k,
                );
                mm_tn(
                    &av.data()[i * m * k..],
                    &g.data()[i * m * n..],
                    &mut db[i * k * n..(i + 1) * k * n],
                    k,
                    m,
                    n,
                );
            }
            vec![
                Array::from_vec(vec![b, m, k], da).expect("da"),
                Array::from_vec(vec![b, k, n], db).expect("db"),
            ]
        })
    }

    /// Batched matmul against transposed rhs: [B,m,k] x [B,n,k] -> [B,m,n].
    pub fn bmm_nt(&self, rhs: &Var<T>) -> Result<Var<T>> {
        let (b, m, k) = dims3("bmm_nt", self)?;
        let (b2, n, k2) = dims3("bmm_nt", rhs)?;
        if b != b2 || k != k2 {
            return Err(Error::ShapeMismatch {
                op: "bmm_nt",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let mut out = vec![T::ZERO; b * m * n];
        for i in 0..b {
            mm_nt(
                &self.value().data()[i * m * k..],
                &rhs.value().data()[i * n * k..],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let out = Array::from_vec(vec![b, m, n], out)?;
        let av = self.value().clone();
        let bv = rhs.value().clone();
        record(&[self, rhs], out, move |g| {
            // C = A * B^T: dA = G * B, dB = G^T * A
            let mut da = vec![T::ZERO; b * m * k];
            let mut db = vec![T::ZERO; b * n * k];
            for i in 0..b {
                mm_nn(
                    &g.data()[i * m * n..],
                    &bv.data()[i * n * k..],
                    &mut da[i * m * k..(i + 1) * m * k],
                    m,
                    n,
                    k,
                );
                mm_tn(
                    &g.data()[i * m * n..],
                    &av.data()[i * m * k..],
                    &mut db[i * n * k..(i + 1) * n * k],
                    n,
                    m,
                    k,
                );
            }
            vec![
                Array::from_vec(vec![b, m, k], da).expect("da"),
                Array::from_vec(vec![b, n, k], db).expect("db"),
            ]
        })
    }
}
