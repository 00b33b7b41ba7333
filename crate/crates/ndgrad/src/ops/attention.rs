//! Multi-head scaled dot-product attention with optional key masking.

use crate::array::Array;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Var;

/// Projection weights for one attention layer. Weights are [D,D], biases [D].
#[derive(Clone)]
pub struct AttentionParams<T: Scalar> {
    pub wq: Var<T>,
    pub bq: Var<T>,
    pub wk: Var<T>,
    pub bk: Var<T>,
    pub wv: Var<T>,
    pub bv: Var<T>,
    pub wo: Var<T>,
    pub bo: Var<T>,
}

impl<T: Scalar> AttentionParams<T> {
    /// Identity projections with zero bias, handy for oracles.
    pub fn identity(d: usize) -> Self {
        let eye = Array::from_fn(&[d, d], |i| if i / d == i % d { T::ONE } else { T::ZERO });
        let zero = Array::zeros(&[d]);
        AttentionParams {
            wq: Var::constant(eye.clone()),
            bq: Var::constant(zero.clone()),
            wk: Var::constant(eye.clone()),
            bk: Var::constant(zero.clone()),
            wv: Var::constant(eye.clone()),
            bv: Var::constant(zero.clone()),
            wo: Var::constant(eye),
            bo: Var::constant(zero),
        }
    }
}

fn project<T: Scalar>(x: &Var<T>, w: &Var<T>, b: &Var<T>, n: usize, l: usize, d: usize, heads: usize) -> Result<Var<T>> {
    let dh = d / heads;
    x.reshape(&[n * l, d])?
        .matmul(w)?
        .add_bias(b)?
        .reshape(&[n, l, heads, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[n * heads, l, dh])
}

/// Per-head softmax(QK^T / sqrt(d_h)) V with heads concatenated and
/// projected. `mask` is 0/1 over keys per query, shape [N, Lq, Lk]; masked
/// keys get exactly zero weight and fully-masked query rows come out zero
/// (before the output projection's bias).
pub fn scaled_dot_attention<T: Scalar>(
    q: &Var<T>,
    k: &Var<T>,
    v: &Var<T>,
    params: &AttentionParams<T>,
    heads: usize,
    mask: Option<&Array<T>>,
) -> Result<Var<T>> {
    let (n, lq, d) = match q.shape() {
        [a, b, c] => (*a, *b, *c),
        s => {
            return Err(Error::BadShape {
                op: "attention",
                shape: s.to_vec(),
                msg: "query must be rank 3 [batch, len, dim]".into(),
            })
        }
    };
    let (nk, lk, dk) = match k.shape() {
        [a, b, c] => (*a, *b, *c),
        s => {
            return Err(Error::BadShape {
                op: "attention",
                shape: s.to_vec(),
                msg: "key must be rank 3".into(),
            })
        }
    };
    if v.shape() != [nk, lk, dk] {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: k.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    if nk != n || dk != d {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "attention: model dim {d} not divisible by heads {heads}"
        )));
    }
    if let Some(m) = mask {
        if m.shape() != [n, lq, lk] {
            return Err(Error::ShapeMismatch {
                op: "attention_mask",
                lhs: vec![n, lq, lk],
                rhs: m.shape().to_vec(),
            });
        }
    }
    let dh = d / heads;

    let qh = project(q, &params.wq, &params.bq, n, lq, d, heads)?;
    let kh = project(k, &params.wk, &params.bk, n, lk, d, heads)?;
    let vh = project(v, &params.wv, &params.bv, n, lk, d, heads)?;

    let scores = qh.bmm_nt(&kh)?.scale(1.0 / (dh as f64).sqrt())?;
    let weights = match mask {
        Some(m) => scores.masked_softmax_heads(m, heads)?,
        None => scores.softmax(2)?,
    };
    weights
        .bmm(&vh)?
        .reshape(&[n, heads, lq, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[n * lq, d])?
        .matmul(&params.wo)?
        .add_bias(&params.bo)?
        .reshape(&[n, lq, d])
}
