//! GRU cell composed from recorded primitives.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Var;

/// GRU cell weights. Input maps are [d_in, d_h], recurrent maps [d_h, d_h],
/// biases [d_h].
#[derive(Clone)]
pub struct GruParams<T: Scalar> {
    pub wz: Var<T>,
    pub uz: Var<T>,
    pub bz: Var<T>,
    pub wr: Var<T>,
    pub ur: Var<T>,
    pub br: Var<T>,
    pub wh: Var<T>,
    pub uh: Var<T>,
    pub bh: Var<T>,
}

/// One GRU step:
///   z = sigmoid(x Wz + h Uz + bz)
///   r = sigmoid(x Wr + h Ur + br)
///   hc = tanh(x Wh + (r .* h) Uh + bh)
///   h' = (1 - z) .* h + z .* hc
pub fn gru_step<T: Scalar>(x: &Var<T>, h: &Var<T>, p: &GruParams<T>) -> Result<Var<T>> {
    let b = match (x.shape(), h.shape()) {
        ([bx, _], [bh, _]) if bx == bh => *bx,
        _ => {
            return Err(Error::ShapeMismatch {
                op: "gru_step",
                lhs: x.shape().to_vec(),
                rhs: h.shape().to_vec(),
            })
        }
    };
    let _ = b;
    let z = x
        .matmul(&p.wz)?
        .add(&h.matmul(&p.uz)?)?
        .add_bias(&p.bz)?
        .sigmoid()?;
    let r = x
        .matmul(&p.wr)?
        .add(&h.matmul(&p.ur)?)?
        .add_bias(&p.br)?
        .sigmoid()?;
    let hc = x
        .matmul(&p.wh)?
        .add(&r.mul(h)?.matmul(&p.uh)?)?
        .add_bias(&p.bh)?
        .tanh()?;
    let one_minus_z = z.neg()?.add_scalar(1.0)?;
    one_minus_z.mul(h)?.add(&z.mul(&hc)?)
}
