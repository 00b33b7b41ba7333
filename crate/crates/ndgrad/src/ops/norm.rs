//! Fused layer normalization over the last axis.

use crate::array::Array;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{record, Var};

impl<T: Scalar> Var<T> {
    /// Per-last-axis standardization followed by the affine `y*gain + bias`.
    pub fn layer_norm(&self, gain: &Var<T>, bias: &Var<T>, eps: f64) -> Result<Var<T>> {
        let d = self.value().last_dim();
        if d == 0 {
            return Err(Error::BadShape {
                op: "layer_norm",
                shape: self.shape().to_vec(),
                msg: "empty last axis".into(),
            });
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm: eps must be > 0, got {eps}")));
        }
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let rows = self.value().len() / d;
        let x = self.value().data();
        let gv = gain.value().clone();
        let eps_t = T::from_f64(eps);
        let inv_d = T::ONE / T::from_f64(d as f64);

        let mut normed = vec![T::ZERO; x.len()];
        let mut inv_std = vec![T::ZERO; rows];
        for r in 0..rows {
            let xs = &x[r * d..(r + 1) * d];
            let mut mean = T::ZERO;
            for &v in xs {
                mean = mean + v;
            }
            mean = mean * inv_d;
            let mut var = T::ZERO;
            for &v in xs {
                let c = v - mean;
                var = var + c * c;
            }
            var = var * inv_d;
            let inv = T::ONE / (var + eps_t).sqrt();
            inv_std[r] = inv;
            for i in 0..d {
                normed[r * d + i] = (xs[i] - mean) * inv;
            }
        }
        let mut out = vec![T::ZERO; x.len()];
        for r in 0..rows {
            for i in 0..d {
                out[r * d + i] = normed[r * d + i] * gv.data()[i] + bias.value().data()[i];
            }
        }
        let out = Array::from_vec(self.shape().to_vec(), out)?;
        let shape = self.shape().to_vec();
        let normed = Array::from_vec(shape.clone(), normed)?;
        record(&[self, gain, bias], out, move |g| {
            let mut gx = vec![T::ZERO; g.len()];
            let mut ggain = vec![T::ZERO; d];
            let mut gbias = vec![T::ZERO; d];
            for r in 0..rows {
                let gs = &g.data()[r * d..(r + 1) * d];
                let ys = &normed.data()[r * d..(r + 1) * d];
                let mut mean_dy = T::ZERO;
                let mut mean_dyy = T::ZERO;
                let mut dy = vec![T::ZERO; d];
                for i in 0..d {
                    ggain[i] = ggain[i] + gs[i] * ys[i];
                    gbias[i] = gbias[i] + gs[i];
                    dy[i] = gs[i] * gv.data()[i];
                    mean_dy = mean_dy + dy[i];
                    mean_dyy = mean_dyy + dy[i] * ys[i];
                }
                mean_dy = mean_dy * inv_d;
                mean_dyy = mean_dyy * inv_d;
                let inv = inv_std[r];
                for i in 0..d {
                    gx[r * d + i] = inv * (dy[i] - mean_dy - ys[i] * mean_dyy);
                }
            }
            vec![
                Array::from_vec(shape.clone(), gx).expect("ln gx"),
                Array::from_vec(vec![d], ggain).expect("ln ggain"),
                Array::from_vec(vec![d], gbias).expect("ln gbias"),
            ]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gain_bias(d: usize, g: f64, b: f64) -> (Var<f64>, Var<f64>) {
        (
            Var::constant(Array::full(&[d], g)),
            Var::constant(Array::full(&[d], b)),
        )
    }

    #[test]
    fn constant_vector_maps_to_zero() {
        let (g, b) = gain_bias(4, 1.0, 0.0);
        let x = Var::constant(Array::full(&[4], 3.3));
        let y = x.layer_norm(&g, &b, 1e-5).unwrap();
        for &v in y.value().data() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn two_point_closed_form() {
        // [1,-1]: mean 0, var 1 -> output approaches [1,-1] as eps -> 0
        let (g, b) = gain_bias(2, 1.0, 0.0);
        let x = Var::constant(Array::from_vec(vec![2], vec![1.0, -1.0]).unwrap());
        let y = x.layer_norm(&g, &b, 1e-12).unwrap();
        assert!((y.value().data()[0] - 1.0).abs() < 1e-9);
        assert!((y.value().data()[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_gain_yields_bias() {
        let (g, b) = gain_bias(3, 0.0, 0.7);
        let x = Var::constant(Array::from_vec(vec![2, 3], vec![1., 2., 3., -4., 0., 9.]).unwrap());
        let y = x.layer_norm(&g, &b, 1e-5).unwrap();
        for &v in y.value().data() {
            assert!((v - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_eps_and_shapes() {
        let (g, b) = gain_bias(3, 1.0, 0.0);
        let x = Var::<f64>::constant(Array::zeros(&[2, 3]));
        assert!(x.layer_norm(&g, &b, 0.0).is_err());
        let g2 = Var::<f64>::constant(Array::zeros(&[4]));
        assert!(x.layer_norm(&g2, &b, 1e-5).is_err());
    }
}
