//! Inverted dropout: scaled at train time, identity in eval mode.

use crate::array::Array;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tape::Var;

pub fn dropout<T: Scalar>(x: &Var<T>, rate: f64, rng: &mut RngStream, train: bool) -> Result<Var<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
    }
    if !train || rate == 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - rate;
    let inv = T::from_f64(1.0 / keep);
    let mask = Array::from_fn(x.shape(), |_| {
        if rng.uniform() >= rate {
            inv
        } else {
            T::ZERO
        }
    });
    x.mul(&Var::constant(mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_mode_is_identity() {
        let x = Var::constant(Array::from_vec(vec![4], vec![1., 2., 3., 4.]).unwrap());
        let mut rng = RngStream::new(0, 0);
        let y = dropout(&x, 0.5, &mut rng, false).unwrap();
        assert_eq!(y.value().data(), x.value().data());
    }

    #[test]
    fn train_mode_zeroes_and_rescales() {
        let n = 10_000;
        let x = Var::constant(Array::<f64>::full(&[n], 1.0));
        let mut rng = RngStream::new(7, 0);
        let y = dropout(&x, 0.1, &mut rng, true).unwrap();
        let zeros = y.value().data().iter().filter(|&&v| v == 0.0).count();
        let frac = zeros as f64 / n as f64;
        assert!((frac - 0.1).abs() < 0.02, "dropped fraction {frac}");
        for &v in y.value().data() {
            assert!(v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-12);
        }
    }

    #[test]
    fn same_stream_same_mask() {
        let x = Var::constant(Array::<f64>::full(&[64], 1.0));
        let a = dropout(&x, 0.3, &mut RngStream::new(5, 9), true).unwrap();
        let b = dropout(&x, 0.3, &mut RngStream::new(5, 9), true).unwrap();
        assert_eq!(a.value().data(), b.value().data());
    }
}
