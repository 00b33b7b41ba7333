use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Immutable dense row-major array. Cloning shares the underlying buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Array<T: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Array<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::BadShape {
                op: "from_vec",
                shape,
                msg: format!("shape product != data len {}", data.len()),
            });
        }
        Ok(Array {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn scalar(v: T) -> Self {
        Array {
            shape: vec![],
            data: Arc::new(vec![v]),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: Arc::new(vec![T::ZERO; n]),
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n: usize = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; n]),
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: Arc::new((0..n).map(&mut f).collect()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// True for shape [] or [1,1,...]: a single element.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn first(&self) -> T {
        self.data[0]
    }

    /// Size of the trailing axis (1 for rank-0 arrays).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::BadShape {
                op: "reshape",
                shape,
                msg: format!("incompatible with {} elements", self.data.len()),
            });
        }
        Ok(Array {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Array {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Array<U> {
        Array {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|x| U::from_f64(x.to_f64())).collect()),
        }
    }

    /// Row-major strides for this shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }
}

pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
