//! Dense tensors and reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain value type: a shape plus a row-major `Vec` of
//! floats. It is `Send + Sync` and safe to move between threads. Gradients
//! come from recording operations on a [`Tape`] and walking it backwards;
//! a tape and the variables recorded on it stay on one thread.
//!
//! Layout is row-major everywhere. There is no implicit broadcasting beyond
//! scalar-times-tensor; the few broadcast-like operations that training
//! needs (bias addition) are explicit ops with their own backward rules.

mod check;
mod ops;
mod tape;

pub use check::{grad_check, GradCheckReport, FD_STEP};
pub use ops::{conv2d, flatten_cols, flatten_rows};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Element type. 64-bit by default; the `f32` build option narrows it, but
/// gradient-check tolerances in the test suite assume 64-bit.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

/// Dense n-dimensional array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!("zero extent in shape {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} implies {} elements, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel(shape)],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![1.0; numel(shape)],
        }
    }

    pub fn scalar(v: Real) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// 2-D tensor from rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<Real>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|x| x.len()).unwrap_or(0);
        if r == 0 || c == 0 || rows.iter().any(|x| x.len() != c) {
            return Err(Error::contract("from_rows needs equal-length nonempty rows"));
        }
        Ok(Tensor {
            shape: vec![r, c],
            data: rows.concat(),
        })
    }

    /// Uniform init in (-bound, bound).
    pub fn uniform(shape: &[usize], bound: Real, rng: &mut SplitMix64) -> Self {
        let data = (0..numel(shape)).map(|_| rng.range(-bound, bound)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Standard-normal entries scaled by `sigma`.
    pub fn normal(shape: &[usize], sigma: Real, rng: &mut SplitMix64) -> Self {
        let data = (0..numel(shape)).map(|_| sigma * rng.normal()).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extents of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape {
                op: "dims2",
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }

    pub fn item(&self) -> Result<Real> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::contract(format!(
                "item() on non-scalar tensor of shape {:?}",
                self.shape
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Value-level 2-D transpose.
    pub fn transposed(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    /// Value-level matrix product.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (p, q) = self.dims2().map_err(|_| Error::Shape {
            op: "matmul",
            lhs: self.shape.clone(),
            rhs: rhs.shape.clone(),
        })?;
        let (q2, s) = rhs.dims2().map_err(|_| Error::Shape {
            op: "matmul",
            lhs: self.shape.clone(),
            rhs: rhs.shape.clone(),
        })?;
        if q != q2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let data = ops::mm(&self.data, &rhs.data, p, q, s);
        Ok(Tensor {
            shape: vec![p, s],
            data,
        })
    }

    pub fn frobenius_norm(&self) -> Real {
        self.data.iter().map(|x| x * x).sum::<Real>().sqrt()
    }

    /// Frobenius norm of the elementwise difference.
    pub fn distance(&self, rhs: &Tensor) -> Result<Real> {
        if self.shape != rhs.shape {
            return Err(Error::Shape {
                op: "distance",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<Real>()
            .sqrt())
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn transpose_roundtrip() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let tt = t.transposed().unwrap().transposed().unwrap();
        assert_eq!(t, tt);
    }

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(i2.matmul(&m).unwrap(), m);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 5]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }
}
