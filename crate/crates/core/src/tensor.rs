//! Dense rank-<=4 f64 tensors, the value carrier for everything else.

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

/// Shape of a tensor: up to four positive extents in (N, C, H, W) order.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    dims: [usize; MAX_RANK],
    rank: usize,
}

impl Shape {
    pub fn new(dims: &[usize]) -> Shape {
        assert!(
            !dims.is_empty() && dims.len() <= MAX_RANK,
            "rank must be 1..=4, got {}",
            dims.len()
        );
        assert!(dims.iter().all(|&d| d > 0), "extents must be positive");
        let mut buf = [1usize; MAX_RANK];
        buf[..dims.len()].copy_from_slice(dims);
        Shape {
            dims: buf,
            rank: dims.len(),
        }
    }

    pub fn scalar() -> Shape {
        Shape::new(&[1])
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.rank]
    }

    pub fn numel(&self) -> usize {
        self.dims().iter().product()
    }

    /// Extent lookup that treats the shape as NCHW with missing leading
    /// axes of extent 1, e.g. `nchw()` of a rank-3 (C,H,W) is (1,C,H,W).
    pub fn nchw(&self) -> (usize, usize, usize, usize) {
        let d = self.dims();
        match self.rank {
            1 => (1, 1, 1, d[0]),
            2 => (1, 1, d[0], d[1]),
            3 => (1, d[0], d[1], d[2]),
            _ => (d[0], d[1], d[2], d[3]),
        }
    }
}

impl std::fmt::Debug for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.dims())
    }
}

/// Dense row-major f64 tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let shape = Shape::new(shape);
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                shape.numel()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let shape = Shape::new(shape);
        Tensor {
            data: vec![0.0; shape.numel()],
            shape,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let shape = Shape::new(shape);
        Tensor {
            data: vec![value; shape.numel()],
            shape,
        }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Tensor {
        let shape = Shape::new(shape);
        Tensor {
            data: (0..shape.numel()).map(|i| f(i)).collect(),
            shape,
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        let shape = Shape::new(dims);
        if shape.numel() != self.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} to {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Stack rank-3 (C,H,W) tensors into a rank-4 (N,C,H,W) batch.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        if items.is_empty() {
            return Err(Error::rejected("cannot stack an empty list"));
        }
        let first = items[0].shape;
        if first.rank() != 3 {
            return Err(Error::shape("stack expects rank-3 (C,H,W) tensors"));
        }
        if items.iter().any(|t| t.shape != first) {
            return Err(Error::shape("stack expects identical shapes"));
        }
        let d = first.dims();
        let mut data = Vec::with_capacity(items.len() * first.numel());
        for t in items {
            data.extend_from_slice(t.data());
        }
        Tensor::new(&[items.len(), d[0], d[1], d[2]], data)
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.data.len() <= 8 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(
                f,
                "Tensor{:?} [{} values, first {:?}]",
                self.shape,
                self.data.len(),
                &self.data[..4]
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_invariant_enforced() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn nchw_promotes_leading_axes() {
        assert_eq!(Shape::new(&[5]).nchw(), (1, 1, 1, 5));
        assert_eq!(Shape::new(&[3, 4]).nchw(), (1, 1, 3, 4));
        assert_eq!(Shape::new(&[2, 3, 4]).nchw(), (1, 2, 3, 4));
        assert_eq!(Shape::new(&[1, 2, 3, 4]).nchw(), (1, 2, 3, 4));
    }

    #[test]
    fn stack_batches_rank3() {
        let a = Tensor::full(&[2, 2, 2], 1.0);
        let b = Tensor::full(&[2, 2, 2], 2.0);
        let s = Tensor::stack(&[a, b]).unwrap();
        assert_eq!(s.dims(), &[2, 2, 2, 2]);
        assert_eq!(s.data()[0], 1.0);
        assert_eq!(s.data()[8], 2.0);
    }
}
