//! Dense tensors for the differentiation tape: a shape plus flat `f64` storage.

use crate::linalg::Mat;

/// Row-major dense tensor. A scalar has an empty shape and one element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let expect: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            expect,
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self {
            shape: other.shape.clone(),
            data: vec![0.0; other.data.len()],
        }
    }

    pub fn from_mat(m: &Mat) -> Self {
        Self::matrix(m.rows(), m.cols(), m.data().to_vec())
    }

    /// Reinterpret as a matrix. A vector becomes a single column.
    pub fn to_mat(&self) -> Mat {
        match self.shape.len() {
            2 => Mat::from_vec(self.shape[0], self.shape[1], self.data.clone()),
            1 => Mat::from_vec(self.shape[0], 1, self.data.clone()),
            _ => panic!("cannot view shape {:?} as a matrix", self.shape),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn scalar_value(&self) -> f64 {
        assert!(self.is_scalar(), "expected scalar, got shape {:?}", self.shape);
        self.data[0]
    }

    /// Number of rows when viewed as a 2-D tensor (vectors are one column).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            1 => self.shape[0],
            _ => panic!("shape {:?} has no row count", self.shape),
        }
    }

    /// Number of columns when viewed as a 2-D tensor (vectors are one column).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => 1,
            _ => panic!("shape {:?} has no column count", self.shape),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_and_vector_shapes() {
        let s = Tensor::scalar(3.5);
        assert!(s.is_scalar());
        assert_eq!(s.scalar_value(), 3.5);
        let v = Tensor::vector(vec![1.0, 2.0]);
        assert_eq!(v.shape(), &[2]);
        assert_eq!(v.rows(), 2);
        assert_eq!(v.cols(), 1);
    }

    #[test]
    fn mat_round_trip() {
        let m = Mat::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let t = Tensor::from_mat(&m);
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.to_mat(), m);
    }

    #[test]
    #[should_panic(expected = "does not match shape")]
    fn shape_data_mismatch_panics() {
        Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]);
    }
}
