//! Row-major f64 tensor. Shapes are batch-first: `(N, ...)`.

use super::NnError;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor, NnError> {
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(NnError::ShapeMismatch {
                op: "from_vec",
                detail: format!("shape {shape:?} wants {want} elements, got {}", data.len()),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Rank-1 convenience constructor.
    pub fn vector(data: Vec<f64>) -> Tensor {
        Tensor { shape: vec![data.len()], data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Leading dimension (batch size); 1 for rank-0/rank-1 tensors used as
    /// single samples.
    pub fn batch(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[0]
        }
    }

    /// Elements per sample: `len / batch`.
    pub fn per_sample(&self) -> usize {
        let b = self.batch();
        if b == 0 {
            0
        } else {
            self.data.len() / b
        }
    }

    /// Same data, new shape (element count must match).
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor, NnError> {
        let want: usize = shape.iter().product();
        if want != self.data.len() {
            return Err(NnError::ShapeMismatch {
                op: "reshape",
                detail: format!(
                    "cannot view {} elements as {shape:?} ({want} elements)",
                    self.data.len()
                ),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Flat index for a 4-D (n, h, w, c) coordinate.
    #[inline]
    pub fn idx4(&self, n: usize, h: usize, w: usize, c: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 4);
        ((n * self.shape[1] + h) * self.shape[2] + w) * self.shape[3] + c
    }

    #[inline]
    pub fn at4(&self, n: usize, h: usize, w: usize, c: usize) -> f64 {
        self.data[self.idx4(n, h, w, c)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::from_vec(&[2, 6], (0..12).map(|i| i as f64).collect()).unwrap();
        let r = t.reshaped(&[2, 2, 3, 1]).unwrap();
        assert_eq!(r.shape(), &[2, 2, 3, 1]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(&[5, 5]).is_err());
    }

    #[test]
    fn four_d_indexing_is_row_major() {
        let t = Tensor::from_vec(&[2, 2, 2, 2], (0..16).map(|i| i as f64).collect()).unwrap();
        assert_eq!(t.at4(0, 0, 0, 0), 0.0);
        assert_eq!(t.at4(0, 0, 0, 1), 1.0);
        assert_eq!(t.at4(0, 0, 1, 0), 2.0);
        assert_eq!(t.at4(0, 1, 0, 0), 4.0);
        assert_eq!(t.at4(1, 0, 0, 0), 8.0);
        assert_eq!(t.at4(1, 1, 1, 1), 15.0);
    }

    #[test]
    fn batch_and_per_sample() {
        let t = Tensor::zeros(&[4, 3, 2, 1]);
        assert_eq!(t.batch(), 4);
        assert_eq!(t.per_sample(), 6);
        let v = Tensor::vector(vec![1.0, 2.0]);
        assert_eq!(v.batch(), 1);
        assert_eq!(v.per_sample(), 2);
    }
}
