//! Dense f64 tensors and a minimal reverse-mode autodiff tape.
//!
//! Everything is f64 and row-major; shapes have at most 4 axes
//! (batch, channels, height, width). The tape in [`tape`] records primitive
//! applications eagerly and replays them in reverse for exact adjoints.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, max_rel_err, GradCheckReport};
pub use tape::{Gradients, NodeId, Tape};

/// Probabilities are clamped into [PROB_EPS, 1 - PROB_EPS] before any log.
pub const PROB_EPS: f64 = 1e-12;

/// A dense row-major f64 tensor with up to 4 axes. An empty shape is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        assert!(shape.len() <= 4, "at most 4 axes, got {shape:?}");
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert!(shape.len() <= 4, "at most 4 axes, got {shape:?}");
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Flat index of a 4-axis coordinate.
    #[inline]
    pub fn idx4(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 4);
        ((b * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }
}

/// Elementwise sum of two same-shape slices into the first.
pub(crate) fn add_in_place(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// Logistic function clamped into [PROB_EPS, 1 - PROB_EPS].
pub fn sigmoid_clamped(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// ln(max(x, PROB_EPS)).
pub fn log_clamped(x: f64) -> f64 {
    x.max(PROB_EPS).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_item() {
        let t = Tensor::from_vec(&[2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(t.numel(), 6);
        assert_eq!(Tensor::scalar(7.5).item(), 7.5);
    }

    #[test]
    #[should_panic]
    fn from_vec_rejects_bad_length() {
        Tensor::from_vec(&[2, 2], vec![1.0]);
    }

    #[test]
    fn softmax_row_uniform_and_stable() {
        let mut row = vec![0.0; 5];
        softmax_row(&mut row);
        assert!(row.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let mut big = vec![1000.0, 1000.0];
        softmax_row(&mut big);
        assert!((big[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_clamp_band() {
        assert_eq!(sigmoid_clamped(0.0), 0.5);
        assert_eq!(sigmoid_clamped(-2000.0), PROB_EPS);
        assert_eq!(sigmoid_clamped(2000.0), 1.0 - PROB_EPS);
    }
}
