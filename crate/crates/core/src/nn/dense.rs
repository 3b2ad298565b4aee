use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{glorot, Parameters};
use crate::error::{Error, Result};

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Fully connected layer followed by a row-wise softmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    #[serde(with = "crate::persist::mat")]
    pub w: Array2<f64>,
    #[serde(with = "crate::persist::vec")]
    pub b: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct DenseCache {
    input: Array2<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense { w: Array2::zeros((in_dim, out_dim)), b: Array1::zeros(out_dim) }
    }

    pub fn random<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let mut f = glorot(rng, in_dim, out_dim);
        Dense { w: Array2::from_shape_simple_fn((in_dim, out_dim), &mut f), b: Array1::zeros(out_dim) }
    }

    pub fn in_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.ncols()
    }

    /// Row-wise class probabilities for `y` (`rows × in_dim`).
    pub fn forward(&self, y: &Array2<f64>) -> Result<(Array2<f64>, DenseCache)> {
        if y.ncols() != self.in_dim() || self.b.len() != self.out_dim() {
            return Err(Error::Shape(format!("dense: input {:?}, weights {:?}", y.dim(), self.w.dim())));
        }
        let logits = y.dot(&self.w) + &self.b;
        Ok((softmax_rows(&logits)?, DenseCache { input: y.to_owned() }))
    }

    /// `dlogits` is the gradient on the pre-softmax logits.
    pub fn backward(&self, cache: &DenseCache, dlogits: &Array2<f64>, grad: &mut Dense) -> Array2<f64> {
        general_mat_mul(1.0, &cache.input.t(), dlogits, 1.0, &mut grad.w);
        grad.b += &dlogits.sum_axis(Axis(0));
        dlogits.dot(&self.w.t())
    }
}

impl Parameters for Dense {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.w.as_slice().expect("standard layout"), self.b.as_slice().expect("standard layout")]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.w.as_slice_mut().expect("standard layout"), self.b.as_slice_mut().expect("standard layout")]
    }
}

/// Max-subtracted softmax over each row.
pub fn softmax_rows(logits: &Array2<f64>) -> Result<Array2<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    Ok(p)
}

/// `−Σ_rows log p[row, true]`, with `truth` one-hot.
pub fn cross_entropy_loss(truth: &Array2<f64>, probs: &Array2<f64>) -> Result<f64> {
    if truth.dim() != probs.dim() {
        return Err(Error::Shape(format!("truth {:?} vs probs {:?}", truth.dim(), probs.dim())));
    }
    let mut loss = 0.0;
    for (t, p) in truth.rows().into_iter().zip(probs.rows()) {
        for (&tv, &pv) in t.iter().zip(p.iter()) {
            if tv != 0.0 {
                loss -= tv * pv.max(PROB_FLOOR).ln();
            }
        }
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn zero_classifier_is_uniform() {
        let d = Dense::zeros(3, 5);
        let (p, _) = d.forward(&array![[1.0, 2.0, 3.0], [-1.0, 0.0, 4.0]]).unwrap();
        assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn two_logit_softmax() {
        let p = softmax_rows(&array![[1.0, 0.0]]).unwrap();
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(p[[0, 0]], e / (1.0 + e), epsilon = 1e-15);
        assert_abs_diff_eq!(p[[0, 0]], 0.731_058_578_6, epsilon = 1e-10);
        assert_abs_diff_eq!(p[[0, 1]], 0.268_941_421_4, epsilon = 1e-10);
    }

    #[test]
    fn non_finite_logits_rejected() {
        assert!(softmax_rows(&array![[f64::NAN, 0.0]]).is_err());
        assert!(softmax_rows(&array![[f64::INFINITY, 0.0]]).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let truth = array![[0.0, 1.0], [1.0, 0.0]];
        assert_eq!(cross_entropy_loss(&truth, &truth).unwrap(), 0.0);
        let l = cross_entropy_loss(&array![[1.0, 0.0]], &array![[0.5, 0.5]]).unwrap();
        assert_abs_diff_eq!(l, 0.693_147_180_559_945_3, epsilon = 1e-15);
        let truth = array![[1.0, 0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0, 0.0]];
        let uniform = Array2::from_elem((2, 5), 0.2);
        assert_abs_diff_eq!(cross_entropy_loss(&truth, &uniform).unwrap(), 2.0 * 5f64.ln(), epsilon = 1e-14);
        assert!(cross_entropy_loss(&truth, &array![[1.0]]).is_err());
        // clamped, not infinite
        let l = cross_entropy_loss(&array![[1.0, 0.0]], &array![[0.0, 1.0]]).unwrap();
        assert_abs_diff_eq!(l, -(PROB_FLOOR.ln()), epsilon = 1e-9);
    }

    proptest! {
        #[test]
        fn softmax_rows_normalized_and_shift_invariant(
            row in proptest::collection::vec(-30.0f64..30.0, 2..12),
            shift in -100.0f64..100.0,
        ) {
            let m = Array2::from_shape_vec((1, row.len()), row.clone()).unwrap();
            let p = softmax_rows(&m).unwrap();
            prop_assert!((p.sum() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&v| v > 0.0 && v <= 1.0));
            let q = softmax_rows(&(m + shift)).unwrap();
            for (a, b) in p.iter().zip(q.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
