use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Parameters;
use crate::error::{Error, Result};

/// Trainable lookup table mapping key ids to dense vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    #[serde(with = "crate::persist::mat")]
    pub w: Array2<f64>,
}

impl Embedding {
    pub fn zeros(vocab: usize, dim: usize) -> Self {
        Embedding { w: Array2::zeros((vocab, dim)) }
    }

    pub fn random<R: Rng>(vocab: usize, dim: usize, rng: &mut R) -> Self {
        Embedding { w: Array2::from_shape_simple_fn((vocab, dim), || rng.gen_range(-0.05..=0.05)) }
    }

    pub fn vocab(&self) -> usize {
        self.w.nrows()
    }

    pub fn dim(&self) -> usize {
        self.w.ncols()
    }

    /// Row gather: one output row per id.
    pub fn forward(&self, ids: &[usize]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((ids.len(), self.dim()));
        for (r, &id) in ids.iter().enumerate() {
            if id >= self.vocab() {
                return Err(Error::IdOutOfRange { id, dim: self.vocab() });
            }
            out.row_mut(r).assign(&self.w.row(id));
        }
        Ok(out)
    }

    /// Step-major gather for a padded batch: `ids[b][t]`, missing steps filled with `pad`.
    pub(crate) fn forward_batch(&self, ids: &[&[usize]], steps: usize, pad: usize) -> Vec<Array2<f64>> {
        (0..steps)
            .map(|t| {
                let col: Vec<usize> = ids.iter().map(|s| s.get(t).copied().unwrap_or(pad)).collect();
                self.forward(&col).expect("ids validated by caller")
            })
            .collect()
    }

    /// Scatter-add of step gradients into `grad`.
    pub(crate) fn backward_batch(&self, ids: &[&[usize]], pad: usize, dxs: &[Array2<f64>], grad: &mut Embedding) {
        for (t, dx) in dxs.iter().enumerate() {
            for (b, s) in ids.iter().enumerate() {
                let id = s.get(t).copied().unwrap_or(pad);
                let mut row = grad.w.row_mut(id);
                row += &dx.row(b);
            }
        }
    }
}

impl Parameters for Embedding {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.w.as_slice().expect("standard layout")]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.w.as_slice_mut().expect("standard layout")]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn gathers_rows() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let e = Embedding::random(5, 3, &mut rng);
        let x = e.forward(&[2]).unwrap();
        assert_eq!(x.row(0), e.w.row(2));
        let x = e.forward(&[4, 4]).unwrap();
        assert_eq!(x.row(0), x.row(1));
        assert!(e.forward(&[5]).is_err());
        assert!(e.w.iter().all(|v| v.abs() <= 0.05));
    }

    #[test]
    fn scatter_accumulates_repeated_ids() {
        let e = Embedding::zeros(4, 2);
        let mut g = Embedding::zeros(4, 2);
        let a: &[usize] = &[1, 1];
        let dxs = vec![ndarray::array![[1.0, 2.0]], ndarray::array![[3.0, 4.0]]];
        e.backward_batch(&[a], 0, &dxs, &mut g);
        assert_eq!(g.w.row(1).to_vec(), vec![4.0, 6.0]);
        assert_eq!(g.w.row(0).to_vec(), vec![0.0, 0.0]);
    }
}
