//! Dense f64 neural-network kernel: embedding, stacked LSTM, softmax classifier,
//! cross-entropy, backpropagation through time and Adam.
//!
//! Sequences are processed in batches laid out step-major: a sequence of `T`
//! steps over a batch of `B` samples is a slice of `T` matrices of shape `B × dim`.
//! Shorter samples are right-padded and masked; a masked step carries the
//! recurrent state through unchanged, so a padded batch computes exactly what
//! per-sample processing would.

mod adam;
mod dense;
mod embedding;
mod gradcheck;
mod lstm;

pub use adam::{clip_global_norm, AdamConfig, AdamState};
pub use dense::{cross_entropy_loss, softmax_rows, Dense, DenseCache, PROB_FLOOR};
pub use embedding::Embedding;
pub use gradcheck::{check_gradient, check_gradient_piecewise, GradCheck};
pub use lstm::{lstm_cell_forward, Gate, LstmCache, LstmLayer, LstmStack, StackCache};

use rand::Rng;

/// Flat views of every trainable array, in a fixed order.
pub trait Parameters {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

pub(crate) fn glorot<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> impl FnMut() -> f64 + '_ {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    move || rng.gen_range(-limit..=limit)
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
