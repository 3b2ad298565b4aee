//! The embed → encode → decode → classify reconstruction model.
//!
//! The encoder's final top-layer hidden state is the sequence code. The decoder
//! receives that code, repeated, as its input at every step and starts from zero
//! state; no ground-truth event is fed back. Decoder step `τ` reconstructs input
//! event `T − 1 − τ`, so outputs come back in reverse order.

use ndarray::{s, Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::keyset::KeySet;
use crate::nn::{clip_global_norm, AdamConfig, AdamState, Dense, Embedding, LstmStack, Parameters, PROB_FLOOR};
use crate::sequencer::SequenceWindow;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DablogConfig {
    pub embed_dim: usize,
    pub encoder: Vec<usize>,
    pub decoder: Vec<usize>,
    pub interlayer_relu: bool,
    pub seqlen: usize,
}

impl Default for DablogConfig {
    fn default() -> Self {
        DablogConfig { embed_dim: 16, encoder: vec![64, 32], decoder: vec![32, 64], interlayer_relu: true, seqlen: 10 }
    }
}

impl DablogConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.encoder.is_empty() || self.decoder.is_empty() {
            return Err(invalid("embedding and both stacks need nonzero sizes"));
        }
        if self.encoder.iter().chain(&self.decoder).any(|&h| h == 0) {
            return Err(invalid("hidden sizes must be positive"));
        }
        if self.encoder.last() != self.decoder.first() {
            return Err(invalid(format!(
                "encoder last hidden {:?} must equal decoder first hidden {:?}",
                self.encoder.last(),
                self.decoder.first()
            )));
        }
        if self.seqlen < 3 {
            return Err(invalid("seqlen must be at least 3"));
        }
        Ok(())
    }

    pub fn code_dim(&self) -> usize {
        *self.encoder.last().expect("validated")
    }
}

/// Training schedule shared by both sequence models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Global-norm gradient clip; `None` disables clipping.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { epochs: 10, batch_size: 32, seed: 0, adam: AdamConfig::default(), clip_norm: Some(5.0) }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid("epochs and batch_size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DablogParams {
    pub embedding: Embedding,
    pub encoder: LstmStack,
    pub decoder: LstmStack,
    pub classifier: Dense,
}

impl DablogParams {
    pub fn random(cfg: &DablogConfig, vocab: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = Embedding::random(vocab, cfg.embed_dim, &mut rng);
        let encoder = LstmStack::random(cfg.embed_dim, &cfg.encoder, &mut rng);
        let decoder = LstmStack::random(cfg.code_dim(), &cfg.decoder, &mut rng);
        let classifier = Dense::random(*cfg.decoder.last().expect("validated"), vocab, &mut rng);
        Ok(DablogParams { embedding, encoder, decoder, classifier })
    }

    pub fn zeros_like(&self) -> Self {
        DablogParams {
            embedding: Embedding::zeros(self.embedding.vocab(), self.embedding.dim()),
            encoder: self.encoder.zeros_like(),
            decoder: self.decoder.zeros_like(),
            classifier: Dense::zeros(self.classifier.in_dim(), self.classifier.out_dim()),
        }
    }

    fn check(&self, vocab: usize) -> Result<()> {
        self.encoder.check_chain(self.embedding.dim())?;
        self.decoder.check_chain(self.encoder.out_dim())?;
        if self.embedding.vocab() != vocab
            || self.classifier.out_dim() != vocab
            || self.classifier.in_dim() != self.decoder.out_dim()
        {
            return Err(Error::Shape(format!(
                "vocab {vocab}: embedding {:?}, classifier {:?}",
                self.embedding.w.dim(),
                self.classifier.w.dim()
            )));
        }
        Ok(())
    }
}

impl Parameters for DablogParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.embedding.tensors();
        v.extend(self.encoder.tensors());
        v.extend(self.decoder.tensors());
        v.extend(self.classifier.tensors());
        v
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.embedding.tensors_mut();
        v.extend(self.encoder.tensors_mut());
        v.extend(self.decoder.tensors_mut());
        v.extend(self.classifier.tensors_mut());
        v
    }
}

struct BatchOutput {
    /// `steps·B × vocab`, row `τ·B + b` is decoder step `τ` of sample `b`.
    probs: Array2<f64>,
    code: Array2<f64>,
    steps: usize,
}

fn activity(lens: &[usize], steps: usize) -> Option<Vec<Vec<bool>>> {
    if lens.iter().all(|&l| l == steps) {
        None
    } else {
        Some((0..steps).map(|t| lens.iter().map(|&l| t < l).collect()).collect())
    }
}

fn check_ids(batch: &[&[usize]], vocab: usize) -> Result<()> {
    for s in batch {
        if s.is_empty() {
            return Err(invalid("empty sequence"));
        }
        if let Some(&id) = s.iter().find(|&&id| id >= vocab) {
            return Err(Error::IdOutOfRange { id, dim: vocab });
        }
    }
    Ok(())
}

/// Summed reconstruction loss over a batch and, if asked, its gradient.
pub fn batch_loss(
    params: &DablogParams,
    relu: bool,
    batch: &[&[usize]],
    want_grad: bool,
) -> Result<(f64, Option<DablogParams>)> {
    let vocab = params.embedding.vocab();
    params.check(vocab)?;
    check_ids(batch, vocab)?;
    let bsz = batch.len();
    let lens: Vec<usize> = batch.iter().map(|s| s.len()).collect();
    let steps = *lens.iter().max().ok_or_else(|| invalid("empty batch"))?;
    let active = activity(&lens, steps);

    let xs = params.embedding.forward_batch(batch, steps, 0);
    let (enc_hs, enc_cache) = params.encoder.forward(&xs, active.as_deref(), relu)?;
    let code = enc_hs[steps - 1].clone();
    let dec_in = vec![code.clone(); steps];
    let (dec_hs, dec_cache) = params.decoder.forward(&dec_in, None, relu)?;
    let hid = params.decoder.out_dim();
    let mut y = Array2::zeros((steps * bsz, hid));
    for (t, h) in dec_hs.iter().enumerate() {
        y.slice_mut(s![t * bsz..(t + 1) * bsz, ..]).assign(h);
    }
    let (probs, dense_cache) = params.classifier.forward(&y)?;

    let mut loss = 0.0;
    let mut dlogits = if want_grad { probs.clone() } else { Array2::zeros((0, 0)) };
    for t in 0..steps {
        for (b, seq) in batch.iter().enumerate() {
            let row = t * bsz + b;
            if t < lens[b] {
                let target = seq[lens[b] - 1 - t];
                loss -= probs[[row, target]].max(PROB_FLOOR).ln();
                if want_grad {
                    dlogits[[row, target]] -= 1.0;
                }
            } else if want_grad {
                dlogits.row_mut(row).fill(0.0);
            }
        }
    }
    if !want_grad {
        return Ok((loss, None));
    }

    let mut grad = params.zeros_like();
    let dy = params.classifier.backward(&dense_cache, &dlogits, &mut grad.classifier);
    let d_dec: Vec<Array2<f64>> =
        (0..steps).map(|t| dy.slice(s![t * bsz..(t + 1) * bsz, ..]).to_owned()).collect();
    let d_dec_in = params.decoder.backward(&dec_cache, &d_dec, &mut grad.decoder);
    let mut dcode = Array2::<f64>::zeros(code.dim());
    for d in &d_dec_in {
        dcode += d;
    }
    let mut d_enc = vec![Array2::<f64>::zeros(code.dim()); steps];
    d_enc[steps - 1] = dcode;
    let dxs = params.encoder.backward(&enc_cache, &d_enc, &mut grad.encoder);
    params.embedding.backward_batch(batch, 0, &dxs, &mut grad.embedding);
    Ok((loss, Some(grad)))
}

/// ReLU sign pattern of both stacks for a batch, for kink-aware finite differences.
pub fn relu_pattern(params: &DablogParams, relu: bool, batch: &[&[usize]]) -> Result<Vec<bool>> {
    check_ids(batch, params.embedding.vocab())?;
    let lens: Vec<usize> = batch.iter().map(|s| s.len()).collect();
    let steps = *lens.iter().max().ok_or_else(|| invalid("empty batch"))?;
    let active = activity(&lens, steps);
    let xs = params.embedding.forward_batch(batch, steps, 0);
    let (enc_hs, enc_cache) = params.encoder.forward(&xs, active.as_deref(), relu)?;
    let (_, dec_cache) = params.decoder.forward(&vec![enc_hs[steps - 1].clone(); steps], None, relu)?;
    let mut mask = enc_cache.relu_mask();
    mask.extend(dec_cache.relu_mask());
    Ok(mask)
}

fn forward_batch(params: &DablogParams, relu: bool, batch: &[&[usize]]) -> Result<BatchOutput> {
    let vocab = params.embedding.vocab();
    check_ids(batch, vocab)?;
    let bsz = batch.len();
    let lens: Vec<usize> = batch.iter().map(|s| s.len()).collect();
    let steps = *lens.iter().max().ok_or_else(|| invalid("empty batch"))?;
    let active = activity(&lens, steps);
    let xs = params.embedding.forward_batch(batch, steps, 0);
    let (enc_hs, _) = params.encoder.forward(&xs, active.as_deref(), relu)?;
    let code = enc_hs[steps - 1].clone();
    let (dec_hs, _) = params.decoder.forward(&vec![code.clone(); steps], None, relu)?;
    let mut y = Array2::zeros((steps * bsz, params.decoder.out_dim()));
    for (t, h) in dec_hs.iter().enumerate() {
        y.slice_mut(s![t * bsz..(t + 1) * bsz, ..]).assign(h);
    }
    let (probs, _) = params.classifier.forward(&y)?;
    Ok(BatchOutput { probs, code, steps })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DablogModel {
    pub config: DablogConfig,
    pub keyset: KeySet,
    pub params: DablogParams,
}

impl DablogModel {
    pub fn new(config: DablogConfig, keyset: KeySet, seed: u64) -> Result<Self> {
        let params = DablogParams::random(&config, keyset.dim(), seed)?;
        Ok(DablogModel { config, keyset, params })
    }

    pub fn from_parts(config: DablogConfig, keyset: KeySet, params: DablogParams) -> Result<Self> {
        config.validate()?;
        params.check(keyset.dim())?;
        if params.embedding.dim() != config.embed_dim {
            return Err(Error::Shape("embedding width differs from config".into()));
        }
        Ok(DablogModel { config, keyset, params })
    }

    /// Per-window probability matrices in decoder (reversed) order.
    pub fn reconstruct_ids(&self, batch: &[&[usize]]) -> Result<Vec<Array2<f64>>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let out = forward_batch(&self.params, self.config.interlayer_relu, batch)?;
        let bsz = batch.len();
        Ok(batch
            .iter()
            .enumerate()
            .map(|(b, seq)| {
                let mut m = Array2::zeros((seq.len(), self.keyset.dim()));
                for t in 0..seq.len() {
                    m.row_mut(t).assign(&out.probs.row(t * bsz + b));
                }
                debug_assert!(out.steps >= seq.len());
                m
            })
            .collect())
    }

    /// Row `τ` is the distribution for event `T − 1 − τ`; use `reverse` to align with the input.
    pub fn reconstruct(&self, w: &SequenceWindow) -> Result<Array2<f64>> {
        Ok(self.reconstruct_ids(&[w.ids.as_slice()])?.remove(0))
    }

    pub fn code_of(&self, w: &SequenceWindow) -> Result<Array1<f64>> {
        let out = forward_batch(&self.params, self.config.interlayer_relu, &[w.ids.as_slice()])?;
        Ok(out.code.row(0).to_owned())
    }

    /// Mean summed loss of each window, without updating anything.
    pub fn mean_loss(&self, windows: &[SequenceWindow]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in windows.chunks(64) {
            let ids: Vec<&[usize]> = chunk.iter().map(|w| w.ids.as_slice()).collect();
            total += batch_loss(&self.params, self.config.interlayer_relu, &ids, false)?.0;
        }
        Ok(total / windows.len().max(1) as f64)
    }

    /// Adam over seeded shuffled mini-batches. Returns the mean per-window loss of each epoch.
    pub fn train(&mut self, windows: &[SequenceWindow], opts: &TrainOptions) -> Result<Vec<f64>> {
        if windows.is_empty() {
            return Err(invalid("no training windows"));
        }
        let seqs: Vec<&[usize]> = windows.iter().map(|w| w.ids.as_slice()).collect();
        let relu = self.config.interlayer_relu;
        train_loop(&mut self.params, &seqs, opts, |p, batch| batch_loss(p, relu, batch, true))
    }
}

/// Shared mini-batch Adam loop. `step` returns the summed loss and gradient of a batch.
pub(crate) fn train_loop<P, T, F>(params: &mut P, items: &[T], opts: &TrainOptions, mut step: F) -> Result<Vec<f64>>
where
    P: Parameters,
    T: Copy,
    F: FnMut(&P, &[T]) -> Result<(f64, Option<P>)>,
{
    opts.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = AdamState::new(opts.adam, &*params);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut trace = Vec::with_capacity(opts.epochs);
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<T> = chunk.iter().map(|&i| items[i]).collect();
            let (loss, grad) = step(params, &batch)?;
            let mut grad = grad.expect("gradient requested");
            if !loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            total += loss;
            grad.scale(1.0 / batch.len() as f64);
            if let Some(max) = opts.clip_norm {
                clip_global_norm(&mut grad, max);
            }
            adam.step(params, &grad)?;
        }
        trace.push(total / items.len() as f64);
    }
    if !params.all_finite() {
        return Err(Error::NonFinite("parameters"));
    }
    Ok(trace)
}
