//! Next-event predictor baseline and the trivial frequency model.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{train_loop, TrainOptions};
use crate::error::{invalid, Error, Result};
use crate::keyset::KeySet;
use crate::nn::{Dense, Embedding, LstmStack, Parameters, PROB_FLOOR};
use crate::sequencer::Session;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub interlayer_relu: bool,
    pub seqlen: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { embed_dim: 16, hidden: vec![64, 64], interlayer_relu: true, seqlen: 10 }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(invalid("baseline sizes must be positive"));
        }
        if self.seqlen < 1 {
            return Err(invalid("seqlen must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineParams {
    pub embedding: Embedding,
    pub stack: LstmStack,
    pub classifier: Dense,
}

impl BaselineParams {
    pub fn random(cfg: &BaselineConfig, vocab: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = Embedding::random(vocab, cfg.embed_dim, &mut rng);
        let stack = LstmStack::random(cfg.embed_dim, &cfg.hidden, &mut rng);
        let classifier = Dense::random(stack.out_dim(), vocab, &mut rng);
        Ok(BaselineParams { embedding, stack, classifier })
    }

    pub fn zeros_like(&self) -> Self {
        BaselineParams {
            embedding: Embedding::zeros(self.embedding.vocab(), self.embedding.dim()),
            stack: self.stack.zeros_like(),
            classifier: Dense::zeros(self.classifier.in_dim(), self.classifier.out_dim()),
        }
    }

    fn check(&self, vocab: usize) -> Result<()> {
        self.stack.check_chain(self.embedding.dim())?;
        if self.embedding.vocab() != vocab
            || self.classifier.out_dim() != vocab
            || self.classifier.in_dim() != self.stack.out_dim()
        {
            return Err(Error::Shape(format!("baseline parameters do not fit vocab {vocab}")));
        }
        Ok(())
    }
}

impl Parameters for BaselineParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.embedding.tensors();
        v.extend(self.stack.tensors());
        v.extend(self.classifier.tensors());
        v
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.embedding.tensors_mut();
        v.extend(self.stack.tensors_mut());
        v.extend(self.classifier.tensors_mut());
        v
    }
}

/// One supervised example: a history of at most `seqlen` ids and the id that followed it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingPair {
    pub prefix: Vec<usize>,
    pub target: usize,
    /// Index of `target` in the padded session.
    pub pos: usize,
}

/// Every position of the padded session that has a predecessor becomes a target.
pub fn training_pairs(s: &Session, ks: &KeySet, seqlen: usize) -> Vec<TrainingPair> {
    let padded = s.padded(ks);
    (1..padded.len())
        .map(|j| TrainingPair { prefix: padded[j.saturating_sub(seqlen)..j].to_vec(), target: padded[j], pos: j })
        .collect()
}

fn probs_for(params: &BaselineParams, relu: bool, prefixes: &[&[usize]]) -> Result<(Array2<f64>, Forward)> {
    let vocab = params.embedding.vocab();
    for p in prefixes {
        if p.is_empty() {
            return Err(invalid("empty prefix"));
        }
        if let Some(&id) = p.iter().find(|&&id| id >= vocab) {
            return Err(Error::IdOutOfRange { id, dim: vocab });
        }
    }
    let lens: Vec<usize> = prefixes.iter().map(|p| p.len()).collect();
    let steps = *lens.iter().max().ok_or_else(|| invalid("empty batch"))?;
    let active: Option<Vec<Vec<bool>>> = if lens.iter().all(|&l| l == steps) {
        None
    } else {
        Some((0..steps).map(|t| lens.iter().map(|&l| t < l).collect()).collect())
    };
    let xs = params.embedding.forward_batch(prefixes, steps, 0);
    let (hs, stack_cache) = params.stack.forward(&xs, active.as_deref(), relu)?;
    let last = hs[steps - 1].clone();
    let (probs, dense_cache) = params.classifier.forward(&last)?;
    Ok((probs, Forward { stack_cache, dense_cache, steps, batch: prefixes.len() }))
}

struct Forward {
    stack_cache: crate::nn::StackCache,
    dense_cache: crate::nn::DenseCache,
    steps: usize,
    batch: usize,
}

/// Summed next-event loss over a batch of pairs and, if asked, its gradient.
pub fn batch_loss(
    params: &BaselineParams,
    relu: bool,
    pairs: &[(&[usize], usize)],
    want_grad: bool,
) -> Result<(f64, Option<BaselineParams>)> {
    params.check(params.embedding.vocab())?;
    let prefixes: Vec<&[usize]> = pairs.iter().map(|p| p.0).collect();
    let (probs, fw) = probs_for(params, relu, &prefixes)?;
    let mut loss = 0.0;
    for (b, &(_, target)) in pairs.iter().enumerate() {
        if target >= probs.ncols() {
            return Err(Error::IdOutOfRange { id: target, dim: probs.ncols() });
        }
        loss -= probs[[b, target]].max(PROB_FLOOR).ln();
    }
    if !want_grad {
        return Ok((loss, None));
    }
    let mut dlogits = probs;
    for (b, &(_, target)) in pairs.iter().enumerate() {
        dlogits[[b, target]] -= 1.0;
    }
    let mut grad = params.zeros_like();
    let dh = params.classifier.backward(&fw.dense_cache, &dlogits, &mut grad.classifier);
    let mut d_top = vec![Array2::<f64>::zeros((fw.batch, params.stack.out_dim())); fw.steps];
    d_top[fw.steps - 1] = dh;
    let dxs = params.stack.backward(&fw.stack_cache, &d_top, &mut grad.stack);
    params.embedding.backward_batch(&prefixes, 0, &dxs, &mut grad.embedding);
    Ok((loss, Some(grad)))
}

/// ReLU sign pattern of the stack for a batch of prefixes, for kink-aware finite differences.
pub fn relu_pattern(params: &BaselineParams, relu: bool, prefixes: &[&[usize]]) -> Result<Vec<bool>> {
    Ok(probs_for(params, relu, prefixes)?.1.stack_cache.relu_mask())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineModel {
    pub config: BaselineConfig,
    pub keyset: KeySet,
    pub params: BaselineParams,
}

impl BaselineModel {
    pub fn new(config: BaselineConfig, keyset: KeySet, seed: u64) -> Result<Self> {
        let params = BaselineParams::random(&config, keyset.dim(), seed)?;
        Ok(BaselineModel { config, keyset, params })
    }

    pub fn from_parts(config: BaselineConfig, keyset: KeySet, params: BaselineParams) -> Result<Self> {
        config.validate()?;
        params.check(keyset.dim())?;
        Ok(BaselineModel { config, keyset, params })
    }

    /// Distribution over the event following each prefix, one row per prefix.
    pub fn predict_batch(&self, prefixes: &[&[usize]]) -> Result<Array2<f64>> {
        if prefixes.is_empty() {
            return Ok(Array2::zeros((0, self.keyset.dim())));
        }
        Ok(probs_for(&self.params, self.config.interlayer_relu, prefixes)?.0)
    }

    pub fn predict_next(&self, prefix: &[usize]) -> Result<Array1<f64>> {
        Ok(self.predict_batch(&[prefix])?.row(0).to_owned())
    }

    pub fn pairs(&self, sessions: &[Session]) -> Vec<TrainingPair> {
        sessions.iter().flat_map(|s| training_pairs(s, &self.keyset, self.config.seqlen)).collect()
    }

    pub fn train_pairs(&mut self, pairs: &[TrainingPair], opts: &TrainOptions) -> Result<Vec<f64>> {
        if pairs.is_empty() {
            return Err(invalid("no training pairs"));
        }
        let items: Vec<(&[usize], usize)> = pairs.iter().map(|p| (p.prefix.as_slice(), p.target)).collect();
        let relu = self.config.interlayer_relu;
        train_loop(&mut self.params, &items, opts, |p, batch| batch_loss(p, relu, batch, true))
    }

    /// Trains on every (history, next event) pair of the sessions.
    pub fn train(&mut self, sessions: &[Session], opts: &TrainOptions) -> Result<Vec<f64>> {
        let pairs = self.pairs(sessions);
        self.train_pairs(&pairs, opts)
    }
}

/// Ranks real keys by training occurrence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrequencyModel {
    pub counts: Vec<u64>,
    /// Real key ids, most frequent first; ties go to the smaller id.
    pub ranked_ids: Vec<usize>,
}

impl FrequencyModel {
    pub fn fit(sessions: &[Session], ks: &KeySet) -> Self {
        let mut counts = vec![0u64; ks.v()];
        for s in sessions {
            for &id in &s.event_ids {
                if id < ks.v() {
                    counts[id] += 1;
                }
            }
        }
        Self::from_counts(counts)
    }

    pub fn from_counts(counts: Vec<u64>) -> Self {
        let mut ranked_ids: Vec<usize> = (0..counts.len()).collect();
        ranked_ids.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        FrequencyModel { counts, ranked_ids }
    }

    pub fn v(&self) -> usize {
        self.counts.len()
    }

    /// 1 = most frequent.
    pub fn frequency_rank(&self, id: usize) -> Result<usize> {
        if id >= self.v() {
            return Err(invalid(format!("id {id} is not a real key")));
        }
        Ok(self.ranked_ids.iter().position(|&x| x == id).expect("permutation") + 1)
    }

    pub fn ranks(&self) -> Vec<usize> {
        let mut r = vec![0; self.v()];
        for (i, &id) in self.ranked_ids.iter().enumerate() {
            r[id] = i + 1;
        }
        r
    }

    /// Share of all counted events covered by the `n` most frequent keys.
    pub fn top_share(&self, n: usize) -> f64 {
        let total: u64 = self.counts.iter().sum();
        if total == 0 {
            return 0.0;
        }
        let top: u64 = self.ranked_ids.iter().take(n).map(|&i| self.counts[i]).sum();
        top as f64 / total as f64
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.v()];
        for &i in &self.ranked_ids {
            if i >= self.v() || std::mem::replace(&mut seen[i], true) {
                return Err(invalid("frequency ranking is not a permutation"));
            }
        }
        if self.ranked_ids.len() != self.v() {
            return Err(invalid("frequency ranking is not a permutation"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keyset::{EventKey, Granularity};

    fn ks(n: usize) -> KeySet {
        KeySet::from_keys(Granularity::K0, (0..n).map(|i| EventKey::new(format!("k{i}")).unwrap()).collect())
            .unwrap()
    }

    #[test]
    fn pair_count_is_padded_length_minus_one() {
        let k = ks(4);
        let s = Session { session_id: "s".into(), event_ids: vec![0, 1, 2], label: None };
        let pairs = training_pairs(&s, &k, 10);
        assert_eq!(pairs.len(), 4);
        assert_eq!(pairs[0].prefix, vec![k.bos()]);
        assert_eq!(pairs[0].target, 0);
        assert_eq!(pairs[3].target, k.eos());
        assert_eq!(pairs[3].prefix, vec![k.bos(), 0, 1, 2]);
        let long = Session { session_id: "l".into(), event_ids: (0..12).map(|i| i % 4).collect(), label: None };
        let pairs = training_pairs(&long, &k, 3);
        assert_eq!(pairs.len(), 13);
        assert!(pairs.iter().all(|p| p.prefix.len() <= 3));
        assert_eq!(pairs[12].prefix, vec![1, 2, 3]);
    }

    #[test]
    fn frequency_ranks() {
        let k = ks(2);
        let s = Session { session_id: "s".into(), event_ids: vec![0, 0, 1], label: None };
        let f = FrequencyModel::fit(&[s], &k);
        assert_eq!(f.frequency_rank(0).unwrap(), 1);
        assert_eq!(f.frequency_rank(1).unwrap(), 2);
        assert!(f.frequency_rank(k.bos()).is_err());
        let tie = FrequencyModel::from_counts(vec![3, 5, 5, 0]);
        assert_eq!(tie.ranked_ids, vec![1, 2, 0, 3]);
        assert_eq!(tie.ranks(), vec![3, 1, 2, 4]);
        tie.validate().unwrap();
        assert!((tie.top_share(2) - 10.0 / 13.0).abs() < 1e-15);
    }

    #[test]
    fn untrained_prediction_is_a_distribution() {
        let k = ks(5);
        let m = BaselineModel::new(BaselineConfig { hidden: vec![8, 8], ..Default::default() }, k.clone(), 1).unwrap();
        let p = m.predict_next(&[k.bos(), 0, 3]).unwrap();
        assert_eq!(p.len(), k.dim());
        assert!((p.sum() - 1.0).abs() < 1e-9);
        assert_eq!(p, m.predict_next(&[k.bos(), 0, 3]).unwrap());
    }
}
