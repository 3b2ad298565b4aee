//! Scoring sessions with any trained model, plus model-file conversion.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoencoder::DablogModel;
use crate::critic::{rank_of, score_window, CriticConfig, EventScore, MergeMode, Verdict, judge_events, merge_labels};
use crate::config::RunConfig;
use crate::error::{invalid, Error, Result};
use crate::keyset::KeySet;
use crate::persist::{ModelBody, ModelFile};
use crate::predictor::{training_pairs, BaselineModel, FrequencyModel};
use crate::sequencer::{reverse, windows, Label, Session};

/// Sessions scored together in one forward batch.
const SESSIONS_PER_BATCH: usize = 16;

/// Every checked event of a session with its rank and probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionScores {
    pub session_id: String,
    pub events: Vec<EventScore>,
    pub has_unk: bool,
}

impl SessionScores {
    /// Worst rank seen in the session, 0 when nothing was checked.
    pub fn max_rank(&self) -> usize {
        self.events.iter().map(|e| e.rank).max().unwrap_or(0)
    }

    pub fn min_prob(&self) -> f64 {
        self.events.iter().map(|e| e.prob).fold(f64::INFINITY, f64::min)
    }

    /// Any failing event makes the session abnormal. Offenders are deduplicated by position, keeping the worst rank.
    pub fn verdict(&self, cfg: &CriticConfig, dim: usize) -> Verdict {
        let mut v = judge_events(&self.events, cfg, dim);
        v.offending.sort_by(|a, b| a.pos.cmp(&b.pos).then(b.rank.cmp(&a.rank)));
        v.offending.dedup_by_key(|e| e.pos);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyDetector {
    pub keyset: KeySet,
    pub model: FrequencyModel,
}

impl FrequencyDetector {
    pub fn new(keyset: KeySet, model: FrequencyModel) -> Result<Self> {
        model.validate()?;
        if model.v() != keyset.v() {
            return Err(invalid(format!("frequency model has {} keys, keyset {}", model.v(), keyset.v())));
        }
        Ok(FrequencyDetector { keyset, model })
    }

    fn score(&self, s: &Session, skip_sentinels: bool) -> Result<Vec<EventScore>> {
        let ks = &self.keyset;
        let ranks = self.model.ranks();
        let total: u64 = self.model.counts.iter().sum::<u64>().max(1);
        let mut out = Vec::new();
        for (pos, &id) in s.padded(ks).iter().enumerate() {
            if skip_sentinels && ks.is_sentinel(id) {
                continue;
            }
            let (rank, prob) = if id < ks.v() {
                (ranks[id], self.model.counts[id] as f64 / total as f64)
            } else if id == ks.unk() {
                (ks.v() + 1, 0.0)
            } else {
                (1, 1.0)
            };
            out.push(EventScore { pos, key: id, rank, prob });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Detector {
    Dablog(DablogModel),
    Baseline(BaselineModel),
    Frequency(FrequencyDetector),
}

impl Detector {
    pub fn keyset(&self) -> &KeySet {
        match self {
            Detector::Dablog(m) => &m.keyset,
            Detector::Baseline(m) => &m.keyset,
            Detector::Frequency(f) => &f.keyset,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Detector::Dablog(_) => "dablog",
            Detector::Baseline(_) => "baseline",
            Detector::Frequency(_) => "freq",
        }
    }

    /// Trains a fresh detector of `kind` ("dablog", "baseline" or "freq") on normal sessions.
    pub fn train(kind: &str, cfg: &RunConfig, ks: &KeySet, sessions: &[Session]) -> Result<(Self, Vec<f64>)> {
        cfg.validate()?;
        if sessions.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        match kind {
            "dablog" => {
                let mut m = DablogModel::new(cfg.dablog_config(), ks.clone(), cfg.seed)?;
                let mut ws = Vec::new();
                for s in sessions {
                    ws.extend(windows(s, ks, cfg.seqlen)?);
                }
                let trace = m.train(&ws, &cfg.dablog_train_options())?;
                Ok((Detector::Dablog(m), trace))
            }
            "baseline" => {
                let mut m = BaselineModel::new(cfg.baseline_config(), ks.clone(), cfg.seed)?;
                let trace = m.train(sessions, &cfg.baseline_train_options())?;
                Ok((Detector::Baseline(m), trace))
            }
            "freq" => {
                let f = FrequencyDetector::new(ks.clone(), FrequencyModel::fit(sessions, ks))?;
                Ok((Detector::Frequency(f), Vec::new()))
            }
            other => Err(invalid(format!("unknown model kind {other:?}"))),
        }
    }

    pub fn to_model_file(&self) -> ModelFile {
        let body = match self {
            Detector::Dablog(m) => ModelBody::Dablog { config: m.config.clone(), params: m.params.clone() },
            Detector::Baseline(m) => ModelBody::Baseline { config: m.config.clone(), params: m.params.clone() },
            Detector::Frequency(f) => ModelBody::Freq { model: f.model.clone() },
        };
        ModelFile::new(self.keyset(), body)
    }

    pub fn from_model_json(text: &str) -> Result<Self> {
        let (ks, body) = ModelFile::from_json(text)?;
        Ok(match body {
            ModelBody::Dablog { config, params } => Detector::Dablog(DablogModel::from_parts(config, ks, params)?),
            ModelBody::Baseline { config, params } => Detector::Baseline(BaselineModel::from_parts(config, ks, params)?),
            ModelBody::Freq { model } => Detector::Frequency(FrequencyDetector::new(ks, model)?),
        })
    }

    /// Scores sessions in parallel; output order follows input order.
    pub fn score_sessions(&self, sessions: &[Session], skip_sentinels: bool) -> Result<Vec<SessionScores>> {
        let per_chunk: Vec<Vec<SessionScores>> = sessions
            .par_chunks(SESSIONS_PER_BATCH)
            .map(|chunk| self.score_chunk(chunk, skip_sentinels))
            .collect::<Result<_>>()?;
        Ok(per_chunk.into_iter().flatten().collect())
    }

    pub fn score_session(&self, s: &Session, skip_sentinels: bool) -> Result<SessionScores> {
        Ok(self.score_chunk(std::slice::from_ref(s), skip_sentinels)?.remove(0))
    }

    fn score_chunk(&self, chunk: &[Session], skip_sentinels: bool) -> Result<Vec<SessionScores>> {
        let ks = self.keyset();
        let events: Vec<Vec<EventScore>> = match self {
            Detector::Dablog(m) => {
                let per_session: Vec<_> =
                    chunk.iter().map(|s| windows(s, ks, m.config.seqlen)).collect::<Result<_>>()?;
                let ids: Vec<&[usize]> = per_session.iter().flatten().map(|w| w.ids.as_slice()).collect();
                let mut probs = m.reconstruct_ids(&ids)?.into_iter();
                per_session
                    .iter()
                    .map(|ws| {
                        let mut ev = Vec::new();
                        for w in ws {
                            let p = reverse(&probs.next().expect("one matrix per window"));
                            ev.extend(score_window(&p, w, ks, skip_sentinels)?);
                        }
                        Ok(ev)
                    })
                    .collect::<Result<_>>()?
            }
            Detector::Baseline(m) => {
                let per_session: Vec<Vec<_>> = chunk
                    .iter()
                    .map(|s| {
                        training_pairs(s, ks, m.config.seqlen)
                            .into_iter()
                            .filter(|p| !(skip_sentinels && ks.is_sentinel(p.target)))
                            .collect()
                    })
                    .collect();
                let prefixes: Vec<&[usize]> = per_session.iter().flatten().map(|p| p.prefix.as_slice()).collect();
                let probs = if prefixes.is_empty() { None } else { Some(m.predict_batch(&prefixes)?) };
                let mut row = 0;
                per_session
                    .iter()
                    .map(|pairs| {
                        let mut ev = Vec::with_capacity(pairs.len());
                        for p in pairs {
                            let r = probs.as_ref().expect("non-empty batch").row(row);
                            row += 1;
                            ev.push(EventScore { pos: p.pos, key: p.target, rank: rank_of(r, p.target)?, prob: r[p.target] });
                        }
                        Ok(ev)
                    })
                    .collect::<Result<_>>()?
            }
            Detector::Frequency(f) => chunk.iter().map(|s| f.score(s, skip_sentinels)).collect::<Result<_>>()?,
        };
        Ok(chunk
            .iter()
            .zip(events)
            .map(|(s, events)| SessionScores {
                session_id: s.session_id.clone(),
                events,
                has_unk: s.event_ids.contains(&ks.unk()),
            })
            .collect())
    }
}

/// One line of a verdict file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictLine {
    pub session_id: String,
    pub label: Label,
    pub offending: Vec<Offender>,
    pub unk: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Offender {
    pub pos: usize,
    pub key: String,
    pub rank: usize,
}

impl VerdictLine {
    pub fn new(scores: &SessionScores, verdict: &Verdict, ks: &KeySet) -> Self {
        VerdictLine {
            session_id: scores.session_id.clone(),
            label: verdict.label,
            offending: verdict
                .offending
                .iter()
                .map(|e| Offender { pos: e.pos, key: ks.text(e.key).unwrap_or("?").to_string(), rank: e.rank })
                .collect(),
            unk: scores.has_unk,
        }
    }
}

/// Combines two verdict lists over the same sessions; offenders of both sides are kept.
pub fn merge_verdicts(a: &[VerdictLine], b: &[VerdictLine], mode: MergeMode) -> Result<Vec<VerdictLine>> {
    let index: std::collections::HashMap<&str, &VerdictLine> = b.iter().map(|v| (v.session_id.as_str(), v)).collect();
    if index.len() != a.len() || index.len() != b.len() {
        return Err(invalid("verdict files cover different sessions"));
    }
    a.iter()
        .map(|x| {
            let y = index.get(x.session_id.as_str()).ok_or_else(|| invalid(format!("session {} missing", x.session_id)))?;
            let label = merge_labels(x.label, y.label, mode);
            let offending = if label == Label::Abnormal {
                x.offending.iter().chain(&y.offending).cloned().collect()
            } else {
                Vec::new()
            };
            Ok(VerdictLine { session_id: x.session_id.clone(), label, offending, unk: x.unk || y.unk })
        })
        .collect()
}
