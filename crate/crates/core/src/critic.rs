//! Turns per-position distributions into event, window and session verdicts.
//!
//! Rank rule: with `N = max(1, ⌊θ_N/100 · dim⌋)`, an event is normal iff its true
//! key's probability is at least the `N`-th largest probability in the row. Ties at
//! the boundary count as normal, which is the same as `rank ≤ N` where
//! `rank = 1 + #{keys with strictly larger probability}`.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::keyset::KeySet;
use crate::sequencer::{Label, SequenceWindow};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CriticMode {
    Rank { theta_n: f64 },
    Threshold { theta_p: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticConfig {
    pub mode: CriticMode,
    #[serde(default = "default_true")]
    pub skip_sentinels: bool,
}

fn default_true() -> bool {
    true
}

impl CriticConfig {
    pub fn rank(theta_n: f64) -> Self {
        CriticConfig { mode: CriticMode::Rank { theta_n }, skip_sentinels: true }
    }

    pub fn threshold(theta_p: f64) -> Self {
        CriticConfig { mode: CriticMode::Threshold { theta_p }, skip_sentinels: true }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            CriticMode::Rank { theta_n } if !(theta_n > 0.0 && theta_n <= 100.0) => {
                Err(invalid(format!("theta_n must be in (0, 100], got {theta_n}")))
            }
            CriticMode::Threshold { theta_p } if !(theta_p > 0.0 && theta_p < 1.0) => {
                Err(invalid(format!("theta_p must be in (0, 1), got {theta_p}")))
            }
            _ => Ok(()),
        }
    }
}

/// Number of top-ranked keys accepted at `theta_n` percent of `dim` keys.
pub fn top_n(theta_n: f64, dim: usize) -> usize {
    let n = (theta_n * dim as f64 / 100.0 + 1e-9).floor() as usize;
    n.max(1)
}

/// `1 + ` the number of keys with strictly larger probability than `true_id`.
pub fn rank_of(row: ArrayView1<'_, f64>, true_id: usize) -> Result<usize> {
    let p = *row.get(true_id).ok_or(Error::IdOutOfRange { id: true_id, dim: row.len() })?;
    Ok(1 + row.iter().filter(|&&q| q > p).count())
}

pub fn event_normal_rank(row: ArrayView1<'_, f64>, true_id: usize, theta_n: f64, dim: usize) -> Result<bool> {
    Ok(rank_of(row, true_id)? <= top_n(theta_n, dim))
}

pub fn event_normal_threshold(row: ArrayView1<'_, f64>, true_id: usize, theta_p: f64) -> Result<bool> {
    if !(theta_p > 0.0 && theta_p < 1.0) {
        return Err(invalid(format!("theta_p must be in (0, 1), got {theta_p}")));
    }
    let p = *row.get(true_id).ok_or(Error::IdOutOfRange { id: true_id, dim: row.len() })?;
    Ok(p >= theta_p)
}

/// One checked event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventScore {
    /// Index in the padded session (0 is BOS).
    pub pos: usize,
    pub key: usize,
    pub rank: usize,
    pub prob: f64,
}

impl EventScore {
    pub fn is_normal(&self, cfg: &CriticConfig, dim: usize) -> bool {
        match cfg.mode {
            CriticMode::Rank { theta_n } => self.rank <= top_n(theta_n, dim),
            CriticMode::Threshold { theta_p } => self.prob >= theta_p,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub label: Label,
    pub offending: Vec<EventScore>,
}

impl Verdict {
    pub fn from_offending(offending: Vec<EventScore>) -> Self {
        let label = if offending.is_empty() { Label::Normal } else { Label::Abnormal };
        Verdict { label, offending }
    }
}

/// Judges every scored event; abnormal iff any fails.
pub fn judge_events(events: &[EventScore], cfg: &CriticConfig, dim: usize) -> Verdict {
    Verdict::from_offending(events.iter().filter(|e| !e.is_normal(cfg, dim)).copied().collect())
}

/// Scores the positions of one window. `probs` must already be in input order.
pub fn score_window(probs: &Array2<f64>, w: &SequenceWindow, ks: &KeySet, skip_sentinels: bool) -> Result<Vec<EventScore>> {
    if probs.nrows() != w.len() {
        return Err(Error::Shape(format!("{} rows for a window of {}", probs.nrows(), w.len())));
    }
    if probs.ncols() != ks.dim() {
        return Err(Error::Shape(format!("{} columns for {} keys", probs.ncols(), ks.dim())));
    }
    let mut out = Vec::with_capacity(w.len());
    for (j, &id) in w.ids.iter().enumerate() {
        if skip_sentinels && ks.is_sentinel(id) {
            continue;
        }
        let row = probs.row(j);
        out.push(EventScore { pos: w.start + j, key: id, rank: rank_of(row, id)?, prob: row[id] });
    }
    Ok(out)
}

/// Autoencoder window verdict; `probs` must already be reversed into input order.
pub fn judge_window_autoencoder(
    probs: &Array2<f64>,
    w: &SequenceWindow,
    ks: &KeySet,
    cfg: &CriticConfig,
) -> Result<Verdict> {
    cfg.validate()?;
    if probs.nrows() != w.len() {
        return Err(Error::Shape(format!("{} rows for a window of {}", probs.nrows(), w.len())));
    }
    let mut offending = Vec::new();
    for (j, &id) in w.ids.iter().enumerate() {
        if cfg.skip_sentinels && ks.is_sentinel(id) {
            continue;
        }
        let row = probs.row(j);
        let normal = match cfg.mode {
            CriticMode::Rank { theta_n } => event_normal_rank(row, id, theta_n, ks.dim())?,
            CriticMode::Threshold { theta_p } => event_normal_threshold(row, id, theta_p)?,
        };
        if !normal {
            offending.push(EventScore { pos: w.start + j, key: id, rank: rank_of(row, id)?, prob: row[id] });
        }
    }
    Ok(Verdict::from_offending(offending))
}

/// A session is abnormal iff any of its windows is.
pub fn judge_session(verdicts: &[Verdict]) -> Result<Verdict> {
    if verdicts.is_empty() {
        return Err(invalid("no window verdicts"));
    }
    Ok(Verdict::from_offending(verdicts.iter().flat_map(|v| v.offending.iter().copied()).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMode {
    Intersection,
    Union,
}

pub fn merge_labels(a: Label, b: Label, mode: MergeMode) -> Label {
    let abnormal = match mode {
        MergeMode::Intersection => a.is_abnormal() && b.is_abnormal(),
        MergeMode::Union => a.is_abnormal() || b.is_abnormal(),
    };
    if abnormal {
        Label::Abnormal
    } else {
        Label::Normal
    }
}
