//! Sessions, sliding windows and the row-reversal helper.

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::keyset::{KeyDeriver, KeySet, RawEventRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Abnormal,
}

impl Label {
    pub fn is_abnormal(self) -> bool {
        self == Label::Abnormal
    }
}

/// Events sharing one session id, in timestamp order.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub session_id: String,
    pub event_ids: Vec<usize>,
    pub label: Option<Label>,
}

impl Session {
    /// `[BOS] + events + [EOS]`.
    pub fn padded(&self, ks: &KeySet) -> Vec<usize> {
        let mut p = Vec::with_capacity(self.event_ids.len() + 2);
        p.push(ks.bos());
        p.extend_from_slice(&self.event_ids);
        p.push(ks.eos());
        p
    }
}

/// A contiguous slice of a padded session.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SequenceWindow {
    pub ids: Vec<usize>,
    pub session_id: String,
    /// Offset of `ids[0]` in the padded session.
    pub start: usize,
    pub has_bos: bool,
    pub has_eos: bool,
}

impl SequenceWindow {
    /// A window not tied to any session (tests, ad-hoc scoring).
    pub fn from_ids(ids: Vec<usize>, ks: &KeySet) -> Self {
        let has_bos = ids.first() == Some(&ks.bos());
        let has_eos = ids.last() == Some(&ks.eos());
        SequenceWindow { ids, session_id: String::new(), start: 0, has_bos, has_eos }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Groups records by session id. Sessions appear in first-seen order; events are
/// sorted by timestamp with input order breaking ties.
pub fn assemble_sessions(records: &[RawEventRecord], ks: &KeySet, deriver: &KeyDeriver) -> Result<Vec<Session>> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<(i64, usize, usize)>> = HashMap::new();
    for (idx, r) in records.iter().enumerate() {
        r.validate()?;
        let id = ks.key_id(&deriver.derive_record(r)?);
        let g = groups.entry(r.session_id.as_str()).or_insert_with(|| {
            order.push(r.session_id.as_str());
            Vec::new()
        });
        g.push((r.ts, idx, id));
    }
    Ok(order
        .into_iter()
        .map(|sid| {
            let mut evs = groups.remove(sid).unwrap_or_default();
            evs.sort_by_key(|&(ts, idx, _)| (ts, idx));
            Session { session_id: sid.to_string(), event_ids: evs.into_iter().map(|e| e.2).collect(), label: None }
        })
        .collect())
}

/// Attaches labels; every session must have one.
pub fn apply_labels(sessions: &mut [Session], labels: &BTreeMap<String, Label>) -> Result<()> {
    for s in sessions.iter_mut() {
        let l = labels
            .get(&s.session_id)
            .ok_or_else(|| Error::BadRecord(format!("no label for session {}", s.session_id)))?;
        s.label = Some(*l);
    }
    Ok(())
}

/// Sliding windows of at most `seqlen` ids over the padded session, stride 1.
pub fn windows(s: &Session, ks: &KeySet, seqlen: usize) -> Result<Vec<SequenceWindow>> {
    if seqlen < 3 {
        return Err(invalid(format!("seqlen must be at least 3, got {seqlen}")));
    }
    if s.event_ids.is_empty() {
        return Err(invalid(format!("session {} has no events", s.session_id)));
    }
    let padded = s.padded(ks);
    let n = padded.len();
    let make = |start: usize, end: usize| SequenceWindow {
        ids: padded[start..end].to_vec(),
        session_id: s.session_id.clone(),
        start,
        has_bos: start == 0,
        has_eos: end == n,
    };
    if n <= seqlen {
        return Ok(vec![make(0, n)]);
    }
    Ok((0..=n - seqlen).map(|st| make(st, st + seqlen)).collect())
}

/// Number of windows `windows` produces for a session of `events` events.
pub fn window_count(events: usize, seqlen: usize) -> usize {
    let padded = events + 2;
    if padded <= seqlen {
        1
    } else {
        padded - seqlen + 1
    }
}

/// Rows in reverse order.
pub fn reverse(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    out.invert_axis(Axis(0));
    out.as_standard_layout().into_owned()
}
