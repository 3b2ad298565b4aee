//! Seeded grammar-based generator of labeled synthetic logs.
//!
//! Normal sessions are derivations of weighted templates. Abnormal sessions take a fresh
//! normal derivation and apply one structural mutation that breaks a causal rule.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::keyset::{Attrs, KeySet, RawEventRecord};
use crate::records::LabelLine;
use crate::sequencer::{windows, Label, Session};

/// Attribute template; a string starting with `$` refers to a variable bound by an enclosing choice.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttrTemplate {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filepath: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_bytes: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src_ip: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst_ip: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Element {
    Event {
        key: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        attrs: Option<AttrTemplate>,
    },
    Repeat { min: u32, max: u32, body: Vec<Element> },
    Choice { branches: Vec<Branch> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Branch {
    pub weight: f64,
    /// Rare branches of one choice point share `rare_variant_weight` of its mass.
    #[serde(default)]
    pub rare: bool,
    /// Values are literals or inclusive integer ranges `lo..hi`.
    #[serde(default)]
    pub bind: BTreeMap<String, String>,
    pub body: Vec<Element>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Template {
    pub name: String,
    pub weight: f64,
    pub body: Vec<Element>,
}

/// Effects may only occur while the cause is open; the closer ends it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CausalRule {
    pub cause: String,
    pub effects: Vec<String>,
    #[serde(default)]
    pub closer: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyOp {
    /// Removes a cause that is followed by one of its effects.
    DropCause,
    /// Copies an effect to a spot where its cause is not open.
    EffectWithoutCause,
    /// Swaps a cause with the effect right after it.
    OutOfOrderSwap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrammarSpec {
    pub templates: Vec<Template>,
    pub causal: Vec<CausalRule>,
    pub anomaly_ops: Vec<AnomalyOp>,
    pub rare_variant_weight: f64,
    pub seed: u64,
}

/// A generated event before key derivation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenEvent {
    pub key: String,
    pub attrs: Option<Attrs>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedSession {
    pub session_id: String,
    pub label: Label,
    pub template: String,
    /// True when some rare branch was taken.
    pub rare_variant: bool,
    pub op: Option<AnomalyOp>,
    pub events: Vec<GenEvent>,
}

/// Attempts per abnormal session before giving up on finding an applicable mutation.
const MUTATION_ATTEMPTS: usize = 100;

impl GrammarSpec {
    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(invalid("grammar needs at least one template"));
        }
        if !(self.rare_variant_weight > 0.0 && self.rare_variant_weight < 1.0) {
            return Err(invalid("rare_variant_weight must lie in (0, 1)"));
        }
        for t in &self.templates {
            if !(t.weight > 0.0 && t.weight.is_finite()) {
                return Err(invalid(format!("template {} has a non-positive weight", t.name)));
            }
            validate_body(&t.body)?;
        }
        for r in &self.causal {
            if r.effects.is_empty() {
                return Err(invalid(format!("causal rule for {} has no effects", r.cause)));
            }
        }
        Ok(())
    }

    /// Derives one normal session; returns events, template name and whether a rare branch was used.
    fn sample_normal(&self, rng: &mut ChaCha8Rng) -> Result<(Vec<GenEvent>, String, bool)> {
        let pick = WeightedIndex::new(self.templates.iter().map(|t| t.weight)).map_err(|e| invalid(e.to_string()))?;
        let t = &self.templates[pick.sample(rng)];
        let mut out = Vec::new();
        let mut rare = false;
        let mut vars = HashMap::new();
        self.expand(&t.body, rng, &mut vars, &mut out, &mut rare)?;
        Ok((out, t.name.clone(), rare))
    }

    fn expand(
        &self,
        body: &[Element],
        rng: &mut ChaCha8Rng,
        vars: &mut HashMap<String, String>,
        out: &mut Vec<GenEvent>,
        rare: &mut bool,
    ) -> Result<()> {
        for el in body {
            match el {
                Element::Event { key, attrs } => {
                    let attrs = attrs.as_ref().map(|a| instantiate(a, vars)).transpose()?;
                    out.push(GenEvent { key: key.clone(), attrs });
                }
                Element::Repeat { min, max, body } => {
                    for _ in 0..rng.gen_range(*min..=*max) {
                        self.expand(body, rng, vars, out, rare)?;
                    }
                }
                Element::Choice { branches } => {
                    let has_rare = branches.iter().any(|b| b.rare);
                    let has_common = branches.iter().any(|b| !b.rare);
                    let rare_mass: f64 = branches.iter().filter(|b| b.rare).map(|b| b.weight).sum();
                    let common_mass: f64 = branches.iter().filter(|b| !b.rare).map(|b| b.weight).sum();
                    let w = branches.iter().map(|b| match (b.rare, has_rare && has_common) {
                        (true, true) => self.rare_variant_weight * b.weight / rare_mass,
                        (false, true) => (1.0 - self.rare_variant_weight) * b.weight / common_mass,
                        _ => b.weight,
                    });
                    let pick = WeightedIndex::new(w).map_err(|e| invalid(e.to_string()))?;
                    let b = &branches[pick.sample(rng)];
                    *rare |= b.rare;
                    for (k, v) in &b.bind {
                        vars.insert(k.clone(), bind_value(v, rng)?);
                    }
                    self.expand(&b.body, rng, vars, out, rare)?;
                }
            }
        }
        Ok(())
    }

    /// Applies `op` at a random applicable site; `None` when the session offers none.
    fn mutate(&self, events: &[GenEvent], op: AnomalyOp, rng: &mut ChaCha8Rng) -> Option<Vec<GenEvent>> {
        let mut sites: Vec<(usize, usize)> = Vec::new();
        match op {
            AnomalyOp::DropCause => {
                for (i, e) in events.iter().enumerate().skip(1) {
                    for r in self.causal.iter().filter(|r| r.cause == e.key) {
                        let followed = events[i + 1..]
                            .iter()
                            .take_while(|x| x.key != r.cause)
                            .any(|x| r.effects.contains(&x.key));
                        if followed {
                            sites.push((i, 0));
                        }
                    }
                }
                let &(i, _) = sites.choose(rng)?;
                let mut out = events.to_vec();
                out.remove(i);
                Some(out)
            }
            AnomalyOp::EffectWithoutCause => {
                // (index of an effect event to copy, insertion point where its rule is closed)
                for (r_idx, r) in self.causal.iter().enumerate() {
                    let sources: Vec<usize> =
                        (0..events.len()).filter(|&j| r.effects.contains(&events[j].key)).collect();
                    if sources.is_empty() {
                        continue;
                    }
                    let open = open_states(events, &self.causal, r_idx);
                    for (at, &is_open) in open.iter().enumerate() {
                        if !is_open {
                            for &j in &sources {
                                sites.push((j, at));
                            }
                        }
                    }
                }
                let &(j, at) = sites.choose(rng)?;
                let mut out = events.to_vec();
                out.insert(at, events[j].clone());
                Some(out)
            }
            AnomalyOp::OutOfOrderSwap => {
                for i in 0..events.len().saturating_sub(1) {
                    let (a, b) = (&events[i].key, &events[i + 1].key);
                    if self.causal.iter().any(|r| &r.cause == a && r.effects.contains(b)) {
                        sites.push((i, 0));
                    }
                }
                let &(i, _) = sites.choose(rng)?;
                let mut out = events.to_vec();
                out.swap(i, i + 1);
                Some(out)
            }
        }
    }
}

fn validate_body(body: &[Element]) -> Result<()> {
    for el in body {
        match el {
            Element::Event { key, .. } if key.trim().is_empty() => return Err(invalid("empty event key in grammar")),
            Element::Event { .. } => {}
            Element::Repeat { min, max, body } => {
                if min > max {
                    return Err(invalid("repeat min exceeds max"));
                }
                validate_body(body)?;
            }
            Element::Choice { branches } => {
                if branches.is_empty() {
                    return Err(invalid("choice without branches"));
                }
                for b in branches {
                    if !(b.weight > 0.0 && b.weight.is_finite()) {
                        return Err(invalid("branch weights must be positive"));
                    }
                    validate_body(&b.body)?;
                }
            }
        }
    }
    Ok(())
}

fn bind_value(v: &str, rng: &mut ChaCha8Rng) -> Result<String> {
    match v.split_once("..") {
        Some((lo, hi)) => {
            let lo: i64 = lo.trim().parse().map_err(|_| invalid(format!("bad range {v:?}")))?;
            let hi: i64 = hi.trim().parse().map_err(|_| invalid(format!("bad range {v:?}")))?;
            if lo > hi {
                return Err(invalid(format!("empty range {v:?}")));
            }
            Ok(rng.gen_range(lo..=hi).to_string())
        }
        None => Ok(v.to_string()),
    }
}

fn instantiate(t: &AttrTemplate, vars: &HashMap<String, String>) -> Result<Attrs> {
    let sub = |s: &Option<String>| -> Result<Option<String>> {
        match s.as_deref() {
            Some(v) if v.starts_with('$') => {
                vars.get(&v[1..]).cloned().map(Some).ok_or_else(|| invalid(format!("unbound variable {v}")))
            }
            other => Ok(other.map(str::to_string)),
        }
    };
    let size_bytes = sub(&t.size_bytes)?
        .map(|s| s.parse::<i64>().map_err(|_| invalid(format!("size {s:?} is not an integer"))))
        .transpose()?;
    Ok(Attrs { filepath: sub(&t.filepath)?, size_bytes, src_ip: sub(&t.src_ip)?, dst_ip: sub(&t.dst_ip)? })
}

/// For each insertion point `0..=len`, whether rule `r` is open just before it.
fn open_states(events: &[GenEvent], rules: &[CausalRule], r: usize) -> Vec<bool> {
    let rule = &rules[r];
    let mut open = false;
    let mut out = Vec::with_capacity(events.len() + 1);
    out.push(open);
    for e in events {
        if e.key == rule.cause {
            open = true;
        }
        if rule.closer.as_deref() == Some(e.key.as_str()) {
            open = false;
        }
        out.push(open);
    }
    out
}

/// True when some effect occurs while its cause is closed, or a closable cause is left open.
pub fn violates_causality(events: &[GenEvent], rules: &[CausalRule]) -> bool {
    for r in rules {
        let mut open = false;
        for e in events {
            if e.key == r.cause {
                open = true;
            } else if r.effects.contains(&e.key) && !open {
                return true;
            }
            if r.closer.as_deref() == Some(e.key.as_str()) {
                open = false;
            }
        }
        if open && r.closer.is_some() {
            return true;
        }
    }
    false
}

/// `n_normal` template derivations and `n_abnormal` mutated ones, shuffled together.
pub fn generate_corpus(g: &GrammarSpec, n_normal: usize, n_abnormal: usize) -> Result<Vec<GeneratedSession>> {
    g.validate()?;
    if n_abnormal > 0 && g.anomaly_ops.is_empty() {
        return Err(invalid("abnormal sessions requested but the grammar has no anomaly ops"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    let mut out = Vec::with_capacity(n_normal + n_abnormal);
    for _ in 0..n_normal {
        let (events, template, rare) = g.sample_normal(&mut rng)?;
        out.push(GeneratedSession {
            session_id: String::new(),
            label: Label::Normal,
            template,
            rare_variant: rare,
            op: None,
            events,
        });
    }
    for _ in 0..n_abnormal {
        out.push(sample_abnormal(g, &mut rng)?);
    }
    out.shuffle(&mut rng);
    let mut used = HashSet::new();
    for s in &mut out {
        loop {
            let id = format!("blk_{:016x}", rng.gen::<u64>());
            if used.insert(id.clone()) {
                s.session_id = id;
                break;
            }
        }
    }
    Ok(out)
}

fn sample_abnormal(g: &GrammarSpec, rng: &mut ChaCha8Rng) -> Result<GeneratedSession> {
    for _ in 0..MUTATION_ATTEMPTS {
        let (events, template, rare) = g.sample_normal(rng)?;
        let op = *g.anomaly_ops.choose(rng).expect("checked non-empty");
        if let Some(m) = g.mutate(&events, op, rng) {
            if violates_causality(&m, &g.causal) {
                return Ok(GeneratedSession {
                    session_id: String::new(),
                    label: Label::Abnormal,
                    template,
                    rare_variant: rare,
                    op: Some(op),
                    events: m,
                });
            }
        }
    }
    Err(invalid("no anomaly op applies to the grammar's derivations"))
}

/// Seed for a normal-only training corpus drawn from the same grammar.
pub fn training_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// Line records with strictly increasing timestamps, session by session.
pub fn to_records(sessions: &[GeneratedSession]) -> Vec<RawEventRecord> {
    let mut ts = 0i64;
    let mut out = Vec::new();
    for s in sessions {
        for e in &s.events {
            ts += 1;
            out.push(RawEventRecord { session_id: s.session_id.clone(), ts, key: e.key.clone(), attrs: e.attrs.clone() });
        }
    }
    out
}

pub fn to_labels(sessions: &[GeneratedSession]) -> Vec<LabelLine> {
    sessions.iter().map(|s| LabelLine { session_id: s.session_id.clone(), label: s.label }).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    /// Occurrences per id over the unpadded sessions, length `dim`.
    pub key_counts: Vec<u64>,
    pub distinct_windows: usize,
    pub always_normal: usize,
    pub always_abnormal: usize,
    pub nondeterministic: usize,
}

/// Partitions distinct windows by the labels of the sessions they occur in. Unlabeled sessions only count keys.
pub fn corpus_stats(sessions: &[Session], ks: &KeySet, seqlen: usize) -> Result<CorpusStats> {
    let mut key_counts = vec![0u64; ks.dim()];
    let mut seen: HashMap<Vec<usize>, (bool, bool)> = HashMap::new();
    for s in sessions {
        for &id in &s.event_ids {
            key_counts[id] += 1;
        }
        let Some(label) = s.label else { continue };
        for w in windows(s, ks, seqlen)? {
            let e = seen.entry(w.ids).or_default();
            match label {
                Label::Normal => e.0 = true,
                Label::Abnormal => e.1 = true,
            }
        }
    }
    let mut st = CorpusStats { key_counts, distinct_windows: seen.len(), ..Default::default() };
    for (n, a) in seen.into_values() {
        match (n, a) {
            (true, false) => st.always_normal += 1,
            (false, true) => st.always_abnormal += 1,
            _ => st.nondeterministic += 1,
        }
    }
    Ok(st)
}

fn ev(key: &str) -> Element {
    Element::Event { key: key.into(), attrs: None }
}

fn ev_attrs(key: &str, size: Option<&str>, src: Option<&str>, dst: Option<&str>) -> Element {
    let var = |v: Option<&str>| v.map(|x| format!("${x}"));
    Element::Event {
        key: key.into(),
        attrs: Some(AttrTemplate { filepath: None, size_bytes: var(size), src_ip: var(src), dst_ip: var(dst) }),
    }
}

fn receiving() -> Vec<Element> {
    vec![rep(2, 3, vec![ev_attrs("Receiving block", None, Some("src"), Some("dst"))])]
}

fn received() -> Element {
    ev_attrs("Received block", Some("size"), Some("from"), None)
}

fn stored() -> Element {
    ev_attrs("addStoredBlock", Some("size"), None, Some("store"))
}

fn bound(vars: &[(&str, &str)], body: Vec<Element>) -> Branch {
    let bind = vars.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    Branch { weight: 1.0, rare: false, bind, body }
}

fn rep(min: u32, max: u32, body: Vec<Element>) -> Element {
    Element::Repeat { min, max, body }
}

fn branch(weight: f64, rare: bool, body: Vec<Element>) -> Branch {
    Branch { weight, rare, bind: BTreeMap::new(), body }
}

fn choice(branches: Vec<Branch>) -> Element {
    Element::Choice { branches }
}

const MIB: i64 = 1 << 20;

fn size_branch(lo_mib: i64, weight: f64, rare: bool) -> Branch {
    let mut bind = BTreeMap::new();
    bind.insert("size".into(), format!("{}..{}", lo_mib * MIB, (lo_mib + 10) * MIB - 1));
    Branch { weight, rare, bind, body: Vec::new() }
}

impl GrammarSpec {
    /// The shipped desk-scale grammar. Keys are meant to be derived at K1.
    pub fn desk(seed: u64) -> Self {
        let read_cycle = vec![ev("open A"), rep(1, 3, vec![ev("read A")]), ev("close A")];
        let mut file_a = vec![
            ev("open A"),
            rep(1, 3, vec![ev("read A")]),
            choice(vec![
                branch(1.0, false, vec![ev("close A")]),
                branch(1.0, true, vec![ev("open B"), ev("read B"), ev("close B"), ev("close A")]),
            ]),
        ];
        file_a.push(rep(1, 2, read_cycle.clone()));

        let file_c = vec![
            ev("open C"),
            rep(1, 3, vec![ev("write C")]),
            choice(vec![
                branch(1.0, false, vec![ev("flush C")]),
                branch(1.0, false, vec![ev("sync C")]),
                branch(1.0, true, vec![ev("truncate C")]),
            ]),
            ev("close C"),
        ];

        let block = vec![
            ev("allocateBlock"),
            choice(vec![
                bound(&[("src", "10.250.19.102"), ("dst", "10.250.19.102"), ("store", "10.251.3.13")], receiving()),
                bound(&[("src", "10.250.19.102"), ("dst", "10.250.10.6"), ("store", "10.251.3.13")], receiving()),
            ]),
            choice(vec![bound(&[("from", "10.250.14.38")], vec![]), bound(&[("from", "10.251.7.104")], vec![])]),
            choice(vec![
                size_branch(0, 1.0, false),
                size_branch(30, 1.0, false),
                size_branch(50, 1.0, false),
                size_branch(60, 2.0, false),
                size_branch(20, 1.0, true),
            ]),
            received(),
            rep(1, 3, vec![stored()]),
            ev("PacketResponder terminating"),
            received(),
            stored(),
        ];

        let login = vec![
            ev("connect"),
            ev("auth ok"),
            rep(1, 4, vec![ev("query")]),
            choice(vec![
                branch(1.0, false, vec![ev("disconnect")]),
                branch(1.0, true, vec![ev("auth refresh"), ev("query"), ev("disconnect")]),
            ]),
        ];

        let mut remote_read = vec![ev("connect"), ev("auth ok")];
        remote_read.push(rep(1, 2, read_cycle));
        remote_read.push(ev("disconnect"));

        let job = vec![
            ev("submit job"),
            ev("schedule job"),
            rep(1, 3, vec![ev("heartbeat")]),
            choice(vec![
                branch(1.0, false, vec![ev("job done")]),
                branch(1.0, true, vec![ev("job retry"), ev("heartbeat"), ev("job done")]),
            ]),
        ];

        let t = |name: &str, body: Vec<Element>| Template { name: name.into(), weight: if name == "block" { 3.0 } else { 1.0 }, body };
        let rule = |cause: &str, effects: &[&str], closer: &str| CausalRule {
            cause: cause.into(),
            effects: effects.iter().map(|s| s.to_string()).collect(),
            closer: Some(closer.into()),
        };
        GrammarSpec {
            templates: vec![
                t("file_a", file_a),
                t("file_c", file_c),
                t("block", block),
                t("login", login),
                t("remote_read", remote_read),
                t("job", job),
            ],
            causal: vec![
                rule("open A", &["read A", "close A"], "close A"),
                rule("open B", &["read B", "close B"], "close B"),
                rule("open C", &["write C", "flush C", "sync C", "truncate C", "close C"], "close C"),
                CausalRule {
                    cause: "allocateBlock".into(),
                    effects: ["Receiving block", "Received block", "addStoredBlock", "PacketResponder terminating"]
                        .iter()
                        .map(|s| s.to_string())
                        .collect(),
                    closer: None,
                },
                CausalRule { cause: "Receiving block".into(), effects: vec!["Received block".into()], closer: None },
                CausalRule { cause: "Received block".into(), effects: vec!["addStoredBlock".into()], closer: None },
                rule("connect", &["auth ok", "query", "auth refresh", "disconnect"], "disconnect"),
                rule("submit job", &["schedule job", "heartbeat", "job retry", "job done"], "job done"),
            ],
            anomaly_ops: vec![AnomalyOp::DropCause, AnomalyOp::EffectWithoutCause, AnomalyOp::OutOfOrderSwap],
            rare_variant_weight: 0.02,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keyset::{build_vocabulary, Granularity, KeyDeriver};
    use crate::sequencer::assemble_sessions;

    fn keys(evs: &[GenEvent]) -> Vec<&str> {
        evs.iter().map(|e| e.key.as_str()).collect()
    }

    fn contains(hay: &[&str], needle: &[&str]) -> bool {
        hay.windows(needle.len()).any(|w| w == needle)
    }

    #[test]
    fn same_seed_same_corpus() {
        let g = GrammarSpec::desk(7);
        let a = generate_corpus(&g, 200, 20).unwrap();
        let b = generate_corpus(&g, 200, 20).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = generate_corpus(&GrammarSpec::desk(8), 200, 20).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn counts_and_labels() {
        let s = generate_corpus(&GrammarSpec::desk(1), 300, 40).unwrap();
        assert_eq!(s.iter().filter(|x| x.label == Label::Normal).count(), 300);
        assert_eq!(s.iter().filter(|x| x.label == Label::Abnormal).count(), 40);
        let ids: HashSet<_> = s.iter().map(|x| &x.session_id).collect();
        assert_eq!(ids.len(), 340);
        assert!(generate_corpus(&GrammarSpec::desk(1), 0, 0).unwrap().is_empty());
    }

    #[test]
    fn label_soundness() {
        let g = GrammarSpec::desk(3);
        for s in generate_corpus(&g, 500, 100).unwrap() {
            assert_eq!(violates_causality(&s.events, &g.causal), s.label == Label::Abnormal, "{:?}", keys(&s.events));
        }
    }

    #[test]
    fn no_ops_with_abnormal_is_error() {
        let mut g = GrammarSpec::desk(0);
        g.anomaly_ops.clear();
        assert!(generate_corpus(&g, 5, 1).is_err());
        assert_eq!(generate_corpus(&g, 5, 0).unwrap().len(), 5);
    }

    #[test]
    fn drop_cause_yields_read_without_open() {
        let g = GrammarSpec::desk(11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ev = |k: &str| GenEvent { key: k.into(), attrs: None };
        let normal: Vec<GenEvent> =
            ["open A", "read A", "read A", "close A", "open A", "read A", "close A"].iter().map(|k| ev(k)).collect();
        let mut found = false;
        for _ in 0..50 {
            let m = g.mutate(&normal, AnomalyOp::DropCause, &mut rng).unwrap();
            assert!(violates_causality(&m, &g.causal));
            found |= contains(&keys(&m), &["read A", "read A", "close A", "read A"]);
        }
        assert!(found);
    }

    #[test]
    fn rare_variant_opens_b_mid_read() {
        let g = GrammarSpec::desk(2);
        let corpus = generate_corpus(&g, 3000, 0).unwrap();
        let rare: Vec<_> = corpus.iter().filter(|s| s.rare_variant && s.template == "file_a").collect();
        assert!(!rare.is_empty());
        assert!(rare.iter().any(|s| keys(&s.events).starts_with(&["open A", "read A", "read A", "open B"])));
        assert!(rare.iter().all(|s| !violates_causality(&s.events, &g.causal)));
        let share = corpus.iter().filter(|s| s.rare_variant).count() as f64 / corpus.len() as f64;
        assert!(share > 0.01 && share < 0.04, "{share}");
    }

    #[test]
    fn ranges_bind_within_bucket() {
        let g = GrammarSpec::desk(4);
        for s in generate_corpus(&g, 300, 0).unwrap().iter().filter(|s| s.template == "block") {
            let sizes: Vec<i64> = s.events.iter().filter_map(|e| e.attrs.as_ref()?.size_bytes).collect();
            assert!(sizes.len() >= 3);
            assert!(sizes.iter().all(|&x| x == sizes[0]));
            assert!(sizes[0] >= 0 && sizes[0] < 70 * MIB);
        }
    }

    #[test]
    fn vocabulary_size_is_desk_scale() {
        let corpus = generate_corpus(&GrammarSpec::desk(9), 4000, 0).unwrap();
        let recs = to_records(&corpus);
        let ks = build_vocabulary(&recs, &KeyDeriver::new(Granularity::K1)).unwrap();
        assert!((25..=50).contains(&ks.v()), "{}", ks.v());
    }

    #[test]
    fn grammar_json_round_trip() {
        let g = GrammarSpec::desk(5);
        let back: GrammarSpec = serde_json::from_str(&serde_json::to_string(&g).unwrap()).unwrap();
        assert_eq!(back, g);
        let mut bad = g.clone();
        bad.rare_variant_weight = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = g;
        bad.templates[0].weight = -1.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn stats_partition() {
        let ks = KeySet::from_keys(
            Granularity::K0,
            ["a", "b", "c"].iter().map(|k| crate::keyset::EventKey::new(k).unwrap()).collect(),
        )
        .unwrap();
        let s = |id: &str, ev: &[usize], l: Label| Session { session_id: id.into(), event_ids: ev.to_vec(), label: Some(l) };
        let one = corpus_stats(&[s("x", &[0, 1, 2, 0], Label::Normal)], &ks, 3).unwrap();
        assert_eq!(one.always_normal, one.distinct_windows);
        assert_eq!(one.key_counts[0], 2);
        let two = corpus_stats(&[s("x", &[0], Label::Normal), s("y", &[0], Label::Abnormal)], &ks, 3).unwrap();
        assert_eq!((two.nondeterministic, two.always_normal, two.always_abnormal), (1, 0, 0));
    }

    #[test]
    fn records_assemble_back() {
        let corpus = generate_corpus(&GrammarSpec::desk(6), 50, 5).unwrap();
        let recs = to_records(&corpus);
        let d = KeyDeriver::new(Granularity::K1);
        let ks = build_vocabulary(&recs, &d).unwrap();
        let sessions = assemble_sessions(&recs, &ks, &d).unwrap();
        assert_eq!(sessions.len(), 55);
        for (g, s) in corpus.iter().zip(&sessions) {
            assert_eq!(g.session_id, s.session_id);
            assert_eq!(g.events.len(), s.event_ids.len());
        }
    }
}
