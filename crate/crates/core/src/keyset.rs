//! Event-key vocabulary: add-on key derivation, reserved tokens, ids and one-hot encoding.
//!
//! Keys at granularity `K0` are the base keys as they appear in the input.
//! `K1` and `K2` re-attach add-on strings describing the file path, the
//! transfer size bucket and the IP relationship of an event, in that order.
//! `K2` differs from `K1` only in the IP prefix length.

use std::collections::HashMap;
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use ndarray::Array2;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};

pub const BOS_TEXT: &str = "<BOS>";
pub const EOS_TEXT: &str = "<EOS>";
pub const UNK_TEXT: &str = "<UNK>";

/// Number of reserved ids appended after the real keys.
pub const NUM_RESERVED: usize = 3;

/// One mebibyte. Size buckets are 10 MiB wide.
const MIB: i64 = 1 << 20;
const SIZE_BUCKETS: i64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Granularity {
    #[default]
    K0,
    K1,
    K2,
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "K0" | "k0" => Ok(Granularity::K0),
            "K1" | "k1" => Ok(Granularity::K1),
            "K2" | "k2" => Ok(Granularity::K2),
            other => Err(invalid(format!("unknown granularity {other:?}"))),
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Granularity::K0 => "K0",
            Granularity::K1 => "K1",
            Granularity::K2 => "K2",
        };
        f.write_str(s)
    }
}

/// A string template naming one kind of discrete event.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct EventKey(String);

impl EventKey {
    pub fn new(text: impl AsRef<str>) -> Result<Self> {
        let t = text.as_ref().trim();
        if t.is_empty() {
            return Err(Error::BadRecord("empty event key".into()));
        }
        Ok(EventKey(t.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for EventKey {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        EventKey::new(s)
    }
}

impl From<EventKey> for String {
    fn from(k: EventKey) -> String {
        k.0
    }
}

impl fmt::Display for EventKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Optional structured attributes of a raw event.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Attrs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filepath: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_bytes: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src_ip: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst_ip: Option<String>,
}

impl Attrs {
    pub fn is_empty(&self) -> bool {
        self.filepath.is_none() && self.size_bytes.is_none() && self.src_ip.is_none() && self.dst_ip.is_none()
    }
}

/// One ingested log entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEventRecord {
    pub session_id: String,
    pub ts: i64,
    pub key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attrs: Option<Attrs>,
}

impl RawEventRecord {
    pub fn validate(&self) -> Result<()> {
        if self.session_id.is_empty() {
            return Err(Error::BadRecord("empty session_id".into()));
        }
        if self.key.trim().is_empty() {
            return Err(Error::BadRecord(format!("empty key in session {}", self.session_id)));
        }
        if let Some(a) = &self.attrs {
            validate_attrs(a)?;
        }
        Ok(())
    }
}

fn validate_attrs(a: &Attrs) -> Result<()> {
    if let Some(sz) = a.size_bytes {
        if sz < 0 {
            return Err(Error::BadSize(sz));
        }
    }
    for ip in [&a.src_ip, &a.dst_ip].into_iter().flatten() {
        parse_ip(ip)?;
    }
    Ok(())
}

fn parse_ip(s: &str) -> Result<[u8; 4]> {
    Ipv4Addr::from_str(s).map(|a| a.octets()).map_err(|_| Error::BadIp(s.to_string()))
}

/// Ordered regex → template lookup for file-path add-ons. First match wins.
#[derive(Debug, Clone, Default)]
pub struct FilepathTable {
    rules: Vec<(Regex, String)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilepathRule {
    pub pattern: String,
    pub template: String,
}

/// Add-on used when a path matches no rule.
pub const UNMATCHED_PATH: &str = "*";

impl FilepathTable {
    pub fn new(rules: &[FilepathRule]) -> Result<Self> {
        let rules = rules
            .iter()
            .map(|r| Ok((Regex::new(&r.pattern)?, r.template.clone())))
            .collect::<Result<Vec<_>>>()?;
        Ok(FilepathTable { rules })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rules: Vec<FilepathRule> = serde_json::from_str(text)?;
        Self::new(&rules)
    }

    pub fn template_for(&self, path: &str) -> &str {
        self.rules
            .iter()
            .find(|(re, _)| re.is_match(path))
            .map(|(_, t)| t.as_str())
            .unwrap_or(UNMATCHED_PATH)
    }
}

/// Size add-on, e.g. `of size 20-30 MB`. Sizes of 60 MiB and above share the top bucket.
pub fn size_addon(size_bytes: i64) -> Result<String> {
    if size_bytes < 0 {
        return Err(Error::BadSize(size_bytes));
    }
    let bucket = (size_bytes / (10 * MIB)).min(SIZE_BUCKETS - 1);
    let lo = bucket * 10;
    Ok(format!("of size {}-{} MB", lo, lo + 10))
}

fn ip_prefix(octets: [u8; 4], g: Granularity) -> String {
    match g {
        Granularity::K2 => {
            let lead = octets[2].to_string().chars().next().unwrap_or('0');
            format!("{}.{}.{}*", octets[0], octets[1], lead)
        }
        _ => format!("{}.{}.*", octets[0], octets[1]),
    }
}

fn ip_addon(src: Option<&str>, dst: Option<&str>, g: Granularity) -> Result<Option<String>> {
    Ok(match (src, dst) {
        (Some(s), Some(d)) => {
            let (so, dso) = (parse_ip(s)?, parse_ip(d)?);
            if so == dso {
                Some("within the localhost".to_string())
            } else if ip_prefix(so, g) == ip_prefix(dso, g) {
                Some("within the subnet".to_string())
            } else {
                Some("between subnets".to_string())
            }
        }
        (Some(s), None) => Some(format!("from {}", ip_prefix(parse_ip(s)?, g))),
        (None, Some(d)) => Some(format!("to {}", ip_prefix(parse_ip(d)?, g))),
        (None, None) => None,
    })
}

/// Derives event keys from base keys and attributes at a fixed granularity.
#[derive(Debug, Clone, Default)]
pub struct KeyDeriver {
    pub granularity: Granularity,
    pub filepaths: FilepathTable,
}

impl KeyDeriver {
    pub fn new(granularity: Granularity) -> Self {
        KeyDeriver { granularity, filepaths: FilepathTable::default() }
    }

    pub fn with_filepaths(mut self, table: FilepathTable) -> Self {
        self.filepaths = table;
        self
    }

    pub fn derive(&self, base_key: &str, attrs: Option<&Attrs>) -> Result<String> {
        let base = base_key.trim();
        let Some(a) = attrs else {
            return Ok(base.to_string());
        };
        validate_attrs(a)?;
        if self.granularity == Granularity::K0 {
            return Ok(base.to_string());
        }
        let mut out = base.to_string();
        if let Some(path) = &a.filepath {
            out.push(' ');
            out.push_str(self.filepaths.template_for(path));
        }
        if let Some(sz) = a.size_bytes {
            out.push(' ');
            out.push_str(&size_addon(sz)?);
        }
        if let Some(ip) = ip_addon(a.src_ip.as_deref(), a.dst_ip.as_deref(), self.granularity)? {
            out.push(' ');
            out.push_str(&ip);
        }
        Ok(out)
    }

    pub fn derive_record(&self, r: &RawEventRecord) -> Result<String> {
        self.derive(&r.key, r.attrs.as_ref())
    }
}

/// Key derivation with an empty file-path table.
pub fn derive_addon_key(base_key: &str, attrs: &Attrs, granularity: Granularity) -> Result<String> {
    KeyDeriver::new(granularity).derive(base_key, Some(attrs))
}

/// Vocabulary of real keys followed by BOS, EOS and UNK.
#[derive(Debug, Clone, PartialEq)]
pub struct KeySet {
    granularity: Granularity,
    keys: Vec<EventKey>,
    id_of: HashMap<String, usize>,
}

pub const KEYSET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeySetDoc {
    pub version: u32,
    pub granularity: Granularity,
    pub keys: Vec<EventKey>,
}

fn is_reserved_text(s: &str) -> bool {
    matches!(s, BOS_TEXT | EOS_TEXT | UNK_TEXT)
}

impl KeySet {
    pub fn from_keys(granularity: Granularity, keys: Vec<EventKey>) -> Result<Self> {
        let mut id_of = HashMap::with_capacity(keys.len());
        for (i, k) in keys.iter().enumerate() {
            if is_reserved_text(k.as_str()) {
                return Err(Error::BadRecord(format!("key collides with reserved token {k}")));
            }
            if id_of.insert(k.as_str().to_string(), i).is_some() {
                return Err(Error::BadRecord(format!("duplicate key {k}")));
            }
        }
        Ok(KeySet { granularity, keys, id_of })
    }

    /// Number of real keys.
    pub fn v(&self) -> usize {
        self.keys.len()
    }

    /// Real keys plus the three reserved tokens.
    pub fn dim(&self) -> usize {
        self.keys.len() + NUM_RESERVED
    }

    pub fn bos(&self) -> usize {
        self.v()
    }

    pub fn eos(&self) -> usize {
        self.v() + 1
    }

    pub fn unk(&self) -> usize {
        self.v() + 2
    }

    pub fn is_reserved(&self, id: usize) -> bool {
        id >= self.v()
    }

    pub fn is_sentinel(&self, id: usize) -> bool {
        id == self.bos() || id == self.eos()
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn keys(&self) -> &[EventKey] {
        &self.keys
    }

    /// Total lookup: unseen keys map to UNK.
    pub fn key_id(&self, key: &str) -> usize {
        match key {
            BOS_TEXT => self.bos(),
            EOS_TEXT => self.eos(),
            UNK_TEXT => self.unk(),
            k => self.id_of.get(k.trim()).copied().unwrap_or(self.unk()),
        }
    }

    pub fn text(&self, id: usize) -> Option<&str> {
        if id < self.v() {
            Some(self.keys[id].as_str())
        } else if id == self.bos() {
            Some(BOS_TEXT)
        } else if id == self.eos() {
            Some(EOS_TEXT)
        } else if id == self.unk() {
            Some(UNK_TEXT)
        } else {
            None
        }
    }

    pub fn to_doc(&self) -> KeySetDoc {
        KeySetDoc { version: KEYSET_VERSION, granularity: self.granularity, keys: self.keys.clone() }
    }

    pub fn from_doc(doc: KeySetDoc) -> Result<Self> {
        if doc.version != KEYSET_VERSION {
            return Err(Error::Format(format!("keyset version {} unsupported", doc.version)));
        }
        Self::from_keys(doc.granularity, doc.keys)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_doc())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_doc(serde_json::from_str(text)?)
    }

    /// SHA-256 over the compact serialized document.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(&self.to_doc()).expect("keyset serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Builds the vocabulary from every derived key with nonzero occurrence, in first-occurrence order.
pub fn build_vocabulary<'a, I>(records: I, deriver: &KeyDeriver) -> Result<KeySet>
where
    I: IntoIterator<Item = &'a RawEventRecord>,
{
    let mut keys = Vec::new();
    let mut seen = HashMap::new();
    let mut any = false;
    for r in records {
        any = true;
        r.validate()?;
        let k = EventKey::new(deriver.derive_record(r)?)?;
        if !seen.contains_key(k.as_str()) {
            seen.insert(k.as_str().to_string(), keys.len());
            keys.push(k);
        }
    }
    if !any {
        return Err(Error::EmptyCorpus);
    }
    KeySet::from_keys(deriver.granularity, keys)
}

/// One-hot rows of width `dim`.
pub fn onehot_dim(dim: usize, ids: &[usize]) -> Result<Array2<f64>> {
    let mut m = Array2::zeros((ids.len(), dim));
    for (r, &id) in ids.iter().enumerate() {
        if id >= dim {
            return Err(Error::IdOutOfRange { id, dim });
        }
        m[[r, id]] = 1.0;
    }
    Ok(m)
}

pub fn onehot(ks: &KeySet, ids: &[usize]) -> Result<Array2<f64>> {
    onehot_dim(ks.dim(), ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(sid: &str, ts: i64, key: &str, attrs: Option<Attrs>) -> RawEventRecord {
        RawEventRecord { session_id: sid.into(), ts, key: key.into(), attrs }
    }

    #[test]
    fn single_key_corpus() {
        let recs = vec![rec("a", 0, "open", None), rec("a", 1, "open", None)];
        let ks = build_vocabulary(&recs, &KeyDeriver::new(Granularity::K0)).unwrap();
        assert_eq!(ks.v(), 1);
        assert_eq!(ks.key_id("open"), 0);
        assert_eq!((ks.bos(), ks.eos(), ks.unk()), (1, 2, 3));
        assert_eq!(ks.key_id(BOS_TEXT), 1);
        assert_eq!(ks.key_id(EOS_TEXT), 2);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let recs: Vec<RawEventRecord> = vec![];
        let err = build_vocabulary(&recs, &KeyDeriver::new(Granularity::K0)).unwrap_err();
        assert_eq!(err.to_string(), "empty corpus");
    }

    #[test]
    fn first_occurrence_order() {
        let recs = vec![rec("a", 0, "b", None), rec("a", 1, "a", None), rec("b", 0, "b", None)];
        let ks = build_vocabulary(&recs, &KeyDeriver::new(Granularity::K0)).unwrap();
        assert_eq!(ks.keys()[0].as_str(), "b");
        assert_eq!(ks.keys()[1].as_str(), "a");
    }

    #[test]
    fn received_block_k1() {
        let attrs = Attrs { size_bytes: Some(25 * MIB), src_ip: Some("10.250.11.32".into()), ..Default::default() };
        let k = derive_addon_key("Received block", &attrs, Granularity::K1).unwrap();
        assert_eq!(k, "Received block of size 20-30 MB from 10.250.*");
    }

    #[test]
    fn k2_prefix_keeps_leading_digit() {
        let attrs = Attrs { src_ip: Some("10.251.73.9".into()), ..Default::default() };
        let k = derive_addon_key("Received block", &attrs, Granularity::K2).unwrap();
        assert_eq!(k, "Received block from 10.251.7*");
    }

    #[test]
    fn k0_is_identity() {
        assert_eq!(derive_addon_key("ask to delete", &Attrs::default(), Granularity::K0).unwrap(), "ask to delete");
        let attrs = Attrs { size_bytes: Some(5), ..Default::default() };
        assert_eq!(derive_addon_key("ask to delete", &attrs, Granularity::K0).unwrap(), "ask to delete");
    }

    #[test]
    fn ip_relationships() {
        let both = |s: &str, d: &str, g| {
            let a = Attrs { src_ip: Some(s.into()), dst_ip: Some(d.into()), ..Default::default() };
            derive_addon_key("Receiving block", &a, g).unwrap()
        };
        assert_eq!(both("10.1.2.3", "10.1.2.3", Granularity::K1), "Receiving block within the localhost");
        assert_eq!(both("10.1.2.3", "10.1.9.9", Granularity::K1), "Receiving block within the subnet");
        assert_eq!(both("10.1.2.3", "10.2.2.3", Granularity::K1), "Receiving block between subnets");
        // same /16, different leading digit of the third group
        assert_eq!(both("10.1.2.3", "10.1.93.3", Granularity::K2), "Receiving block between subnets");
        let dst = Attrs { dst_ip: Some("10.251.7.1".into()), ..Default::default() };
        assert_eq!(derive_addon_key("Sending", &dst, Granularity::K1).unwrap(), "Sending to 10.251.*");
    }

    #[test]
    fn addons_compose_in_order() {
        let table = FilepathTable::new(&[FilepathRule {
            pattern: r"^/mnt/hadoop/mapred/system/job_\d+/job\.jar$".into(),
            template: "/mnt/hadoop/mapred/system/job_*/job.jar".into(),
        }])
        .unwrap();
        let d = KeyDeriver::new(Granularity::K1).with_filepaths(table);
        let a = Attrs {
            filepath: Some("/mnt/hadoop/mapred/system/job_2008/job.jar".into()),
            size_bytes: Some(0),
            src_ip: Some("10.250.1.1".into()),
            dst_ip: Some("10.250.2.2".into()),
        };
        assert_eq!(
            d.derive("allocateBlock", Some(&a)).unwrap(),
            "allocateBlock /mnt/hadoop/mapred/system/job_*/job.jar of size 0-10 MB within the subnet"
        );
        let other = Attrs { filepath: Some("/tmp/x".into()), ..Default::default() };
        assert_eq!(d.derive("allocateBlock", Some(&other)).unwrap(), "allocateBlock *");
    }

    #[test]
    fn malformed_inputs() {
        let a = Attrs { src_ip: Some("10.250.1".into()), ..Default::default() };
        assert!(matches!(derive_addon_key("x", &a, Granularity::K1), Err(Error::BadIp(_))));
        let a = Attrs { size_bytes: Some(-1), ..Default::default() };
        assert!(matches!(derive_addon_key("x", &a, Granularity::K1), Err(Error::BadSize(-1))));
    }

    #[test]
    fn size_buckets_are_total() {
        assert_eq!(size_addon(0).unwrap(), "of size 0-10 MB");
        assert_eq!(size_addon(10 * MIB - 1).unwrap(), "of size 0-10 MB");
        assert_eq!(size_addon(10 * MIB).unwrap(), "of size 10-20 MB");
        assert_eq!(size_addon(60 * MIB).unwrap(), "of size 60-70 MB");
        assert_eq!(size_addon(900 * MIB).unwrap(), "of size 60-70 MB");
    }

    #[test]
    fn unseen_key_maps_to_unk() {
        let recs = vec![rec("a", 0, "receiving 60-70 MB", None)];
        let ks = build_vocabulary(&recs, &KeyDeriver::new(Granularity::K0)).unwrap();
        assert_eq!(ks.key_id("receiving 70-80 MB"), ks.v() + 2);
    }

    #[test]
    fn reserved_text_rejected_as_real_key() {
        let recs = vec![rec("a", 0, "<BOS>", None)];
        assert!(build_vocabulary(&recs, &KeyDeriver::new(Granularity::K0)).is_err());
    }

    #[test]
    fn onehot_basics() {
        let ks = KeySet::from_keys(Granularity::K0, vec![EventKey::new("a").unwrap(), EventKey::new("b").unwrap()])
            .unwrap();
        let m = onehot(&ks, &[0]).unwrap();
        assert_eq!(m.row(0).to_vec(), vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        let m = onehot(&ks, &[ks.bos()]).unwrap();
        assert_eq!(m[[0, 2]], 1.0);
        assert!(onehot(&ks, &[5]).is_err());
    }

    #[test]
    fn keyset_json_round_trip() {
        let ks = KeySet::from_keys(Granularity::K1, vec![EventKey::new("a").unwrap(), EventKey::new("b c").unwrap()])
            .unwrap();
        let back = KeySet::from_json(&ks.to_json().unwrap()).unwrap();
        assert_eq!(back, ks);
        assert_eq!(back.fingerprint(), ks.fingerprint());
    }

    proptest! {
        #[test]
        fn derivation_is_deterministic(size in 0i64..(1 << 40), a in 0u8..=255, b in 0u8..=255, c in 0u8..=255) {
            let attrs = Attrs {
                size_bytes: Some(size),
                src_ip: Some(format!("{a}.{b}.{c}.1")),
                dst_ip: Some(format!("{a}.{b}.{c}.2")),
                ..Default::default()
            };
            for g in [Granularity::K0, Granularity::K1, Granularity::K2] {
                let x = derive_addon_key("k", &attrs, g).unwrap();
                let y = derive_addon_key("k", &attrs, g).unwrap();
                prop_assert_eq!(x, y);
            }
        }

        #[test]
        fn ids_round_trip(n in 1usize..40) {
            let keys: Vec<EventKey> = (0..n).map(|i| EventKey::new(format!("key {i}")).unwrap()).collect();
            let ks = KeySet::from_keys(Granularity::K0, keys).unwrap();
            for (i, k) in ks.keys().iter().enumerate() {
                prop_assert_eq!(ks.key_id(k.as_str()), i);
            }
        }

        #[test]
        fn onehot_argmax_matches(ids in proptest::collection::vec(0usize..7, 1..20)) {
            let m = onehot_dim(7, &ids).unwrap();
            for (r, &id) in ids.iter().enumerate() {
                let row = m.row(r);
                prop_assert_eq!(row.sum(), 1.0);
                let arg = row.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
                prop_assert_eq!(arg, id);
            }
        }
    }
}
