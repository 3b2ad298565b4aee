//! Line-delimited record and label files.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keyset::RawEventRecord;
use crate::sequencer::Label;

/// Reads one JSON object per non-blank line.
pub fn read_jsonl<T: DeserializeOwned, R: Read>(reader: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| Error::BadRecord(format!("line {}: {e}", n + 1)))?;
        out.push(v);
    }
    Ok(out)
}

pub fn write_jsonl<'a, T: Serialize + 'a, W: Write>(
    mut writer: W,
    items: impl IntoIterator<Item = &'a T>,
) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut writer, item)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(reader: R) -> Result<Vec<RawEventRecord>> {
    let recs: Vec<RawEventRecord> = read_jsonl(reader)?;
    for r in &recs {
        r.validate()?;
    }
    Ok(recs)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelLine {
    pub session_id: String,
    pub label: Label,
}

pub fn read_labels<R: Read>(reader: R) -> Result<BTreeMap<String, Label>> {
    let lines: Vec<LabelLine> = read_jsonl(reader)?;
    let mut map = BTreeMap::new();
    for l in lines {
        if map.insert(l.session_id.clone(), l.label).is_some() {
            return Err(Error::BadRecord(format!("duplicate label for session {}", l.session_id)));
        }
    }
    Ok(map)
}

pub fn write_labels<W: Write>(writer: W, labels: &[LabelLine]) -> Result<()> {
    write_jsonl(writer, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keyset::Attrs;

    #[test]
    fn reads_records_with_and_without_attrs() {
        let text = r#"{"session_id":"b1","ts":3,"key":"Received block","attrs":{"size_bytes":10,"src_ip":"10.0.0.1"}}

{"session_id":"b1","ts":4,"key":"close"}
"#;
        let recs = read_records(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].attrs.as_ref().unwrap().size_bytes, Some(10));
        assert_eq!(recs[1].attrs, None);
    }

    #[test]
    fn rejects_unknown_attr_and_bad_ip() {
        let text = r#"{"session_id":"b1","ts":3,"key":"x","attrs":{"colour":"red"}}"#;
        assert!(read_records(text.as_bytes()).is_err());
        let text = r#"{"session_id":"b1","ts":3,"key":"x","attrs":{"src_ip":"300.1.1.1"}}"#;
        assert!(matches!(read_records(text.as_bytes()), Err(Error::BadIp(_))));
    }

    #[test]
    fn record_lines_round_trip() {
        let recs = vec![RawEventRecord {
            session_id: "s".into(),
            ts: 1,
            key: "open A".into(),
            attrs: Some(Attrs { filepath: Some("/a".into()), ..Default::default() }),
        }];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &recs).unwrap();
        assert_eq!(read_records(buf.as_slice()).unwrap(), recs);
    }

    #[test]
    fn labels_reject_duplicates() {
        let text = "{\"session_id\":\"a\",\"label\":\"normal\"}\n{\"session_id\":\"a\",\"label\":\"abnormal\"}\n";
        assert!(read_labels(text.as_bytes()).is_err());
    }
}
