//! Model file envelope and row-major array encoding.
//!
//! Arrays are written as `{"rows": r, "cols": c, "data": [...]}` with the data in
//! row-major order. Floats use the shortest representation that parses back to
//! the same bits, so a saved model reproduces its outputs exactly.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::{DablogConfig, DablogParams};
use crate::error::{Error, Result};
use crate::keyset::{KeySet, KeySetDoc};
use crate::predictor::{BaselineConfig, BaselineParams, FrequencyModel};

pub const MODEL_FILE_VERSION: u32 = 1;

pub mod mat {
    use ndarray::Array2;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Mat {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
        let (rows, cols) = m.dim();
        Mat { rows, cols, data: m.iter().copied().collect() }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
        let m = Mat::deserialize(d)?;
        Array2::from_shape_vec((m.rows, m.cols), m.data).map_err(serde::de::Error::custom)
    }
}

pub mod vec {
    use ndarray::Array1;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Array1<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.iter().copied().collect::<Vec<f64>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array1<f64>, D::Error> {
        Ok(Array1::from(Vec::<f64>::deserialize(d)?))
    }
}

/// Trained state of any supported detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model_kind", rename_all = "lowercase")]
pub enum ModelBody {
    Dablog { config: DablogConfig, params: DablogParams },
    Baseline { config: BaselineConfig, params: BaselineParams },
    Freq { model: FrequencyModel },
}

impl ModelBody {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelBody::Dablog { .. } => "dablog",
            ModelBody::Baseline { .. } => "baseline",
            ModelBody::Freq { .. } => "freq",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub version: u32,
    pub keyset_hash: String,
    pub keyset: KeySetDoc,
    pub model: ModelBody,
}

impl ModelFile {
    pub fn new(keyset: &KeySet, model: ModelBody) -> Self {
        ModelFile {
            version: MODEL_FILE_VERSION,
            keyset_hash: keyset.fingerprint(),
            keyset: keyset.to_doc(),
            model,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Parses and checks version and keyset hash.
    pub fn from_json(text: &str) -> Result<(KeySet, ModelBody)> {
        let f: ModelFile = serde_json::from_str(text)?;
        if f.version != MODEL_FILE_VERSION {
            return Err(Error::Format(format!("model file version {} unsupported", f.version)));
        }
        let ks = KeySet::from_doc(f.keyset)?;
        if ks.fingerprint() != f.keyset_hash {
            return Err(Error::Format("keyset hash does not match embedded keyset".into()));
        }
        Ok((ks, f.model))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
