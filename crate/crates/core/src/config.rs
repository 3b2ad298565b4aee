//! Run configuration: one versioned TOML document, unknown fields rejected.

use serde::{Deserialize, Serialize};

use crate::autoencoder::{DablogConfig, TrainOptions};
use crate::critic::CriticConfig;
use crate::error::{invalid, Error, Result};
use crate::evaluation::parse_grid;
use crate::keyset::Granularity;
use crate::nn::AdamConfig;
use crate::persist::sha256_hex;
use crate::predictor::BaselineConfig;

pub const RUN_CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub seqlen: usize,
    pub granularity: Granularity,
    pub seed: u64,
    pub dablog: DablogSection,
    pub baseline: BaselineSection,
    pub train: TrainSection,
    pub critic: CriticSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DablogSection {
    pub epochs: usize,
    pub embed_dim: usize,
    pub encoder: Vec<usize>,
    pub decoder: Vec<usize>,
    pub interlayer_relu: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub epochs: usize,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub interlayer_relu: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub lr: f64,
    /// 0 disables clipping.
    pub clip_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticSection {
    pub theta_n: f64,
    /// When set, the threshold criterion replaces the rank criterion.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_p: Option<f64>,
    pub grid: String,
    pub skip_sentinels: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: RUN_CONFIG_VERSION,
            seqlen: 10,
            granularity: Granularity::K1,
            seed: 0,
            dablog: DablogSection::default(),
            baseline: BaselineSection::default(),
            train: TrainSection::default(),
            critic: CriticSection::default(),
        }
    }
}

impl Default for DablogSection {
    fn default() -> Self {
        let d = DablogConfig::default();
        DablogSection { epochs: 60, embed_dim: d.embed_dim, encoder: d.encoder, decoder: d.decoder, interlayer_relu: d.interlayer_relu }
    }
}

impl Default for BaselineSection {
    fn default() -> Self {
        let b = BaselineConfig::default();
        BaselineSection { epochs: 10, embed_dim: b.embed_dim, hidden: b.hidden, interlayer_relu: b.interlayer_relu }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainOptions::default();
        TrainSection { batch_size: t.batch_size, lr: t.adam.lr, clip_norm: t.clip_norm.unwrap_or(0.0) }
    }
}

impl Default for CriticSection {
    fn default() -> Self {
        CriticSection { theta_n: 9.0, theta_p: None, grid: "1:100:1".into(), skip_sentinels: true }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Format(e.to_string().trim().replace('\n', " ")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != RUN_CONFIG_VERSION {
            return Err(invalid(format!("config version {} unsupported", self.version)));
        }
        self.dablog_config().validate()?;
        self.baseline_config().validate()?;
        self.dablog_train_options().validate()?;
        self.baseline_train_options().validate()?;
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return Err(invalid("lr must be positive"));
        }
        if !(self.train.clip_norm >= 0.0) {
            return Err(invalid("clip_norm must be non-negative"));
        }
        self.critic_config().validate()?;
        CriticConfig::rank(self.critic.theta_n).validate()?;
        parse_grid(&self.critic.grid)?;
        Ok(())
    }

    pub fn dablog_config(&self) -> DablogConfig {
        DablogConfig {
            embed_dim: self.dablog.embed_dim,
            encoder: self.dablog.encoder.clone(),
            decoder: self.dablog.decoder.clone(),
            interlayer_relu: self.dablog.interlayer_relu,
            seqlen: self.seqlen,
        }
    }

    pub fn baseline_config(&self) -> BaselineConfig {
        BaselineConfig {
            embed_dim: self.baseline.embed_dim,
            hidden: self.baseline.hidden.clone(),
            interlayer_relu: self.baseline.interlayer_relu,
            seqlen: self.seqlen,
        }
    }

    pub fn dablog_train_options(&self) -> TrainOptions {
        self.train_options(self.dablog.epochs)
    }

    pub fn baseline_train_options(&self) -> TrainOptions {
        self.train_options(self.baseline.epochs)
    }

    fn train_options(&self, epochs: usize) -> TrainOptions {
        TrainOptions {
            epochs,
            batch_size: self.train.batch_size,
            seed: self.seed,
            adam: AdamConfig { lr: self.train.lr, ..AdamConfig::default() },
            clip_norm: (self.train.clip_norm > 0.0).then_some(self.train.clip_norm),
        }
    }

    pub fn critic_config(&self) -> CriticConfig {
        let mut c = match self.critic.theta_p {
            Some(p) => CriticConfig::threshold(p),
            None => CriticConfig::rank(self.critic.theta_n),
        };
        c.skip_sentinels = self.critic.skip_sentinels;
        c
    }

    /// sha256 of the canonical JSON form; identical configs hash identically however they were written.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }
}
