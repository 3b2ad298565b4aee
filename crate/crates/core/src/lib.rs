//! Sequence-reconstruction anomaly detection for discrete event logs.
//!
//! Pipeline: raw records → key derivation and vocabulary ([`keyset`]) → sessions and
//! sliding windows ([`sequencer`]) → a trained model ([`autoencoder`] or the
//! [`predictor`] baselines) → per-event ranks ([`detector`], [`critic`]) →
//! sequence-level metrics ([`evaluation`]).

pub mod autoencoder;
pub mod config;
pub mod critic;
pub mod datagen;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod keyset;
pub mod nn;
pub mod persist;
pub mod predictor;
pub mod records;
pub mod sequencer;

pub use autoencoder::{DablogConfig, DablogModel, DablogParams, TrainOptions};
pub use config::RunConfig;
pub use critic::{CriticConfig, CriticMode, EventScore, MergeMode, Verdict};
pub use datagen::{generate_corpus, GeneratedSession, GrammarSpec};
pub use detector::{Detector, SessionScores, VerdictLine};
pub use error::{Error, Result};
pub use evaluation::{ConfusionCounts, EvalReport, MetricReport, SweepPoint};
pub use keyset::{Attrs, EventKey, Granularity, KeyDeriver, KeySet, RawEventRecord};
pub use persist::ModelFile;
pub use predictor::{BaselineConfig, BaselineModel, FrequencyModel};
pub use sequencer::{Label, SequenceWindow, Session};
