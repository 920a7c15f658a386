//! Attention-head importance analysis for many-to-one translation models.
//!
//! The crate computes per-head confidence, variance and coverage scores from
//! captured attention weights, ranks heads by those scores, by sequential
//! backward selection or at random, prunes heads by masking them at inference
//! time, scores the result with corpus BLEU and compares pruning curves with
//! Mann-Whitney U tests. A small trainable transformer stands in for a
//! production translation model.

pub mod bleu;
pub mod capture;
pub mod corpus;
pub mod error;
pub mod fingerprint;
pub mod heads;
pub mod metrics;
pub mod nmt;
pub mod ranking;
pub mod stats;

pub use capture::{validate_capture, AttentionCapture, AttentionMatrix, Violation};
pub use bleu::{bleu_drop, corpus_bleu, BleuScore};
pub use corpus::{ParallelCorpus, SentencePair, Token};
pub use error::{Error, Result};
pub use fingerprint::fingerprint;
pub use heads::{head_universe, AttnType, HeadId, HeadLayout, HeadMask};
pub use metrics::{MetricKind, MetricTable};
pub use ranking::{HeadRanking, PruneCurve};
pub use stats::{MwuResult, PolyFit};
