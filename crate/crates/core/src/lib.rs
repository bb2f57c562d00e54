//! Zero-shot dual-learning machine translation at desk scale.
//!
//! A single multilingual encoder-decoder, steered by target-language tags, is
//! trained on pivot pairs and then improved on an unseen pair from monolingual
//! text alone: sampled translations are rewarded by a frozen language model
//! (fluency) and by back-translation likelihood (reconstruction), and the model
//! is updated with a batch-baselined policy gradient.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datagen;
pub mod dualtrain;
mod error;
pub mod evalkit;
pub mod langmodel;
pub mod nn;
pub mod numcore;
pub mod tokenizer;
pub mod translator;

pub use datagen::{Corpus, SyntheticSpec};
pub use dualtrain::{DualConfig, RewardRecord};
pub use evalkit::{BleuReport, EvalMatrix};
pub use langmodel::{LanguageModel, LmConfig};
pub use numcore::{NumError, ParamStore, Tape, Tensor};
pub use error::{Error, Result};
pub use tokenizer::{MergeTable, Vocab};
pub use translator::{NmtConfig, TaggedSentence, Translator};
