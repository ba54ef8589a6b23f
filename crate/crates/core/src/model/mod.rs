//! Tokenizer, frozen encoder backbone and per-task classification heads.

pub mod backbone;
pub mod head;
pub mod vocab;

pub use backbone::{Backbone, BackboneConfig, BackboneVars, Encoded, EncoderLayer, Injection, LoraDelta, PrefixKv};
pub use head::{Head, HeadVars};
pub use vocab::{TokenSeq, Vocab, CLS_ID, PAD_ID, UNK_ID};
