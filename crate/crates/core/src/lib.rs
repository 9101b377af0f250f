//! Per-author causal language models as a stylometric instrument.
//!
//! One small decoder-only transformer is trained from scratch on each
//! author's books; cross-entropy on held-out text then drives attribution,
//! pairwise stylometric distances and ablation studies.

pub mod tensor;
pub mod model;
pub mod tokenizer;
pub mod corpus;
pub mod util;
pub mod ablation;
pub mod train;
pub mod stats;
pub mod distance;
pub mod synthetic;
pub mod experiment;
