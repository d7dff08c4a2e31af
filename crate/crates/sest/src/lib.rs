//! Span-extraction question answering with structural embeddings of
//! syntactic trees.
//!
//! Per-token sequences drawn from constituency paths (SECT), dependency
//! children (SEDT), or bare POS tags are encoded into fixed-length vectors
//! and concatenated with word and character embeddings, feeding a
//! bidirectional-attention-flow span predictor. The crate also provides the
//! treebank readers, the reverse-mode autodiff the model trains with, a
//! synthetic corpus generator whose answers are syntactically determined,
//! EM/F1 evaluation, and confidence-sum ensembling.

pub mod attention;
pub mod autodiff;
pub mod data;
pub mod encoders;
pub mod eval;
pub mod extraction;
pub mod model;
pub mod treebank;
pub mod util;
