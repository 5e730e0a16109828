//! Core of the `webcurate` toolkit: everything that does not need a browser or
//! a network stack.

pub mod css;
pub mod curate;
pub mod dom;
pub mod eval;
pub mod exec;
pub mod html;
pub mod ingest;
pub mod layout;
pub mod manifest;
pub mod purify;
pub mod quality;
pub mod safety;
pub mod selector;
pub mod service;
pub mod summary;
pub mod tokenizer;
pub mod warc;

pub use dom::{parse_tag_tree, tree_bleu, CodeStats, TagTree};
pub use exec::Mode;
pub use summary::MeanStd;
pub use tokenizer::{Gpt2Tokenizer, TokenCounter};
