//! GradSelect: gradient-selected augmentation for desk-scale known-item
//! retrieval.
//!
//! The crate trains a small dual encoder over word-level tokens and builds
//! two augmentation stages on top of it:
//!
//! - **Circumlocution augmentation** — per-token importance scores from the
//!   squared norm of the loss gradient at each input embedding row select a
//!   band of tokens to noise (deletion or Gaussian replacement), trained
//!   with a consistency objective (cross-entropy plus a Jensen-Shannon
//!   term).
//! - **Target-item augmentation** — queries whose gold item falls outside
//!   the teacher's top-k are given the teacher's top-k items as extra
//!   positives; a student is re-trained from the initial parameters on the
//!   union and ensembled with the teacher.
//!
//! Supporting machinery: a BM25 baseline, rank metrics (nDCG/MRR/recall),
//! diagnostic studies (sentence deletion, gradient-interval ablation,
//! augmentation relevance/diversity), and a synthetic anomia-style
//! benchmark generator with ground-truth token labels.
//!
//! Start with the runnable examples (`cargo run --example ...`); the
//! `gradselect` binary wraps the same library functions behind subcommands.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod gradaug;
pub mod itemaug;
pub mod lexical;
pub mod metrics;
pub mod pipeline;
pub mod synthbench;
pub mod util;

pub use error::{Error, Result};
