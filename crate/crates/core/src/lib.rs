//! Expand-then-clarify engine for weakly supervised temporal grounding.
//!
//! A boundary predictor proposes a `(center, width)` window for a query in a
//! video. Frame captions collected before training let the proposal be
//! re-described and re-predicted ([`expand`]); the two proposals are tied by
//! mutual learning and sharpened by a proposal-level contrastive loss
//! ([`losses`]). Everything runs on a small reverse-mode tape ([`diff`]).

pub mod diff;
pub mod error;
pub mod eval;
pub mod expand;
pub mod io;
pub mod losses;
pub mod matchers;
pub mod model;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use types::*;
