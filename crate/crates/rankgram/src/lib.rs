//! Structured inference for HMMs and PCFGs with factored parameters.
//!
//! The transition factors of an HMM (or the binary-rule tensor of a PCFG)
//! are stored as a sum of rank-many outer products. Inference then has three
//! interchangeable routes, all computing the same sentence probabilities:
//!
//! * dense dynamic programming on the reconstructed tensor,
//! * low-rank dynamic programming through the factor matrices,
//! * rank-space dynamic programming on a compiled model whose state
//!   variables have been marginalized out once, up front.
//!
//! The rank-space route is the cheap one when the rank is smaller than the
//! state count: the forward pass costs O(n r^2) and the inside pass
//! O(n^3 r + n^2 r^2). Brute-force enumeration oracles, span-marginal
//! decoding, a gradient trainer, and a wall-clock scaling harness round out
//! the crate. Start with the `examples/` directory for runnable tours.

pub mod bench;
pub mod corpus;
pub mod error;
pub mod hmm;
pub mod io;
pub mod logspace;
pub mod model;
pub mod oracle;
pub mod pcfg;
pub mod train;

pub use error::{Error, Result};
