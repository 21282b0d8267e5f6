//! Adaptive local signal mixing (A-LIX) for temporal-difference learning from
//! pixel observations.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: a small double-precision tensor engine with a define-by-run
//!   reverse-mode tape.
//! * [`nn`]: convolutional encoders, MLPs, Adam and Polyak averaging.
//! * [`lix`]: the stochastic bilinear feature-mixing layer and the
//!   pad-and-crop random shift augmentation.
//! * [`metrics`]: local discontinuity, normalized discontinuity scores,
//!   Pearson correlation and sensitivity probes.
//! * [`dual`]: the dual-gradient controller adapting the mixing radius.
//! * [`env`]: the dot-reacher toy pixel environment.
//! * [`rl`]: replay, n-step returns, critic/actor updates and the offline
//!   evaluation/improvement protocol.
//! * [`harness`]: configuration, checkpoints, CSV/SVG output and experiment
//!   orchestration.

pub mod dual;
pub mod env;
pub mod error;
pub mod harness;
pub mod lix;
pub mod metrics;
pub mod nn;
pub mod rl;
pub mod tensor;

pub use error::{Error, Result};
