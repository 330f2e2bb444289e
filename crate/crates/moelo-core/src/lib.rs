//! Continual-learning laboratory for Wi-Fi fingerprint indoor localization.
//!
//! The crate couples a mixture-of-experts localizer (shared encoder, fixed
//! simplex gate anchors, one classifier head per spatial region) with a
//! synthetic fingerprint world so device-incremental, class-incremental, and
//! combined scenarios can be replayed deterministically end to end.

pub mod checkpoint;
pub mod continual;
pub mod error;
pub mod fingerprints;
pub mod scenarios;
pub mod etf;
pub mod model;
pub mod numkit;
pub mod seeds;

pub use error::{Error, Result};
pub use seeds::derive_seed;
