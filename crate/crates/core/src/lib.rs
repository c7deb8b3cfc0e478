//! Positioning Cramér–Rao bound and hybrid analog/digital beamforming
//! optimization for a multi-band holographic-surface base station.

pub mod bench;
pub mod channel;
pub mod error;
pub mod fisher;
pub mod grad;
pub mod harness;
pub mod linx;
pub mod opt;
pub mod scene;

pub use error::{Error, Result};
