//! Emotion recognition in conversation: identity-masked attention, a
//! dialogue GRU with interaction decay, and a skip-chain CRF over dyadic
//! segments.

pub mod cli;
pub mod conversation;
pub mod crf;
pub mod diagru;
pub mod error;
pub mod gradcheck;
pub mod immha;
pub mod io;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod optim;
pub(crate) mod params;
pub mod synth;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
