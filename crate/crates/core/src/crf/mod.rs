//! Classification heads over per-utterance emission scores.
//!
//! * [`skip`]: speaker-aware skip-chain CRF with self and other transitions.
//! * [`chain`]: first-order linear-chain CRF, speaker-blind.
//! * [`softmax`]: independent per-utterance classification.

pub mod chain;
pub mod skip;
pub mod softmax;

use crate::conversation::Conversation;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub use chain::ChainPotentials;
pub use skip::{CrfGradients, CrfPotentials, DpTensors, ViterbiTables};

fn check_emissions(conv: &Conversation, emissions: &Matrix) -> Result<usize> {
    if emissions.rows() != conv.len() {
        return Err(Error::ShapeMismatch(format!(
            "emissions have {} rows for {} utterances",
            emissions.rows(),
            conv.len()
        )));
    }
    if emissions.cols() == 0 {
        return Err(Error::ShapeMismatch("emissions have no label columns".into()));
    }
    Ok(emissions.cols())
}

fn check_square(m: &Matrix, k: usize, what: &str) -> Result<()> {
    if m.shape() != (k, k) {
        return Err(Error::ShapeMismatch(format!(
            "{what} is {:?}, expected {k}x{k}",
            m.shape()
        )));
    }
    Ok(())
}

fn check_labels(labels: &[usize], len: usize, k: usize) -> Result<()> {
    if labels.len() != len {
        return Err(Error::LengthMismatch {
            golds: labels.len(),
            preds: len,
        });
    }
    match labels.iter().position(|&y| y >= k) {
        Some(t) => Err(Error::LabelOutOfRange(t)),
        None => Ok(()),
    }
}

/// Index of the maximum, smallest index on ties.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
