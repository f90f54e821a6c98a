//! Independent per-utterance softmax head; summed cross-entropy.

use crate::conversation::Conversation;
use crate::error::Result;
use crate::numerics::{log_sum_exp_unchecked, Matrix};

use super::{argmax, check_emissions, check_labels};

/// Summed cross-entropy and its gradient with respect to the emissions.
pub fn loss_and_gradient(conv: &Conversation, gold: &[usize], emissions: &Matrix) -> Result<(f64, Matrix)> {
    let k = check_emissions(conv, emissions)?;
    check_labels(gold, conv.len(), k)?;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(emissions.rows(), k);
    for (t, &y) in gold.iter().enumerate() {
        let row = emissions.row(t);
        let lse = log_sum_exp_unchecked(row);
        loss += lse - row[y];
        for (g, &s) in grad.row_mut(t).iter_mut().zip(row) {
            *g = (s - lse).exp();
        }
        grad[(t, y)] -= 1.0;
    }
    Ok((loss, grad))
}

pub fn probabilities(emissions: &Matrix) -> Matrix {
    let mut out = emissions.clone();
    for t in 0..out.rows() {
        let lse = log_sum_exp_unchecked(emissions.row(t));
        for v in out.row_mut(t) {
            *v = (*v - lse).exp();
        }
    }
    out
}

pub fn decode(emissions: &Matrix) -> Vec<usize> {
    (0..emissions.rows()).map(|t| argmax(emissions.row(t))).collect()
}
