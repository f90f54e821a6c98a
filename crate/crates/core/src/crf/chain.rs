//! First-order linear-chain CRF over adjacent utterances, ignoring speakers.

use crate::conversation::Conversation;
use crate::error::Result;
use crate::numerics::{log_sum_exp_unchecked, Matrix};

use super::{check_emissions, check_labels, check_square};

#[derive(Debug, Clone, PartialEq)]
pub struct ChainPotentials {
    pub emissions: Matrix,
    /// `K × K`, indexed `[y_{t-1}, y_t]`.
    pub trans: Matrix,
}

#[derive(Debug, Clone)]
pub struct ChainGradients {
    pub loss: f64,
    pub emissions: Matrix,
    pub trans: Matrix,
}

impl ChainPotentials {
    fn check(&self, conv: &Conversation) -> Result<usize> {
        let k = check_emissions(conv, &self.emissions)?;
        check_square(&self.trans, k, "trans")?;
        Ok(k)
    }
}

pub fn score_sequence(conv: &Conversation, labels: &[usize], pots: &ChainPotentials) -> Result<f64> {
    let k = pots.check(conv)?;
    check_labels(labels, conv.len(), k)?;
    let mut total = 0.0;
    for (t, &y) in labels.iter().enumerate() {
        total += pots.emissions[(t, y)];
        if t > 0 {
            total += pots.trans[(labels[t - 1], y)];
        }
    }
    Ok(total)
}

/// Log-space forward (`T × K`) and backward (`T × K`) tables.
fn forward_backward(pots: &ChainPotentials) -> (Matrix, Matrix) {
    let (n, k) = pots.emissions.shape();
    let mut alpha = Matrix::zeros(n, k);
    let mut beta = Matrix::zeros(n, k);
    let mut scratch = vec![0.0; k];
    alpha.row_mut(0).copy_from_slice(pots.emissions.row(0));
    for t in 1..n {
        for y in 0..k {
            for (prev, s) in scratch.iter_mut().enumerate() {
                *s = alpha[(t - 1, prev)] + pots.trans[(prev, y)];
            }
            alpha[(t, y)] = log_sum_exp_unchecked(&scratch) + pots.emissions[(t, y)];
        }
    }
    for t in (0..n - 1).rev() {
        for y in 0..k {
            for (next, s) in scratch.iter_mut().enumerate() {
                *s = pots.trans[(y, next)] + pots.emissions[(t + 1, next)] + beta[(t + 1, next)];
            }
            beta[(t, y)] = log_sum_exp_unchecked(&scratch);
        }
    }
    (alpha, beta)
}

pub fn log_partition(conv: &Conversation, pots: &ChainPotentials) -> Result<f64> {
    pots.check(conv)?;
    let (alpha, _) = forward_backward(pots);
    Ok(log_sum_exp_unchecked(alpha.row(alpha.rows() - 1)))
}

pub fn marginals(conv: &Conversation, pots: &ChainPotentials) -> Result<Matrix> {
    pots.check(conv)?;
    let (alpha, beta) = forward_backward(pots);
    let log_z = log_sum_exp_unchecked(alpha.row(alpha.rows() - 1));
    let mut out = alpha.clone();
    for (o, b) in out.data_mut().iter_mut().zip(beta.data()) {
        *o = (*o + b - log_z).exp();
    }
    Ok(out)
}

pub fn nll_loss(conv: &Conversation, gold: &[usize], pots: &ChainPotentials) -> Result<f64> {
    let score = score_sequence(conv, gold, pots)?;
    Ok((log_partition(conv, pots)? - score).max(0.0))
}

pub fn gradients(conv: &Conversation, gold: &[usize], pots: &ChainPotentials) -> Result<ChainGradients> {
    let score = score_sequence(conv, gold, pots)?;
    let (alpha, beta) = forward_backward(pots);
    let (n, k) = pots.emissions.shape();
    let log_z = log_sum_exp_unchecked(alpha.row(n - 1));
    let mut d_em = Matrix::zeros(n, k);
    for (o, (a, b)) in d_em.data_mut().iter_mut().zip(alpha.data().iter().zip(beta.data())) {
        *o = (a + b - log_z).exp();
    }
    let mut d_trans = Matrix::zeros(k, k);
    for t in 1..n {
        for prev in 0..k {
            for y in 0..k {
                let lp = alpha[(t - 1, prev)]
                    + pots.trans[(prev, y)]
                    + pots.emissions[(t, y)]
                    + beta[(t, y)]
                    - log_z;
                d_trans[(prev, y)] += lp.exp();
            }
        }
    }
    for (t, &y) in gold.iter().enumerate() {
        d_em[(t, y)] -= 1.0;
        if t > 0 {
            d_trans[(gold[t - 1], y)] -= 1.0;
        }
    }
    Ok(ChainGradients {
        loss: (log_z - score).max(0.0),
        emissions: d_em,
        trans: d_trans,
    })
}

/// Exact argmax, lexicographically smallest among ties.
pub fn viterbi_decode(conv: &Conversation, pots: &ChainPotentials) -> Result<Vec<usize>> {
    let k = pots.check(conv)?;
    let n = conv.len();
    // best[t][y]: best score of positions t+1.. given y_t = y
    let mut best = Matrix::zeros(n, k);
    for t in (0..n - 1).rev() {
        for y in 0..k {
            best[(t, y)] = (0..k)
                .map(|next| pots.trans[(y, next)] + pots.emissions[(t + 1, next)] + best[(t + 1, next)])
                .fold(f64::NEG_INFINITY, f64::max);
        }
    }
    let mut labels = Vec::with_capacity(n);
    for t in 0..n {
        let mut choice = 0;
        let mut top = f64::NEG_INFINITY;
        for y in 0..k {
            let mut v = pots.emissions[(t, y)] + best[(t, y)];
            if let Some(&prev) = labels.last() {
                v += pots.trans[(prev, y)];
            }
            if v > top {
                top = v;
                choice = y;
            }
        }
        labels.push(choice);
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_transitions_decouple_nodes() {
        let conv = Conversation::from_speakers(&["A", "B", "A"], 2);
        let pots = ChainPotentials {
            emissions: Matrix::from_rows(&[[0.2, -0.4], [1.0, 0.5], [-2.0, 0.1]]).unwrap(),
            trans: Matrix::zeros(2, 2),
        };
        let lz = log_partition(&conv, &pots).unwrap();
        let expected: f64 = (0..3)
            .map(|t| (pots.emissions[(t, 0)].exp() + pots.emissions[(t, 1)].exp()).ln())
            .sum();
        assert!((lz - expected).abs() < 1e-12);
        assert_eq!(viterbi_decode(&conv, &pots).unwrap(), vec![0, 0, 1]);
        let m = marginals(&conv, &pots).unwrap();
        for t in 0..3 {
            assert!((m.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
