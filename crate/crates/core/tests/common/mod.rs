//! Reference implementations used as oracles. None of them reuse the
//! library's dynamic programs, moment tables or backward passes.

#![allow(dead_code)]

use emotionic::conversation::{Conversation, Utterance};
use emotionic::numerics::Matrix;
use rand::Rng;

/// Greedy split into stretches with at most two speakers, as `(start, end)` inclusive.
pub fn naive_segments(speakers: &[&str]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut seen: Vec<&str> = Vec::new();
    for (t, s) in speakers.iter().enumerate() {
        if !seen.contains(s) {
            if seen.len() == 2 {
                out.push((start, t - 1));
                start = t;
                seen.clear();
            }
            seen.push(s);
        }
    }
    out.push((start, speakers.len() - 1));
    out
}

/// Nearest earlier utterance satisfying `pred`, searching no further back than `floor`.
pub fn scan_back(speakers: &[&str], t: usize, floor: usize, same: bool) -> Option<usize> {
    (floor..t).rev().find(|&j| (speakers[j] == speakers[t]) == same)
}

pub fn speakers_of(conv: &Conversation) -> Vec<&str> {
    conv.utterances.iter().map(|u| u.speaker.as_str()).collect()
}

/// Skip-chain score of one labelling, predecessors confined to the segment.
pub fn skip_score(
    speakers: &[&str],
    labels: &[usize],
    emissions: &Matrix,
    self_trans: &Matrix,
    other_trans: &Matrix,
) -> f64 {
    let mut total = 0.0;
    for (start, end) in naive_segments(speakers) {
        for t in start..=end {
            let y = labels[t];
            total += emissions[(t, y)];
            if let Some(s) = scan_back(speakers, t, start, true) {
                total += self_trans[(labels[s], y)];
            }
            if let Some(o) = scan_back(speakers, t, start, false) {
                total += other_trans[(labels[o], y)];
            }
        }
    }
    total
}

/// Every label vector of length `t` over `k` labels, in lexicographic order.
pub fn all_labelings(t: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..t {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..k).map(move |y| {
                    let mut p = prefix.clone();
                    p.push(y);
                    p
                })
            })
            .collect();
    }
    out
}

pub struct Enumeration {
    pub log_z: f64,
    pub max_score: f64,
    pub marginals: Vec<Vec<f64>>,
}

pub fn enumerate(scores: &[(Vec<usize>, f64)], t: usize, k: usize) -> Enumeration {
    let max_score = scores.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|(_, s)| (s - max_score).exp()).sum();
    let log_z = max_score + z.ln();
    let mut marginals = vec![vec![0.0; k]; t];
    for (labels, s) in scores {
        let p = (s - log_z).exp();
        for (i, &y) in labels.iter().enumerate() {
            marginals[i][y] += p;
        }
    }
    Enumeration {
        log_z,
        max_score,
        marginals,
    }
}

pub fn random_matrix<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

pub fn random_speakers<R: Rng>(len: usize, max_speakers: usize, rng: &mut R) -> Vec<String> {
    (0..len)
        .map(|_| ((b'A' + rng.random_range(0..max_speakers) as u8) as char).to_string())
        .collect()
}

pub fn labelled_conversation<R: Rng>(speakers: &[String], d_in: usize, k: usize, rng: &mut R) -> Conversation {
    let utts = speakers
        .iter()
        .map(|s| {
            Utterance::new(
                s.clone(),
                (0..d_in).map(|_| rng.random_range(-1.0..1.0)).collect(),
                Some(rng.random_range(0..k)),
            )
        })
        .collect();
    Conversation::new("oracle", utts, k)
}

/// Central differences of `f` along every coordinate of `x`.
pub fn central_differences(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let plus = f(&probe);
            probe[i] = x[i] - eps;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}
