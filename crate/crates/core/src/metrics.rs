//! Confusion matrices, F1 variants and the inertia/contagion sample split.

use serde::{Deserialize, Serialize};

use crate::conversation::{moments, Conversation};
use crate::error::{Error, Result};

/// Counts with rows indexed by gold label and columns by prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn num_labels(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn predicted(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

pub fn confusion(golds: &[usize], preds: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if golds.len() != preds.len() {
        return Err(Error::LengthMismatch {
            golds: golds.len(),
            preds: preds.len(),
        });
    }
    let mut cm = ConfusionMatrix::new(k);
    for (i, (&g, &p)) in golds.iter().zip(preds).enumerate() {
        if g >= k || p >= k {
            return Err(Error::LabelOutOfRange(i));
        }
        cm.counts[g][p] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Variant {
    Weighted,
    Macro,
    Micro,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

pub fn class_scores(cm: &ConfusionMatrix) -> Vec<ClassScores> {
    (0..cm.num_labels())
        .map(|c| {
            let tp = cm.counts[c][c] as f64;
            let precision = ratio(tp, cm.predicted(c) as f64);
            let recall = ratio(tp, cm.support(c) as f64);
            ClassScores {
                precision,
                recall,
                f1: ratio(2.0 * tp, (cm.predicted(c) + cm.support(c)) as f64),
                support: cm.support(c),
            }
        })
        .collect()
}

/// F1 over the classes other than `exclude`.
///
/// Macro averages the classes that occur as gold or prediction. Micro pools
/// counts: predicting the excluded label for another class is a false
/// negative, predicting another class for the excluded label a false positive.
pub fn f1_scores(cm: &ConfusionMatrix, variant: F1Variant, exclude: Option<usize>) -> Result<f64> {
    let k = cm.num_labels();
    let kept: Vec<usize> = (0..k).filter(|&c| Some(c) != exclude).collect();
    let support: u64 = kept.iter().map(|&c| cm.support(c)).sum();
    if support == 0 {
        return Err(Error::ExcludedOnlyData);
    }
    let scores = class_scores(cm);
    Ok(match variant {
        F1Variant::Weighted => {
            kept.iter().map(|&c| scores[c].f1 * scores[c].support as f64).sum::<f64>() / support as f64
        }
        F1Variant::Macro => {
            let seen: Vec<usize> = kept
                .into_iter()
                .filter(|&c| cm.support(c) + cm.predicted(c) > 0)
                .collect();
            seen.iter().map(|&c| scores[c].f1).sum::<f64>() / seen.len() as f64
        }
        F1Variant::Micro => {
            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            for g in 0..k {
                for p in 0..k {
                    let n = cm.counts[g][p];
                    let g_kept = Some(g) != exclude;
                    let p_kept = Some(p) != exclude;
                    if g == p {
                        if g_kept {
                            tp += n;
                        }
                        continue;
                    }
                    if p_kept {
                        fp += n;
                    }
                    if g_kept {
                        fn_ += n;
                    }
                }
            }
            ratio(2.0 * tp as f64, (2 * tp + fp + fn_) as f64)
        }
    })
}

pub fn accuracy(cm: &ConfusionMatrix) -> f64 {
    let hit: u64 = (0..cm.num_labels()).map(|c| cm.counts[c][c]).sum();
    ratio(hit as f64, cm.total() as f64)
}

/// Selection criterion for validation and reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    WeightedF1,
    MacroF1,
    MicroF1Excluding(usize),
    Accuracy,
}

impl Metric {
    pub fn score(&self, cm: &ConfusionMatrix) -> Result<f64> {
        match *self {
            Metric::WeightedF1 => f1_scores(cm, F1Variant::Weighted, None),
            Metric::MacroF1 => f1_scores(cm, F1Variant::Macro, None),
            Metric::MicroF1Excluding(c) => f1_scores(cm, F1Variant::Micro, Some(c)),
            Metric::Accuracy => Ok(accuracy(cm)),
        }
    }
}

/// Utterances whose gold label repeats their own speaker's previous gold
/// label (inertia) or the latest other-speaker gold label (contagion).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SubsetSplit {
    pub inertia: Vec<usize>,
    pub contagion: Vec<usize>,
}

pub fn inertia_contagion_split(conv: &Conversation) -> Result<SubsetSplit> {
    let gold = conv.gold_labels()?;
    let m = moments(conv);
    let mut split = SubsetSplit::default();
    for t in 0..conv.len() {
        if m.self_prev[t].is_some_and(|s| gold[s] == gold[t]) {
            split.inertia.push(t);
        }
        if m.other_prev[t].is_some_and(|o| gold[o] == gold[t]) {
            split.contagion.push(t);
        }
    }
    Ok(split)
}

/// `(gold, pred)` pairs of the two subsets.
pub fn subset_pairs(conv: &Conversation, preds: &[usize]) -> Result<(Vec<(usize, usize)>, Vec<(usize, usize)>)> {
    let gold = conv.gold_labels()?;
    if preds.len() != gold.len() {
        return Err(Error::LengthMismatch {
            golds: gold.len(),
            preds: preds.len(),
        });
    }
    let split = inertia_contagion_split(conv)?;
    let pairs = |idx: &[usize]| idx.iter().map(|&t| (gold[t], preds[t])).collect();
    Ok((pairs(&split.inertia), pairs(&split.contagion)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_examples() {
        assert_eq!(confusion(&[0, 1], &[0, 1], 2).unwrap().counts, vec![vec![1, 0], vec![0, 1]]);
        assert_eq!(confusion(&[0, 0], &[1, 1], 2).unwrap().counts[0][1], 2);
        let cm = confusion(&[0, 1, 1, 2], &[0, 1, 2, 2], 3).unwrap();
        assert_eq!((cm.counts[0][0], cm.counts[1][1], cm.counts[2][2], cm.counts[1][2]), (1, 1, 1, 1));
        assert_eq!(cm.total(), 4);
        assert_eq!(confusion(&[0], &[0, 1], 2), Err(Error::LengthMismatch { golds: 1, preds: 2 }));
        assert_eq!(confusion(&[0, 3], &[0, 1], 2), Err(Error::LabelOutOfRange(1)));
    }

    #[test]
    fn f1_examples() {
        let cm = confusion(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        let s = class_scores(&cm);
        assert!((s[0].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((s[1].f1 - 0.8).abs() < 1e-12);
        let w = f1_scores(&cm, F1Variant::Weighted, None).unwrap();
        assert!((w - 11.0 / 15.0).abs() < 1e-12);

        let cm = confusion(&[1, 1, 0], &[1, 0, 0], 2).unwrap();
        let micro = f1_scores(&cm, F1Variant::Micro, Some(0)).unwrap();
        assert!((micro - 2.0 / 3.0).abs() < 1e-12);

        let cm = confusion(&[0, 1, 2, 2], &[0, 1, 2, 2], 4).unwrap();
        for v in [F1Variant::Weighted, F1Variant::Macro, F1Variant::Micro] {
            assert_eq!(f1_scores(&cm, v, None).unwrap(), 1.0);
        }
        let cm = confusion(&[0, 0], &[1, 1], 2).unwrap();
        assert_eq!(f1_scores(&cm, F1Variant::Weighted, None).unwrap(), 0.0);
        assert_eq!(f1_scores(&cm, F1Variant::Micro, Some(0)), Err(Error::ExcludedOnlyData));
    }

    #[test]
    fn split_examples() {
        let mut c = Conversation::from_speakers(&["A", "B", "A"], 3);
        for (u, y) in c.utterances.iter_mut().zip([2, 0, 2]) {
            u.label = Some(y);
        }
        let s = inertia_contagion_split(&c).unwrap();
        assert_eq!((s.inertia, s.contagion), (vec![2], vec![]));

        let mut c = Conversation::from_speakers(&["A", "B"], 2);
        for u in &mut c.utterances {
            u.label = Some(1);
        }
        let s = inertia_contagion_split(&c).unwrap();
        assert_eq!((s.inertia, s.contagion), (vec![], vec![1]));
    }
}
