//! Conversation data model, utterance moment functions and segmentation.
//!
//! Indices are 0-based. `moment_self(t)` is the latest earlier utterance by
//! the same speaker, `moment_other(t)` the latest earlier utterance by anyone
//! else.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of utterances shared by two consecutive dyadic segments.
///
/// Segments are disjoint, so every utterance's CRF terms are counted once.
pub const SEGMENT_BOUNDARY_OVERLAP: usize = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: String,
    pub features: Vec<f64>,
    pub label: Option<usize>,
}

impl Utterance {
    pub fn new(speaker: impl Into<String>, features: Vec<f64>, label: Option<usize>) -> Self {
        Self {
            speaker: speaker.into(),
            features,
            label,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
    pub num_labels: usize,
}

/// Maximal run of consecutive utterances by one speaker; `start..=end`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpeakerBlock {
    pub speaker: String,
    pub start: usize,
    pub end: usize,
}

/// Stretch of the conversation with at most two distinct speakers; `start..=end`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DyadicSegment {
    pub start: usize,
    pub end: usize,
    pub participants: Vec<String>,
}

impl DyadicSegment {
    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, t: usize) -> bool {
        (self.start..=self.end).contains(&t)
    }
}

/// Self/other predecessor of every utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Moments {
    pub self_prev: Vec<Option<usize>>,
    pub other_prev: Vec<Option<usize>>,
}

impl Conversation {
    pub fn new(id: impl Into<String>, utterances: Vec<Utterance>, num_labels: usize) -> Self {
        Self {
            id: id.into(),
            utterances,
            num_labels,
        }
    }

    /// Feature-free conversation, handy for structural computations.
    pub fn from_speakers<S: AsRef<str>>(speakers: &[S], num_labels: usize) -> Self {
        let utterances = speakers
            .iter()
            .map(|s| Utterance::new(s.as_ref(), Vec::new(), None))
            .collect();
        Self::new("", utterances, num_labels)
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.utterances.first().map_or(0, |u| u.features.len())
    }

    pub fn speaker(&self, t: usize) -> &str {
        &self.utterances[t].speaker
    }

    pub fn speakers(&self) -> impl Iterator<Item = &str> {
        self.utterances.iter().map(|u| u.speaker.as_str())
    }

    pub fn distinct_speakers(&self) -> Vec<&str> {
        let mut seen: Vec<&str> = Vec::new();
        for s in self.speakers() {
            if !seen.contains(&s) {
                seen.push(s);
            }
        }
        seen
    }

    /// Gold labels, failing on the first utterance without one.
    pub fn gold_labels(&self) -> Result<Vec<usize>> {
        self.utterances
            .iter()
            .enumerate()
            .map(|(t, u)| u.label.ok_or(Error::MissingGoldLabel(t)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        validate_conversation(self)
    }
}

pub fn validate_conversation(conv: &Conversation) -> Result<()> {
    if conv.utterances.is_empty() {
        return Err(Error::EmptyConversation);
    }
    if conv.num_labels == 0 {
        return Err(Error::InvalidConfig("label space is empty".into()));
    }
    let dim = conv.utterances[0].features.len();
    for (t, u) in conv.utterances.iter().enumerate() {
        if u.speaker.is_empty() {
            return Err(Error::EmptySpeaker(t));
        }
        if u.features.len() != dim {
            return Err(Error::FeatureDimMismatch(t));
        }
        if matches!(u.label, Some(l) if l >= conv.num_labels) {
            return Err(Error::LabelOutOfRange(t));
        }
    }
    Ok(())
}

fn check_index(conv: &Conversation, t: usize) -> Result<()> {
    if t >= conv.len() {
        return Err(Error::IndexOutOfRange {
            index: t,
            len: conv.len(),
        });
    }
    Ok(())
}

pub fn moment_self(conv: &Conversation, t: usize) -> Result<Option<usize>> {
    check_index(conv, t)?;
    let who = conv.speaker(t);
    Ok((0..t).rev().find(|&tau| conv.speaker(tau) == who))
}

pub fn moment_other(conv: &Conversation, t: usize) -> Result<Option<usize>> {
    check_index(conv, t)?;
    let who = conv.speaker(t);
    Ok((0..t).rev().find(|&tau| conv.speaker(tau) != who))
}

/// Both moment functions for every utterance in one left-to-right pass.
pub fn moments(conv: &Conversation) -> Moments {
    let mut last_by_speaker: HashMap<&str, usize> = HashMap::new();
    let mut self_prev = Vec::with_capacity(conv.len());
    let mut other_prev = Vec::with_capacity(conv.len());
    // latest utterance index, and the latest one whose speaker differs from it
    let mut latest: Option<usize> = None;
    let mut latest_other_than_latest: Option<usize> = None;
    for (t, who) in conv.speakers().enumerate() {
        self_prev.push(last_by_speaker.get(who).copied());
        let other = match latest {
            Some(l) if conv.speaker(l) != who => Some(l),
            Some(_) => latest_other_than_latest,
            None => None,
        };
        other_prev.push(other);
        if let Some(l) = latest {
            if conv.speaker(l) != who {
                latest_other_than_latest = Some(l);
            }
        }
        latest = Some(t);
        last_by_speaker.insert(who, t);
    }
    Moments {
        self_prev,
        other_prev,
    }
}

/// Moments restricted to each utterance's own dyadic segment.
pub fn segment_moments(conv: &Conversation, segments: &[DyadicSegment]) -> Moments {
    let mut self_prev = vec![None; conv.len()];
    let mut other_prev = vec![None; conv.len()];
    for seg in segments {
        for t in seg.start..=seg.end {
            let who = conv.speaker(t);
            self_prev[t] = (seg.start..t).rev().find(|&tau| conv.speaker(tau) == who);
            other_prev[t] = (seg.start..t).rev().find(|&tau| conv.speaker(tau) != who);
        }
    }
    Moments {
        self_prev,
        other_prev,
    }
}

pub fn speaker_blocks(conv: &Conversation) -> Vec<SpeakerBlock> {
    let mut blocks: Vec<SpeakerBlock> = Vec::new();
    for (t, who) in conv.speakers().enumerate() {
        match blocks.last_mut() {
            Some(b) if b.speaker == who => b.end = t,
            _ => blocks.push(SpeakerBlock {
                speaker: who.to_owned(),
                start: t,
                end: t,
            }),
        }
    }
    blocks
}

/// Greedy left-to-right split into maximal stretches with at most two speakers.
pub fn dyadic_segments(conv: &Conversation) -> Vec<DyadicSegment> {
    let mut segments = Vec::new();
    let mut current: Option<DyadicSegment> = None;
    for (t, who) in conv.speakers().enumerate() {
        match current.as_mut() {
            Some(seg) if seg.participants.iter().any(|p| p == who) => seg.end = t,
            Some(seg) if seg.participants.len() < 2 => {
                seg.participants.push(who.to_owned());
                seg.end = t;
            }
            _ => {
                if let Some(done) = current.take() {
                    segments.push(done);
                }
                current = Some(DyadicSegment {
                    start: t - SEGMENT_BOUNDARY_OVERLAP.min(t),
                    end: t,
                    participants: vec![who.to_owned()],
                });
            }
        }
    }
    segments.extend(current);
    segments
}
