//! Synthetic conversations whose labels follow speaker inertia and
//! interlocutor contagion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conversation::{moments, Conversation};
use crate::error::{Error, Result};
use crate::numerics::dot;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_labels: usize,
    pub num_speakers: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub p_inertia: f64,
    pub p_contagion: f64,
    pub p_random: f64,
    /// Probability that the next utterance comes from a different speaker.
    pub p_switch: f64,
    pub sigma_sep: f64,
    pub sigma_noise: f64,
    pub d_in: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_labels: 4,
            num_speakers: 2,
            min_len: 6,
            max_len: 16,
            p_inertia: 0.6,
            p_contagion: 0.25,
            p_random: 0.15,
            p_switch: 0.5,
            sigma_sep: 1.0,
            sigma_noise: 1.0,
            d_in: 16,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [self.p_inertia, self.p_contagion, self.p_random, self.p_switch];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidConfig("probabilities must lie in [0, 1]".into()));
        }
        if ((self.p_inertia + self.p_contagion + self.p_random) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig("p_inertia + p_contagion + p_random must equal 1".into()));
        }
        if !(self.sigma_noise > 0.0) || !(self.sigma_sep >= 0.0) {
            return Err(Error::InvalidConfig("sigma_noise must be positive and sigma_sep non-negative".into()));
        }
        if self.num_labels == 0 || self.num_speakers == 0 || self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::InvalidConfig("label, speaker and length bounds must be positive and ordered".into()));
        }
        if self.num_labels > self.d_in {
            return Err(Error::InvalidConfig("orthonormal class means need d_in >= num_labels".into()));
        }
        Ok(())
    }

    pub fn label_names(&self) -> Vec<String> {
        (0..self.num_labels).map(|k| format!("e{k}")).collect()
    }
}

/// Class means: a seeded orthonormal set scaled by `sigma_sep`.
pub fn class_means(cfg: &SynthConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cfg.num_labels);
    while basis.len() < cfg.num_labels {
        let mut v: Vec<f64> = (0..cfg.d_in).map(|_| StandardNormal.sample(&mut rng)).collect();
        for b in &basis {
            let p = dot(&v, b);
            for (x, y) in v.iter_mut().zip(b) {
                *x -= p * y;
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Ok(basis
        .into_iter()
        .map(|b| b.into_iter().map(|x| x * cfg.sigma_sep).collect())
        .collect())
}

/// One conversation drawn with `rng`, using precomputed class means.
pub fn generate_with_means<R: Rng + ?Sized>(cfg: &SynthConfig, means: &[Vec<f64>], id: String, rng: &mut R) -> Conversation {
    let k = cfg.num_labels;
    let len = rng.random_range(cfg.min_len..=cfg.max_len);
    let mut speakers = Vec::with_capacity(len);
    let mut who = rng.random_range(0..cfg.num_speakers);
    for t in 0..len {
        if t > 0 && cfg.num_speakers > 1 && rng.random::<f64>() < cfg.p_switch {
            who = (who + rng.random_range(1..cfg.num_speakers)) % cfg.num_speakers;
        }
        speakers.push(format!("S{who}"));
    }
    let mut conv = Conversation::from_speakers(&speakers, k);
    conv.id = id;
    let m = moments(&conv);
    let noise = Normal::new(0.0, cfg.sigma_noise).expect("positive noise");
    let mut labels: Vec<usize> = Vec::with_capacity(len);
    for t in 0..len {
        let u: f64 = rng.random();
        let source = if u < cfg.p_random {
            None
        } else if u < cfg.p_random + cfg.p_contagion {
            m.other_prev[t]
        } else {
            m.self_prev[t]
        };
        let y = match source {
            Some(s) => labels[s],
            None => rng.random_range(0..k),
        };
        labels.push(y);
    }
    for (t, utt) in conv.utterances.iter_mut().enumerate() {
        utt.label = Some(labels[t]);
        utt.features = means[labels[t]].iter().map(|mu| mu + noise.sample(rng)).collect();
    }
    conv
}

/// Generator of conversation `index`; every conversation has its own stream.
pub fn conversation_rng(cfg: &SynthConfig, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    rng
}

pub fn generate_conversation<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Result<Conversation> {
    let means = class_means(cfg)?;
    Ok(generate_with_means(cfg, &means, "synth".into(), rng))
}

pub fn generate_dataset(cfg: &SynthConfig, count: usize) -> Result<Vec<Conversation>> {
    let means = class_means(cfg)?;
    Ok((0..count)
        .into_par_iter()
        .map(|i| generate_with_means(cfg, &means, format!("synth-{i}"), &mut conversation_rng(cfg, i)))
        .collect())
}
