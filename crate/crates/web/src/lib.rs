//! Small wrappers over the core crate for a static browser page.
//!
//! Each export has a native twin returning `emotionic::Result` so the logic
//! is testable without a JavaScript host.

use emotionic::conversation::{dyadic_segments, Conversation};
use emotionic::crf::{chain, skip, softmax};
use emotionic::diagru::decay_factor;
use emotionic::immha::build_identity_masks;
use emotionic::numerics::Matrix;
use emotionic::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Splits on whitespace and commas.
pub fn parse_speakers(text: &str) -> Result<Vec<String>> {
    let out: Vec<String> = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect();
    if out.is_empty() {
        return Err(Error::EmptyConversation);
    }
    Ok(out)
}

/// Decay factor at gaps `1..=max_gap`.
pub fn decay_values(mu: f64, gamma: f64, max_gap: usize) -> Result<Vec<f64>> {
    if !(gamma > 0.0) || !mu.is_finite() {
        return Err(Error::InvalidConfig("gamma must be positive and mu finite".into()));
    }
    (1..=max_gap).map(|g| decay_factor(g, Some(0), mu, gamma)).collect()
}

pub fn masks_json(speakers: &str) -> Result<Value> {
    let speakers = parse_speakers(speakers)?;
    let conv = Conversation::from_speakers(&speakers, 1);
    let m = build_identity_masks(&conv);
    let segments: Vec<[usize; 2]> = dyadic_segments(&conv).iter().map(|s| [s.start, s.end]).collect();
    Ok(json!({
        "speakers": speakers,
        "self": m.self_mask.to_nested(),
        "other": m.other_mask.to_nested(),
        "segments": segments,
    }))
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Seeded random emissions decoded three ways: per utterance, with a
/// linear chain, and with the skip chain. `inertia` scales the diagonal of
/// the self (and chain) transitions, `contagion` that of the other transitions.
pub fn decode_json(speakers: &str, k: usize, seed: u64, inertia: f64, contagion: f64) -> Result<Value> {
    if !(1..=8).contains(&k) {
        return Err(Error::InvalidConfig("label count must be between 1 and 8".into()));
    }
    let speakers = parse_speakers(speakers)?;
    if speakers.len() > 40 {
        return Err(Error::InvalidConfig("at most 40 utterances".into()));
    }
    let conv = Conversation::from_speakers(&speakers, k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let emissions = Matrix::from_vec(
        speakers.len(),
        k,
        (0..speakers.len() * k).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let diag = |s: f64| {
        let mut m = Matrix::identity(k);
        m.scale_assign(s);
        m
    };
    let segments = dyadic_segments(&conv);
    let sp = skip::CrfPotentials {
        emissions: emissions.clone(),
        self_trans: diag(inertia),
        other_trans: diag(contagion),
    };
    let (skip_log_z, dp) = skip::log_partition(&conv, &sp, &segments)?;
    let cp = chain::ChainPotentials {
        emissions: emissions.clone(),
        trans: diag(inertia),
    };
    Ok(json!({
        "emissions": rows(&emissions),
        "segments": segments.iter().map(|s| [s.start, s.end]).collect::<Vec<_>>(),
        "independent": {
            "labels": softmax::decode(&emissions),
            "marginals": rows(&softmax::probabilities(&emissions)),
        },
        "chain": {
            "labels": chain::viterbi_decode(&conv, &cp)?,
            "marginals": rows(&chain::marginals(&conv, &cp)?),
            "log_z": chain::log_partition(&conv, &cp)?,
        },
        "skip": {
            "labels": skip::viterbi_decode(&conv, &sp, &segments)?,
            "marginals": rows(&dp.marginals()),
            "log_z": skip_log_z,
        },
    }))
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = decayCurve)]
pub fn decay_curve(mu: f64, gamma: f64, max_gap: usize) -> std::result::Result<Vec<f64>, JsError> {
    decay_values(mu, gamma, max_gap).map_err(js)
}

#[wasm_bindgen(js_name = identityMasks)]
pub fn identity_masks(speakers: &str) -> std::result::Result<String, JsError> {
    masks_json(speakers).map(|v| v.to_string()).map_err(js)
}

#[wasm_bindgen(js_name = decodeLabels)]
pub fn decode_labels(
    speakers: &str,
    k: usize,
    seed: u64,
    inertia: f64,
    contagion: f64,
) -> std::result::Result<String, JsError> {
    decode_json(speakers, k, seed, inertia, contagion).map(|v| v.to_string()).map_err(js)
}
