//! Central-difference check of the full model's gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::conversation::{Conversation, Utterance};
use crate::error::Result;
use crate::model::{conversation_loss, HeadKind, ModelConfig, ModelParams, Mode};
use crate::numerics::Matrix;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor so coordinates with vanishing gradient compare absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub worst: String,
    pub pass: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Tiny configuration used by the check: 2 heads, one layer per encoder.
pub fn tiny_config(head: HeadKind) -> ModelConfig {
    ModelConfig {
        head,
        d_model: 4,
        heads: 2,
        d_ff: 8,
        immha_depth: 1,
        d_h: 3,
        diagru_depth: 1,
        max_len: 8,
        ..ModelConfig::default()
    }
}

/// Random labelled conversation of `len` utterances over speakers A, B, C.
pub fn random_conversation<R: Rng + ?Sized>(len: usize, d_in: usize, k: usize, rng: &mut R) -> Conversation {
    let utts = (0..len)
        .map(|_| {
            let who = ["A", "B", "C"][rng.random_range(0..3)];
            let x = (0..d_in).map(|_| rng.random_range(-1.0..1.0)).collect();
            Utterance::new(who, x, Some(rng.random_range(0..k)))
        })
        .collect();
    Conversation::new("gradcheck", utts, k)
}

/// Compares every coordinate of the analytic gradient with central differences.
pub fn check(conv: &Conversation, params: &ModelParams<Matrix>, cfg: &ModelConfig) -> Result<GradcheckReport> {
    let (_, analytic) = conversation_loss(conv, params, cfg, Mode::Eval)?;
    let names = params.names();
    let grads: Vec<Matrix> = analytic.leaves().into_iter().cloned().collect();
    let mut probe = params.clone();
    let mut report = GradcheckReport {
        coordinates: 0,
        max_rel_err: 0.0,
        worst: String::new(),
        pass: true,
    };
    for (leaf, name) in names.iter().enumerate() {
        for j in 0..grads[leaf].data().len() {
            let original = probe.leaves()[leaf].data()[j];
            let eval = |v: f64, probe: &mut ModelParams<Matrix>| -> Result<f64> {
                probe.leaves_mut()[leaf].data_mut()[j] = v;
                Ok(conversation_loss(conv, probe, cfg, Mode::Eval)?.0)
            };
            let plus = eval(original + STEP, &mut probe)?;
            let minus = eval(original - STEP, &mut probe)?;
            eval(original, &mut probe)?;
            let numeric = (plus - minus) / (2.0 * STEP);
            let err = relative_error(grads[leaf].data()[j], numeric);
            report.coordinates += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = format!("{name}[{j}]");
            }
        }
    }
    report.pass = report.max_rel_err < TOLERANCE;
    Ok(report)
}

/// The fixed tiny problem: d_in 4, K 3, T 4.
pub fn run(seed: u64, head: HeadKind) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_config(head);
    let mut params = ModelParams::init(&cfg, 4, 3, &mut rng)?;
    for m in params.leaves_mut() {
        for v in m.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let conv = random_conversation(4, 4, 3, &mut rng);
    check(&conv, &params, &cfg)
}
