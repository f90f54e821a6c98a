//! Full model: attention and recurrent encoders, fused with the raw
//! features, projected to emissions and scored by one of three heads.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conversation::{dyadic_segments, Conversation};
use crate::crf::{chain, skip, softmax, ChainPotentials, CrfPotentials};
use crate::diagru::{self, DecayConfig, DiaGruParams};
use crate::error::{Error, Result};
use crate::immha::{self, ImmhaParams, ImmhaShape};
use crate::numerics::Matrix;
use crate::params::{glorot, zeros_row};
use crate::tape::{Dropout, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    SkipCrf,
    LinearChain,
    Softmax,
}

/// Architecture sizes. `d_in` and the label count come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub head: HeadKind,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub immha_depth: usize,
    pub d_h: usize,
    pub diagru_depth: usize,
    pub max_len: usize,
    pub decay: DecayConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            head: HeadKind::SkipCrf,
            d_model: 32,
            heads: 4,
            d_ff: 64,
            immha_depth: 5,
            d_h: 32,
            diagru_depth: 3,
            max_len: 128,
            decay: DecayConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn immha_shape(&self, d_in: usize) -> ImmhaShape {
        ImmhaShape {
            d_in,
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            depth: self.immha_depth,
            max_len: self.max_len,
        }
    }

    pub fn validate(&self, d_in: usize, num_labels: usize) -> Result<()> {
        self.immha_shape(d_in).validate()?;
        self.decay.validate()?;
        if self.d_h == 0 {
            return Err(Error::InvalidConfig("d_h must be positive".into()));
        }
        if num_labels == 0 {
            return Err(Error::InvalidConfig("label space is empty".into()));
        }
        Ok(())
    }
}

/// Label-interaction parameters of the classification head.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadParams<T> {
    SkipCrf { self_trans: T, other_trans: T },
    LinearChain { trans: T },
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Feature extraction: both encoders.
    Ext,
    /// Classification: emission projection and transitions.
    Cls,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub immha: ImmhaParams<T>,
    pub diagru: DiaGruParams<T>,
    /// `K × (d_model + d_h + d_in)`.
    pub emission: T,
    pub emission_bias: T,
    pub head: HeadParams<T>,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            immha: self.immha.map(f),
            diagru: self.diagru.map(f),
            emission: f(&self.emission),
            emission_bias: f(&self.emission_bias),
            head: match &self.head {
                HeadParams::SkipCrf { self_trans, other_trans } => HeadParams::SkipCrf {
                    self_trans: f(self_trans),
                    other_trans: f(other_trans),
                },
                HeadParams::LinearChain { trans } => HeadParams::LinearChain { trans: f(trans) },
                HeadParams::Softmax => HeadParams::Softmax,
            },
        }
    }

    /// Leaves in a fixed order with dotted names.
    pub fn visit(&self, f: &mut impl FnMut(&str, &T)) {
        self.immha.visit("immha.", f);
        self.diagru.visit("diagru.", f);
        f("emission", &self.emission);
        f("emission_bias", &self.emission_bias);
        match &self.head {
            HeadParams::SkipCrf { self_trans, other_trans } => {
                f("self_trans", self_trans);
                f("other_trans", other_trans);
            }
            HeadParams::LinearChain { trans } => f("trans", trans),
            HeadParams::Softmax => {}
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut T)) {
        self.immha.visit_mut("immha.", f);
        self.diagru.visit_mut("diagru.", f);
        f("emission", &mut self.emission);
        f("emission_bias", &mut self.emission_bias);
        match &mut self.head {
            HeadParams::SkipCrf { self_trans, other_trans } => {
                f("self_trans", self_trans);
                f("other_trans", other_trans);
            }
            HeadParams::LinearChain { trans } => f("trans", trans),
            HeadParams::Softmax => {}
        }
    }

    /// Leaves in `visit` order.
    pub fn leaves(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.immha.push_leaves(&mut out);
        self.diagru.push_leaves(&mut out);
        out.push(&self.emission);
        out.push(&self.emission_bias);
        match &self.head {
            HeadParams::SkipCrf { self_trans, other_trans } => out.extend([self_trans, other_trans]),
            HeadParams::LinearChain { trans } => out.push(trans),
            HeadParams::Softmax => {}
        }
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.immha.push_leaves_mut(&mut out);
        self.diagru.push_leaves_mut(&mut out);
        out.push(&mut self.emission);
        out.push(&mut self.emission_bias);
        match &mut self.head {
            HeadParams::SkipCrf { self_trans, other_trans } => out.extend([self_trans, other_trans]),
            HeadParams::LinearChain { trans } => out.push(trans),
            HeadParams::Softmax => {}
        }
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n.to_owned()));
        out
    }
}

pub fn param_group(name: &str) -> ParamGroup {
    if name.starts_with("immha.") || name.starts_with("diagru.") {
        ParamGroup::Ext
    } else {
        ParamGroup::Cls
    }
}

impl ModelParams<Matrix> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, d_in: usize, num_labels: usize, rng: &mut R) -> Result<Self> {
        cfg.validate(d_in, num_labels)?;
        let k = num_labels;
        let immha = ImmhaParams::init(&cfg.immha_shape(d_in), rng);
        let diagru = DiaGruParams::init(d_in, cfg.d_h, cfg.diagru_depth, rng);
        let emission = glorot(k, cfg.d_model + cfg.d_h + d_in, rng);
        let head = match cfg.head {
            HeadKind::SkipCrf => HeadParams::SkipCrf {
                self_trans: Matrix::zeros(k, k),
                other_trans: Matrix::zeros(k, k),
            },
            HeadKind::LinearChain => HeadParams::LinearChain {
                trans: Matrix::zeros(k, k),
            },
            HeadKind::Softmax => HeadParams::Softmax,
        };
        Ok(Self {
            immha,
            diagru,
            emission,
            emission_bias: zeros_row(k),
            head,
        })
    }

    pub fn d_in(&self) -> usize {
        self.immha.input.cols()
    }

    pub fn num_labels(&self) -> usize {
        self.emission.rows()
    }

    pub fn zeros_like(&self) -> Self {
        self.map(&mut |m| Matrix::zeros(m.rows(), m.cols()))
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, m| n += m.data().len());
        n
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, m| ok &= m.is_finite());
        ok
    }

    /// `self += factor · other`, leaf by leaf.
    pub fn add_scaled(&mut self, other: &Self, factor: f64) {
        for (m, o) in self.leaves_mut().into_iter().zip(other.leaves()) {
            for (a, b) in m.data_mut().iter_mut().zip(o.data()) {
                *a += factor * b;
            }
        }
    }
}

/// Train mode draws dropout masks from `seed`; eval mode is deterministic and dropout-free.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Eval,
    Train { dropout_rate: f64, seed: u64 },
}

/// Head-specific scores produced by [`model_forward`].
#[derive(Debug, Clone, PartialEq)]
pub enum Potentials {
    SkipCrf(CrfPotentials),
    LinearChain(ChainPotentials),
    Softmax(Matrix),
}

impl Potentials {
    pub fn emissions(&self) -> &Matrix {
        match self {
            Potentials::SkipCrf(p) => &p.emissions,
            Potentials::LinearChain(p) => &p.emissions,
            Potentials::Softmax(e) => e,
        }
    }
}

/// `T × d_in` matrix of the utterance features.
pub fn features_matrix(conv: &Conversation) -> Result<Matrix> {
    conv.validate()?;
    let d = conv.feature_dim();
    let data = conv.utterances.iter().flat_map(|u| u.features.iter().copied()).collect();
    Matrix::from_vec(conv.len(), d, data)
}

fn check_input(conv: &Conversation, params: &ModelParams<Matrix>) -> Result<Matrix> {
    let x = features_matrix(conv)?;
    if x.cols() != params.d_in() {
        return Err(Error::ShapeMismatch(format!(
            "conversation {} has {}-dim features, model expects {}",
            conv.id,
            x.cols(),
            params.d_in()
        )));
    }
    Ok(x)
}

/// Emission scores on the tape (`T × K`).
pub fn emissions_on_tape(
    tape: &mut Tape,
    features: Var,
    conv: &Conversation,
    cfg: &ModelConfig,
    params: &ModelParams<Var>,
    dropout: &mut Option<&mut Dropout>,
) -> Result<Var> {
    let global = immha::forward_on_tape(tape, features, conv, &params.immha, dropout)?;
    let local = diagru::forward_on_tape(tape, features, conv, &params.diagru, &cfg.decay)?;
    let fused = tape.concat_cols(&[global, local, features]);
    Ok(tape.linear(fused, params.emission, Some(params.emission_bias)))
}

fn dropout_for(mode: Mode) -> Option<Dropout> {
    match mode {
        Mode::Train { dropout_rate, seed } if dropout_rate > 0.0 => Some(Dropout::new(dropout_rate, seed)),
        _ => None,
    }
}

pub fn model_forward(conv: &Conversation, params: &ModelParams<Matrix>, cfg: &ModelConfig, mode: Mode) -> Result<Potentials> {
    let x = check_input(conv, params)?;
    let mut tape = Tape::new();
    let vars = params.map(&mut |m| tape.leaf(m.clone()));
    let xv = tape.leaf(x);
    let mut drop = dropout_for(mode);
    let em = emissions_on_tape(&mut tape, xv, conv, cfg, &vars, &mut drop.as_mut())?;
    let emissions = tape.value(em).clone();
    Ok(match &params.head {
        HeadParams::SkipCrf { self_trans, other_trans } => Potentials::SkipCrf(CrfPotentials {
            emissions,
            self_trans: self_trans.clone(),
            other_trans: other_trans.clone(),
        }),
        HeadParams::LinearChain { trans } => Potentials::LinearChain(ChainPotentials {
            emissions,
            trans: trans.clone(),
        }),
        HeadParams::Softmax => Potentials::Softmax(emissions),
    })
}

/// Negative log-likelihood of one conversation and its gradient.
pub fn conversation_loss(
    conv: &Conversation,
    params: &ModelParams<Matrix>,
    cfg: &ModelConfig,
    mode: Mode,
) -> Result<(f64, ModelParams<Matrix>)> {
    let gold = conv.gold_labels()?;
    let x = check_input(conv, params)?;
    let mut tape = Tape::new();
    let vars = params.map(&mut |m| tape.leaf(m.clone()));
    let xv = tape.leaf(x);
    let mut drop = dropout_for(mode);
    let em = emissions_on_tape(&mut tape, xv, conv, cfg, &vars, &mut drop.as_mut())?;
    let emissions = tape.value(em).clone();
    let (loss, local) = match (&params.head, &vars.head) {
        (
            HeadParams::SkipCrf { self_trans, other_trans },
            HeadParams::SkipCrf {
                self_trans: sv,
                other_trans: ov,
            },
        ) => {
            let pots = CrfPotentials {
                emissions,
                self_trans: self_trans.clone(),
                other_trans: other_trans.clone(),
            };
            let g = skip::crf_gradients(conv, &gold, &pots, &dyadic_segments(conv))?;
            (g.loss, vec![(em, g.emissions), (*sv, g.self_trans), (*ov, g.other_trans)])
        }
        (HeadParams::LinearChain { trans }, HeadParams::LinearChain { trans: tv }) => {
            let pots = ChainPotentials {
                emissions,
                trans: trans.clone(),
            };
            let g = chain::gradients(conv, &gold, &pots)?;
            (g.loss, vec![(em, g.emissions), (*tv, g.trans)])
        }
        _ => {
            let (loss, g) = softmax::loss_and_gradient(conv, &gold, &emissions)?;
            (loss, vec![(em, g)])
        }
    };
    let root = tape.scalar_loss(loss, local);
    let grads = tape.backward(root);
    let mut i = 0;
    let values = params.leaves();
    let out = vars.map(&mut |v| {
        let g = grads.get_or_zeros(*v, values[i]);
        i += 1;
        g
    });
    Ok((loss, out))
}

/// Dropout stream of the `index`-th conversation of a batch.
fn conversation_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Mean loss and mean gradient over a batch of whole conversations.
///
/// Conversations are processed in parallel; the reduction runs in batch
/// order so results do not depend on the thread count.
pub fn loss_and_gradients(
    batch: &[&Conversation],
    params: &ModelParams<Matrix>,
    cfg: &ModelConfig,
    mode: Mode,
) -> Result<(f64, ModelParams<Matrix>)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let parts: Vec<Result<(f64, ModelParams<Matrix>)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, conv)| {
            let m = match mode {
                Mode::Train { dropout_rate, seed } => Mode::Train {
                    dropout_rate,
                    seed: conversation_seed(seed, i),
                },
                Mode::Eval => Mode::Eval,
            };
            conversation_loss(conv, params, cfg, m)
        })
        .collect();
    let mut total = 0.0;
    let mut grad = params.zeros_like();
    for part in parts {
        let (loss, g) = part?;
        total += loss;
        grad.add_scaled(&g, 1.0);
    }
    let n = batch.len() as f64;
    grad.visit_mut(&mut |_, m| m.scale_assign(1.0 / n));
    Ok((total / n, grad))
}

/// Best label sequence under the model's head.
pub fn predict(conv: &Conversation, params: &ModelParams<Matrix>, cfg: &ModelConfig) -> Result<Vec<usize>> {
    match model_forward(conv, params, cfg, Mode::Eval)? {
        Potentials::SkipCrf(p) => skip::viterbi_decode(conv, &p, &dyadic_segments(conv)),
        Potentials::LinearChain(p) => chain::viterbi_decode(conv, &p),
        Potentials::Softmax(e) => Ok(softmax::decode(&e)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conversation::Utterance;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg(head: HeadKind) -> ModelConfig {
        ModelConfig {
            head,
            d_model: 4,
            heads: 2,
            d_ff: 6,
            immha_depth: 1,
            d_h: 3,
            diagru_depth: 1,
            max_len: 8,
            decay: DecayConfig::default(),
        }
    }

    fn toy(labels: &[usize]) -> Conversation {
        let speakers = ["A", "B", "A", "C", "B"];
        let utts = labels
            .iter()
            .enumerate()
            .map(|(t, &y)| {
                Utterance::new(
                    speakers[t % speakers.len()],
                    (0..3).map(|j| ((t * 3 + j) as f64 * 0.71).cos()).collect(),
                    Some(y),
                )
            })
            .collect();
        Conversation::new("toy", utts, 3)
    }

    #[test]
    fn groups_cover_every_leaf() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ModelParams::init(&tiny_cfg(HeadKind::SkipCrf), 3, 3, &mut rng).unwrap();
        let names = p.names();
        let mut uniq = names.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), names.len());
        assert!(names.iter().any(|n| param_group(n) == ParamGroup::Ext));
        assert_eq!(
            names.iter().filter(|n| param_group(n) == ParamGroup::Cls).count(),
            4
        );
    }

    #[test]
    fn eval_is_deterministic_and_matches_zero_dropout_train() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = tiny_cfg(HeadKind::SkipCrf);
        let p = ModelParams::init(&cfg, 3, 3, &mut rng).unwrap();
        let c = toy(&[0, 1, 2, 0, 1]);
        let a = model_forward(&c, &p, &cfg, Mode::Eval).unwrap();
        let b = model_forward(&c, &p, &cfg, Mode::Eval).unwrap();
        let t = model_forward(&c, &p, &cfg, Mode::Train { dropout_rate: 0.0, seed: 9 }).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, t);
    }

    #[test]
    fn duplicated_batch_keeps_mean_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = tiny_cfg(HeadKind::SkipCrf);
        let p = ModelParams::init(&cfg, 3, 3, &mut rng).unwrap();
        let c = toy(&[0, 1, 2, 0]);
        let (one, g1) = loss_and_gradients(&[&c], &p, &cfg, Mode::Eval).unwrap();
        let (two, g2) = loss_and_gradients(&[&c, &c], &p, &cfg, Mode::Eval).unwrap();
        assert!((one - two).abs() < 1e-12);
        assert!(one >= 0.0);
        let mut diff = g2.clone();
        diff.add_scaled(&g1, -1.0);
        let mut worst: f64 = 0.0;
        diff.visit(&mut |_, m| worst = worst.max(m.max_abs()));
        assert!(worst < 1e-12);
    }

    #[test]
    fn zeroed_encoders_leave_only_the_raw_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = tiny_cfg(HeadKind::Softmax);
        let mut p = ModelParams::init(&cfg, 3, 3, &mut rng).unwrap();
        p.immha.visit_mut("", &mut |_, m| m.scale_assign(0.0));
        p.diagru.visit_mut("", &mut |_, m| m.scale_assign(0.0));
        let c = toy(&[0, 1, 2]);
        let em = model_forward(&c, &p, &cfg, Mode::Eval).unwrap();
        let x = features_matrix(&c).unwrap();
        let offset = cfg.d_model + cfg.d_h;
        for t in 0..c.len() {
            for y in 0..3 {
                let want: f64 = (0..3).map(|j| p.emission[(y, offset + j)] * x[(t, j)]).sum();
                assert!((em.emissions()[(t, y)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn missing_gold_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = tiny_cfg(HeadKind::LinearChain);
        let p = ModelParams::init(&cfg, 3, 3, &mut rng).unwrap();
        let mut c = toy(&[0, 1]);
        c.utterances[1].label = None;
        assert_eq!(
            conversation_loss(&c, &p, &cfg, Mode::Eval).unwrap_err(),
            Error::MissingGoldLabel(1)
        );
        assert_eq!(predict(&c, &p, &cfg).unwrap().len(), 2);
    }
}
