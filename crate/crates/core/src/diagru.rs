//! Dialogue GRU: a recurrent cell fed by the speaker's own previous state and
//! the latest interlocutor state, each scaled by a distance-based decay.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conversation::{moments, Conversation};
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Matrix};
use crate::params::{glorot, param_tree, zeros_row};
use crate::tape::{Tape, Var};

/// Position (`mu_*`) and shape (`gamma_*`) constants of the two decays.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecayConfig {
    pub mu_self: f64,
    pub mu_other: f64,
    pub gamma_self: f64,
    pub gamma_other: f64,
}

impl Default for DecayConfig {
    fn default() -> Self {
        Self {
            mu_self: 3.0,
            mu_other: 0.0,
            gamma_self: 1.0,
            gamma_other: 2.0,
        }
    }
}

impl DecayConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_self > 0.0 && self.gamma_other > 0.0) {
            return Err(Error::InvalidConfig("decay shape constants must be positive".into()));
        }
        if !(self.mu_self.is_finite() && self.mu_other.is_finite()) {
            return Err(Error::InvalidConfig("decay position constants must be finite".into()));
        }
        Ok(())
    }
}

/// `1 / (1 + exp((t − prev − mu) / gamma))`, or 0 without a predecessor.
pub fn decay_factor(t: usize, prev: Option<usize>, mu: f64, gamma: f64) -> Result<f64> {
    match prev {
        None => Ok(0.0),
        Some(p) if p >= t => Err(Error::InvalidGap { t, prev: p }),
        Some(p) => Ok(sigmoid(-(((t - p) as f64) - mu) / gamma)),
    }
}

/// One stacked layer. `w_self`, `w_other` map `in + d_h → d_h`; `w_update`,
/// `w_cand` map `in + 2·d_h → d_h`. All weights are stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiaGruLayer<T> {
    pub w_self: T,
    pub b_self: T,
    pub w_other: T,
    pub b_other: T,
    pub w_update: T,
    pub b_update: T,
    pub w_cand: T,
    pub b_cand: T,
}

param_tree!(DiaGruLayer {
    w_self,
    b_self,
    w_other,
    b_other,
    w_update,
    b_update,
    w_cand,
    b_cand
});

#[derive(Debug, Clone, PartialEq)]
pub struct DiaGruParams<T> {
    pub layers: Vec<DiaGruLayer<T>>,
}

param_tree!(DiaGruParams {}; layers);

impl DiaGruLayer<Matrix> {
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_h: usize, rng: &mut R) -> Self {
        Self {
            w_self: glorot(d_h, d_in + d_h, rng),
            b_self: zeros_row(d_h),
            w_other: glorot(d_h, d_in + d_h, rng),
            b_other: zeros_row(d_h),
            w_update: glorot(d_h, d_in + 2 * d_h, rng),
            b_update: zeros_row(d_h),
            w_cand: glorot(d_h, d_in + 2 * d_h, rng),
            b_cand: zeros_row(d_h),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_self.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_self.cols() - self.hidden()
    }
}

impl DiaGruParams<Matrix> {
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_h: usize, depth: usize, rng: &mut R) -> Self {
        Self {
            layers: (0..depth)
                .map(|l| DiaGruLayer::init(if l == 0 { d_in } else { d_h }, d_h, rng))
                .collect(),
        }
    }
}

/// Gate activations and output of one cell step.
#[derive(Debug, Clone, PartialEq)]
pub struct CellOutput {
    pub self_gate: Vec<f64>,
    pub other_gate: Vec<f64>,
    pub update_gate: Vec<f64>,
    pub candidate: Vec<f64>,
    pub hidden: Vec<f64>,
}

/// The cell on the tape; every argument is a `1 × n` row.
pub fn cell_on_tape(tape: &mut Tape, x: Var, h_self: Var, h_other: Var, layer: &DiaGruLayer<Var>) -> [Var; 5] {
    let xs = tape.concat_cols(&[x, h_self]);
    let s = tape.linear(xs, layer.w_self, Some(layer.b_self));
    let s = tape.sigmoid(s);

    let xo = tape.concat_cols(&[x, h_other]);
    let o = tape.linear(xo, layer.w_other, Some(layer.b_other));
    let o = tape.sigmoid(o);

    let xso = tape.concat_cols(&[x, h_self, h_other]);
    let z = tape.linear(xso, layer.w_update, Some(layer.b_update));
    let z = tape.sigmoid(z);

    let gated_self = tape.mul(s, h_self);
    let gated_other = tape.mul(o, h_other);
    let xc = tape.concat_cols(&[x, gated_self, gated_other]);
    let cand = tape.linear(xc, layer.w_cand, Some(layer.b_cand));
    let cand = tape.tanh(cand);

    let keep = tape.affine_scalar(z, -1.0, 1.0);
    let kept = tape.mul(keep, h_self);
    let fresh = tape.mul(z, cand);
    let h = tape.add(kept, fresh);
    [s, o, z, cand, h]
}

pub fn diagru_cell(x: &[f64], h_self: &[f64], h_other: &[f64], layer: &DiaGruLayer<Matrix>) -> Result<CellOutput> {
    let d_h = layer.hidden();
    if x.len() != layer.input_dim() || h_self.len() != d_h || h_other.len() != d_h {
        return Err(Error::ShapeMismatch(format!(
            "cell expects x of {} and states of {d_h}; got {}, {}, {}",
            layer.input_dim(),
            x.len(),
            h_self.len(),
            h_other.len()
        )));
    }
    let mut tape = Tape::new();
    let vars = layer.map(&mut |m| tape.leaf(m.clone()));
    let xv = tape.leaf(Matrix::row_vector(x));
    let hs = tape.leaf(Matrix::row_vector(h_self));
    let ho = tape.leaf(Matrix::row_vector(h_other));
    let [s, o, z, c, h] = cell_on_tape(&mut tape, xv, hs, ho, &vars);
    let row = |v: Var| tape.value(v).data().to_vec();
    Ok(CellOutput {
        self_gate: row(s),
        other_gate: row(o),
        update_gate: row(z),
        candidate: row(c),
        hidden: row(h),
    })
}

/// Runs every layer over the conversation; returns the top layer's `T × d_h` states.
pub fn forward_on_tape(
    tape: &mut Tape,
    features: Var,
    conv: &Conversation,
    params: &DiaGruParams<Var>,
    decay: &DecayConfig,
) -> Result<Var> {
    let m = moments(conv);
    let n = conv.len();
    let mut betas = Vec::with_capacity(n);
    for t in 0..n {
        betas.push((
            decay_factor(t, m.self_prev[t], decay.mu_self, decay.gamma_self)?,
            decay_factor(t, m.other_prev[t], decay.mu_other, decay.gamma_other)?,
        ));
    }
    let mut input = features;
    for layer in &params.layers {
        let d_h = tape.value(layer.b_self).cols();
        let zero = tape.leaf(Matrix::zeros(1, d_h));
        let mut states: Vec<Var> = Vec::with_capacity(n);
        for t in 0..n {
            let x = tape.row(input, t);
            let (beta_s, beta_o) = betas[t];
            let h_self = match m.self_prev[t] {
                Some(p) => tape.scale(states[p], beta_s),
                None => zero,
            };
            let h_other = match m.other_prev[t] {
                Some(p) => tape.scale(states[p], beta_o),
                None => zero,
            };
            let [.., h] = cell_on_tape(tape, x, h_self, h_other, layer);
            states.push(h);
        }
        input = tape.stack_rows(&states);
    }
    Ok(input)
}

pub fn diagru_run(
    features: &Matrix,
    conv: &Conversation,
    params: &DiaGruParams<Matrix>,
    decay: &DecayConfig,
) -> Result<Matrix> {
    let d_in = params.layers.first().map_or(0, DiaGruLayer::input_dim);
    if features.rows() != conv.len() || features.cols() != d_in {
        return Err(Error::ShapeMismatch(format!(
            "features {:?} for T={} and d_in={d_in}",
            features.shape(),
            conv.len()
        )));
    }
    let mut tape = Tape::new();
    let vars = params.map(&mut |m| tape.leaf(m.clone()));
    let x = tape.leaf(features.clone());
    let out = forward_on_tape(&mut tape, x, conv, &vars, decay)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn decay_examples() {
        let d = DecayConfig::default();
        let v = decay_factor(5, Some(3), d.mu_self, d.gamma_self).unwrap();
        assert!((v - 0.731_058_578_630_005).abs() < 1e-12);
        let v = decay_factor(4, Some(3), d.mu_other, d.gamma_other).unwrap();
        assert!((v - 1.0 / (1.0 + 0.5f64.exp())).abs() < 1e-15);
        assert!((v - 0.377_540_668_798_145).abs() < 1e-12);
        assert_eq!(decay_factor(4, None, 3.0, 1.0), Ok(0.0));
        assert_eq!(
            decay_factor(4, Some(4), 3.0, 1.0),
            Err(Error::InvalidGap { t: 4, prev: 4 })
        );
    }

    #[test]
    fn decay_is_strictly_decreasing_in_gap() {
        let d = DecayConfig::default();
        for (mu, gamma) in [(d.mu_self, d.gamma_self), (d.mu_other, d.gamma_other)] {
            let vals: Vec<f64> = (1..=20)
                .map(|gap| decay_factor(30, Some(30 - gap), mu, gamma).unwrap())
                .collect();
            for w in vals.windows(2) {
                assert!(w[1] < w[0]);
            }
        }
    }

    fn constant_layer(value: f64, d_in: usize, d_h: usize) -> DiaGruLayer<Matrix> {
        DiaGruLayer {
            w_self: Matrix::filled(d_h, d_in + d_h, value),
            b_self: zeros_row(d_h),
            w_other: Matrix::filled(d_h, d_in + d_h, value),
            b_other: zeros_row(d_h),
            w_update: Matrix::filled(d_h, d_in + 2 * d_h, value),
            b_update: zeros_row(d_h),
            w_cand: Matrix::filled(d_h, d_in + 2 * d_h, value),
            b_cand: zeros_row(d_h),
        }
    }

    #[test]
    fn zero_fixed_point() {
        let out = diagru_cell(&[0.4, -0.2], &[0.0; 3], &[0.0; 3], &constant_layer(0.0, 2, 3)).unwrap();
        assert_eq!(out.candidate, vec![0.0; 3]);
        assert_eq!(out.update_gate, vec![0.5; 3]);
        assert_eq!(out.hidden, vec![0.0; 3]);
    }

    #[test]
    fn scalar_hand_evaluation() {
        let out = diagru_cell(&[1.0], &[0.5], &[-0.5], &constant_layer(1.0, 1, 1)).unwrap();
        let s = sigmoid(1.5);
        let o = sigmoid(0.5);
        let z = sigmoid(1.0);
        let cand = (1.0 + s * 0.5 - o * 0.5f64).tanh();
        let h = (1.0 - z) * 0.5 + z * cand;
        assert!((out.self_gate[0] - s).abs() < 1e-15);
        assert!((out.other_gate[0] - o).abs() < 1e-15);
        assert!((out.update_gate[0] - z).abs() < 1e-15);
        assert!((out.candidate[0] - cand).abs() < 1e-15);
        assert!((out.hidden[0] - h).abs() < 1e-15);
    }

    #[test]
    fn first_step_uses_zero_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = DiaGruParams::init(3, 2, 1, &mut rng);
        let conv = Conversation::from_speakers(&["A"], 2);
        let x = Matrix::row_vector(&[0.3, -0.7, 1.1]);
        let run = diagru_run(&x, &conv, &params, &DecayConfig::default()).unwrap();
        let cell = diagru_cell(x.row(0), &[0.0; 2], &[0.0; 2], &params.layers[0]).unwrap();
        assert_eq!(run.row(0), cell.hidden.as_slice());
    }

    #[test]
    fn single_speaker_ignores_other_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = DiaGruParams::init(3, 2, 2, &mut rng);
        let mut zeroed = params.clone();
        for layer in &mut zeroed.layers {
            let d_in = layer.input_dim();
            for r in 0..2 {
                for c in d_in..layer.w_other.cols() {
                    layer.w_other[(r, c)] = 0.0;
                }
            }
        }
        let conv = Conversation::from_speakers(&["A"; 6], 2);
        let x = Matrix::from_vec(6, 3, (0..18).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let d = DecayConfig::default();
        assert_eq!(
            diagru_run(&x, &conv, &params, &d).unwrap(),
            diagru_run(&x, &conv, &zeroed, &d).unwrap()
        );
    }

    #[test]
    fn shape_errors() {
        let layer = constant_layer(0.1, 2, 3);
        assert!(matches!(
            diagru_cell(&[0.0], &[0.0; 3], &[0.0; 3], &layer),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
