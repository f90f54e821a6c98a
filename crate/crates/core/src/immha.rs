//! Identity-masked multi-head attention over utterances.
//!
//! Each head scores query/key pairs in two subspaces: a self subspace used
//! where the key utterance belongs to the query's speaker (`M_s`, diagonal
//! included) and an other subspace used where it belongs to someone else
//! (`M_o`, strictly earlier). Positions outside both masks are future
//! utterances and receive exactly zero weight. Positional information is
//! untied: a learned position table has its own query/key projections whose
//! scores are added to the content scores, and never enters the values.

use std::rc::Rc;

use rand::Rng;

use crate::conversation::Conversation;
use crate::error::{Error, Result};
use crate::numerics::{Mask, Matrix};
use crate::params::{glorot, ones_row, param_tree, zeros_row};
use crate::tape::{maybe_dropout, Dropout, Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Self and other attention masks of one conversation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPair {
    pub self_mask: Mask,
    pub other_mask: Mask,
}

impl MaskPair {
    pub fn allowed(&self) -> Mask {
        self.self_mask.union(&self.other_mask)
    }
}

pub fn build_identity_masks(conv: &Conversation) -> MaskPair {
    let n = conv.len();
    MaskPair {
        self_mask: Mask::from_fn(n, n, |t, tau| tau <= t && conv.speaker(tau) == conv.speaker(t)),
        other_mask: Mask::from_fn(n, n, |t, tau| tau < t && conv.speaker(tau) != conv.speaker(t)),
    }
}

/// Projections of one attention head, each `head_dim × d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights<T> {
    pub query_self: T,
    pub query_other: T,
    pub query_pos_self: T,
    pub query_pos_other: T,
    pub key: T,
    pub key_pos: T,
    pub value: T,
}

param_tree!(HeadWeights {
    query_self,
    query_other,
    query_pos_self,
    query_pos_other,
    key,
    key_pos,
    value
});

#[derive(Debug, Clone, PartialEq)]
pub struct ImmhaLayer<T> {
    pub output: T,
    pub output_bias: T,
    pub norm1_gain: T,
    pub norm1_bias: T,
    pub ff_in: T,
    pub ff_in_bias: T,
    pub ff_out: T,
    pub ff_out_bias: T,
    pub norm2_gain: T,
    pub norm2_bias: T,
    pub heads: Vec<HeadWeights<T>>,
}

param_tree!(ImmhaLayer {
    output,
    output_bias,
    norm1_gain,
    norm1_bias,
    ff_in,
    ff_in_bias,
    ff_out,
    ff_out_bias,
    norm2_gain,
    norm2_bias
}; heads);

/// Full attention stack, including the `d_in → d_model` input projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ImmhaParams<T> {
    pub input: T,
    pub input_bias: T,
    pub positions: T,
    pub layers: Vec<ImmhaLayer<T>>,
}

param_tree!(ImmhaParams { input, input_bias, positions }; layers);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImmhaShape {
    pub d_in: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub depth: usize,
    pub max_len: usize,
}

impl ImmhaShape {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} must be a positive multiple of the head count {}",
                self.d_model, self.heads
            )));
        }
        if self.max_len == 0 || self.d_ff == 0 || self.d_in == 0 {
            return Err(Error::InvalidConfig("attention sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

impl ImmhaParams<Matrix> {
    pub fn init<R: Rng + ?Sized>(shape: &ImmhaShape, rng: &mut R) -> Self {
        let (d, hd) = (shape.d_model, shape.head_dim());
        let layers = (0..shape.depth)
            .map(|_| ImmhaLayer {
                heads: (0..shape.heads)
                    .map(|_| HeadWeights {
                        query_self: glorot(hd, d, rng),
                        query_other: glorot(hd, d, rng),
                        query_pos_self: glorot(hd, d, rng),
                        query_pos_other: glorot(hd, d, rng),
                        key: glorot(hd, d, rng),
                        key_pos: glorot(hd, d, rng),
                        value: glorot(hd, d, rng),
                    })
                    .collect(),
                output: glorot(d, d, rng),
                output_bias: zeros_row(d),
                norm1_gain: ones_row(d),
                norm1_bias: zeros_row(d),
                ff_in: glorot(shape.d_ff, d, rng),
                ff_in_bias: zeros_row(shape.d_ff),
                ff_out: glorot(d, shape.d_ff, rng),
                ff_out_bias: zeros_row(d),
                norm2_gain: ones_row(d),
                norm2_bias: zeros_row(d),
            })
            .collect();
        Self {
            input: glorot(d, shape.d_in, rng),
            input_bias: zeros_row(d),
            positions: glorot(shape.max_len, d, rng),
            layers,
        }
    }

    pub fn max_len(&self) -> usize {
        self.positions.rows()
    }
}

/// Inputs shared by every layer of one forward pass.
pub struct AttentionContext {
    pub masks: Rc<(Mask, Mask)>,
    pub allowed: Rc<Mask>,
    pub positions: Var,
}

impl AttentionContext {
    pub fn new(tape: &mut Tape, masks: &MaskPair, position_table: Var) -> Self {
        let n = masks.self_mask.rows();
        let positions = tape.slice_rows(position_table, 0, n);
        Self {
            masks: Rc::new((masks.self_mask.clone(), masks.other_mask.clone())),
            allowed: Rc::new(masks.allowed()),
            positions,
        }
    }
}

/// Row-stochastic attention weights of one head (`T × T`).
pub fn head_attention(
    tape: &mut Tape,
    x: Var,
    head: &HeadWeights<Var>,
    ctx: &AttentionContext,
) -> Var {
    let head_dim = tape.value(head.key).rows();
    let scale = 1.0 / (head_dim as f64).sqrt();
    let key = tape.matmul_t(x, head.key);
    let key_pos = tape.matmul_t(ctx.positions, head.key_pos);

    let branch = |tape: &mut Tape, q: Var, qp: Var| {
        let q_u = tape.matmul_t(x, q);
        let q_p = tape.matmul_t(ctx.positions, qp);
        let content = tape.matmul_t(q_u, key);
        let position = tape.matmul_t(q_p, key_pos);
        let sum = tape.add(content, position);
        tape.scale(sum, scale)
    };
    let on_self = branch(tape, head.query_self, head.query_pos_self);
    let on_other = branch(tape, head.query_other, head.query_pos_other);
    let combined = tape.mask_select(on_self, on_other, ctx.masks.clone());
    tape.masked_softmax(combined, ctx.allowed.clone())
}

/// One attention block: heads → output projection → add & norm → FFN → add & norm.
pub fn layer_forward(
    tape: &mut Tape,
    x: Var,
    layer: &ImmhaLayer<Var>,
    ctx: &AttentionContext,
    dropout: &mut Option<&mut Dropout>,
) -> Var {
    let outs: Vec<Var> = layer
        .heads
        .iter()
        .map(|h| {
            let attn = head_attention(tape, x, h, ctx);
            let attn = maybe_dropout(dropout, tape, attn);
            let v = tape.matmul_t(x, h.value);
            tape.matmul(attn, v)
        })
        .collect();
    let cat = tape.concat_cols(&outs);
    let projected = tape.linear(cat, layer.output, Some(layer.output_bias));
    let res = tape.add(x, projected);
    let h1 = tape.layer_norm(res, layer.norm1_gain, layer.norm1_bias, LAYER_NORM_EPS);

    let ff = tape.linear(h1, layer.ff_in, Some(layer.ff_in_bias));
    let ff = tape.relu(ff);
    let ff = maybe_dropout(dropout, tape, ff);
    let ff = tape.linear(ff, layer.ff_out, Some(layer.ff_out_bias));
    let res = tape.add(h1, ff);
    tape.layer_norm(res, layer.norm2_gain, layer.norm2_bias, LAYER_NORM_EPS)
}

/// Whole stack on the tape; `features` is `T × d_in`.
pub fn forward_on_tape(
    tape: &mut Tape,
    features: Var,
    conv: &Conversation,
    params: &ImmhaParams<Var>,
    dropout: &mut Option<&mut Dropout>,
) -> Result<Var> {
    let max = tape.value(params.positions).rows();
    if conv.len() > max {
        return Err(Error::SequenceTooLong {
            len: conv.len(),
            max,
        });
    }
    let masks = build_identity_masks(conv);
    let ctx = AttentionContext::new(tape, &masks, params.positions);
    let mut h = tape.linear(features, params.input, Some(params.input_bias));
    for layer in &params.layers {
        h = layer_forward(tape, h, layer, &ctx, dropout);
    }
    Ok(h)
}

/// Attention matrix of `head` in `layer`, for features already in model space.
pub fn im_attention_scores(
    features: &Matrix,
    layer: &ImmhaLayer<Matrix>,
    position_table: &Matrix,
    masks: &MaskPair,
    head: usize,
) -> Result<Matrix> {
    let n = masks.self_mask.rows();
    if features.rows() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} feature rows for a {n}x{n} mask",
            features.rows()
        )));
    }
    let weights = layer.heads.get(head).ok_or_else(|| {
        Error::ShapeMismatch(format!("head {head} of {}", layer.heads.len()))
    })?;
    if weights.key.cols() != features.cols() || position_table.cols() != features.cols() {
        return Err(Error::ShapeMismatch("feature width differs from d_model".into()));
    }
    if position_table.rows() < n {
        return Err(Error::SequenceTooLong {
            len: n,
            max: position_table.rows(),
        });
    }
    let mut tape = Tape::new();
    let x = tape.leaf(features.clone());
    let table = tape.leaf(position_table.clone());
    let head_vars = weights.map(&mut |m| tape.leaf(m.clone()));
    let ctx = AttentionContext::new(&mut tape, masks, table);
    let attn = head_attention(&mut tape, x, &head_vars, &ctx);
    Ok(tape.value(attn).clone())
}

/// Evaluation-mode forward of the stack (`T × d_in` → `T × d_model`).
pub fn immha_forward(features: &Matrix, conv: &Conversation, params: &ImmhaParams<Matrix>) -> Result<Matrix> {
    if features.rows() != conv.len() || features.cols() != params.input.cols() {
        return Err(Error::ShapeMismatch(format!(
            "features {:?} for T={} and d_in={}",
            features.shape(),
            conv.len(),
            params.input.cols()
        )));
    }
    let mut tape = Tape::new();
    let vars = params.map(&mut |m| tape.leaf(m.clone()));
    let x = tape.leaf(features.clone());
    let out = forward_on_tape(&mut tape, x, conv, &vars, &mut None)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(d_in: usize, depth: usize) -> ImmhaShape {
        ImmhaShape {
            d_in,
            d_model: 4,
            heads: 2,
            d_ff: 6,
            depth,
            max_len: 16,
        }
    }

    fn features(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    fn rows_of(bits: &[[u8; 3]]) -> Vec<Vec<bool>> {
        bits.iter().map(|r| r.iter().map(|&b| b == 1).collect()).collect()
    }

    #[test]
    fn mask_examples() {
        let m = build_identity_masks(&Conversation::from_speakers(&["A", "B"], 2));
        assert_eq!(m.self_mask.to_nested(), vec![vec![true, false], vec![false, true]]);
        assert_eq!(m.other_mask.to_nested(), vec![vec![false, false], vec![true, false]]);

        let m = build_identity_masks(&Conversation::from_speakers(&["A", "A"], 2));
        assert_eq!(m.other_mask.count(), 0);
        assert_eq!(m.self_mask.to_nested(), vec![vec![true, false], vec![true, true]]);

        let m = build_identity_masks(&Conversation::from_speakers(&["A", "B", "A"], 2));
        let want = rows_of(&[[1, 0, 1]]);
        assert_eq!(m.self_mask.row(2), want[0].as_slice());
        assert_eq!(m.other_mask.row(2), &[false, true, false]);
    }

    #[test]
    fn single_utterance_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ImmhaParams::init(&shape(3, 1), &mut rng);
        let conv = Conversation::from_speakers(&["A"], 2);
        let a = im_attention_scores(
            &features(1, 4, &mut rng),
            &p.layers[0],
            &p.positions,
            &build_identity_masks(&conv),
            1,
        )
        .unwrap();
        assert_eq!(a.data(), &[1.0]);
    }

    #[test]
    fn zero_projections_give_uniform_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ImmhaParams::init(&shape(3, 1), &mut rng);
        p.layers[0].heads[0] = p.layers[0].heads[0].map(&mut |m| Matrix::zeros(m.rows(), m.cols()));
        let conv = Conversation::from_speakers(&["A", "B", "A", "C", "B"], 2);
        let masks = build_identity_masks(&conv);
        let a = im_attention_scores(&features(5, 4, &mut rng), &p.layers[0], &p.positions, &masks, 0)
            .unwrap();
        let allowed = masks.allowed();
        for t in 0..5 {
            let n = allowed.row(t).iter().filter(|&&b| b).count() as f64;
            for tau in 0..5 {
                let want = if allowed.get(t, tau) { 1.0 / n } else { 0.0 };
                assert!((a[(t, tau)] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn hand_computed_two_speaker_row() {
        // d_model = 2, one head of width 2. x = [[1,0],[0,1]].
        // self branch: query_self = I, key = I -> self score at (1,1) = x1·x1 = 1
        // other branch: query_other = 2I -> other score at (1,0) = 2 x1·x0 = 0
        // positions are zero so only content scores count; scale 1/sqrt(2).
        let id = Matrix::identity(2);
        let zero = Matrix::zeros(2, 2);
        let head = HeadWeights {
            query_self: id.clone(),
            query_other: Matrix::from_rows(&[[0.0, 2.0], [2.0, 0.0]]).unwrap(),
            query_pos_self: zero.clone(),
            query_pos_other: zero.clone(),
            key: id.clone(),
            key_pos: zero.clone(),
            value: id.clone(),
        };
        let layer = ImmhaLayer {
            output: id.clone(),
            output_bias: zeros_row(2),
            norm1_gain: ones_row(2),
            norm1_bias: zeros_row(2),
            ff_in: zero.clone(),
            ff_in_bias: zeros_row(2),
            ff_out: zero.clone(),
            ff_out_bias: zeros_row(2),
            norm2_gain: ones_row(2),
            norm2_bias: zeros_row(2),
            heads: vec![head],
        };
        let masks = build_identity_masks(&Conversation::from_speakers(&["A", "B"], 2));
        let x = Matrix::identity(2);
        let a = im_attention_scores(&x, &layer, &Matrix::zeros(4, 2), &masks, 0).unwrap();
        // other score at (1,0): query_other maps x1=[0,1] to [2,0]; dot with key x0=[1,0] = 2
        let s_other = 2.0 / 2f64.sqrt();
        let s_self = 1.0 / 2f64.sqrt();
        let denom = s_other.exp() + s_self.exp();
        assert!((a[(1, 0)] - s_other.exp() / denom).abs() < 1e-15);
        assert!((a[(1, 1)] - s_self.exp() / denom).abs() < 1e-15);
        assert_eq!(a.row(0), &[1.0, 0.0]);
    }

    #[test]
    fn zero_weights_leave_normalized_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ImmhaParams::init(&shape(4, 2), &mut rng);
        p.input = Matrix::identity(4);
        for layer in &mut p.layers {
            for h in &mut layer.heads {
                h.value = Matrix::zeros(2, 4);
            }
            layer.ff_in = Matrix::zeros(6, 4);
            layer.ff_out = Matrix::zeros(4, 6);
        }
        let conv = Conversation::from_speakers(&["A", "B", "A"], 2);
        let x = features(3, 4, &mut rng);
        let out = immha_forward(&x, &conv, &p).unwrap();
        for t in 0..3 {
            let row = x.row(t);
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            for c in 0..4 {
                let want = (row[c] - mean) / (var + LAYER_NORM_EPS).sqrt();
                assert!((out[(t, c)] - want).abs() < 1e-4, "{} vs {want}", out[(t, c)]);
            }
        }
    }

    #[test]
    fn other_branch_is_inert_for_single_speaker() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = ImmhaParams::init(&shape(3, 2), &mut rng);
        let mut zeroed = p.clone();
        for layer in &mut zeroed.layers {
            for h in &mut layer.heads {
                h.query_other = Matrix::zeros(2, 4);
                h.query_pos_other = Matrix::zeros(2, 4);
            }
        }
        let conv = Conversation::from_speakers(&["A"; 5], 2);
        let x = features(5, 3, &mut rng);
        assert_eq!(
            immha_forward(&x, &conv, &p).unwrap(),
            immha_forward(&x, &conv, &zeroed).unwrap()
        );
    }

    #[test]
    fn identity_split_between_branches() {
        // Zeroing the self-branch queries must not change how weight is
        // distributed among other-speaker positions, and vice versa.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ImmhaParams::init(&shape(3, 1), &mut rng);
        let conv = Conversation::from_speakers(&["A", "B", "A", "B", "B", "A"], 2);
        let masks = build_identity_masks(&conv);
        let x = features(6, 4, &mut rng);
        let base = im_attention_scores(&x, &p.layers[0], &p.positions, &masks, 0).unwrap();

        let mut no_self = p.layers[0].clone();
        no_self.heads[0].query_self = Matrix::zeros(2, 4);
        no_self.heads[0].query_pos_self = Matrix::zeros(2, 4);
        let alt = im_attention_scores(&x, &no_self, &p.positions, &masks, 0).unwrap();

        let mut no_other = p.layers[0].clone();
        no_other.heads[0].query_other = Matrix::zeros(2, 4);
        no_other.heads[0].query_pos_other = Matrix::zeros(2, 4);
        let alt2 = im_attention_scores(&x, &no_other, &p.positions, &masks, 0).unwrap();

        let renorm = |a: &Matrix, mask: &Mask, t: usize| -> Vec<f64> {
            let total: f64 = (0..6).filter(|&c| mask.get(t, c)).map(|c| a[(t, c)]).sum();
            (0..6).filter(|&c| mask.get(t, c)).map(|c| a[(t, c)] / total).collect()
        };
        for t in 0..6 {
            if masks.other_mask.row(t).iter().any(|&b| b) {
                for (u, v) in renorm(&base, &masks.other_mask, t)
                    .iter()
                    .zip(renorm(&alt, &masks.other_mask, t))
                {
                    assert!((u - v).abs() < 1e-12);
                }
            }
            for (u, v) in renorm(&base, &masks.self_mask, t)
                .iter()
                .zip(renorm(&alt2, &masks.self_mask, t))
            {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_long_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = ImmhaParams::init(&shape(3, 1), &mut rng);
        let conv = Conversation::from_speakers(&["A"; 17], 2);
        assert_eq!(
            immha_forward(&features(17, 3, &mut rng), &conv, &p),
            Err(Error::SequenceTooLong { len: 17, max: 16 })
        );
    }
}
