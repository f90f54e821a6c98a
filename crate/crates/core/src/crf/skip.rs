//! Skip-chain CRF over dyadic segments.
//!
//! Within a segment with participants P and Q the DP state after utterance
//! `t` is the pair (latest label of P, latest label of Q), each coordinate
//! ranging over `0..K` plus an extra index `K` meaning "has not spoken yet".
//! Utterance `t` by P with label `y` scores
//!
//! ```text
//! emissions[t, y] + self_trans[P's previous label, y] + other_trans[Q's latest label, y]
//! ```
//!
//! with terms for absent predecessors dropped, then overwrites P's
//! coordinate with `y`. Time is O(T·K³), state O(K²) per step.

use crate::conversation::{segment_moments, Conversation, DyadicSegment};
use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp_unchecked, Matrix};

use super::{check_emissions, check_labels, check_square};

#[derive(Debug, Clone, PartialEq)]
pub struct CrfPotentials {
    /// `T × K` node scores.
    pub emissions: Matrix,
    /// `K × K`, indexed `[previous own label, current label]`.
    pub self_trans: Matrix,
    /// `K × K`, indexed `[interlocutor's latest label, current label]`.
    pub other_trans: Matrix,
}

impl CrfPotentials {
    pub fn num_labels(&self) -> usize {
        self.emissions.cols()
    }

    fn check(&self, conv: &Conversation) -> Result<usize> {
        let k = check_emissions(conv, &self.emissions)?;
        check_square(&self.self_trans, k, "self_trans")?;
        check_square(&self.other_trans, k, "other_trans")?;
        Ok(k)
    }
}

/// Forward/backward log-tensors of every segment.
///
/// `alpha[s][i]` and `beta[s][i]` belong to the `i`-th utterance of segment
/// `s`; rows index P's latest label and columns Q's, with index `K` for
/// "not yet spoken".
#[derive(Debug, Clone)]
pub struct DpTensors {
    pub segments: Vec<DyadicSegment>,
    pub alpha: Vec<Vec<Matrix>>,
    pub beta: Vec<Vec<Matrix>>,
    pub segment_log_z: Vec<f64>,
    pub log_z: f64,
    roles: Vec<Vec<Role>>,
}

/// Suffix max-score tables and the label choices realizing them.
///
/// `delta[s][i]` holds, for each joint state just before the `i`-th
/// utterance of segment `s`, the best achievable score of the rest of the
/// segment; `psi[s][i]` the label chosen there (smallest on ties).
#[derive(Debug, Clone)]
pub struct ViterbiTables {
    pub delta: Vec<Vec<Matrix>>,
    pub psi: Vec<Vec<Vec<usize>>>,
    pub best_score: f64,
}

#[derive(Debug, Clone)]
pub struct CrfGradients {
    pub loss: f64,
    pub emissions: Matrix,
    pub self_trans: Matrix,
    pub other_trans: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    P,
    Q,
}

/// Joint-state bookkeeping for a label space of size `k`.
#[derive(Clone, Copy)]
struct States {
    k: usize,
}

impl States {
    #[inline]
    fn width(self) -> usize {
        self.k + 1
    }

    #[inline]
    fn count(self) -> usize {
        self.width() * self.width()
    }

    #[inline]
    fn index(self, p: usize, q: usize) -> usize {
        p * self.width() + q
    }

    #[inline]
    fn none(self) -> usize {
        self.k
    }

    /// (own, other) coordinates of a state for a speaker role.
    #[inline]
    fn split(self, role: Role, p: usize, q: usize) -> (usize, usize) {
        match role {
            Role::P => (p, q),
            Role::Q => (q, p),
        }
    }

    /// State after the speaker with `role` takes label `y`.
    #[inline]
    fn advance(self, role: Role, p: usize, q: usize, y: usize) -> usize {
        match role {
            Role::P => self.index(y, q),
            Role::Q => self.index(p, y),
        }
    }

    fn initial(self) -> Vec<f64> {
        let mut v = vec![f64::NEG_INFINITY; self.count()];
        v[self.index(self.none(), self.none())] = 0.0;
        v
    }

    fn to_matrix(self, v: &[f64]) -> Matrix {
        Matrix::from_vec(self.width(), self.width(), v.to_vec()).expect("state shape")
    }
}

#[inline]
fn step_score(pots: &CrfPotentials, st: States, t: usize, own: usize, other: usize, y: usize) -> f64 {
    let mut s = pots.emissions[(t, y)];
    if own != st.none() {
        s += pots.self_trans[(own, y)];
    }
    if other != st.none() {
        s += pots.other_trans[(other, y)];
    }
    s
}

fn roles(conv: &Conversation, segments: &[DyadicSegment]) -> Result<Vec<Vec<Role>>> {
    let mut next = 0;
    let mut out = Vec::with_capacity(segments.len());
    for seg in segments {
        if seg.start != next || seg.end < seg.start || seg.end >= conv.len() {
            return Err(Error::ShapeMismatch(
                "segments must partition the conversation in order".into(),
            ));
        }
        let first = conv.speaker(seg.start);
        let mut second: Option<&str> = None;
        let mut r = Vec::with_capacity(seg.len());
        for t in seg.start..=seg.end {
            let who = conv.speaker(t);
            if who == first {
                r.push(Role::P);
            } else if second.is_none() || second == Some(who) {
                second = Some(who);
                r.push(Role::Q);
            } else {
                return Err(Error::ShapeMismatch(format!(
                    "segment {}..={} has more than two speakers",
                    seg.start, seg.end
                )));
            }
        }
        out.push(r);
        next = seg.end + 1;
    }
    if next != conv.len() {
        return Err(Error::ShapeMismatch("segments do not cover the conversation".into()));
    }
    Ok(out)
}

/// Unnormalized log-score of a labeling; predecessors are looked up inside
/// each utterance's segment only.
pub fn score_sequence(
    conv: &Conversation,
    labels: &[usize],
    pots: &CrfPotentials,
    segments: &[DyadicSegment],
) -> Result<f64> {
    let k = pots.check(conv)?;
    check_labels(labels, conv.len(), k)?;
    let m = segment_moments(conv, segments);
    let mut total = 0.0;
    for (t, &y) in labels.iter().enumerate() {
        total += pots.emissions[(t, y)];
        if let Some(s) = m.self_prev[t] {
            total += pots.self_trans[(labels[s], y)];
        }
        if let Some(o) = m.other_prev[t] {
            total += pots.other_trans[(labels[o], y)];
        }
    }
    Ok(total)
}

fn forward_segment(
    pots: &CrfPotentials,
    st: States,
    start: usize,
    roles: &[Role],
) -> Vec<Vec<f64>> {
    let w = st.width();
    let mut alphas: Vec<Vec<f64>> = Vec::with_capacity(roles.len());
    let mut scratch = vec![0.0; w];
    for (i, &role) in roles.iter().enumerate() {
        let t = start + i;
        let init;
        let prev: &[f64] = match alphas.last() {
            Some(a) => a,
            None => {
                init = st.initial();
                &init
            }
        };
        let mut next = vec![f64::NEG_INFINITY; st.count()];
        // the non-speaking coordinate is carried over unchanged
        for kept in 0..w {
            for y in 0..st.k {
                for (own, slot) in scratch.iter_mut().enumerate() {
                    let (p, q) = match role {
                        Role::P => (own, kept),
                        Role::Q => (kept, own),
                    };
                    let a = prev[st.index(p, q)];
                    *slot = if a == f64::NEG_INFINITY {
                        a
                    } else {
                        a + step_score(pots, st, t, own, kept, y)
                    };
                }
                let target = match role {
                    Role::P => st.index(y, kept),
                    Role::Q => st.index(kept, y),
                };
                next[target] = log_sum_exp_unchecked(&scratch);
            }
        }
        alphas.push(next);
    }
    alphas
}

fn backward_segment(
    pots: &CrfPotentials,
    st: States,
    start: usize,
    roles: &[Role],
) -> Vec<Vec<f64>> {
    let w = st.width();
    let n = roles.len();
    let mut betas = vec![vec![0.0; st.count()]; n];
    let mut scratch = vec![0.0; st.k];
    for i in (0..n.saturating_sub(1)).rev() {
        let t = start + i + 1;
        let role = roles[i + 1];
        let mut cur = vec![0.0; st.count()];
        for p in 0..w {
            for q in 0..w {
                let (own, other) = st.split(role, p, q);
                for (y, slot) in scratch.iter_mut().enumerate() {
                    *slot = step_score(pots, st, t, own, other, y)
                        + betas[i + 1][st.advance(role, p, q, y)];
                }
                cur[st.index(p, q)] = log_sum_exp_unchecked(&scratch);
            }
        }
        betas[i] = cur;
    }
    betas
}

/// Log-partition function and the forward/backward tensors of every segment.
pub fn log_partition(
    conv: &Conversation,
    pots: &CrfPotentials,
    segments: &[DyadicSegment],
) -> Result<(f64, DpTensors)> {
    let k = pots.check(conv)?;
    let st = States { k };
    let roles = roles(conv, segments)?;
    let mut alpha = Vec::with_capacity(segments.len());
    let mut beta = Vec::with_capacity(segments.len());
    let mut segment_log_z = Vec::with_capacity(segments.len());
    for (seg, r) in segments.iter().zip(&roles) {
        let a = forward_segment(pots, st, seg.start, r);
        let b = backward_segment(pots, st, seg.start, r);
        let lz = log_sum_exp_unchecked(a.last().expect("non-empty segment"));
        segment_log_z.push(lz);
        alpha.push(a.iter().map(|v| st.to_matrix(v)).collect());
        beta.push(b.iter().map(|v| st.to_matrix(v)).collect());
    }
    let log_z = segment_log_z.iter().sum();
    Ok((
        log_z,
        DpTensors {
            segments: segments.to_vec(),
            alpha,
            beta,
            segment_log_z,
            log_z,
            roles,
        },
    ))
}

impl DpTensors {
    /// `log Σ_state exp(alpha + beta)` at every utterance; each equals its segment's log Z.
    pub fn recombined(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (a_seg, b_seg) in self.alpha.iter().zip(&self.beta) {
            for (a, b) in a_seg.iter().zip(b_seg) {
                let sums: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                out.push(log_sum_exp_unchecked(&sums));
            }
        }
        out
    }

    /// Posterior label marginals, `T × K`.
    pub fn marginals(&self) -> Matrix {
        let w = self.alpha[0][0].rows();
        let k = w - 1;
        let total: usize = self.segments.iter().map(DyadicSegment::len).sum();
        let mut out = Matrix::zeros(total, k);
        for (s, seg) in self.segments.iter().enumerate() {
            let lz = self.segment_log_z[s];
            for (i, role) in self.roles[s].iter().enumerate() {
                let (a, b) = (&self.alpha[s][i], &self.beta[s][i]);
                let t = seg.start + i;
                for p in 0..w {
                    for q in 0..w {
                        let own = match role {
                            Role::P => p,
                            Role::Q => q,
                        };
                        if own == k {
                            continue;
                        }
                        out[(t, own)] += (a[(p, q)] + b[(p, q)] - lz).exp();
                    }
                }
            }
        }
        out
    }
}

/// Negative log-likelihood `log Z − score(gold)`.
pub fn nll_loss(
    conv: &Conversation,
    gold: &[usize],
    pots: &CrfPotentials,
    segments: &[DyadicSegment],
) -> Result<f64> {
    let score = score_sequence(conv, gold, pots, segments)?;
    let (log_z, _) = log_partition(conv, pots, segments)?;
    Ok((log_z - score).max(0.0))
}

/// NLL together with its gradient with respect to all three potential tables.
pub fn crf_gradients(
    conv: &Conversation,
    gold: &[usize],
    pots: &CrfPotentials,
    segments: &[DyadicSegment],
) -> Result<CrfGradients> {
    let score = score_sequence(conv, gold, pots, segments)?;
    let (log_z, dp) = log_partition(conv, pots, segments)?;
    let k = pots.num_labels();
    let st = States { k };
    let w = st.width();
    let mut d_em = Matrix::zeros(conv.len(), k);
    let mut d_self = Matrix::zeros(k, k);
    let mut d_other = Matrix::zeros(k, k);

    // expected counts from pairwise (state, label) posteriors
    for (s, seg) in segments.iter().enumerate() {
        let lz = dp.segment_log_z[s];
        let init = st.initial();
        for (i, &role) in dp.roles[s].iter().enumerate() {
            let t = seg.start + i;
            let prev: &[f64] = if i == 0 { &init } else { dp.alpha[s][i - 1].data() };
            let beta = dp.beta[s][i].data();
            for p in 0..w {
                for q in 0..w {
                    let a = prev[st.index(p, q)];
                    if a == f64::NEG_INFINITY {
                        continue;
                    }
                    let (own, other) = st.split(role, p, q);
                    for y in 0..k {
                        let lp = a + step_score(pots, st, t, own, other, y)
                            + beta[st.advance(role, p, q, y)]
                            - lz;
                        let prob = lp.exp();
                        d_em[(t, y)] += prob;
                        if own != st.none() {
                            d_self[(own, y)] += prob;
                        }
                        if other != st.none() {
                            d_other[(other, y)] += prob;
                        }
                    }
                }
            }
        }
    }

    let m = segment_moments(conv, segments);
    for (t, &y) in gold.iter().enumerate() {
        d_em[(t, y)] -= 1.0;
        if let Some(sp) = m.self_prev[t] {
            d_self[(gold[sp], y)] -= 1.0;
        }
        if let Some(op) = m.other_prev[t] {
            d_other[(gold[op], y)] -= 1.0;
        }
    }

    Ok(CrfGradients {
        loss: (log_z - score).max(0.0),
        emissions: d_em,
        self_trans: d_self,
        other_trans: d_other,
    })
}

/// Max-product tables, computed suffix-first so decoding runs forward.
pub fn viterbi_tables(
    conv: &Conversation,
    pots: &CrfPotentials,
    segments: &[DyadicSegment],
) -> Result<ViterbiTables> {
    let k = pots.check(conv)?;
    let st = States { k };
    let w = st.width();
    let roles = roles(conv, segments)?;
    let mut delta = Vec::with_capacity(segments.len());
    let mut psi = Vec::with_capacity(segments.len());
    let mut best_score = 0.0;
    for (seg, r) in segments.iter().zip(&roles) {
        let n = r.len();
        let mut d_seg = vec![Vec::new(); n];
        let mut p_seg = vec![Vec::new(); n];
        let mut after = vec![0.0; st.count()];
        for i in (0..n).rev() {
            let t = seg.start + i;
            let role = r[i];
            let mut before = vec![f64::NEG_INFINITY; st.count()];
            let mut choice = vec![0usize; st.count()];
            for p in 0..w {
                for q in 0..w {
                    let (own, other) = st.split(role, p, q);
                    let idx = st.index(p, q);
                    for y in 0..k {
                        let v = step_score(pots, st, t, own, other, y)
                            + after[st.advance(role, p, q, y)];
                        if v > before[idx] {
                            before[idx] = v;
                            choice[idx] = y;
                        }
                    }
                }
            }
            d_seg[i] = before.clone();
            p_seg[i] = choice;
            after = before;
        }
        best_score += after[st.index(st.none(), st.none())];
        delta.push(d_seg.iter().map(|v| st.to_matrix(v)).collect());
        psi.push(p_seg);
    }
    Ok(ViterbiTables {
        delta,
        psi,
        best_score,
    })
}

/// Exact argmax labeling; among equal-score labelings the lexicographically
/// smallest one (earliest position first) is returned.
pub fn viterbi_decode(
    conv: &Conversation,
    pots: &CrfPotentials,
    segments: &[DyadicSegment],
) -> Result<Vec<usize>> {
    let tables = viterbi_tables(conv, pots, segments)?;
    let st = States {
        k: pots.num_labels(),
    };
    let roles = roles(conv, segments)?;
    let mut labels = Vec::with_capacity(conv.len());
    for (s, r) in roles.iter().enumerate() {
        let (mut p, mut q) = (st.none(), st.none());
        for (i, &role) in r.iter().enumerate() {
            let y = tables.psi[s][i][st.index(p, q)];
            labels.push(y);
            match role {
                Role::P => p = y,
                Role::Q => q = y,
            }
        }
    }
    Ok(labels)
}
