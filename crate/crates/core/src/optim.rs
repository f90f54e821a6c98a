//! Adam with decoupled weight decay and one learning rate per parameter group.

use crate::model::{param_group, ModelParams, ParamGroup};
use crate::numerics::Matrix;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr_ext: f64,
    pub lr_cls: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Ext => self.lr_ext,
            ParamGroup::Cls => self.lr_cls,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: ModelParams<Matrix>,
    pub second: ModelParams<Matrix>,
}

impl AdamState {
    pub fn new(params: &ModelParams<Matrix>) -> Self {
        Self {
            step: 0,
            first: params.zeros_like(),
            second: params.zeros_like(),
        }
    }
}

/// One update. Each coordinate first shrinks by `1 − lr·wd`, then moves by
/// the bias-corrected Adam direction.
pub fn optimizer_step(params: &mut ModelParams<Matrix>, grads: &ModelParams<Matrix>, cfg: &AdamConfig, state: &mut AdamState) {
    state.step += 1;
    let step = i32::try_from(state.step).unwrap_or(i32::MAX);
    let c1 = 1.0 - BETA1.powi(step);
    let c2 = 1.0 - BETA2.powi(step);

    let g = grads.leaves();
    let mut first = state.first.leaves_mut();
    let mut second = state.second.leaves_mut();

    let mut i = 0;
    params.visit_mut(&mut |name, p| {
        let lr = cfg.lr(param_group(name));
        let decay = 1.0 - lr * cfg.weight_decay;
        let m = first[i].data_mut();
        let v = second[i].data_mut();
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g[i].data()).enumerate() {
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w = *w * decay - lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
        i += 1;
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeadKind, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> ModelParams<Matrix> {
        let cfg = ModelConfig {
            head: HeadKind::SkipCrf,
            d_model: 4,
            heads: 2,
            d_ff: 4,
            immha_depth: 1,
            d_h: 2,
            diagru_depth: 1,
            max_len: 4,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ModelParams::init(&cfg, 3, 2, &mut rng).unwrap();
        p.visit_mut(&mut |_, m| {
            for (i, v) in m.data_mut().iter_mut().enumerate() {
                *v += 0.1 + i as f64 * 0.01;
            }
        });
        p
    }

    fn fold(p: &ModelParams<Matrix>, q: &ModelParams<Matrix>, f: impl Fn(&str, f64, f64)) {
        let mut rhs = Vec::new();
        q.visit(&mut |_, m| rhs.push(m.clone()));
        let mut i = 0;
        p.visit(&mut |name, m| {
            for (a, b) in m.data().iter().zip(rhs[i].data()) {
                f(name, *a, *b);
            }
            i += 1;
        });
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let p0 = setup();
        let mut p = p0.clone();
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig { lr_ext: 0.1, lr_cls: 0.2, weight_decay: 0.0 };
        optimizer_step(&mut p, &p0.zeros_like(), &cfg, &mut st);
        assert_eq!(p, p0);
    }

    #[test]
    fn first_step_moves_by_learning_rate_times_sign() {
        let p0 = setup();
        let mut p = p0.clone();
        let mut g = p0.clone();
        g.visit_mut(&mut |_, m| {
            for (i, v) in m.data_mut().iter_mut().enumerate() {
                *v = if i % 2 == 0 { 0.5 + i as f64 } else { -2.0 };
            }
        });
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig { lr_ext: 1e-3, lr_cls: 5e-3, weight_decay: 0.0 };
        optimizer_step(&mut p, &g, &cfg, &mut st);
        let mut moved = p.clone();
        moved.add_scaled(&p0, -1.0);
        fold(&moved, &g, |name, d, gj| {
            let lr = cfg.lr(param_group(name));
            assert!((d + lr * gj.signum()).abs() < 1e-10 * lr.max(1.0) + lr * 1e-7);
        });
    }

    #[test]
    fn decay_alone_shrinks_by_the_decoupled_factor() {
        let p0 = setup();
        let mut p = p0.clone();
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig { lr_ext: 0.01, lr_cls: 0.02, weight_decay: 0.5 };
        optimizer_step(&mut p, &p0.zeros_like(), &cfg, &mut st);
        fold(&p, &p0, |name, after, before| {
            let f = 1.0 - cfg.lr(param_group(name)) * 0.5;
            assert!((after - before * f).abs() < 1e-15);
        });
    }
}
