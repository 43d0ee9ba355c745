use super::params::Bound;
use super::{Gradients, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Weight decay enters the gradient as `wd * p`.
    Adam,
    /// Weight decay shrinks the parameter before the moment update.
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn of_kind(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            ..Self::adam(lr, weight_decay)
        }
    }

    pub fn adam(lr: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            ..Self::adam(lr, weight_decay)
        }
    }
}

/// Adam-family optimizer with per-tensor moment buffers.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub cfg: OptimizerConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, store: &ParamStore) -> Self {
        let zeros = || store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Self {
            cfg,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Applies one update to every unfrozen tensor of `store`. Tensors the
    /// loss does not reach are treated as having zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, bound: &Bound, grads: &Gradients) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.is_frozen(id) {
                continue;
            }
            let g = grads.get(bound[id]);
            let p = store.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for i in 0..p.len() {
                let mut gi = g.map_or(0.0, |g| g[i]);
                match c.kind {
                    OptimizerKind::Adam => gi += c.weight_decay * p[i],
                    OptimizerKind::AdamW => p[i] *= 1.0 - c.lr * c.weight_decay,
                }
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};

    fn quadratic_descent(cfg: OptimizerConfig) -> f64 {
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::new(&[2], vec![3.0, -2.0]).unwrap());
        let mut opt = Optimizer::new(cfg, &s);
        for _ in 0..500 {
            let mut g = Graph::new();
            let b = s.bind(&mut g);
            let loss = g.sum_squares(b[x]);
            let grads = g.backward(loss).unwrap();
            opt.step(&mut s, &b, &grads);
        }
        s.get(x).max_abs()
    }

    #[test]
    fn adam_and_adamw_minimise_quadratic() {
        assert!(quadratic_descent(OptimizerConfig::adam(0.05, 0.0)) < 1e-2);
        assert!(quadratic_descent(OptimizerConfig::adamw(0.05, 1e-3)) < 1e-2);
    }

    #[test]
    fn first_adam_step_has_length_lr() {
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::scalar(1.0));
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1, 0.0), &s);
        let mut g = Graph::new();
        let b = s.bind(&mut g);
        let loss = g.scale(b[x], 5.0);
        let grads = g.backward(loss).unwrap();
        opt.step(&mut s, &b, &grads);
        assert!((s.get(x).item() - 0.9).abs() < 1e-9);
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::scalar(2.0));
        let mut opt = Optimizer::new(OptimizerConfig::adamw(0.1, 0.5), &s);
        let mut g = Graph::new();
        let b = s.bind(&mut g);
        // zero gradient: only the decay acts
        let loss = g.scale(b[x], 0.0);
        let grads = g.backward(loss).unwrap();
        opt.step(&mut s, &b, &grads);
        assert!((s.get(x).item() - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }
}
