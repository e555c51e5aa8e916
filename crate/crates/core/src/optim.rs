//! Adam optimizer with per-parameter-set state.

use crate::netblocks::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        // Momentum 0.5 and lr 2e-4, the training defaults of both stages.
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam<S> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(cfg: AdamConfig, params: &ParamSet<S>) -> Self {
        let zeros: Vec<Tensor<S>> = params
            .entries
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Rebuild from checkpointed state.
    pub fn restore(cfg: AdamConfig, step: u64, m: Vec<Tensor<S>>, v: Vec<Tensor<S>>) -> Self {
        Self { cfg, step, m, v }
    }

    /// One update. `grads` must align with `params.entries`.
    pub fn apply(&mut self, params: &mut ParamSet<S>, grads: &[Tensor<S>]) {
        assert_eq!(grads.len(), params.entries.len(), "gradient alignment");
        self.step += 1;
        let b1 = S::from_f64(self.cfg.beta1);
        let b2 = S::from_f64(self.cfg.beta2);
        let lr = S::from_f64(self.cfg.lr);
        let eps = S::from_f64(self.cfg.eps);
        let bc1 = S::from_f64(1.0 - self.cfg.beta1.powi(self.step as i32));
        let bc2 = S::from_f64(1.0 - self.cfg.beta2.powi(self.step as i32));
        for ((pi, (_, p)), g) in params.entries.iter_mut().enumerate().zip(grads) {
            assert_eq!(p.shape(), g.shape(), "gradient shape at param {pi}");
            let m = self.m[pi].data_mut();
            let v = self.v[pi].data_mut();
            for ((pv, &gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = b1 * *mv + (S::ONE - b1) * gv;
                *vv = b2 * *vv + (S::ONE - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
