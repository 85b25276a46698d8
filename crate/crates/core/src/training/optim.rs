use std::collections::HashMap;

use super::config::TrainConfig;
use crate::model::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Linear warmup from `warmup_lr` to `peak_lr`, then cosine decay to
/// `min_lr` at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig, total_steps: usize) -> f64 {
    if step < cfg.warmup_steps {
        let t = step as f64 / cfg.warmup_steps as f64;
        return cfg.warmup_lr * (1.0 - t) + cfg.peak_lr * t;
    }
    let span = total_steps.saturating_sub(cfg.warmup_steps);
    if span == 0 {
        return cfg.peak_lr;
    }
    let p = ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0);
    let c = 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
    cfg.min_lr * (1.0 - c) + cfg.peak_lr * c
}

/// Linear ramp reaching `w_max` after `ramp_epochs` epochs.
pub fn soft_label_weight(step: usize, steps_per_epoch: usize, w_max: f64, ramp_epochs: f64) -> f64 {
    assert!(steps_per_epoch > 0, "steps_per_epoch must be positive");
    let progress = step as f64 / (ramp_epochs * steps_per_epoch as f64);
    (w_max * progress).min(w_max)
}

/// `θ_m ← m·θ_m + (1−m)·θ` for every mirrored array.
pub fn momentum_update<S: Scalar>(params: &ParamStore<S>, mparams: &mut ParamStore<S>, m: f64) {
    let keep = S::from_f64_lossy(m);
    let mix = S::from_f64_lossy(1.0 - m);
    for (name, mt) in mparams.iter_mut() {
        let t = params.expect(name);
        assert_eq!(t.shape(), mt.shape(), "momentum array {name} shape drifted");
        for (a, &b) in mt.data_mut().iter_mut().zip(t.data()) {
            *a = keep * *a + mix * b;
        }
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [(String, Tensor<S>)], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|(_, g)| g.data().iter()).map(|x| x.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = S::from_f64_lossy(max_norm / (norm + 1e-6));
        for (_, g) in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[derive(Debug, Clone)]
struct Moments<S> {
    m: Vec<S>,
    v: Vec<S>,
    steps: u64,
}

/// Adam with decoupled weight decay. Only parameters that receive a
/// gradient are touched; each keeps its own step count.
#[derive(Debug, Clone, Default)]
pub struct AdamW<S> {
    state: HashMap<String, Moments<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new() -> Self {
        Self { state: HashMap::new() }
    }

    /// Rank-1 arrays (biases, norm parameters, temperature) are not decayed.
    pub fn decays(t: &Tensor<S>) -> bool {
        t.shape().len() > 1
    }

    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &[(String, Tensor<S>)], lr: f64, cfg: &TrainConfig) {
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        for (name, grad) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![S::zero(); p.len()],
                v: vec![S::zero(); p.len()],
                steps: 0,
            });
            st.steps += 1;
            let bc1 = 1.0 - b1.powi(st.steps as i32);
            let bc2 = 1.0 - b2.powi(st.steps as i32);
            let step_size = S::from_f64_lossy(lr / bc1);
            let bc2_sqrt = S::from_f64_lossy(bc2.sqrt());
            let eps = S::from_f64_lossy(cfg.eps);
            let (sb1, sb2) = (S::from_f64_lossy(b1), S::from_f64_lossy(b2));
            let (one_b1, one_b2) = (S::from_f64_lossy(1.0 - b1), S::from_f64_lossy(1.0 - b2));
            let decay = if Self::decays(p) { S::from_f64_lossy(lr * cfg.weight_decay) } else { S::zero() };
            let data = p.data_mut();
            for i in 0..data.len() {
                let g = grad.data()[i];
                data[i] -= decay * data[i];
                st.m[i] = sb1 * st.m[i] + one_b1 * g;
                st.v[i] = sb2 * st.v[i] + one_b2 * g * g;
                let denom = st.v[i].sqrt() / bc2_sqrt + eps;
                data[i] -= step_size * st.m[i] / denom;
            }
        }
    }
}
