use std::collections::BTreeMap;

use super::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One momentum-SGD update with decoupled weight decay:
/// `v ← μ·v + g`, `w ← w − lr·v − lr·wd·w`.
pub fn sgd_step<T: Scalar>(param: &mut Tensor<T>, grad: &Tensor<T>, velocity: &mut [T], cfg: SgdConfig) {
    let lr = T::of(cfg.lr);
    let mu = T::of(cfg.momentum);
    let decay = T::of(cfg.lr * cfg.weight_decay);
    for ((w, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(velocity.iter_mut()) {
        *v = mu * *v + g;
        *w = *w - lr * *v - decay * *w;
    }
}

/// Momentum SGD with velocity buffers keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Sgd<T> {
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new() -> Self {
        Self {
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, key: &str, param: &mut Tensor<T>, grad: &Tensor<T>, cfg: SgdConfig) {
        let v = self
            .velocity
            .entry(key.to_string())
            .or_insert_with(|| vec![T::zero(); param.len()]);
        sgd_step(param, grad, v, cfg);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct AdamSlot<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

/// Adam with bias correction; moment buffers keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Adam<T> {
    slots: BTreeMap<String, AdamSlot<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new() -> Self {
        Self { slots: BTreeMap::new() }
    }

    pub fn step(&mut self, key: &str, param: &mut Tensor<T>, grad: &Tensor<T>, cfg: AdamConfig) {
        let n = param.len();
        let slot = self.slots.entry(key.to_string()).or_insert_with(|| AdamSlot {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        });
        slot.t += 1;
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let c1 = T::one() - b1.powi(slot.t);
        let c2 = T::one() - b2.powi(slot.t);
        let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
        for (k, (w, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
            slot.m[k] = b1 * slot.m[k] + (T::one() - b1) * g;
            slot.v[k] = b2 * slot.v[k] + (T::one() - b2) * g * g;
            let mhat = slot.m[k] / c1;
            let vhat = slot.v[k] / c2;
            *w = *w - lr * mhat / (vhat.sqrt() + eps);
        }
    }
}
