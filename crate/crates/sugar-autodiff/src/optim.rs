use ndarray::ArrayD;

use crate::params::{GradAccum, ParamStore};

/// SGD with classical momentum: v = m*v + g; p -= lr * v.
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Option<ArrayD<f64>>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, store: &ParamStore) -> Self {
        Self {
            lr,
            momentum,
            velocity: vec![None; store.len()],
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradAccum) {
        for id in store.trainable_ids() {
            let Some(g) = grads.get(id) else { continue };
            let v = self.velocity[id.0].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            v.zip_mut_with(g, |v, g| *v = self.momentum * *v + g);
            let lr = self.lr;
            store.value_mut(id).zip_mut_with(v, |p, v| *p -= lr * v);
        }
    }
}

/// Adam with bias correction.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Option<ArrayD<f64>>>,
    v: Vec<Option<ArrayD<f64>>>,
}

impl Adam {
    pub fn new(lr: f64, store: &ParamStore) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![None; store.len()],
            v: vec![None; store.len()],
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradAccum) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in store.trainable_ids() {
            let Some(g) = grads.get(id) else { continue };
            let m = self.m[id.0].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self.v[id.0].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            m.zip_mut_with(g, |m, g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let p = store.value_mut(id);
            for ((p, m), v) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
