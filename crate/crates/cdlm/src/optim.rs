//! SGD with momentum (variational parameters) and Adam (generation
//! parameters), implemented over named parameter slots.

use std::collections::BTreeMap;

use crate::model::Param;
use crate::num::Scalar;

/// Classic momentum: v ← m·v + g; p ← p − lr·v.
#[derive(Clone, Debug)]
pub struct SgdMomentum<T> {
    pub momentum: T,
    pub velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(momentum: T) -> Self {
        SgdMomentum {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, lr: T, params: &mut [&mut Param<T>], grads: &BTreeMap<String, Vec<T>>) {
        for p in params {
            let Some(g) = grads.get(&p.name) else { continue };
            let v = self
                .velocity
                .entry(p.name.clone())
                .or_insert_with(|| vec![T::zero(); p.data.len()]);
            for ((pv, vv), &gv) in p.data.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                *vv = self.momentum * *vv + gv;
                *pv = *pv - lr * *vv;
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub t: u64,
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(beta1: T, beta2: T, eps: T) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, lr: T, params: &mut [&mut Param<T>], grads: &BTreeMap<String, Vec<T>>) {
        self.t += 1;
        let t = T::from_f64_c(self.t as f64);
        let bc1 = T::one() - self.beta1.powf(t);
        let bc2 = T::one() - self.beta2.powf(t);
        for p in params {
            let Some(g) = grads.get(&p.name) else { continue };
            let m = self
                .m
                .entry(p.name.clone())
                .or_insert_with(|| vec![T::zero(); p.data.len()]);
            let v = self
                .v
                .entry(p.name.clone())
                .or_insert_with(|| vec![T::zero(); p.data.len()]);
            for (((pv, mv), vv), &gv) in
                p.data.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.iter())
            {
                *mv = self.beta1 * *mv + (T::one() - self.beta1) * gv;
                *vv = self.beta2 * *vv + (T::one() - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv = *pv - lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
