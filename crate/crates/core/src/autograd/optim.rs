use std::collections::BTreeMap;

use ndarray::ArrayD;

use super::{Float, Gradients, ParamId, ParamStore};

/// Stochastic gradient descent with classical momentum, L2 weight decay and
/// optional global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
    pub clip_norm: Option<T>,
    velocity: BTreeMap<ParamId, ArrayD<T>>,
}

impl<T: Float> Sgd<T> {
    pub fn new(lr: T, momentum: T, weight_decay: T) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            clip_norm: None,
            velocity: BTreeMap::new(),
        }
    }

    pub fn with_clip_norm(mut self, clip: Option<T>) -> Self {
        self.clip_norm = clip;
        self
    }

    /// Applies one update; returns the pre-clipping global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> T {
        let mut sq = T::zero();
        for (_, g) in grads.params() {
            sq += g.iter().fold(T::zero(), |acc, &v| acc + v * v);
        }
        let norm = sq.sqrt();
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => T::one(),
        };
        for (id, g) in grads.params() {
            let value = store.value_mut(id);
            let v = self
                .velocity
                .entry(id)
                .or_insert_with(|| ArrayD::zeros(value.raw_dim()));
            if v.shape() != value.shape() {
                *v = ArrayD::zeros(value.raw_dim());
            }
            let (lr, mom, wd) = (self.lr, self.momentum, self.weight_decay);
            ndarray::Zip::from(&mut *v)
                .and(&mut *value)
                .and(g)
                .for_each(|v, w, &g| {
                    let d = g * scale + wd * *w;
                    *v = mom * *v + d;
                    *w -= lr * *v;
                });
        }
        norm
    }
}
