//! Named parameter storage, initialisation and the SGD optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Scalar count of the parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    /// Records every parameter on `tape`, as a differentiable leaf when
    /// `trainable` and as a constant otherwise.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| {
                    if trainable {
                        tape.leaf(p.value.clone())
                    } else {
                        tape.constant(p.value.clone())
                    }
                })
                .collect(),
        )
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|p| {
                let (c, h, w) = p.value.shape();
                Tensor::zeros(c, h, w)
            })
            .collect()
    }
}

/// Parameters recorded on one tape.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    /// Per-parameter gradients, zero for parameters the loss does not reach.
    pub fn gradients(&self, store: &ParamStore, grads: &mut Grads) -> Vec<Tensor> {
        self.0
            .iter()
            .zip(store.iter())
            .map(|(&v, p)| {
                grads.take(v).unwrap_or_else(|| {
                    let (c, h, w) = p.value.shape();
                    Tensor::zeros(c, h, w)
                })
            })
            .collect()
    }
}

/// Uniform initialisation in `[-bound, bound]`.
pub fn uniform(rng: &mut impl Rng, c: usize, h: usize, w: usize, bound: f64) -> Tensor {
    let data = (0..c * h * w).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_vec(c, h, w, data)
}

/// He-uniform bound for a layer followed by ReLU.
pub fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Bound used for layers whose output is not rectified.
pub fn linear_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Plain SGD with optional heavy-ball momentum and L2 weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: store.zeros_like(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        for ((p, g), v) in store.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            let mut d = g.clone();
            if self.weight_decay != 0.0 {
                d.axpy(self.weight_decay, &p.value);
            }
            if self.momentum != 0.0 {
                let vd = v.data_mut();
                for (vi, di) in vd.iter_mut().zip(d.data()) {
                    *vi = self.momentum * *vi + di;
                }
                p.value.axpy(-lr, v);
            } else {
                p.value.axpy(-lr, &d);
            }
        }
    }
}

/// Poly learning-rate policy: `initial · (1 − iter / max_iter)^power`.
pub fn poly_lr(initial: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    if max_iter == 0 {
        return initial;
    }
    let frac = (iter.min(max_iter) as f64) / max_iter as f64;
    initial * (1.0 - frac).powf(power)
}
