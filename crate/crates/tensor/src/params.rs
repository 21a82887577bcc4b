use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::{Fnv, Tensor};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<NamedTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.entries.push(NamedTensor {
            name: name.into(),
            tensor,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedTensor> {
        self.entries.iter()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::default();
        for e in &self.entries {
            for b in e.name.bytes() {
                h.write(b as u64);
            }
            h.write(e.tensor.checksum());
        }
        h.0
    }

    /// Puts every parameter on `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.entries.iter().map(|e| g.variable(e.tensor.clone())).collect())
    }

    /// Puts every parameter on `g` as a constant (inference, frozen models).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound(self.entries.iter().map(|e| g.constant(e.tensor.clone())).collect())
    }

    /// Like [`ParamStore::bind`], but the listed parameters become constants.
    pub fn bind_except(&self, g: &mut Graph, frozen: &[ParamId]) -> Bound {
        Bound(
            self.entries
                .iter()
                .enumerate()
                .map(|(i, e)| {
                    if frozen.contains(&ParamId(i)) {
                        g.constant(e.tensor.clone())
                    } else {
                        g.variable(e.tensor.clone())
                    }
                })
                .collect(),
        )
    }

    /// Overwrites values from `other`, which must have identical names and shapes.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(TensorError::Invalid {
                op: "copy_from",
                reason: format!("{} vs {} parameters", self.entries.len(), other.entries.len()),
            });
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
                return Err(TensorError::Invalid {
                    op: "copy_from",
                    reason: format!("parameter {} does not match {}", dst.name, src.name),
                });
            }
            dst.tensor = src.tensor.clone();
        }
        Ok(())
    }
}

/// Graph handles for a [`ParamStore`], indexable by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|e| Tensor::zeros(e.tensor.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update using the gradients that reached `bound`. Parameters that
    /// received no gradient (constants, unused branches) are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, bound: &Bound, grads: &Gradients) {
        let all: Vec<ParamId> = params.ids().collect();
        self.step_only(params, bound, grads, &all);
    }

    /// Like [`Adam::step`] but only updates the parameters in `ids`.
    pub fn step_only(
        &mut self,
        params: &mut ParamStore,
        bound: &Bound,
        grads: &Gradients,
        ids: &[ParamId],
    ) {
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for &id in ids {
            let Some(g) = grads.get(bound.var(id)) else {
                continue;
            };
            let p = params.get_mut(id);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for j in 0..p.len() {
                let gj = g.data()[j];
                let mj = beta1 * m.data()[j] + (1.0 - beta1) * gj;
                let vj = beta2 * v.data()[j] + (1.0 - beta2) * gj * gj;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                p.data_mut()[j] -= lr * (mj / bc1) / ((vj / bc2).sqrt() + eps);
            }
        }
    }
}

/// Uniform He initialisation for a conv weight `(C_out, C_in, k, k)`,
/// multiplied by `gain`.
pub fn conv_weight<R: Rng + ?Sized>(
    c_out: usize,
    c_in: usize,
    k: usize,
    gain: f64,
    rng: &mut R,
) -> Tensor {
    let fan_in = (c_in * k * k) as f64;
    let bound = gain * (6.0 / fan_in).sqrt();
    Tensor::uniform(vec![c_out, c_in, k, k], -bound, bound, rng)
}
