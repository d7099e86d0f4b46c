use std::collections::HashMap;

use crate::error::{invalid, Result};

use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};

/// Index of a parameter inside its [`ParameterSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// One named tensor plus its gradient and Adam moment slots.
///
/// Buffers (`trainable == false`) are stored alongside parameters so that
/// checkpoints carry them, but they are never bound as differentiable leaves
/// and the optimizer skips them.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    pub m: Tensor<F>,
    pub v: Tensor<F>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<F> {
    params: Vec<Param<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> Default for ParameterSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape handles for every entry of a [`ParameterSet`], valid for one tape.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl<F: Real> ParameterSet<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn insert(&mut self, name: &str, value: Tensor<F>, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(invalid(format!("duplicate parameter name `{name}`")));
        }
        let zeros = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.to_string(),
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
            trainable,
        });
        self.index.insert(name.to_string(), self.params.len() - 1);
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add(&mut self, name: &str, value: Tensor<F>) -> Result<ParamId> {
        self.insert(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<F>) -> Result<ParamId> {
        self.insert(name, value, false)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn param(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn get(&self, name: &str) -> Option<&Param<F>> {
        self.id(name).map(|id| self.param(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = F::zero());
        }
    }

    /// Places every entry on `tape`: parameters as leaves, buffers as inputs.
    pub fn bind(&self, tape: &mut Tape<F>) -> Result<Bound> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if p.trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.input(p.value.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound(vars))
    }

    /// Adds the tape's gradients into the gradient slots.
    pub fn accumulate_grads(&mut self, tape: &Tape<F>, bound: &Bound) {
        for (p, &v) in self.params.iter_mut().zip(&bound.0) {
            if let (true, Some(g)) = (p.trainable, tape.grad(v)) {
                p.grad.add_assign(g);
            }
        }
    }

    pub fn cast<G: Real>(&self) -> ParameterSet<G> {
        ParameterSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    m: p.m.cast(),
                    v: p.v.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Flattened trainable values, in insertion order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.value.to_f64())
            .collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.grad.to_f64())
            .collect()
    }

    /// Overwrites trainable values from a flat vector (inverse of [`Self::flat_values`]).
    pub fn set_flat_values(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_trainable() {
            return Err(invalid(format!(
                "expected {} values, got {}",
                self.num_trainable(),
                flat.len()
            )));
        }
        let mut off = 0;
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            let n = p.value.len();
            for (dst, &src) in p.value.data_mut().iter_mut().zip(&flat[off..off + n]) {
                *dst = F::of(src);
            }
            off += n;
        }
        Ok(())
    }
}
