//! Named parameter collections.

use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Ordered set of uniquely named tensors with optional gradient buffers.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::contract("parameter names must be non-empty"));
        }
        if self.names.contains(&name) {
            return Err(Error::DuplicateName(name));
        }
        self.names.push(name);
        self.values.push(value);
        self.grads.push(None);
        Ok(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn value(&self, i: usize) -> &Tensor<T> {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.values[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn grad(&self, i: usize) -> Option<&Tensor<T>> {
        self.grads[i].as_ref()
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Register every parameter in `g`; `trainable = false` records constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|v| {
                if trainable {
                    g.variable(v.clone())
                } else {
                    g.constant(v.clone())
                }
            })
            .collect()
    }

    /// Add `grads` (one per parameter, in order) into the gradient buffers.
    pub fn accumulate_grads(&mut self, grads: Vec<Tensor<T>>) -> Result<()> {
        if grads.len() != self.values.len() {
            return Err(Error::contract(format!(
                "expected {} gradients, got {}",
                self.values.len(),
                grads.len()
            )));
        }
        for ((slot, g), v) in self.grads.iter_mut().zip(grads).zip(&self.values) {
            if g.shape() != v.shape() {
                return Err(Error::dimension("accumulate_grads", v.shape(), g.shape()));
            }
            match slot {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Pull leaf gradients from a graph after [`Graph::backward`]. Bound
    /// parameters the loss never reached receive zeros.
    pub fn collect_grads(&mut self, g: &Graph<T>, vars: &[Var]) -> Result<()> {
        let grads = vars
            .iter()
            .zip(&self.values)
            .map(|(v, p)| {
                g.grad(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.shape()))
            })
            .collect();
        self.accumulate_grads(grads)
    }

    pub fn take_grad(&mut self, i: usize) -> Option<Tensor<T>> {
        self.grads[i].take()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn has_grads(&self) -> bool {
        self.grads.iter().any(Option::is_some)
    }

    /// SHA-256 over names, shapes and value bits.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            h.update(name.as_bytes());
            for &d in v.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in v.data() {
                h.update(x.bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.bitwise_eq(b))
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            grads: vec![None; self.values.len()],
        }
    }

    /// Frozen copy without gradient buffers.
    pub fn snapshot(&self) -> Self {
        ParamStore {
            names: self.names.clone(),
            values: self.values.clone(),
            grads: vec![None; self.values.len()],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Replace values by name from `(name, tensor)` pairs; every parameter must
    /// be present with a matching shape.
    pub fn load_from<'a>(
        &mut self,
        named: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
    ) -> Result<()> {
        let mut seen = vec![false; self.len()];
        for (name, t) in named {
            let Some(i) = self.index_of(name) else {
                continue;
            };
            if t.shape() != self.values[i].shape() {
                return Err(Error::dimension(
                    "load parameters",
                    self.values[i].shape(),
                    t.shape(),
                ));
            }
            self.values[i] = t.clone();
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::contract(format!(
                "parameter `{}` missing from source",
                self.names[i]
            )));
        }
        Ok(())
    }
}
