use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Scalar, Tensor, Var};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which regularization family a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Embedding matrix, and the output matrix when it is not tied.
    Embedding,
    OutputBias,
    /// Input-to-gate weights of the recurrent layers.
    RecInput,
    /// Hidden-to-gate weights of the recurrent layers.
    Recurrent,
    RecBias,
    Mogrifier,
    MogrifierBias,
    Dual,
    DualBias,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
    /// Allocated on first accumulation.
    pub grad: Option<Tensor<T>>,
    /// First and second moment slots, allocated by the optimizer.
    pub moments: Option<(Tensor<T>, Tensor<T>)>,
}

/// Ordered registry of named parameters. Tied parameters are stored once;
/// the alias table maps the secondary name to the canonical entry.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
    aliases: BTreeMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
            aliases: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, group: ParamGroup, value: Tensor<T>) -> Result<ParamId> {
        if self.by_name.contains_key(name) || self.aliases.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            group,
            value,
            grad: None,
            moments: None,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn alias(&mut self, alias: &str, target: ParamId) -> Result<()> {
        if self.by_name.contains_key(alias) || self.aliases.contains_key(alias) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name `{alias}`"
            )));
        }
        self.aliases.insert(alias.to_string(), target);
        Ok(())
    }

    /// Resolves a canonical name or an alias.
    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name
            .get(name)
            .or_else(|| self.aliases.get(name))
            .copied()
    }

    pub fn aliases(&self) -> impl Iterator<Item = (&str, ParamId)> {
        self.aliases.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.value(id))
    }

    /// Canonical parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars; tied storage counts once.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Leaf for this parameter on a tape.
    pub fn leaf<'a>(&'a self, g: &mut Graph<'a, T>, id: ParamId) -> Var {
        g.param(id.0, &self.params[id.0].value)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn has_grads(&self) -> bool {
        self.params.iter().any(|p| p.grad.is_some())
    }

    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.params() {
            let p = &mut self.params[id];
            match &mut p.grad {
                Some(existing) => existing.add_assign(g),
                slot @ None => *slot = Some(g.clone()),
            }
        }
    }

    pub fn reset_moments(&mut self) {
        for p in &mut self.params {
            p.moments = None;
        }
    }

    pub fn zero_values(&mut self) {
        for p in &mut self.params {
            p.value.fill(T::zero());
        }
    }

    /// Copy at another precision; gradients and moments are dropped.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                    grad: None,
                    moments: None,
                })
                .collect(),
            by_name: self.by_name.clone(),
            aliases: self.aliases.clone(),
        }
    }

    /// Bitwise equality of parameter names and values.
    pub fn same_values(&self, other: &ParamStore<T>) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .values()
                        .iter()
                        .zip(b.value.values())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}
