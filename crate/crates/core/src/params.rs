//! Parameter containers.
//!
//! Layer structs are generic over their leaf type `P`: `Tensor` for owned
//! weights, [`ParamId`] for a layout into a [`ParamStore`], and [`Var`] once
//! bound to a tape. [`ParamTree::map_with`] converts between them while
//! handing out stable dotted names.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

pub trait ParamTree {
    type Leaf;
    type With<Q>;

    fn map_with<Q>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(String, &Self::Leaf) -> Q,
    ) -> Self::With<Q>;

    /// Creates one tape leaf per tensor.
    fn bind(&self, tape: &mut Tape) -> Self::With<Var>
    where
        Self: ParamTree<Leaf = Tensor>,
    {
        self.map_with("", &mut |_, t| tape.leaf(t.clone()))
    }

    fn count(&self) -> usize
    where
        Self: ParamTree<Leaf = Tensor>,
    {
        let mut n = 0;
        self.map_with("", &mut |_, t| n += t.len());
        n
    }

    /// Leaves in traversal order.
    fn leaves(&self) -> Vec<Self::Leaf>
    where
        Self::Leaf: Clone,
    {
        let mut out = Vec::new();
        self.map_with("", &mut |_, p| out.push(p.clone()));
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<P> ParamTree for Vec<P>
where
    P: ParamTree,
{
    type Leaf = P::Leaf;
    type With<Q> = Vec<P::With<Q>>;

    fn map_with<Q>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(String, &Self::Leaf) -> Q,
    ) -> Self::With<Q> {
        self.iter()
            .enumerate()
            .map(|(i, p)| p.map_with(&join(prefix, &i.to_string()), f))
            .collect()
    }
}

/// Flat, named, ordered parameter storage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: String, value: Tensor) -> ParamId {
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Registers every tensor of `tree`, returning its layout.
    pub fn register<T>(&mut self, tree: &T, prefix: &str) -> T::With<ParamId>
    where
        T: ParamTree<Leaf = Tensor>,
    {
        tree.map_with(prefix, &mut |name, t| self.push(name, t.clone()))
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

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// One tape leaf per stored tensor, indexable by `ParamId.0`.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Replaces values in place, checking names and shapes line up.
    pub fn load(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.values.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} arrays, found {}",
                self.values.len(),
                named.len()
            )));
        }
        for ((name, t), (want, slot)) in named
            .into_iter()
            .zip(self.names.iter().zip(self.values.iter_mut()))
        {
            if &name != want {
                return Err(Error::Checkpoint(format!(
                    "array `{name}` found where `{want}` was expected"
                )));
            }
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "array `{name}` has shape {:?}, configuration needs {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }
}
