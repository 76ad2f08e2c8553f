//! Named parameter storage.
//!
//! Every parameter name starts with its group, e.g. `lora.blocks.0.q.A`.
//! The freeze auditor and the optimizer work on groups only.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Four-channel patch projection and positional embedding.
    PatchEmbed,
    /// Transformer blocks and neck of the image encoder.
    Base,
    Lora,
    Depth,
    Decoder,
    Prompt,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::PatchEmbed,
        ParamGroup::Base,
        ParamGroup::Lora,
        ParamGroup::Depth,
        ParamGroup::Decoder,
        ParamGroup::Prompt,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::PatchEmbed => "patch_embed",
            ParamGroup::Base => "base",
            ParamGroup::Lora => "lora",
            ParamGroup::Depth => "depth",
            ParamGroup::Decoder => "decoder",
            ParamGroup::Prompt => "prompt",
        }
    }

    pub fn of(name: &str) -> Result<Self> {
        let prefix = name.split('.').next().unwrap_or_default();
        prefix.parse().map_err(|_| Error::UnknownParameter(name.to_string()))
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.prefix() == s)
            .ok_or_else(|| Error::UnknownParameter(s.to_string()))
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            lookup: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.lookup.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub(crate) fn data_at_mut(&mut self, index: usize) -> &mut [T] {
        self.tensors[index].data_mut()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|i| ParamId(*i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn group(&self, id: ParamId) -> Result<ParamGroup> {
        ParamGroup::of(&self.names[id.0])
    }

    /// Element count per group.
    pub fn group_sizes(&self) -> Result<HashMap<ParamGroup, usize>> {
        let mut out = HashMap::new();
        for id in self.ids() {
            *out.entry(self.group(id)?).or_insert(0) += self.get(id).len();
        }
        Ok(out)
    }

    /// Registers every parameter as a leaf of `tape`; `trainable[i]` marks
    /// which leaves need gradients.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: &[bool]) -> Bound {
        let vars = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| tape.leaf(t.clone(), trainable.get(i).copied().unwrap_or(false)))
            .collect();
        Bound { vars }
    }

    /// Replaces a tensor with one of the same shape.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if self.get(id).shape() != tensor.shape() {
            return Err(Error::Shape(format!(
                "{name}: stored {:?}, new {:?}",
                self.get(id).shape(),
                tensor.shape()
            )));
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }
}

/// Tape handles of the parameters for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}
