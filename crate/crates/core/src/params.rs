//! Named parameter registry shared by cells, models, the optimizer and checkpoints.

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Biases are exempt from weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub role: ParamRole,
}

/// Insertion-ordered set of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, role: ParamRole) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("parameter `{name}` registered twice")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, role });
        Ok(())
    }

    /// Uniform in `[-scale, scale]`.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        scale: f64,
        rng: &mut R,
    ) -> Result<()> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.gen_range(-scale..=scale)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), values)?, ParamRole::Weight)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i].value)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars across all tensors.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Record every tensor as a leaf; `trainable` leaves collect gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable))
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// Overwrite values from another store with identical names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .get(&p.name)
                .ok_or_else(|| Error::Contract(format!("missing parameter `{}`", p.name)))?;
            if src.shape() != p.value.shape() {
                return Err(Error::Contract(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name,
                    src.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.clone();
        }
        Ok(())
    }
}

/// Tape variables for the tensors of a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    /// Pair names with existing tape variables.
    pub fn from_parts(names: &[String], vars: &[Var]) -> Result<Self> {
        if names.len() != vars.len() {
            return Err(Error::Contract(format!(
                "{} names for {} variables",
                names.len(),
                vars.len()
            )));
        }
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Bound {
            vars: vars.to_vec(),
            index,
        })
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Contract(format!("no parameter named `{name}`")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
