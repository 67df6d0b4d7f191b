use std::collections::BTreeMap;
use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::BatchStats;
use crate::tensor::{Real, Shape, Tensor};

/// Optimizer group; the encoder and decoder train at different base rates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Encoder,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable(Group),
    RunningMean,
    RunningVar,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Arc<Tensor<T>>,
    pub kind: ParamKind,
}

impl<T> Param<T> {
    pub fn group(&self) -> Option<Group> {
        match self.kind {
            ParamKind::Trainable(g) => Some(g),
            _ => None,
        }
    }
}

/// Every named tensor of a model: weights, biases, batch-norm affine parameters and
/// running statistics. Names are dotted layer paths.
#[derive(Clone, Debug, Default)]
pub struct ParameterSet<T> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Real> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: String, value: Tensor<T>, kind: ParamKind) {
        let prev = self.entries.insert(name.clone(), Param { value: Arc::new(value), kind });
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries.get(name).map(|p| &*p.value).ok_or_else(|| Error::MissingParameter(name.into()))
    }

    /// Mutable access; copies the tensor first if a tape still shares it.
    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|p| Arc::make_mut(&mut p.value))
            .ok_or_else(|| Error::MissingParameter(name.into()))
    }

    /// Replaces a tensor, keeping its kind. The shape must match.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self.entries.get_mut(name).ok_or_else(|| Error::MissingParameter(name.into()))?;
        if p.value.shape() != value.shape() {
            return Err(Error::ParameterShape { name: name.into(), expected: p.value.shape(), found: value.shape() });
        }
        p.value = Arc::new(value);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.iter().filter(|(_, p)| p.group().is_some())
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|(_, p)| p.value.numel()).sum()
    }

    pub fn group_count(&self, group: Group) -> usize {
        self.trainable().filter(|(_, p)| p.group() == Some(group)).map(|(_, p)| p.value.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| (k.clone(), Param { value: Arc::new(p.value.cast()), kind: p.kind }))
                .collect(),
        }
    }

    /// Registers every tensor on `tape`; trainable tensors require gradients.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, p)| (k.clone(), tape.leaf_shared(p.value.clone(), p.group().is_some())))
            .collect();
        Bound { vars }
    }

    /// Moves the running statistics of every batch-norm layer towards a batch.
    pub fn apply_batch_stats(&mut self, stats: &[(String, BatchStats<T>)], momentum: f64) -> Result<()> {
        let momentum = T::from_f64_lossy(momentum);
        for (layer, s) in stats {
            let mean_name = format!("{layer}.running_mean");
            let var_name = format!("{layer}.running_var");
            let mut mean = self.tensor(&mean_name)?.clone();
            let mut var = self.tensor(&var_name)?.clone();
            s.update_running(mean.data_mut(), var.data_mut(), momentum);
            self.set(&mean_name, mean)?;
            self.set(&var_name, var)?;
        }
        Ok(())
    }

    /// Compares names and shapes against `expected`, reporting the first difference.
    pub fn check_compatible<U: Real>(&self, expected: &ParameterSet<U>) -> Result<()> {
        for (name, p) in expected.iter() {
            match self.entries.get(name) {
                None => return Err(Error::MissingParameter(name.into())),
                Some(q) if q.value.shape() != p.value.shape() => {
                    return Err(Error::ParameterShape {
                        name: name.into(),
                        expected: p.value.shape(),
                        found: q.value.shape(),
                    })
                }
                _ => {}
            }
        }
        if let Some(extra) = self.entries.keys().find(|k| expected.get(k).is_none()) {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }

    pub fn shapes(&self) -> Vec<(String, Shape)> {
        self.entries.iter().map(|(k, p)| (k.clone(), p.value.shape())).collect()
    }
}

/// Parameter names mapped to their tape handles.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound { vars: pairs.into_iter().collect() }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::MissingParameter(name.into()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}
