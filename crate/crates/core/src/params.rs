//! Named parameter storage and its binding onto a [`Tape`].

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::{stream_id, Pcg32};
use crate::tensor::{Shape, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    Uniform {
        fan_in: usize,
    },
    /// Uniform in `[-sqrt(6/fan_in), sqrt(6/fan_in)]`, for weights feeding a ReLU.
    He {
        fan_in: usize,
    },
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
}

impl ParamSpec {
    pub fn weight(name: impl Into<String>, shape: Shape, fan_in: usize) -> Self {
        ParamSpec {
            name: name.into(),
            shape,
            init: Init::Uniform { fan_in },
        }
    }

    pub fn relu_weight(name: impl Into<String>, shape: Shape, fan_in: usize) -> Self {
        ParamSpec {
            name: name.into(),
            shape,
            init: Init::He { fan_in },
        }
    }

    pub fn bias(name: impl Into<String>, channels: usize) -> Self {
        ParamSpec {
            name: name.into(),
            shape: [1, channels, 1, 1],
            init: Init::Zeros,
        }
    }

    /// Initial value. Each name draws from its own PCG32 stream, so a parameter's
    /// initial value depends only on `(seed, name)`.
    pub fn materialize(&self, seed: u64) -> Tensor {
        match self.init {
            Init::Zeros => Tensor::zeros(self.shape),
            Init::Uniform { fan_in } => self.uniform(seed, 1.0 / (fan_in.max(1) as f64).sqrt()),
            Init::He { fan_in } => self.uniform(seed, (6.0 / fan_in.max(1) as f64).sqrt()),
        }
    }

    fn uniform(&self, seed: u64, bound: f64) -> Tensor {
        let mut rng = Pcg32::new(seed, stream_id(&self.name));
        Tensor::uniform(self.shape, -bound, bound, &mut rng)
    }
}

/// Ordered map from parameter name to value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn from_specs(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut set = ParamSet::new();
        for spec in specs {
            set.insert(spec.name.clone(), spec.materialize(seed))?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Registers every parameter as a requires-grad leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.bind_with(tape, true)
    }

    pub fn bind_with(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), requires_grad)))
            .collect();
        Bound { vars }
    }
}

/// Parameters registered on one tape.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn scope(&self, prefix: &str) -> Scope<'_> {
        Scope {
            bound: self,
            prefix: prefix.to_string(),
        }
    }
}

/// Prefix-qualified view of a [`Bound`] set.
#[derive(Debug, Clone)]
pub struct Scope<'a> {
    bound: &'a Bound,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.bound.var(&join(&self.prefix, name))
    }

    pub fn nest(&self, name: &str) -> Scope<'a> {
        Scope {
            bound: self.bound,
            prefix: join(&self.prefix, name),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut set = ParamSet::new();
        set.insert("a", Tensor::zeros([1, 1, 1, 1])).unwrap();
        assert!(set.insert("a", Tensor::zeros([1, 1, 1, 1])).is_err());
    }

    #[test]
    fn init_depends_only_on_seed_and_name() {
        let spec = ParamSpec::weight("block.w", [4, 3, 3, 3], 27);
        let a = spec.materialize(5);
        assert_eq!(a, spec.materialize(5));
        assert_ne!(a, spec.materialize(6));
        let bound = 1.0 / 27f64.sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= bound));
        assert_eq!(
            ParamSpec::bias("b", 3).materialize(5),
            Tensor::zeros([1, 3, 1, 1])
        );
    }

    #[test]
    fn scopes_qualify_names() {
        let mut set = ParamSet::new();
        set.insert("neck.cbam.mlp1.w", Tensor::zeros([1, 1, 1, 1]))
            .unwrap();
        let mut tape = Tape::new();
        let bound = set.bind(&mut tape);
        let scope = bound.scope("neck").nest("cbam");
        assert!(scope.var("mlp1.w").is_ok());
        assert!(matches!(scope.var("mlp2.w"), Err(Error::MissingParam(_))));
        assert!(tape.requires_grad(scope.var("mlp1.w").unwrap()));
    }
}
