//! Named parameter collections, their initialization, and binding them to a
//! tape for one forward pass.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Normal(0, 0.02) truncated at two standard deviations.
    TruncNormal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub(crate) fn linear_specs(prefix: &str, in_f: usize, out_f: usize) -> [ParamSpec; 2] {
    [
        ParamSpec::new(format!("{prefix}.weight"), &[out_f, in_f], Init::TruncNormal),
        ParamSpec::new(format!("{prefix}.bias"), &[out_f], Init::Zeros),
    ]
}

pub(crate) fn norm_specs(prefix: &str, c: usize) -> [ParamSpec; 2] {
    [
        ParamSpec::new(format!("{prefix}.weight"), &[c], Init::Ones),
        ParamSpec::new(format!("{prefix}.bias"), &[c], Init::Zeros),
    ]
}

pub(crate) fn conv_specs(prefix: &str, cin: usize, cout: usize, k: usize, bias: bool) -> Vec<ParamSpec> {
    let mut specs = vec![ParamSpec::new(
        format!("{prefix}.weight"),
        &[cout, cin, k, k],
        Init::TruncNormal,
    )];
    if bias {
        specs.push(ParamSpec::new(format!("{prefix}.bias"), &[cout], Init::Zeros));
    }
    specs
}

pub fn count(specs: &[ParamSpec]) -> usize {
    specs.iter().map(ParamSpec::numel).sum()
}

/// Draws from Normal(0, std) rejecting samples beyond `2 * std`.
pub fn trunc_normal(rng: &mut impl Rng, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Ordered map from unique parameter name to tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Initializes every spec in order from one seeded stream.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for spec in specs {
            let t = match spec.init {
                Init::TruncNormal => {
                    Tensor::from_fn(&spec.shape, |_| trunc_normal(&mut rng, INIT_STD))?
                }
                Init::Zeros => Tensor::zeros(&spec.shape)?,
                Init::Ones => Tensor::ones(&spec.shape)?,
            };
            store.insert(spec.name.clone(), t)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: String, t: Tensor) -> Result<()> {
        if self.tensors.contains_key(&name) {
            return Err(Error::invalid("ParamStore::insert", format!("duplicate name `{name}`")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    /// Replaces an existing entry, keeping its shape.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        match self.tensors.get_mut(name) {
            Some(slot) if slot.shape() == t.shape() => {
                *slot = t;
                Ok(())
            }
            Some(slot) => Err(Error::shape(
                "ParamStore::set",
                format!("`{name}` is {:?}, got {:?}", slot.shape(), t.shape()),
            )),
            None => Err(Error::MissingParam(name.to_string())),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// True when both stores have the same names with the same shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.len() == other.len()
            && self
                .tensors
                .iter()
                .zip(other.tensors.iter())
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    /// Checks names and shapes against a spec list.
    pub fn matches_specs(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            let t = self.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::shape(
                    "ParamStore::matches_specs",
                    format!("`{}` is {:?}, expected {:?}", spec.name, t.shape(), spec.shape),
                ));
            }
        }
        if self.len() != specs.len() {
            return Err(Error::invalid(
                "ParamStore::matches_specs",
                format!("{} stored tensors but {} expected", self.len(), specs.len()),
            ));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Result<ParamStore> {
        let mut out = ParamStore::new();
        for (name, t) in self.iter() {
            out.insert(name.to_string(), Tensor::zeros(t.shape())?)?;
        }
        Ok(out)
    }

    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.len() == other.len()
            && self
                .tensors
                .iter()
                .zip(other.tensors.iter())
                .all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }
}

/// Parameters bound for one forward pass, either tracked on a tape or as
/// plain constants.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn track(store: &ParamStore, tape: &Tape) -> Self {
        ParamVars {
            vars: store
                .iter()
                .map(|(n, t)| (n.to_string(), tape.leaf(t.clone())))
                .collect(),
        }
    }

    pub fn constants(store: &ParamStore) -> Self {
        ParamVars {
            vars: store
                .iter()
                .map(|(n, t)| (n.to_string(), Var::constant(t.clone())))
                .collect(),
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        ParamVars {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Gradient for every bound parameter, zero where the loss did not reach.
    pub fn gradients(&self, grads: &Gradients) -> Result<ParamStore> {
        let mut out = ParamStore::new();
        for (name, v) in &self.vars {
            out.insert(name.clone(), grads.wrt(v)?)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_follows_kind_and_truncation() {
        let specs = vec![
            ParamSpec::new("w", &[64, 64], Init::TruncNormal),
            ParamSpec::new("b", &[8], Init::Zeros),
            ParamSpec::new("g", &[8], Init::Ones),
        ];
        let store = ParamStore::init(&specs, 7).unwrap();
        let w = store.get("w").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 2.0 * INIT_STD));
        let var = w.data().iter().map(|v| v * v).sum::<f64>() / w.numel() as f64;
        // Truncation at 2 sigma shrinks the variance to about 0.774 sigma^2.
        assert!((var.sqrt() / INIT_STD - 0.88).abs() < 0.03, "{}", var.sqrt());
        assert!(store.get("b").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(store.get("g").unwrap().data().iter().all(|&v| v == 1.0));
        assert_eq!(store.numel(), 64 * 64 + 16);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let specs = vec![ParamSpec::new("w", &[10], Init::TruncNormal)];
        let a = ParamStore::init(&specs, 3).unwrap();
        let b = ParamStore::init(&specs, 3).unwrap();
        let c = ParamStore::init(&specs, 4).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn duplicate_names_rejected() {
        let specs = vec![
            ParamSpec::new("w", &[1], Init::Zeros),
            ParamSpec::new("w", &[1], Init::Zeros),
        ];
        assert!(ParamStore::init(&specs, 0).is_err());
    }
}
