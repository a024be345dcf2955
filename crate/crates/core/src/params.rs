//! Flat, named parameter storage in canonical order.
//!
//! Model layouts register parameters through [`ParamLayout::add`] and keep the
//! returned [`ParamId`]s. Registration order is the canonical order used for
//! initialization streams, optimizer state and the weight file.

use std::sync::Arc;

use rand::Rng;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::ops::softplus_inverse;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Initialization rule for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-bound, bound)`.
    Uniform { bound: f64 },
    /// `log(1 + n)` along the last axis, so that `A = -exp(.)` is `-(1 + n)`.
    ALog,
    /// Inverse softplus of a log-uniform sample in `[min, max]`.
    DtBias { min: f64, max: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    /// Uniform fan-in scaled linear weight `[din, dout]`, plus an optional bias.
    pub fn add_linear(
        &mut self,
        prefix: &str,
        din: usize,
        dout: usize,
        bias: bool,
    ) -> (ParamId, Option<ParamId>) {
        let bound = 1.0 / (din as f64).sqrt();
        let w = self.add(format!("{prefix}.weight"), &[din, dout], Init::Uniform { bound });
        let b = bias.then(|| self.add(format!("{prefix}.bias"), &[dout], Init::Uniform { bound }));
        (w, b)
    }

    pub fn add_norm(&mut self, prefix: &str, dim: usize) -> (ParamId, ParamId) {
        (
            self.add(format!("{prefix}.gain"), &[dim], Init::Ones),
            self.add(format!("{prefix}.bias"), &[dim], Init::Zeros),
        )
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn total_numel(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    /// Fresh values, each parameter drawn from its own named stream.
    pub fn initialize(&self, seed: u64) -> Result<ParamStore> {
        let values = self
            .specs
            .iter()
            .map(|spec| init_one(spec, seed).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        Ok(ParamStore { values })
    }
}

fn init_one(spec: &ParamSpec, seed: u64) -> Result<Array> {
    let mut rng = rng::stream(seed, &format!("init/{}", spec.name));
    let last = spec.shape.last().copied().unwrap_or(1).max(1);
    match spec.init {
        Init::Zeros => Ok(Array::zeros(&spec.shape)),
        Init::Ones => Array::full(&spec.shape, 1.0),
        Init::Uniform { bound } => {
            Array::from_fn(&spec.shape, |_| rng.gen_range(-bound..=bound))
        }
        Init::ALog => Array::from_fn(&spec.shape, |i| ((i % last) as f64 + 1.0).ln()),
        Init::DtBias { min, max } => {
            let (lo, hi) = (min.ln(), max.ln());
            Array::from_fn(&spec.shape, |_| softplus_inverse(rng.gen_range(lo..=hi).exp()))
        }
    }
}

/// Parameter values in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    values: Vec<Arc<Array>>,
}

impl ParamStore {
    /// Wraps values after checking them against `layout`.
    pub fn from_values(layout: &ParamLayout, values: Vec<Array>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::shape(
                "ParamStore",
                format!("{} values for {} parameters", values.len(), layout.len()),
            ));
        }
        for (v, spec) in values.iter().zip(layout.specs()) {
            if v.shape() != spec.shape.as_slice() {
                return Err(Error::shape(
                    "ParamStore",
                    format!("{}: {:?} vs {:?}", spec.name, v.shape(), spec.shape),
                ));
            }
        }
        Ok(Self {
            values: values.into_iter().map(Arc::new).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array {
        &self.values[id.0]
    }

    /// Copy-on-write access; cheap once no graph holds the value.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Array {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Array> {
        self.values.iter().map(|v| &**v)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Array> {
        self.values.iter_mut().map(Arc::make_mut)
    }

    pub fn total_numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Registers every parameter on `g`, in canonical order.
    pub fn bind<G: Graph>(&self, g: &mut G) -> Vec<G::Value> {
        self.values.iter().map(|v| g.param(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initialization_is_per_name() {
        let mut a = ParamLayout::new();
        a.add("x", &[4], Init::Uniform { bound: 1.0 });
        let mut b = ParamLayout::new();
        b.add("other", &[2], Init::Uniform { bound: 1.0 });
        b.add("x", &[4], Init::Uniform { bound: 1.0 });
        let sa = a.initialize(3).unwrap();
        let sb = b.initialize(3).unwrap();
        assert_eq!(sa.get(ParamId(0)), sb.get(ParamId(1)));
    }

    #[test]
    fn a_log_and_dt_bias() {
        let mut l = ParamLayout::new();
        let a = l.add("a_log", &[2, 3], Init::ALog);
        let dt = l.add("dt", &[50], Init::DtBias { min: 0.01, max: 0.1 });
        let s = l.initialize(0).unwrap();
        let a_vals: Vec<f64> = s.get(a).data().iter().map(|v| -v.exp()).collect();
        for (got, want) in a_vals.iter().zip([-1.0, -2.0, -3.0, -1.0, -2.0, -3.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        for &b in s.get(dt).data() {
            let v = crate::ops::softplus_scalar(b);
            assert!((0.01 - 1e-12..=0.1 + 1e-12).contains(&v), "{v}");
        }
    }

    #[test]
    fn from_values_checks_shapes() {
        let mut l = ParamLayout::new();
        l.add("w", &[2, 2], Init::Zeros);
        assert!(ParamStore::from_values(&l, vec![Array::zeros(&[4])]).is_err());
        assert!(ParamStore::from_values(&l, vec![Array::zeros(&[2, 2])]).is_ok());
    }
}
