//! Named parameter storage shared by every learned module.
//!
//! Parameters are created lazily the first time a forward pass asks for them,
//! in a deterministic traversal order; that order is the canonical
//! serialization order for checkpoints and the iteration order for the
//! optimizer. A `ParamSource` abstracts where bound graph leaves come from so
//! tests can rebuild a forward pass over externally supplied leaves
//! (finite-difference checks perturb parameters through that path).

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal(0, 0.02) resampled until |v| <= 2 (transformer weight default).
    TruncNormal,
    /// He normal: Normal(0, sqrt(2 / fan_in)) for conv and MLP stacks.
    He { fan_in: usize },
    Zeros,
    Ones,
}

/// Anything that can hand a forward builder its parameter leaves.
pub trait ParamSource {
    fn fetch(&mut self, g: &mut Graph, name: &str, shape: &[usize], init: Init) -> Var;
}

/// The owning store: values live here across steps; each forward pass binds
/// them as fresh graph leaves.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
    rng: ChaCha12Rng,
    /// (store index, bound leaf) pairs for the graph under construction.
    bound: Vec<(usize, Var)>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            names: Vec::new(),
            shapes: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
            rng: ChaCha12Rng::seed_from_u64(seed),
            bound: Vec::new(),
        }
    }

    fn init_values(&mut self, n: usize, init: Init) -> Vec<f64> {
        match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::TruncNormal => {
                let dist = Normal::new(0.0, 0.02).unwrap();
                (0..n)
                    .map(|_| loop {
                        let v: f64 = dist.sample(&mut self.rng);
                        if v.abs() <= 2.0 {
                            return v;
                        }
                    })
                    .collect()
            }
            Init::He { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let dist = Normal::new(0.0, std).unwrap();
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
        }
    }

    /// Ensures the parameter exists (initializing on first sight) without
    /// binding it to a graph. Registration order is first-call order.
    pub fn ensure(&mut self, name: &str, shape: &[usize], init: Init) -> usize {
        if let Some(&i) = self.index.get(name) {
            assert_eq!(self.shapes[i], shape, "parameter {name} re-registered with new shape");
            return i;
        }
        let n: usize = shape.iter().product();
        let values = self.init_values(n, init);
        let i = self.names.len();
        self.names.push(name.to_string());
        self.shapes.push(shape.to_vec());
        self.values.push(values);
        self.index.insert(name.to_string(), i);
        i
    }

    /// Clears the leaf bindings of the previous graph. Call before building
    /// a new forward pass whose gradients will be applied.
    pub fn begin_graph(&mut self) {
        self.bound.clear();
    }

    /// Bindings made since the last `begin_graph`, for optimizer updates.
    pub fn bound(&self) -> &[(usize, Var)] {
        &self.bound
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn shape_of(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn value_of(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    pub fn value_of_mut(&mut self, i: usize) -> &mut Vec<f64> {
        &mut self.values[i]
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.index.get(name).map(|&i| self.values[i].as_slice())
    }

    /// Overwrites an existing parameter's values (tests pin hand weights;
    /// checkpoint load restores trained ones).
    pub fn set(&mut self, name: &str, values: Vec<f64>) {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(
            values.len(),
            self.values[i].len(),
            "parameter {name} value length mismatch"
        );
        self.values[i] = values;
    }

    pub fn num_params(&self) -> usize {
        self.names.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Flat copy of all values in canonical order (checkpoint payload).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for v in &self.values {
            out.extend_from_slice(v);
        }
        out
    }

    /// Restores values from a flat payload written by `to_flat` on a store
    /// with identical registration order.
    pub fn load_flat(&mut self, flat: &[f64]) -> crate::Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(crate::Error::Format {
                path: "<checkpoint>".into(),
                reason: format!(
                    "parameter payload has {} scalars, store expects {}",
                    flat.len(),
                    self.num_scalars()
                ),
            });
        }
        let mut off = 0;
        for v in &mut self.values {
            let n = v.len();
            v.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn tensor_of(&self, i: usize) -> Tensor {
        Tensor::new(self.shapes[i].clone(), self.values[i].clone()).unwrap()
    }
}

impl ParamSource for ParamStore {
    fn fetch(&mut self, g: &mut Graph, name: &str, shape: &[usize], init: Init) -> Var {
        let i = self.ensure(name, shape, init);
        let v = g.leaf(self.values[i].clone(), shape.to_vec(), true);
        self.bound.push((i, v));
        v
    }
}

/// Replays externally created leaves in registration order. Used by
/// finite-difference checks: the check owns the leaves (and perturbs their
/// values); the forward builder consumes them through the same fetch calls
/// it would make against a real store.
pub struct VarList<'a> {
    vars: &'a [Var],
    cursor: usize,
}

impl<'a> VarList<'a> {
    pub fn new(vars: &'a [Var]) -> Self {
        VarList { vars, cursor: 0 }
    }

    pub fn exhausted(&self) -> bool {
        self.cursor == self.vars.len()
    }
}

impl ParamSource for VarList<'_> {
    fn fetch(&mut self, g: &mut Graph, name: &str, shape: &[usize], _init: Init) -> Var {
        assert!(self.cursor < self.vars.len(), "VarList ran out at {name}");
        let v = self.vars[self.cursor];
        self.cursor += 1;
        let n: usize = shape.iter().product();
        assert_eq!(g.data(v).len(), n, "VarList shape mismatch at {name}");
        v
    }
}
