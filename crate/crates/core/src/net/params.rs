use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Index of a parameter in an [`Inventory`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// The ordered list of parameters a network owns.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Inventory {
    specs: Vec<ParamSpec>,
}

impl Inventory {
    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.specs.iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }

    pub fn find(&self, path: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.path == path).map(ParamId)
    }

    /// Human-readable `path<TAB>shape` listing, one parameter per line.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for s in &self.specs {
            let dims: Vec<String> = s.shape.iter().map(usize::to_string).collect();
            out.push_str(&format!("{}\t[{}]\n", s.path, dims.join(", ")));
        }
        out
    }
}

/// Registers parameters under a hierarchical path prefix.
#[derive(Default)]
pub(crate) struct ParamBuilder {
    specs: Vec<ParamSpec>,
    prefix: Vec<String>,
}

impl ParamBuilder {
    pub fn push(&mut self, segment: impl Into<String>) {
        self.prefix.push(segment.into());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    pub fn scoped<T>(&mut self, segment: impl Into<String>, f: impl FnOnce(&mut Self) -> T) -> T {
        self.push(segment);
        let out = f(self);
        self.pop();
        out
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let mut path = self.prefix.join(".");
        if !path.is_empty() {
            path.push('.');
        }
        path.push_str(name);
        assert!(self.specs.iter().all(|s| s.path != path), "duplicate parameter path {path}");
        self.specs.push(ParamSpec { path, shape: shape.to_vec(), init });
        ParamId(self.specs.len() - 1)
    }

    pub fn finish(self) -> Inventory {
        Inventory { specs: self.specs }
    }
}

/// All learnable arrays of a network, aligned with its [`Inventory`].
#[derive(Clone, PartialEq)]
pub struct DenoiserParameters<F: Element = f32> {
    paths: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Element> std::fmt::Debug for DenoiserParameters<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DenoiserParameters").field("count", &self.tensors.len()).finish()
    }
}

impl<F: Element> DenoiserParameters<F> {
    /// Draws initial values for every parameter from a seeded generator.
    pub fn init(inventory: &Inventory, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = inventory
            .specs
            .iter()
            .map(|s| match s.init {
                Init::Zeros => Tensor::zeros(&s.shape),
                Init::Ones => Tensor::full(&s.shape, F::one()),
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    let n = s.shape.iter().product();
                    let data = (0..n).map(|_| F::of(rng.gen_range(-bound..bound))).collect();
                    Tensor::from_vec(&s.shape, data).expect("sized")
                }
            })
            .collect();
        Self { paths: inventory.specs.iter().map(|s| s.path.clone()).collect(), tensors }
    }

    /// Rebuilds parameters from named arrays, checking them against the inventory.
    pub fn from_named(inventory: &Inventory, mut named: BTreeMap<String, Tensor<F>>) -> Result<Self> {
        let mut tensors = Vec::with_capacity(inventory.len());
        let mut problems = vec![];
        for s in inventory.specs() {
            match named.remove(&s.path) {
                Some(t) if t.shape() == s.shape.as_slice() => tensors.push(t),
                Some(t) => problems.push(format!("{}: shape {:?}, expected {:?}", s.path, t.shape(), s.shape)),
                None => problems.push(format!("{}: missing", s.path)),
            }
        }
        problems.extend(named.keys().map(|k| format!("{k}: not part of this network")));
        if !problems.is_empty() {
            return Err(Error::Checkpoint(format!("parameter inventory mismatch: {}", problems.join("; "))));
        }
        Ok(Self { paths: inventory.specs.iter().map(|s| s.path.clone()).collect(), tensors })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn by_path(&self, path: &str) -> Option<&Tensor<F>> {
        self.paths.iter().position(|p| p == path).map(|i| &self.tensors[i])
    }

    pub fn by_path_mut(&mut self, path: &str) -> Option<&mut Tensor<F>> {
        self.paths.iter().position(|p| p == path).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.paths.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn paths(&self) -> &[String] {
        &self.paths
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn cast<G: Element>(&self) -> DenoiserParameters<G> {
        DenoiserParameters { paths: self.paths.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// Places every parameter on the graph, trainable or constant.
    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.input(t.clone()) })
            .collect();
        BoundParams { vars }
    }
}

/// Graph handles for a parameter set, indexed by [`ParamId`].
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
