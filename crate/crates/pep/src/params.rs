//! Named parameter storage and the per-forward-pass binding of parameters
//! into an autodiff [`Graph`].

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, NodeId, Value};

/// Ordered name -> tensor registry. Registration order is the canonical
/// parameter order used by the optimizer and the checkpoint format.
/// Cloning is cheap: values are shared until replaced through [`Self::set`].
#[derive(Default, Clone)]
pub struct ParamStore {
    entries: IndexMap<String, Value>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: ArrayD<f64>) {
        let prev = self.entries.insert(name.to_owned(), Value::new(value));
        assert!(prev.is_none(), "parameter {name} registered twice");
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn value(&self, name: &str) -> Value {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .clone()
    }

    pub fn set(&mut self, name: &str, value: ArrayD<f64>) {
        let slot = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(slot.shape(), value.shape(), "parameter {name} shape changed");
        *slot = Value::new(value);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Value)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum()
    }
}

/// How to initialize a layer's bias.
#[derive(Debug, Clone, Copy)]
pub enum BiasInit {
    None,
    Zero,
    Const(f64),
}

/// Deterministic fan-in-scaled normal initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn normal(&mut self, shape: &[usize], std: f64) -> ArrayD<f64> {
        let dist = Normal::new(0.0, std).expect("std is finite");
        ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(&mut self.rng))
    }

    /// Register `{name}.w` (and `{name}.b` unless `BiasInit::None`) for a
    /// conv layer `[co, ci, kh, kw]`.
    pub fn conv(
        &mut self,
        store: &mut ParamStore,
        name: &str,
        co: usize,
        ci: usize,
        k: usize,
        bias: BiasInit,
    ) {
        let fan_in = (ci * k * k) as f64;
        let w = self.normal(&[co, ci, k, k], (2.0 / fan_in).sqrt());
        store.register(&format!("{name}.w"), w);
        self.register_bias(store, name, co, bias);
    }

    /// Register `{name}.w` (and optional bias) for a linear layer `[co, ci]`.
    pub fn linear(
        &mut self,
        store: &mut ParamStore,
        name: &str,
        co: usize,
        ci: usize,
        bias: BiasInit,
    ) {
        let w = self.normal(&[co, ci], (2.0 / ci as f64).sqrt());
        store.register(&format!("{name}.w"), w);
        self.register_bias(store, name, co, bias);
    }

    fn register_bias(&mut self, store: &mut ParamStore, name: &str, co: usize, bias: BiasInit) {
        match bias {
            BiasInit::None => {}
            BiasInit::Zero => store.register(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[co]))),
            BiasInit::Const(c) => {
                store.register(&format!("{name}.b"), ArrayD::from_elem(IxDyn(&[co]), c))
            }
        }
    }
}

/// One forward pass: a graph plus the set of parameters bound into it.
/// Parameters are bound lazily so unused subnetworks stay out of the graph.
pub struct Session<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: IndexMap<String, NodeId>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: IndexMap::new(),
        }
    }

    /// Bind (or reuse) the parameter leaf for `name`.
    pub fn p(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.bound.get(name) {
            return id;
        }
        let id = self.g.param(self.store.value(name));
        self.bound.insert(name.to_owned(), id);
        id
    }

    /// Conv layer registered as `{name}.w` / optional `{name}.b`.
    pub fn conv(&mut self, name: &str, x: NodeId, stride: usize, pad: usize) -> NodeId {
        let w = self.p(&format!("{name}.w"));
        let bname = format!("{name}.b");
        let b = self.store.contains(&bname).then(|| self.p(&bname));
        self.g.conv2d(x, w, b, stride, pad)
    }

    /// Linear layer registered as `{name}.w` / optional `{name}.b`.
    pub fn linear(&mut self, name: &str, x: NodeId) -> NodeId {
        let w = self.p(&format!("{name}.w"));
        let bname = format!("{name}.b");
        let b = self.store.contains(&bname).then(|| self.p(&bname));
        self.g.linear(x, w, b)
    }

    /// Parameters bound so far, in first-use order.
    pub fn bound(&self) -> &IndexMap<String, NodeId> {
        &self.bound
    }
}
