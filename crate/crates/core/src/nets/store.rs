//! Named parameter storage and per-evaluation binding onto a tape.

use crate::graph::{Gradients, Graph, Scalar, Var};
use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Index of a parameter within one network's [`ParamStore`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Ordered, named parameter tensors of one network. The order is the
/// checkpoint and optimizer-state order, so it must stay stable.
#[derive(Debug, Clone)]
pub struct ParamStore<F: Scalar> {
    entries: Vec<(String, ArrayD<F>)>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: ArrayD<F>) -> ParamId {
        self.entries.push((name.into(), value));
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<F> {
        &self.entries[id.0].1
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut ArrayD<F> {
        &mut self.entries[idx].1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    /// Replaces a value; shapes must match (used by checkpoint restore and
    /// the optimizer).
    pub fn set(&mut self, idx: usize, value: ArrayD<F>) {
        assert_eq!(
            self.entries[idx].1.shape(),
            value.shape(),
            "parameter shape changed"
        );
        self.entries[idx].1 = value;
    }
}

/// Lazily binds a store's parameters onto a tape for one evaluation and
/// remembers which [`Var`] each parameter became, so gradients can be routed
/// back by index.
pub struct Binder<'g, F: Scalar> {
    graph: &'g Graph<F>,
    store: &'g ParamStore<F>,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'g, F: Scalar> Binder<'g, F> {
    pub fn new(graph: &'g Graph<F>, store: &'g ParamStore<F>) -> Self {
        Binder {
            graph,
            store,
            vars: vec![None; store.len()],
            trainable: true,
        }
    }

    /// A binder whose parameters enter the tape as constants; used for
    /// frozen networks so backward work is pruned.
    pub fn frozen(graph: &'g Graph<F>, store: &'g ParamStore<F>) -> Self {
        Binder {
            graph,
            store,
            vars: vec![None; store.len()],
            trainable: false,
        }
    }

    pub fn graph(&self) -> &'g Graph<F> {
        self.graph
    }

    pub fn var(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.trainable {
            self.graph.param(value)
        } else {
            self.graph.constant(value)
        };
        self.vars[id.0] = Some(v);
        v
    }

    /// Collects gradients for every bound parameter into a dense per-index
    /// vector (zeros where a parameter was unused or unreached).
    pub fn collect_grads(&self, grads: &mut Gradients<F>) -> Vec<ArrayD<F>> {
        self.store
            .iter()
            .enumerate()
            .map(|(idx, (_, value))| {
                self.vars[idx]
                    .and_then(|v| grads.take(v))
                    .unwrap_or_else(|| ArrayD::zeros(value.raw_dim()))
            })
            .collect()
    }
}

/// He (fan-in) initialized weight tensor.
pub fn he_init<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| {
        let z: f64 = rng.sample(StandardNormal);
        F::from_f64(z * std)
    })
}
