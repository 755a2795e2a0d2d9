use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{BatchNormMode, Graph, RunningStats, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BnId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Owns every trainable tensor of a model plus the batch-norm running
/// statistics, in creation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    running: Vec<(String, RunningStats<T>)>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            running: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_running(&mut self, name: impl Into<String>, channels: usize) -> BnId {
        self.running.push((name.into(), RunningStats::new(channels)));
        BnId(self.running.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn running(&self) -> &[(String, RunningStats<T>)] {
        &self.running
    }

    pub fn running_mut(&mut self) -> &mut [(String, RunningStats<T>)] {
        &mut self.running
    }

    /// Number of trainable scalars (kernels, biases, batch-norm γ and β).
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// Copies every tensor into another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                })
                .collect(),
            running: self
                .running
                .iter()
                .map(|(n, s)| {
                    (
                        n.clone(),
                        RunningStats {
                            mean: s.mean.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                            var: s.var.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Deterministic parameter initialization.
///
/// Kernels `(k,k,c_in,m)` draw from N(0, 2/fan_in) with fan_in = k·k·c_in.
/// Draws are made in `f64` and rounded, so `f32` and `f64` models built from
/// one seed share their initialization.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn kaiming<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let fan_in: usize = shape[..shape.len() - 1].iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            T::from_f64(z * std)
        })
    }
}

/// One forward pass: a fresh graph with the store's parameters bound as
/// leaves on first use.
pub struct Session<'p, T: Scalar> {
    pub graph: Graph<T>,
    store: &'p mut ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: BatchNormMode,
    track_grads: bool,
}

impl<'p, T: Scalar> Session<'p, T> {
    /// `Train` mode records parameter gradients and uses batch statistics.
    pub fn new(store: &'p mut ParamStore<T>, mode: BatchNormMode) -> Self {
        Self::with_graph(Graph::new(), store, mode)
    }

    pub fn with_graph(graph: Graph<T>, store: &'p mut ParamStore<T>, mode: BatchNormMode) -> Self {
        let n = store.params.len();
        Self {
            graph,
            store,
            bound: vec![None; n],
            mode,
            track_grads: mode == BatchNormMode::Train,
        }
    }

    /// Forces gradient tracking on or off independently of the mode.
    pub fn track_grads(mut self, on: bool) -> Self {
        self.track_grads = on;
        self
    }

    pub fn mode(&self) -> BatchNormMode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.params[id.0].value.clone();
        let v = self.graph.leaf(value, self.track_grads);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn conv(&mut self, x: Var, kernel: ParamId, bias: ParamId) -> Result<Var> {
        let (k, b) = (self.param(kernel), self.param(bias));
        self.graph.conv2d(x, k, b)
    }

    pub fn batch_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, stats: BnId) -> Result<Var> {
        let (g, b) = (self.param(gamma), self.param(beta));
        let running = &mut self.store.running[stats.0].1;
        self.graph.batch_norm(x, g, b, running, self.mode)
    }

    /// Back-propagates `loss` and stores the parameter gradients in the store,
    /// overwriting earlier ones. Parameters the loss does not depend on are
    /// left without a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.graph.backward(loss)?;
        for (i, bound) in self.bound.iter().enumerate() {
            self.store.params[i].grad = bound.and_then(|v| self.graph.take_grad(v));
        }
        Ok(())
    }

    /// Ids of parameters that were used in this pass.
    pub fn bound_params(&self) -> Vec<ParamId> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.map(|_| ParamId(i)))
            .collect()
    }
}
