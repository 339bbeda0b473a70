//! Named parameter registry.
//!
//! Parameters are registered with an [`Init`] recipe and drawn later by
//! [`ParamStore::initialize`], which walks pending parameters in name order
//! so the values never depend on construction order.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Square identity; only valid for rank-2 square shapes.
    Identity,
    Normal(f64),
    /// Uniform in `[-bound, bound]` with `bound = 1/sqrt(fan_in)`, fan-in
    /// taken from the leading extent.
    FanIn,
}

#[derive(Clone, Debug)]
pub struct Parameter<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Option<Tensor<F>>,
    pub trainable: bool,
    init: Init,
    initialized: bool,
}

impl<F: Float> Parameter<F> {
    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
    by_name: BTreeMap<String, ParamId>,
    init_phase: u64,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: BTreeMap::new(),
            init_phase: 0,
        }
    }

    /// Registers a trainable parameter whose values are drawn on the next
    /// [`initialize`](Self::initialize).
    pub fn register(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Contract(format!("parameter `{name}` registered twice")));
        }
        if init == Init::Identity && (shape.len() != 2 || shape[0] != shape[1]) {
            return Err(Error::Validation(format!(
                "identity init needs a square matrix, `{name}` is {shape:?}"
            )));
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value: Tensor::zeros(shape),
            grad: None,
            trainable: true,
            init,
            initialized: false,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Draws values for every pending parameter, in name order, from one
    /// ChaCha stream keyed by `seed` and the number of previous calls.
    pub fn initialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(self.init_phase);
        self.init_phase += 1;
        let order: Vec<ParamId> = self.by_name.values().copied().collect();
        for id in order {
            let p = &mut self.params[id.0];
            if p.initialized {
                continue;
            }
            let shape = p.value.shape().to_vec();
            let data = p.value.data_mut();
            match p.init {
                Init::Zeros => data.fill(F::zero()),
                Init::Ones => data.fill(F::one()),
                Init::Identity => {
                    data.fill(F::zero());
                    let n = shape[0];
                    for i in 0..n {
                        data[i * n + i] = F::one();
                    }
                }
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("finite std");
                    for x in data.iter_mut() {
                        *x = F::of(dist.sample(&mut rng));
                    }
                }
                Init::FanIn => {
                    let bound = 1.0 / (shape[0] as f64).sqrt();
                    let dist = rand_distr::Uniform::new_inclusive(-bound, bound).expect("bound");
                    for x in data.iter_mut() {
                        *x = F::of(dist.sample(&mut rng));
                    }
                }
            }
            p.initialized = true;
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<F>> {
        self.id(name).map(|id| &self.params[id.0])
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    /// Parameters in name order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<F>)> {
        self.by_name.values().map(move |&id| (id, &self.params[id.0]))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }

    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.trainable = pred(&p.name);
            if !p.trainable {
                p.grad = None;
            }
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.set_trainable(|_| trainable);
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.name.clone())
            .collect()
    }

    /// Sum of element counts, optionally restricted to trainable parameters.
    pub fn param_count(&self, trainable_only: bool) -> usize {
        self.params
            .iter()
            .filter(|p| !trainable_only || p.trainable)
            .map(Parameter::numel)
            .sum()
    }

    /// Adds `grads` into the per-parameter buffers. Repeated calls without
    /// [`zero_grads`](Self::zero_grads) accumulate.
    pub fn accumulate(&mut self, grads: &crate::autodiff::Gradients<F>) {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            if !p.trainable {
                continue;
            }
            match &mut p.grad {
                Some(buf) => {
                    for (a, &b) in buf.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => p.grad = Some(g.clone()),
            }
        }
    }

    /// Gives every trainable parameter a grad buffer, zero where nothing
    /// reached it during the step.
    pub fn ensure_grads(&mut self) {
        for p in &mut self.params {
            if p.trainable && p.grad.is_none() {
                p.grad = Some(Tensor::zeros(p.value.shape()));
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Multiplies every present gradient by `factor`.
    pub fn scale_grads(&mut self, factor: F) {
        for p in &mut self.params {
            if let Some(g) = &mut p.grad {
                for x in g.data_mut() {
                    *x *= factor;
                }
            }
        }
    }

    /// Copies values for every name present in both stores; shapes must match.
    pub fn copy_values_from(&mut self, other: &ParamStore<F>) -> Result<usize> {
        let mut n = 0;
        for (_, src) in other.iter() {
            if let Some(id) = self.id(&src.name) {
                let dst = &mut self.params[id.0];
                if dst.value.shape() != src.value.shape() {
                    return Err(Error::dim(
                        "copy_values_from",
                        dst.value.shape(),
                        src.value.shape(),
                    ));
                }
                dst.value = src.value.clone();
                dst.initialized = true;
                n += 1;
            }
        }
        Ok(n)
    }

    /// Snapshot of every value, in name order.
    pub fn snapshot(&self) -> Vec<(String, Tensor<F>)> {
        self.iter()
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Same numeric type, different scalar kind.
    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                    trainable: p.trainable,
                    init: p.init,
                    initialized: p.initialized,
                })
                .collect(),
            by_name: self.by_name.clone(),
            init_phase: self.init_phase,
        }
    }

    pub(crate) fn mark_initialized(&mut self, id: ParamId) {
        self.params[id.0].initialized = true;
    }
}
