//! Named parameter registry and the per-forward binding context.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{contract_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub value: Tensor<T>,
    /// Frozen entries are bound as constants and skipped by the optimizer.
    pub frozen: bool,
}

/// Ordered name → tensor registry. Registration order is stable and is the
/// order used for checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: IndexMap<String, ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: Tensor<T>, frozen: bool) -> Result<ParamId> {
        if self.entries.contains_key(name) {
            return Err(contract_err!("parameter {name} registered twice"));
        }
        let (idx, _) = self
            .entries
            .insert_full(name.to_string(), ParamEntry { value, frozen });
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).map(|(k, _)| k.as_str()).unwrap_or("")
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &ParamEntry<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (k, v))| (ParamId(i), k.as_str(), v))
    }

    /// Total number of scalars, frozen entries included.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            value: e.value.cast(),
                            frozen: e.frozen,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Replaces every value from `other`, which must have identical names
    /// and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(contract_err!(
                "parameter count mismatch: {} vs {}",
                self.len(),
                other.len()
            ));
        }
        for ((k, e), (ko, eo)) in self.entries.iter_mut().zip(&other.entries) {
            if k != ko || e.value.shape() != eo.value.shape() {
                return Err(contract_err!("parameter {k} does not match {ko}"));
            }
            e.value = eo.value.clone();
        }
        Ok(())
    }
}

/// Registers parameters with seeded Glorot-uniform initialization under a
/// hierarchical name prefix.
pub struct ParamBuilder<'s, T> {
    store: &'s mut ParamStore<T>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
    frozen: bool,
}

impl<'s, T: Scalar> ParamBuilder<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
            frozen: false,
        }
    }

    /// Registers everything built inside `f` under `name.`.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        self.prefix.push(name.to_string());
        let r = f(self);
        self.prefix.pop();
        r
    }

    /// Registers everything built inside `f` as frozen.
    pub fn frozen<R>(&mut self, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        let prev = std::mem::replace(&mut self.frozen, true);
        let r = f(self);
        self.frozen = prev;
        r
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.register(&full, value, self.frozen)
    }

    /// Uniform in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<ParamId> {
        self.glorot_scaled(name, shape, fan_in, fan_out, 1.0)
    }

    /// [`Self::glorot`] with the bound multiplied by `gain`.
    pub fn glorot_scaled(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        gain: f64,
    ) -> Result<ParamId> {
        let bound = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
        let value = Tensor::uniform(shape, bound, &mut self.rng);
        self.tensor(name, value)
    }
}

/// Binds parameters onto a tape for one forward/backward pass.
///
/// Each parameter becomes a single leaf the first time it is used, so every
/// further use accumulates into the same gradient.
pub struct Ctx<'p, T> {
    pub tape: Tape<T>,
    params: &'p ParamStore<T>,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'p, T: Scalar> Ctx<'p, T> {
    /// A context whose non-frozen parameters receive gradients.
    pub fn train(params: &'p ParamStore<T>) -> Self {
        Self::with_mode(params, true)
    }

    /// A context where every parameter is a constant.
    pub fn infer(params: &'p ParamStore<T>) -> Self {
        Self::with_mode(params, false)
    }

    fn with_mode(params: &'p ParamStore<T>, trainable: bool) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            trainable,
        }
    }

    /// Runs `f` with a context that borrows an existing tape, e.g. inside a
    /// finite-difference closure.
    pub fn on_tape<R>(
        tape: &mut Tape<T>,
        params: &'p ParamStore<T>,
        trainable: bool,
        f: impl FnOnce(&mut Ctx<'p, T>) -> R,
    ) -> R {
        let mut ctx = Self::with_mode(params, trainable);
        ctx.tape = std::mem::take(tape);
        let r = f(&mut ctx);
        *tape = ctx.tape;
        r
    }

    /// Uses an existing tape node in place of a stored parameter value
    /// (finite-difference checks perturb parameters this way).
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.bound[id.0] = Some(var);
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let requires_grad = self.trainable && !self.params.is_frozen(id);
        let v = self.tape.leaf(self.params.get(id).clone(), requires_grad);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.tape.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    /// Gradient for every parameter that was used and is trainable.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| grads.get(v)))
            .collect()
    }
}
