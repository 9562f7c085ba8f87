//! Named parameter storage shared by the model modules.
//!
//! Parameters live outside any tape. Each forward pass registers the ones it
//! needs as tape leaves; after backward, [`accumulate_grads`] folds the tape
//! gradients back into the store (`+=` into each parameter's `grad`). The
//! optimizer consumes and the caller zeroes them between steps, which lets
//! multiple loss heads contribute to one update.

use crate::rng::Rng;
use crate::tensor::{Scalar, Tape, Tensor, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param<S: Scalar> {
    pub name: String,
    pub value: Tensor<S>,
}

/// Ordered collection of named parameters. Insertion order is the canonical
/// order used by checkpoints and the optimizer.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S: Scalar> {
    entries: Vec<Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, mut value: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {:?}",
            name
        );
        value.requires_grad = true;
        value.grad = None;
        self.entries.push(Param { name, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].value
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.value.grad = None;
        }
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    /// Convert every parameter to another scalar type (f32 model promoted to
    /// f64 for gradient checks). Gradients are dropped.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for p in &self.entries {
            out.add(p.name.clone(), p.value.cast::<T>());
        }
        out
    }
}

/// Registers store parameters on a tape and remembers the pairing so
/// gradients can be pulled back after the backward pass.
pub struct TapeParams<'s, S: Scalar> {
    store: &'s ParamStore<S>,
    trainable: bool,
    bindings: Vec<(ParamId, TensorId)>,
}

impl<'s, S: Scalar> TapeParams<'s, S> {
    pub fn new(store: &'s ParamStore<S>, trainable: bool) -> Self {
        TapeParams {
            store,
            trainable,
            bindings: Vec::new(),
        }
    }

    pub fn store(&self) -> &ParamStore<S> {
        self.store
    }

    /// Put one parameter on the tape (copied; the store stays untouched
    /// until the optimizer applies an update).
    pub fn leaf(&mut self, tape: &mut Tape<S>, id: ParamId) -> TensorId {
        let mut t = self.store.tensor(id).clone();
        t.requires_grad = self.trainable;
        t.grad = None;
        let tid = tape.leaf(t);
        if self.trainable {
            self.bindings.push((id, tid));
        }
        tid
    }

    pub fn bindings(&self) -> &[(ParamId, TensorId)] {
        &self.bindings
    }
}

/// Fold tape gradients back into the store: `store.grad += tape.grad`.
pub fn accumulate_grads<S: Scalar>(
    store: &mut ParamStore<S>,
    tape: &Tape<S>,
    bindings: &[(ParamId, TensorId)],
) {
    for &(pid, tid) in bindings {
        if let Some(g) = tape.grad(tid) {
            let value = store.tensor_mut(pid);
            match value.grad.as_mut() {
                Some(acc) => {
                    for (a, &b) in acc.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                None => value.grad = Some(g.to_vec()),
            }
        }
    }
}

// ── initializers ─────────────────────────────────────────────────────

/// Truncated normal, std 0.02: transformer weights.
pub fn init_trunc_normal<S: Scalar>(rng: &mut Rng, shape: Vec<usize>, std: f64) -> Tensor<S> {
    Tensor::generate(shape, || S::from_f64(rng.truncated_normal(std)))
}

/// He-style normal for conv kernels `[kh,kw,cin,cout]`: std = sqrt(2/fan_in).
pub fn init_he_conv<S: Scalar>(rng: &mut Rng, shape: Vec<usize>) -> Tensor<S> {
    assert_eq!(shape.len(), 4, "conv kernel must be rank 4");
    let fan_in = (shape[0] * shape[1] * shape[2]) as f64;
    let std = (2.0 / fan_in).sqrt();
    Tensor::generate(shape, || S::from_f64(rng.normal() * std))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grads_accumulate_across_tapes() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::filled(vec![2], 3.0));

        for _ in 0..2 {
            let mut tape = Tape::new();
            let mut tp = TapeParams::new(&store, true);
            let wid = tp.leaf(&mut tape, w);
            let loss = tape.sum_all(wid);
            tape.backward(loss);
            let bindings = tp.bindings().to_vec();
            accumulate_grads(&mut store, &tape, &bindings);
        }
        assert_eq!(store.tensor(w).grad.as_deref(), Some(&[2.0, 2.0][..]));

        store.zero_grads();
        assert!(store.tensor(w).grad.is_none());
    }

    #[test]
    fn frozen_params_collect_no_grad() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::filled(vec![2], 3.0));
        let mut tape = Tape::new();
        let mut tp = TapeParams::new(&store, false);
        let wid = tp.leaf(&mut tape, w);
        let loss = tape.sum_all(wid);
        tape.backward(loss);
        assert!(tp.bindings().is_empty());
        assert!(tape.grad(wid).is_none());
        assert!(store.tensor(w).grad.is_none());
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros(vec![1]));
        store.add("w", Tensor::zeros(vec![1]));
    }
}
