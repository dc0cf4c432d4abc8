//! Named parameter tensors, seeded initialization and graph binding.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// An ordered collection of named parameter tensors.
///
/// Insertion order is the canonical order: it fixes RNG consumption at
/// initialization, the checkpoint layout and the gradient layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Matrix<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn tensors(&self) -> &[Matrix<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.tensors
    }

    /// Copies every parameter onto `graph` as a leaf.
    pub fn bind(&self, graph: &mut Graph<T>, requires_grad: bool) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| graph.leaf(t.clone(), requires_grad)).collect() }
    }

    /// Gradient per parameter, zeros where the parameter was unused.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients<T>) -> Vec<Matrix<T>> {
        self.tensors
            .iter()
            .zip(&bound.vars)
            .map(|(t, &v)| grads.take(v).unwrap_or_else(|| Matrix::zeros(t.rows(), t.cols())))
            .collect()
    }

    /// `self ← decay · self + (1 − decay) · other`, tensor by tensor.
    pub fn ema_toward(&mut self, other: &Self, decay: T) {
        assert_eq!(self.len(), other.len(), "parameter layouts differ");
        let keep = T::one() - decay;
        for (mine, theirs) in self.tensors.iter_mut().zip(&other.tensors) {
            assert_eq!(mine.shape(), theirs.shape(), "parameter shapes differ");
            for (a, &b) in mine.as_mut_slice().iter_mut().zip(theirs.as_slice()) {
                *a = decay * *a + keep * b;
            }
        }
    }

    /// Euclidean distance between two stores with identical layout.
    pub fn distance(&self, other: &Self) -> T {
        self.tensors.iter().zip(&other.tensors).map(|(a, b)| a.sub(b).sum_squares()).sum::<T>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }

    /// Replaces every tensor's contents, keeping names and shapes.
    pub fn assign_from(&mut self, other: &Self) {
        assert_eq!(self.len(), other.len(), "parameter layouts differ");
        for (mine, theirs) in self.tensors.iter_mut().zip(&other.tensors) {
            assert_eq!(mine.shape(), theirs.shape(), "parameter shapes differ");
            mine.as_mut_slice().copy_from_slice(theirs.as_slice());
        }
    }
}

/// Graph handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Registers freshly initialized parameters under a name prefix.
pub struct Initializer<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> Initializer<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    /// Runs `f` with `scope.` appended to the name prefix.
    pub fn scoped<R>(&mut self, scope: &str, f: impl FnOnce(&mut Initializer<'_, T>) -> R) -> R {
        let prefix = format!("{}{}.", self.prefix, scope);
        let mut inner = Initializer { store: self.store, rng: self.rng, prefix };
        f(&mut inner)
    }

    fn full_name(&self, name: &str) -> String {
        format!("{}{}", self.prefix, name)
    }

    /// Entries drawn from `U(−1/√fan_in, 1/√fan_in)`.
    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let rng = &mut *self.rng;
        let m = Matrix::from_fn(rows, cols, |_, _| T::of(rng.random_range(-bound..bound)));
        self.store.insert(self.full_name(name), m)
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> ParamId {
        self.store.insert(self.full_name(name), Matrix::filled(rows, cols, T::of(value)))
    }
}

/// Deterministic RNG for parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent RNG stream keyed by `seed` and a path of stream indices.
pub fn stream_rng(seed: u64, stream: &[u64]) -> ChaCha8Rng {
    let mut h = crate::hashembed::splitmix(seed);
    for &s in stream {
        h = crate::hashembed::splitmix(h ^ crate::hashembed::splitmix(s.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    ChaCha8Rng::seed_from_u64(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_identical_parameters() {
        let build = || {
            let mut store = ParamStore::<f64>::new();
            let mut rng = init_rng(42);
            let mut init = Initializer::new(&mut store, &mut rng);
            init.scoped("layer", |i| {
                i.uniform("w", 3, 4, 3);
                i.constant("b", 1, 4, 0.0);
            });
            store
        };
        let (a, b) = (build(), build());
        assert_eq!(a, b);
        assert_eq!(a.name(ParamId(0)), "layer.w");
        assert!(a.get(ParamId(0)).max_abs() <= 1.0 / 3f64.sqrt());
    }

    #[test]
    fn ema_limits() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Matrix::filled(2, 2, 1.0));
        let mut target = store.clone();
        target.get_mut(ParamId(0)).fill(3.0);

        let mut unchanged = store.clone();
        unchanged.ema_toward(&target, 1.0);
        assert_eq!(unchanged, store);

        let mut copied = store.clone();
        copied.ema_toward(&target, 0.0);
        assert_eq!(copied, target);
    }
}
