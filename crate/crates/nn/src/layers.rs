use std::ops::Index;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::tape::{Gradients, Tape, Var};
use crate::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named parameter matrices, owned outside any tape.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

/// Parameters of a store placed on a tape as leaves.
#[derive(Debug)]
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Index<ParamId> for Bound<'t> {
    type Output = Var<'t>;
    fn index(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        }
    }

    /// Gradient for every parameter, in store order.
    pub fn grads(&self, bound: &Bound<'_>, grads: &Gradients) -> Vec<Array2<f64>> {
        bound.vars.iter().map(|&v| grads.wrt(v)).collect()
    }

    /// Replaces values from `(name, array)` pairs. Every parameter must be provided with its
    /// existing shape.
    pub fn load<'a>(&mut self, items: impl IntoIterator<Item = (&'a str, Array2<f64>)>) -> Result<(), NnError> {
        let mut seen = vec![false; self.values.len()];
        for (name, value) in items {
            let idx = self
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| NnError::Layout(format!("unknown parameter {name}")))?;
            if value.dim() != self.values[idx].dim() {
                return Err(NnError::Shape {
                    op: "load",
                    lhs: self.values[idx].dim(),
                    rhs: value.dim(),
                });
            }
            self.values[idx] = value;
            seen[idx] = true;
        }
        match seen.iter().position(|s| !s) {
            Some(i) => Err(NnError::Layout(format!("missing parameter {}", self.names[i]))),
            None => Ok(()),
        }
    }

    pub fn copy_from(&mut self, other: &ParamStore) {
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            dst.assign(src);
        }
    }

    /// Polyak averaging: `self ← (1−tau)·self + tau·other`.
    pub fn soft_update(&mut self, other: &ParamStore, tau: f64) {
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            dst.zip_mut_with(src, |d, &s| *d = (1.0 - tau) * *d + tau * s);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
    Tanh,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Silu => x.silu(),
            Activation::Tanh => x.tanh(),
        }
    }

    pub fn apply_array(self, x: &mut Array2<f64>) {
        match self {
            Activation::Relu => x.mapv_inplace(|v| v.max(0.0)),
            Activation::Silu => x.mapv_inplace(|v| v / (1.0 + (-v).exp())),
            Activation::Tanh => x.mapv_inplace(f64::tanh),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Weights and bias drawn from `U(±1/sqrt(fan_in))`.
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| dist.sample(rng));
        let b = Array2::from_shape_fn((1, fan_out), |_| dist.sample(rng));
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), b),
            fan_in,
            fan_out,
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), Array2::zeros((fan_in, fan_out))),
            bias: store.add(format!("{name}.bias"), Array2::zeros((1, fan_out))),
            fan_in,
            fan_out,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        x.matmul(p[self.weight]).add_row(p[self.bias])
    }

    pub fn forward_array(&self, store: &ParamStore, x: &Array2<f64>) -> Array2<f64> {
        x.dot(store.get(self.weight)) + store.get(self.bias)
    }
}

/// Fully connected network; the activation is applied after every layer except the last.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        sizes: &[usize],
        activation: Activation,
        zero_last: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let lname = format!("{name}.{i}");
                if zero_last && i == n - 1 {
                    Linear::zeros(store, &lname, sizes[i], sizes[i + 1])
                } else {
                    Linear::new(store, &lname, sizes[i], sizes[i + 1], rng)
                }
            })
            .collect();
        Self { layers, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        let last = self.layers.len() - 1;
        self.layers.iter().enumerate().fold(x, |h, (i, l)| {
            let z = l.forward(p, h);
            if i < last {
                self.activation.apply(z)
            } else {
                z
            }
        })
    }

    /// Tape-free forward pass for inference.
    pub fn predict(&self, store: &ParamStore, x: &Array2<f64>) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward_array(store, &h);
            if i < last {
                self.activation.apply_array(&mut h);
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn predict_matches_tape_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        for act in [Activation::Relu, Activation::Silu, Activation::Tanh] {
            let mlp = Mlp::new(&mut store, "m", &[3, 8, 8, 2], act, false, &mut rng);
            let x = Array2::from_shape_fn((5, 3), |(i, j)| (i as f64 - 2.0) * 0.4 + j as f64 * 0.1);
            let tape = Tape::new();
            let p = store.bind(&tape);
            let y = mlp.forward(&p, tape.leaf(x.clone())).value();
            let z = mlp.predict(&store, &x);
            assert!((&y - &z).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn zero_last_layer_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[2, 4, 3], Activation::Relu, true, &mut rng);
        let out = mlp.predict(&store, &Array2::ones((2, 2)));
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn load_rejects_missing_and_misshapen() {
        let mut store = ParamStore::new();
        store.add("a", Array2::zeros((2, 2)));
        store.add("b", Array2::zeros((1, 2)));
        assert!(store.load([("a", Array2::ones((2, 2)))]).is_err());
        assert!(store.load([("a", Array2::ones((2, 2))), ("b", Array2::ones((2, 1)))]).is_err());
        store
            .load([("a", Array2::ones((2, 2))), ("b", Array2::ones((1, 2)))])
            .unwrap();
        assert_eq!(store.num_scalars(), 6);
    }
}
