//! Parameterized building blocks: linear maps and `linear -> LN -> ReLU` stacks.

use rand::Rng as _;

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Binding, ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Weight (`out x in`) and bias (`out`) of a dense map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform init in `±1/sqrt(in_dim)` for weight and bias.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut Rng,
    ) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let mut draw = || T::from_f64(rng.random_range(-bound..bound));
        let w = Tensor::from_fn(&[out_dim, in_dim], |_| draw());
        let b = Tensor::from_fn(&[out_dim], |_| draw());
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), b),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var) -> Result<Var> {
        tape.linear(x, bind.var(self.weight), Some(bind.var(self.bias)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[width], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var) -> Result<Var> {
        tape.layer_norm(x, bind.var(self.gamma), bind.var(self.beta))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layer {
    linear: Linear,
    norm: Option<LayerNorm>,
}

/// Row-wise MLP. Hidden layers are `linear -> LN -> ReLU`; the last layer is
/// the same unless built with `plain_last`, in which case it is a bare linear.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

impl Mlp {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: &[usize],
        plain_last: bool,
        rng: &mut Rng,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let linear = Linear::new(store, &format!("{name}.{i}"), dims[i], dims[i + 1], rng);
                let norm = (!(plain_last && i == n - 1))
                    .then(|| LayerNorm::new(store, &format!("{name}.{i}.norm"), dims[i + 1]));
                Layer { linear, norm }
            })
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].linear.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().linear.out_dim
    }

    /// The last dense map, e.g. to zero it in tests.
    pub fn last_linear(&self) -> Linear {
        self.layers.last().unwrap().linear
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.linear.forward(tape, bind, h)?;
            if let Some(norm) = &layer.norm {
                h = tape.layer_norm_relu(h, bind.var(norm.gamma), bind.var(norm.beta))?;
            }
        }
        Ok(h)
    }
}
