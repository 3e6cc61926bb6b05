//! Dense building blocks on top of the autograd tape.

use rand::Rng as _;

use crate::autograd::{Graph, Mat, Var};
use crate::params::{fan_in_uniform, ParamId, ParamStore};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), fan_in_uniform(fan_in, fan_out, rng)),
            bias: store.add(format!("{name}.bias"), Mat::zeros((1, fan_out))),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let h = g.matmul(x, w);
        g.add_row(h, b)
    }
}

/// Perceptron with SiLU hidden activations and a linear output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: &[usize],
        output: usize,
        rng: &mut Rng,
    ) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h);
            if i < last {
                h = g.silu(h);
            }
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-8;

    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Mat::ones((1, d))),
            beta: store.add(format!("{name}.beta"), Mat::zeros((1, d))),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, Self::EPS)
    }
}

/// Dropout configuration for one forward pass; `None` means evaluation mode.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: Option<&'a mut Rng>,
}

impl<'a> Dropout<'a> {
    pub fn eval() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, rng: &'a mut Rng) -> Self {
        Self { rate, rng: Some(rng) }
    }

    /// Inverted dropout: surviving entries are scaled by `1 / (1 - rate)`.
    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        let rate = self.rate;
        match self.rng.as_deref_mut() {
            Some(rng) if rate > 0.0 => {
                let keep = 1.0 / (1.0 - rate);
                let mask = Mat::from_shape_fn(
                    g.value(x).dim(),
                    |_| {
                        if rng.random::<f64>() < rate {
                            0.0
                        } else {
                            keep
                        }
                    },
                );
                let m = g.constant(mask);
                g.mul(x, m)
            }
            _ => x,
        }
    }
}
