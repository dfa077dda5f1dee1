//! Parameter registration and forward helpers shared by the branches.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::ops::{Activation, BnOptions, BnState};
use crate::params::ParameterStore;
use crate::rng;
use crate::tensor::Tensor;

/// Registers parameters under a common seed and frozen flag.
pub struct Registrar<'a> {
    pub store: &'a mut ParameterStore,
    pub seed: u64,
    pub frozen: bool,
}

impl Registrar<'_> {
    fn fan_in_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = rng::uniform(self.seed, name, shape, -bound, bound);
        self.store.insert(name, t, self.frozen)
    }

    pub fn linear(&mut self, prefix: &str, din: usize, dout: usize) -> Result<()> {
        self.fan_in_uniform(&format!("{prefix}.w"), &[din, dout], din)?;
        self.fan_in_uniform(&format!("{prefix}.b"), &[dout], din)
    }

    pub fn conv(&mut self, prefix: &str, k: usize, cin_per_group: usize, cout: usize) -> Result<()> {
        let fan_in = k * k * cin_per_group;
        self.fan_in_uniform(&format!("{prefix}.w"), &[k, k, cin_per_group, cout], fan_in)?;
        self.fan_in_uniform(&format!("{prefix}.b"), &[cout], fan_in)
    }

    /// Transposed conv weights are `k×k×cout×cin`.
    pub fn tconv(&mut self, prefix: &str, k: usize, cin: usize, cout: usize) -> Result<()> {
        let fan_in = k * k * cin;
        self.fan_in_uniform(&format!("{prefix}.w"), &[k, k, cout, cin], fan_in)?;
        self.fan_in_uniform(&format!("{prefix}.b"), &[cout], fan_in)
    }

    pub fn norm(&mut self, prefix: &str, d: usize) -> Result<()> {
        self.store
            .insert(format!("{prefix}.gamma"), Tensor::ones(vec![d]), self.frozen)?;
        self.store
            .insert(format!("{prefix}.beta"), Tensor::zeros(vec![d]), self.frozen)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let t = rng::normal(self.seed, name, shape, std);
        self.store.insert(name, t, self.frozen)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.store.insert(name, Tensor::zeros(shape.to_vec()), self.frozen)
    }

    pub fn zero_linear(&mut self, prefix: &str, din: usize, dout: usize) -> Result<()> {
        self.zeros(&format!("{prefix}.w"), &[din, dout])?;
        self.zeros(&format!("{prefix}.b"), &[dout])
    }
}

/// Forward-side parameter access.
pub struct Params<'a> {
    pub store: &'a ParameterStore,
}

impl Params<'_> {
    pub fn get(&self, g: &mut Graph, name: &str) -> Result<Var> {
        g.param(self.store, name)
    }

    pub fn linear(&self, g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
        let w = g.param(self.store, &format!("{prefix}.w"))?;
        let b = g.param(self.store, &format!("{prefix}.b"))?;
        g.linear(x, w, b)
    }

    pub fn conv(&self, g: &mut Graph, prefix: &str, x: Var, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let w = g.param(self.store, &format!("{prefix}.w"))?;
        let b = g.param(self.store, &format!("{prefix}.b"))?;
        g.conv2d(x, w, b, stride, pad, groups)
    }

    pub fn tconv(&self, g: &mut Graph, prefix: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = g.param(self.store, &format!("{prefix}.w"))?;
        let b = g.param(self.store, &format!("{prefix}.b"))?;
        g.transposed_conv2d(x, w, b, stride, pad)
    }

    pub fn layer_norm(&self, g: &mut Graph, prefix: &str, x: Var, eps: f64) -> Result<Var> {
        let gamma = g.param(self.store, &format!("{prefix}.gamma"))?;
        let beta = g.param(self.store, &format!("{prefix}.beta"))?;
        g.layer_norm(x, gamma, beta, eps)
    }

    pub fn batch_norm(&self, g: &mut Graph, prefix: &str, x: Var, state: &mut BnState, opts: BnOptions) -> Result<Var> {
        let gamma = g.param(self.store, &format!("{prefix}.gamma"))?;
        let beta = g.param(self.store, &format!("{prefix}.beta"))?;
        g.batch_norm(x, gamma, beta, state, opts)
    }

    /// `fc2(act(fc1(x)))`.
    pub fn ffn(&self, g: &mut Graph, prefix: &str, x: Var, act: Activation) -> Result<Var> {
        let h = self.linear(g, &format!("{prefix}.fc1"), x)?;
        let h = g.activation(h, act);
        self.linear(g, &format!("{prefix}.fc2"), h)
    }
}

/// Hidden width of a feed-forward layer of width `d` at `ratio`.
pub fn hidden_width(d: usize, ratio: f64) -> usize {
    ((d as f64 * ratio).round() as usize).max(1)
}
