use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Phase, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_B: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_A * (x + GELU_B * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_A * (x + GELU_B * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_A * (1.0 + 3.0 * GELU_B * x * x)
}

/// Keep-mask for dropout, one draw per element from a seeded stream.
pub fn dropout_mask(numel: usize, rate: f64, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..numel).map(|_| rng.random::<f64>() >= rate).collect()
}

/// Row-wise softmax over the last axis of a flat buffer.
pub fn softmax_rows(data: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (row, o) in data.chunks(k).zip(out.chunks_mut(k)) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut s = 0.0;
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = (xi - m).exp();
            s += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= s;
        }
    }
    out
}

fn same_shape(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", g.shape(a), g.shape(b)),
        ));
    }
    Ok(())
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.try_add(a, b).expect("add: shape mismatch")
    }

    pub fn try_add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.record(
            "add",
            &[a, b],
            out,
            Box::new(|_, _, g| vec![Some(g.clone()), Some(g.clone())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.record(
            "sub",
            &[a, b],
            out,
            Box::new(|_, _, g| vec![Some(g.clone()), Some(g.scale(-1.0))]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.record(
            "mul",
            &[a, b],
            out,
            Box::new(|x, _, g| {
                vec![
                    Some(g.zip_map(x[1], |g, b| g * b)),
                    Some(g.zip_map(x[0], |g, a| g * a)),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.record("scale", &[a], out, Box::new(move |_, _, g| vec![Some(g.scale(s))]))
    }

    /// `x[..., C] + b[C]`, broadcasting `b` over every leading position.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.shape(b) != [c] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} for last dim {c}", self.shape(b)),
            ));
        }
        let mut out = self.value(x).clone();
        let bv = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_mut(c) {
            for (o, bi) in row.iter_mut().zip(&bv) {
                *o += bi;
            }
        }
        Ok(self.record(
            "add_bias",
            &[x, b],
            out,
            Box::new(move |_, _, g| {
                let mut gb = vec![0.0; c];
                for row in g.data().chunks(c) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![Some(g.clone()), Some(Tensor::from_parts(vec![c], gb))]
            }),
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        match kind {
            Activation::Gelu => self.gelu(x),
            Activation::Relu => self.relu(x),
        }
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.record(
            "gelu",
            &[x],
            out,
            Box::new(|x, _, g| vec![Some(g.zip_map(x[0], |g, x| g * gelu_grad(x)))]),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let margin = self.value(x).data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        self.note_kink_margin("relu", margin);
        let signs: Vec<i64> = self.value(x).data().iter().map(|&v| (v > 0.0) as i64).collect();
        self.note_branches(signs);
        self.record(
            "relu",
            &[x],
            out,
            Box::new(|x, _, g| {
                vec![Some(g.zip_map(x[0], |g, x| if x > 0.0 { g } else { 0.0 }))]
            }),
        )
    }

    /// Softmax over the last axis, stabilised by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let k = self.value(x).last_dim();
        let out = Tensor::from_parts(
            self.shape(x).to_vec(),
            softmax_rows(self.value(x).data(), k),
        );
        self.record(
            "softmax",
            &[x],
            out,
            Box::new(move |_, y, g| {
                let mut gx = vec![0.0; g.numel()];
                for ((yr, gr), o) in y
                    .data()
                    .chunks(k)
                    .zip(g.data().chunks(k))
                    .zip(gx.chunks_mut(k))
                {
                    let d: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((oi, yi), gi) in o.iter_mut().zip(yr).zip(gr) {
                        *oi = yi * (gi - d);
                    }
                }
                vec![Some(Tensor::from_parts(y.shape().to_vec(), gx))]
            }),
        )
    }

    /// Inverted dropout with an explicit seed. Identity in eval phase or at
    /// rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::arg("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 || self.phase() == Phase::Eval {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = dropout_mask(self.value(x).numel(), rate, seed)
            .into_iter()
            .map(|k| if k { keep } else { 0.0 })
            .collect();
        let mask = Tensor::from_parts(self.shape(x).to_vec(), mask);
        let out = self.value(x).zip_map(&mask, |a, m| a * m);
        Ok(self.record(
            "dropout",
            &[x],
            out,
            Box::new(move |_, _, g| vec![Some(g.zip_map(&mask, |a, m| a * m))]),
        ))
    }

    /// Dropout drawing its seed from the graph's own stream.
    pub fn dropout_auto(&mut self, x: Var, rate: f64) -> Result<Var> {
        if rate == 0.0 || self.phase() == Phase::Eval {
            return self.dropout(x, rate, 0);
        }
        let seed = self.next_dropout_seed();
        self.dropout(x, rate, seed)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let shape = self.shape(x).to_vec();
        self.record(
            "sum",
            &[x],
            out,
            Box::new(move |_, _, g| vec![Some(Tensor::full(shape.clone(), g.item()))]),
        )
    }

    /// `Σ x ⊙ w` for a constant weight tensor.
    pub fn weighted_sum(&mut self, x: Var, w: &Tensor) -> Result<Var> {
        if self.shape(x) != w.shape() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{:?} vs {:?}", self.shape(x), w.shape()),
            ));
        }
        let out = Tensor::scalar(self.value(x).dot(w));
        let w = w.clone();
        Ok(self.record(
            "weighted_sum",
            &[x],
            out,
            Box::new(move |_, _, g| vec![Some(w.scale(g.item()))]),
        ))
    }

    /// Sum of squared errors against a constant target, divided by `denom`.
    pub fn squared_error(&mut self, x: Var, target: &Tensor, denom: f64) -> Result<Var> {
        if self.shape(x) != target.shape() {
            return Err(Error::shape(
                "squared_error",
                format!("{:?} vs {:?}", self.shape(x), target.shape()),
            ));
        }
        let diff = self.value(x).zip_map(target, |a, b| a - b);
        let out = Tensor::scalar(diff.dot(&diff) / denom);
        Ok(self.record(
            "squared_error",
            &[x],
            out,
            Box::new(move |_, _, g| vec![Some(diff.scale(2.0 * g.item() / denom))]),
        ))
    }

    pub fn mse(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let n = target.numel() as f64;
        self.squared_error(x, target, n)
    }

    /// Sum of scalar nodes.
    pub fn add_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        let mut acc = *xs
            .first()
            .ok_or_else(|| Error::arg("add_scalars", "empty input"))?;
        for &x in &xs[1..] {
            acc = self.try_add(acc, x)?;
        }
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let p = softmax_rows(&[0.0, 0.0], 2);
        assert_eq!(p, vec![0.5, 0.5]);
        let p = softmax_rows(&[100.0, 0.0], 2);
        assert!((p[0] - 1.0).abs() < 1e-40 + 1e-15 && p[1] > 0.0 && p[1] < 1e-40);
        assert!(p.iter().all(|v| v.is_finite()));
        let big = softmax_rows(&[1000.0, 999.0, -1000.0], 3);
        assert!((big.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dropout_rate_zero_is_identity_and_seeded_masks_repeat() {
        let mut g = Graph::with_phase(Phase::Train, 1);
        let x = g.leaf("x", Tensor::ones(vec![64]), true);
        assert_eq!(g.dropout(x, 0.0, 3).unwrap(), x);
        let a = g.dropout(x, 0.5, 42).unwrap();
        let b = g.dropout(x, 0.5, 42).unwrap();
        assert!(g.value(a).bit_eq(g.value(b)));
        assert!(g.value(a).data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(g.dropout(x, 1.0, 1).is_err());
        assert!(g.dropout(x, -0.1, 1).is_err());
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let mut g = Graph::new();
        let x = g.leaf("x", Tensor::ones(vec![8]), true);
        assert_eq!(g.dropout(x, 0.5, 9).unwrap(), x);
    }

    #[test]
    fn gelu_matches_known_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_191_990_607_477_2).abs() < 1e-12);
        assert!((gelu(-3.0) + 0.003_637_392_173_871_5).abs() < 1e-9);
    }
}
