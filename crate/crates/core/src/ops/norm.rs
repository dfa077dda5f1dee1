use crate::error::{Error, Result};
use crate::graph::{Graph, Phase, Var};
use crate::tensor::Tensor;

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnState {
    /// Mean 0, variance 1.
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn is_initialized(&self) -> bool {
        !self.running_mean.is_empty()
            && self
                .running_mean
                .iter()
                .chain(&self.running_var)
                .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BnOptions {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BnOptions {
    fn default() -> Self {
        BnOptions {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Shared backward for normalisation over groups of values:
/// `dx = (dxhat − mean(dxhat) − xhat·mean(dxhat·xhat)) / σ`.
fn normalize_backward(dxhat: &[f64], xhat: &[f64], inv_std: f64, out: &mut [f64]) {
    let m = dxhat.len() as f64;
    let mean_d = dxhat.iter().sum::<f64>() / m;
    let mean_dx = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / m;
    for ((o, d), xh) in out.iter_mut().zip(dxhat).zip(xhat) {
        *o = (d - mean_d - xh * mean_dx) * inv_std;
    }
}

fn check_affine(g: &Graph, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<usize> {
    let d = g.value(x).last_dim();
    if g.shape(gamma) != [d] || g.shape(beta) != [d] {
        return Err(Error::shape(
            op,
            format!("x {:?}, gamma {:?}, beta {:?}", g.shape(x), g.shape(gamma), g.shape(beta)),
        ));
    }
    Ok(d)
}

impl Graph {
    /// Per-row normalisation over the last axis, then affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = check_affine(self, "layer_norm", x, gamma, beta)?;
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.numel() / d;
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gv[j] + bv[j];
            }
        }
        let shape = xv.shape().to_vec();
        Ok(self.record(
            "layer_norm",
            &[x, gamma, beta],
            Tensor::from_parts(shape.clone(), out),
            Box::new(move |inp, _, g| {
                let gamma = inp[1].data();
                let mut gx = vec![0.0; g.numel()];
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    for j in 0..d {
                        dxhat[j] = gr[j] * gamma[j];
                        ggamma[j] += gr[j] * xr[j];
                        gbeta[j] += gr[j];
                    }
                    normalize_backward(&dxhat, xr, inv_std[r], &mut gx[r * d..(r + 1) * d]);
                }
                vec![
                    Some(Tensor::from_parts(shape.clone(), gx)),
                    Some(Tensor::from_parts(vec![d], ggamma)),
                    Some(Tensor::from_parts(vec![d], gbeta)),
                ]
            }),
        ))
    }

    /// Batch normalisation over every axis but the last (channels).
    ///
    /// In the train phase the batch statistics normalise the input and update
    /// `state`; in eval the running statistics are used unchanged.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState,
        opts: BnOptions,
    ) -> Result<Var> {
        let c = check_affine(self, "batch_norm", x, gamma, beta)?;
        let train = self.phase() == Phase::Train;
        if !train && !state.is_initialized() {
            return Err(Error::UninitializedBatchNorm);
        }
        if state.is_initialized() && state.running_mean.len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("state for {} channels, input has {c}", state.running_mean.len()),
            ));
        }
        let xv = self.value(x);
        let m = xv.numel() / c;
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let (mean, var) = if train {
            let mut mean = vec![0.0; c];
            for row in xv.data().chunks(c) {
                for (acc, v) in mean.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            mean.iter_mut().for_each(|v| *v /= m as f64);
            let mut var = vec![0.0; c];
            for row in xv.data().chunks(c) {
                for ((acc, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                    *acc += (v - mu) * (v - mu);
                }
            }
            let unbiased: Vec<f64> = var
                .iter()
                .map(|v| if m > 1 { v / (m - 1) as f64 } else { *v })
                .collect();
            var.iter_mut().for_each(|v| *v /= m as f64);
            if !state.is_initialized() {
                *state = BnState::new(c);
            }
            for ch in 0..c {
                state.running_mean[ch] =
                    (1.0 - opts.momentum) * state.running_mean[ch] + opts.momentum * mean[ch];
                state.running_var[ch] =
                    (1.0 - opts.momentum) * state.running_var[ch] + opts.momentum * unbiased[ch];
            }
            (mean, var)
        } else {
            (state.running_mean.clone(), state.running_var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + opts.eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.numel()];
        let mut out = vec![0.0; xv.numel()];
        for (i, v) in xv.data().iter().enumerate() {
            let ch = i % c;
            xhat[i] = (v - mean[ch]) * inv_std[ch];
            out[i] = xhat[i] * gv[ch] + bv[ch];
        }
        let shape = xv.shape().to_vec();
        Ok(self.record(
            "batch_norm",
            &[x, gamma, beta],
            Tensor::from_parts(shape.clone(), out),
            Box::new(move |inp, _, g| {
                let gamma = inp[1].data();
                let gd = g.data();
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for (i, gvv) in gd.iter().enumerate() {
                    ggamma[i % c] += gvv * xhat[i];
                    gbeta[i % c] += gvv;
                }
                let mut gx = vec![0.0; gd.len()];
                if train {
                    let mut dxhat = vec![0.0; m];
                    let mut xh = vec![0.0; m];
                    let mut tmp = vec![0.0; m];
                    for ch in 0..c {
                        for r in 0..m {
                            dxhat[r] = gd[r * c + ch] * gamma[ch];
                            xh[r] = xhat[r * c + ch];
                        }
                        normalize_backward(&dxhat, &xh, inv_std[ch], &mut tmp);
                        for r in 0..m {
                            gx[r * c + ch] = tmp[r];
                        }
                    }
                } else {
                    for (i, gvv) in gd.iter().enumerate() {
                        gx[i] = gvv * gamma[i % c] * inv_std[i % c];
                    }
                }
                vec![
                    Some(Tensor::from_parts(shape.clone(), gx)),
                    Some(Tensor::from_parts(vec![c], ggamma)),
                    Some(Tensor::from_parts(vec![c], gbeta)),
                ]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine(g: &mut Graph, d: usize) -> (Var, Var) {
        (g.constant(Tensor::ones(vec![d])), g.constant(Tensor::zeros(vec![d])))
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let (ga, be) = affine(&mut g, 2);
        let c = g.constant(Tensor::full(vec![1, 2], 7.0));
        let y = g.layer_norm(c, ga, be, 1e-6).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap());
        let y = g.layer_norm(x, ga, be, 1e-14).unwrap();
        let d = g.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-12 && (d[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_eval_identity() {
        let mut g = Graph::new();
        let (ga, be) = affine(&mut g, 3);
        let xt = Tensor::new(vec![1, 1, 2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.0, -4.0]).unwrap();
        let x = g.constant(xt.clone());
        let mut st = BnState::new(3);
        let y = g.batch_norm(x, ga, be, &mut st, BnOptions::default()).unwrap();
        assert!(g.value(y).max_abs_diff(&xt) < 1e-4);
        assert_eq!(st, BnState::new(3));
    }

    #[test]
    fn batch_norm_train_centres_and_updates_state() {
        let mut g = Graph::with_phase(Phase::Train, 0);
        let (ga, be) = affine(&mut g, 2);
        let data: Vec<f64> = (0..16).map(|i| 5.0 + ((i * 7) % 5) as f64 - 2.0 + (i % 2) as f64 * 0.5).collect();
        let x = g.constant(Tensor::new(vec![2, 2, 2, 2], data).unwrap());
        let mut st = BnState::new(2);
        let y = g.batch_norm(x, ga, be, &mut st, BnOptions::default()).unwrap();
        let yv = g.value(y);
        for ch in 0..2 {
            let mean: f64 = yv.data().iter().skip(ch).step_by(2).sum::<f64>() / 8.0;
            assert!(mean.abs() <= 1e-6);
        }
        assert!(st.running_mean[0] > 0.0);
    }

    #[test]
    fn batch_norm_eval_requires_state() {
        let mut g = Graph::new();
        let (ga, be) = affine(&mut g, 2);
        let x = g.constant(Tensor::ones(vec![1, 1, 1, 2]));
        let mut st = BnState::default();
        assert!(matches!(
            g.batch_norm(x, ga, be, &mut st, BnOptions::default()),
            Err(Error::UninitializedBatchNorm)
        ));
    }
}
