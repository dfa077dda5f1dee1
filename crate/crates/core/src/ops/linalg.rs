use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// `out[r, j] += Σ_k a[r, k] * b[k, j]` for row-major `a: rows×k`, `b: k×cols`.
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], rows: usize, k: usize, cols: usize) {
    for r in 0..rows {
        let o = &mut out[r * cols..(r + 1) * cols];
        for (kk, &av) in a[r * k..(r + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (ov, &bv) in o.iter_mut().zip(&b[kk * cols..(kk + 1) * cols]) {
                *ov += av * bv;
            }
        }
    }
}

/// `out[r, k] += Σ_j g[r, j] * b[k, j]` (right-multiply by `bᵀ`).
fn gemm_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], rows: usize, k: usize, cols: usize) {
    for r in 0..rows {
        let gr = &g[r * cols..(r + 1) * cols];
        for kk in 0..k {
            let br = &b[kk * cols..(kk + 1) * cols];
            out[r * k + kk] += gr.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k, j] += Σ_r a[r, k] * g[r, j]` (left-multiply by `aᵀ`).
fn gemm_at_acc(a: &[f64], g: &[f64], out: &mut [f64], rows: usize, k: usize, cols: usize) {
    for r in 0..rows {
        let gr = &g[r * cols..(r + 1) * cols];
        for (kk, &av) in a[r * k..(r + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (ov, &gv) in out[kk * cols..(kk + 1) * cols].iter_mut().zip(gr) {
                *ov += av * gv;
            }
        }
    }
}

pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let din = w.shape()[0];
    let dout = w.shape()[1];
    let rows = x.numel() / din;
    let mut out = Vec::with_capacity(rows * dout);
    for _ in 0..rows {
        out.extend_from_slice(b.data());
    }
    gemm_acc(x.data(), w.data(), &mut out, rows, din, dout);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    Tensor::from_parts(shape, out)
}

impl Graph {
    /// `y = x·w + b` over the last axis; `w` is `Din×Dout`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if ws.len() != 2 || xs.last() != Some(&ws[0]) || bs != [ws[1]] {
            return Err(Error::shape(
                "linear",
                format!("x {xs:?}, w {ws:?}, b {bs:?}"),
            ));
        }
        let out = linear_forward(self.value(x), self.value(w), self.value(b));
        Ok(self.record(
            "linear",
            &[x, w, b],
            out,
            Box::new(|inp, _, g| {
                let (x, w) = (inp[0], inp[1]);
                let (din, dout) = (w.shape()[0], w.shape()[1]);
                let rows = x.numel() / din;
                let mut gx = vec![0.0; x.numel()];
                gemm_bt_acc(g.data(), w.data(), &mut gx, rows, din, dout);
                let mut gw = vec![0.0; w.numel()];
                gemm_at_acc(x.data(), g.data(), &mut gw, rows, din, dout);
                let mut gb = vec![0.0; dout];
                for row in g.data().chunks(dout) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![
                    Some(Tensor::from_parts(x.shape().to_vec(), gx)),
                    Some(Tensor::from_parts(w.shape().to_vec(), gw)),
                    Some(Tensor::from_parts(vec![dout], gb)),
                ]
            }),
        ))
    }

    /// Batched matrix product over matching leading axes:
    /// `[..., m, k] × [..., k, n] → [..., m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
            return Err(Error::shape("matmul", format!("{sa:?} × {sb:?}")));
        }
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm_acc(
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = sa.clone();
        shape[r - 1] = n;
        Ok(self.record(
            "matmul",
            &[a, b],
            Tensor::from_parts(shape, out),
            Box::new(move |inp, _, g| {
                let (av, bv, gv) = (inp[0].data(), inp[1].data(), g.data());
                let mut ga = vec![0.0; batch * m * k];
                let mut gb = vec![0.0; batch * k * n];
                for i in 0..batch {
                    let gs = &gv[i * m * n..(i + 1) * m * n];
                    gemm_bt_acc(gs, &bv[i * k * n..(i + 1) * k * n], &mut ga[i * m * k..(i + 1) * m * k], m, k, n);
                    gemm_at_acc(&av[i * m * k..(i + 1) * m * k], gs, &mut gb[i * k * n..(i + 1) * k * n], m, k, n);
                }
                vec![
                    Some(Tensor::from_parts(inp[0].shape().to_vec(), ga)),
                    Some(Tensor::from_parts(inp[1].shape().to_vec(), gb)),
                ]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight_passes_through() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let w = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b0 = g.constant(Tensor::zeros(vec![2]));
        let y = g.linear(x, w, b0).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
        let b = g.constant(Tensor::new(vec![2], vec![3.0, 3.0]).unwrap());
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 5.0]);
    }

    #[test]
    fn linear_rejects_dim_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 3]));
        let w = g.constant(Tensor::zeros(vec![2, 2]));
        let b = g.constant(Tensor::zeros(vec![2]));
        assert!(g.linear(x, w, b).is_err());
    }

    #[test]
    fn matmul_small() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::new(vec![1, 2, 1], vec![5.0, 6.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[17.0, 39.0]);
    }
}
