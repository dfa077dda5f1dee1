//! Bilinear sampling with the align-corners-false convention.
//!
//! A normalised location `(u, v) ∈ [0, 1]²` maps to pixel coordinates
//! `x = u·W − 0.5`, `y = v·H − 0.5`, so cell `(i, j)` has its centre at
//! `((j + 0.5)/W, (i + 0.5)/H)`.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Border {
    /// Corners outside the grid contribute zero.
    Zeros,
    /// Coordinates are clamped into the grid (image resizing).
    Clamp,
}

/// The (up to) four grid cells touched by one sample.
#[derive(Debug, Clone, Copy, Default)]
pub struct Taps {
    pub len: usize,
    /// Flat `y·W + x` cell indices.
    pub cell: [usize; 4],
    pub weight: [f64; 4],
    /// ∂weight/∂u and ∂weight/∂v (zero-border mode only).
    pub dw_du: [f64; 4],
    pub dw_dv: [f64; 4],
}

impl Taps {
    fn push(&mut self, cell: usize, weight: f64, du: f64, dv: f64) {
        self.cell[self.len] = cell;
        self.weight[self.len] = weight;
        self.dw_du[self.len] = du;
        self.dw_dv[self.len] = dv;
        self.len += 1;
    }

    /// `Σ weight · f[cell, ch]` for a row-major `cells×c` buffer.
    pub fn gather(&self, f: &[f64], c: usize, ch: usize) -> f64 {
        (0..self.len)
            .map(|t| self.weight[t] * f[self.cell[t] * c + ch])
            .sum()
    }
}

pub fn bilinear_taps(h: usize, w: usize, u: f64, v: f64, border: Border) -> Taps {
    let mut taps = Taps::default();
    let (mut x, mut y) = (u * w as f64 - 0.5, v * h as f64 - 0.5);
    if border == Border::Clamp {
        x = x.clamp(0.0, (w - 1) as f64);
        y = y.clamp(0.0, (h - 1) as f64);
    }
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let corners = [
        (y0, x0, (1.0 - fy) * (1.0 - fx), -(1.0 - fy), -(1.0 - fx)),
        (y0, x0 + 1, (1.0 - fy) * fx, 1.0 - fy, -fx),
        (y0 + 1, x0, fy * (1.0 - fx), -fy, 1.0 - fx),
        (y0 + 1, x0 + 1, fy * fx, fy, fx),
    ];
    for (cy, cx, wt, dx, dy) in corners {
        let (cy, cx) = match border {
            Border::Zeros => {
                if cy < 0 || cx < 0 || cy >= h as isize || cx >= w as isize {
                    continue;
                }
                (cy as usize, cx as usize)
            }
            Border::Clamp => (
                cy.clamp(0, h as isize - 1) as usize,
                cx.clamp(0, w as isize - 1) as usize,
            ),
        };
        if wt == 0.0 && border == Border::Clamp {
            continue;
        }
        taps.push(cy * w + cx, wt, dx * w as f64, dy * h as f64);
    }
    taps
}

/// Normalised centre of cell `(i, j)` on an `h×w` grid, as `(u, v)`.
pub fn cell_center(i: usize, j: usize, h: usize, w: usize) -> (f64, f64) {
    ((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64)
}

/// Bilinear resize of `x: n×h×w×c` to `n×oh×ow×c` (clamped borders).
pub fn resize_tensor(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let [n, h, w, c] = x.shape().try_into().expect("rank 4");
    let mut out = vec![0.0; n * oh * ow * c];
    for i in 0..oh {
        for j in 0..ow {
            let (u, v) = cell_center(i, j, oh, ow);
            let taps = bilinear_taps(h, w, u, v, Border::Clamp);
            for b in 0..n {
                let src = &x.data()[b * h * w * c..(b + 1) * h * w * c];
                let o = ((b * oh + i) * ow + j) * c;
                for ch in 0..c {
                    out[o + ch] = taps.gather(src, c, ch);
                }
            }
        }
    }
    Tensor::from_parts(vec![n, oh, ow, c], out)
}

fn resize_adjoint(g: &Tensor, h: usize, w: usize) -> Tensor {
    let [n, oh, ow, c] = g.shape().try_into().expect("rank 4");
    let mut gx = vec![0.0; n * h * w * c];
    for i in 0..oh {
        for j in 0..ow {
            let (u, v) = cell_center(i, j, oh, ow);
            let taps = bilinear_taps(h, w, u, v, Border::Clamp);
            for b in 0..n {
                let o = ((b * oh + i) * ow + j) * c;
                for t in 0..taps.len {
                    let dst = (b * h * w + taps.cell[t]) * c;
                    for ch in 0..c {
                        gx[dst + ch] += taps.weight[t] * g.data()[o + ch];
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![n, h, w, c], gx)
}

impl Graph {
    /// Samples `f: H×W×C` at normalised `(u, v)` locations with zero borders,
    /// giving `len(locs)×C`. Differentiable with respect to `f`.
    pub fn bilinear_sample(&mut self, f: Var, locs: &[(f64, f64)]) -> Result<Var> {
        let [h, w, c]: [usize; 3] = self
            .shape(f)
            .try_into()
            .map_err(|_| Error::shape("bilinear_sample", format!("expected H×W×C, got {:?}", self.shape(f))))?;
        if locs.is_empty() {
            return Err(Error::arg("bilinear_sample", "no sample locations"));
        }
        let taps: Vec<Taps> = locs
            .iter()
            .map(|&(u, v)| bilinear_taps(h, w, u, v, Border::Zeros))
            .collect();
        let fv = self.value(f).data();
        let mut out = vec![0.0; locs.len() * c];
        for (s, t) in taps.iter().enumerate() {
            for ch in 0..c {
                out[s * c + ch] = t.gather(fv, c, ch);
            }
        }
        Ok(self.record(
            "bilinear_sample",
            &[f],
            Tensor::from_parts(vec![locs.len(), c], out),
            Box::new(move |_, _, g| {
                let mut gf = vec![0.0; h * w * c];
                for (s, t) in taps.iter().enumerate() {
                    for k in 0..t.len {
                        for ch in 0..c {
                            gf[t.cell[k] * c + ch] += t.weight[k] * g.data()[s * c + ch];
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![h, w, c], gf))]
            }),
        ))
    }

    /// Bilinear resize of an NHWC tensor. Same-size resizes return `x`.
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let [_, h, w, _]: [usize; 4] = self
            .shape(x)
            .try_into()
            .map_err(|_| Error::shape("resize_bilinear", format!("expected NHWC, got {:?}", self.shape(x))))?;
        if oh == 0 || ow == 0 {
            return Err(Error::arg("resize_bilinear", "zero output extent"));
        }
        if (oh, ow) == (h, w) {
            return Ok(x);
        }
        let out = resize_tensor(self.value(x), oh, ow);
        Ok(self.record(
            "resize_bilinear",
            &[x],
            out,
            Box::new(move |_, _, g| vec![Some(resize_adjoint(g, h, w))]),
        ))
    }
}
