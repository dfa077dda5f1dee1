//! Multi-scale deformable sampling kernel.
//!
//! Queries are the tokens of a flattened pyramid. Each query samples every
//! level at `K` points around its reference point (its own cell centre,
//! reused in normalised coordinates on every level) and mixes the samples
//! with per-head attention weights.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::sample::{bilinear_taps, cell_center, Border};
use crate::tensor::Tensor;

/// Layout of a flattened pyramid: per-level `(h, w)` and start offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelLayout {
    pub shapes: Vec<(usize, usize)>,
    pub starts: Vec<usize>,
}

impl LevelLayout {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        let mut starts = Vec::with_capacity(shapes.len());
        let mut acc = 0;
        for &(h, w) in shapes {
            starts.push(acc);
            acc += h * w;
        }
        LevelLayout {
            shapes: shapes.to_vec(),
            starts,
        }
    }

    pub fn total(&self) -> usize {
        self.shapes.iter().map(|(h, w)| h * w).sum()
    }

    pub fn levels(&self) -> usize {
        self.shapes.len()
    }

    /// Normalised reference point of every token, in flattened order.
    pub fn reference_points(&self) -> Vec<(f64, f64)> {
        let mut pts = Vec::with_capacity(self.total());
        for &(h, w) in &self.shapes {
            for i in 0..h {
                for j in 0..w {
                    pts.push(cell_center(i, j, h, w));
                }
            }
        }
        pts
    }
}

struct Dims {
    n: usize,
    t: usize,
    heads: usize,
    dh: usize,
    levels: usize,
    points: usize,
}

/// Calls `f(n, q, m, l, k, u, v)` for every sampling point.
fn for_each_point(
    d: &Dims,
    layout: &LevelLayout,
    refs: &[(f64, f64)],
    offsets: &[f64],
    mut f: impl FnMut(usize, usize, usize, usize, usize, f64, f64),
) {
    for n in 0..d.n {
        for q in 0..d.t {
            let (ru, rv) = refs[q];
            for m in 0..d.heads {
                for l in 0..d.levels {
                    let (h, w) = layout.shapes[l];
                    for k in 0..d.points {
                        let o = ((((n * d.t + q) * d.heads + m) * d.levels + l) * d.points + k) * 2;
                        let u = ru + offsets[o] / w as f64;
                        let v = rv + offsets[o + 1] / h as f64;
                        f(n, q, m, l, k, u, v);
                    }
                }
            }
        }
    }
}

impl Graph {
    /// `value: N×T×M×Dh`, `offsets: N×T×M×L×K×2` (in cells of the sampled
    /// level, `(x, y)` order), `attn: N×T×M×L×K` → `N×T×(M·Dh)`.
    pub fn msda_sample(
        &mut self,
        value: Var,
        offsets: Var,
        attn: Var,
        layout: &LevelLayout,
    ) -> Result<Var> {
        const OP: &str = "msda_sample";
        let [n, t, heads, dh]: [usize; 4] = self
            .shape(value)
            .try_into()
            .map_err(|_| Error::shape(OP, format!("value {:?}", self.shape(value))))?;
        let levels = layout.levels();
        if t != layout.total() {
            return Err(Error::shape(OP, format!("{t} tokens for layout {:?}", layout.shapes)));
        }
        let os = self.shape(offsets).to_vec();
        if os.len() != 6 || os[..4] != [n, t, heads, levels] || os[5] != 2 {
            return Err(Error::shape(OP, format!("offsets {os:?}")));
        }
        let points = os[4];
        if self.shape(attn) != [n, t, heads, levels, points] {
            return Err(Error::shape(OP, format!("attention {:?}", self.shape(attn))));
        }
        let d = Dims { n, t, heads, dh, levels, points };
        let refs = layout.reference_points();
        let layout = layout.clone();

        let (vv, ov, av) = (
            self.value(value).data(),
            self.value(offsets).data(),
            self.value(attn).data(),
        );
        let mut out = vec![0.0; n * t * heads * dh];
        let mut margin = f64::INFINITY;
        let mut cells = Vec::with_capacity(ov.len());
        for_each_point(&d, &layout, &refs, ov, |b, q, m, l, k, u, v| {
            let (h, w) = layout.shapes[l];
            // tap weights switch formula on integer pixel coordinates
            let (x, y) = (u * w as f64 - 0.5, v * h as f64 - 0.5);
            margin = margin.min((x - x.round()).abs()).min((y - y.round()).abs());
            cells.extend([x.floor() as i64, y.floor() as i64]);
            let a = av[(((b * t + q) * heads + m) * levels + l) * points + k];
            let taps = bilinear_taps(h, w, u, v, Border::Zeros);
            let o = ((b * t + q) * heads + m) * dh;
            for s in 0..taps.len {
                let src = ((b * t + layout.starts[l] + taps.cell[s]) * heads + m) * dh;
                let wt = a * taps.weight[s];
                for c in 0..dh {
                    out[o + c] += wt * vv[src + c];
                }
            }
        });

        self.note_kink_margin(OP, margin);
        self.note_branches(cells);
        Ok(self.record(
            OP,
            &[value, offsets, attn],
            Tensor::from_parts(vec![n, t, heads * dh], out),
            Box::new(move |inp, _, g| {
                let (vv, ov, av, gv) = (inp[0].data(), inp[1].data(), inp[2].data(), g.data());
                let mut gval = vec![0.0; vv.len()];
                let mut goff = vec![0.0; ov.len()];
                let mut gatt = vec![0.0; av.len()];
                for_each_point(&d, &layout, &refs, ov, |b, q, m, l, k, u, v| {
                    let (h, w) = layout.shapes[l];
                    let ai = (((b * d.t + q) * d.heads + m) * d.levels + l) * d.points + k;
                    let a = av[ai];
                    let taps = bilinear_taps(h, w, u, v, Border::Zeros);
                    let go = &gv[((b * d.t + q) * d.heads + m) * d.dh..][..d.dh];
                    let (mut da, mut du, mut dv) = (0.0, 0.0, 0.0);
                    for s in 0..taps.len {
                        let src = ((b * d.t + layout.starts[l] + taps.cell[s]) * d.heads + m) * d.dh;
                        let dot: f64 = go.iter().zip(&vv[src..src + d.dh]).map(|(x, y)| x * y).sum();
                        da += taps.weight[s] * dot;
                        du += taps.dw_du[s] * dot;
                        dv += taps.dw_dv[s] * dot;
                        let wt = a * taps.weight[s];
                        for (gvv, gg) in gval[src..src + d.dh].iter_mut().zip(go) {
                            *gvv += wt * gg;
                        }
                    }
                    gatt[ai] += da;
                    goff[ai * 2] += a * du / w as f64;
                    goff[ai * 2 + 1] += a * dv / h as f64;
                });
                vec![
                    Some(Tensor::from_parts(inp[0].shape().to_vec(), gval)),
                    Some(Tensor::from_parts(inp[1].shape().to_vec(), goff)),
                    Some(Tensor::from_parts(inp[2].shape().to_vec(), gatt)),
                ]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_offsets() {
        let l = LevelLayout::new(&[(8, 8), (4, 4), (2, 2)]);
        assert_eq!(l.total(), 84);
        assert_eq!(l.starts, vec![0, 64, 80]);
        assert_eq!(l.reference_points()[64], (0.125, 0.125));
    }

    #[test]
    fn single_point_at_reference_reads_own_cell() {
        let layout = LevelLayout::new(&[(2, 2), (1, 1)]);
        let vals: Vec<f64> = (0..5).map(|v| v as f64 + 1.0).collect();
        let mut g = Graph::new();
        let value = g.constant(Tensor::new(vec![1, 5, 1, 1], vals).unwrap());
        let offsets = g.constant(Tensor::zeros(vec![1, 5, 1, 2, 1, 2]));
        let mut a = Tensor::zeros(vec![1, 5, 1, 2, 1]);
        // weight only the first level
        for q in 0..5 {
            a.data_mut()[q * 2] = 1.0;
        }
        let attn = g.constant(a);
        let out = g.msda_sample(value, offsets, attn, &layout).unwrap();
        let o = g.value(out).data();
        assert_eq!(&o[..4], &[1.0, 2.0, 3.0, 4.0]);
        // the 1×1 level's centre is the centre of the 2×2 grid
        assert!((o[4] - 2.5).abs() < 1e-12);
    }
}
