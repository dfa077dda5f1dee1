//! NHWC convolution, transposed convolution and max pooling.
//!
//! Convolution weights are `Kh×Kw×(Cin/groups)×Cout`. Transposed-convolution
//! weights are `Kh×Kw×Cout×Cin`, i.e. exactly the tensor of the convolution
//! whose adjoint they compute.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Geometry of a forward convolution `x: n×h×w×cin → y: n×ho×wo×cout`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub ho: usize,
    pub wo: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    /// Visits every `(x index, w index, y index)` triple with a nonzero
    /// contribution, in a fixed order.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (cin_g, cout_g) = (self.cin_g(), self.cout_g());
        for n in 0..self.n {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let ybase = ((n * self.ho + oy) * self.wo + ox) * self.cout;
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let xbase = ((n * self.h + iy as usize) * self.w + ix as usize) * self.cin;
                            let wbase = (ky * self.kw + kx) * cin_g * self.cout;
                            for grp in 0..self.groups {
                                f(xbase + grp * cin_g, wbase, ybase + grp * cout_g, grp);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

pub fn tconv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let full = (input - 1) * stride + kernel;
    (full > 2 * pad && stride > 0).then(|| full - 2 * pad)
}

/// `y = conv(x, w)` without bias.
pub fn conv_forward(x: &[f64], wt: &[f64], geo: &ConvGeom) -> Vec<f64> {
    let mut y = vec![0.0; geo.n * geo.ho * geo.wo * geo.cout];
    let (cin_g, cout_g, cout) = (geo.cin_g(), geo.cout_g(), geo.cout);
    geo.for_each_tap(|xb, wb, yb, grp| {
        let yrow = &mut y[yb..yb + cout_g];
        for ci in 0..cin_g {
            let xv = x[xb + ci];
            if xv == 0.0 {
                continue;
            }
            let wrow = &wt[wb + ci * cout + grp * cout_g..wb + ci * cout + (grp + 1) * cout_g];
            for (yv, wv) in yrow.iter_mut().zip(wrow) {
                *yv += xv * wv;
            }
        }
    });
    y
}

/// Gradient of `conv_forward` with respect to `x`; also the transposed
/// convolution of `dy`.
pub fn conv_backward_data(dy: &[f64], wt: &[f64], geo: &ConvGeom) -> Vec<f64> {
    let mut dx = vec![0.0; geo.n * geo.h * geo.w * geo.cin];
    let (cin_g, cout_g, cout) = (geo.cin_g(), geo.cout_g(), geo.cout);
    geo.for_each_tap(|xb, wb, yb, grp| {
        let dyrow = &dy[yb..yb + cout_g];
        for ci in 0..cin_g {
            let wrow = &wt[wb + ci * cout + grp * cout_g..wb + ci * cout + (grp + 1) * cout_g];
            dx[xb + ci] += dyrow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
        }
    });
    dx
}

/// Gradient of `conv_forward` with respect to the weights.
pub fn conv_backward_weight(x: &[f64], dy: &[f64], geo: &ConvGeom) -> Vec<f64> {
    let mut dw = vec![0.0; geo.kh * geo.kw * geo.cin_g() * geo.cout];
    let (cin_g, cout_g, cout) = (geo.cin_g(), geo.cout_g(), geo.cout);
    geo.for_each_tap(|xb, wb, yb, grp| {
        let dyrow = &dy[yb..yb + cout_g];
        for ci in 0..cin_g {
            let xv = x[xb + ci];
            if xv == 0.0 {
                continue;
            }
            let start = wb + ci * cout + grp * cout_g;
            for (wv, g) in dw[start..start + cout_g].iter_mut().zip(dyrow) {
                *wv += xv * g;
            }
        }
    });
    dw
}

fn add_channel_bias(y: &mut [f64], b: &[f64]) {
    let c = b.len();
    for row in y.chunks_mut(c) {
        for (v, bv) in row.iter_mut().zip(b) {
            *v += bv;
        }
    }
}

fn channel_sums(g: &[f64], c: usize) -> Vec<f64> {
    let mut s = vec![0.0; c];
    for row in g.chunks(c) {
        for (acc, v) in s.iter_mut().zip(row) {
            *acc += v;
        }
    }
    s
}

fn expect_rank4(op: &'static str, s: &[usize]) -> Result<[usize; 4]> {
    s.try_into()
        .map_err(|_| Error::shape(op, format!("expected rank-4 tensor, got {s:?}")))
}

impl Graph {
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        let [n, h, wd, cin] = expect_rank4(OP, self.shape(x))?;
        let [kh, kw, cin_g, cout] = expect_rank4(OP, self.shape(w))?;
        if stride == 0 || groups == 0 {
            return Err(Error::arg(OP, "stride and groups must be positive"));
        }
        if cin % groups != 0 || cout % groups != 0 || cin_g != cin / groups {
            return Err(Error::shape(
                OP,
                format!("x channels {cin}, weight {:?}, groups {groups}", self.shape(w)),
            ));
        }
        if self.shape(b) != [cout] {
            return Err(Error::shape(OP, format!("bias {:?} for {cout} outputs", self.shape(b))));
        }
        let (Some(ho), Some(wo)) = (
            conv_out_extent(h, kh, stride, pad),
            conv_out_extent(wd, kw, stride, pad),
        ) else {
            return Err(Error::shape(
                OP,
                format!("non-positive output extent for {h}×{wd} with {kh}×{kw} kernel, pad {pad}"),
            ));
        };
        let geo = ConvGeom { n, h, w: wd, cin, ho, wo, cout, kh, kw, stride, pad, groups };
        let mut y = conv_forward(self.value(x).data(), self.value(w).data(), &geo);
        add_channel_bias(&mut y, self.value(b).data());
        Ok(self.record(
            OP,
            &[x, w, b],
            Tensor::from_parts(vec![n, ho, wo, cout], y),
            Box::new(move |inp, _, g| {
                let dx = conv_backward_data(g.data(), inp[1].data(), &geo);
                let dw = conv_backward_weight(inp[0].data(), g.data(), &geo);
                vec![
                    Some(Tensor::from_parts(inp[0].shape().to_vec(), dx)),
                    Some(Tensor::from_parts(inp[1].shape().to_vec(), dw)),
                    Some(Tensor::from_parts(vec![geo.cout], channel_sums(g.data(), geo.cout))),
                ]
            }),
        ))
    }

    /// Transposed convolution; output extent `(H−1)·stride − 2·pad + K`.
    pub fn transposed_conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        const OP: &str = "transposed_conv2d";
        let [n, h, wd, cin] = expect_rank4(OP, self.shape(x))?;
        let [kh, kw, cout, wcin] = expect_rank4(OP, self.shape(w))?;
        if stride == 0 {
            return Err(Error::arg(OP, "stride must be positive"));
        }
        if wcin != cin || self.shape(b) != [cout] {
            return Err(Error::shape(
                OP,
                format!("x {:?}, weight {:?}, bias {:?}", self.shape(x), self.shape(w), self.shape(b)),
            ));
        }
        let (Some(ho), Some(wo)) = (
            tconv_out_extent(h, kh, stride, pad),
            tconv_out_extent(wd, kw, stride, pad),
        ) else {
            return Err(Error::shape(OP, "non-positive output extent"));
        };
        // The equivalent forward convolution maps the output grid back onto x.
        let geo = ConvGeom {
            n,
            h: ho,
            w: wo,
            cin: cout,
            ho: h,
            wo: wd,
            cout: cin,
            kh,
            kw,
            stride,
            pad,
            groups: 1,
        };
        let mut y = conv_backward_data(self.value(x).data(), self.value(w).data(), &geo);
        add_channel_bias(&mut y, self.value(b).data());
        Ok(self.record(
            OP,
            &[x, w, b],
            Tensor::from_parts(vec![n, ho, wo, cout], y),
            Box::new(move |inp, _, g| {
                let dx = conv_forward(g.data(), inp[1].data(), &geo);
                let dw = conv_backward_weight(g.data(), inp[0].data(), &geo);
                vec![
                    Some(Tensor::from_parts(inp[0].shape().to_vec(), dx)),
                    Some(Tensor::from_parts(inp[1].shape().to_vec(), dw)),
                    Some(Tensor::from_parts(vec![geo.cin], channel_sums(g.data(), geo.cin))),
                ]
            }),
        ))
    }

    /// Max pooling with a square window, no padding.
    pub fn max_pool2d(&mut self, x: Var, size: usize, stride: usize) -> Result<Var> {
        const OP: &str = "max_pool2d";
        let [n, h, w, c] = expect_rank4(OP, self.shape(x))?;
        let (Some(ho), Some(wo)) = (
            conv_out_extent(h, size, stride, 0),
            conv_out_extent(w, size, stride, 0),
        ) else {
            return Err(Error::shape(OP, format!("{h}×{w} too small for window {size}")));
        };
        let xv = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; n * ho * wo * c];
        let mut argmax = vec![0usize; out.len()];
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let obase = ((b * ho + oy) * wo + ox) * c;
                    for ky in 0..size {
                        for kx in 0..size {
                            let ibase = ((b * h + oy * stride + ky) * w + ox * stride + kx) * c;
                            for ch in 0..c {
                                if xv[ibase + ch] > out[obase + ch] {
                                    out[obase + ch] = xv[ibase + ch];
                                    argmax[obase + ch] = ibase + ch;
                                }
                            }
                        }
                    }
                }
            }
        }
        // gap between the winner and the runner-up of each window
        let mut margin = f64::INFINITY;
        for (o, (&best, &at)) in out.iter().zip(&argmax).enumerate() {
            let (b, rest) = (o / (ho * wo * c), o % (ho * wo * c));
            let (oy, ox, ch) = (rest / (wo * c), rest / c % wo, rest % c);
            for ky in 0..size {
                for kx in 0..size {
                    let i = ((b * h + oy * stride + ky) * w + ox * stride + kx) * c + ch;
                    if i != at {
                        margin = margin.min(best - xv[i]);
                    }
                }
            }
        }
        self.note_kink_margin(OP, margin);
        self.note_branches(argmax.iter().map(|&i| i as i64));
        let in_shape = self.shape(x).to_vec();
        Ok(self.record(
            OP,
            &[x],
            Tensor::from_parts(vec![n, ho, wo, c], out),
            Box::new(move |_, _, g| {
                let mut gx = Tensor::zeros(in_shape.clone());
                for (gv, &src) in g.data().iter().zip(&argmax) {
                    gx.data_mut()[src] += gv;
                }
                vec![Some(gx)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_conv(x: Tensor, w: Tensor, stride: usize, pad: usize) -> Tensor {
        let mut g = Graph::new();
        let cout = w.shape()[3];
        let (x, w) = (g.constant(x), g.constant(w));
        let b = g.constant(Tensor::zeros(vec![cout]));
        let y = g.conv2d(x, w, b, stride, pad, 1).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn ones_kernel_sums_neighbourhood() {
        let y = run_conv(Tensor::ones(vec![1, 4, 4, 1]), Tensor::ones(vec![3, 3, 1, 1]), 1, 1);
        assert_eq!(y.shape(), &[1, 4, 4, 1]);
        assert_eq!(y.data()[5], 9.0);
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn stride_two_output_shape() {
        let y = run_conv(Tensor::ones(vec![1, 4, 4, 1]), Tensor::ones(vec![3, 3, 1, 1]), 2, 1);
        assert_eq!(y.shape(), &[1, 2, 2, 1]);
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(vec![1, 2, 2, 3]));
        let w = g.constant(Tensor::ones(vec![3, 3, 2, 4]));
        let b = g.constant(Tensor::zeros(vec![4]));
        assert!(g.conv2d(x, w, b, 1, 1, 1).is_err());
        // groups must divide the channel count
        let w = g.constant(Tensor::ones(vec![3, 3, 1, 4]));
        assert!(g.conv2d(x, w, b, 1, 1, 2).is_err());
        // kernel larger than padded input
        let w = g.constant(Tensor::ones(vec![5, 5, 3, 4]));
        assert!(g.conv2d(x, w, b, 1, 0, 1).is_err());
    }

    #[test]
    fn transposed_conv_tiles() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(vec![1, 2, 2, 1]));
        let w = g.constant(Tensor::ones(vec![2, 2, 1, 1]));
        let b = g.constant(Tensor::zeros(vec![1]));
        let y = g.transposed_conv2d(x, w, b, 2, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 4, 4, 1]);
        assert!(g.value(y).data().iter().all(|&v| v == 1.0));
        let w3 = g.constant(Tensor::ones(vec![3, 3, 1, 1]));
        assert!(g.transposed_conv2d(x, w3, b, 1, 2).is_err());
    }

    #[test]
    fn depthwise_groups() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1, 1, 2], vec![2.0, 3.0]).unwrap());
        let w = g.constant(Tensor::new(vec![1, 1, 1, 2], vec![10.0, 100.0]).unwrap());
        let b = g.constant(Tensor::zeros(vec![2]));
        let y = g.conv2d(x, w, b, 1, 0, 2).unwrap();
        assert_eq!(g.value(y).data(), &[20.0, 300.0]);
    }

    #[test]
    fn max_pool_picks_max() {
        let mut g = Graph::new();
        let x = g.leaf(
            "x",
            Tensor::new(vec![1, 2, 2, 1], vec![1.0, 4.0, 3.0, 2.0]).unwrap(),
            true,
        );
        let y = g.max_pool2d(x, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
