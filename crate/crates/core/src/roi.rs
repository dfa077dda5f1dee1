//! Region scoring: RoIAlign on a dense feature map, cosine scores against
//! text embeddings and weighted geometric fusion with detector scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::elementwise::softmax_rows;
use crate::tensor::Tensor;

/// Samples per bin along each axis.
pub const SAMPLES_PER_BIN: usize = 2;

/// Box `(x0, y0, x1, y1)` in normalised image coordinates.
pub type RoiBox = [f64; 4];

pub fn validate_box(b: &RoiBox) -> Result<()> {
    let ok = b.iter().all(|v| v.is_finite()) && b[0] < b[2] && b[1] < b[3];
    if ok {
        Ok(())
    } else {
        Err(Error::arg("roi_align", format!("degenerate box {b:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiFeatures {
    /// `n×h×w×C`.
    pub bins: Tensor,
    /// `n×C`, mean over bins.
    pub pooled: Tensor,
}

/// Zero-border bilinear read at normalised `(u, v)` written as nested
/// linear interpolation, so equal neighbours give back their value exactly.
fn bilinear_lerp(f: &[f64], h: usize, w: usize, c: usize, u: f64, v: f64, out: &mut [f64]) {
    let (x, y) = (u * w as f64 - 0.5, v * h as f64 - 0.5);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (j, i) = (x0 as isize, y0 as isize);
    let at = |i: isize, j: isize, ch: usize| {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            0.0
        } else {
            f[(i as usize * w + j as usize) * c + ch]
        }
    };
    for (ch, o) in out.iter_mut().enumerate() {
        let top = at(i, j, ch) + fx * (at(i, j + 1, ch) - at(i, j, ch));
        let bot = at(i + 1, j, ch) + fx * (at(i + 1, j + 1, ch) - at(i + 1, j, ch));
        *o = top + fy * (bot - top);
    }
}

/// `m ← m + (x − m)/k`: a running mean that stays exact for constant input.
fn running_mean(m: &mut [f64], x: &[f64], k: usize) {
    for (a, b) in m.iter_mut().zip(x) {
        *a += (b - *a) / k as f64;
    }
}

/// RoIAlign over `f` (`H×W×C`) with 2×2 samples per bin and zero border.
pub fn roi_align(f: &Tensor, boxes: &[RoiBox], out: (usize, usize)) -> Result<RoiFeatures> {
    let &[h, w, c] = f.shape() else {
        return Err(Error::shape("roi_align", format!("feature {:?}, expected H×W×C", f.shape())));
    };
    if boxes.is_empty() || out.0 == 0 || out.1 == 0 {
        return Err(Error::arg("roi_align", "need ≥1 box and a positive output size"));
    }
    let (oh, ow) = out;
    let s = SAMPLES_PER_BIN;
    let mut bins = vec![0.0; boxes.len() * oh * ow * c];
    let mut pooled = vec![0.0; boxes.len() * c];
    let mut sample = vec![0.0; c];
    for (r, b) in boxes.iter().enumerate() {
        validate_box(b)?;
        let (bw, bh) = ((b[2] - b[0]) / ow as f64, (b[3] - b[1]) / oh as f64);
        let pool = &mut pooled[r * c..][..c];
        for i in 0..oh {
            for j in 0..ow {
                let dst = &mut bins[((r * oh + i) * ow + j) * c..][..c];
                for sy in 0..s {
                    let v = b[1] + bh * (i as f64 + (sy as f64 + 0.5) / s as f64);
                    for sx in 0..s {
                        let u = b[0] + bw * (j as f64 + (sx as f64 + 0.5) / s as f64);
                        bilinear_lerp(f.data(), h, w, c, u, v, &mut sample);
                        running_mean(dst, &sample, sy * s + sx + 1);
                    }
                }
                running_mean(pool, dst, i * ow + j + 1);
            }
        }
    }
    Ok(RoiFeatures {
        bins: Tensor::new(vec![boxes.len(), oh, ow, c], bins)?,
        pooled: Tensor::new(vec![boxes.len(), c], pooled)?,
    })
}

fn rows(t: &Tensor, op: &'static str, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        &[n, d] => Ok((n, d)),
        s => Err(Error::shape(op, format!("{what} {s:?}, expected a matrix"))),
    }
}

/// `softmax(β · cos(V_r, T_k))` per region. Text rows must be unit length.
pub fn vlm_score(region: &Tensor, text: &Tensor, beta: f64) -> Result<Tensor> {
    let (n, d) = rows(region, "vlm_score", "region features")?;
    let (k, dt) = rows(text, "vlm_score", "text embeddings")?;
    if d != dt {
        return Err(Error::shape("vlm_score", format!("region dim {d} vs text dim {dt}")));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::arg("vlm_score", format!("beta must be positive, got {beta}")));
    }
    for (j, t) in text.data().chunks(d).enumerate() {
        let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::arg("vlm_score", format!("text row {j} has norm {norm}")));
        }
    }
    let mut logits = vec![0.0; n * k];
    for (r, x) in region.data().chunks(d).enumerate() {
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::arg("vlm_score", format!("region {r} has norm {norm}")));
        }
        for (j, t) in text.data().chunks(d).enumerate() {
            let cos = x.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / norm;
            logits[r * k + j] = beta * cos;
        }
    }
    Tensor::new(vec![n, k], softmax_rows(&logits, k))
}

/// `s_p^γ · s_vlm^(1−γ)` elementwise; the endpoints return an input exactly.
pub fn fuse_scores(s_p: &Tensor, s_vlm: &Tensor, gamma: f64) -> Result<Tensor> {
    if s_p.shape() != s_vlm.shape() {
        return Err(Error::shape(
            "fuse_scores",
            format!("{:?} vs {:?}", s_p.shape(), s_vlm.shape()),
        ));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::arg("fuse_scores", format!("gamma {gamma} outside [0, 1]")));
    }
    let bad = s_p
        .data()
        .iter()
        .chain(s_vlm.data())
        .find(|v| !(**v >= 0.0 && v.is_finite()));
    if let Some(v) = bad {
        return Err(Error::arg("fuse_scores", format!("score {v} is negative or non-finite")));
    }
    Ok(if gamma == 1.0 {
        s_p.clone()
    } else if gamma == 0.0 {
        s_vlm.clone()
    } else {
        s_p.zip_map(s_vlm, |p, v| p.powf(gamma) * v.powf(1.0 - gamma))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionParams {
    pub beta: f64,
    pub gamma: f64,
}

impl FusionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) || !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("fusion: need beta > 0 and gamma in [0, 1], got {self:?}")));
        }
        Ok(())
    }
}

/// Full scoring path: `vlm_score` then `fuse_scores`.
pub fn score_regions(region: &Tensor, text: &Tensor, s_p: &Tensor, p: FusionParams) -> Result<(Tensor, Tensor)> {
    p.validate()?;
    let s_vlm = vlm_score(region, text, p.beta)?;
    let fused = fuse_scores(s_p, &s_vlm, p.gamma)?;
    Ok((s_vlm, fused))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whole_image_constant() {
        let f = Tensor::full(vec![8, 8, 3], 2.5);
        let r = roi_align(&f, &[[0.0, 0.0, 1.0, 1.0]], (1, 1)).unwrap();
        assert!(r.pooled.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn single_cell_box() {
        let f = Tensor::new(vec![4, 4, 1], (0..16).map(f64::from).collect()).unwrap();
        let r = roi_align(&f, &[[0.25, 0.5, 0.5, 0.75]], (1, 1)).unwrap();
        assert!((r.pooled.item() - 9.0).abs() < 1e-6);
    }

    #[test]
    fn degenerate_box_rejected() {
        let f = Tensor::ones(vec![2, 2, 1]);
        assert!(roi_align(&f, &[[0.5, 0.0, 0.5, 1.0]], (1, 1)).is_err());
    }

    #[test]
    fn fusion_examples() {
        let p = Tensor::new(vec![1, 1], vec![0.8]).unwrap();
        let v = Tensor::new(vec![1, 1], vec![0.2]).unwrap();
        assert!((fuse_scores(&p, &v, 0.5).unwrap().item() - 0.4).abs() < 1e-12);
        assert_eq!(fuse_scores(&p, &v, 1.0).unwrap(), p);
        assert_eq!(fuse_scores(&p, &v, 0.0).unwrap(), v);
        let neg = Tensor::new(vec![1, 1], vec![-0.1]).unwrap();
        assert!(fuse_scores(&neg, &v, 0.5).is_err());
    }

    #[test]
    fn vlm_matches_row() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::new(vec![1, 2], vec![3.0, 0.0]).unwrap();
        let s = vlm_score(&x, &t, 100.0).unwrap();
        assert!(s.data()[0] >= 0.999);
        let s = vlm_score(&x, &t, 1e-12).unwrap();
        assert!((s.data()[0] - 0.5).abs() < 1e-9);
        let z = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert!(vlm_score(&z, &t, 1.0).is_err());
    }
}
