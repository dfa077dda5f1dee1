use std::f64::consts::PI;

use vmcnet::rng;
use vmcnet::roi::{roi_align, score_regions, vlm_score, FusionParams, RoiBox};
use vmcnet::Tensor;

fn smooth(u: f64, v: f64, ch: usize) -> f64 {
    match ch {
        0 => (2.0 * PI * 1.3 * u).sin() + (2.0 * PI * 0.7 * v).cos() + u * v,
        _ => (PI * (u + 2.0 * v)).sin() * 0.5 + u * u,
    }
}

/// `h×w×2` map holding `smooth` at the cell centres.
fn sampled_map(h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        for j in 0..w {
            let (u, v) = ((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64);
            data.extend((0..2).map(|c| smooth(u, v, c)));
        }
    }
    Tensor::new(vec![h, w, 2], data).unwrap()
}

/// Mean of `smooth` over a rectangle from a 100×100 midpoint grid.
fn dense_mean(x0: f64, y0: f64, x1: f64, y1: f64, ch: usize) -> f64 {
    let n = 100;
    let mut acc = 0.0;
    for a in 0..n {
        for b in 0..n {
            let u = x0 + (x1 - x0) * (b as f64 + 0.5) / n as f64;
            let v = y0 + (y1 - y0) * (a as f64 + 0.5) / n as f64;
            acc += smooth(u, v, ch);
        }
    }
    acc / (n * n) as f64
}

#[test]
fn whole_image_box_on_a_constant_map_is_exact() {
    for (seed, (h, w, out)) in [(8, 8, (1, 1)), (16, 16, (7, 7)), (12, 20, (3, 5)), (32, 32, (14, 14))]
        .into_iter()
        .enumerate()
    {
        let c = rng::uniform(seed as u64, "c", &[1], -5.0, 5.0).item();
        let f = Tensor::full(vec![h, w, 3], c);
        let r = roi_align(&f, &[[0.0, 0.0, 1.0, 1.0]], out).unwrap();
        assert!(r.pooled.data().iter().all(|&v| v == c), "{h}×{w} {out:?}");
        assert!(r.bins.data().iter().all(|&v| v == c), "{h}×{w} {out:?}");
    }
}

#[test]
fn dense_sampling_oracle_on_smooth_maps() {
    let f = sampled_map(32, 32);
    let boxes: Vec<RoiBox> = (0..12)
        .map(|i| {
            let r = rng::uniform(i, "box", &[4], 0.1, 0.9);
            let d = r.data();
            [d[0].min(d[1]), d[2].min(d[3]), d[0].max(d[1]) + 1e-3, d[2].max(d[3]) + 1e-3]
        })
        .chain([[0.1, 0.1, 0.9, 0.9], [0.3, 0.2, 0.4, 0.8]])
        .collect();
    let (oh, ow) = (7, 7);
    let r = roi_align(&f, &boxes, (oh, ow)).unwrap();
    let mut worst: f64 = 0.0;
    for (n, b) in boxes.iter().enumerate() {
        for ch in 0..2 {
            let want = dense_mean(b[0], b[1], b[2], b[3], ch);
            worst = worst.max((r.pooled.data()[n * 2 + ch] - want).abs());
            let (bw, bh) = ((b[2] - b[0]) / ow as f64, (b[3] - b[1]) / oh as f64);
            for i in 0..oh {
                for j in 0..ow {
                    let (x0, y0) = (b[0] + bw * j as f64, b[1] + bh * i as f64);
                    let want = dense_mean(x0, y0, x0 + bw, y0 + bh, ch);
                    let got = r.bins.data()[((n * oh + i) * ow + j) * 2 + ch];
                    worst = worst.max((got - want).abs());
                }
            }
        }
    }
    assert!(worst <= 2e-2, "worst deviation {worst}");
}

#[test]
fn roi_align_rejects_bad_input() {
    let f = Tensor::ones(vec![4, 4, 1]);
    assert!(roi_align(&f, &[], (2, 2)).is_err());
    assert!(roi_align(&f, &[[0.0, 0.0, 1.0, 1.0]], (0, 2)).is_err());
    assert!(roi_align(&f, &[[0.0, 0.0, f64::NAN, 1.0]], (1, 1)).is_err());
    assert!(roi_align(&Tensor::ones(vec![4, 4]), &[[0.0, 0.0, 1.0, 1.0]], (1, 1)).is_err());
}

fn unit_rows(seed: u64, k: usize, d: usize) -> Tensor {
    let t = rng::normal(seed, "text", &[k, d], 1.0);
    let mut data = t.into_data();
    for row in data.chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    Tensor::new(vec![k, d], data).unwrap()
}

#[test]
fn vlm_scores_are_row_distributions() {
    for seed in 0..20 {
        let region = rng::normal(seed, "region", &[5, 16], 2.0);
        let text = unit_rows(seed, 7, 16);
        let s = vlm_score(&region, &text, 50.0).unwrap();
        for row in s.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
        // scale invariance of the cosine
        let scaled = region.scale(3.5);
        assert!(vlm_score(&scaled, &text, 50.0).unwrap().max_abs_diff(&s) < 1e-12);
    }
    let text = unit_rows(1, 3, 4);
    assert!(vlm_score(&rng::normal(1, "r", &[2, 5], 1.0), &text, 1.0).is_err());
    assert!(vlm_score(&rng::normal(1, "r", &[2, 4], 1.0), &text, 0.0).is_err());
}

#[test]
fn score_regions_composes_both_steps() {
    let region = rng::normal(4, "region", &[3, 8], 1.0);
    let text = unit_rows(4, 5, 8);
    let s_p = rng::uniform(4, "sp", &[3, 5], 0.0, 1.0);
    let p = FusionParams { beta: 10.0, gamma: 0.35 };
    let (s_vlm, fused) = score_regions(&region, &text, &s_p, p).unwrap();
    let want = s_p.zip_map(&s_vlm, |a, b| a.powf(0.35) * b.powf(0.65));
    assert!(fused.max_abs_diff(&want) < 1e-15);
    assert!(score_regions(&region, &text, &s_p, FusionParams { beta: 10.0, gamma: 1.2 }).is_err());
}

#[test]
fn uniform_detector_scores_keep_the_vlm_argmax() {
    let argmax = |row: &[f64]| row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    for seed in 0..50 {
        let region = rng::normal(seed, "region", &[4, 6], 1.0);
        let text = unit_rows(seed, 5, 6);
        let s_p = Tensor::full(vec![4, 5], 0.2);
        for beta in [0.5, 5.0, 80.0] {
            for gamma in [0.1, 0.5, 0.9] {
                let p = FusionParams { beta, gamma };
                let (s_vlm, fused) = score_regions(&region, &text, &s_p, p).unwrap();
                for (a, b) in s_vlm.data().chunks(5).zip(fused.data().chunks(5)) {
                    assert_eq!(argmax(a), argmax(b));
                }
            }
        }
    }
}
