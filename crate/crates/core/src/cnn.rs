//! Trainable convolutional branch.
//!
//! stem (1/4) → three stride-2 convolutions (1/8, 1/16, 1/32) → per-scale
//! 1×1 projections to `dim` channels, level embeddings on the three smaller
//! scales → flattened token pyramid → multi-receptive-field refinement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{hidden_width, Params, Registrar};
use crate::ops::{Activation, LevelLayout};
use crate::params::ParameterStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CnnConfig {
    /// Channel width of the projected features.
    pub dim: usize,
    pub stem_width: usize,
    pub mrfp_count: usize,
    /// Depthwise kernel sizes inside each refinement module (odd).
    pub mrfp_kernels: Vec<usize>,
    /// Bottleneck width of the refinement module relative to `dim`.
    pub mrfp_ratio: f64,
    pub activation: Activation,
    pub ln_eps: f64,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            dim: 32,
            stem_width: 16,
            mrfp_count: 1,
            mrfp_kernels: vec![3, 5, 7],
            mrfp_ratio: 0.5,
            activation: Activation::Gelu,
            ln_eps: 1e-6,
        }
    }
}

impl CnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.stem_width == 0 {
            return Err(Error::Config("cnn: dim and stem_width must be positive".into()));
        }
        if self.mrfp_count > 0 && self.mrfp_kernels.is_empty() {
            return Err(Error::Config("cnn: mrfp_kernels is empty".into()));
        }
        if self.mrfp_kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config(format!("cnn: mrfp_kernels {:?} must be odd", self.mrfp_kernels)));
        }
        if self.mrfp_ratio <= 0.0 {
            return Err(Error::Config("cnn: mrfp_ratio must be positive".into()));
        }
        Ok(())
    }

    /// Channel widths of the raw features at 1/4, 1/8, 1/16, 1/32.
    pub fn stage_widths(&self) -> [usize; 4] {
        let w = self.stem_width;
        [w, 2 * w, 4 * w, 4 * w]
    }

    pub fn mrfp_hidden(&self) -> usize {
        hidden_width(self.dim, self.mrfp_ratio)
    }
}

/// Flattened features of several scales: `data` is `N×T_total×D`.
#[derive(Debug, Clone)]
pub struct MultiScaleTokens {
    pub data: Var,
    pub layout: LevelLayout,
}

impl MultiScaleTokens {
    pub fn offsets(&self) -> &[usize] {
        &self.layout.starts
    }

    pub fn scale_shapes(&self) -> &[(usize, usize)] {
        &self.layout.shapes
    }

    /// Level `l` back as `N×h×w×D`.
    pub fn unflatten(&self, g: &mut Graph, l: usize) -> Result<Var> {
        let (h, w) = self.layout.shapes[l];
        let (n, d) = {
            let s = g.shape(self.data);
            (s[0], s[2])
        };
        let slice = g.slice(self.data, 1, self.layout.starts[l], h * w)?;
        g.reshape(slice, &[n, h, w, d])
    }

    /// All levels as `N×(h·w)×D` token slices.
    pub fn levels(&self, g: &mut Graph) -> Result<Vec<Var>> {
        let sizes: Vec<usize> = self.layout.shapes.iter().map(|(h, w)| h * w).collect();
        g.split(self.data, 1, &sizes)
    }
}

/// Raw branch outputs before projection.
#[derive(Debug, Clone, Copy)]
pub struct RawFeatures {
    pub s4: Var,
    pub s8: Var,
    pub s16: Var,
    pub s32: Var,
}

#[derive(Debug, Clone)]
pub struct CnnOutput {
    /// Projected 1/4-scale feature `N×H/4×W/4×D` (no level embedding).
    pub c1: Var,
    /// Refined token pyramid over 1/8, 1/16, 1/32.
    pub tokens: MultiScaleTokens,
}

pub fn register(store: &mut ParameterStore, cfg: &CnnConfig, seed: u64) -> Result<()> {
    let [w1, w2, w3, w4] = cfg.stage_widths();
    let d = cfg.dim;
    let mut r = Registrar {
        store,
        seed,
        frozen: false,
    };
    r.conv("cnn.stem.conv1", 3, 3, w1)?;
    r.conv("cnn.stem.conv2", 3, w1, w1)?;
    r.conv("cnn.stem.conv3", 3, w1, w1)?;
    r.conv("cnn.down2", 3, w1, w2)?;
    r.conv("cnn.down3", 3, w2, w3)?;
    r.conv("cnn.down4", 3, w3, w4)?;
    for (i, wi) in [w1, w2, w3, w4].into_iter().enumerate() {
        r.conv(&format!("cnn.proj{}", i + 1), 1, wi, d)?;
    }
    for l in 2..=4 {
        r.normal(&format!("cnn.level_embed.{l}"), &[d], 0.02)?;
    }
    let hidden = cfg.mrfp_hidden();
    for n in 1..=cfg.mrfp_count {
        let p = format!("cnn.mrfp{n}");
        r.norm(&format!("{p}.ln"), d)?;
        r.linear(&format!("{p}.down"), d, hidden)?;
        for &k in &cfg.mrfp_kernels {
            r.conv(&format!("{p}.dw{k}"), k, 1, hidden)?;
        }
        r.linear(&format!("{p}.up"), hidden, d)?;
    }
    Ok(())
}

/// Three 3×3 convolutions (the first with stride 2) and a 2×2 max-pool:
/// `N×H×W×3 → N×H/4×W/4×stem_width`.
pub fn stem(g: &mut Graph, store: &ParameterStore, cfg: &CnnConfig, image: Var) -> Result<Var> {
    let s = g.shape(image).to_vec();
    if s.len() != 4 || s[3] != 3 {
        return Err(Error::shape("stem", format!("image {s:?}, expected N×H×W×3")));
    }
    if s[1] % 32 != 0 || s[2] % 32 != 0 {
        return Err(Error::shape("stem", format!("{}×{} not divisible by 32", s[1], s[2])));
    }
    let p = Params { store };
    let mut x = image;
    for (i, stride) in [(1, 2), (2, 1), (3, 1)] {
        x = p.conv(g, &format!("cnn.stem.conv{i}"), x, stride, 1, 1)?;
        x = g.activation(x, cfg.activation);
    }
    g.max_pool2d(x, 2, 2)
}

/// Stride-2 3×3 convolutions taking the stem output to 1/8, 1/16, 1/32.
pub fn downsample_chain(g: &mut Graph, store: &ParameterStore, cfg: &CnnConfig, s4: Var) -> Result<RawFeatures> {
    let p = Params { store };
    let mut feats = [s4; 3];
    let mut x = s4;
    for (i, f) in feats.iter_mut().enumerate() {
        x = p.conv(g, &format!("cnn.down{}", i + 2), x, 2, 1, 1)?;
        x = g.activation(x, cfg.activation);
        *f = x;
    }
    Ok(RawFeatures {
        s4,
        s8: feats[0],
        s16: feats[1],
        s32: feats[2],
    })
}

/// 1×1 projections to `dim` channels; level embeddings are added to the
/// 1/8, 1/16 and 1/32 projections only.
pub fn project_and_embed(g: &mut Graph, store: &ParameterStore, raw: &RawFeatures) -> Result<[Var; 4]> {
    let p = Params { store };
    let mut out = [raw.s4; 4];
    for (i, x) in [raw.s4, raw.s8, raw.s16, raw.s32].into_iter().enumerate() {
        let mut c = p.conv(g, &format!("cnn.proj{}", i + 1), x, 1, 0, 1)?;
        if i > 0 {
            let e = p.get(g, &format!("cnn.level_embed.{}", i + 1))?;
            c = g.add_bias(c, e)?;
        }
        out[i] = c;
    }
    Ok(out)
}

/// Row-major flattening of NHWC maps, concatenated in the given order.
pub fn flatten_concat(g: &mut Graph, maps: &[Var]) -> Result<MultiScaleTokens> {
    let first = g.shape(maps[0]).to_vec();
    let (n, d) = (first[0], first[3]);
    let mut shapes = Vec::with_capacity(maps.len());
    let mut flat = Vec::with_capacity(maps.len());
    for &m in maps {
        let s = g.shape(m).to_vec();
        if s.len() != 4 || s[0] != n || s[3] != d {
            return Err(Error::shape("flatten_concat", format!("{s:?} vs {first:?}")));
        }
        shapes.push((s[1], s[2]));
        flat.push(g.reshape(m, &[n, s[1] * s[2], d])?);
    }
    let data = g.concat(&flat, 1)?;
    Ok(MultiScaleTokens {
        data,
        layout: LevelLayout::new(&shapes),
    })
}

/// One refinement module:
/// `y = x + up(act(Σ_k dwconv_k(unflatten(down(LN(x))))))`, with the
/// depthwise convolutions applied independently per scale.
pub fn mrfp_module(
    g: &mut Graph,
    store: &ParameterStore,
    cfg: &CnnConfig,
    index: usize,
    x: &MultiScaleTokens,
) -> Result<MultiScaleTokens> {
    let p = Params { store };
    let prefix = format!("cnn.mrfp{index}");
    let h = p.layer_norm(g, &format!("{prefix}.ln"), x.data, cfg.ln_eps)?;
    let h = p.linear(g, &format!("{prefix}.down"), h)?;
    let hidden = MultiScaleTokens {
        data: h,
        layout: x.layout.clone(),
    };
    let n = g.shape(h)[0];
    let c = cfg.mrfp_hidden();
    let mut per_scale = Vec::with_capacity(x.layout.levels());
    for l in 0..x.layout.levels() {
        let (hh, ww) = x.layout.shapes[l];
        let m = hidden.unflatten(g, l)?;
        let mut acc: Option<Var> = None;
        for &k in &cfg.mrfp_kernels {
            let y = p.conv(g, &format!("{prefix}.dw{k}"), m, 1, k / 2, c)?;
            acc = Some(match acc {
                Some(a) => g.try_add(a, y)?,
                None => y,
            });
        }
        let acc = acc.expect("kernels validated non-empty");
        per_scale.push(g.reshape(acc, &[n, hh * ww, c])?);
    }
    let merged = g.concat(&per_scale, 1)?;
    let merged = g.activation(merged, cfg.activation);
    let up = p.linear(g, &format!("{prefix}.up"), merged)?;
    Ok(MultiScaleTokens {
        data: g.try_add(x.data, up)?,
        layout: x.layout.clone(),
    })
}

/// `mrfp_count` refinement modules in sequence (identity when zero).
pub fn mrfp(g: &mut Graph, store: &ParameterStore, cfg: &CnnConfig, x: MultiScaleTokens) -> Result<MultiScaleTokens> {
    let mut x = x;
    for i in 1..=cfg.mrfp_count {
        x = mrfp_module(g, store, cfg, i, &x)?;
    }
    Ok(x)
}

pub fn forward(g: &mut Graph, store: &ParameterStore, cfg: &CnnConfig, image: Var) -> Result<CnnOutput> {
    cfg.validate()?;
    let s4 = stem(g, store, cfg, image)?;
    let raw = downsample_chain(g, store, cfg, s4)?;
    let [c1, c2, c3, c4] = project_and_embed(g, store, &raw)?;
    let tokens = flatten_concat(g, &[c2, c3, c4])?;
    let tokens = mrfp(g, store, cfg, tokens)?;
    Ok(CnnOutput { c1, tokens })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::Tensor;

    fn setup(cfg: &CnnConfig) -> ParameterStore {
        let mut s = ParameterStore::new();
        register(&mut s, cfg, 5).unwrap();
        s
    }

    fn small() -> CnnConfig {
        CnnConfig {
            dim: 8,
            stem_width: 4,
            ..CnnConfig::default()
        }
    }

    #[test]
    fn stem_extents() {
        let cfg = small();
        let store = setup(&cfg);
        for (hw, out) in [(64, 16), (96, 24)] {
            let mut g = Graph::new();
            let img = g.constant(rng::synthetic_image(1, 1, hw, hw));
            let s = stem(&mut g, &store, &cfg, img).unwrap();
            assert_eq!(g.shape(s), &[1, out, out, 4]);
        }
        let mut g = Graph::new();
        let img = g.constant(Tensor::zeros(vec![1, 60, 60, 3]));
        assert!(stem(&mut g, &store, &cfg, img).is_err());
    }

    #[test]
    fn chain_halves_extents_and_follows_widths() {
        let cfg = small();
        let store = setup(&cfg);
        let mut g = Graph::new();
        let x = g.constant(rng::normal(1, "s4", &[1, 16, 16, 4], 1.0));
        let raw = downsample_chain(&mut g, &store, &cfg, x).unwrap();
        assert_eq!(g.shape(raw.s8), &[1, 8, 8, 8]);
        assert_eq!(g.shape(raw.s16), &[1, 4, 4, 16]);
        assert_eq!(g.shape(raw.s32), &[1, 2, 2, 16]);
    }

    #[test]
    fn level_embeddings() {
        let cfg = small();
        let mut store = setup(&cfg);
        let run = |store: &ParameterStore| {
            let mut g = Graph::new();
            let img = g.constant(rng::synthetic_image(3, 1, 64, 64));
            let s4 = stem(&mut g, store, &cfg, img).unwrap();
            let raw = downsample_chain(&mut g, store, &cfg, s4).unwrap();
            let c = project_and_embed(&mut g, store, &raw).unwrap();
            c.map(|v| g.value(v).clone())
        };
        for l in 2..=4 {
            store.set(&format!("cnn.level_embed.{l}"), Tensor::zeros(vec![8])).unwrap();
        }
        let base = run(&store);
        store.set("cnn.level_embed.2", Tensor::ones(vec![8])).unwrap();
        store.set("cnn.level_embed.3", Tensor::full(vec![8], -3.0)).unwrap();
        let bumped = run(&store);
        assert!(bumped[0].bit_eq(&base[0]));
        let diff = bumped[1].zip_map(&base[1], |a, b| a - b);
        assert!(diff.data().iter().all(|d| (d - 1.0).abs() < 1e-12));
        assert!(bumped[3].bit_eq(&base[3]));
    }

    #[test]
    fn flatten_concat_layout_and_roundtrip() {
        let mut g = Graph::new();
        let maps: Vec<Tensor> = [(8, 8), (4, 4), (2, 2)]
            .iter()
            .enumerate()
            .map(|(i, &(h, w))| rng::normal(i as u64, "m", &[2, h, w, 3], 1.0))
            .collect();
        let vars: Vec<Var> = maps.iter().map(|m| g.constant(m.clone())).collect();
        let tok = flatten_concat(&mut g, &vars).unwrap();
        assert_eq!(g.shape(tok.data), &[2, 84, 3]);
        assert_eq!(tok.offsets(), &[0, 64, 80]);
        for (l, m) in maps.iter().enumerate() {
            let u = tok.unflatten(&mut g, l).unwrap();
            assert!(g.value(u).bit_eq(m));
        }
    }

    #[test]
    fn mrfp_identity_cases() {
        let mut cfg = small();
        let mut store = setup(&cfg);
        let mut g = Graph::new();
        let maps: Vec<Var> = [(4, 4), (2, 2), (1, 1)]
            .iter()
            .map(|&(h, w)| g.constant(rng::normal(9, &format!("{h}"), &[1, h, w, 8], 1.0)))
            .collect();
        let tok = flatten_concat(&mut g, &maps).unwrap();
        let input = g.value(tok.data).clone();

        let refined = mrfp(&mut g, &store, &cfg, tok.clone()).unwrap();
        assert_eq!(refined.scale_shapes(), tok.scale_shapes());
        assert!(!g.value(refined.data).bit_eq(&input));

        for s in ["w", "b"] {
            let n = format!("cnn.mrfp1.up.{s}");
            let z = Tensor::zeros_like(store.value(&n).unwrap());
            store.set(&n, z).unwrap();
        }
        let mut g2 = Graph::new();
        let d = g2.constant(input.clone());
        let t2 = MultiScaleTokens { data: d, layout: tok.layout.clone() };
        let out = mrfp(&mut g2, &store, &cfg, t2.clone()).unwrap();
        assert!(g2.value(out.data).bit_eq(&input));

        cfg.mrfp_count = 0;
        let out = mrfp(&mut g2, &store, &cfg, t2.clone()).unwrap();
        assert_eq!(out.data, t2.data);
    }
}
