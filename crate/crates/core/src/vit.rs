//! Frozen vision-transformer branch.
//!
//! Patch embedding, positional table, and a stack of pre-norm blocks. Blocks
//! are numbered from 1; the output of block `i` is the tap `V(i)`. When only
//! taps are needed the stack stops at the deepest requested block.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{hidden_width, Params, Registrar};
use crate::ops::Activation;
use crate::params::ParameterStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VitConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Grid of the positional table, `[rows, cols]`.
    pub base_grid: [usize; 2],
    /// 1-based block indices whose outputs are collected.
    pub tap_layers: Vec<usize>,
    /// Lets the optimizer update the branch (frozen otherwise).
    pub trainable: bool,
    pub ln_eps: f64,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            patch_size: 16,
            embed_dim: 16,
            depth: 12,
            heads: 2,
            mlp_ratio: 4.0,
            base_grid: [4, 4],
            tap_layers: vec![1, 5, 7],
            trainable: false,
            ln_eps: 1e-6,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("vit: {m}")));
        if self.patch_size == 0 || self.embed_dim == 0 || self.depth == 0 || self.heads == 0 {
            return bad("patch_size, embed_dim, depth and heads must be positive".into());
        }
        if self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.base_grid.contains(&0) {
            return bad("base_grid extents must be positive".into());
        }
        if self.mlp_ratio <= 0.0 {
            return bad("mlp_ratio must be positive".into());
        }
        if self.tap_layers.is_empty() {
            return bad("tap_layers is empty".into());
        }
        if self.tap_layers.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("tap_layers {:?} not strictly increasing", self.tap_layers));
        }
        if self.tap_layers[0] == 0 || *self.tap_layers.last().unwrap() > self.depth {
            return bad(format!("tap_layers {:?} outside [1, {}]", self.tap_layers, self.depth));
        }
        Ok(())
    }

    pub fn deepest_tap(&self) -> usize {
        *self.tap_layers.last().expect("validated")
    }
}

/// Intermediate block outputs, each `N×(Hp·Wp)×D`.
#[derive(Debug, Clone)]
pub struct TapSet {
    pub taps: BTreeMap<usize, Var>,
    pub grid: (usize, usize),
    pub dense_final: Option<Var>,
    pub blocks_evaluated: usize,
}

pub fn register(store: &mut ParameterStore, cfg: &VitConfig, seed: u64) -> Result<()> {
    let d = cfg.embed_dim;
    let mut r = Registrar {
        store,
        seed,
        frozen: !cfg.trainable,
    };
    r.conv("vit.patch_embed", cfg.patch_size, 3, d)?;
    r.normal("vit.pos_table", &[cfg.base_grid[0], cfg.base_grid[1], d], 0.02)?;
    let hidden = hidden_width(d, cfg.mlp_ratio);
    for i in 1..=cfg.depth {
        let p = format!("vit.block{i}");
        r.norm(&format!("{p}.ln1"), d)?;
        r.linear(&format!("{p}.attn.qkv"), d, 3 * d)?;
        r.linear(&format!("{p}.attn.proj"), d, d)?;
        r.norm(&format!("{p}.ln2"), d)?;
        r.linear(&format!("{p}.mlp.fc1"), d, hidden)?;
        r.linear(&format!("{p}.mlp.fc2"), hidden, d)?;
    }
    Ok(())
}

/// Non-overlapping `P×P` patch projection of `image: N×H×W×3`, returning
/// tokens `N×(Hp·Wp)×D` and the grid.
pub fn patch_embed(
    g: &mut Graph,
    store: &ParameterStore,
    cfg: &VitConfig,
    image: Var,
) -> Result<(Var, (usize, usize))> {
    let s = g.shape(image).to_vec();
    if s.len() != 4 || s[3] != 3 {
        return Err(Error::shape("patch_embed", format!("image {s:?}, expected N×H×W×3")));
    }
    let p = cfg.patch_size;
    if s[1] % p != 0 || s[2] % p != 0 {
        return Err(Error::shape(
            "patch_embed",
            format!("{}×{} not divisible by patch size {p}", s[1], s[2]),
        ));
    }
    let x = Params { store }.conv(g, "vit.patch_embed", image, p, 0, 1)?;
    let (hp, wp) = (s[1] / p, s[2] / p);
    let tokens = g.reshape(x, &[s[0], hp * wp, cfg.embed_dim])?;
    Ok((tokens, (hp, wp)))
}

/// Adds the positional table, bilinearly resized when `grid` differs from
/// its own grid.
pub fn add_pos_embed(
    g: &mut Graph,
    store: &ParameterStore,
    tokens: Var,
    grid: (usize, usize),
) -> Result<Var> {
    let table = g.param(store, "vit.pos_table")?;
    let ts = g.shape(table).to_vec();
    let (n, t, d) = {
        let s = g.shape(tokens);
        (s[0], s[1], s[2])
    };
    if ts.len() != 3 || ts[2] != d || t != grid.0 * grid.1 {
        return Err(Error::shape("add_pos_embed", format!("table {ts:?}, tokens {:?}", g.shape(tokens))));
    }
    let table = g.reshape(table, &[1, ts[0], ts[1], d])?;
    let table = g.resize_bilinear(table, grid.0, grid.1)?;
    let table = g.reshape(table, &[t * d])?;
    let flat = g.reshape(tokens, &[n, t * d])?;
    let out = g.add_bias(flat, table)?;
    g.reshape(out, &[n, t, d])
}

/// Multi-head self-attention over all tokens; returns the output and the
/// attention weights `N×M×T×T`.
pub fn self_attention(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<(Var, Var)> {
    let p = Params { store };
    let (n, t, d) = {
        let s = g.shape(x);
        (s[0], s[1], s[2])
    };
    let dh = d / heads;
    let qkv = p.linear(g, &format!("{prefix}.qkv"), x)?;
    let qkv = g.reshape(qkv, &[n, t, 3, heads, dh])?;
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
    let parts = g.split(qkv, 0, &[1, 1, 1])?;
    let q = g.reshape(parts[0], &[n, heads, t, dh])?;
    let k = g.reshape(parts[1], &[n, heads, t, dh])?;
    let v = g.reshape(parts[2], &[n, heads, t, dh])?;
    let kt = g.permute(k, &[0, 1, 3, 2])?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let weights = g.softmax(scores);
    let ctx = g.matmul(weights, v)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[n, t, d])?;
    let out = p.linear(g, &format!("{prefix}.proj"), ctx)?;
    Ok((out, weights))
}

/// Pre-norm block: `x + MHSA(LN(x))`, then `+ FFN(LN(·))`.
pub fn transformer_block(
    g: &mut Graph,
    store: &ParameterStore,
    cfg: &VitConfig,
    index: usize,
    x: Var,
) -> Result<Var> {
    let p = Params { store };
    let prefix = format!("vit.block{index}");
    let h = p.layer_norm(g, &format!("{prefix}.ln1"), x, cfg.ln_eps)?;
    let (attn, _) = self_attention(g, store, &format!("{prefix}.attn"), h, cfg.heads)?;
    let x = g.try_add(x, attn)?;
    let h = p.layer_norm(g, &format!("{prefix}.ln2"), x, cfg.ln_eps)?;
    let h = p.ffn(g, &format!("{prefix}.mlp"), h, Activation::Gelu)?;
    g.try_add(x, h)
}

/// Runs the branch up to the deepest tap, or through every block when
/// `full_depth` is set (which also yields `dense_final`).
pub fn run_taps(
    g: &mut Graph,
    store: &ParameterStore,
    cfg: &VitConfig,
    image: Var,
    full_depth: bool,
) -> Result<TapSet> {
    cfg.validate()?;
    let (tokens, grid) = patch_embed(g, store, cfg, image)?;
    let mut x = add_pos_embed(g, store, tokens, grid)?;
    let last = if full_depth { cfg.depth } else { cfg.deepest_tap() };
    let mut taps = BTreeMap::new();
    for i in 1..=last {
        x = transformer_block(g, store, cfg, i, x)?;
        if cfg.tap_layers.contains(&i) {
            taps.insert(i, x);
        }
    }
    Ok(TapSet {
        taps,
        grid,
        dense_final: full_depth.then_some(x),
        blocks_evaluated: last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::Tensor;

    fn small() -> VitConfig {
        VitConfig {
            patch_size: 16,
            embed_dim: 8,
            depth: 3,
            heads: 2,
            tap_layers: vec![1, 2],
            ..VitConfig::default()
        }
    }

    #[test]
    fn validation() {
        assert!(small().validate().is_ok());
        let mut c = small();
        c.tap_layers = vec![2, 1];
        assert!(c.validate().is_err());
        c.tap_layers = vec![4];
        assert!(c.validate().is_err());
        c.tap_layers = vec![];
        assert!(c.validate().is_err());
        let mut c = small();
        c.heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn patch_embed_shapes_and_errors() {
        let cfg = small();
        let mut store = ParameterStore::new();
        register(&mut store, &cfg, 1).unwrap();
        let mut g = Graph::new();
        let img = g.constant(rng::synthetic_image(0, 1, 64, 64));
        let (tok, grid) = patch_embed(&mut g, &store, &cfg, img).unwrap();
        assert_eq!(g.shape(tok), &[1, 16, 8]);
        assert_eq!(grid, (4, 4));
        let bad = g.constant(Tensor::zeros(vec![1, 65, 64, 3]));
        assert!(patch_embed(&mut g, &store, &cfg, bad).is_err());
    }

    #[test]
    fn constant_image_gives_identical_tokens() {
        let cfg = small();
        let mut store = ParameterStore::new();
        register(&mut store, &cfg, 1).unwrap();
        let mut g = Graph::new();
        let img = g.constant(Tensor::full(vec![1, 32, 48, 3], 0.3));
        let (tok, _) = patch_embed(&mut g, &store, &cfg, img).unwrap();
        let v = g.value(tok);
        let first = &v.data()[..8];
        assert!(v.data().chunks(8).all(|c| c == first));
    }

    #[test]
    fn single_token_attends_to_itself() {
        let cfg = small();
        let mut store = ParameterStore::new();
        register(&mut store, &cfg, 1).unwrap();
        let mut g = Graph::new();
        let x = g.constant(rng::normal(2, "x", &[1, 1, 8], 1.0));
        let (_, w) = self_attention(&mut g, &store, "vit.block1.attn", x, 2).unwrap();
        assert!(g.value(w).data().iter().all(|&a| a == 1.0));
    }

    #[test]
    fn zeroed_output_layers_make_block_identity() {
        let cfg = small();
        let mut store = ParameterStore::new();
        register(&mut store, &cfg, 1).unwrap();
        for name in ["attn.proj", "mlp.fc2"] {
            for s in ["w", "b"] {
                let n = format!("vit.block1.{name}.{s}");
                let z = Tensor::zeros_like(store.value(&n).unwrap());
                store.set(&n, z).unwrap();
            }
        }
        let mut g = Graph::new();
        let xt = rng::normal(3, "x", &[2, 5, 8], 1.0);
        let x = g.constant(xt.clone());
        let y = transformer_block(&mut g, &store, &cfg, 1, x).unwrap();
        assert!(g.value(y).bit_eq(&xt));
    }

    #[test]
    fn zero_table_is_identity_and_resize_applies() {
        let cfg = small();
        let mut store = ParameterStore::new();
        register(&mut store, &cfg, 1).unwrap();
        let mut g = Graph::new();
        let tt = rng::normal(4, "t", &[1, 16, 8], 1.0);
        let tok = g.constant(tt.clone());
        let out = add_pos_embed(&mut g, &store, tok, (4, 4)).unwrap();
        let table = store.value("vit.pos_table").unwrap();
        let expect = tt.zip_map(&table.reshape(vec![1, 16, 8]).unwrap(), |a, b| a + b);
        assert!(g.value(out).bit_eq(&expect));

        store.set("vit.pos_table", Tensor::zeros(vec![4, 4, 8])).unwrap();
        let mut g = Graph::new();
        let tt = rng::normal(4, "t", &[1, 64, 8], 1.0);
        let tok = g.constant(tt.clone());
        let out = add_pos_embed(&mut g, &store, tok, (8, 8)).unwrap();
        assert!(g.value(out).bit_eq(&tt));
    }
}
