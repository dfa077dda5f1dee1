//! ViT-feature modulation of the CNN token pyramid.
//!
//! Each group builds one modulating feature from the ViT taps (channel
//! concatenation + one linear layer, resized to the 1/16 grid if needed) and
//! runs its feature-modulation blocks in cascade, all sharing that feature.
//! A block adds the modulating feature to the 1/16 tokens, then applies
//! `x + drop(FFN(LN(x)))`, `x + MSDA(x)`, `x + drop(FFN(LN(x)))`.

use serde::{Deserialize, Serialize};

use crate::cnn::MultiScaleTokens;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{hidden_width, Params, Registrar};
use crate::ops::Activation;
use crate::params::ParameterStore;
use crate::vit::TapSet;

/// Index of the 1/16 scale within the (1/8, 1/16, 1/32) token pyramid.
pub const MODULATED_LEVEL: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VmcConfig {
    /// Number of groups, each with its own modulating feature.
    pub groups: usize,
    pub blocks_per_group: usize,
    pub heads: usize,
    pub points: usize,
    pub ffn_ratio: f64,
    pub dropout: f64,
    /// `false` removes the modulating-feature addition from every block.
    pub enable_vm_addition: bool,
    pub ln_eps: f64,
}

impl Default for VmcConfig {
    fn default() -> Self {
        VmcConfig {
            groups: 1,
            blocks_per_group: 3,
            heads: 4,
            points: 4,
            ffn_ratio: 0.25,
            dropout: 0.0,
            enable_vm_addition: true,
            ln_eps: 1e-6,
        }
    }
}

impl VmcConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("vmc: {m}")));
        if self.groups == 0 || self.blocks_per_group == 0 {
            return bad("groups and blocks_per_group must be ≥ 1".into());
        }
        if self.heads == 0 || dim % self.heads != 0 {
            return bad(format!("heads {} must divide dim {dim}", self.heads));
        }
        if self.points == 0 {
            return bad("points must be ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.ffn_ratio <= 0.0 {
            return bad("ffn_ratio must be positive".into());
        }
        Ok(())
    }
}

/// Sizes needed to register the module.
#[derive(Debug, Clone, Copy)]
pub struct VmcDims {
    pub dim: usize,
    pub vit_dim: usize,
    pub taps: usize,
    pub levels: usize,
}

pub fn group_prefix(g: usize) -> String {
    format!("vmc.group{g}")
}

pub fn register(store: &mut ParameterStore, cfg: &VmcConfig, dims: VmcDims, with_mig: bool, seed: u64) -> Result<()> {
    let d = dims.dim;
    let hidden = hidden_width(d, cfg.ffn_ratio);
    let slots = cfg.heads * dims.levels * cfg.points;
    let mut r = Registrar {
        store,
        seed,
        frozen: false,
    };
    for grp in 1..=cfg.groups {
        let gp = group_prefix(grp);
        if with_mig {
            r.linear(&format!("{gp}.mig.fc"), dims.taps * dims.vit_dim, d)?;
        }
        for j in 1..=cfg.blocks_per_group {
            let p = format!("{gp}.fm{j}");
            r.norm(&format!("{p}.ln1"), d)?;
            r.linear(&format!("{p}.ffn1.fc1"), d, hidden)?;
            r.linear(&format!("{p}.ffn1.fc2"), hidden, d)?;
            r.linear(&format!("{p}.msda.value"), d, d)?;
            r.zero_linear(&format!("{p}.msda.offset"), d, slots * 2)?;
            r.zero_linear(&format!("{p}.msda.attn"), d, slots)?;
            r.linear(&format!("{p}.msda.out"), d, d)?;
            r.norm(&format!("{p}.ln2"), d)?;
            r.linear(&format!("{p}.ffn2.fc1"), d, hidden)?;
            r.linear(&format!("{p}.ffn2.fc2"), hidden, d)?;
        }
    }
    Ok(())
}

/// Modulating feature `N×(h·w)×D` on the `grid` of the 1/16 scale.
pub fn mig(g: &mut Graph, store: &ParameterStore, prefix: &str, taps: &TapSet, grid: (usize, usize)) -> Result<Var> {
    let vars: Vec<Var> = taps.taps.values().copied().collect();
    let first = *vars
        .first()
        .ok_or_else(|| Error::arg("mig", "no taps"))?;
    let s0 = g.shape(first).to_vec();
    for &v in &vars {
        if g.shape(v) != s0.as_slice() {
            return Err(Error::shape("mig", format!("tap {:?} vs {s0:?}", g.shape(v))));
        }
    }
    let cat = g.concat(&vars, 2)?;
    let vm = Params { store }.linear(g, &format!("{prefix}.mig.fc"), cat)?;
    if taps.grid == grid {
        return Ok(vm);
    }
    let (n, d) = (s0[0], g.shape(vm)[2]);
    let vm = g.reshape(vm, &[n, taps.grid.0, taps.grid.1, d])?;
    let vm = g.resize_bilinear(vm, grid.0, grid.1)?;
    g.reshape(vm, &[n, grid.0 * grid.1, d])
}

/// Multi-scale deformable self-attention over the token pyramid.
pub fn msda(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    x: &MultiScaleTokens,
    heads: usize,
    points: usize,
) -> Result<Var> {
    let p = Params { store };
    let (n, t, d) = {
        let s = g.shape(x.data);
        (s[0], s[1], s[2])
    };
    let levels = x.layout.levels();
    let value = p.linear(g, &format!("{prefix}.value"), x.data)?;
    let value = g.reshape(value, &[n, t, heads, d / heads])?;
    let offsets = p.linear(g, &format!("{prefix}.offset"), x.data)?;
    let offsets = g.reshape(offsets, &[n, t, heads, levels, points, 2])?;
    let logits = p.linear(g, &format!("{prefix}.attn"), x.data)?;
    let logits = g.reshape(logits, &[n, t, heads, levels * points])?;
    let attn = g.softmax(logits);
    let attn = g.reshape(attn, &[n, t, heads, levels, points])?;
    let sampled = g.msda_sample(value, offsets, attn, &x.layout)?;
    p.linear(g, &format!("{prefix}.out"), sampled)
}

/// Adds `vm` to the tokens of level `level` only.
pub fn add_to_level(g: &mut Graph, x: &MultiScaleTokens, level: usize, vm: Var) -> Result<Var> {
    let mut parts = x.levels(g)?;
    if g.shape(parts[level]) != g.shape(vm) {
        return Err(Error::shape(
            "fm_block",
            format!("modulating feature {:?} vs scale slice {:?}", g.shape(vm), g.shape(parts[level])),
        ));
    }
    parts[level] = g.try_add(parts[level], vm)?;
    g.concat(&parts, 1)
}

pub fn fm_block(
    g: &mut Graph,
    store: &ParameterStore,
    cfg: &VmcConfig,
    prefix: &str,
    x: &MultiScaleTokens,
    vm: Option<Var>,
) -> Result<MultiScaleTokens> {
    let p = Params { store };
    let mut h = match vm {
        Some(vm) => add_to_level(g, x, MODULATED_LEVEL, vm)?,
        None => x.data,
    };
    let y = p.layer_norm(g, &format!("{prefix}.ln1"), h, cfg.ln_eps)?;
    let y = p.ffn(g, &format!("{prefix}.ffn1"), y, Activation::Gelu)?;
    let y = g.dropout_auto(y, cfg.dropout)?;
    h = g.try_add(h, y)?;

    let cur = MultiScaleTokens {
        data: h,
        layout: x.layout.clone(),
    };
    let y = msda(g, store, &format!("{prefix}.msda"), &cur, cfg.heads, cfg.points)?;
    h = g.try_add(h, y)?;

    let y = p.layer_norm(g, &format!("{prefix}.ln2"), h, cfg.ln_eps)?;
    let y = p.ffn(g, &format!("{prefix}.ffn2"), y, Activation::Gelu)?;
    let y = g.dropout_auto(y, cfg.dropout)?;
    h = g.try_add(h, y)?;
    Ok(MultiScaleTokens {
        data: h,
        layout: x.layout.clone(),
    })
}

/// Runs every group in sequence. `taps` may be `None` only when the
/// modulating-feature addition is disabled.
pub fn vmc_forward(
    g: &mut Graph,
    store: &ParameterStore,
    cfg: &VmcConfig,
    cm: &MultiScaleTokens,
    taps: Option<&TapSet>,
) -> Result<MultiScaleTokens> {
    let grid = cm.layout.shapes[MODULATED_LEVEL];
    let mut x = cm.clone();
    for grp in 1..=cfg.groups {
        let gp = group_prefix(grp);
        let vm = if cfg.enable_vm_addition {
            let taps = taps.ok_or_else(|| Error::arg("vmc_forward", "taps required for modulation"))?;
            Some(mig(g, store, &gp, taps, grid)?)
        } else {
            None
        };
        for j in 1..=cfg.blocks_per_group {
            x = fm_block(g, store, cfg, &format!("{gp}.fm{j}"), &x, vm)?;
        }
    }
    Ok(x)
}
