//! Full two-branch backbone: four-scale output pyramid, the single-branch
//! baseline, parameter audit and the desk-scale training step.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cnn::{self, CnnConfig, MultiScaleTokens};
use crate::error::{Error, Result};
use crate::graph::{Graph, Phase, Var};
use crate::layers::{Params, Registrar};
use crate::ops::{BnOptions, BnState};
use crate::params::ParameterStore;
use crate::tensor::Tensor;
use crate::vit::{self, TapSet, VitConfig};
use crate::vmc::{self, VmcConfig, VmcDims};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Both branches with modulation.
    #[default]
    Full,
    /// Modulation blocks without the ViT-feature addition.
    FmStar,
    /// CNN branch only; modulation bypassed.
    CnnOnly,
    /// Resized frozen-ViT taps projected to a pyramid.
    Baseline,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::FmStar => "fm_star",
            Mode::CnnOnly => "cnn_only",
            Mode::Baseline => "baseline",
        }
    }

    /// Whether a model registered for `self` carries the parameters `other`
    /// needs.
    pub fn supports(self, other: Mode) -> bool {
        match self {
            Mode::Full => matches!(other, Mode::Full | Mode::FmStar | Mode::CnnOnly),
            Mode::FmStar => matches!(other, Mode::FmStar | Mode::CnnOnly),
            Mode::CnnOnly => other == Mode::CnnOnly,
            Mode::Baseline => other == Mode::Baseline,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "fm_star" => Ok(Mode::FmStar),
            "cnn_only" => Ok(Mode::CnnOnly),
            "baseline" => Ok(Mode::Baseline),
            _ => Err(Error::Config(format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BnConfig {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        BnConfig {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

impl From<&BnConfig> for BnOptions {
    fn from(c: &BnConfig) -> Self {
        BnOptions {
            momentum: c.momentum,
            eps: c.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub mode: Mode,
    pub vit: VitConfig,
    pub cnn: CnnConfig,
    pub vmc: VmcConfig,
    pub bn: BnConfig,
    /// ViT blocks feeding the four baseline scales, shallowest first.
    pub baseline_taps: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: Mode::default(),
            vit: VitConfig::default(),
            cnn: CnnConfig::default(),
            vmc: VmcConfig::default(),
            bn: BnConfig::default(),
            baseline_taps: vec![4, 6, 8, 12],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.cnn.validate()?;
        self.vmc.validate(self.cnn.dim)?;
        if self.mode == Mode::Baseline {
            if self.baseline_taps.len() != 4 {
                return Err(Error::Config(format!(
                    "baseline mode needs exactly 4 taps, got {:?}",
                    self.baseline_taps
                )));
            }
            self.baseline_vit().validate()?;
        }
        Ok(())
    }

    /// ViT configuration with the baseline tap set.
    pub fn baseline_vit(&self) -> VitConfig {
        VitConfig {
            tap_layers: self.baseline_taps.clone(),
            ..self.vit.clone()
        }
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!("input {h}×{w} must be a positive multiple of 32")));
        }
        let p = self.vit.patch_size;
        if h % p != 0 || w % p != 0 {
            return Err(Error::Config(format!("input {h}×{w} not divisible by patch size {p}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub full_depth: bool,
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone)]
pub struct PyramidVars {
    /// `N×h×w×D` at 1/4, 1/8, 1/16, 1/32.
    pub levels: [Var; 4],
    pub taps: Option<TapSet>,
}

/// Materialised four-scale output.
#[derive(Debug, Clone)]
pub struct BackbonePyramid {
    pub levels: [Tensor; 4],
    pub taps: BTreeMap<usize, Tensor>,
    pub dense_final: Option<Tensor>,
}

pub const LEVEL_NAMES: [&str; 4] = ["pyramid.d1", "pyramid.d2", "pyramid.d3", "pyramid.d4"];

pub struct VmcNet {
    cfg: ModelConfig,
    params: ParameterStore,
    bn: [BnState; 4],
}

impl VmcNet {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParameterStore::new();
        let d = cfg.cnn.dim;
        vit::register(&mut params, &cfg.vit, seed)?;
        if cfg.mode == Mode::Baseline {
            let mut r = Registrar {
                store: &mut params,
                seed,
                frozen: false,
            };
            for i in 1..=4 {
                r.linear(&format!("baseline.proj{i}"), cfg.vit.embed_dim, d)?;
            }
        } else {
            cnn::register(&mut params, &cfg.cnn, seed)?;
            if cfg.mode != Mode::CnnOnly {
                let dims = VmcDims {
                    dim: d,
                    vit_dim: cfg.vit.embed_dim,
                    taps: cfg.vit.tap_layers.len(),
                    levels: 3,
                };
                let with_mig = cfg.mode == Mode::Full;
                vmc::register(&mut params, &cfg.vmc, dims, with_mig, seed)?;
            }
            let mut r = Registrar {
                store: &mut params,
                seed,
                frozen: false,
            };
            r.tconv("assembly.tconv", 2, d, d)?;
            for i in 1..=4 {
                r.norm(&format!("assembly.bn{i}"), d)?;
            }
        }
        let bn = std::array::from_fn(|_| BnState::new(d));
        Ok(VmcNet { cfg, params, bn })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    pub fn bn_states(&self) -> &[BnState; 4] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [BnState; 4] {
        &mut self.bn
    }

    /// Records a forward pass on `g`. Batch-norm statistics follow the
    /// graph's phase; in the train phase `bn` is updated.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        image: Var,
        opts: ForwardOptions,
        bn: &mut [BnState; 4],
    ) -> Result<PyramidVars> {
        forward_graph(g, &self.params, &self.cfg, image, opts, bn)
    }

    /// Eval-phase forward pass.
    pub fn forward(&self, image: &Tensor, opts: ForwardOptions) -> Result<BackbonePyramid> {
        let mut g = Graph::new();
        let img = g.constant(image.clone());
        let mut bn = self.bn.clone();
        let out = self.forward_graph(&mut g, img, opts, &mut bn)?;
        g.check_finite()?;
        let taps = out
            .taps
            .as_ref()
            .map(|t| t.taps.iter().map(|(&i, &v)| (i, g.value(v).clone())).collect())
            .unwrap_or_default();
        let dense_final = out
            .taps
            .as_ref()
            .and_then(|t| t.dense_final)
            .map(|v| g.value(v).clone());
        Ok(BackbonePyramid {
            levels: out.levels.map(|v| g.value(v).clone()),
            taps,
            dense_final,
        })
    }
}

fn image_dims(g: &Graph, image: Var) -> Result<(usize, usize, usize)> {
    match g.shape(image) {
        &[n, h, w, 3] => Ok((n, h, w)),
        s => Err(Error::shape("vmcnet_forward", format!("image {s:?}, expected N×H×W×3"))),
    }
}

/// Forward pass over an explicit parameter store; see [`VmcNet::forward_graph`].
pub fn forward_graph(
    g: &mut Graph,
    store: &ParameterStore,
    cfg: &ModelConfig,
    image: Var,
    opts: ForwardOptions,
    bn: &mut [BnState; 4],
) -> Result<PyramidVars> {
    if !cfg.mode.supports(opts.mode) {
        return Err(Error::Config(format!(
            "model built for mode {} cannot run mode {}",
            cfg.mode.name(),
            opts.mode.name()
        )));
    }
    let (_, h, w) = image_dims(g, image)?;
    cfg.check_input(h, w)?;
    if opts.mode == Mode::Baseline {
        return baseline_graph(g, store, cfg, image, opts.full_depth);
    }

    let needs_taps = opts.mode == Mode::Full || opts.full_depth;
    let taps = if needs_taps {
        Some(vit::run_taps(g, store, &cfg.vit, image, opts.full_depth)?)
    } else {
        None
    };
    let cnn_out = cnn::forward(g, store, &cfg.cnn, image)?;
    let fm = match opts.mode {
        Mode::CnnOnly => cnn_out.tokens.clone(),
        Mode::Full | Mode::FmStar => {
            let mut vcfg = cfg.vmc.clone();
            vcfg.enable_vm_addition &= opts.mode == Mode::Full;
            vmc::vmc_forward(g, store, &vcfg, &cnn_out.tokens, taps.as_ref())?
        }
        Mode::Baseline => unreachable!(),
    };
    let levels = assemble(g, store, cfg, cnn_out.c1, &fm, bn)?;
    Ok(PyramidVars { levels, taps })
}

/// `F_d1 = BN(Tconv(F_M2) + C1)`, `F_di = BN(F_Mi)` for the three token
/// scales.
pub fn assemble(
    g: &mut Graph,
    store: &ParameterStore,
    cfg: &ModelConfig,
    c1: Var,
    fm: &MultiScaleTokens,
    bn: &mut [BnState; 4],
) -> Result<[Var; 4]> {
    let p = Params { store };
    let bn_opts = BnOptions::from(&cfg.bn);
    let mut maps = [c1; 4];
    for l in 0..3 {
        maps[l + 1] = fm.unflatten(g, l)?;
    }
    let up = p.tconv(g, "assembly.tconv", maps[1], 2, 0)?;
    maps[0] = g.try_add(up, c1)?;
    let mut out = maps;
    for (i, (m, state)) in maps.into_iter().zip(bn.iter_mut()).enumerate() {
        out[i] = p.batch_norm(g, &format!("assembly.bn{}", i + 1), m, state, bn_opts)?;
    }
    Ok(out)
}

/// Baseline pyramid: tap `i` resized to scale `4·2^i` and projected with a
/// per-scale linear layer.
pub fn baseline_graph(
    g: &mut Graph,
    store: &ParameterStore,
    cfg: &ModelConfig,
    image: Var,
    full_depth: bool,
) -> Result<PyramidVars> {
    let (_, h, w) = image_dims(g, image)?;
    let taps = vit::run_taps(g, store, &cfg.baseline_vit(), image, full_depth)?;
    let vars: Vec<Var> = taps.taps.values().copied().collect();
    if vars.len() != 4 {
        return Err(Error::arg("baseline_forward", format!("{} taps, need 4", vars.len())));
    }
    let p = Params { store };
    let mut levels = [vars[0]; 4];
    for (i, &tap) in vars.iter().enumerate() {
        let div = 4 << i;
        levels[i] = resize_and_project(g, &p, &format!("baseline.proj{}", i + 1), tap, taps.grid, (h / div, w / div))?;
    }
    Ok(PyramidVars {
        levels,
        taps: Some(taps),
    })
}

fn resize_and_project(
    g: &mut Graph,
    p: &Params<'_>,
    prefix: &str,
    tap: Var,
    grid: (usize, usize),
    target: (usize, usize),
) -> Result<Var> {
    let (n, d) = (g.shape(tap)[0], g.shape(tap)[2]);
    let m = g.reshape(tap, &[n, grid.0, grid.1, d])?;
    let m = g.resize_bilinear(m, target.0, target.1)?;
    p.linear(g, prefix, m)
}

/// One row of a [`PartitionReport`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamRow {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionReport {
    pub rows: Vec<ParamRow>,
    pub frozen_total: usize,
    pub trainable_total: usize,
}

/// Lists every parameter and checks the partition rule: `vit.*` frozen
/// unless the branch is configured trainable; `cnn.*`, `vmc.*`,
/// `assembly.*`, `baseline.*` trainable.
pub fn audit_parameters(store: &ParameterStore, vit_trainable: bool) -> Result<PartitionReport> {
    let mut rows = Vec::with_capacity(store.len());
    let (mut frozen_total, mut trainable_total) = (0, 0);
    for (name, p) in store.iter() {
        let root = name.split('.').next().unwrap_or("");
        let expect_frozen = match root {
            "vit" => !vit_trainable,
            "cnn" | "vmc" | "assembly" | "baseline" => false,
            _ => return Err(Error::UnknownParameter(name.to_string())),
        };
        if p.frozen != expect_frozen {
            return Err(Error::Config(format!(
                "parameter `{name}` is {} but should be {}",
                if p.frozen { "frozen" } else { "trainable" },
                if expect_frozen { "frozen" } else { "trainable" },
            )));
        }
        let count = p.value.numel();
        if p.frozen {
            frozen_total += count;
        } else {
            trainable_total += count;
        }
        rows.push(ParamRow {
            name: name.to_string(),
            shape: p.value.shape().to_vec(),
            count,
            frozen: p.frozen,
        });
    }
    Ok(PartitionReport {
        rows,
        frozen_total,
        trainable_total,
    })
}

/// SGD with momentum: `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies `grads` to trainable parameters; frozen or unknown names are
    /// rejected.
    pub fn step(&mut self, store: &mut ParameterStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, grad) in grads {
            if !grad.all_finite() {
                return Err(Error::NonFinite {
                    op: format!("gradient of {name}"),
                });
            }
            match store.get(name) {
                Some(p) if !p.frozen => {}
                Some(_) => return Err(Error::Config(format!("refusing to update frozen `{name}`"))),
                None => return Err(Error::UnknownParameter(name.clone())),
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros_like(grad));
            let mu = self.momentum;
            *v = v.zip_map(grad, |a, b| mu * a + b);
            let lr = self.lr;
            let value = store.value_mut(name).expect("checked above");
            *value = value.zip_map(v, |a, b| a - lr * b);
        }
        Ok(())
    }
}

/// Mean squared error over every element of the four levels.
pub fn pyramid_loss(g: &mut Graph, levels: &[Var; 4], targets: &[Tensor; 4]) -> Result<Var> {
    let total: usize = targets.iter().map(Tensor::numel).sum();
    let mut parts = Vec::with_capacity(4);
    for (&l, t) in levels.iter().zip(targets) {
        parts.push(g.squared_error(l, t, total as f64)?);
    }
    g.add_scalars(&parts)
}

/// One optimisation step on `batch` (`N×H×W×3`) in the train phase.
/// Returns the loss before the update.
pub fn training_step(
    model: &mut VmcNet,
    batch: &Tensor,
    targets: &[Tensor; 4],
    opt: &mut Sgd,
    mode: Mode,
    dropout_seed: u64,
) -> Result<f64> {
    let mut g = Graph::with_phase(Phase::Train, dropout_seed);
    let img = g.constant(batch.clone());
    let mut bn = model.bn.clone();
    let out = model.forward_graph(&mut g, img, ForwardOptions { mode, full_depth: false }, &mut bn)?;
    let loss = pyramid_loss(&mut g, &out.levels, targets)?;
    g.check_finite()?;
    let value = g.value(loss).item();
    let grads = g.backward(loss)?.by_name();
    opt.step(&mut model.params, &grads)?;
    model.bn = bn;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_parameter_count() {
        let mut s = ParameterStore::new();
        let mut r = Registrar {
            store: &mut s,
            seed: 0,
            frozen: false,
        };
        r.conv("cnn.x", 3, 4, 8).unwrap();
        let rep = audit_parameters(&s, false).unwrap();
        assert_eq!(rep.trainable_total, 296);
    }

    #[test]
    fn audit_rejects_unregistered_prefix_and_wrong_flags() {
        let mut s = ParameterStore::new();
        s.insert("mystery.w", Tensor::ones(vec![1]), false).unwrap();
        assert!(matches!(audit_parameters(&s, false), Err(Error::UnknownParameter(_))));
        let mut s = ParameterStore::new();
        s.insert("vit.x", Tensor::ones(vec![1]), false).unwrap();
        assert!(audit_parameters(&s, false).is_err());
        assert!(audit_parameters(&s, true).is_ok());
    }

    #[test]
    fn mode_parse_and_support() {
        assert_eq!("fm_star".parse::<Mode>().unwrap(), Mode::FmStar);
        assert!("bogus".parse::<Mode>().is_err());
        assert!(Mode::Full.supports(Mode::CnnOnly));
        assert!(!Mode::CnnOnly.supports(Mode::Full));
        assert!(!Mode::Full.supports(Mode::Baseline));
    }

    #[test]
    fn sgd_refuses_frozen() {
        let mut s = ParameterStore::new();
        s.insert("vit.a", Tensor::ones(vec![2]), true).unwrap();
        let mut opt = Sgd::new(0.1, 0.9);
        let grads = BTreeMap::from([("vit.a".to_string(), Tensor::ones(vec![2]))]);
        assert!(opt.step(&mut s, &grads).is_err());
    }
}
