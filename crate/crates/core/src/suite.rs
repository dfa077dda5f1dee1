//! Named finite-difference checks over every differentiable op and the
//! composed network, shared by the `gradcheck` command and the tests.

use crate::backbone::{self, ForwardOptions, Mode, ModelConfig, VmcNet};
use crate::cnn::{self, CnnConfig, MultiScaleTokens};
use crate::error::Result;
use crate::gradcheck::{grad_check, vjp_check, CheckOptions, GradReport};
use crate::graph::{Graph, Phase, Var};
use crate::ops::{Activation, BnOptions, BnState, LevelLayout};
use crate::params::ParameterStore;
use crate::rng;
use crate::tensor::Tensor;
use crate::vit::{self, VitConfig};
use crate::vmc::{self, VmcConfig, VmcDims};

/// Architecture and input used by the composite cases.
#[derive(Debug, Clone)]
pub struct SuiteContext {
    pub model: ModelConfig,
    pub height: usize,
    pub width: usize,
    pub batch: usize,
    /// Coordinates probed per leaf in the composite cases.
    pub max_coords: Option<usize>,
}

impl Default for SuiteContext {
    fn default() -> Self {
        SuiteContext {
            model: toy_model(),
            height: 32,
            width: 32,
            batch: 2,
            max_coords: Some(3),
        }
    }
}

/// Small architecture that keeps the composite checks fast.
pub fn toy_model() -> ModelConfig {
    ModelConfig {
        mode: Mode::Full,
        vit: VitConfig {
            patch_size: 16,
            embed_dim: 8,
            depth: 8,
            heads: 2,
            mlp_ratio: 2.0,
            base_grid: [2, 2],
            tap_layers: vec![1, 5, 7],
            ..VitConfig::default()
        },
        cnn: CnnConfig {
            dim: 8,
            stem_width: 4,
            mrfp_kernels: vec![3, 5],
            ..CnnConfig::default()
        },
        vmc: VmcConfig {
            heads: 2,
            points: 2,
            ..VmcConfig::default()
        },
        ..ModelConfig::default()
    }
}

pub type CaseFn = fn(u64, &SuiteContext) -> Result<GradReport>;

#[derive(Clone, Copy)]
pub struct Case {
    pub name: &'static str,
    pub tolerance: f64,
    pub composite: bool,
    pub run: CaseFn,
}

#[derive(Debug, Clone)]
pub struct CaseOutcome {
    pub case: &'static str,
    pub seed: u64,
    pub limit: f64,
    pub max_rel_err: f64,
    pub worst_leaf: String,
    /// Coordinates checked with a one-sided stencil next to a kink.
    pub one_sided: usize,
    pub error: Option<String>,
}

impl CaseOutcome {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_rel_err <= self.limit
    }
}

/// Runs `cases` over `seeds`. A `threshold` replaces every per-case
/// tolerance.
pub fn run_cases(cases: &[Case], seeds: &[u64], ctx: &SuiteContext, threshold: Option<f64>) -> Vec<CaseOutcome> {
    let mut out = Vec::new();
    for case in cases {
        for &seed in seeds {
            let limit = threshold.unwrap_or(case.tolerance);
            let o = match (case.run)(seed, ctx) {
                Ok(r) => CaseOutcome {
                    case: case.name,
                    seed,
                    limit,
                    max_rel_err: r.max_rel_err(),
                    worst_leaf: r.worst().map(|l| l.name.clone()).unwrap_or_default(),
                    one_sided: r.one_sided(),
                    error: None,
                },
                Err(e) => CaseOutcome {
                    case: case.name,
                    seed,
                    limit,
                    max_rel_err: f64::INFINITY,
                    worst_leaf: String::new(),
                    one_sided: 0,
                    error: Some(e.to_string()),
                },
            };
            out.push(o);
        }
    }
    out
}

fn leaf(seed: u64, name: &str, shape: &[usize]) -> (String, Tensor) {
    (name.to_string(), rng::normal(seed, name, shape, 1.0))
}

/// Checks `vᵀJ` for a random cotangent `v`, so every output coordinate
/// matters.
fn probed<F>(seed: u64, leaves: &[(String, Tensor)], opts: CheckOptions, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let shape = {
        let mut g = Graph::with_phase(opts.phase, 0);
        let vars: Vec<Var> = leaves.iter().map(|(n, t)| g.bind_param(n, t.clone(), true)).collect();
        let y = f(&mut g, &vars)?;
        g.shape(y).to_vec()
    };
    let v = rng::normal(seed, "probe", &shape, 1.0);
    vjp_check(f, leaves, Some(&v), opts)
}

fn check<F>(seed: u64, leaves: Vec<(String, Tensor)>, phase: Phase, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let opts = CheckOptions {
        phase,
        ..CheckOptions::default()
    };
    probed(seed, &leaves, opts, f)
}

macro_rules! op_case {
    ($name:ident, $tol:expr, |$seed:ident| $leaves:expr, |$g:ident, $v:ident| $body:expr) => {
        Case {
            name: stringify!($name),
            tolerance: $tol,
            composite: false,
            run: |$seed, _ctx| check($seed, $leaves, Phase::Eval, |$g: &mut Graph, $v: &[Var]| $body),
        }
    };
}

const ELEMENTWISE: f64 = 1e-7;
const OP: f64 = 1e-6;
const OP_LOOSE: f64 = 1e-5;
const COMPOSITE: f64 = 1e-4;

/// Single-op cases.
pub fn op_cases() -> Vec<Case> {
    vec![
        op_case!(add, ELEMENTWISE, |s| vec![leaf(s, "a", &[3, 4]), leaf(s, "b", &[3, 4])], |g, v| Ok(g.add(v[0], v[1]))),
        op_case!(sub, ELEMENTWISE, |s| vec![leaf(s, "a", &[3, 4]), leaf(s, "b", &[3, 4])], |g, v| g.sub(v[0], v[1])),
        op_case!(mul, ELEMENTWISE, |s| vec![leaf(s, "a", &[3, 4]), leaf(s, "b", &[3, 4])], |g, v| Ok(g.mul(v[0], v[1]))),
        op_case!(scale, ELEMENTWISE, |s| vec![leaf(s, "x", &[5])], |g, v| Ok(g.scale(v[0], -1.7))),
        op_case!(add_bias, ELEMENTWISE, |s| vec![leaf(s, "x", &[2, 3, 4]), leaf(s, "b", &[4])], |g, v| g.add_bias(v[0], v[1])),
        op_case!(gelu, ELEMENTWISE, |s| vec![leaf(s, "x", &[4, 5])], |g, v| Ok(g.activation(v[0], Activation::Gelu))),
        op_case!(relu, ELEMENTWISE, |s| vec![leaf(s, "x", &[4, 5])], |g, v| Ok(g.activation(v[0], Activation::Relu))),
        Case {
            name: "dropout",
            tolerance: ELEMENTWISE,
            composite: false,
            run: |s, _| check(s, vec![leaf(s, "x", &[4, 6])], Phase::Train, |g, v| g.dropout(v[0], 0.3, 17)),
        },
        Case {
            name: "squared_error",
            tolerance: ELEMENTWISE,
            composite: false,
            run: |s, _| {
                let target = rng::normal(s, "target", &[3, 4], 1.0);
                grad_check(
                    |g, v| g.squared_error(v[0], &target, 12.0),
                    &[leaf(s, "x", &[3, 4])],
                    CheckOptions::default(),
                )
            },
        },
        op_case!(reshape_permute, ELEMENTWISE, |s| vec![leaf(s, "x", &[2, 3, 4])], |g, v| {
            let y = g.permute(v[0], &[2, 0, 1])?;
            g.reshape(y, &[4, 6])
        }),
        op_case!(concat, ELEMENTWISE, |s| vec![leaf(s, "a", &[2, 3, 2]), leaf(s, "b", &[2, 1, 2])], |g, v| g.concat(&[v[0], v[1]], 1)),
        op_case!(slice_split, ELEMENTWISE, |s| vec![leaf(s, "x", &[2, 6, 3])], |g, v| {
            let parts = g.split(v[0], 1, &[1, 2, 3])?;
            let a = g.slice(v[0], 1, 2, 3)?;
            let b = g.mul(parts[2], a);
            g.concat(&[parts[0], b, parts[1]], 1)
        }),
        op_case!(linear, ELEMENTWISE, |s| vec![leaf(s, "x", &[3, 4]), leaf(s, "w", &[4, 5]), leaf(s, "b", &[5])], |g, v| g.linear(v[0], v[1], v[2])),
        op_case!(matmul, OP, |s| vec![leaf(s, "a", &[2, 3, 4]), leaf(s, "b", &[2, 4, 5])], |g, v| g.matmul(v[0], v[1])),
        op_case!(softmax, OP, |s| vec![leaf(s, "x", &[4, 6])], |g, v| Ok(g.softmax(v[0]))),
        op_case!(conv2d, OP, |s| vec![leaf(s, "x", &[2, 5, 5, 2]), leaf(s, "w", &[3, 3, 2, 3]), leaf(s, "b", &[3])], |g, v| g.conv2d(v[0], v[1], v[2], 1, 1, 1)),
        op_case!(conv2d_stride2, OP, |s| vec![leaf(s, "x", &[1, 6, 6, 2]), leaf(s, "w", &[3, 3, 2, 3]), leaf(s, "b", &[3])], |g, v| g.conv2d(v[0], v[1], v[2], 2, 1, 1)),
        op_case!(conv2d_depthwise, OP, |s| vec![leaf(s, "x", &[1, 5, 5, 4]), leaf(s, "w", &[3, 3, 1, 4]), leaf(s, "b", &[4])], |g, v| g.conv2d(v[0], v[1], v[2], 1, 1, 4)),
        op_case!(transposed_conv2d, OP, |s| vec![leaf(s, "x", &[1, 3, 3, 2]), leaf(s, "w", &[2, 2, 3, 2]), leaf(s, "b", &[3])], |g, v| g.transposed_conv2d(v[0], v[1], v[2], 2, 0)),
        op_case!(transposed_conv2d_k3, OP, |s| vec![leaf(s, "x", &[2, 3, 3, 2]), leaf(s, "w", &[3, 3, 2, 2]), leaf(s, "b", &[2])], |g, v| g.transposed_conv2d(v[0], v[1], v[2], 2, 1)),
        op_case!(max_pool2d, OP, |s| vec![leaf(s, "x", &[1, 4, 6, 2])], |g, v| g.max_pool2d(v[0], 2, 2)),
        op_case!(layer_norm, OP_LOOSE, |s| vec![leaf(s, "x", &[3, 5]), leaf(s, "gamma", &[5]), leaf(s, "beta", &[5])], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-6)),
        Case {
            name: "batch_norm",
            tolerance: OP_LOOSE,
            composite: false,
            run: |s, _| {
                let leaves = vec![leaf(s, "x", &[2, 3, 2, 3]), leaf(s, "gamma", &[3]), leaf(s, "beta", &[3])];
                check(s, leaves, Phase::Train, |g, v| {
                    let mut st = BnState::new(3);
                    g.batch_norm(v[0], v[1], v[2], &mut st, BnOptions::default())
                })
            },
        },
        Case {
            name: "bilinear_sample",
            tolerance: OP_LOOSE,
            composite: false,
            run: |s, _| {
                let locs: Vec<(f64, f64)> = rng::uniform(s, "locs", &[7, 2], -0.2, 1.2)
                    .data()
                    .chunks(2)
                    .map(|p| (p[0], p[1]))
                    .collect();
                check(s, vec![leaf(s, "f", &[4, 5, 3])], Phase::Eval, move |g, v| g.bilinear_sample(v[0], &locs))
            },
        },
        op_case!(resize_bilinear_up, OP_LOOSE, |s| vec![leaf(s, "x", &[1, 3, 2, 2])], |g, v| g.resize_bilinear(v[0], 5, 4)),
        op_case!(resize_bilinear_down, OP_LOOSE, |s| vec![leaf(s, "x", &[2, 6, 5, 1])], |g, v| g.resize_bilinear(v[0], 3, 2)),
        Case {
            name: "msda_sample",
            tolerance: OP_LOOSE,
            composite: false,
            run: |s, _| {
                let layout = LevelLayout::new(&[(3, 4), (2, 2), (1, 1)]);
                let t = layout.total();
                let mut attn = rng::uniform(s, "attn", &[2, t, 2, 3, 2], 0.1, 1.0);
                attn.data_mut().iter_mut().for_each(|a| *a /= 3.0);
                let leaves = vec![
                    leaf(s, "value", &[2, t, 2, 3]),
                    leaf(s, "offsets", &[2, t, 2, 3, 2, 2]),
                    ("attn".to_string(), attn),
                ];
                check(s, leaves, Phase::Eval, move |g, v| g.msda_sample(v[0], v[1], v[2], &layout))
            },
        },
    ]
}

/// Store-backed check: `extra` leaves first, then every trainable store
/// tensor accepted by `keep`.
fn store_check<F>(
    seed: u64,
    store: &ParameterStore,
    extra: Vec<(String, Tensor)>,
    keep: impl Fn(&str) -> bool,
    phase: Phase,
    max_coords: Option<usize>,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut leaves = extra;
    for (name, p) in store.iter() {
        if !p.frozen && keep(name) {
            leaves.push((name.to_string(), p.value.clone()));
        }
    }
    let opts = CheckOptions {
        phase,
        max_coords,
        ..CheckOptions::default()
    };
    probed(seed, &leaves, opts, f)
}

/// Moves zero-initialised sampling heads to a generic point so no sample
/// sits exactly on a bilinear kink.
pub fn randomize_msda_heads(store: &mut ParameterStore, seed: u64) -> Result<()> {
    let names: Vec<String> = store
        .names()
        .filter(|n| n.contains(".msda.offset.") || n.contains(".msda.attn."))
        .map(str::to_string)
        .collect();
    for n in names {
        let shape = store.value(&n)?.shape().to_vec();
        store.set(&n, rng::normal(seed, &format!("generic.{n}"), &shape, 0.5))?;
    }
    Ok(())
}

fn token_layout(ctx: &SuiteContext) -> LevelLayout {
    let (h, w) = (ctx.height, ctx.width);
    LevelLayout::new(&[(h / 8, w / 8), (h / 16, w / 16), (h / 32, w / 32)])
}

fn vmc_store(ctx: &SuiteContext, seed: u64, with_mig: bool) -> Result<ParameterStore> {
    let m = &ctx.model;
    let mut store = ParameterStore::new();
    vit::register(&mut store, &m.vit, seed)?;
    let dims = VmcDims {
        dim: m.cnn.dim,
        vit_dim: m.vit.embed_dim,
        taps: m.vit.tap_layers.len(),
        levels: 3,
    };
    vmc::register(&mut store, &m.vmc, dims, with_mig, seed)?;
    randomize_msda_heads(&mut store, seed)?;
    Ok(store)
}

fn tokens_leaf(ctx: &SuiteContext, seed: u64) -> (String, Tensor) {
    let t = token_layout(ctx).total();
    leaf(seed, "input.tokens", &[ctx.batch, t, ctx.model.cnn.dim])
}

fn image(ctx: &SuiteContext, seed: u64) -> Tensor {
    rng::synthetic_image(seed, ctx.batch, ctx.height, ctx.width)
}

/// Cases over composed sub-networks, sized by the context.
pub fn composite_cases() -> Vec<Case> {
    vec![
        Case {
            name: "conv_ln_linear",
            tolerance: OP_LOOSE,
            composite: true,
            run: |s, _| {
                let leaves = vec![
                    leaf(s, "x", &[1, 4, 4, 2]),
                    leaf(s, "cw", &[3, 3, 2, 3]),
                    leaf(s, "cb", &[3]),
                    leaf(s, "gamma", &[3]),
                    leaf(s, "beta", &[3]),
                    leaf(s, "lw", &[3, 2]),
                    leaf(s, "lb", &[2]),
                ];
                check(s, leaves, Phase::Eval, |g, v| {
                    let y = g.conv2d(v[0], v[1], v[2], 2, 1, 1)?;
                    let y = g.layer_norm(y, v[3], v[4], 1e-6)?;
                    g.linear(y, v[5], v[6])
                })
            },
        },
        Case {
            name: "transformer_block",
            tolerance: OP_LOOSE,
            composite: true,
            run: |s, ctx| {
                let cfg = &ctx.model.vit;
                let mut store = ParameterStore::new();
                vit::register(&mut store, &VitConfig { trainable: true, ..cfg.clone() }, s)?;
                let x = leaf(s, "input.tokens", &[2, 5, cfg.embed_dim]);
                store_check(s, &store, vec![x], |n| n.starts_with("vit.block1."), Phase::Eval, None, |g, v| {
                    vit::transformer_block(g, &store, cfg, 1, v[0])
                })
            },
        },
        Case {
            name: "vit_embed",
            tolerance: OP_LOOSE,
            composite: true,
            run: |s, ctx| {
                let cfg = VitConfig {
                    trainable: true,
                    base_grid: [3, 3],
                    ..ctx.model.vit.clone()
                };
                let mut store = ParameterStore::new();
                vit::register(&mut store, &cfg, s)?;
                let img = image(ctx, s);
                let keep = |n: &str| n.starts_with("vit.patch_embed") || n == "vit.pos_table";
                store_check(s, &store, vec![], keep, Phase::Eval, ctx.max_coords.map(|m| m * 8), |g, _| {
                    let x = g.constant(img.clone());
                    let (tokens, grid) = vit::patch_embed(g, &store, &cfg, x)?;
                    vit::add_pos_embed(g, &store, tokens, grid)
                })
            },
        },
        Case {
            name: "mrfp",
            tolerance: COMPOSITE,
            composite: true,
            run: |s, ctx| {
                let cfg = CnnConfig {
                    mrfp_count: 1,
                    ..ctx.model.cnn.clone()
                };
                let mut store = ParameterStore::new();
                cnn::register(&mut store, &cfg, s)?;
                let layout = token_layout(ctx);
                let x = tokens_leaf(ctx, s);
                store_check(s, &store, vec![x], |n| n.starts_with("cnn.mrfp1."), Phase::Eval, ctx.max_coords.map(|m| m * 4), |g, v| {
                    let t = MultiScaleTokens {
                        data: v[0],
                        layout: layout.clone(),
                    };
                    Ok(cnn::mrfp(g, &store, &cfg, t)?.data)
                })
            },
        },
        Case {
            name: "msda",
            tolerance: COMPOSITE,
            composite: true,
            run: |s, ctx| {
                let store = vmc_store(ctx, s, false)?;
                let layout = token_layout(ctx);
                let x = tokens_leaf(ctx, s);
                let vc = &ctx.model.vmc;
                let keep = |n: &str| n.starts_with("vmc.group1.fm1.msda.");
                store_check(s, &store, vec![x], keep, Phase::Eval, ctx.max_coords.map(|m| m * 4), |g, v| {
                    let t = MultiScaleTokens {
                        data: v[0],
                        layout: layout.clone(),
                    };
                    vmc::msda(g, &store, "vmc.group1.fm1.msda", &t, vc.heads, vc.points)
                })
            },
        },
        Case {
            name: "fm_block",
            tolerance: COMPOSITE,
            composite: true,
            run: |s, ctx| {
                let store = vmc_store(ctx, s, false)?;
                let layout = token_layout(ctx);
                let grid = layout.shapes[vmc::MODULATED_LEVEL];
                let x = tokens_leaf(ctx, s);
                let vm = leaf(s, "input.vm", &[ctx.batch, grid.0 * grid.1, ctx.model.cnn.dim]);
                let vc = &ctx.model.vmc;
                let keep = |n: &str| n.starts_with("vmc.group1.fm1.");
                store_check(s, &store, vec![x, vm], keep, Phase::Eval, ctx.max_coords.map(|m| m * 2), |g, v| {
                    let t = MultiScaleTokens {
                        data: v[0],
                        layout: layout.clone(),
                    };
                    Ok(vmc::fm_block(g, &store, vc, "vmc.group1.fm1", &t, Some(v[1]))?.data)
                })
            },
        },
        Case {
            name: "vmc_forward",
            tolerance: COMPOSITE,
            composite: true,
            run: |s, ctx| {
                let store = vmc_store(ctx, s, true)?;
                let layout = token_layout(ctx);
                let x = tokens_leaf(ctx, s);
                let img = image(ctx, s);
                let m = &ctx.model;
                store_check(s, &store, vec![x], |n| n.starts_with("vmc."), Phase::Eval, ctx.max_coords, |g, v| {
                    let im = g.constant(img.clone());
                    let taps = vit::run_taps(g, &store, &m.vit, im, false)?;
                    let t = MultiScaleTokens {
                        data: v[0],
                        layout: layout.clone(),
                    };
                    Ok(vmc::vmc_forward(g, &store, &m.vmc, &t, Some(&taps))?.data)
                })
            },
        },
        Case {
            name: "backbone_end_to_end",
            tolerance: COMPOSITE,
            composite: true,
            run: |s, ctx| {
                let mut model = VmcNet::new(ctx.model.clone(), s)?;
                randomize_msda_heads(model.params_mut(), s)?;
                let img = image(ctx, s);
                let cfg = ctx.model.clone();
                let mode = cfg.mode;
                let store = model.params().clone();
                store_check(s, &store, vec![], |_| true, Phase::Train, ctx.max_coords, |g, _| {
                    let im = g.constant(img.clone());
                    let mut bn: [BnState; 4] = std::array::from_fn(|_| BnState::new(cfg.cnn.dim));
                    let opts = ForwardOptions { mode, full_depth: false };
                    let out = backbone::forward_graph(g, &store, &cfg, im, opts, &mut bn)?;
                    let flat: Vec<Var> = out
                        .levels
                        .iter()
                        .map(|&l| {
                            let n = g.value(l).numel();
                            g.reshape(l, &[n])
                        })
                        .collect::<Result<_>>()?;
                    g.concat(&flat, 0)
                })
            },
        },
    ]
}

pub fn all_cases() -> Vec<Case> {
    let mut v = op_cases();
    v.extend(composite_cases());
    v
}

/// Harness self-test: an op whose VJP is off by a factor of 1.5.
pub fn corrupted_case() -> Case {
    Case {
        name: "corrupted_scale",
        tolerance: ELEMENTWISE,
        composite: false,
        run: |s, _| {
            check(s, vec![leaf(s, "x", &[4])], Phase::Eval, |g, v| {
                let out = g.value(v[0]).scale(2.0);
                Ok(g.record("corrupted_scale", &[v[0]], out, Box::new(|_, _, gout| vec![Some(gout.scale(3.0))])))
            })
        },
    }
}
