//! Command-line front end.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::backbone::{audit_parameters, ForwardOptions, Mode, VmcNet};
use crate::config::RunConfig;
use crate::container::{compare_dumps, Container, META_CONFIG_HASH, META_KIND, META_SEED};
use crate::error::Error;
use crate::roi::{self, FusionParams};
use crate::suite::{self, SuiteContext};
use crate::tensor::{DType, Tensor};
use crate::{image, rng, train};

#[derive(Parser, Debug)]
#[command(name = "vmcnet", version, about = "ViT-modulated convolutional backbone and its verification harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed (required without --config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// full, fm_star, cnn_only or baseline.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the backbone and write a golden dump.
    Forward {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also run every ViT block and dump the final dense feature.
        #[arg(long)]
        full_depth: bool,
        /// PPM image instead of the seeded synthetic batch.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Finite-difference gradient checks over ops and composites.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Replaces every per-case tolerance.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Single-op cases only.
        #[arg(long)]
        ops_only: bool,
        /// Add the corrupted-VJP fixture (expected to fail).
        #[arg(long)]
        inject_corrupted: bool,
    },
    /// Parameter partition and freeze check.
    Audit {
        #[command(flatten)]
        common: Common,
        /// Weights before training; with --after, no training is run.
        #[arg(long, requires = "after")]
        before: Option<PathBuf>,
        #[arg(long, requires = "before")]
        after: Option<PathBuf>,
        /// Registers the ViT branch as trainable.
        #[arg(long)]
        trainable_vit: bool,
        /// Training steps between the snapshots when no files are given.
        #[arg(long, default_value_t = 5)]
        steps: usize,
        /// List every tensor.
        #[arg(long)]
        verbose: bool,
    },
    /// Overfit the fixed synthetic batch and write the loss curve.
    TrainToy {
        #[command(flatten)]
        common: Common,
        /// Loss curve (`step<TAB>loss`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Trained weights container.
        #[arg(long)]
        save_weights: Option<PathBuf>,
        /// Skip the ≥90 % reduction check.
        #[arg(long)]
        no_assert: bool,
    },
    /// Cosine scores against text embeddings, fused with detector scores.
    Fuse {
        /// JSON with `s_p` and either `s_vlm` or `region_features`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Supplies `fusion` defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        /// Container holding `text.embeddings`.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Bit-exact comparison of two dumps from the same config.
    CompareDumps { a: PathBuf, b: PathBuf },
}

/// Exit status for a completed check.
fn status(ok: bool) -> ExitCode {
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Forward {
            common,
            weights,
            out,
            full_depth,
            input,
        } => forward(&common, weights.as_deref(), out, full_depth, input.as_deref()),
        Command::Gradcheck {
            common,
            threshold,
            seeds,
            ops_only,
            inject_corrupted,
        } => gradcheck(&common, threshold, seeds, ops_only, inject_corrupted),
        Command::Audit {
            common,
            before,
            after,
            trainable_vit,
            steps,
            verbose,
        } => audit(&common, before.zip(after), trainable_vit, steps, verbose),
        Command::TrainToy {
            common,
            out,
            steps,
            lr,
            save_weights,
            no_assert,
        } => train_toy(&common, out, steps, lr, save_weights.as_deref(), no_assert),
        Command::Fuse {
            input,
            out,
            config,
            beta,
            gamma,
            weights,
        } => fuse(&input, out.as_deref(), config.as_deref(), beta, gamma, weights.as_deref()),
        Command::CompareDumps { a, b } => {
            let diff = compare_dumps(&Container::load(&a)?, &Container::load(&b)?)?;
            for name in &diff {
                println!("differs\t{name}");
            }
            println!("{}", if diff.is_empty() { "identical" } else { "different" });
            Ok(status(diff.is_empty()))
        }
    }
}

/// Config from file or defaults, with command-line overrides applied.
pub fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match (&common.config, common.seed) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(seed)) => RunConfig::with_seed(seed),
        (None, None) => bail!("a seed is required: pass --seed or --config"),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(m) = common.mode {
        cfg.mode = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Builds the model and loads `weights` if given.
pub fn build_model(cfg: &RunConfig, weights: Option<&Path>) -> anyhow::Result<VmcNet> {
    let mut model = VmcNet::new(cfg.model(), cfg.seed)?;
    if let Some(p) = weights {
        let c = Container::load(p)?;
        let mut bn = model.bn_states().clone();
        c.apply_to(model.params_mut(), &mut bn, p)
            .with_context(|| format!("loading weights from {}", p.display()))?;
        *model.bn_states_mut() = bn;
    }
    Ok(model)
}

/// Forward pass on the configured input, packaged as a dump.
pub fn forward_dump(cfg: &RunConfig, model: &VmcNet, image: &Tensor, full_depth: bool) -> anyhow::Result<Container> {
    let out = model.forward(
        image,
        ForwardOptions {
            mode: cfg.mode,
            full_depth,
        },
    )?;
    let mut c = Container::new();
    c.set_meta(META_KIND, "dump");
    c.set_meta(META_CONFIG_HASH, cfg.hash());
    c.set_meta(META_SEED, cfg.seed.to_string());
    c.set_meta("mode", cfg.mode.name());
    c.set_meta("full_depth", full_depth.to_string());
    for (name, t) in crate::backbone::LEVEL_NAMES.iter().zip(out.levels) {
        c.insert(name, t, DType::F64, false)?;
    }
    for (i, t) in out.taps {
        c.insert(&format!("vit.tap{i}"), t, DType::F64, true)?;
    }
    if let Some(t) = out.dense_final {
        c.insert("vit.dense_final", t, DType::F64, true)?;
    }
    Ok(c)
}

fn forward(
    common: &Common,
    weights: Option<&Path>,
    out: Option<PathBuf>,
    full_depth: bool,
    input: Option<&Path>,
) -> anyhow::Result<ExitCode> {
    let mut cfg = load_config(common)?;
    cfg.full_depth |= full_depth;
    let image = match input {
        Some(p) => {
            let img = image::read_ppm(p)?;
            cfg.input.height = img.shape()[1];
            cfg.input.width = img.shape()[2];
            cfg.input.batch = 1;
            cfg.validate()?;
            img
        }
        None => rng::synthetic_image(cfg.seed, cfg.input.batch, cfg.input.height, cfg.input.width),
    };
    let model = build_model(&cfg, weights)?;
    let dump = forward_dump(&cfg, &model, &image, cfg.full_depth)?;
    for (name, r) in &dump.tensors {
        println!("{name}\t{:?}", r.tensor.shape());
    }
    println!("config_hash\t{}", cfg.hash());
    if let Some(p) = out.or(cfg.output.dump.as_ref().map(PathBuf::from)) {
        dump.save(&p)?;
        println!("wrote\t{}", p.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(
    common: &Common,
    threshold: Option<f64>,
    seeds: u64,
    ops_only: bool,
    inject_corrupted: bool,
) -> anyhow::Result<ExitCode> {
    if let Some(t) = threshold {
        if !(t >= 0.0) {
            bail!("--threshold must be non-negative");
        }
    }
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let mut ctx = SuiteContext::default();
    let mut base_seed = 0;
    if common.config.is_some() || common.seed.is_some() || common.mode.is_some() {
        let cfg = if common.config.is_some() {
            load_config(common)?
        } else {
            let mut c = RunConfig::with_seed(common.seed.unwrap_or(0));
            c.vit = ctx.model.vit.clone();
            c.cnn = ctx.model.cnn.clone();
            c.vmc = ctx.model.vmc.clone();
            c.input.height = ctx.height;
            c.input.width = ctx.width;
            c.mode = common.mode.unwrap_or(ctx.model.mode);
            c
        };
        base_seed = cfg.seed;
        ctx.model = cfg.model();
        ctx.height = cfg.input.height;
        ctx.width = cfg.input.width;
        ctx.batch = cfg.input.batch.max(2);
    }
    if ctx.model.mode == Mode::Baseline {
        bail!("gradcheck covers the modulated network; use mode full, fm_star or cnn_only");
    }
    let mut cases = if ops_only { suite::op_cases() } else { suite::all_cases() };
    if inject_corrupted {
        cases.push(suite::corrupted_case());
    }
    let seed_list: Vec<u64> = (0..seeds).map(|i| base_seed.wrapping_add(i)).collect();
    let outcomes = suite::run_cases(&cases, &seed_list, &ctx, threshold);
    let mut failed = Vec::new();
    for case in &cases {
        let mine: Vec<_> = outcomes.iter().filter(|o| o.case == case.name).collect();
        let worst = mine.iter().fold(0.0f64, |m, o| m.max(o.max_rel_err));
        let ok = mine.iter().all(|o| o.passed());
        println!(
            "{}\t{:24}\tmax_rel_err={:.3e}\tlimit={:.0e}\tseeds={}\tone_sided={}",
            if ok { "PASS" } else { "FAIL" },
            case.name,
            worst,
            mine[0].limit,
            mine.len(),
            mine.iter().map(|o| o.one_sided).sum::<usize>()
        );
        for o in mine.iter().filter(|o| !o.passed()) {
            match &o.error {
                Some(e) => println!("  seed {}: error: {e}", o.seed),
                None => println!("  seed {}: rel err {:.3e} at `{}`", o.seed, o.max_rel_err, o.worst_leaf),
            }
        }
        if !ok {
            failed.push(case.name);
        }
    }
    if failed.is_empty() {
        println!("gradcheck: PASS ({} cases x {} seeds)", cases.len(), seeds);
    } else {
        println!("gradcheck: FAIL in {}", failed.join(", "));
    }
    Ok(status(failed.is_empty()))
}

/// Frozen/trainable totals per top-level namespace.
fn namespace_counts(store: &crate::params::ParameterStore) -> BTreeMap<String, (usize, usize)> {
    let mut m: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (name, p) in store.iter() {
        let ns = name.split('.').next().unwrap_or("").to_string();
        let e = m.entry(ns).or_default();
        if p.frozen {
            e.0 += p.value.numel();
        } else {
            e.1 += p.value.numel();
        }
    }
    m
}

fn audit(
    common: &Common,
    files: Option<(PathBuf, PathBuf)>,
    trainable_vit: bool,
    steps: usize,
    verbose: bool,
) -> anyhow::Result<ExitCode> {
    let mut cfg = load_config(common)?;
    cfg.vit.trainable |= trainable_vit;
    let (before, after) = match files {
        Some((b, a)) => (build_model(&cfg, Some(&b))?, build_model(&cfg, Some(&a))?),
        None => {
            let before = build_model(&cfg, None)?;
            let mut after = build_model(&cfg, None)?;
            let data = train::toy_data(&cfg)?;
            train::train_toy(&cfg, &mut after, &data, steps)?;
            println!("trained\t{steps} steps");
            (before, after)
        }
    };
    let report = audit_parameters(after.params(), cfg.vit.trainable)?;
    if verbose {
        for r in &report.rows {
            println!(
                "{}\t{:?}\t{}\t{}",
                r.name,
                r.shape,
                r.count,
                if r.frozen { "frozen" } else { "trainable" }
            );
        }
    }
    for (ns, (f, t)) in namespace_counts(after.params()) {
        println!("namespace\t{ns}\tfrozen={f}\ttrainable={t}");
    }
    println!("total\tfrozen={}\ttrainable={}", report.frozen_total, report.trainable_total);
    let changed = after.params().changed_since(&before.params().snapshot());
    let frozen_changed: Vec<&String> = changed
        .iter()
        .filter(|n| after.params().get(n).is_some_and(|p| p.frozen))
        .collect();
    println!("changed\t{} tensors", changed.len());
    for n in &frozen_changed {
        println!("FROZEN CHANGED\t{n}");
    }
    let ok = frozen_changed.is_empty();
    println!("audit: {}", if ok { "PASS" } else { "FAIL" });
    Ok(status(ok))
}

/// Loss curve as `step<TAB>loss` lines; values use the shortest exact
/// decimal form.
pub fn format_losses(losses: &[f64]) -> String {
    losses.iter().enumerate().map(|(i, l)| format!("{i}\t{l:?}\n")).collect()
}

fn train_toy(
    common: &Common,
    out: Option<PathBuf>,
    steps: Option<usize>,
    lr: Option<f64>,
    save_weights: Option<&Path>,
    no_assert: bool,
) -> anyhow::Result<ExitCode> {
    let mut cfg = load_config(common)?;
    if let Some(s) = steps {
        cfg.optimizer.steps = s;
    }
    if let Some(lr) = lr {
        cfg.optimizer.lr = lr;
    }
    cfg.validate()?;
    let data = train::toy_data(&cfg)?;
    let mut model = build_model(&cfg, None)?;
    let losses = train::train_toy(&cfg, &mut model, &data, cfg.optimizer.steps)?;
    let text = format_losses(&losses);
    match out.or(cfg.output.losses.as_ref().map(PathBuf::from)) {
        Some(p) => {
            fs::write(&p, &text).with_context(|| format!("writing {}", p.display()))?;
            println!("wrote\t{}", p.display());
        }
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    if let Some(p) = save_weights {
        let mut c = Container::from_model(model.params(), model.bn_states(), DType::F64)?;
        c.set_meta(META_CONFIG_HASH, cfg.hash());
        c.set_meta(META_SEED, cfg.seed.to_string());
        c.save(p)?;
        println!("wrote\t{}", p.display());
    }
    let (first, last) = (losses[0], *losses.last().unwrap());
    let ratio = last / first;
    println!("initial\t{first:?}\nfinal\t{last:?}\nratio\t{ratio:?}");
    if no_assert {
        return Ok(ExitCode::SUCCESS);
    }
    let ok = ratio <= 0.1;
    println!("train-toy: {}", if ok { "PASS" } else { "FAIL (final loss above 10% of initial)" });
    Ok(status(ok))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FuseInput {
    pub s_p: Vec<Vec<f64>>,
    #[serde(default)]
    pub s_vlm: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub region_features: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub text_embeddings: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Serialize)]
pub struct FuseOutput {
    pub beta: Option<f64>,
    pub gamma: f64,
    pub s_vlm: Vec<Vec<f64>>,
    pub scores: Vec<Vec<f64>>,
}

pub fn matrix(rows: &[Vec<f64>], what: &str) -> anyhow::Result<Tensor> {
    let k = rows.first().map(Vec::len).unwrap_or(0);
    if rows.is_empty() || k == 0 || rows.iter().any(|r| r.len() != k) {
        bail!("`{what}` must be a non-empty rectangular matrix");
    }
    Ok(Tensor::new(vec![rows.len(), k], rows.concat())?)
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.last_dim()).map(<[f64]>::to_vec).collect()
}

/// Scores for one fuse request.
pub fn fuse_request(input: &FuseInput, beta: Option<f64>, gamma: f64, text: Option<Tensor>) -> anyhow::Result<FuseOutput> {
    let s_p = matrix(&input.s_p, "s_p")?;
    let s_vlm = match (&input.s_vlm, &input.region_features) {
        (Some(s), None) => matrix(s, "s_vlm")?,
        (None, Some(r)) => {
            let beta = beta.ok_or_else(|| anyhow!("beta is required to score region features"))?;
            let text = match (&input.text_embeddings, text) {
                (Some(t), _) => matrix(t, "text_embeddings")?,
                (None, Some(t)) => t,
                (None, None) => bail!("text embeddings missing: add `text_embeddings` or pass --weights"),
            };
            roi::vlm_score(&matrix(r, "region_features")?, &text, beta)?
        }
        _ => bail!("give exactly one of `s_vlm` and `region_features`"),
    };
    let fused = roi::fuse_scores(&s_p, &s_vlm, gamma)?;
    Ok(FuseOutput {
        beta,
        gamma,
        s_vlm: rows_of(&s_vlm),
        scores: rows_of(&fused),
    })
}

fn fuse(
    input: &Path,
    out: Option<&Path>,
    config: Option<&Path>,
    beta: Option<f64>,
    gamma: Option<f64>,
    weights: Option<&Path>,
) -> anyhow::Result<ExitCode> {
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let req: FuseInput = serde_json::from_str(&text).with_context(|| format!("malformed fuse input {}", input.display()))?;
    let defaults: Option<FusionParams> = match config {
        Some(p) => RunConfig::load(p)?.fusion,
        None => None,
    };
    let beta = beta.or(defaults.map(|f| f.beta));
    let gamma = gamma
        .or(defaults.map(|f| f.gamma))
        .ok_or_else(|| anyhow!("gamma is required: pass --gamma or a config with `fusion`"))?;
    let text_emb = match weights {
        Some(p) => Some(
            Container::load(p)?
                .get("text.embeddings")
                .cloned()
                .ok_or_else(|| anyhow!("{} has no `text.embeddings`", p.display()))?,
        ),
        None => None,
    };
    let result = fuse_request(&req, beta, gamma, text_emb)?;
    let json = serde_json::to_string_pretty(&result)?;
    match out {
        Some(p) => {
            fs::write(p, json + "\n").with_context(|| format!("writing {}", p.display()))?;
            println!("wrote\t{}", p.display());
        }
        None => println!("{json}"),
    }
    Ok(ExitCode::SUCCESS)
}
