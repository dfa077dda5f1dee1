//! Desk-scale training loop on one fixed synthetic batch.

use crate::backbone::{ForwardOptions, Sgd, VmcNet};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Phase};
use crate::ops::BnState;
use crate::rng;
use crate::tensor::Tensor;

/// Fixed batch and regression targets for the overfit run.
#[derive(Debug, Clone)]
pub struct ToyData {
    pub batch: Tensor,
    pub targets: [Tensor; 4],
}

/// Seed of the teacher network that produces the targets.
pub fn teacher_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x7EAC_4E12
}

/// Synthetic batch plus the batch-statistics output of a differently seeded
/// network of the same architecture.
pub fn toy_data(cfg: &RunConfig) -> Result<ToyData> {
    let i = &cfg.input;
    let batch = rng::synthetic_image(cfg.seed, i.batch, i.height, i.width);
    let teacher = VmcNet::new(cfg.model(), teacher_seed(cfg.seed))?;
    let mut g = Graph::with_phase(Phase::Train, 0);
    let img = g.constant(batch.clone());
    let mut bn: [BnState; 4] = teacher.bn_states().clone();
    let opts = ForwardOptions {
        mode: cfg.mode,
        full_depth: false,
    };
    let out = teacher.forward_graph(&mut g, img, opts, &mut bn)?;
    g.check_finite()?;
    Ok(ToyData {
        batch,
        targets: out.levels.map(|v| g.value(v).clone()),
    })
}

/// Runs `steps` SGD steps and returns the loss before each step followed by
/// the loss after the last one.
pub fn train_toy(cfg: &RunConfig, model: &mut VmcNet, data: &ToyData, steps: usize) -> Result<Vec<f64>> {
    let o = &cfg.optimizer;
    let mut opt = Sgd::new(o.lr, o.momentum);
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..steps {
        let loss = crate::backbone::training_step(model, &data.batch, &data.targets, &mut opt, cfg.mode, step as u64)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                op: format!("loss at step {step}"),
            });
        }
        losses.push(loss);
    }
    losses.push(evaluate_loss(cfg, model, data)?);
    Ok(losses)
}

/// Train-phase loss without updating anything.
pub fn evaluate_loss(cfg: &RunConfig, model: &VmcNet, data: &ToyData) -> Result<f64> {
    let mut g = Graph::with_phase(Phase::Train, 0);
    let img = g.constant(data.batch.clone());
    let mut bn = model.bn_states().clone();
    let opts = ForwardOptions {
        mode: cfg.mode,
        full_depth: false,
    };
    let out = model.forward_graph(&mut g, img, opts, &mut bn)?;
    let loss = crate::backbone::pyramid_loss(&mut g, &out.levels, &data.targets)?;
    g.check_finite()?;
    Ok(g.value(loss).item())
}
