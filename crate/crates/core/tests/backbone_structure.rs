use std::collections::BTreeMap;

use vmcnet::backbone::{audit_parameters, training_step, ForwardOptions, Mode, ModelConfig, Sgd, VmcNet};
use vmcnet::cnn;
use vmcnet::suite::toy_model;
use vmcnet::vit::{self, VitConfig};
use vmcnet::{rng, Graph, ParameterStore, Phase, Tensor};

fn opts(mode: Mode) -> ForwardOptions {
    ForwardOptions { mode, full_depth: false }
}

#[test]
fn pyramid_extents_for_each_input_size() {
    for cfg in [ModelConfig::default(), toy_model()] {
        let net = VmcNet::new(cfg.clone(), 3).unwrap();
        for hw in [32, 64, 96] {
            let img = rng::synthetic_image(1, 2, hw, hw);
            for mode in [Mode::Full, Mode::FmStar, Mode::CnnOnly] {
                let p = net.forward(&img, opts(mode)).unwrap();
                for (l, t) in p.levels.iter().enumerate() {
                    let e = hw >> (l + 2);
                    assert_eq!(t.shape(), &[2, e, e, cfg.cnn.dim], "{hw} {mode:?} level {l}");
                    assert!(t.all_finite());
                }
            }
        }
        let wide = rng::synthetic_image(1, 1, 32, 96);
        let p = net.forward(&wide, opts(Mode::Full)).unwrap();
        assert_eq!(p.levels[0].shape(), &[1, 8, 24, cfg.cnn.dim]);
        assert_eq!(p.levels[3].shape(), &[1, 1, 3, cfg.cnn.dim]);
    }
}

#[test]
fn token_pyramid_arithmetic_at_64() {
    let cfg = ModelConfig::default();
    let mut store = ParameterStore::new();
    cnn::register(&mut store, &cfg.cnn, 1).unwrap();
    let mut g = Graph::new();
    let img = g.constant(rng::synthetic_image(2, 1, 64, 64));
    let out = cnn::forward(&mut g, &store, &cfg.cnn, img).unwrap();
    assert_eq!(out.tokens.offsets(), &[0, 64, 80]);
    assert_eq!(out.tokens.scale_shapes(), &[(8, 8), (4, 4), (2, 2)]);
    assert_eq!(out.tokens.layout.total(), 84);
    assert_eq!(g.shape(out.tokens.data), &[1, 84, cfg.cnn.dim]);
    assert_eq!(g.shape(out.c1), &[1, 16, 16, cfg.cnn.dim]);
}

#[test]
fn rejects_inputs_off_the_stride_grid() {
    let net = VmcNet::new(ModelConfig::default(), 1).unwrap();
    for (h, w) in [(48, 64), (64, 40), (0, 32)] {
        let img = Tensor::zeros(vec![1, h, w, 3]);
        assert!(net.forward(&img, opts(Mode::Full)).is_err(), "{h}×{w}");
    }
    assert!(net.forward(&Tensor::zeros(vec![1, 32, 32, 4]), opts(Mode::Full)).is_err());
}

#[test]
fn vit_stops_at_the_deepest_tap() {
    let cfg = VitConfig { tap_layers: vec![1, 5, 7], ..VitConfig::default() };
    let mut store = ParameterStore::new();
    vit::register(&mut store, &cfg, 4).unwrap();
    let image = rng::synthetic_image(4, 1, 64, 64);

    let mut g = Graph::new();
    let img = g.constant(image.clone());
    let short = vit::run_taps(&mut g, &store, &cfg, img, false).unwrap();
    assert_eq!(short.blocks_evaluated, 7);
    assert_eq!(g.op_count("softmax"), 7);
    assert_eq!(g.op_count("layer_norm"), 14);
    assert!(short.dense_final.is_none());
    assert_eq!(short.taps.keys().copied().collect::<Vec<_>>(), vec![1, 5, 7]);

    let mut g2 = Graph::new();
    let img = g2.constant(image);
    let full = vit::run_taps(&mut g2, &store, &cfg, img, true).unwrap();
    assert_eq!(full.blocks_evaluated, 12);
    assert_eq!(g2.op_count("softmax"), 12);
    for (i, v) in &short.taps {
        assert!(g.value(*v).bit_eq(g2.value(full.taps[i])), "tap {i}");
    }
    assert_eq!(g2.shape(full.dense_final.unwrap()), &[1, 16, cfg.embed_dim]);
}

#[test]
fn mode_lattice() {
    let img = rng::synthetic_image(2, 1, 32, 32);
    let cfg = toy_model();
    for built in [Mode::Full, Mode::FmStar, Mode::CnnOnly, Mode::Baseline] {
        let mut c = cfg.clone();
        c.mode = built;
        if built == Mode::Baseline {
            c.baseline_taps = vec![1, 3, 5, 8];
        }
        let net = VmcNet::new(c, 2).unwrap();
        for run in [Mode::Full, Mode::FmStar, Mode::CnnOnly, Mode::Baseline] {
            let r = net.forward(&img, opts(run));
            assert_eq!(r.is_ok(), built.supports(run), "built {built:?} run {run:?}");
        }
        let names: Vec<&str> = net.params().names().collect();
        let has = |p: &str| names.iter().any(|n| n.starts_with(p));
        assert!(has("vit."));
        assert_eq!(has("vmc."), matches!(built, Mode::Full | Mode::FmStar));
        assert_eq!(has("vmc.group1.mig"), built == Mode::Full);
        assert_eq!(has("cnn."), built != Mode::Baseline);
        assert_eq!(has("baseline."), built == Mode::Baseline);
    }
}

#[test]
fn baseline_pyramid_shapes() {
    let mut cfg = ModelConfig::default();
    cfg.mode = Mode::Baseline;
    let net = VmcNet::new(cfg.clone(), 5).unwrap();
    let p = net.forward(&rng::synthetic_image(5, 1, 64, 64), opts(Mode::Baseline)).unwrap();
    for (l, t) in p.levels.iter().enumerate() {
        let e = 64 >> (l + 2);
        assert_eq!(t.shape(), &[1, e, e, cfg.cnn.dim]);
    }
    assert_eq!(p.taps.keys().copied().collect::<Vec<_>>(), vec![4, 6, 8, 12]);
    cfg.baseline_taps = vec![4, 6, 8];
    assert!(VmcNet::new(cfg, 5).is_err());
}

#[test]
fn zero_learning_rate_changes_nothing_but_bn_buffers() {
    let cfg = toy_model();
    let mut net = VmcNet::new(cfg.clone(), 9).unwrap();
    let before = net.params().snapshot();
    let batch = rng::synthetic_image(9, 2, 32, 32);
    let targets: [Tensor; 4] = std::array::from_fn(|l| {
        let e = 32 >> (l + 2);
        rng::normal(9, &format!("t{l}"), &[2, e, e, cfg.cnn.dim], 1.0)
    });
    let mut opt = Sgd::new(0.0, 0.9);
    let l0 = training_step(&mut net, &batch, &targets, &mut opt, Mode::Full, 0).unwrap();
    let l1 = training_step(&mut net, &batch, &targets, &mut opt, Mode::Full, 1).unwrap();
    assert!(net.params().changed_since(&before).is_empty());
    assert_eq!(l0.to_bits(), l1.to_bits());
    assert_ne!(net.bn_states()[0].running_mean, vec![0.0; cfg.cnn.dim]);
}

#[test]
fn training_updates_only_trainable_branches() {
    let cfg = toy_model();
    let mut net = VmcNet::new(cfg.clone(), 10).unwrap();
    let before = net.params().snapshot();
    let batch = rng::synthetic_image(10, 2, 32, 32);
    let targets: [Tensor; 4] = std::array::from_fn(|l| {
        let e = 32 >> (l + 2);
        Tensor::zeros(vec![2, e, e, cfg.cnn.dim])
    });
    let mut opt = Sgd::new(0.05, 0.9);
    for step in 0..3 {
        training_step(&mut net, &batch, &targets, &mut opt, Mode::Full, step).unwrap();
    }
    let changed = net.params().changed_since(&before);
    assert!(changed.iter().all(|n| !n.starts_with("vit.")));
    for root in ["cnn.", "vmc.", "assembly."] {
        assert!(changed.iter().any(|n| n.starts_with(root)), "{root} untouched");
    }
    let rep = audit_parameters(net.params(), false).unwrap();
    assert!(rep.frozen_total > 0 && rep.trainable_total > 0);
}

#[test]
fn gradients_reach_every_trainable_branch_but_not_the_vit() {
    let cfg = toy_model();
    let net = VmcNet::new(cfg.clone(), 12).unwrap();
    let mut bn = net.bn_states().clone();
    let mut g = Graph::with_phase(Phase::Train, 0);
    let img = g.constant(rng::synthetic_image(12, 2, 32, 32));
    let out = net.forward_graph(&mut g, img, opts(Mode::Full), &mut bn).unwrap();
    // a plain sum of batch-normalised maps has zero gradient, so weight it
    let mut parts = Vec::new();
    for (l, v) in out.levels.iter().enumerate() {
        let w = rng::normal(l as u64, "probe", g.shape(*v), 1.0);
        parts.push(g.weighted_sum(*v, &w).unwrap());
    }
    let total = g.add_scalars(&parts).unwrap();
    let grads = g.backward(total).unwrap().by_name();
    let norm = |prefix: &str, grads: &BTreeMap<String, Tensor>| -> f64 {
        grads.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, t)| t.max_abs()).fold(0.0, f64::max)
    };
    for p in [
        "cnn.stem",
        "cnn.down",
        "cnn.proj",
        "cnn.level_embed",
        "cnn.mrfp1",
        "vmc.group1.mig",
        "vmc.group1.fm1.msda.value",
        "assembly.tconv",
    ] {
        assert!(norm(p, &grads) > 1e-8, "{p}");
    }
    assert!(grads.keys().all(|n| !n.starts_with("vit.")));
}
