use mqnet_core::config::{Channels, Flags, RowConfig};
use mqnet_core::count::{analytic, enumerated};
use mqnet_core::gradcheck::check_gradient;
use mqnet_core::{ForwardCtx, Mode, Model, ModelConfig, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// CTC loss of the model on fixed features, differentiated w.r.t. `x` bound into `slot`.
fn ctc_objective(model: &Model, tape: &mut Tape, x: Var, slot: Option<&str>, features: &Tensor, target: &[usize]) -> Result<Var> {
    let mut ctx = ForwardCtx::new(tape, &model.store, Mode::Train);
    let input = match slot {
        Some(name) => {
            ctx.bind(model.store.id(name)?, x);
            ctx.tape.constant(features.clone())
        }
        None => x,
    };
    let lp = model.forward(&mut ctx, input)?;
    ctx.tape.ctc_loss(lp, target)
}

fn gradcheck_model(model: &Model, features: &Tensor, target: &[usize], slots: &[&str]) -> f64 {
    let mut worst = check_gradient(|t, x| ctc_objective(model, t, x, None, features, target), features, 1e-5).unwrap();
    for &name in slots {
        let w = model.store.get(model.store.id(name).unwrap()).clone();
        let err = check_gradient(|t, x| ctc_objective(model, t, x, Some(name), features, target), &w, 1e-5).unwrap();
        worst = worst.max(err);
    }
    worst
}

#[test]
fn toy_forward_shape_and_normalization() {
    let cfg = ModelConfig::tiny(4, 16, 8, 2);
    let model = Model::build(&cfg, 0).unwrap();
    let x = random(&mut ChaCha8Rng::seed_from_u64(1), &[20, 16]);
    let lp = model.infer(&x).unwrap();
    assert_eq!(lp.shape(), &[20, 5]);
    assert!(lp.is_finite());
    for t in 0..20 {
        assert!(mqnet_core::ctc::log_sum_exp(lp.row(t)).abs() < 1e-10);
    }
}

#[test]
fn end_to_end_gradient_through_ctc() {
    let cfg = ModelConfig::tiny(4, 6, 8, 2);
    let model = Model::build(&cfg, 3).unwrap();
    let features = random(&mut ChaCha8Rng::seed_from_u64(4), &[12, 6]);
    let err = gradcheck_model(
        &model,
        &features,
        &[0, 1, 1, 3],
        &["c1.conv.weight", "b1.r0.m0.dw1.weight", "b2.r0.m1.att0.w1", "fusion.w1", "c4.conv.bias"],
    );
    assert!(err < 1e-3, "rel err {err}");
}

#[test]
fn ablation_lattice_builds_forwards_and_gradchecks() {
    let variants = [
        ("plain", false, false, false),
        ("multi-res", true, false, false),
        ("multi-res + attention", true, true, false),
        ("full", true, true, true),
    ];
    let features = random(&mut ChaCha8Rng::seed_from_u64(9), &[10, 6]);
    for (name, multi_res, attention, fusion) in variants {
        let mut cfg = ModelConfig::tiny(3, 6, 8, 2);
        cfg.flags = Flags {
            multi_res,
            attention,
            fusion,
            ..Flags::default()
        };
        let model = Model::build(&cfg, 1).unwrap();
        let has = |needle: &str| model.store.iter().any(|(_, p)| p.name.contains(needle));
        assert_eq!(has(".dw1."), multi_res, "{name}");
        assert_eq!(has(".att"), attention, "{name}");
        assert_eq!(has("fusion."), fusion, "{name}");
        let lp = model.infer(&features).unwrap();
        assert_eq!(lp.shape(), &[10, 4]);
        let err = gradcheck_model(&model, &features, &[2, 0], &["b1.r0.m0.pw.weight"]);
        assert!(err < 1e-3, "{name}: {err}");
    }
}

#[test]
fn gates_lie_strictly_inside_the_unit_interval() {
    let cfg = ModelConfig::preset("toy").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..5 {
        let model = Model::build(&cfg, seed).unwrap();
        let x = random(&mut rng, &[16, 64]).map(|v| 5.0 * v);
        let (_, gates) = model.probe_gates(&x).unwrap();
        let names: Vec<&str> = gates.iter().map(|(n, _)| n.as_str()).collect();
        assert!(names.contains(&"fusion.w5") && names.contains(&"b5.r0.m1.att1"));
        for (name, g) in &gates {
            assert!(g.data().iter().all(|&w| w > 0.0 && w < 1.0), "{name}");
        }
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let cfg = ModelConfig::preset("toy").unwrap();
    let x = random(&mut ChaCha8Rng::seed_from_u64(3), &[25, 64]);
    let a = Model::build(&cfg, 11).unwrap().infer(&x).unwrap();
    let b = Model::build(&cfg, 11).unwrap().infer(&x).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn shipped_table_configs_count_exactly() {
    for preset in ["5x3", "15x5"] {
        let cfg = ModelConfig::preset(preset).unwrap();
        let model = Model::build(&cfg, 0).unwrap();
        let a = analytic(&cfg);
        assert_eq!(a, enumerated(&model.store), "{preset}");
        assert_eq!(a.total(), model.store.trainable_count(), "{preset}");
    }
}

fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let groups = rng.gen_range(1..=4);
    let width = |rng: &mut ChaCha8Rng| 4 * rng.gen_range(1..=3);
    let conv = |name: &str, kernel: usize, channels: Channels| RowConfig {
        name: name.into(),
        repeats: 1,
        modules: 1,
        kernel,
        channels,
        stride_set: vec![1],
    };
    let mut rows = vec![conv("C1", 2 * rng.gen_range(0..4) + 1, Channels::Count(width(rng)))];
    for i in 1..=groups {
        let mut strides: Vec<usize> = (1..=4).filter(|_| rng.gen_bool(0.5)).collect();
        if strides.is_empty() {
            strides.push(1);
        }
        rows.push(RowConfig {
            name: format!("B{i}"),
            repeats: rng.gen_range(1..=2),
            modules: rng.gen_range(1..=2),
            kernel: 2 * rng.gen_range(0..4) + 1,
            channels: Channels::Count(width(rng)),
            stride_set: strides,
        });
    }
    rows.push(conv("C2", 2 * rng.gen_range(0..3) + 1, Channels::Count(width(rng))));
    rows.push(conv("C3", 1, Channels::Count(width(rng))));
    rows.push(conv("C4", 1, Channels::Named(mqnet_core::config::LabelsMarker::Labels)));
    let flags = Flags {
        multi_res: rng.gen_bool(0.7),
        attention: rng.gen_bool(0.7),
        fusion: rng.gen_bool(0.7),
        block_residual: rng.gen_bool(0.7),
        share_attention: rng.gen_bool(0.3),
        share_pointwise: rng.gen_bool(0.7),
        ..Flags::default()
    };
    ModelConfig {
        vocab_size: rng.gen_range(1..=8),
        features: rng.gen_range(1..=10),
        reduction: 4,
        fusion_reduction: 4,
        flags,
        rows,
    }
}

#[test]
fn random_configs_count_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..10 {
        let cfg = random_config(&mut rng);
        cfg.validate().unwrap();
        let model = Model::build(&cfg, i).unwrap();
        assert_eq!(analytic(&cfg), enumerated(&model.store), "config {i}: {}", cfg.to_toml());
        let x = random(&mut rng, &[9, cfg.features]);
        assert_eq!(model.infer(&x).unwrap().shape(), &[9, cfg.vocab_size + 1]);
    }
}
