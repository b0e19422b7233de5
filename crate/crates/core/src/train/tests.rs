use super::*;
use crate::data::{gen_dataset, make_calibration, SyntheticSpec, Task};
use crate::importance::reports;
use crate::model::ModelConfig;
use crate::moe::{convert, partition_experts, ConvertConfig};
use crate::trace::{record, TraceOptions};

fn small(seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers_und: 2,
        n_layers_gen: 3,
        seed,
        ..ModelConfig::default()
    }
}

fn setup(seed: u64) -> (UnifiedToyModel<f32>, Dataset) {
    let cfg = small(seed);
    let ds = gen_dataset(&SyntheticSpec::for_model(&cfg, seed)).unwrap();
    (UnifiedToyModel::new(cfg).unwrap(), ds)
}

fn steps(stage: Stage, n: usize) -> TrainConfig {
    TrainConfig {
        steps: n,
        ..TrainConfig::for_stage(stage)
    }
}

fn converted<T: Real>(model: &mut UnifiedToyModel<T>, ds: &Dataset, experts: usize) {
    let batch = make_calibration(ds, Task::Generation, 4, 0).unwrap();
    let tr = record(model, &batch, &TraceOptions::default()).unwrap();
    let parts: Vec<_> = reports(&tr, model, Some(Component::Gen))
        .unwrap()
        .iter()
        .filter(|r| r.layer == 1)
        .map(|r| partition_experts(r, experts).unwrap())
        .collect();
    let cfg = ConvertConfig {
        experts,
        ..Default::default()
    };
    convert(model, &parts, &cfg).unwrap();
}

#[test]
fn zero_steps_leave_model_unchanged() {
    let (mut m, ds) = setup(0);
    let before = m.clone();
    assert!(pretrain(&mut m, &ds, &steps(Stage::Pretrain, 0)).unwrap().is_empty());
    assert!(m.bit_eq(&before));
}

#[test]
fn pretraining_loss_falls_over_first_fifty_steps() {
    for seed in 0..3 {
        let (mut m, ds) = setup(seed);
        let curve = pretrain(
            &mut m,
            &ds,
            &TrainConfig {
                seed,
                ..steps(Stage::Pretrain, 50)
            },
        )
        .unwrap();
        // Batches are random, so compare ten-step windows.
        let windows: Vec<f64> = curve.chunks(10).map(|c| c.iter().map(|p| p.total).sum::<f64>() / 10.0).collect();
        assert!(windows.windows(2).all(|w| w[1] < w[0]), "seed {seed}: {windows:?}");
    }
}

#[test]
fn runs_are_deterministic() {
    let cfg = steps(Stage::Pretrain, 5);
    let (mut a, ds) = setup(1);
    let mut b = a.clone();
    let ca = pretrain(&mut a, &ds, &cfg).unwrap();
    let cb = pretrain(&mut b, &ds, &cfg).unwrap();
    assert_eq!(ca, cb);
    assert!(a.bit_eq(&b));
    assert_eq!(a.meta.stages, vec![Stage::Pretrain]);
}

#[test]
fn expert_frozen_keeps_experts_bitwise() {
    let (mut m, ds) = setup(2);
    converted(&mut m, &ds, 16);
    let before = m.clone();
    let curve = tune(&mut m, &ds, &steps(Stage::ExpertFrozen, 5)).unwrap();
    assert_eq!(curve.len(), 5);
    let old: HashMap<String, &Tensor<f32>> = before.params().into_iter().collect();
    let mut experts = 0;
    let mut moved = 0;
    for (name, t) in m.params() {
        if name.contains(".moe.experts.") {
            experts += 1;
            assert!(t.bit_eq(old[&name]), "{name} changed");
        } else if !t.bit_eq(old[&name]) {
            moved += 1;
        }
    }
    assert!(experts > 0 && moved > 0);
    assert!(!m.bit_eq(&before));
}

#[test]
fn stage_and_model_must_agree() {
    let (mut m, ds) = setup(0);
    for stage in [Stage::ExpertFrozen, Stage::MoeFull] {
        assert!(matches!(tune(&mut m, &ds, &steps(stage, 1)), Err(Error::Config(_))));
    }
    assert!(matches!(tune(&mut m, &ds, &steps(Stage::Pretrain, 1)), Err(Error::Config(_))));
    converted(&mut m, &ds, 16);
    assert!(matches!(tune(&mut m, &ds, &steps(Stage::DenseFinetune, 1)), Err(Error::Config(_))));
    assert!(matches!(tune(&mut m, &ds, &steps(Stage::MoeFull, 1)), Err(Error::Config(_))));
    let cold = TrainConfig {
        allow_cold_start: true,
        ..steps(Stage::MoeFull, 1)
    };
    tune(&mut m.clone(), &ds, &cold).unwrap();
    tune(&mut m, &ds, &steps(Stage::ExpertFrozen, 1)).unwrap();
    tune(&mut m, &ds, &steps(Stage::MoeFull, 1)).unwrap();
    assert_eq!(m.meta.stages, vec![Stage::ExpertFrozen, Stage::MoeFull]);
}

#[test]
fn masked_tensors_are_sensitive_but_get_no_gradient() {
    let cfg = small(3);
    let ds = gen_dataset(&SyntheticSpec::for_model(&cfg, 3)).unwrap();
    let mut m = UnifiedToyModel::<f64>::new(cfg).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(4);
    m.gen.output = Tensor::randn(m.gen.output.shape(), 0.3, &mut r);
    converted(&mut m, &ds, 16);
    let tcfg = TrainConfig {
        w_und: 0.0,
        batch_gen: 2,
        ..steps(Stage::ExpertFrozen, 1)
    };
    apply_mask(&mut m, &tcfg).unwrap();
    let batch = draw_batch(&m, &ds, &tcfg, &mut r);
    let loss = |model: &UnifiedToyModel<f64>| {
        let tape = Tape::new();
        let l = batch_loss(model, &tape, &ds, &batch, &tcfg).unwrap().total;
        let v = tape.value(l).item();
        v
    };
    let name = "gen.blocks.1.moe.experts.down";
    let (g, router) = {
        let tape = Tape::new();
        let l = batch_loss(&m, &tape, &ds, &batch, &tcfg).unwrap().total;
        let grads = tape.backward(l).unwrap();
        let p = m.params().into_iter().collect::<HashMap<_, _>>();
        (
            grads.wrt_tensor(p[name]).map(<[f64]>::to_vec),
            grads.wrt_tensor(p["gen.blocks.1.moe.router.weight"]).map(<[f64]>::to_vec),
        )
    };
    assert!(g.is_none_or(|g| g.iter().all(|&x| x == 0.0)));
    assert!(router.is_some_and(|g| g.iter().any(|&x| x != 0.0)));
    let h = 1e-5;
    let mut sensitivity = 0.0f64;
    for i in 0..8 {
        let nudged = |sign: f64| {
            let mut c = m.clone();
            c.visit_mut(&mut |n, t| {
                if n == name {
                    t.data_mut()[i * 37] += sign * h;
                }
            });
            loss(&c)
        };
        let d = (nudged(1.0) - nudged(-1.0)) / (2.0 * h);
        sensitivity = sensitivity.max(d.abs());
    }
    assert!(sensitivity > 1e-6, "{sensitivity}");
}

#[test]
fn activated_parameter_counts() {
    let (mut m, ds) = setup(0);
    let dense = evaluate(&m, &ds).unwrap();
    assert_eq!(dense.activated_params, dense.total_params);
    assert_eq!(dense.moe_activated_fraction, None);
    converted(&mut m, &ds, 16);
    let moe = evaluate(&m, &ds).unwrap();
    assert_eq!(moe.moe_activated_fraction, Some(0.5));
    // Eight of fifteen routed experts idle, eight neurons each holding 3·d weights.
    let idle = 8 * 8 * 3 * m.config.d_model;
    assert_eq!(moe.total_params - moe.activated_params, idle);
    assert!(moe.gen_fidelity >= 0.0 && moe.gen_fidelity <= 1.0);
}

#[test]
fn random_weights_score_chance_fidelity() {
    let mut total = 0.0;
    for seed in 0..4 {
        let (mut m, ds) = setup(seed);
        m.gen.output = Tensor::randn(m.gen.output.shape(), 0.3, &mut ChaCha8Rng::seed_from_u64(seed));
        total += evaluate(&m, &ds).unwrap().gen_fidelity;
    }
    let chance = 1.0 / SyntheticSpec::for_model(&small(0), 0).n_pattern_classes as f64;
    assert!((total / 4.0 - chance).abs() <= 0.1, "{}", total / 4.0);
}

#[test]
fn loss_csv_columns() {
    let mut out = Vec::new();
    write_loss_csv(
        &[LossPoint {
            step: 1,
            total: 2.0,
            und: 1.5,
            gen: 0.5,
        }],
        &mut out,
    )
    .unwrap();
    assert_eq!(String::from_utf8(out).unwrap(), "step,loss_total,loss_und,loss_gen\n1,2,1.5,0.5\n");
}
