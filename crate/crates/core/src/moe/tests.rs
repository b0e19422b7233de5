use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::importance::Provenance;
use crate::model::{ModelConfig, NoProbe};

fn report(scores: Vec<f64>) -> ImportanceReport {
    ImportanceReport {
        component: Component::Gen,
        layer: 1,
        scores,
        head_scores: None,
        provenance: Provenance {
            batch: "test".into(),
            tasks: vec![],
        },
    }
}

fn random_report(seed: u64, dm: usize) -> ImportanceReport {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    report((0..dm).map(|_| r.random::<f64>()).collect())
}

fn mlp(seed: u64, d: usize, dm: usize) -> Mlp<f64> {
    Mlp::new(d, dm, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn inputs(seed: u64, tokens: usize, d: usize) -> Tensor<f64> {
    Tensor::randn(&[tokens, d], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn snake_assignment_hand_trace() {
    let p = partition_experts(&report(vec![9.0, 8.0, 7.0, 6.0, 5.0, 4.0]), 2).unwrap();
    assert!(p.shared.is_empty());
    assert_eq!(p.routed, vec![vec![0, 3, 4], vec![1, 2, 5]]);
}

#[test]
fn sixteen_experts_layout() {
    let p = partition_experts(&random_report(0, 128), 16).unwrap();
    assert_eq!((p.n_shared, p.n_routed(), p.expert_size), (1, 15, 8));
    p.validate().unwrap();
    // The shared group holds the best eight neurons.
    let ranked = rank_descending(&random_report(0, 128).scores);
    let mut best: Vec<usize> = ranked[..8].to_vec();
    best.sort_unstable();
    assert_eq!(p.shared, best);
}

#[test]
fn equal_scores_follow_index_order() {
    let p = partition_experts(&report(vec![1.0; 32]), 16).unwrap();
    assert_eq!(p.shared, vec![0, 1]);
    assert_eq!(p.routed[0], vec![2, 31]);
    assert_eq!(p.routed[14], vec![16, 17]);
    assert_eq!(p, partition_experts(&report(vec![1.0; 32]), 16).unwrap());
}

#[test]
fn indivisible_width_is_config_error() {
    assert!(matches!(partition_experts(&report(vec![1.0; 30]), 16), Err(crate::Error::Config(_))));
}

#[test]
fn default_k_gives_half_activation() {
    for (e, k) in [(16, 7), (32, 14), (64, 28)] {
        let cfg = ConvertConfig {
            experts: e,
            ..Default::default()
        };
        assert_eq!(cfg.resolved_k().unwrap(), k);
    }
}

fn layer(seed: u64, e: usize, k: Option<usize>, mode: MoeMode) -> (Mlp<f64>, MoeLayer<f64>) {
    let dense = mlp(seed, 8, 64);
    let part = partition_experts(&random_report(seed + 100, 64), e).unwrap();
    let k = k.unwrap_or(part.n_routed());
    let moe = MoeLayer::from_dense(&dense, part, k, mode).unwrap();
    (dense, moe)
}

#[test]
fn all_experts_reproduce_dense_layer() {
    for seed in 0..5 {
        let (dense, sparse) = layer(seed, 16, None, MoeMode::Sparse);
        let (_, equiv) = layer(seed, 16, Some(3), MoeMode::DenseEquivalent);
        let x = inputs(seed, 6, 8);
        let want = dense.apply(&x).unwrap();
        assert!(max_abs_diff(&sparse.apply(&x, PassKind::Conditioning).unwrap(), &want) < 1e-12);
        assert!(max_abs_diff(&equiv.apply(&x, PassKind::Conditioning).unwrap(), &want) < 1e-12);
    }
}

#[test]
fn dropped_experts_are_subtracted_exactly() {
    let (dense, moe) = layer(1, 16, Some(7), MoeMode::Sparse);
    let x = inputs(2, 5, 8);
    let mut want = dense.apply(&x).unwrap();
    // Zero router: every score ties at 0, so experts 0..7 win.
    for j in 7..15 {
        let part = moe.expert_mlp(Expert::Routed(j)).apply(&x).unwrap();
        for (w, p) in want.data_mut().iter_mut().zip(part.data()) {
            *w -= p;
        }
    }
    assert!(max_abs_diff(&moe.apply(&x, PassKind::Conditioning).unwrap(), &want) < 1e-12);
}

#[test]
fn experts_sum_to_dense_and_deconvert_exactly() {
    let (dense, moe) = layer(3, 32, Some(5), MoeMode::Sparse);
    assert_eq!(moe.to_dense(), dense);
    let x = inputs(4, 7, 8);
    let mut total = moe.expert_mlp(Expert::Shared).apply(&x).unwrap();
    for j in 0..moe.n_routed() {
        let part = moe.expert_mlp(Expert::Routed(j)).apply(&x).unwrap();
        for (t, p) in total.data_mut().iter_mut().zip(part.data()) {
            *t += p;
        }
    }
    assert!(max_abs_diff(&total, &dense.apply(&x).unwrap()) < 1e-12);
}

#[test]
fn gates_scale_selected_experts() {
    let (_, mut moe) = layer(5, 16, Some(4), MoeMode::Sparse);
    let mut r = ChaCha8Rng::seed_from_u64(6);
    moe.router_weight = Tensor::randn(moe.router_weight.shape(), 0.5, &mut r);
    moe.router_bias = Tensor::randn(moe.router_bias.shape(), 0.5, &mut r);
    let x = inputs(7, 4, 8);
    let scores = x.matmul(&transpose(&moe.router_weight)).unwrap();
    let mut want = moe.expert_mlp(Expert::Shared).apply(&x).unwrap();
    let mut chosen = Vec::new();
    for t in 0..x.rows() {
        let s: Vec<f64> = scores.row(t).iter().zip(moe.router_bias.data()).map(|(a, b)| a + b).collect();
        let sel = moe.select(&s);
        for &j in &sel {
            let row = Tensor::from_vec(&[1, 8], x.row(t).to_vec()).unwrap();
            let f = moe.expert_mlp(Expert::Routed(j)).apply(&row).unwrap();
            for (w, v) in want.row_mut(t).iter_mut().zip(f.data()) {
                *w += (1.0 + s[j]) * v;
            }
        }
        chosen.push(sel);
    }
    assert!(max_abs_diff(&moe.apply(&x, PassKind::Conditioning).unwrap(), &want) < 1e-12);
    assert!(chosen.windows(2).any(|w| w[0] != w[1]), "tokens should route differently");
}

fn transpose(t: &Tensor<f64>) -> Tensor<f64> {
    let (r, c) = (t.rows(), t.cols());
    let mut out = Tensor::zeros(&[c, r]);
    for i in 0..r {
        for j in 0..c {
            out.row_mut(j)[i] = t.at(i, j);
        }
    }
    out
}

#[test]
fn router_gradient_matches_finite_differences() {
    let (_, mut moe) = layer(8, 16, Some(5), MoeMode::Sparse);
    let mut r = ChaCha8Rng::seed_from_u64(9);
    moe.router_weight = Tensor::randn(moe.router_weight.shape(), 0.5, &mut r).with_requires_grad(true);
    moe.router_bias = Tensor::randn(moe.router_bias.shape(), 0.5, &mut r).with_requires_grad(true);
    let x = inputs(10, 3, 8);
    let loss = |m: &MoeLayer<f64>| -> (f64, Option<Vec<f64>>) {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut probe = NoProbe;
        let mut ctx = Ctx::new(PassKind::Conditioning, &mut probe as &mut dyn Probe<f64>);
        let site = Site {
            component: Component::Gen,
            layer: 1,
        };
        let y = m.forward_in(&tape, xv, site, &mut ctx).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let l = tape.sum(sq);
        let g = tape.backward(l).unwrap();
        let value = tape.value(l).item();
        (value, g.wrt_tensor(&m.router_weight).map(<[f64]>::to_vec))
    };
    let (_, analytic) = loss(&moe);
    let analytic = analytic.expect("router weight gradient");
    let h = 1e-6;
    let mut numeric = Vec::new();
    for i in 0..moe.router_weight.numel() {
        let mut up = moe.clone();
        up.router_weight.data_mut()[i] += h;
        let mut down = moe.clone();
        down.router_weight.data_mut()[i] -= h;
        numeric.push((loss(&up).0 - loss(&down).0) / (2.0 * h));
    }
    let err: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    assert!(err / scale < 1e-6, "{}", err / scale);
    // Unselected experts receive no gradient through their gates.
    assert!(analytic.iter().any(|&g| g == 0.0));
}

fn model() -> UnifiedToyModel<f64> {
    UnifiedToyModel::new(ModelConfig {
        n_layers_und: 4,
        n_layers_gen: 4,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn partitions(m: &UnifiedToyModel<f64>, components: &[Component], layers: &[usize], e: usize) -> Vec<ExpertPartition> {
    let mut out = Vec::new();
    for &c in components {
        for &l in layers {
            let mut r = random_report(l as u64, m.config.hidden());
            r.component = c;
            r.layer = l;
            out.push(partition_experts(&r, e).unwrap());
        }
    }
    out
}

#[test]
fn conversion_keeps_edges_dense() {
    let mut m = model();
    let parts = partitions(&m, &[Component::Gen], &[1, 2], 16);
    convert(&mut m, &parts, &ConvertConfig::default()).unwrap();
    let gen = &m.gen.blocks;
    assert!(gen[0].dense_mlp().is_some() && gen[3].dense_mlp().is_some());
    assert_eq!(gen[1].moe().unwrap().spec.k, 7);
    assert_eq!(gen[2].moe().unwrap().activated_fraction(), 0.5);
    assert!(m.und.blocks.iter().all(|b| b.dense_mlp().is_some()));
    assert_eq!(m.meta.partitions, parts);
}

#[test]
fn coverage_gap_is_contract_error() {
    let mut m = model();
    let before = m.clone();
    let parts = partitions(&m, &[Component::Gen], &[1], 16);
    assert!(matches!(
        convert(&mut m, &parts, &ConvertConfig::default()),
        Err(crate::Error::Contract(_))
    ));
    let parts = partitions(&m, &[Component::Gen], &[1, 2], 32);
    assert!(matches!(
        convert(&mut m, &parts, &ConvertConfig::default()),
        Err(crate::Error::Contract(_))
    ));
    assert!(m.bit_eq(&before));
}

#[test]
fn und_gen_target_is_dense_for_understanding() {
    let mut m = model();
    let parts = partitions(&m, &[Component::Und, Component::Gen], &[1, 2], 16);
    let cfg = ConvertConfig {
        target: AdaptTarget::UndGen,
        ..Default::default()
    };
    let dense = m.clone();
    convert(&mut m, &parts, &cfg).unwrap();
    assert_eq!(m.und.blocks[1].moe().unwrap().spec.mode, MoeMode::DenseForUnderstanding);
    let tokens: Vec<usize> = (0..10).map(|i| (i * 5 + 1) % 64).collect();
    let (a, _) = m.und_logits(&tokens).unwrap();
    let (b, _) = dense.und_logits(&tokens).unwrap();
    assert!(max_abs_diff(&a, &b) < 1e-9);
    let fa = m.conditioning(&tokens).unwrap();
    let fb = dense.conditioning(&tokens).unwrap();
    assert!(max_abs_diff(&fa, &fb) > 1e-6);
}
