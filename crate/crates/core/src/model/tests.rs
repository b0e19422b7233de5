use super::*;

fn small() -> ModelConfig {
    ModelConfig {
        n_layers_und: 3,
        n_layers_gen: 3,
        ..ModelConfig::default()
    }
}

fn tokens(n: usize) -> Vec<usize> {
    (0..n).map(|i| (i * 7 + 3) % 64).collect()
}

#[test]
fn initialisation_is_deterministic() {
    let a = UnifiedToyModel::<f32>::new(small()).unwrap();
    let b = UnifiedToyModel::<f32>::new(small()).unwrap();
    assert!(a.bit_eq(&b));
    let c = UnifiedToyModel::<f32>::new(ModelConfig { seed: 1, ..small() }).unwrap();
    assert!(!a.bit_eq(&c));
}

#[test]
fn understanding_is_causal() {
    let m = UnifiedToyModel::<f64>::new(small()).unwrap();
    let base = tokens(10);
    let (logits, _) = m.und_logits(&base).unwrap();
    let mut changed = base.clone();
    changed[6] = 1;
    let (other, _) = m.und_logits(&changed).unwrap();
    let v = m.config.vocab_size;
    assert_eq!(logits.data()[..6 * v], other.data()[..6 * v]);
    assert_ne!(logits.data()[6 * v..], other.data()[6 * v..]);
}

#[test]
fn fresh_generator_predicts_zero_velocity() {
    let m = UnifiedToyModel::<f32>::new(small()).unwrap();
    let f = m.conditioning(&tokens(8)).unwrap();
    let x = m.initial_noise(3);
    let v = m.velocity(&f, &x, 0.3).unwrap();
    assert_eq!(v.shape(), &[m.config.gen_len, m.config.gen_output_dim]);
    assert!(v.data().iter().all(|&z| z == 0.0));
}

#[test]
fn single_euler_step() {
    let mut m = UnifiedToyModel::<f64>::new(ModelConfig { gen_steps: 1, ..small() }).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(9);
    m.gen.output = Tensor::randn(m.gen.output.shape(), 0.2, &mut r);
    let prompt = tokens(8);
    let f = m.conditioning(&prompt).unwrap();
    let x0 = m.initial_noise(4);
    let v = m.velocity(&f, &x0, 0.0).unwrap();
    let out = m.sample_gen(&prompt, 4).unwrap();
    for ((o, x), v) in out.data().iter().zip(x0.data()).zip(v.data()) {
        assert_eq!(*o, x + v);
    }
}

#[test]
fn rejects_bad_inputs() {
    let m = UnifiedToyModel::<f32>::new(small()).unwrap();
    assert!(matches!(m.und_logits(&[]), Err(Error::Input(_))));
    assert!(matches!(m.und_logits(&tokens(33)), Err(Error::Input(_))));
    assert!(matches!(m.und_logits(&[1, 64]), Err(Error::Input(_))));
    let f = m.conditioning(&tokens(4)).unwrap();
    let x = m.initial_noise(0);
    assert!(matches!(m.velocity(&f, &x, 1.5), Err(Error::Input(_))));
    let narrow = Tensor::zeros(&[4, 8]);
    assert!(matches!(m.velocity(&narrow, &x, 0.5), Err(Error::Shape { .. })));
    let wide = Tensor::zeros(&[5, 16]);
    assert!(matches!(m.velocity(&f, &wide, 0.5), Err(Error::Shape { .. })));
}

#[test]
fn zero_residual_branches_are_identity() {
    let mut m = UnifiedToyModel::<f64>::new(small()).unwrap();
    {
        let b = &mut m.und.blocks[1];
        let wo = &mut b.attn.as_mut().unwrap().attn.wo;
        *wo = Tensor::zeros(wo.shape());
        if let FeedForward::Dense(mlp) = &mut b.ffn.as_mut().unwrap().ffn {
            mlp.down = Tensor::zeros(mlp.down.shape());
        }
    }
    let (with, _) = m.und_logits(&tokens(12)).unwrap();
    m.und.blocks[1] = Block {
        attn: None,
        cross: None,
        ffn: None,
    };
    let (without, _) = m.und_logits(&tokens(12)).unwrap();
    assert!(with.bit_eq(&without));
}

#[test]
fn cast_round_trip_and_layout() {
    let m = UnifiedToyModel::<f32>::new(small()).unwrap();
    let back: UnifiedToyModel<f32> = m.cast::<f64>().cast();
    assert!(m.bit_eq(&back));
    let shell = UnifiedToyModel::<f32>::from_layout(m.config.clone(), &m.layout(), m.meta.clone()).unwrap();
    let shapes = |x: &UnifiedToyModel<f32>| {
        x.params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect::<Vec<_>>()
    };
    assert_eq!(shapes(&m), shapes(&shell));
    assert_eq!(
        m.param_count(),
        m.component_param_count(Component::Und) + m.component_param_count(Component::Gen)
    );
}

#[test]
fn parameter_names_are_unique() {
    let m = UnifiedToyModel::<f32>::new(small()).unwrap();
    let names: std::collections::HashSet<_> = m.params().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names.len(), m.params().len());
}
