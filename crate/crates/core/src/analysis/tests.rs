use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{gen_dataset, make_calibration, SyntheticSpec, Task};
use crate::importance::Provenance;
use crate::model::{ModelConfig, UnifiedToyModel};
use crate::numerics::Tensor;
use crate::trace::{record, Observation, TraceOptions};

fn report(scores: Vec<f64>) -> ImportanceReport {
    ImportanceReport {
        component: Component::Und,
        layer: 0,
        scores,
        head_scores: None,
        provenance: Provenance {
            batch: "t".into(),
            tasks: vec![],
        },
    }
}

fn random_scores(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random::<f64>()).collect()
}

#[test]
fn identical_reports_share_everything() {
    let s = random_scores(&mut ChaCha8Rng::seed_from_u64(0), 64);
    let o = overlap(&report(s.clone()), &report(s), 0.5).unwrap();
    assert_eq!((o.und_only, o.gen_only, o.shared, o.union), (0.0, 0.0, 1.0, 32));
}

#[test]
fn reversed_scores_share_nothing() {
    let a: Vec<f64> = (0..64).map(f64::from).collect();
    let b: Vec<f64> = a.iter().rev().copied().collect();
    let o = overlap(&report(a), &report(b), 0.5).unwrap();
    assert_eq!(o.shared, 0.0);
    assert_eq!((o.und_only, o.gen_only), (0.5, 0.5));
}

#[test]
fn independent_scores_share_a_third() {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let mut total = 0.0;
    for _ in 0..20 {
        let o = overlap(&report(random_scores(&mut r, 128)), &report(random_scores(&mut r, 128)), 0.5).unwrap();
        total += o.shared;
    }
    assert!((total / 20.0 - 1.0 / 3.0).abs() < 0.05);
}

#[test]
fn overlap_is_symmetric_and_checks_topology() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let (a, b) = (report(random_scores(&mut r, 64)), report(random_scores(&mut r, 64)));
    let ab = overlap(&a, &b, 0.3).unwrap();
    let ba = overlap(&b, &a, 0.3).unwrap();
    assert_eq!((ab.und_only, ab.gen_only, ab.shared), (ba.gen_only, ba.und_only, ba.shared));
    assert!((ab.und_only + ab.gen_only + ab.shared - 1.0).abs() < 1e-12);
    let mut other = b.clone();
    other.layer = 1;
    assert!(matches!(overlap(&a, &other, 0.5), Err(crate::Error::Contract(_))));
    assert!(matches!(overlap(&a, &report(vec![0.0; 8]), 0.5), Err(crate::Error::Contract(_))));
    assert!(matches!(overlap(&a, &b, 1.0), Err(crate::Error::Input(_))));
}

fn trace_with(observations: Vec<BitVec>) -> ActivationTrace {
    let cfg = ModelConfig {
        n_layers_und: 2,
        n_layers_gen: 2,
        ..ModelConfig::default()
    };
    let ds = gen_dataset(&SyntheticSpec::for_model(&cfg, 0)).unwrap();
    let m = UnifiedToyModel::<f64>::new(cfg).unwrap();
    let mut tr = record(&m, &make_calibration(&ds, Task::Understanding, 1, 0).unwrap(), &TraceOptions::default()).unwrap();
    tr.layers.truncate(1);
    tr.layers[0].observations = observations
        .into_iter()
        .enumerate()
        .map(|(i, active)| Observation {
            task: Task::Understanding,
            sample: i,
            timestep: None,
            active,
        })
        .collect();
    tr
}

fn bits(s: &str) -> BitVec {
    s.chars().map(|c| c == '1').collect()
}

#[test]
fn single_and_duplicated_observations() {
    let one = dynamics(&trace_with(vec![bits("11000011")])).unwrap();
    assert_eq!((one[0].always_active, one[0].inactive, one[0].dependent), (0.5, 0.5, 0.0));
    let two = dynamics(&trace_with(vec![bits("11000011"); 2])).unwrap();
    assert_eq!(
        (two[0].always_active, two[0].inactive, two[0].dependent),
        (one[0].always_active, one[0].inactive, one[0].dependent)
    );
    assert!(matches!(dynamics(&trace_with(vec![])), Err(crate::Error::Input(_))));
}

#[test]
fn adding_observations_is_monotone() {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let mut obs = Vec::new();
    let mut prev: Option<(BitVec, BitVec)> = None;
    for _ in 0..10 {
        obs.push(top_p_set(&random_scores(&mut r, 32), 0.5));
        let (all, any) = activity_sets(&obs).unwrap();
        if let Some((pall, pany)) = &prev {
            // Nothing enters always-active; nothing re-enters inactive.
            assert!(all.iter().by_vals().zip(pall.iter().by_vals()).all(|(n, p)| !n || p));
            assert!(any.iter().by_vals().zip(pany.iter().by_vals()).all(|(n, p)| n || !p));
        }
        prev = Some((all, any));
    }
}

#[test]
fn generation_stack_has_sample_dependent_neurons() {
    let cfg = ModelConfig {
        n_layers_und: 2,
        n_layers_gen: 2,
        ..ModelConfig::default()
    };
    let ds = gen_dataset(&SyntheticSpec::for_model(&cfg, 0)).unwrap();
    let mut m = UnifiedToyModel::<f64>::new(cfg.clone()).unwrap();
    // Give the velocity head some signal so later steps see different inputs.
    m.gen.output = Tensor::randn(m.gen.output.shape(), 0.2, &mut ChaCha8Rng::seed_from_u64(1));
    let batch = make_calibration(&ds, Task::Generation, 16, 0).unwrap();
    let tr = record(&m, &batch, &TraceOptions::default()).unwrap();
    let rows = dynamics(&tr).unwrap();
    let gen: Vec<_> = rows.iter().filter(|r| r.component == Component::Gen).collect();
    assert_eq!(gen.len(), 2);
    for r in gen {
        assert_eq!(r.observations, 16 * cfg.gen_steps);
        assert!(r.dependent > 0.0);
        assert!((r.always_active + r.inactive + r.dependent - 1.0).abs() < 1e-12);
    }
    let mut out = Vec::new();
    write_dynamics_csv(&rows, &mut out).unwrap();
    assert!(String::from_utf8(out).unwrap().starts_with("component,layer,always_active,inactive,dependent,observations\n"));
}
