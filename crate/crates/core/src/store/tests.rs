use super::*;
use crate::data::{gen_dataset, make_calibration, SyntheticSpec, Task};
use crate::importance::reports;
use crate::moe::{convert, partition_experts, ConvertConfig};
use crate::surgery::{apply, plan_depth, plan_heads, plan_width};
use crate::trace::{record, TraceOptions};
use crate::train::evaluate;
use crate::Component;

fn variants() -> Vec<UnifiedToyModel<f32>> {
    let cfg = ModelConfig {
        n_layers_und: 3,
        n_layers_gen: 3,
        ..ModelConfig::default()
    };
    let ds = gen_dataset(&SyntheticSpec::for_model(&cfg, 0)).unwrap();
    let dense = UnifiedToyModel::<f32>::new(cfg).unwrap();
    let und = record(&dense, &make_calibration(&ds, Task::Understanding, 2, 0).unwrap(), &TraceOptions::default()).unwrap();
    let scores = reports(&und, &dense, Some(Component::Und)).unwrap();

    let mut pruned = dense.clone();
    let mut plan = plan_width(&scores[0], 0.5).unwrap();
    plan.removals.extend(plan_heads(&scores[1], 0.5).unwrap().removals);
    let layers = crate::importance::layer_scores(&und, crate::Granularity::Block).unwrap();
    let und_layers: Vec<_> = layers.into_iter().filter(|l| l.component == Component::Und).collect();
    plan.removals.extend(plan_depth(&und_layers, 1).unwrap().removals);
    apply(&mut pruned, &plan).unwrap();

    let mut moe = dense.clone();
    let gen = record(&moe, &make_calibration(&ds, Task::Generation, 2, 0).unwrap(), &TraceOptions::default()).unwrap();
    let parts: Vec<_> = reports(&gen, &moe, Some(Component::Gen))
        .unwrap()
        .iter()
        .filter(|r| r.layer == 1)
        .map(|r| partition_experts(r, 16).unwrap())
        .collect();
    convert(&mut moe, &parts, &ConvertConfig::default()).unwrap();
    vec![dense, pruned, moe]
}

#[test]
fn round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_dataset(&SyntheticSpec::for_model(&variants()[0].config, 0)).unwrap();
    for (i, m) in variants().iter().enumerate() {
        let path = dir.path().join(format!("m{i}.umc"));
        save(m, &path).unwrap();
        let back: UnifiedToyModel<f32> = load(&path).unwrap();
        assert!(back.bit_eq(m));
        assert_eq!(back.meta, m.meta);
        assert_eq!(evaluate(&back, &ds).unwrap(), evaluate(m, &ds).unwrap());
    }
}

#[test]
fn header_is_self_describing() {
    let models = variants();
    let bytes = to_bytes(&models[2]).unwrap();
    let (header, payload) = read_header(&bytes).unwrap();
    assert_eq!(header.meta.partitions.len(), 1);
    let total: u64 = header.tensors.values().map(|e| e.nbytes).sum();
    assert_eq!(total as usize, payload.len());
    let (header, _) = read_header(&to_bytes(&models[1]).unwrap()).unwrap();
    assert_eq!(header.meta.plans.len(), 1);
}

#[test]
fn wrong_magic_or_version_is_format_error() {
    let mut bytes = to_bytes(&variants()[0]).unwrap();
    bytes[4] = 9;
    assert!(matches!(from_bytes::<f32>(&bytes), Err(Error::Format(_))));
    bytes[0] = b'X';
    assert!(matches!(from_bytes::<f32>(&bytes), Err(Error::Format(_))));
    assert!(matches!(from_bytes::<f32>(b"UM"), Err(Error::Format(_))));
}

#[test]
fn truncation_is_integrity_error() {
    let bytes = to_bytes(&variants()[0]).unwrap();
    let cut = &bytes[..bytes.len() - 3];
    assert!(matches!(from_bytes::<f32>(cut), Err(Error::Integrity(_))));
    assert!(matches!(from_bytes::<f32>(&bytes[..40]), Err(Error::Integrity(_))));
}

#[test]
fn dtype_mismatch_is_format_error() {
    let bytes = to_bytes(&variants()[0]).unwrap();
    assert!(matches!(from_bytes::<f64>(&bytes), Err(Error::Format(_))));
}
