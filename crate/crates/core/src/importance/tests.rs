use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{gen_dataset, make_calibration, CalibrationBatch, Dataset, SyntheticSpec};
use crate::model::{Ctx, FeedForward, ModelConfig, PassKind, Probe};
use crate::numerics::{cosine_similarity, Tape};
use crate::surgery::prune_mlp;
use crate::trace::{record, TraceOptions};

fn setup(layers: usize) -> (UnifiedToyModel<f64>, Dataset) {
    let cfg = ModelConfig {
        n_layers_und: layers,
        n_layers_gen: 2,
        ..ModelConfig::default()
    };
    let ds = gen_dataset(&SyntheticSpec::for_model(&cfg, 0)).unwrap();
    (UnifiedToyModel::new(cfg).unwrap(), ds)
}

fn site(layer: usize) -> Site {
    Site {
        component: Component::Und,
        layer,
    }
}

fn und_batch(ds: &Dataset, n: usize) -> CalibrationBatch {
    make_calibration(ds, Task::Understanding, n, 5).unwrap()
}

#[derive(Default)]
struct Keep {
    residual: Vec<(Site, Tensor<f64>, Tensor<f64>)>,
    mlp_in: Vec<(Site, Tensor<f64>)>,
    heads: Vec<(Site, Tensor<f64>)>,
}

impl Probe<f64> for Keep {
    fn residual(&mut self, site: Site, g: Granularity, x: &Tensor<f64>, y: &Tensor<f64>) {
        if g == Granularity::Block {
            self.residual.push((site, x.clone(), y.clone()));
        }
        if g == Granularity::Attn {
            // MLP input is the post-attention stream; keep it for ablations.
            self.mlp_in.push((site, y.clone()));
        }
    }

    fn heads(&mut self, site: Site, concat: &Tensor<f64>, _n: usize) {
        self.heads.push((site, concat.clone()));
    }
}

fn keep_all(model: &UnifiedToyModel<f64>, batch: &CalibrationBatch) -> Keep {
    let mut keep = Keep::default();
    for s in &batch.samples {
        let tape = Tape::inference();
        let mut ctx = Ctx::new(PassKind::Understanding, &mut keep as &mut dyn Probe<f64>);
        model.forward_und(&tape, s, &mut ctx).unwrap();
    }
    keep
}

#[test]
fn zero_branches_score_one() {
    let (mut m, ds) = setup(2);
    for b in &mut m.und.blocks {
        let wo = &mut b.attn.as_mut().unwrap().attn.wo;
        *wo = Tensor::zeros(wo.shape());
        if let FeedForward::Dense(mlp) = &mut b.ffn.as_mut().unwrap().ffn {
            mlp.down = Tensor::zeros(mlp.down.shape());
        }
    }
    let tr = record(&m, &und_batch(&ds, 4), &TraceOptions::default()).unwrap();
    let scores = layer_scores(&tr, Granularity::Block).unwrap();
    let und: Vec<_> = scores.iter().filter(|s| s.component == Component::Und).collect();
    assert_eq!(und.len(), 2);
    assert!(und.iter().all(|s| (s.score - 1.0).abs() < 1e-12));
}

#[test]
fn negating_branch_scores_minus_one() {
    // A branch returning -2x flips the stream: y = x - 2x = -x.
    let x = [0.5f64, -1.0, 2.0];
    let y: Vec<f64> = x.iter().map(|v| v - 2.0 * v).collect();
    assert!((cosine_similarity(&x, &y).unwrap() + 1.0).abs() < 1e-12);
}

#[test]
fn layer_scores_match_per_token_recomputation() {
    let (m, ds) = setup(3);
    let batch = und_batch(&ds, 6);
    let tr = record(&m, &batch, &TraceOptions::default()).unwrap();
    let keep = keep_all(&m, &batch);
    for s in layer_scores(&tr, Granularity::Block).unwrap() {
        if s.component != Component::Und {
            continue;
        }
        let (mut sum, mut n) = (0.0, 0);
        for (st, x, y) in &keep.residual {
            if st.layer == s.layer {
                for t in 0..x.rows() {
                    sum += cosine_similarity(x.row(t), y.row(t)).unwrap();
                    n += 1;
                }
            }
        }
        assert!((s.score - sum / n as f64).abs() < 1e-6);
    }
    assert!(matches!(layer_scores(&tr, Granularity::Mlp), Err(crate::Error::Contract(_))));
}

#[test]
fn layer_scores_ignore_sample_order() {
    let (m, ds) = setup(2);
    let batch = und_batch(&ds, 5);
    let mut reversed = batch.clone();
    reversed.samples.reverse();
    reversed.indices.reverse();
    let a = layer_scores(&record(&m, &batch, &TraceOptions::default()).unwrap(), Granularity::Block).unwrap();
    let b = layer_scores(&record(&m, &reversed, &TraceOptions::default()).unwrap(), Granularity::Block).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x.score - y.score).abs() < 1e-12);
    }
}

#[test]
fn hand_computed_neuron_score() {
    let (mut m, ds) = setup(2);
    let tr0 = record(&m, &und_batch(&ds, 1), &TraceOptions::default()).unwrap();
    let mut tr = tr0.clone();
    let stats = tr.layers.iter_mut().find(|l| l.site() == site(0)).unwrap();
    // |h_0| over two tokens is {1, 3}; neuron 1 is dead.
    stats.token_count = 2;
    stats.abs_sum.iter_mut().for_each(|v| *v = 1.0);
    stats.abs_sum[0] = 4.0;
    stats.abs_sum[1] = 0.0;
    if let FeedForward::Dense(mlp) = &mut m.und.blocks[0].ffn.as_mut().unwrap().ffn {
        for r in 0..mlp.down.rows() {
            mlp.down.row_mut(r)[0] = if r == 0 { 2.0 } else { 0.0 };
        }
    }
    let report = neuron_scores(&tr, &m, site(0)).unwrap();
    assert_eq!(report.scores[0], 4.0);
    assert_eq!(report.scores[1], 0.0);
    assert!(report.scores.iter().all(|&s| s >= 0.0));
    assert_eq!(report.provenance.tasks, vec![Task::Understanding]);
}

#[test]
fn neuron_scores_equal_mean_ablation_error() {
    let (m, ds) = setup(2);
    let batch = und_batch(&ds, 4);
    let tr = record(&m, &batch, &TraceOptions::default()).unwrap();
    let keep = keep_all(&m, &batch);
    for layer in 0..2 {
        let report = neuron_scores(&tr, &m, site(layer)).unwrap();
        let block = &m.und.blocks[layer];
        let sub = block.ffn.as_ref().unwrap();
        let mlp = sub.ffn.as_dense().unwrap();
        let inputs: Vec<Tensor<f64>> = keep
            .mlp_in
            .iter()
            .filter(|(s, _)| s.layer == layer)
            .map(|(_, x)| normed(x, &sub.norm))
            .collect();
        for i in (0..mlp.width()).step_by(9) {
            let pruned = prune_mlp(mlp, &BTreeSet::from([i]));
            let (mut sum, mut n) = (0.0, 0);
            for x in &inputs {
                let full = mlp.apply(x).unwrap();
                let less = pruned.apply(x).unwrap();
                for t in 0..x.rows() {
                    let d: f64 = full.row(t).iter().zip(less.row(t)).map(|(a, b)| (a - b).powi(2)).sum();
                    sum += d.sqrt();
                    n += 1;
                }
            }
            assert!((report.scores[i] - sum / n as f64).abs() < 1e-6, "neuron {i}");
        }
    }
}

fn normed(x: &Tensor<f64>, gain: &Tensor<f64>) -> Tensor<f64> {
    let tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let g = tape.constant(gain.clone());
    let y = tape.rms_norm(xv, g, crate::model::NORM_EPS).unwrap();
    tape.to_tensor(y)
}

#[test]
fn scaling_hidden_activations_scales_scores() {
    let (mut m, ds) = setup(2);
    let batch = und_batch(&ds, 3);
    let base = neuron_scores(&record(&m, &batch, &TraceOptions::default()).unwrap(), &m, site(1)).unwrap();
    if let FeedForward::Dense(mlp) = &mut m.und.blocks[1].ffn.as_mut().unwrap().ffn {
        // The hidden state is linear in the up projection.
        mlp.up.data_mut().iter_mut().for_each(|v| *v *= 3.0);
    }
    let scaled = neuron_scores(&record(&m, &batch, &TraceOptions::default()).unwrap(), &m, site(1)).unwrap();
    for (a, b) in base.scores.iter().zip(&scaled.scores) {
        assert!((3.0 * a - b).abs() <= 1e-9 * b.abs().max(1e-12));
    }
    assert_eq!(crate::moe::rank_descending(&base.scores), crate::moe::rank_descending(&scaled.scores));
}

#[test]
fn stale_trace_is_rejected() {
    let (mut m, ds) = setup(2);
    let tr = record(&m, &und_batch(&ds, 2), &TraceOptions::default()).unwrap();
    let report = neuron_scores(&tr, &m, site(0)).unwrap();
    let plan = crate::surgery::plan_width(&report, 0.25).unwrap();
    crate::surgery::apply(&mut m, &plan).unwrap();
    assert!(matches!(neuron_scores(&tr, &m, site(0)), Err(crate::Error::Contract(_))));
}

#[test]
fn head_scores_basics() {
    let (mut m, ds) = setup(2);
    let dh = m.config.head_dim();
    {
        let attn = &mut m.und.blocks[0].attn.as_mut().unwrap().attn;
        // Head 1 has no value projection; head 3 duplicates head 2.
        for r in dh..2 * dh {
            attn.wv.row_mut(r).fill(0.0);
        }
        for r in 0..dh {
            for w in [&mut attn.wq, &mut attn.wk, &mut attn.wv] {
                let src = w.row(2 * dh + r).to_vec();
                w.row_mut(3 * dh + r).copy_from_slice(&src);
            }
        }
        for r in 0..attn.wo.rows() {
            let row = attn.wo.row_mut(r);
            for c in 0..dh {
                row[3 * dh + c] = row[2 * dh + c];
            }
        }
    }
    let tr = record(&m, &und_batch(&ds, 3), &TraceOptions::default()).unwrap();
    let s = head_scores(&tr, &m, site(0)).unwrap();
    assert_eq!(s[1], 0.0);
    assert!((s[2] - s[3]).abs() < 1e-12);
}

#[test]
fn head_ranking_tracks_ablation_error() {
    let mut agree = 0;
    let mut pairs = 0;
    for seed in 0..4 {
        let cfg = ModelConfig {
            n_layers_und: 2,
            n_layers_gen: 2,
            seed,
            ..ModelConfig::default()
        };
        let ds = gen_dataset(&SyntheticSpec::for_model(&cfg, 0)).unwrap();
        let mut m = UnifiedToyModel::<f64>::new(cfg).unwrap();
        // Spread the head scales so the ranking is informative.
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let dh = m.config.head_dim();
        for b in &mut m.und.blocks {
            let attn = &mut b.attn.as_mut().unwrap().attn;
            for h in 0..attn.n_heads {
                let scale = 0.2 + 2.0 * rand::Rng::random::<f64>(&mut r);
                for row in 0..attn.wo.rows() {
                    attn.wo.row_mut(row)[h * dh..(h + 1) * dh].iter_mut().for_each(|v| *v *= scale);
                }
            }
        }
        let batch = und_batch(&ds, 6);
        let tr = record(&m, &batch, &TraceOptions::default()).unwrap();
        let keep = keep_all(&m, &batch);
        for layer in 0..2 {
            let scores = head_scores(&tr, &m, site(layer)).unwrap();
            let attn = &m.und.blocks[layer].attn.as_ref().unwrap().attn;
            let mut err = vec![0.0; attn.n_heads];
            let mut n = 0;
            for (st, concat) in &keep.heads {
                if st.layer != layer {
                    continue;
                }
                for t in 0..concat.rows() {
                    for (h, e) in err.iter_mut().enumerate() {
                        let a = &concat.row(t)[h * dh..(h + 1) * dh];
                        let contrib: f64 = (0..attn.wo.rows())
                            .map(|o| {
                                let w = &attn.wo.row(o)[h * dh..(h + 1) * dh];
                                w.iter().zip(a).map(|(x, y)| x * y).sum::<f64>().powi(2)
                            })
                            .sum();
                        *e += contrib.sqrt();
                    }
                    n += 1;
                }
            }
            err.iter_mut().for_each(|e| *e /= n as f64);
            for a in 0..scores.len() {
                for b in a + 1..scores.len() {
                    pairs += 1;
                    agree += usize::from((scores[a] > scores[b]) == (err[a] > err[b]));
                }
            }
        }
    }
    assert!(agree as f64 >= 0.8 * pairs as f64, "{agree}/{pairs}");
}

#[test]
fn csv_has_stable_columns() {
    let (m, ds) = setup(2);
    let tr = record(&m, &und_batch(&ds, 2), &TraceOptions::default()).unwrap();
    let reps = reports(&tr, &m, Some(Component::Und)).unwrap();
    assert_eq!(reps.len(), 2);
    assert!(reps[0].head_scores.is_some());
    let mut out = Vec::new();
    write_csv(&reps, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("component,layer,index,score,provenance"));
    assert_eq!(lines.count(), 2 * m.config.hidden());
}
