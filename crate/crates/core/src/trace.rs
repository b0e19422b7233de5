//! Activation statistics gathered during calibration passes.
//!
//! Statistics are streamed as sums plus counts, so traces over disjoint
//! batches combine exactly by addition and memory stays proportional to the
//! model rather than to the number of tokens.

use std::collections::BTreeMap;

use bitvec::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CalibrationBatch, Task};
use crate::error::{contract, input, Result};
use crate::model::{Component, Ctx, Granularity, PassKind, Probe, Site, UnifiedToyModel};
use crate::moe::rank_descending;
use crate::numerics::{Real, Tape, Tensor};

/// How the expectation over the calibration set weights positions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Expectation {
    /// Every token counts once.
    #[default]
    PerToken,
    /// Each forward pass is averaged first, then passes count once.
    PerSequence,
}

/// Ranking used for the per-observation top-p sets.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObservationScore {
    /// Raw mean `|h_i|` of the pass.
    #[default]
    Activation,
    /// Mean `|h_i|` times the neuron's down-projection column norm.
    Importance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceOptions {
    pub granularity: Granularity,
    /// Integration grid for generation batches; overrides the batch's grid.
    pub timestep_grid: Option<Vec<f64>>,
    pub expectation: Expectation,
    pub top_p: f64,
    pub observation_score: ObservationScore,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self {
            granularity: Granularity::Block,
            timestep_grid: None,
            expectation: Expectation::PerToken,
            top_p: 0.5,
            observation_score: ObservationScore::Activation,
        }
    }
}

/// Top-p membership of one forward pass.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Observation {
    pub task: Task,
    pub sample: usize,
    /// Sampler step for generation layers, `None` for understanding passes.
    pub timestep: Option<usize>,
    pub active: BitVec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub component: Component,
    pub layer: usize,
    /// MLP width at recording time (0 if the layer has no MLP).
    pub width: usize,
    pub n_heads: usize,
    pub abs_sum: Vec<f64>,
    pub token_count: u64,
    pub seq_abs_sum: Vec<f64>,
    pub seq_count: u64,
    pub cos_sum: f64,
    pub cos_count: u64,
    pub head_norm_sum: Vec<f64>,
    pub head_token_count: u64,
    pub observations: Vec<Observation>,
}

impl LayerStats {
    fn new(site: Site) -> Self {
        Self {
            component: site.component,
            layer: site.layer,
            width: 0,
            n_heads: 0,
            abs_sum: Vec::new(),
            token_count: 0,
            seq_abs_sum: Vec::new(),
            seq_count: 0,
            cos_sum: 0.0,
            cos_count: 0,
            head_norm_sum: Vec::new(),
            head_token_count: 0,
            observations: Vec::new(),
        }
    }

    pub fn site(&self) -> Site {
        Site {
            component: self.component,
            layer: self.layer,
        }
    }

    /// Mean `|h_i|` per neuron under the given expectation.
    pub fn mean_abs(&self, expectation: Expectation) -> Option<Vec<f64>> {
        let (sum, count) = match expectation {
            Expectation::PerToken => (&self.abs_sum, self.token_count),
            Expectation::PerSequence => (&self.seq_abs_sum, self.seq_count),
        };
        (count > 0).then(|| sum.iter().map(|s| s / count as f64).collect())
    }

    pub fn mean_cosine(&self) -> Option<f64> {
        (self.cos_count > 0).then(|| self.cos_sum / self.cos_count as f64)
    }

    pub fn mean_head_norms(&self) -> Option<Vec<f64>> {
        (self.head_token_count > 0).then(|| {
            self.head_norm_sum
                .iter()
                .map(|s| s / self.head_token_count as f64)
                .collect()
        })
    }

    fn merge(mut self, other: &LayerStats) -> Result<Self> {
        fn width(a: &mut usize, b: usize, what: &str) -> Result<()> {
            match (*a, b) {
                (_, 0) => Ok(()),
                (0, w) => {
                    *a = w;
                    Ok(())
                }
                (x, y) if x == y => Ok(()),
                (x, y) => Err(contract(format!("{what} differs between traces ({x} vs {y})"))),
            }
        }
        width(&mut self.width, other.width, "MLP width")?;
        width(&mut self.n_heads, other.n_heads, "head count")?;
        add_vec(&mut self.abs_sum, &other.abs_sum);
        add_vec(&mut self.seq_abs_sum, &other.seq_abs_sum);
        add_vec(&mut self.head_norm_sum, &other.head_norm_sum);
        self.token_count += other.token_count;
        self.seq_count += other.seq_count;
        self.cos_sum += other.cos_sum;
        self.cos_count += other.cos_count;
        self.head_token_count += other.head_token_count;
        self.observations.extend(other.observations.iter().cloned());
        self.observations.sort();
        Ok(self)
    }
}

fn add_vec(acc: &mut Vec<f64>, other: &[f64]) {
    if acc.is_empty() {
        acc.extend_from_slice(other);
    } else {
        for (a, b) in acc.iter_mut().zip(other) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationTrace {
    pub granularity: Granularity,
    pub expectation: Expectation,
    pub top_p: f64,
    pub observation_score: ObservationScore,
    /// Ids of the calibration batches folded in, sorted.
    pub batches: Vec<String>,
    pub tasks: Vec<Task>,
    /// One entry per recorded layer, sorted by site.
    pub layers: Vec<LayerStats>,
}

impl ActivationTrace {
    pub fn empty(options: &TraceOptions) -> Self {
        Self {
            granularity: options.granularity,
            expectation: options.expectation,
            top_p: options.top_p,
            observation_score: options.observation_score,
            batches: Vec::new(),
            tasks: Vec::new(),
            layers: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty() && self.layers.is_empty()
    }

    pub fn layer(&self, site: Site) -> Option<&LayerStats> {
        self.layers.iter().find(|l| l.site() == site)
    }

    pub fn provenance(&self) -> String {
        self.batches.join("+")
    }
}

/// Pools two traces. Sums and counts add, so the result does not depend on
/// argument order or grouping (up to float rounding).
pub fn merge(a: &ActivationTrace, b: &ActivationTrace) -> Result<ActivationTrace> {
    if b.is_empty() {
        return Ok(a.clone());
    }
    if a.is_empty() {
        return Ok(b.clone());
    }
    if a.granularity != b.granularity
        || a.expectation != b.expectation
        || a.top_p != b.top_p
        || a.observation_score != b.observation_score
    {
        return Err(contract("traces were recorded with different options"));
    }
    let mut layers: BTreeMap<Site, LayerStats> = a.layers.iter().map(|l| (l.site(), l.clone())).collect();
    for l in &b.layers {
        let merged = match layers.remove(&l.site()) {
            Some(mine) => mine.merge(l)?,
            None => l.clone(),
        };
        layers.insert(l.site(), merged);
    }
    let mut batches: Vec<String> = a.batches.iter().chain(&b.batches).cloned().collect();
    batches.sort();
    let mut tasks: Vec<Task> = a.tasks.iter().chain(&b.tasks).copied().collect();
    tasks.sort();
    tasks.dedup();
    Ok(ActivationTrace {
        granularity: a.granularity,
        expectation: a.expectation,
        top_p: a.top_p,
        observation_score: a.observation_score,
        batches,
        tasks,
        layers: layers.into_values().collect(),
    })
}

/// Number of members in a top-p set over `n` items.
pub fn top_count(p: f64, n: usize) -> usize {
    ((p * n as f64).round() as usize).clamp(usize::from(n > 0), n)
}

/// Membership bitset of the `top_count(p, n)` best entries (ties to the
/// lower index).
pub fn top_p_set(scores: &[f64], p: f64) -> BitVec {
    let mut bits = bitvec![0; scores.len()];
    for &i in rank_descending(scores).iter().take(top_count(p, scores.len())) {
        bits.set(i, true);
    }
    bits
}

struct Recorder<'o> {
    options: &'o TraceOptions,
    task: Task,
    sample: usize,
    timestep: Option<usize>,
    col_norms: BTreeMap<Site, Vec<f64>>,
    stats: BTreeMap<Site, LayerStats>,
}

impl Recorder<'_> {
    fn entry(&mut self, site: Site) -> &mut LayerStats {
        self.stats.entry(site).or_insert_with(|| LayerStats::new(site))
    }
}

impl<T: Real> Probe<T> for Recorder<'_> {
    fn residual(&mut self, site: Site, granularity: Granularity, x: &Tensor<T>, y: &Tensor<T>) {
        if granularity != self.options.granularity {
            return;
        }
        let mut sum = 0.0;
        for t in 0..x.rows() {
            sum += token_cosine(x.row(t), y.row(t));
        }
        let stats = self.entry(site);
        stats.cos_sum += sum;
        stats.cos_count += x.rows() as u64;
    }

    fn wants_hidden(&self) -> bool {
        true
    }

    fn mlp_hidden(&mut self, site: Site, h: &Tensor<T>) {
        let (rows, width) = (h.rows(), h.cols());
        let mut pass = vec![0.0; width];
        for t in 0..rows {
            for (acc, v) in pass.iter_mut().zip(h.row(t)) {
                *acc += v.as_f64().abs();
            }
        }
        let mean: Vec<f64> = pass.iter().map(|s| s / rows as f64).collect();
        let ranked: Vec<f64> = match (self.options.observation_score, self.col_norms.get(&site)) {
            (ObservationScore::Importance, Some(norms)) => mean.iter().zip(norms).map(|(m, n)| m * n).collect(),
            _ => mean.clone(),
        };
        let active = top_p_set(&ranked, self.options.top_p);
        let (task, sample, timestep) = (self.task, self.sample, self.timestep);
        let stats = self.entry(site);
        stats.width = width;
        add_vec(&mut stats.abs_sum, &pass);
        add_vec(&mut stats.seq_abs_sum, &mean);
        stats.token_count += rows as u64;
        stats.seq_count += 1;
        stats.observations.push(Observation {
            task,
            sample,
            timestep,
            active,
        });
    }

    fn heads(&mut self, site: Site, concat: &Tensor<T>, n_heads: usize) {
        let dh = concat.cols() / n_heads;
        let mut sums = vec![0.0; n_heads];
        for t in 0..concat.rows() {
            let row = concat.row(t);
            for (h, s) in sums.iter_mut().enumerate() {
                *s += crate::numerics::l2_norm(&row[h * dh..(h + 1) * dh]);
            }
        }
        let stats = self.entry(site);
        stats.n_heads = n_heads;
        add_vec(&mut stats.head_norm_sum, &sums);
        stats.head_token_count += concat.rows() as u64;
    }
}

/// Per-token cosine. A zero vector against itself counts as unchanged;
/// against a non-zero vector it counts as orthogonal.
fn token_cosine<T: Real>(x: &[T], y: &[T]) -> f64 {
    match crate::numerics::cosine_similarity(x, y) {
        Ok(c) => c,
        Err(_) => {
            if crate::numerics::l2_norm(x) == 0.0 && crate::numerics::l2_norm(y) == 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

fn down_norms<T: Real>(model: &UnifiedToyModel<T>) -> BTreeMap<Site, Vec<f64>> {
    let mut out = BTreeMap::new();
    for component in [Component::Und, Component::Gen] {
        for (layer, block) in model.blocks(component).iter().enumerate() {
            let down = if let Some(m) = block.dense_mlp() {
                m.down.clone()
            } else if let Some(m) = block.moe() {
                m.to_dense().down
            } else {
                continue;
            };
            let norms = (0..down.cols()).map(|c| down.col_norm(c)).collect();
            out.insert(Site { component, layer }, norms);
        }
    }
    out
}

/// Runs the batch through the model and collects statistics. Generation
/// samples are traced through the conditioning pass and then at every step
/// of the sampler trajectory.
pub fn record<T: Real>(model: &UnifiedToyModel<T>, batch: &CalibrationBatch, options: &TraceOptions) -> Result<ActivationTrace> {
    if batch.samples.is_empty() {
        return Err(input("empty calibration batch"));
    }
    if !(options.top_p > 0.0 && options.top_p < 1.0) {
        return Err(input(format!("top-p {} outside (0, 1)", options.top_p)));
    }
    let grid = match options.timestep_grid.as_ref().or(batch.timestep_grid.as_ref()) {
        Some(g) => {
            validate_grid(g)?;
            g.clone()
        }
        None => {
            let k = model.config.gen_steps;
            (0..k).map(|i| i as f64 / k as f64).collect()
        }
    };
    let mut rec = Recorder {
        options,
        task: batch.task,
        sample: 0,
        timestep: None,
        col_norms: match options.observation_score {
            ObservationScore::Importance => down_norms(model),
            ObservationScore::Activation => BTreeMap::new(),
        },
        stats: BTreeMap::new(),
    };
    for (i, tokens) in batch.samples.iter().enumerate() {
        rec.sample = batch.indices[i];
        rec.timestep = None;
        let pass = match batch.task {
            Task::Understanding => PassKind::Understanding,
            Task::Generation => PassKind::Conditioning,
        };
        let features = {
            let tape = Tape::inference();
            let mut ctx = Ctx::new(pass, &mut rec as &mut dyn Probe<T>);
            let out = model.forward_und(&tape, tokens, &mut ctx)?;
            tape.to_tensor(out.features)
        };
        if batch.task == Task::Generation {
            let mut x = model.initial_noise(batch.noise_seed(i));
            for (k, &t) in grid.iter().enumerate() {
                rec.timestep = Some(k);
                let v = model.velocity_probed(&features, &x, t, &mut rec)?;
                let next = grid.get(k + 1).copied().unwrap_or(1.0);
                let dt = T::from_f64_lossy(next - t);
                for (xi, &vi) in x.data_mut().iter_mut().zip(v.data()) {
                    *xi += dt * vi;
                }
            }
        }
    }
    Ok(ActivationTrace {
        granularity: options.granularity,
        expectation: options.expectation,
        top_p: options.top_p,
        observation_score: options.observation_score,
        batches: vec![batch.id.clone()],
        tasks: vec![batch.task],
        layers: rec
            .stats
            .into_values()
            .map(|mut s| {
                s.observations.sort();
                s
            })
            .collect(),
    })
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(input("empty timestep grid"));
    }
    if grid.iter().any(|t| !(0.0..1.0).contains(t)) || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(input("timestep grid must be strictly increasing within [0, 1)"));
    }
    Ok(())
}
