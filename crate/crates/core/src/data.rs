//! Deterministic synthetic tasks.
//!
//! Vocabulary layout: ids `0..C` are class tokens, `C` marks a generation
//! prompt, and the remaining ids are content tokens.
//!
//! Understanding samples are `[c, x₁, x₂, …]` with `x_{i+1} = π_c(x_i)` for
//! a fixed cyclic permutation `π_c` of the content tokens and a random start
//! `x₁`. Every token from `x₂` on is a deterministic function of the prefix.
//!
//! Generation samples pair the prompt `[GEN, c, fillers…]` with a fixed
//! per-class Gaussian pattern `P_c` of shape `[gen_len × gen_output_dim]`.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config, input, Result};
use crate::model::ModelConfig;
use crate::numerics::{Real, Tensor};

/// Task tag of data and calibration batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Understanding,
    Generation,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Understanding => "understanding",
            Task::Generation => "generation",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Task {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "und" | "understanding" => Ok(Task::Understanding),
            "gen" | "generation" => Ok(Task::Generation),
            other => Err(input(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_pattern_classes: usize,
    pub seq_len: usize,
    /// Length of generation prompts (marker, class, fillers).
    pub prompt_len: usize,
    pub vocab_size: usize,
    pub gen_len: usize,
    pub gen_output_dim: usize,
    pub n_train: usize,
    pub n_heldout: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_pattern_classes: 8,
            seq_len: 24,
            prompt_len: 8,
            vocab_size: 64,
            gen_len: 4,
            gen_output_dim: 16,
            n_train: 320,
            n_heldout: 64,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Spec whose shapes agree with a model configuration.
    pub fn for_model(model: &ModelConfig, seed: u64) -> Self {
        Self {
            vocab_size: model.vocab_size,
            gen_len: model.gen_len,
            gen_output_dim: model.gen_output_dim,
            seed,
            ..Self::default()
        }
    }

    pub fn gen_marker(&self) -> usize {
        self.n_pattern_classes
    }

    pub fn first_content(&self) -> usize {
        self.n_pattern_classes + 1
    }

    pub fn n_content(&self) -> usize {
        self.vocab_size.saturating_sub(self.first_content())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_pattern_classes == 0 {
            return Err(config("at least one pattern class is required"));
        }
        if self.n_content() < 2 {
            return Err(config(format!(
                "{} classes leave no room for content tokens in a vocabulary of {}",
                self.n_pattern_classes, self.vocab_size
            )));
        }
        if self.seq_len < 3 || self.prompt_len < 2 {
            return Err(config("sequences too short to carry a pattern"));
        }
        if self.gen_len == 0 || self.gen_output_dim == 0 {
            return Err(config("empty generation target"));
        }
        let und_space = self.n_pattern_classes * self.n_content();
        if self.n_train + self.n_heldout > und_space {
            return Err(config(format!(
                "{} understanding samples requested, only {und_space} distinct sequences exist",
                self.n_train + self.n_heldout
            )));
        }
        if self.n_train == 0 || self.n_heldout == 0 {
            return Err(config("both splits need at least one sample"));
        }
        Ok(())
    }

    /// Checks that a model can consume this data.
    pub fn check_model(&self, model: &ModelConfig) -> Result<()> {
        if model.vocab_size != self.vocab_size
            || model.gen_len != self.gen_len
            || model.gen_output_dim != self.gen_output_dim
            || model.max_seq_len < self.seq_len.max(self.prompt_len)
        {
            return Err(config("dataset shapes do not match the model configuration"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UndSample {
    pub class: usize,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GenSample {
    pub class: usize,
    pub prompt: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    /// Successor table per class: `successor[c][x - first_content]`.
    pub successor: Vec<Vec<usize>>,
    /// Row-major `[gen_len × gen_output_dim]` target per class.
    pub patterns: Vec<Vec<f64>>,
    pub und_train: Vec<UndSample>,
    pub und_heldout: Vec<UndSample>,
    pub gen_train: Vec<GenSample>,
    pub gen_heldout: Vec<GenSample>,
}

/// Targets for next-token training: position `i` predicts token `i + 1`,
/// scored only where that token is determined by the prefix.
pub fn und_targets(tokens: &[usize]) -> Vec<Option<usize>> {
    (0..tokens.len())
        .map(|i| (i >= 1 && i + 1 < tokens.len()).then(|| tokens[i + 1]))
        .collect()
}

pub fn gen_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_content = spec.n_content();
    let first = spec.first_content();

    // One content cycle per class.
    let successor: Vec<Vec<usize>> = (0..spec.n_pattern_classes)
        .map(|_| {
            let mut cycle: Vec<usize> = (0..n_content).collect();
            cycle.shuffle(&mut rng);
            let mut next = vec![0; n_content];
            for w in 0..n_content {
                next[cycle[w]] = first + cycle[(w + 1) % n_content];
            }
            next
        })
        .collect();

    let patterns = draw_patterns(spec, &mut rng);

    let mut starts: Vec<(usize, usize)> = (0..spec.n_pattern_classes)
        .flat_map(|c| (0..n_content).map(move |s| (c, s)))
        .collect();
    starts.shuffle(&mut rng);
    let und: Vec<UndSample> = starts[..spec.n_train + spec.n_heldout]
        .iter()
        .map(|&(c, s)| {
            let mut tokens = vec![c, first + s];
            while tokens.len() < spec.seq_len {
                let last = *tokens.last().expect("non-empty");
                tokens.push(successor[c][last - first]);
            }
            UndSample { class: c, tokens }
        })
        .collect();
    let (und_train, und_heldout) = und.split_at(spec.n_train);

    let mut seen = HashSet::new();
    let mut gen = Vec::with_capacity(spec.n_train + spec.n_heldout);
    let mut attempts = 0usize;
    while gen.len() < spec.n_train + spec.n_heldout {
        attempts += 1;
        if attempts > 100 * (spec.n_train + spec.n_heldout) {
            return Err(config("cannot draw enough distinct generation prompts"));
        }
        let c = rng.random_range(0..spec.n_pattern_classes);
        let mut prompt = vec![spec.gen_marker(), c];
        while prompt.len() < spec.prompt_len {
            prompt.push(first + rng.random_range(0..n_content));
        }
        let sample = GenSample { class: c, prompt };
        if seen.insert(sample.clone()) {
            gen.push(sample);
        }
    }
    let (gen_train, gen_heldout) = gen.split_at(spec.n_train);

    Ok(Dataset {
        spec: spec.clone(),
        successor,
        patterns,
        und_train: und_train.to_vec(),
        und_heldout: und_heldout.to_vec(),
        gen_train: gen_train.to_vec(),
        gen_heldout: gen_heldout.to_vec(),
    })
}

fn draw_patterns(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = spec.gen_len * spec.gen_output_dim;
    let mut patterns: Vec<Vec<f64>> = Vec::with_capacity(spec.n_pattern_classes);
    while patterns.len() < spec.n_pattern_classes {
        let p: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        if patterns.iter().all(|q| l2_distance(q, &p) > 1.0) {
            patterns.push(p);
        }
    }
    patterns
}

pub(crate) fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

impl Dataset {
    pub fn pattern<T: Real>(&self, class: usize) -> Tensor<T> {
        let data = self.patterns[class].iter().map(|&v| T::from_f64_lossy(v)).collect();
        Tensor::from_vec(&[self.spec.gen_len, self.spec.gen_output_dim], data).expect("pattern shape")
    }

    /// The class whose pattern is nearest to `output` (ties to the lower class).
    pub fn nearest_class<T: Real>(&self, output: &Tensor<T>) -> usize {
        let out: Vec<f64> = output.data().iter().map(|v| v.as_f64()).collect();
        let mut best = (0, f64::INFINITY);
        for (c, p) in self.patterns.iter().enumerate() {
            let dist = l2_distance(p, &out);
            if dist < best.1 {
                best = (c, dist);
            }
        }
        best.0
    }

    /// Reference predictor for the understanding task: applies the class
    /// cycle to the current token.
    pub fn oracle_next(&self, tokens: &[usize], i: usize) -> usize {
        let first = self.spec.first_content();
        self.successor[tokens[0]][tokens[i] - first]
    }

    fn pool(&self, task: Task) -> Vec<Vec<usize>> {
        match task {
            Task::Understanding => self.und_train.iter().map(|s| s.tokens.clone()).collect(),
            Task::Generation => self.gen_train.iter().map(|s| s.prompt.clone()).collect(),
        }
    }
}

/// Task-tagged sample set used only for activation statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBatch {
    pub id: String,
    pub task: Task,
    /// Positions of the samples in the training pool of `task`.
    pub indices: Vec<usize>,
    /// Token sequences (generation prompts for the generation task).
    pub samples: Vec<Vec<usize>>,
    /// Integration grid for generation calibration; `None` means the
    /// sampler's own `k / K` steps.
    pub timestep_grid: Option<Vec<f64>>,
    pub seed: u64,
}

impl CalibrationBatch {
    pub fn count(&self) -> usize {
        self.samples.len()
    }

    /// Noise seed used when tracing sample `i` along the sampler trajectory.
    pub fn noise_seed(&self, i: usize) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(self.indices[i] as u64)
    }
}

/// Seeded draw of `count` training-split samples without replacement.
pub fn make_calibration(dataset: &Dataset, task: Task, count: usize, seed: u64) -> Result<CalibrationBatch> {
    let pool = dataset.pool(task);
    if count == 0 {
        return Err(input("calibration count must be at least 1"));
    }
    if count > pool.len() {
        return Err(input(format!(
            "calibration count {count} exceeds the {task} pool of {}",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = rand::seq::index::sample(&mut rng, pool.len(), count).into_vec();
    indices.sort_unstable();
    let samples = indices.iter().map(|&i| pool[i].clone()).collect();
    Ok(CalibrationBatch {
        id: format!("{}-s{}-n{}", task.as_str(), seed, count),
        task,
        indices,
        samples,
        timestep_grid: None,
        seed,
    })
}
