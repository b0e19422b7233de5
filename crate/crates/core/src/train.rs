//! Optimisation loops and evaluation.
//!
//! Every stage minimises `w_und · CE + w_gen · MSE`: next-token cross
//! entropy on the understanding split and flow-matching velocity error on
//! the generation split. Stages differ only in which tensors are frozen.

use std::collections::HashMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{und_targets, Dataset};
use crate::error::{config, Error, Result};
use crate::model::{Component, Ctx, NoProbe, PassKind, Probe, UnifiedToyModel};
use crate::moe::{AdaptTarget, MoeMode};
use crate::numerics::{Real, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    DenseFinetune,
    ExpertFrozen,
    MoeFull,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::DenseFinetune => "dense_finetune",
            Stage::ExpertFrozen => "expert_frozen",
            Stage::MoeFull => "moe_full",
        }
    }

    pub fn default_steps(self) -> usize {
        match self {
            Stage::Pretrain => 2000,
            _ => 300,
        }
    }

    fn needs_moe(self) -> bool {
        matches!(self, Stage::ExpertFrozen | Stage::MoeFull)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    /// Understanding sequences per step.
    pub batch_und: usize,
    /// Generation prompts per step.
    pub batch_gen: usize,
    pub lr: f64,
    /// Decoupled decay applied to matrices only.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables it.
    pub grad_clip: Option<f64>,
    pub w_und: f64,
    pub w_gen: f64,
    /// Weight of the optional router balance term (off by default).
    pub balance_weight: f64,
    pub seed: u64,
    /// Lets `moe_full` run on a model that skipped expert-frozen tuning.
    pub allow_cold_start: bool,
    /// Additional parameter-name fragments to freeze on top of the stage mask.
    pub freeze: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_stage(Stage::Pretrain)
    }
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        Self {
            stage,
            steps: stage.default_steps(),
            batch_und: 8,
            batch_gen: 8,
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(1.0),
            w_und: 1.0,
            w_gen: 1.0,
            balance_weight: 0.0,
            seed: 0,
            allow_cold_start: false,
            freeze: Vec::new(),
        }
    }
}

/// One row of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub total: f64,
    pub und: f64,
    pub gen: f64,
}

pub fn write_loss_csv<W: Write>(curve: &[LossPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "loss_total", "loss_und", "loss_gen"])?;
    for p in curve {
        w.write_record([p.step.to_string(), p.total.to_string(), p.und.to_string(), p.gen.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn is_expert(name: &str) -> bool {
    name.contains(".moe.experts.")
}

/// Whether the stage keeps `name` fixed.
pub fn frozen_by_stage(stage: Stage, target: Option<AdaptTarget>, name: &str) -> bool {
    match stage {
        Stage::Pretrain | Stage::DenseFinetune => false,
        Stage::ExpertFrozen => is_expert(name),
        Stage::MoeFull => target == Some(AdaptTarget::UndGen) && name.starts_with("und.") && is_expert(name),
    }
}

fn has_moe<T: Real>(model: &UnifiedToyModel<T>) -> bool {
    [Component::Und, Component::Gen]
        .iter()
        .any(|&c| model.blocks(c).iter().any(|b| b.moe().is_some()))
}

/// Marks tensors trainable according to the stage and extra freezes.
pub fn apply_mask<T: Real>(model: &mut UnifiedToyModel<T>, cfg: &TrainConfig) -> Result<()> {
    let moe = has_moe(model);
    if cfg.stage.needs_moe() && !moe {
        return Err(config(format!("stage {} needs a converted model", cfg.stage.as_str())));
    }
    if !cfg.stage.needs_moe() && moe {
        return Err(config(format!("stage {} expects a dense model", cfg.stage.as_str())));
    }
    if cfg.stage == Stage::MoeFull && !cfg.allow_cold_start && !model.meta.stages.contains(&Stage::ExpertFrozen) {
        return Err(config(
            "moe_full requires a prior expert_frozen stage (set allow_cold_start to override)",
        ));
    }
    let target = model.meta.adapt_target;
    let stage = cfg.stage;
    model.set_requires_grad(|name| !frozen_by_stage(stage, target, name) && !cfg.freeze.iter().any(|f| name.contains(f.as_str())));
    Ok(())
}

/// Samples drawn for one optimisation step.
#[derive(Debug, Clone)]
pub struct StepBatch<T: Real> {
    pub und: Vec<usize>,
    /// `(index into gen_train, noise, t)`
    pub gen: Vec<(usize, Tensor<T>, f64)>,
}

pub fn draw_batch<T: Real>(model: &UnifiedToyModel<T>, dataset: &Dataset, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> StepBatch<T> {
    let und = if cfg.w_und > 0.0 {
        (0..cfg.batch_und).map(|_| rng.random_range(0..dataset.und_train.len())).collect()
    } else {
        Vec::new()
    };
    let gen = if cfg.w_gen > 0.0 {
        (0..cfg.batch_gen)
            .map(|_| {
                let i = rng.random_range(0..dataset.gen_train.len());
                let noise = model.initial_noise(rng.random());
                let t: f64 = rng.random();
                (i, noise, t)
            })
            .collect()
    } else {
        Vec::new()
    };
    StepBatch { und, gen }
}

/// Handles of the step's loss terms.
#[derive(Debug, Clone, Copy)]
pub struct Losses {
    pub total: Var,
    pub und: Option<Var>,
    pub gen: Option<Var>,
}

/// Loss of one batch on `tape`.
pub fn batch_loss<'a, T: Real>(
    model: &'a UnifiedToyModel<T>,
    tape: &Tape<'a, T>,
    dataset: &Dataset,
    batch: &StepBatch<T>,
    cfg: &TrainConfig,
) -> Result<Losses> {
    let mut probe = NoProbe;
    let mut balance = Vec::new();
    let mut und_terms = Vec::new();
    for &i in &batch.und {
        let tokens = &dataset.und_train[i].tokens;
        let mut ctx = Ctx::new(PassKind::Understanding, &mut probe as &mut dyn Probe<T>);
        if cfg.balance_weight > 0.0 {
            ctx.balance = Some(Vec::new());
        }
        let out = model.forward_und(tape, tokens, &mut ctx)?;
        balance.extend(ctx.balance.take().unwrap_or_default());
        und_terms.push(tape.cross_entropy(out.logits, &und_targets(tokens))?);
    }
    let mut gen_terms = Vec::new();
    for (i, noise, t) in &batch.gen {
        let sample = &dataset.gen_train[*i];
        let target = dataset.pattern::<T>(sample.class);
        let mut ctx = Ctx::new(PassKind::Conditioning, &mut probe as &mut dyn Probe<T>);
        if cfg.balance_weight > 0.0 {
            ctx.balance = Some(Vec::new());
        }
        let out = model.forward_und(tape, &sample.prompt, &mut ctx)?;
        let tt = T::from_f64_lossy(*t);
        let mut x_t = noise.clone();
        let mut v = noise.clone();
        for ((x, vel), &p) in x_t.data_mut().iter_mut().zip(v.data_mut()).zip(target.data()) {
            let n = *x;
            *x = (T::one() - tt) * n + tt * p;
            *vel = p - n;
        }
        let x_var = tape.constant(x_t);
        let pred = model.forward_gen(tape, out.features, x_var, *t, &mut ctx)?;
        balance.extend(ctx.balance.take().unwrap_or_default());
        gen_terms.push(tape.mse(pred, tape.constant(v))?);
    }
    let average = |terms: &[Var]| -> Result<Option<Var>> {
        let Some((&first, rest)) = terms.split_first() else {
            return Ok(None);
        };
        let mut acc = first;
        for &t in rest {
            acc = tape.add(acc, t)?;
        }
        Ok(Some(tape.scale(acc, T::from_f64_lossy(1.0 / terms.len() as f64))))
    };
    let und = average(&und_terms)?;
    let gen = average(&gen_terms)?;
    let mut total = None;
    for (term, w) in [(und, cfg.w_und), (gen, cfg.w_gen)] {
        if let Some(v) = term {
            let v = tape.scale(v, T::from_f64_lossy(w));
            total = Some(match total {
                Some(acc) => tape.add(acc, v)?,
                None => v,
            });
        }
    }
    if cfg.balance_weight > 0.0 {
        if let Some(b) = average(&balance)? {
            let b = tape.scale(b, T::from_f64_lossy(cfg.balance_weight));
            total = Some(match total {
                Some(acc) => tape.add(acc, b)?,
                None => b,
            });
        }
    }
    let total = total.ok_or_else(|| config("both loss weights are zero"))?;
    Ok(Losses { total, und, gen })
}

struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Runs `cfg.steps` AdamW steps. Returns the per-step loss curve.
pub fn train<T: Real>(model: &mut UnifiedToyModel<T>, dataset: &Dataset, cfg: &TrainConfig) -> Result<Vec<LossPoint>> {
    dataset.spec.check_model(&model.config)?;
    apply_mask(model, cfg)?;
    if cfg.steps == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut moments: HashMap<String, Moments<T>> = HashMap::new();
    let mut curve = Vec::with_capacity(cfg.steps);
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    for step in 1..=cfg.steps {
        let batch = draw_batch(model, dataset, cfg, &mut rng);
        let (point, mut grads) = {
            let tape = Tape::new();
            let losses = batch_loss(model, &tape, dataset, &batch, cfg)?;
            let read = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().as_f64());
            let point = LossPoint {
                step,
                total: read(Some(losses.total)),
                und: read(losses.und),
                gen: read(losses.gen),
            };
            if !point.total.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("loss {} (und {}, gen {})", point.total, point.und, point.gen),
                });
            }
            let g = tape.backward(losses.total)?;
            let grads: Vec<(String, Vec<T>)> = model
                .params()
                .into_iter()
                .filter(|(_, t)| t.requires_grad)
                .filter_map(|(name, t)| g.wrt_tensor(t).map(|g| (name, g.to_vec())))
                .collect();
            (point, grads)
        };
        if let Some(clip) = cfg.grad_clip {
            let norm = grads
                .iter()
                .flat_map(|(_, g)| g.iter())
                .map(|x| x.as_f64().powi(2))
                .sum::<f64>()
                .sqrt();
            if !norm.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: "non-finite gradient".into(),
                });
            }
            if norm > clip {
                let s = T::from_f64_lossy(clip / norm);
                for (_, g) in &mut grads {
                    g.iter_mut().for_each(|x| *x *= s);
                }
            }
        }
        let lr = T::from_f64_lossy(cfg.lr);
        let bc1 = T::from_f64_lossy(1.0 - b1.powi(step as i32));
        let bc2 = T::from_f64_lossy(1.0 - b2.powi(step as i32));
        let (tb1, tb2) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
        let eps = T::from_f64_lossy(cfg.eps);
        let decay = T::from_f64_lossy(cfg.lr * cfg.weight_decay);
        let grads: HashMap<String, Vec<T>> = grads.into_iter().collect();
        model.visit_mut(&mut |name, tensor| {
            let Some(g) = grads.get(&name) else {
                return;
            };
            let st = moments.entry(name).or_insert_with(|| Moments {
                m: vec![T::zero(); g.len()],
                v: vec![T::zero(); g.len()],
            });
            let matrix = tensor.shape().len() == 2;
            for (i, p) in tensor.data_mut().iter_mut().enumerate() {
                st.m[i] = tb1 * st.m[i] + (T::one() - tb1) * g[i];
                st.v[i] = tb2 * st.v[i] + (T::one() - tb2) * g[i] * g[i];
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                if matrix {
                    *p -= decay * *p;
                }
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
        if step % 100 == 0 || step == cfg.steps {
            log::debug!("{} step {step}: loss {:.5}", cfg.stage.as_str(), point.total);
        }
        curve.push(point);
    }
    model.meta.stages.push(cfg.stage);
    Ok(curve)
}

/// Dense baseline training from a fresh model.
pub fn pretrain<T: Real>(model: &mut UnifiedToyModel<T>, dataset: &Dataset, cfg: &TrainConfig) -> Result<Vec<LossPoint>> {
    if cfg.stage != Stage::Pretrain {
        return Err(config("pretrain called with a non-pretrain stage"));
    }
    train(model, dataset, cfg)
}

/// Any post-compression stage: dense finetune, expert-frozen or full MoE.
pub fn tune<T: Real>(model: &mut UnifiedToyModel<T>, dataset: &Dataset, cfg: &TrainConfig) -> Result<Vec<LossPoint>> {
    if cfg.stage == Stage::Pretrain {
        return Err(config("tune called with the pretrain stage"));
    }
    train(model, dataset, cfg)
}

/// Training objective averaged over `draws` fixed batches (seeded by
/// `seed`, independent of the training stream). Lets runs with different
/// architectures be compared without minibatch noise.
pub fn objective<T: Real>(model: &UnifiedToyModel<T>, dataset: &Dataset, cfg: &TrainConfig, draws: usize, seed: u64) -> Result<LossPoint> {
    dataset.spec.check_model(&model.config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = LossPoint {
        step: draws,
        total: 0.0,
        und: 0.0,
        gen: 0.0,
    };
    for _ in 0..draws {
        let batch = draw_batch(model, dataset, cfg, &mut rng);
        let tape = Tape::inference();
        let losses = batch_loss(model, &tape, dataset, &batch, cfg)?;
        let read = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().as_f64());
        acc.total += read(Some(losses.total));
        acc.und += read(losses.und);
        acc.gen += read(losses.gen);
    }
    let n = draws.max(1) as f64;
    acc.total /= n;
    acc.und /= n;
    acc.gen /= n;
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub und_accuracy: f64,
    pub und_perplexity: f64,
    pub gen_velocity_mse: f64,
    pub gen_fidelity: f64,
    /// Parameters touched by one generation request (conditioning pass plus
    /// generation stack), counting all always-on tensors.
    pub activated_params: usize,
    /// Understanding-stack parameters touched by one understanding pass.
    pub activated_params_und: usize,
    pub total_params: usize,
    /// Mean per-token activated fraction of the sparse MoE layers.
    pub moe_activated_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub seed: u64,
    pub max_und: Option<usize>,
    pub max_gen: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 12_345,
            max_und: None,
            max_gen: None,
        }
    }
}

/// Analytic activated-parameter counts `(generation request, understanding pass)`.
pub fn activated_params<T: Real>(model: &UnifiedToyModel<T>) -> (usize, usize) {
    let mut gen_inactive = 0;
    let mut und_inactive = 0;
    for component in [Component::Und, Component::Gen] {
        for block in model.blocks(component) {
            let Some(moe) = block.moe() else {
                continue;
            };
            let p = &moe.spec.partition;
            let idle = (moe.width() - (p.n_shared + moe.spec.k) * p.expert_size) * 3 * moe.gate.cols();
            if moe.spec.mode != MoeMode::DenseEquivalent {
                gen_inactive += idle;
            }
            if component == Component::Und && moe.spec.mode == MoeMode::Sparse {
                und_inactive += idle;
            }
        }
    }
    (
        model.param_count() - gen_inactive,
        model.component_param_count(Component::Und) - und_inactive,
    )
}

pub fn evaluate<T: Real>(model: &UnifiedToyModel<T>, dataset: &Dataset) -> Result<EvalResult> {
    evaluate_with(model, dataset, &EvalConfig::default())
}

pub fn evaluate_with<T: Real>(model: &UnifiedToyModel<T>, dataset: &Dataset, cfg: &EvalConfig) -> Result<EvalResult> {
    dataset.spec.check_model(&model.config)?;
    let und = &dataset.und_heldout[..cfg.max_und.unwrap_or(usize::MAX).min(dataset.und_heldout.len())];
    let gen = &dataset.gen_heldout[..cfg.max_gen.unwrap_or(usize::MAX).min(dataset.gen_heldout.len())];

    let (mut hits, mut count, mut nll) = (0usize, 0usize, 0.0f64);
    for s in und {
        let (logits, _) = model.und_logits(&s.tokens)?;
        for (i, target) in und_targets(&s.tokens).into_iter().enumerate() {
            let Some(target) = target else { continue };
            let row: Vec<f64> = logits.row(i).iter().map(|v| v.as_f64()).collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            nll += lse - row[target];
            let argmax = crate::moe::rank_descending(&row)[0];
            hits += usize::from(argmax == target);
            count += 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut mse, mut faithful) = (0.0f64, 0usize);
    for (i, s) in gen.iter().enumerate() {
        let target = dataset.pattern::<T>(s.class);
        let features = model.conditioning(&s.prompt)?;
        let noise = model.initial_noise(rng.random());
        let t: f64 = rng.random();
        let tt = T::from_f64_lossy(t);
        let mut x_t = noise.clone();
        let mut v = noise.clone();
        for ((x, vel), &p) in x_t.data_mut().iter_mut().zip(v.data_mut()).zip(target.data()) {
            let n = *x;
            *x = (T::one() - tt) * n + tt * p;
            *vel = p - n;
        }
        let pred = model.velocity(&features, &x_t, t)?;
        mse += pred
            .data()
            .iter()
            .zip(v.data())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum::<f64>()
            / pred.numel() as f64;
        let sample = model.integrate(&features, model.initial_noise(cfg.seed ^ (i as u64 + 1)), &mut NoProbe)?;
        faithful += usize::from(dataset.nearest_class(&sample) == s.class);
    }

    let fractions: Vec<f64> = [Component::Und, Component::Gen]
        .iter()
        .flat_map(|&c| model.blocks(c).iter().filter_map(|b| b.moe()))
        .filter(|m| m.spec.mode != MoeMode::DenseEquivalent)
        .map(|m| m.activated_fraction())
        .collect();
    let (activated, activated_und) = activated_params(model);
    let ratio = |a: f64, b: usize| if b == 0 { f64::NAN } else { a / b as f64 };
    Ok(EvalResult {
        und_accuracy: ratio(hits as f64, count),
        und_perplexity: ratio(nll, count).exp(),
        gen_velocity_mse: ratio(mse, gen.len()),
        gen_fidelity: ratio(faithful as f64, gen.len()),
        activated_params: activated,
        activated_params_und: activated_und,
        total_params: model.param_count(),
        moe_activated_fraction: (!fractions.is_empty()).then(|| fractions.iter().sum::<f64>() / fractions.len() as f64),
    })
}

#[cfg(test)]
mod tests;
