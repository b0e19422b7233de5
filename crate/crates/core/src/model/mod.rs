//! The toy unified model: a causal understanding transformer that predicts
//! tokens and emits conditioning features, and a generation transformer
//! that predicts flow-matching velocities under cross-attention to those
//! features.

mod config;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{Component, Granularity, ModelConfig, PassKind};
pub use layers::{Attention, AttnSublayer, Block, Ctx, FeedForward, FfnSublayer, Mlp, NoProbe, Probe, Site};
pub use layers::NORM_EPS;

use crate::error::{contract, input, Error, Result};
use crate::moe::{AdaptTarget, ExpertPartition};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::surgery::PruningPlan;
use crate::train::Stage;

/// Sinusoid pairs feeding the timestep embedding.
pub const TIME_FREQUENCIES: usize = 8;

/// Non-tensor state carried with a model through the pipeline.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub plans: Vec<PruningPlan>,
    pub partitions: Vec<ExpertPartition>,
    pub stages: Vec<Stage>,
    pub adapt_target: Option<AdaptTarget>,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UndStack<T: Real = f32> {
    /// `[V × d]`
    pub embed: Tensor<T>,
    /// `[max_seq_len × d]`
    pub pos: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub norm: Tensor<T>,
    /// `[V × d]`
    pub head: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenStack<T: Real = f32> {
    /// `[d × gen_output_dim]`
    pub input: Tensor<T>,
    /// `[gen_len × d]`
    pub pos: Tensor<T>,
    /// `[d × 2·TIME_FREQUENCIES]`
    pub time: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub norm: Tensor<T>,
    /// `[gen_output_dim × d]`, zero at initialisation.
    pub output: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedToyModel<T: Real = f32> {
    pub config: ModelConfig,
    pub und: UndStack<T>,
    pub gen: GenStack<T>,
    pub meta: ModelMeta,
}

/// Handles produced by an understanding forward pass.
#[derive(Debug, Clone, Copy)]
pub struct UndOutput {
    /// `[T × V]`
    pub logits: Var,
    /// Final normalised hidden states `[T × d]`, the generation conditioning.
    pub features: Var,
}

pub fn time_features<T: Real>(t: f64) -> Tensor<T> {
    let mut data = Vec::with_capacity(2 * TIME_FREQUENCIES);
    for i in 0..TIME_FREQUENCIES {
        let w = std::f64::consts::PI * (1u64 << i) as f64;
        data.push(T::from_f64_lossy((w * t).sin()));
        data.push(T::from_f64_lossy((w * t).cos()));
    }
    Tensor::from_vec(&[1, 2 * TIME_FREQUENCIES], data).expect("time feature shape")
}

impl<T: Real> UnifiedToyModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, dm, h) = (config.d_model, config.hidden(), config.n_heads);
        let und_gain = 1.0 / (2.0 * config.n_layers_und as f64).sqrt();
        let gen_gain = 1.0 / (2.0 * config.n_layers_gen as f64).sqrt();
        let und = UndStack {
            embed: Tensor::randn(&[config.vocab_size, d], 1.0, &mut rng),
            pos: Tensor::randn(&[config.max_seq_len, d], 1.0, &mut rng),
            blocks: (0..config.n_layers_und)
                .map(|_| Block::new(d, dm, h, false, und_gain, &mut rng))
                .collect(),
            norm: Tensor::full(&[d], T::one()),
            head: layers::init_matrix(config.vocab_size, d, 1.0, &mut rng),
        };
        let gen = GenStack {
            input: layers::init_matrix(d, config.gen_output_dim, 1.0, &mut rng),
            pos: Tensor::randn(&[config.gen_len, d], 1.0, &mut rng),
            time: layers::init_matrix(d, 2 * TIME_FREQUENCIES, 1.0, &mut rng),
            blocks: (0..config.n_layers_gen)
                .map(|_| Block::new(d, dm, h, true, gen_gain, &mut rng))
                .collect(),
            norm: Tensor::full(&[d], T::one()),
            output: Tensor::zeros(&[config.gen_output_dim, d]),
        };
        Ok(Self {
            meta: ModelMeta {
                seed: config.seed,
                ..Default::default()
            },
            config,
            und,
            gen,
        })
    }

    pub fn blocks(&self, component: Component) -> &[Block<T>] {
        match component {
            Component::Und => &self.und.blocks,
            Component::Gen => &self.gen.blocks,
        }
    }

    pub fn blocks_mut(&mut self, component: Component) -> &mut Vec<Block<T>> {
        match component {
            Component::Und => &mut self.und.blocks,
            Component::Gen => &mut self.gen.blocks,
        }
    }

    pub fn forward_und<'a>(&'a self, tape: &Tape<'a, T>, tokens: &[usize], ctx: &mut Ctx<'_, T>) -> Result<UndOutput> {
        let cfg = &self.config;
        if tokens.is_empty() || tokens.len() > cfg.max_seq_len {
            return Err(input(format!(
                "sequence length {} outside 1..={}",
                tokens.len(),
                cfg.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(input(format!("token {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let tok = tape.embed(tape.param(&self.und.embed), tokens)?;
        let pos = tape.embed(tape.param(&self.und.pos), &positions)?;
        let mut x = tape.add(tok, pos)?;
        for (layer, block) in self.und.blocks.iter().enumerate() {
            let site = Site {
                component: Component::Und,
                layer,
            };
            x = block.forward(tape, x, None, true, site, ctx)?;
        }
        let features = tape.rms_norm(x, tape.param(&self.und.norm), NORM_EPS)?;
        let logits = tape.linear(features, tape.param(&self.und.head))?;
        Ok(UndOutput { logits, features })
    }

    pub fn forward_gen<'a>(
        &'a self,
        tape: &Tape<'a, T>,
        features: Var,
        x_t: Var,
        t: f64,
        ctx: &mut Ctx<'_, T>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let fshape = tape.shape(features);
        if fshape.len() != 2 || fshape[1] != cfg.d_model {
            return Err(Error::Shape {
                op: "forward_gen features",
                lhs: fshape,
                rhs: vec![cfg.d_model],
            });
        }
        let xshape = tape.shape(x_t);
        if xshape.len() != 2 || xshape[1] != cfg.gen_output_dim || xshape[0] > cfg.gen_len || xshape[0] == 0 {
            return Err(Error::Shape {
                op: "forward_gen x_t",
                lhs: xshape,
                rhs: vec![cfg.gen_len, cfg.gen_output_dim],
            });
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(input(format!("timestep {t} outside [0, 1]")));
        }
        let positions: Vec<usize> = (0..xshape[0]).collect();
        let h = tape.linear(x_t, tape.param(&self.gen.input))?;
        let pos = tape.embed(tape.param(&self.gen.pos), &positions)?;
        let h = tape.add(h, pos)?;
        let tf = tape.constant(time_features(t));
        let temb = tape.linear(tf, tape.param(&self.gen.time))?;
        let mut x = tape.add_row(h, temb)?;
        for (layer, block) in self.gen.blocks.iter().enumerate() {
            let site = Site {
                component: Component::Gen,
                layer,
            };
            x = block.forward(tape, x, Some(features), false, site, ctx)?;
        }
        let n = tape.rms_norm(x, tape.param(&self.gen.norm), NORM_EPS)?;
        tape.linear(n, tape.param(&self.gen.output))
    }

    /// Logits and features of an understanding pass, no tape retained.
    pub fn und_logits(&self, tokens: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        let tape = Tape::inference();
        let mut probe = NoProbe;
        let out = self.forward_und(&tape, tokens, &mut Ctx::new(PassKind::Understanding, &mut probe))?;
        Ok((tape.to_tensor(out.logits), tape.to_tensor(out.features)))
    }

    /// Conditioning features for a generation prompt.
    pub fn conditioning(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let mut probe = NoProbe;
        let out = self.forward_und(&tape, tokens, &mut Ctx::new(PassKind::Conditioning, &mut probe))?;
        Ok(tape.to_tensor(out.features))
    }

    pub fn velocity(&self, features: &Tensor<T>, x_t: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
        self.velocity_probed(features, x_t, t, &mut NoProbe)
    }

    pub fn velocity_probed(&self, features: &Tensor<T>, x_t: &Tensor<T>, t: f64, probe: &mut dyn Probe<T>) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let f = tape.constant(features.clone());
        let x = tape.constant(x_t.clone());
        let v = self.forward_gen(&tape, f, x, t, &mut Ctx::new(PassKind::Conditioning, probe))?;
        Ok(tape.to_tensor(v))
    }

    /// Seeded Gaussian starting point of the sampler.
    pub fn initial_noise(&self, noise_seed: u64) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        Tensor::randn(&[self.config.gen_len, self.config.gen_output_dim], 1.0, &mut rng)
    }

    /// Euler integration of the predicted velocity from `t = 0` (noise) to
    /// `t = 1` over `gen_steps` equal steps.
    pub fn sample_gen(&self, tokens: &[usize], noise_seed: u64) -> Result<Tensor<T>> {
        let features = self.conditioning(tokens)?;
        self.integrate(&features, self.initial_noise(noise_seed), &mut NoProbe)
    }

    pub fn integrate(&self, features: &Tensor<T>, mut x: Tensor<T>, probe: &mut dyn Probe<T>) -> Result<Tensor<T>> {
        let steps = self.config.gen_steps;
        let dt = T::from_f64_lossy(1.0 / steps as f64);
        for k in 0..steps {
            let t = k as f64 / steps as f64;
            let v = self.velocity_probed(features, &x, t, probe)?;
            for (xi, &vi) in x.data_mut().iter_mut().zip(v.data()) {
                *xi += dt * vi;
            }
        }
        Ok(x)
    }

    /// Visits every parameter tensor with a stable dotted name.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f("und.embed".into(), &self.und.embed);
        f("und.pos".into(), &self.und.pos);
        for (i, b) in self.und.blocks.iter().enumerate() {
            b.visit(&format!("und.blocks.{i}"), f);
        }
        f("und.norm".into(), &self.und.norm);
        f("und.head".into(), &self.und.head);
        f("gen.input".into(), &self.gen.input);
        f("gen.pos".into(), &self.gen.pos);
        f("gen.time".into(), &self.gen.time);
        for (i, b) in self.gen.blocks.iter().enumerate() {
            b.visit(&format!("gen.blocks.{i}"), f);
        }
        f("gen.norm".into(), &self.gen.norm);
        f("gen.output".into(), &self.gen.output);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f("und.embed".into(), &mut self.und.embed);
        f("und.pos".into(), &mut self.und.pos);
        for (i, b) in self.und.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("und.blocks.{i}"), f);
        }
        f("und.norm".into(), &mut self.und.norm);
        f("und.head".into(), &mut self.und.head);
        f("gen.input".into(), &mut self.gen.input);
        f("gen.pos".into(), &mut self.gen.pos);
        f("gen.time".into(), &mut self.gen.time);
        for (i, b) in self.gen.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("gen.blocks.{i}"), f);
        }
        f("gen.norm".into(), &mut self.gen.norm);
        f("gen.output".into(), &mut self.gen.output);
    }

    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t)));
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn component_param_count(&self, component: Component) -> usize {
        let prefix = format!("{}.", component.as_str());
        self.params()
            .iter()
            .filter(|(n, _)| n.starts_with(&prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn set_requires_grad(&mut self, mut pred: impl FnMut(&str) -> bool) {
        self.visit_mut(&mut |name, t| t.requires_grad = pred(&name));
    }

    pub fn clear_grads(&mut self) {
        self.visit_mut(&mut |_, t| t.grad = None);
    }

    /// Copies every tensor into another element type.
    pub fn cast<U: Real>(&self) -> UnifiedToyModel<U> {
        UnifiedToyModel {
            config: self.config.clone(),
            und: UndStack {
                embed: self.und.embed.cast(),
                pos: self.und.pos.cast(),
                blocks: self.und.blocks.iter().map(cast_block).collect(),
                norm: self.und.norm.cast(),
                head: self.und.head.cast(),
            },
            gen: GenStack {
                input: self.gen.input.cast(),
                pos: self.gen.pos.cast(),
                time: self.gen.time.cast(),
                blocks: self.gen.blocks.iter().map(cast_block).collect(),
                norm: self.gen.norm.cast(),
                output: self.gen.output.cast(),
            },
            meta: self.meta.clone(),
        }
    }

    /// Bitwise equality of all parameters and structure.
    pub fn bit_eq(&self, other: &UnifiedToyModel<T>) -> bool {
        let a = self.params();
        let b = other.params();
        a.len() == b.len()
            && a.iter()
                .zip(&b)
                .all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
            && self.layout() == other.layout()
    }

    /// Serializable structure of the model (everything except tensor data).
    pub fn layout(&self) -> ModelLayout {
        let blocks = |bs: &[Block<T>]| {
            bs.iter()
                .map(|b| BlockLayout {
                    attn_heads: b.attn.as_ref().map(|s| s.attn.n_heads),
                    cross_heads: b.cross.as_ref().map(|s| s.attn.n_heads),
                    ffn: b.ffn.as_ref().map(|s| match &s.ffn {
                        FeedForward::Dense(m) => FfnLayout::Dense { width: m.width() },
                        FeedForward::Moe(m) => FfnLayout::Moe(m.spec.clone()),
                    }),
                })
                .collect()
        };
        ModelLayout {
            und: blocks(&self.und.blocks),
            gen: blocks(&self.gen.blocks),
        }
    }

    /// Zero-filled model with the given structure, ready to be loaded.
    pub fn from_layout(config: ModelConfig, layout: &ModelLayout, meta: ModelMeta) -> Result<Self> {
        config.validate()?;
        let (d, dh) = (config.d_model, config.head_dim());
        let attn = |heads: usize| AttnSublayer {
            norm: Tensor::zeros(&[d]),
            attn: Attention {
                wq: Tensor::zeros(&[heads * dh, d]),
                wk: Tensor::zeros(&[heads * dh, d]),
                wv: Tensor::zeros(&[heads * dh, d]),
                wo: Tensor::zeros(&[d, heads * dh]),
                n_heads: heads,
            },
        };
        let build = |bl: &[BlockLayout]| -> Result<Vec<Block<T>>> {
            bl.iter()
                .map(|b| {
                    let ffn = match &b.ffn {
                        None => None,
                        Some(FfnLayout::Dense { width }) => Some(FfnSublayer {
                            norm: Tensor::zeros(&[d]),
                            ffn: FeedForward::Dense(Mlp {
                                gate: Tensor::zeros(&[*width, d]),
                                up: Tensor::zeros(&[*width, d]),
                                down: Tensor::zeros(&[d, *width]),
                            }),
                        }),
                        Some(FfnLayout::Moe(spec)) => Some(FfnSublayer {
                            norm: Tensor::zeros(&[d]),
                            ffn: FeedForward::Moe(crate::moe::MoeLayer::zeros(spec.clone(), d)?),
                        }),
                    };
                    Ok(Block {
                        attn: b.attn_heads.map(attn),
                        cross: b.cross_heads.map(attn),
                        ffn,
                    })
                })
                .collect()
        };
        let v = config.vocab_size;
        Ok(Self {
            und: UndStack {
                embed: Tensor::zeros(&[v, d]),
                pos: Tensor::zeros(&[config.max_seq_len, d]),
                blocks: build(&layout.und)?,
                norm: Tensor::zeros(&[d]),
                head: Tensor::zeros(&[v, d]),
            },
            gen: GenStack {
                input: Tensor::zeros(&[d, config.gen_output_dim]),
                pos: Tensor::zeros(&[config.gen_len, d]),
                time: Tensor::zeros(&[d, 2 * TIME_FREQUENCIES]),
                blocks: build(&layout.gen)?,
                norm: Tensor::zeros(&[d]),
                output: Tensor::zeros(&[config.gen_output_dim, d]),
            },
            config,
            meta,
        })
    }

    /// Copy-free check that a layer index exists.
    pub fn block(&self, site: Site) -> Result<&Block<T>> {
        self.blocks(site.component)
            .get(site.layer)
            .ok_or_else(|| contract(format!("no {} layer {}", site.component, site.layer)))
    }
}

fn cast_block<T: Real, U: Real>(b: &Block<T>) -> Block<U> {
    let attn = |s: &AttnSublayer<T>| AttnSublayer {
        norm: s.norm.cast(),
        attn: Attention {
            wq: s.attn.wq.cast(),
            wk: s.attn.wk.cast(),
            wv: s.attn.wv.cast(),
            wo: s.attn.wo.cast(),
            n_heads: s.attn.n_heads,
        },
    };
    Block {
        attn: b.attn.as_ref().map(attn),
        cross: b.cross.as_ref().map(attn),
        ffn: b.ffn.as_ref().map(|s| FfnSublayer {
            norm: s.norm.cast(),
            ffn: match &s.ffn {
                FeedForward::Dense(m) => FeedForward::Dense(Mlp {
                    gate: m.gate.cast(),
                    up: m.up.cast(),
                    down: m.down.cast(),
                }),
                FeedForward::Moe(m) => FeedForward::Moe(m.cast()),
            },
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelLayout {
    pub und: Vec<BlockLayout>,
    pub gen: Vec<BlockLayout>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub attn_heads: Option<usize>,
    pub cross_heads: Option<usize>,
    pub ffn: Option<FfnLayout>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FfnLayout {
    Dense { width: usize },
    Moe(crate::moe::MoeSpec),
}

#[cfg(test)]
mod tests;
