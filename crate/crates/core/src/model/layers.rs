use rand::Rng;

use super::config::{Component, Granularity, PassKind};
use crate::error::Result;
use crate::moe::MoeLayer;
use crate::numerics::{Real, Tape, Tensor, Var};

pub const NORM_EPS: f64 = 1e-6;

/// Location of a layer inside the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Site {
    pub component: Component,
    pub layer: usize,
}

/// Observer for forward passes. Every hook receives finished values and
/// cannot influence the computation.
pub trait Probe<T: Real> {
    /// Input and output of a residual branch (including the skip path).
    fn residual(&mut self, _site: Site, _granularity: Granularity, _input: &Tensor<T>, _output: &Tensor<T>) {}

    /// Whether [`Probe::mlp_hidden`] should be fed; building MoE hidden
    /// activations in dense order costs an extra copy.
    fn wants_hidden(&self) -> bool {
        false
    }

    /// MLP hidden activations `h` (`[tokens × dm]`, original neuron order).
    fn mlp_hidden(&mut self, _site: Site, _hidden: &Tensor<T>) {}

    /// Concatenated self-attention head outputs before the output projection.
    fn heads(&mut self, _site: Site, _concat: &Tensor<T>, _n_heads: usize) {}
}

/// A probe that records nothing.
pub struct NoProbe;

impl<T: Real> Probe<T> for NoProbe {}

/// Per-forward state threaded through the blocks.
pub struct Ctx<'p, T: Real> {
    pub pass: PassKind,
    pub probe: &'p mut dyn Probe<T>,
    /// When set, MoE layers push their load-balancing term here.
    pub balance: Option<Vec<Var>>,
}

impl<'p, T: Real> Ctx<'p, T> {
    pub fn new(pass: PassKind, probe: &'p mut dyn Probe<T>) -> Self {
        Self {
            pass,
            probe,
            balance: None,
        }
    }
}

pub(crate) fn init_matrix<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Tensor<T> {
    Tensor::randn(&[rows, cols], gain / (cols as f64).sqrt(), rng)
}

/// Gate-Up-Down MLP: `h = silu(x W_gᵀ) ⊙ (x W_uᵀ)`, `y = h W_dᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T: Real = f32> {
    /// `[dm × d]`
    pub gate: Tensor<T>,
    /// `[dm × d]`
    pub up: Tensor<T>,
    /// `[d × dm]`
    pub down: Tensor<T>,
}

impl<T: Real> Mlp<T> {
    pub fn new<R: Rng + ?Sized>(d: usize, dm: usize, out_gain: f64, rng: &mut R) -> Self {
        Self {
            gate: init_matrix(dm, d, 1.0, rng),
            up: init_matrix(dm, d, 1.0, rng),
            down: init_matrix(d, dm, out_gain, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.gate.rows()
    }

    /// Returns `(output, hidden)`.
    pub fn forward<'a>(&'a self, tape: &Tape<'a, T>, x: Var) -> Result<(Var, Var)> {
        let g = tape.linear(x, tape.param(&self.gate))?;
        let u = tape.linear(x, tape.param(&self.up))?;
        let h = tape.mul(tape.silu(g), u)?;
        let y = tape.linear(h, tape.param(&self.down))?;
        Ok((y, h))
    }

    /// Forward without a tape.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let (y, _) = self.forward(&tape, xv)?;
        Ok(tape.to_tensor(y))
    }

    /// Hidden activations `h` for `x` without a tape.
    pub fn hidden(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let (_, h) = self.forward(&tape, xv)?;
        Ok(tape.to_tensor(h))
    }

    pub fn param_count(&self) -> usize {
        self.gate.numel() + self.up.numel() + self.down.numel()
    }
}

/// Multi-head attention with per-layer head count (heads can be pruned).
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T: Real = f32> {
    /// `[heads·dh × d]`
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    /// `[d × heads·dh]`
    pub wo: Tensor<T>,
    pub n_heads: usize,
}

impl<T: Real> Attention<T> {
    pub fn new<R: Rng + ?Sized>(d: usize, n_heads: usize, out_gain: f64, rng: &mut R) -> Self {
        Self {
            wq: init_matrix(d, d, 1.0, rng),
            wk: init_matrix(d, d, 1.0, rng),
            wv: init_matrix(d, d, 1.0, rng),
            wo: init_matrix(d, d, out_gain, rng),
            n_heads,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.wq.rows() / self.n_heads
    }

    /// Returns `(output, concatenated head outputs)`. Keys and values come
    /// from `context` when given (cross-attention), otherwise from `x`.
    pub fn forward<'a>(&'a self, tape: &Tape<'a, T>, x: Var, context: Option<Var>, causal: bool) -> Result<(Var, Var)> {
        let kv = context.unwrap_or(x);
        let q = tape.linear(x, tape.param(&self.wq))?;
        let k = tape.linear(kv, tape.param(&self.wk))?;
        let v = tape.linear(kv, tape.param(&self.wv))?;
        let heads = tape.attention(q, k, v, self.n_heads, causal)?;
        let out = tape.linear(heads, tape.param(&self.wo))?;
        Ok((out, heads))
    }

    pub fn param_count(&self) -> usize {
        self.wq.numel() + self.wk.numel() + self.wv.numel() + self.wo.numel()
    }
}

/// Dense MLP or its Mixture-of-Experts replacement.
#[derive(Debug, Clone, PartialEq)]
pub enum FeedForward<T: Real = f32> {
    Dense(Mlp<T>),
    Moe(MoeLayer<T>),
}

impl<T: Real> FeedForward<T> {
    pub fn width(&self) -> usize {
        match self {
            FeedForward::Dense(m) => m.width(),
            FeedForward::Moe(m) => m.width(),
        }
    }

    pub fn as_dense(&self) -> Option<&Mlp<T>> {
        match self {
            FeedForward::Dense(m) => Some(m),
            FeedForward::Moe(_) => None,
        }
    }

    pub fn as_moe(&self) -> Option<&MoeLayer<T>> {
        match self {
            FeedForward::Moe(m) => Some(m),
            FeedForward::Dense(_) => None,
        }
    }

    fn forward<'a>(&'a self, tape: &Tape<'a, T>, x: Var, site: Site, ctx: &mut Ctx<'_, T>) -> Result<Var> {
        match self {
            FeedForward::Dense(mlp) => {
                let (y, h) = mlp.forward(tape, x)?;
                if ctx.probe.wants_hidden() {
                    ctx.probe.mlp_hidden(site, &tape.value(h));
                }
                Ok(y)
            }
            FeedForward::Moe(moe) => moe.forward_in(tape, x, site, ctx),
        }
    }
}

/// Pre-norm self- or cross-attention branch.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnSublayer<T: Real = f32> {
    pub norm: Tensor<T>,
    pub attn: Attention<T>,
}

/// Pre-norm MLP branch.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnSublayer<T: Real = f32> {
    pub norm: Tensor<T>,
    pub ffn: FeedForward<T>,
}

/// Transformer block. Any sublayer may have been removed by depth pruning;
/// generation blocks additionally carry cross-attention over the
/// understanding features.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T: Real = f32> {
    pub attn: Option<AttnSublayer<T>>,
    pub cross: Option<AttnSublayer<T>>,
    pub ffn: Option<FfnSublayer<T>>,
}

impl<T: Real> Block<T> {
    pub fn new<R: Rng + ?Sized>(d: usize, dm: usize, heads: usize, cross: bool, out_gain: f64, rng: &mut R) -> Self {
        let norm = || Tensor::full(&[d], T::one());
        let attn = Some(AttnSublayer {
            norm: norm(),
            attn: Attention::new(d, heads, out_gain, rng),
        });
        let cross = cross.then(|| AttnSublayer {
            norm: norm(),
            attn: Attention::new(d, heads, out_gain, rng),
        });
        let ffn = Some(FfnSublayer {
            norm: norm(),
            ffn: FeedForward::Dense(Mlp::new(d, dm, out_gain, rng)),
        });
        Self { attn, cross, ffn }
    }

    pub fn dense_mlp(&self) -> Option<&Mlp<T>> {
        self.ffn.as_ref().and_then(|f| f.ffn.as_dense())
    }

    pub fn moe(&self) -> Option<&MoeLayer<T>> {
        self.ffn.as_ref().and_then(|f| f.ffn.as_moe())
    }

    pub(crate) fn forward<'a>(
        &'a self,
        tape: &Tape<'a, T>,
        x: Var,
        context: Option<Var>,
        causal: bool,
        site: Site,
        ctx: &mut Ctx<'_, T>,
    ) -> Result<Var> {
        let block_in = x;
        let mut x = x;
        if let Some(sub) = &self.attn {
            let n = tape.rms_norm(x, tape.param(&sub.norm), NORM_EPS)?;
            let (a, heads) = sub.attn.forward(tape, n, None, causal)?;
            let y = tape.add(x, a)?;
            ctx.probe.heads(site, &tape.value(heads), sub.attn.n_heads);
            ctx.probe.residual(site, Granularity::Attn, &tape.value(x), &tape.value(y));
            x = y;
        }
        if let (Some(sub), Some(c)) = (&self.cross, context) {
            let n = tape.rms_norm(x, tape.param(&sub.norm), NORM_EPS)?;
            let (a, _) = sub.attn.forward(tape, n, Some(c), false)?;
            x = tape.add(x, a)?;
        }
        if let Some(sub) = &self.ffn {
            let n = tape.rms_norm(x, tape.param(&sub.norm), NORM_EPS)?;
            let m = sub.ffn.forward(tape, n, site, ctx)?;
            let y = tape.add(x, m)?;
            ctx.probe.residual(site, Granularity::Mlp, &tape.value(x), &tape.value(y));
            x = y;
        }
        if !self.is_empty() {
            ctx.probe.residual(site, Granularity::Block, &tape.value(block_in), &tape.value(x));
        }
        Ok(x)
    }

    /// True once depth pruning has removed every sublayer.
    pub fn is_empty(&self) -> bool {
        self.attn.is_none() && self.cross.is_none() && self.ffn.is_none()
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        if let Some(s) = &self.attn {
            visit_attn(&format!("{prefix}.attn"), s, f);
        }
        if let Some(s) = &self.cross {
            visit_attn(&format!("{prefix}.cross"), s, f);
        }
        if let Some(s) = &self.ffn {
            f(format!("{prefix}.ffn.norm"), &s.norm);
            match &s.ffn {
                FeedForward::Dense(m) => {
                    f(format!("{prefix}.ffn.gate"), &m.gate);
                    f(format!("{prefix}.ffn.up"), &m.up);
                    f(format!("{prefix}.ffn.down"), &m.down);
                }
                FeedForward::Moe(m) => {
                    f(format!("{prefix}.moe.experts.gate"), &m.gate);
                    f(format!("{prefix}.moe.experts.up"), &m.up);
                    f(format!("{prefix}.moe.experts.down"), &m.down);
                    f(format!("{prefix}.moe.router.weight"), &m.router_weight);
                    f(format!("{prefix}.moe.router.bias"), &m.router_bias);
                }
            }
        }
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        if let Some(s) = &mut self.attn {
            visit_attn_mut(&format!("{prefix}.attn"), s, f);
        }
        if let Some(s) = &mut self.cross {
            visit_attn_mut(&format!("{prefix}.cross"), s, f);
        }
        if let Some(s) = &mut self.ffn {
            f(format!("{prefix}.ffn.norm"), &mut s.norm);
            match &mut s.ffn {
                FeedForward::Dense(m) => {
                    f(format!("{prefix}.ffn.gate"), &mut m.gate);
                    f(format!("{prefix}.ffn.up"), &mut m.up);
                    f(format!("{prefix}.ffn.down"), &mut m.down);
                }
                FeedForward::Moe(m) => {
                    f(format!("{prefix}.moe.experts.gate"), &mut m.gate);
                    f(format!("{prefix}.moe.experts.up"), &mut m.up);
                    f(format!("{prefix}.moe.experts.down"), &mut m.down);
                    f(format!("{prefix}.moe.router.weight"), &mut m.router_weight);
                    f(format!("{prefix}.moe.router.bias"), &mut m.router_bias);
                }
            }
        }
    }
}

fn visit_attn<'a, T: Real>(prefix: &str, s: &'a AttnSublayer<T>, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
    f(format!("{prefix}.norm"), &s.norm);
    f(format!("{prefix}.wq"), &s.attn.wq);
    f(format!("{prefix}.wk"), &s.attn.wk);
    f(format!("{prefix}.wv"), &s.attn.wv);
    f(format!("{prefix}.wo"), &s.attn.wo);
}

fn visit_attn_mut<T: Real>(prefix: &str, s: &mut AttnSublayer<T>, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
    f(format!("{prefix}.norm"), &mut s.norm);
    f(format!("{prefix}.wq"), &mut s.attn.wq);
    f(format!("{prefix}.wk"), &mut s.attn.wk);
    f(format!("{prefix}.wv"), &mut s.attn.wv);
    f(format!("{prefix}.wo"), &mut s.attn.wo);
}
