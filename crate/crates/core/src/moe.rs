//! Dense-to-MoE conversion.
//!
//! A dense MLP's hidden neurons are split into one shared group (always on)
//! and equally sized routed experts. The converted layer computes
//! `f_S(x) + Σ_{j ∈ top-k(r)} (1 + r_j) · f_Rj(x)` with `r = Router(x)`, a
//! linear map whose weight and bias start at zero, so with every expert
//! selected it reproduces the dense layer.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::importance::ImportanceReport;
use crate::model::{Component, Ctx, Mlp, PassKind, Probe, Site, UnifiedToyModel};
use crate::numerics::{Real, Tape, Tensor, Var};

/// Assignment of a layer's neurons to shared and routed experts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertPartition {
    pub component: Component,
    pub layer: usize,
    pub total_experts: usize,
    pub n_shared: usize,
    pub expert_size: usize,
    /// Neuron indices (dense numbering) of the shared expert group.
    pub shared: Vec<usize>,
    /// One neuron list per routed expert.
    pub routed: Vec<Vec<usize>>,
    /// Id of the importance report the partition was derived from.
    pub source: String,
}

impl ExpertPartition {
    pub fn n_routed(&self) -> usize {
        self.routed.len()
    }

    pub fn width(&self) -> usize {
        self.shared.len() + self.routed.iter().map(Vec::len).sum::<usize>()
    }

    /// Packed column order: shared neurons first, then each routed expert.
    pub fn order(&self) -> Vec<usize> {
        self.shared
            .iter()
            .chain(self.routed.iter().flatten())
            .copied()
            .collect()
    }

    /// Disjoint cover of `0..width` with the declared group sizes.
    pub fn validate(&self) -> Result<()> {
        let width = self.width();
        if self.shared.len() != self.n_shared * self.expert_size {
            return Err(contract("shared group size does not match n_shared·expert_size"));
        }
        if self.routed.iter().any(|e| e.len() != self.expert_size) {
            return Err(contract("routed expert with wrong size"));
        }
        if self.n_shared + self.routed.len() != self.total_experts {
            return Err(contract("expert counts do not add up"));
        }
        let seen: BTreeSet<usize> = self.order().into_iter().collect();
        if seen.len() != width || seen.iter().next_back().is_some_and(|&m| m >= width) {
            return Err(contract("expert groups are not a disjoint cover of the neurons"));
        }
        Ok(())
    }
}

/// Splits a layer's neurons into experts.
///
/// The `n_shared · expert_size` best-scoring neurons form the shared group
/// (`n_shared = E / 16`). The rest are taken in descending score order and
/// dealt to the routed experts `1..n`, then `n..1`, and so on, which keeps
/// the experts' summed importance close together. Ties go to the lower
/// neuron index.
pub fn partition_experts(report: &ImportanceReport, total_experts: usize) -> Result<ExpertPartition> {
    let dm = report.scores.len();
    if total_experts == 0 || dm % total_experts != 0 {
        return Err(config(format!(
            "{dm} neurons cannot be split into {total_experts} equal experts"
        )));
    }
    if ![16, 32, 64].contains(&total_experts) {
        log::warn!("unusual expert count {total_experts}; shared experts are E/16");
    }
    let n_shared = total_experts / 16;
    let n_routed = total_experts - n_shared;
    let expert_size = dm / total_experts;
    if n_routed == 0 {
        return Err(config("no routed experts left"));
    }
    let ranked = rank_descending(&report.scores);
    let (shared, rest) = ranked.split_at(n_shared * expert_size);
    let mut routed = vec![Vec::with_capacity(expert_size); n_routed];
    for (pos, &neuron) in rest.iter().enumerate() {
        let lap = pos / n_routed;
        let slot = pos % n_routed;
        let expert = if lap % 2 == 0 { slot } else { n_routed - 1 - slot };
        routed[expert].push(neuron);
    }
    let mut shared = shared.to_vec();
    shared.sort_unstable();
    let partition = ExpertPartition {
        component: report.component,
        layer: report.layer,
        total_experts,
        n_shared,
        expert_size,
        shared,
        routed,
        source: report.id(),
    };
    partition.validate()?;
    Ok(partition)
}

/// Indices ordered by descending score, ties by ascending index.
pub(crate) fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// How a converted layer routes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MoeMode {
    /// Shared expert plus the top-k routed experts, gated by `1 + r_j`.
    Sparse,
    /// All experts with unit gates; identical to the dense layer.
    DenseEquivalent,
    /// Dense-equivalent for understanding passes, sparse when producing
    /// generation conditioning.
    DenseForUnderstanding,
}

/// Which components are converted and adapted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptTarget {
    /// Only the generation stack.
    Gen,
    /// Both stacks; understanding experts stay frozen and fully active for
    /// understanding.
    UndGen,
}

impl AdaptTarget {
    pub fn components(self) -> &'static [Component] {
        match self {
            AdaptTarget::Gen => &[Component::Gen],
            AdaptTarget::UndGen => &[Component::Und, Component::Gen],
        }
    }
}

impl std::str::FromStr for AdaptTarget {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gen" => Ok(AdaptTarget::Gen),
            "und-gen" => Ok(AdaptTarget::UndGen),
            other => Err(crate::error::input(format!("unknown adapt target {other:?}"))),
        }
    }
}

/// Structure of a converted layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeSpec {
    pub partition: ExpertPartition,
    /// Routed experts activated per token.
    pub k: usize,
    pub mode: MoeMode,
}

/// Converted MLP. Expert weights are stored packed in
/// [`ExpertPartition::order`] so that each expert is a contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer<T: Real = f32> {
    pub spec: MoeSpec,
    /// `[dm × d]`, packed rows.
    pub gate: Tensor<T>,
    /// `[dm × d]`, packed rows.
    pub up: Tensor<T>,
    /// `[d × dm]`, packed columns.
    pub down: Tensor<T>,
    /// `[n_routed × d]`
    pub router_weight: Tensor<T>,
    /// `[n_routed]`
    pub router_bias: Tensor<T>,
}

/// One expert of a converted layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expert {
    Shared,
    Routed(usize),
}

impl<T: Real> MoeLayer<T> {
    /// Copies the dense weights into expert slices and attaches a
    /// zero-initialised router.
    pub fn from_dense(mlp: &Mlp<T>, partition: ExpertPartition, k: usize, mode: MoeMode) -> Result<Self> {
        partition.validate()?;
        if partition.width() != mlp.width() {
            return Err(contract(format!(
                "partition covers {} neurons, layer has {}",
                partition.width(),
                mlp.width()
            )));
        }
        if k == 0 || k > partition.n_routed() {
            return Err(config(format!("k = {k} outside 1..={}", partition.n_routed())));
        }
        let order = partition.order();
        let nr = partition.n_routed();
        let d = mlp.gate.cols();
        Ok(Self {
            gate: mlp.gate.select_rows(&order),
            up: mlp.up.select_rows(&order),
            down: mlp.down.select_cols(&order),
            router_weight: Tensor::zeros(&[nr, d]),
            router_bias: Tensor::zeros(&[nr]),
            spec: MoeSpec { partition, k, mode },
        })
    }

    pub(crate) fn zeros(spec: MoeSpec, d: usize) -> Result<Self> {
        spec.partition.validate()?;
        let (dm, nr) = (spec.partition.width(), spec.partition.n_routed());
        Ok(Self {
            gate: Tensor::zeros(&[dm, d]),
            up: Tensor::zeros(&[dm, d]),
            down: Tensor::zeros(&[d, dm]),
            router_weight: Tensor::zeros(&[nr, d]),
            router_bias: Tensor::zeros(&[nr]),
            spec,
        })
    }

    pub fn partition(&self) -> &ExpertPartition {
        &self.spec.partition
    }

    pub fn width(&self) -> usize {
        self.gate.rows()
    }

    pub fn n_routed(&self) -> usize {
        self.spec.partition.n_routed()
    }

    fn shared_cols(&self) -> usize {
        self.spec.partition.shared.len()
    }

    /// Fraction of expert neurons active per token in sparse mode.
    pub fn activated_fraction(&self) -> f64 {
        let p = &self.spec.partition;
        ((p.n_shared + self.spec.k) * p.expert_size) as f64 / self.width() as f64
    }

    /// Parameters touched per token in sparse mode (experts plus router).
    pub fn activated_params(&self, sparse: bool) -> usize {
        let d = self.gate.cols();
        let router = self.router_weight.numel() + self.router_bias.numel();
        let p = &self.spec.partition;
        let neurons = if sparse {
            (p.n_shared + self.spec.k) * p.expert_size
        } else {
            self.width()
        };
        neurons * 3 * d + if sparse { router } else { 0 }
    }

    /// Rebuilds the dense MLP by undoing the packing.
    pub fn to_dense(&self) -> Mlp<T> {
        let order = self.spec.partition.order();
        let mut inverse = vec![0; order.len()];
        for (packed, &orig) in order.iter().enumerate() {
            inverse[orig] = packed;
        }
        Mlp {
            gate: self.gate.select_rows(&inverse),
            up: self.up.select_rows(&inverse),
            down: self.down.select_cols(&inverse),
        }
    }

    /// Stand-alone MLP for a single expert.
    pub fn expert_mlp(&self, expert: Expert) -> Mlp<T> {
        let size = self.spec.partition.expert_size;
        let range: Vec<usize> = match expert {
            Expert::Shared => (0..self.shared_cols()).collect(),
            Expert::Routed(j) => {
                let lo = self.shared_cols() + j * size;
                (lo..lo + size).collect()
            }
        };
        Mlp {
            gate: self.gate.select_rows(&range),
            up: self.up.select_rows(&range),
            down: self.down.select_cols(&range),
        }
    }

    /// Routed experts chosen for one token: the `k` largest router scores,
    /// ties to the lower expert index.
    pub fn select(&self, scores: &[T]) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        idx.truncate(self.spec.k);
        idx
    }

    fn dense_for(&self, pass: PassKind) -> bool {
        match self.spec.mode {
            MoeMode::Sparse => false,
            MoeMode::DenseEquivalent => true,
            MoeMode::DenseForUnderstanding => pass == PassKind::Understanding,
        }
    }

    /// Router scores `[tokens × n_routed]`.
    pub fn router<'a>(&'a self, tape: &Tape<'a, T>, x: Var) -> Result<Var> {
        let r = tape.linear(x, tape.param(&self.router_weight))?;
        tape.add_row(r, tape.param(&self.router_bias))
    }

    pub(crate) fn forward_in<'a>(&'a self, tape: &Tape<'a, T>, x: Var, site: Site, ctx: &mut Ctx<'_, T>) -> Result<Var> {
        let g = tape.linear(x, tape.param(&self.gate))?;
        let u = tape.linear(x, tape.param(&self.up))?;
        let h = tape.mul(tape.silu(g), u)?;
        let gated = if self.dense_for(ctx.pass) {
            h
        } else {
            let r = self.router(tape, x)?;
            let (mask, counts) = {
                let rv = tape.value(r);
                let nr = self.n_routed();
                let mut mask = vec![false; rv.numel()];
                let mut counts = vec![0usize; nr];
                for t in 0..rv.rows() {
                    for j in self.select(rv.row(t)) {
                        mask[t * nr + j] = true;
                        counts[j] += 1;
                    }
                }
                (mask, counts)
            };
            if let Some(terms) = ctx.balance.as_mut() {
                terms.push(self.balance_term(tape, r, &counts)?);
            }
            let m = tape.gate_expand(r, &mask, self.shared_cols(), self.spec.partition.expert_size)?;
            tape.mul(h, m)?
        };
        if ctx.probe.wants_hidden() {
            let packed = tape.value(gated);
            let order = self.spec.partition.order();
            let mut dense = Tensor::zeros(packed.shape());
            for t in 0..packed.rows() {
                let src = packed.row(t);
                let dst = dense.row_mut(t);
                for (c, &orig) in order.iter().enumerate() {
                    dst[orig] = src[c];
                }
            }
            ctx.probe.mlp_hidden(site, &dense);
        }
        tape.linear(gated, tape.param(&self.down))
    }

    /// Switch-style balance term `n · Σ_j f_j · P_j`, where `f_j` is the
    /// share of routing slots given to expert `j` and `P_j` its mean softmax
    /// router probability.
    fn balance_term<'a>(&'a self, tape: &Tape<'a, T>, r: Var, counts: &[usize]) -> Result<Var> {
        let shape = tape.shape(r);
        let (tokens, nr) = (shape[0], shape[1]);
        let slots = (tokens * self.spec.k).max(1) as f64;
        let mut weights = Tensor::zeros(&[tokens, nr]);
        for t in 0..tokens {
            for (j, &c) in counts.iter().enumerate() {
                weights.row_mut(t)[j] = T::from_f64_lossy(nr as f64 * c as f64 / slots / tokens as f64);
            }
        }
        let p = tape.softmax(r);
        let w = tape.constant(weights);
        Ok(tape.sum(tape.mul(p, w)?))
    }

    /// Forward on a plain tensor (layer input after normalisation).
    pub fn apply(&self, x: &Tensor<T>, pass: PassKind) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let mut probe = crate::model::NoProbe;
        let mut ctx = Ctx::new(pass, &mut probe as &mut dyn Probe<T>);
        let site = Site {
            component: self.spec.partition.component,
            layer: self.spec.partition.layer,
        };
        let y = self.forward_in(&tape, xv, site, &mut ctx)?;
        Ok(tape.to_tensor(y))
    }

    pub fn cast<U: Real>(&self) -> MoeLayer<U> {
        MoeLayer {
            spec: self.spec.clone(),
            gate: self.gate.cast(),
            up: self.up.cast(),
            down: self.down.cast(),
            router_weight: self.router_weight.cast(),
            router_bias: self.router_bias.cast(),
        }
    }
}

/// Settings for [`convert`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvertConfig {
    pub experts: usize,
    /// Routed experts per token; by default chosen so that
    /// `(n_shared + k) / E == activation_ratio`.
    pub k: Option<usize>,
    pub activation_ratio: f64,
    /// Layers kept dense; defaults to the first and last of each component.
    pub excluded: Option<Vec<usize>>,
    pub target: AdaptTarget,
}

impl Default for ConvertConfig {
    fn default() -> Self {
        Self {
            experts: 16,
            k: None,
            activation_ratio: 0.5,
            excluded: None,
            target: AdaptTarget::Gen,
        }
    }
}

impl ConvertConfig {
    pub fn resolved_k(&self) -> Result<usize> {
        let n_shared = self.experts / 16;
        let n_routed = self.experts - n_shared;
        let k = match self.k {
            Some(k) => k,
            None => {
                let active = (self.activation_ratio * self.experts as f64).round() as usize;
                active.checked_sub(n_shared).ok_or_else(|| {
                    config(format!(
                        "activation ratio {} leaves no routed experts",
                        self.activation_ratio
                    ))
                })?
            }
        };
        if k == 0 || k > n_routed {
            return Err(config(format!("k = {k} outside 1..={n_routed}")));
        }
        Ok(k)
    }

    pub fn excluded_layers(&self, n_layers: usize) -> Vec<usize> {
        self.excluded
            .clone()
            .unwrap_or_else(|| vec![0, n_layers.saturating_sub(1)])
    }

    /// Layers of `component` that must be converted in a model with
    /// `n_layers` blocks.
    pub fn covered_layers(&self, n_layers: usize) -> Vec<usize> {
        let excluded = self.excluded_layers(n_layers);
        (0..n_layers).filter(|l| !excluded.contains(l)).collect()
    }
}

/// Replaces every covered dense MLP with an [`MoeLayer`].
pub fn convert<T: Real>(model: &mut UnifiedToyModel<T>, partitions: &[ExpertPartition], cfg: &ConvertConfig) -> Result<()> {
    let k = cfg.resolved_k()?;
    let targets = cfg.target.components();
    let mut plan = Vec::new();
    for &component in targets {
        let blocks = model.blocks(component);
        for layer in cfg.covered_layers(blocks.len()) {
            if blocks[layer].dense_mlp().is_none() {
                continue;
            }
            let part = partitions
                .iter()
                .find(|p| p.component == component && p.layer == layer)
                .ok_or_else(|| contract(format!("no expert partition for {component} layer {layer}")))?;
            if part.total_experts != cfg.experts {
                return Err(contract(format!(
                    "{component} layer {layer} partitioned into {} experts, config asks for {}",
                    part.total_experts, cfg.experts
                )));
            }
            plan.push(part.clone());
        }
    }
    for p in partitions {
        if !plan.contains(p) {
            return Err(contract(format!(
                "partition for {} layer {} is not a convertible layer",
                p.component, p.layer
            )));
        }
    }
    // Validate everything before mutating.
    let mut built = Vec::with_capacity(plan.len());
    for part in &plan {
        let mode = match (cfg.target, part.component) {
            (AdaptTarget::UndGen, Component::Und) => MoeMode::DenseForUnderstanding,
            _ => MoeMode::Sparse,
        };
        let mlp = model.blocks(part.component)[part.layer]
            .dense_mlp()
            .expect("checked dense above");
        built.push(MoeLayer::from_dense(mlp, part.clone(), k, mode)?);
    }
    for layer in built {
        let (component, idx) = (layer.spec.partition.component, layer.spec.partition.layer);
        let block = &mut model.blocks_mut(component)[idx];
        let sub = block.ffn.as_mut().expect("dense MLP present");
        sub.ffn = crate::model::FeedForward::Moe(layer);
    }
    model.meta.partitions.extend(plan);
    model.meta.adapt_target = Some(cfg.target);
    Ok(())
}

#[cfg(test)]
mod tests;
