//! Training-free structural compression.
//!
//! Plans are declarative lists of removals. Applying a plan deletes whole
//! sublayers, MLP neurons (row `i` of `W_g`, `W_u` and column `i` of `W_d`)
//! or attention heads; every surviving weight is copied bit for bit.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{contract, input, Result};
use crate::importance::{ImportanceReport, LayerScore};
use crate::model::{Block, Component, FeedForward, Granularity, Mlp, Site, UnifiedToyModel};
use crate::moe::rank_descending;
use crate::numerics::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanKind {
    Depth,
    Width,
    Heads,
}

/// One deleted unit. Depth removals carry a granularity, width and head
/// removals the neuron or head index.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Removal {
    pub component: Component,
    pub layer: usize,
    pub kind: PlanKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub granularity: Option<Granularity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
}

impl Removal {
    fn site(&self) -> Site {
        Site {
            component: self.component,
            layer: self.layer,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub removals: Vec<Removal>,
}

impl PruningPlan {
    pub fn is_empty(&self) -> bool {
        self.removals.is_empty()
    }

    /// One JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.removals {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut removals = Vec::new();
        for line in input.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                removals.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { removals })
    }
}

/// Layers that plans never touch unless the caller says otherwise: the
/// first and last generation layers.
pub fn default_protected(n_layers_gen: usize) -> Vec<Site> {
    let mut out = vec![Site {
        component: Component::Gen,
        layer: 0,
    }];
    if n_layers_gen > 1 {
        out.push(Site {
            component: Component::Gen,
            layer: n_layers_gen - 1,
        });
    }
    out
}

/// Removes the `k` most redundant (highest `S_l`) layers. Ties go to the
/// lower index.
pub fn plan_depth(scores: &[LayerScore], k: usize) -> Result<PruningPlan> {
    if k >= scores.len() && k > 0 {
        return Err(input(format!("cannot remove {k} of {} layers", scores.len())));
    }
    let values: Vec<f64> = scores.iter().map(|s| s.score).collect();
    let mut removals: Vec<Removal> = rank_descending(&values)
        .into_iter()
        .take(k)
        .map(|i| Removal {
            component: scores[i].component,
            layer: scores[i].layer,
            kind: PlanKind::Depth,
            granularity: Some(scores[i].granularity),
            index: None,
        })
        .collect();
    removals.sort();
    Ok(PruningPlan { removals })
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(input(format!("ratio {ratio} outside [0, 1)")));
    }
    Ok(())
}

/// Indices of the `floor(ratio · n)` lowest-ranked entries, ascending.
fn lowest(scores: &[f64], ratio: f64) -> Vec<usize> {
    let n = (ratio * scores.len() as f64).floor() as usize;
    let ranked = rank_descending(scores);
    let mut out = ranked[scores.len() - n..].to_vec();
    out.sort_unstable();
    out
}

/// Marks the `floor(ratio · dm)` least important neurons of one layer.
pub fn plan_width(report: &ImportanceReport, ratio: f64) -> Result<PruningPlan> {
    check_ratio(ratio)?;
    Ok(PruningPlan {
        removals: lowest(&report.scores, ratio)
            .into_iter()
            .map(|i| Removal {
                component: report.component,
                layer: report.layer,
                kind: PlanKind::Width,
                granularity: None,
                index: Some(i),
            })
            .collect(),
    })
}

/// Marks the `floor(ratio · H)` least important heads of one layer.
pub fn plan_heads(report: &ImportanceReport, ratio: f64) -> Result<PruningPlan> {
    check_ratio(ratio)?;
    let scores = report
        .head_scores
        .as_ref()
        .ok_or_else(|| input(format!("report for {} has no head scores", report.id())))?;
    Ok(PruningPlan {
        removals: lowest(scores, ratio)
            .into_iter()
            .map(|i| Removal {
                component: report.component,
                layer: report.layer,
                kind: PlanKind::Heads,
                granularity: None,
                index: Some(i),
            })
            .collect(),
    })
}

/// Concatenates per-layer plans, skipping protected layers.
pub fn plan_layers(
    reports: &[ImportanceReport],
    ratio: f64,
    protected: &[Site],
    per_layer: impl Fn(&ImportanceReport, f64) -> Result<PruningPlan>,
) -> Result<PruningPlan> {
    let mut removals = Vec::new();
    for r in reports {
        if !protected.contains(&r.site()) {
            removals.extend(per_layer(r, ratio)?.removals);
        }
    }
    Ok(PruningPlan { removals })
}

/// Applies a plan. The whole plan is validated against the model before any
/// tensor is touched, so a rejected plan leaves the model unchanged.
///
/// Depth removals leave an empty block in place, which acts as the identity,
/// so that layer indices keep their meaning for later plans.
pub fn apply<T: Real>(model: &mut UnifiedToyModel<T>, plan: &PruningPlan) -> Result<()> {
    let mut depth: BTreeSet<(Site, Granularity)> = BTreeSet::new();
    let mut width: BTreeMap<Site, BTreeSet<usize>> = BTreeMap::new();
    let mut heads: BTreeMap<Site, BTreeSet<usize>> = BTreeMap::new();
    for r in &plan.removals {
        let site = r.site();
        let block = model.block(site)?;
        let fresh = match r.kind {
            PlanKind::Depth => {
                let g = r.granularity.ok_or_else(|| contract("depth removal without granularity"))?;
                let present = match g {
                    Granularity::Block => !block.is_empty(),
                    Granularity::Mlp => block.ffn.is_some(),
                    Granularity::Attn => block.attn.is_some(),
                };
                if !present {
                    return Err(contract(format!("{} layer {} has no {g:?} to remove", site.component, site.layer)));
                }
                depth.insert((site, g))
            }
            PlanKind::Width => {
                let mlp = block
                    .dense_mlp()
                    .ok_or_else(|| contract(format!("{} layer {} has no dense MLP", site.component, site.layer)))?;
                let i = r.index.ok_or_else(|| contract("width removal without index"))?;
                if i >= mlp.width() {
                    return Err(contract(format!("neuron {i} outside width {}", mlp.width())));
                }
                width.entry(site).or_default().insert(i)
            }
            PlanKind::Heads => {
                let attn = block
                    .attn
                    .as_ref()
                    .ok_or_else(|| contract(format!("{} layer {} has no self-attention", site.component, site.layer)))?;
                let h = r.index.ok_or_else(|| contract("head removal without index"))?;
                if h >= attn.attn.n_heads {
                    return Err(contract(format!("head {h} outside {} heads", attn.attn.n_heads)));
                }
                heads.entry(site).or_default().insert(h)
            }
        };
        if !fresh {
            return Err(contract(format!("duplicate removal {r:?}")));
        }
    }
    for (site, set) in &width {
        if set.len() == model.block(*site)?.dense_mlp().expect("validated").width() {
            return Err(contract("plan removes every neuron of a layer"));
        }
    }
    for (site, set) in &heads {
        if set.len() == model.block(*site)?.attn.as_ref().expect("validated").attn.n_heads {
            return Err(contract("plan removes every head of a layer"));
        }
    }

    for (site, removed) in &width {
        let block = &mut model.blocks_mut(site.component)[site.layer];
        let sub = block.ffn.as_mut().expect("validated");
        if let FeedForward::Dense(mlp) = &mut sub.ffn {
            *mlp = prune_mlp(mlp, removed);
        }
    }
    for (site, removed) in &heads {
        let block = &mut model.blocks_mut(site.component)[site.layer];
        let attn = &mut block.attn.as_mut().expect("validated").attn;
        let dh = attn.head_dim();
        let keep: Vec<usize> = (0..attn.n_heads)
            .filter(|h| !removed.contains(h))
            .flat_map(|h| h * dh..(h + 1) * dh)
            .collect();
        attn.wq = attn.wq.select_rows(&keep);
        attn.wk = attn.wk.select_rows(&keep);
        attn.wv = attn.wv.select_rows(&keep);
        attn.wo = attn.wo.select_cols(&keep);
        attn.n_heads -= removed.len();
    }
    for (site, g) in &depth {
        let block: &mut Block<T> = &mut model.blocks_mut(site.component)[site.layer];
        match g {
            Granularity::Block => {
                block.attn = None;
                block.cross = None;
                block.ffn = None;
            }
            Granularity::Mlp => block.ffn = None,
            Granularity::Attn => block.attn = None,
        }
    }
    if !plan.is_empty() {
        model.meta.plans.push(plan.clone());
    }
    Ok(())
}

/// Copy of `mlp` without the given neurons.
pub fn prune_mlp<T: Real>(mlp: &Mlp<T>, removed: &BTreeSet<usize>) -> Mlp<T> {
    let keep: Vec<usize> = (0..mlp.width()).filter(|i| !removed.contains(i)).collect();
    Mlp {
        gate: mlp.gate.select_rows(&keep),
        up: mlp.up.select_rows(&keep),
        down: mlp.down.select_cols(&keep),
    }
}
