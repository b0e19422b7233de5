//! Scores derived from activation traces.
//!
//! * layer redundancy `S_l`: mean per-token cosine between the input and
//!   output of a (sub)layer, residual path included;
//! * neuron importance `s_i = E[|h_i|] · ‖W_d[:, i]‖₂`, the expected norm of
//!   the error introduced by deleting neuron `i`;
//! * head importance `s_h = E[‖a_h‖₂] · ‖W_O,h‖_F`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{contract, Result};
use crate::model::{Block, Component, Granularity, Site, UnifiedToyModel};
use crate::numerics::{Real, Tensor};
use crate::trace::ActivationTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub component: Component,
    pub layer: usize,
    pub granularity: Granularity,
    pub score: f64,
}

/// Calibration origin of a report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub batch: String,
    pub tasks: Vec<Task>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub component: Component,
    pub layer: usize,
    pub scores: Vec<f64>,
    pub head_scores: Option<Vec<f64>>,
    pub provenance: Provenance,
}

impl ImportanceReport {
    pub fn site(&self) -> Site {
        Site {
            component: self.component,
            layer: self.layer,
        }
    }

    pub fn id(&self) -> String {
        format!("{}-{}@{}", self.component, self.layer, self.provenance.batch)
    }
}

/// Redundancy of every layer recorded at the requested granularity.
pub fn layer_scores(trace: &ActivationTrace, granularity: Granularity) -> Result<Vec<LayerScore>> {
    if trace.granularity != granularity {
        return Err(contract(format!(
            "trace holds {:?} statistics, {:?} requested",
            trace.granularity, granularity
        )));
    }
    Ok(trace
        .layers
        .iter()
        .filter_map(|l| {
            l.mean_cosine().map(|score| LayerScore {
                component: l.component,
                layer: l.layer,
                granularity,
                score: score.clamp(-1.0, 1.0),
            })
        })
        .collect())
}

fn live_block<T: Real>(model: &UnifiedToyModel<T>, site: Site) -> Result<&Block<T>> {
    model.block(site)
}

/// Column norms of the layer's down projection in dense neuron order.
pub fn down_column_norms<T: Real>(model: &UnifiedToyModel<T>, site: Site) -> Result<Vec<f64>> {
    let block = live_block(model, site)?;
    let down: Tensor<T> = if let Some(m) = block.dense_mlp() {
        m.down.clone()
    } else if let Some(m) = block.moe() {
        m.to_dense().down
    } else {
        return Err(contract(format!("{} layer {} has no MLP", site.component, site.layer)));
    };
    Ok((0..down.cols()).map(|c| down.col_norm(c)).collect())
}

fn provenance(trace: &ActivationTrace) -> Provenance {
    Provenance {
        batch: trace.provenance(),
        tasks: trace.tasks.clone(),
    }
}

pub fn neuron_scores<T: Real>(trace: &ActivationTrace, model: &UnifiedToyModel<T>, site: Site) -> Result<ImportanceReport> {
    let stats = trace
        .layer(site)
        .ok_or_else(|| contract(format!("trace has no record of {} layer {}", site.component, site.layer)))?;
    let means = stats
        .mean_abs(trace.expectation)
        .ok_or_else(|| contract("trace holds no MLP activations for this layer"))?;
    let norms = down_column_norms(model, site)?;
    if norms.len() != means.len() {
        return Err(contract(format!(
            "stale trace: recorded width {}, layer now has {}",
            means.len(),
            norms.len()
        )));
    }
    Ok(ImportanceReport {
        component: site.component,
        layer: site.layer,
        scores: means.iter().zip(&norms).map(|(m, n)| m * n).collect(),
        head_scores: None,
        provenance: provenance(trace),
    })
}

pub fn head_scores<T: Real>(trace: &ActivationTrace, model: &UnifiedToyModel<T>, site: Site) -> Result<Vec<f64>> {
    let stats = trace
        .layer(site)
        .ok_or_else(|| contract(format!("trace has no record of {} layer {}", site.component, site.layer)))?;
    let means = stats
        .mean_head_norms()
        .ok_or_else(|| contract("trace holds no head statistics for this layer"))?;
    let attn = &live_block(model, site)?
        .attn
        .as_ref()
        .ok_or_else(|| contract("layer has no self-attention"))?
        .attn;
    if attn.n_heads != means.len() {
        return Err(contract(format!(
            "stale trace: recorded {} heads, layer now has {}",
            means.len(),
            attn.n_heads
        )));
    }
    let dh = attn.head_dim();
    Ok(means
        .iter()
        .enumerate()
        .map(|(h, m)| {
            let slice = attn.wo.select_cols(&(h * dh..(h + 1) * dh).collect::<Vec<_>>());
            m * slice.frobenius()
        })
        .collect())
}

/// Neuron and head scores for every MLP layer in the trace.
pub fn reports<T: Real>(trace: &ActivationTrace, model: &UnifiedToyModel<T>, component: Option<Component>) -> Result<Vec<ImportanceReport>> {
    let mut out = Vec::new();
    for stats in &trace.layers {
        let site = stats.site();
        if component.is_some_and(|c| c != site.component) || stats.token_count == 0 {
            continue;
        }
        let mut report = neuron_scores(trace, model, site)?;
        if stats.head_token_count > 0 {
            report.head_scores = Some(head_scores(trace, model, site)?);
        }
        out.push(report);
    }
    Ok(out)
}

/// Writes `component,layer,index,score,provenance` rows, neurons only.
pub fn write_csv<W: Write>(reports: &[ImportanceReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["component", "layer", "index", "score", "provenance"])?;
    for r in reports {
        for (i, s) in r.scores.iter().enumerate() {
            w.write_record([
                r.component.as_str().to_string(),
                r.layer.to_string(),
                i.to_string(),
                s.to_string(),
                r.provenance.batch.clone(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
