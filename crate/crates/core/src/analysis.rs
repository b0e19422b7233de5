//! Diagnostics over importance reports and traces: which high-importance
//! neurons the two tasks share, and how stable neuron activity is across
//! prompts and sampler steps.

use std::io::Write;

use bitvec::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, input, Result};
use crate::importance::ImportanceReport;
use crate::model::Component;
use crate::trace::{top_p_set, ActivationTrace};

/// Split of the union of two top-p neuron sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerOverlap {
    pub component: Component,
    pub layer: usize,
    pub und_only: f64,
    pub gen_only: f64,
    pub shared: f64,
    pub union: usize,
}

pub fn overlap(und: &ImportanceReport, gen: &ImportanceReport, p: f64) -> Result<LayerOverlap> {
    if und.site() != gen.site() || und.scores.len() != gen.scores.len() {
        return Err(contract(format!(
            "reports cover different layers ({} vs {})",
            und.id(),
            gen.id()
        )));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(input(format!("p = {p} outside (0, 1)")));
    }
    let a = top_p_set(&und.scores, p);
    let b = top_p_set(&gen.scores, p);
    let both = (a.clone() & b.clone()).count_ones();
    let union = (a.clone() | b.clone()).count_ones();
    let a_only = a.count_ones() - both;
    let b_only = b.count_ones() - both;
    let n = union as f64;
    Ok(LayerOverlap {
        component: und.component,
        layer: und.layer,
        und_only: a_only as f64 / n,
        gen_only: b_only as f64 / n,
        shared: both as f64 / n,
        union,
    })
}

/// Layer-by-layer overlap of two report sets, matched by site.
pub fn overlap_all(und: &[ImportanceReport], gen: &[ImportanceReport], p: f64) -> Result<Vec<LayerOverlap>> {
    if und.len() != gen.len() {
        return Err(contract("report sets cover different numbers of layers"));
    }
    let mut out = Vec::with_capacity(und.len());
    for a in und {
        let b = gen
            .iter()
            .find(|g| g.site() == a.site())
            .ok_or_else(|| contract(format!("no counterpart for {}", a.id())))?;
        out.push(overlap(a, b, p)?);
    }
    Ok(out)
}

/// Neuron activity across every recorded pass of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDynamics {
    pub component: Component,
    pub layer: usize,
    /// In the top-p set of every observation.
    pub always_active: f64,
    /// In the top-p set of no observation.
    pub inactive: f64,
    pub dependent: f64,
    pub observations: usize,
}

pub fn dynamics(trace: &ActivationTrace) -> Result<Vec<LayerDynamics>> {
    let mut out = Vec::new();
    for stats in &trace.layers {
        if stats.observations.is_empty() {
            continue;
        }
        let width = stats.observations[0].active.len();
        if stats.observations.iter().any(|o| o.active.len() != width) {
            return Err(contract("observations of one layer differ in width"));
        }
        let sets: Vec<BitVec> = stats.observations.iter().map(|o| o.active.clone()).collect();
        let (all, any) = activity_sets(&sets).expect("non-empty");
        let n = all.len() as f64;
        let always = all.count_ones();
        let ever = any.count_ones();
        out.push(LayerDynamics {
            component: stats.component,
            layer: stats.layer,
            always_active: always as f64 / n,
            inactive: (all.len() - ever) as f64 / n,
            dependent: (ever - always) as f64 / n,
            observations: stats.observations.len(),
        });
    }
    if out.is_empty() {
        return Err(input("trace holds no observations"));
    }
    Ok(out)
}

/// Neuron-level classification used by the dynamics fractions:
/// `(always, ever)` bitsets.
pub fn activity_sets(observations: &[BitVec]) -> Option<(BitVec, BitVec)> {
    let first = observations.first()?;
    let mut all = first.clone();
    let mut any = first.clone();
    for o in &observations[1..] {
        all &= o.as_bitslice();
        any |= o.as_bitslice();
    }
    Some((all, any))
}

pub fn write_overlap_csv<W: Write>(rows: &[LayerOverlap], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["component", "layer", "und_only", "gen_only", "shared", "union"])?;
    for r in rows {
        w.write_record([
            r.component.to_string(),
            r.layer.to_string(),
            r.und_only.to_string(),
            r.gen_only.to_string(),
            r.shared.to_string(),
            r.union.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dynamics_csv<W: Write>(rows: &[LayerDynamics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["component", "layer", "always_active", "inactive", "dependent", "observations"])?;
    for r in rows {
        w.write_record([
            r.component.to_string(),
            r.layer.to_string(),
            r.always_active.to_string(),
            r.inactive.to_string(),
            r.dependent.to_string(),
            r.observations.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
