//! Subcommand definitions and their implementations.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use umslim::analysis::{dynamics, overlap_all, write_dynamics_csv, write_overlap_csv};
use umslim::data::{gen_dataset, make_calibration, Dataset, Task};
use umslim::importance::{layer_scores, reports, write_csv, ImportanceReport, LayerScore};
use umslim::moe::{convert, partition_experts, ExpertPartition};
use umslim::surgery::{apply, default_protected, plan_depth, plan_heads, plan_layers, plan_width, PruningPlan};
use umslim::trace::{record, ActivationTrace};
use umslim::train::{evaluate_with, pretrain, tune, write_loss_csv, EvalResult, Stage, TrainConfig};
use umslim::model::Site;
use umslim::{Component, UnifiedToyModel};

use crate::config::PipelineConfig;
use crate::store::Store;

const COLUMNS: &str = "\
CSV columns:
  scores-<trace>.csv     component,layer,index,score,provenance
  layers-<trace>.csv     component,layer,granularity,score
  overlap-<u>-<g>.csv    component,layer,und_only,gen_only,shared,union
  dynamics-<trace>.csv   component,layer,always_active,inactive,dependent,observations
  loss-<model>.csv       step,loss_total,loss_und,loss_gen
  report.csv             model,stages,und_accuracy,und_perplexity,gen_velocity_mse,gen_fidelity,activated_params,activated_params_und,total_params,moe_activated_fraction";

#[derive(Debug, Parser)]
#[command(name = "umslim", version, about = "Prune, analyse and sparsify a toy unified multimodal model", after_help = COLUMNS)]
pub struct Cli {
    /// Pipeline config (TOML). Built-in defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Store root directory; overrides the config's output_dir.
    #[arg(long, global = true, env = "UMSLIM_STORE")]
    pub store: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    GenData,
    /// Train the dense baseline.
    Pretrain {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "base")]
        out: String,
    },
    /// Record activation statistics for a configured calibration batch.
    Calibrate {
        #[arg(long)]
        id: String,
        #[arg(long, default_value = "base")]
        model: String,
    },
    /// Turn a trace into layer, neuron and head importance scores.
    Score {
        #[arg(long)]
        trace: String,
        #[arg(long, default_value = "base")]
        model: String,
    },
    /// Split each layer's top-p neurons into task-specific and shared.
    AnalyzeOverlap {
        #[arg(long, default_value = "und")]
        und: String,
        #[arg(long, default_value = "gen")]
        gen: String,
        #[arg(long, default_value_t = 0.5)]
        p: f64,
    },
    /// Classify neurons as always active, inactive or sample dependent.
    AnalyzeDynamics {
        #[arg(long, default_value = "gen")]
        trace: String,
    },
    /// Training-free structural pruning.
    Prune {
        #[command(subcommand)]
        kind: PruneCommand,
    },
    /// Group neurons into shared and routed experts.
    PartitionExperts {
        #[arg(long, default_value = "gen")]
        scores: String,
        #[arg(long)]
        experts: Option<usize>,
    },
    /// Replace covered dense MLPs with MoE layers.
    Convert {
        /// Partition artifact name; defaults to the one for the configured expert count.
        #[arg(long)]
        partitions: Option<String>,
        #[arg(long, default_value = "base")]
        model: String,
        #[arg(long, default_value = "moe")]
        out: String,
    },
    /// Post-compression training stages.
    Adapt {
        #[command(subcommand)]
        stage: AdaptCommand,
    },
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        #[arg(long)]
        model: String,
    },
    /// Join evaluation results into report.csv.
    Report {
        /// Models to include; every evaluated model when omitted.
        #[arg(long, value_delimiter = ',')]
        models: Vec<String>,
    },
}

#[derive(Debug, Args)]
pub struct PruneTarget {
    #[arg(long, default_value = "base")]
    pub model: String,
    #[arg(long)]
    pub out: Option<String>,
    /// Restrict pruning to one component.
    #[arg(long)]
    pub component: Option<Component>,
}

#[derive(Debug, Args)]
pub struct ScoreSource {
    /// Score artifact (calibration id).
    #[arg(long, conflicts_with = "task")]
    pub scores: Option<String>,
    /// Use the first configured calibration of this task.
    #[arg(long)]
    pub task: Option<Task>,
    #[arg(long)]
    pub ratio: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum PruneCommand {
    /// Drop the most redundant layers.
    Depth {
        #[command(flatten)]
        target: PruneTarget,
        #[arg(long, default_value = "und")]
        trace: String,
        #[arg(long)]
        layers: Option<usize>,
    },
    /// Remove the least important MLP neurons.
    Width {
        #[command(flatten)]
        target: PruneTarget,
        #[command(flatten)]
        source: ScoreSource,
    },
    /// Remove the least important attention heads.
    Heads {
        #[command(flatten)]
        target: PruneTarget,
        #[command(flatten)]
        source: ScoreSource,
    },
}

#[derive(Debug, Subcommand)]
pub enum AdaptCommand {
    /// Router and non-expert weights only.
    ExpertFrozen {
        #[arg(long, default_value = "moe")]
        model: String,
        #[arg(long, default_value = "moe-ef")]
        out: String,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Release the expert freeze.
    Full {
        #[arg(long, default_value = "moe-ef")]
        model: String,
        #[arg(long, default_value = "moe-full")]
        out: String,
        #[arg(long)]
        steps: Option<usize>,
        /// Allow running without a prior expert-frozen stage.
        #[arg(long)]
        cold_start: bool,
    },
    /// Finetune a pruned dense model.
    DenseFinetune {
        #[arg(long)]
        model: String,
        #[arg(long)]
        out: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
    },
}

/// Scores derived from one trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreSet {
    pub layers: Vec<LayerScore>,
    pub reports: Vec<ImportanceReport>,
}

/// Stored evaluation of one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub model: String,
    pub stages: Vec<Stage>,
    pub result: EvalResult,
}

pub struct Session<'a> {
    pub config: &'a PipelineConfig,
    pub store: Store,
}

impl Session<'_> {
    fn dataset(&self) -> Result<Dataset> {
        let (_, ds) = self.store.get_json("dataset.json", "dataset").context("run gen-data first")?;
        Ok(ds)
    }

    fn protected(&self) -> Vec<Site> {
        if self.config.prune.protect_edges {
            default_protected(self.config.model.n_layers_gen)
        } else {
            Vec::new()
        }
    }

    fn scores(&self, id: &str) -> Result<ScoreSet> {
        let (_, s) = self.store.get_json(&format!("scores-{id}.json"), "scores")?;
        Ok(s)
    }

    fn save_trained(&self, name: &str, model: &mut UnifiedToyModel<f32>, curve: &[umslim::train::LossPoint]) -> Result<()> {
        self.store.put_model(name, model)?;
        self.store.put_csv(&format!("loss-{name}.csv"), "loss", |w| write_loss_csv(curve, w))?;
        Ok(())
    }
}

pub fn open(cli: &Cli) -> Result<PipelineConfig> {
    match &cli.config {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

/// Runs one subcommand and returns its one-line summary.
pub fn run(cli: &Cli, config: &PipelineConfig) -> Result<String> {
    let root = cli.store.clone().unwrap_or_else(|| config.output_dir.clone());
    let cx = Session {
        config,
        store: Store::open(&root, config.seed, config.hash())?,
    };
    match &cli.command {
        Command::GenData => gen_data(&cx),
        Command::Pretrain { steps, out } => run_pretrain(&cx, *steps, out),
        Command::Calibrate { id, model } => calibrate(&cx, id, model),
        Command::Score { trace, model } => score(&cx, trace, model),
        Command::AnalyzeOverlap { und, gen, p } => analyze_overlap(&cx, und, gen, *p),
        Command::AnalyzeDynamics { trace } => analyze_dynamics(&cx, trace),
        Command::Prune { kind } => prune(&cx, kind),
        Command::PartitionExperts { scores, experts } => partition(&cx, scores, *experts),
        Command::Convert { partitions, model, out } => run_convert(&cx, partitions.as_deref(), model, out),
        Command::Adapt { stage } => adapt(&cx, stage),
        Command::Eval { model } => eval(&cx, model).map(|r| {
            format!(
                "eval {model}: und acc {:.4}, ppl {:.3}, gen mse {:.4}, fidelity {:.3}, activated {}/{}",
                r.result.und_accuracy,
                r.result.und_perplexity,
                r.result.gen_velocity_mse,
                r.result.gen_fidelity,
                r.result.activated_params,
                r.result.total_params
            )
        }),
        Command::Report { models } => report(&cx, models),
    }
}

fn gen_data(cx: &Session) -> Result<String> {
    let ds = gen_dataset(&cx.config.data)?;
    let path = cx.store.put_json("dataset.json", "dataset", &ds)?;
    Ok(format!(
        "gen-data: {} und / {} gen training samples, {} held out -> {}",
        ds.und_train.len(),
        ds.gen_train.len(),
        ds.und_heldout.len(),
        path.display()
    ))
}

fn stage_config(cx: &Session, stage: Stage, steps: Option<usize>) -> TrainConfig {
    let mut t = cx.config.train.get(stage).clone();
    if let Some(s) = steps {
        t.steps = s;
    }
    t
}

fn last_loss(curve: &[umslim::train::LossPoint]) -> String {
    curve.last().map_or("n/a".into(), |p| format!("{:.5}", p.total))
}

fn run_pretrain(cx: &Session, steps: Option<usize>, out: &str) -> Result<String> {
    let ds = cx.dataset()?;
    let mut model = UnifiedToyModel::<f32>::new(cx.config.model.clone())?;
    let t = stage_config(cx, Stage::Pretrain, steps);
    let curve = pretrain(&mut model, &ds, &t)?;
    cx.save_trained(out, &mut model, &curve)?;
    Ok(format!("pretrain: {} steps, final loss {} -> {out}.umc", t.steps, last_loss(&curve)))
}

fn calibrate(cx: &Session, id: &str, model: &str) -> Result<String> {
    let spec = cx.config.calibration(id)?;
    let ds = cx.dataset()?;
    let m = cx.store.get_model(model)?;
    let mut batch = make_calibration(&ds, spec.task, spec.count, spec.seed.unwrap_or(cx.config.seed))?;
    batch.id = id.to_string();
    let trace = record(&m, &batch, &cx.config.trace)?;
    cx.store.put_json(&format!("trace-{id}.json"), "trace", &trace)?;
    Ok(format!(
        "calibrate {id}: {} {} samples over {} layers -> trace-{id}.json",
        batch.count(),
        spec.task,
        trace.layers.len()
    ))
}

fn score(cx: &Session, trace_id: &str, model: &str) -> Result<String> {
    let (_, trace): (_, ActivationTrace) = cx.store.get_json(&format!("trace-{trace_id}.json"), "trace")?;
    let m = cx.store.get_model(model)?;
    let set = ScoreSet {
        layers: layer_scores(&trace, trace.granularity)?,
        reports: reports(&trace, &m, None)?,
    };
    cx.store.put_json(&format!("scores-{trace_id}.json"), "scores", &set)?;
    cx.store.put_csv(&format!("scores-{trace_id}.csv"), "scores", |w| write_csv(&set.reports, w))?;
    cx.store.put_csv(&format!("layers-{trace_id}.csv"), "layer-scores", |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["component", "layer", "granularity", "score"])?;
        for l in &set.layers {
            out.write_record([
                l.component.to_string(),
                l.layer.to_string(),
                format!("{:?}", l.granularity).to_lowercase(),
                l.score.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    })?;
    Ok(format!(
        "score {trace_id}: {} layer scores, {} neuron reports -> scores-{trace_id}.csv",
        set.layers.len(),
        set.reports.len()
    ))
}

fn analyze_overlap(cx: &Session, und: &str, gen: &str, p: f64) -> Result<String> {
    let a = cx.scores(und)?;
    let b = cx.scores(gen)?;
    // An understanding trace never reaches the generation stack, so compare
    // only the sites both sets cover.
    let shared = |x: &[ImportanceReport], y: &[ImportanceReport]| -> Vec<ImportanceReport> {
        x.iter().filter(|r| y.iter().any(|o| o.site() == r.site())).cloned().collect()
    };
    let (ua, gb) = (shared(&a.reports, &b.reports), shared(&b.reports, &a.reports));
    if ua.is_empty() {
        bail!("scores {und} and {gen} share no layers");
    }
    let rows = overlap_all(&ua, &gb, p)?;
    let file = format!("overlap-{und}-{gen}.csv");
    cx.store.put_csv(&file, "overlap", |w| write_overlap_csv(&rows, w))?;
    let mean = rows.iter().map(|r| r.shared).sum::<f64>() / rows.len().max(1) as f64;
    Ok(format!("analyze-overlap: {} layers, mean shared fraction {mean:.3} -> {file}", rows.len()))
}

fn analyze_dynamics(cx: &Session, trace_id: &str) -> Result<String> {
    let (_, trace): (_, ActivationTrace) = cx.store.get_json(&format!("trace-{trace_id}.json"), "trace")?;
    let rows = dynamics(&trace)?;
    let file = format!("dynamics-{trace_id}.csv");
    cx.store.put_csv(&file, "dynamics", |w| write_dynamics_csv(&rows, w))?;
    let mean = rows.iter().map(|r| r.dependent).sum::<f64>() / rows.len() as f64;
    Ok(format!("analyze-dynamics: {} layers, mean sample-dependent fraction {mean:.3} -> {file}", rows.len()))
}

fn score_source(cx: &Session, source: &ScoreSource) -> Result<(String, ScoreSet)> {
    let id = match (&source.scores, source.task) {
        (Some(id), _) => id.clone(),
        (None, Some(task)) => cx.config.calibration_for(task)?.id.clone(),
        (None, None) => bail!("pass --scores or --task"),
    };
    let set = cx.scores(&id)?;
    Ok((id, set))
}

fn prune(cx: &Session, kind: &PruneCommand) -> Result<String> {
    let protected = cx.protected();
    let (target, plan, label, from) = match kind {
        PruneCommand::Depth { target, trace, layers } => {
            let set = cx.scores(trace)?;
            let candidates: Vec<LayerScore> = set
                .layers
                .into_iter()
                .filter(|l| target.component.is_none_or(|c| c == l.component))
                .filter(|l| {
                    !protected.contains(&Site {
                        component: l.component,
                        layer: l.layer,
                    })
                })
                .collect();
            let plan = plan_depth(&candidates, layers.unwrap_or(cx.config.prune.depth_layers))?;
            (target, plan, "depth", trace.clone())
        }
        PruneCommand::Width { target, source } | PruneCommand::Heads { target, source } => {
            let (id, set) = score_source(cx, source)?;
            let ratio = source.ratio.unwrap_or(cx.config.prune.ratio);
            let chosen: Vec<ImportanceReport> = set
                .reports
                .into_iter()
                .filter(|r| target.component.is_none_or(|c| c == r.component))
                .collect();
            let (plan, label) = if matches!(kind, PruneCommand::Width { .. }) {
                (plan_layers(&chosen, ratio, &protected, plan_width)?, "width")
            } else {
                (plan_layers(&chosen, ratio, &protected, plan_heads)?, "heads")
            };
            (target, plan, label, id)
        }
    };
    let mut model = cx.store.get_model(&target.model)?;
    let before = model.param_count();
    apply(&mut model, &plan)?;
    let out = target.out.clone().unwrap_or_else(|| format!("pruned-{label}"));
    let mut text = Vec::new();
    plan.write_jsonl(&mut text)?;
    cx.store.put_text(&format!("plan-{out}.jsonl"), "plan", &text)?;
    cx.store.put_model(&out, &mut model)?;
    Ok(format!(
        "prune {label}: {} removals using {from} scores, params {before} -> {} -> {out}.umc",
        plan.removals.len(),
        model.param_count()
    ))
}

/// Replays a stored plan file on a model; used to reproduce pruned models.
pub fn replay(store: &Store, plan_file: &str, model: &mut UnifiedToyModel<f32>) -> Result<()> {
    let (_, text) = store.get_text(plan_file)?;
    let plan = PruningPlan::read_jsonl(&text[..])?;
    apply(model, &plan)?;
    Ok(())
}

fn partition_name(experts: usize) -> String {
    format!("partitions-e{experts}")
}

fn partition(cx: &Session, scores: &str, experts: Option<usize>) -> Result<String> {
    let set = cx.scores(scores)?;
    let e = experts.unwrap_or(cx.config.moe.experts);
    let moe = &cx.config.moe;
    let mut parts: Vec<ExpertPartition> = Vec::new();
    for &component in moe.target.components() {
        let covered = moe.covered_layers(cx.config.model.n_layers(component));
        for r in set.reports.iter().filter(|r| r.component == component && covered.contains(&r.layer)) {
            parts.push(partition_experts(r, e)?);
        }
    }
    let name = partition_name(e);
    cx.store.put_json(&format!("{name}.json"), "partitions", &parts)?;
    let p = &parts[0];
    Ok(format!(
        "partition-experts: {} layers into {} shared + {} routed experts of {} neurons -> {name}.json",
        parts.len(),
        p.n_shared,
        p.n_routed(),
        p.expert_size
    ))
}

fn run_convert(cx: &Session, partitions: Option<&str>, model: &str, out: &str) -> Result<String> {
    let name = partitions.map_or_else(|| partition_name(cx.config.moe.experts), str::to_string);
    let (_, parts): (_, Vec<ExpertPartition>) = cx.store.get_json(&format!("{name}.json"), "partitions")?;
    let mut moe = cx.config.moe.clone();
    if let Some(p) = parts.first() {
        moe.experts = p.total_experts;
    }
    let mut m = cx.store.get_model(model)?;
    convert(&mut m, &parts, &moe)?;
    cx.store.put_model(out, &mut m)?;
    Ok(format!(
        "convert: {} layers, E={} k={} -> {out}.umc",
        parts.len(),
        moe.experts,
        moe.resolved_k()?
    ))
}

fn adapt(cx: &Session, cmd: &AdaptCommand) -> Result<String> {
    let (stage, model, out, steps, cold) = match cmd {
        AdaptCommand::ExpertFrozen { model, out, steps } => (Stage::ExpertFrozen, model.clone(), out.clone(), *steps, false),
        AdaptCommand::Full {
            model,
            out,
            steps,
            cold_start,
        } => (Stage::MoeFull, model.clone(), out.clone(), *steps, *cold_start),
        AdaptCommand::DenseFinetune { model, out, steps } => {
            let out = out.clone().unwrap_or_else(|| format!("{model}-ft"));
            (Stage::DenseFinetune, model.clone(), out, *steps, false)
        }
    };
    let ds = cx.dataset()?;
    let mut m = cx.store.get_model(&model)?;
    let mut t = stage_config(cx, stage, steps);
    t.allow_cold_start |= cold;
    let curve = tune(&mut m, &ds, &t)?;
    cx.save_trained(&out, &mut m, &curve)?;
    Ok(format!(
        "adapt {}: {} steps, final loss {} -> {out}.umc",
        stage.as_str(),
        t.steps,
        last_loss(&curve)
    ))
}

/// Evaluates a stored checkpoint and records the result.
pub fn eval(cx: &Session, model: &str) -> Result<EvalRecord> {
    let ds = cx.dataset()?;
    let m = cx.store.get_model(model)?;
    let rec = EvalRecord {
        model: model.to_string(),
        stages: m.meta.stages.clone(),
        result: evaluate_with(&m, &ds, &cx.config.eval)?,
    };
    cx.store.put_json(&format!("eval-{model}.json"), "eval", &rec)?;
    Ok(rec)
}

fn report(cx: &Session, models: &[String]) -> Result<String> {
    let names: Vec<String> = if models.is_empty() {
        let mut found: Vec<String> = std::fs::read_dir(cx.store.root())?
            .filter_map(|e| e.ok()?.file_name().into_string().ok())
            .filter_map(|f| f.strip_prefix("eval-")?.strip_suffix(".json").map(str::to_string))
            .collect();
        found.sort();
        found
    } else {
        models.to_vec()
    };
    if names.is_empty() {
        bail!("no evaluations to report; run eval first");
    }
    let mut rows = Vec::new();
    let mut hash: Option<String> = None;
    for n in &names {
        let (tag, rec): (_, EvalRecord) = cx.store.get_json(&format!("eval-{n}.json"), "eval")?;
        match &hash {
            Some(h) if *h != tag.config_hash => {
                bail!("eval-{n}.json has config hash {} but earlier artifacts have {h}", tag.config_hash)
            }
            Some(_) => {}
            None => hash = Some(tag.config_hash.clone()),
        }
        rows.push(rec);
    }
    cx.store.put_csv("report.csv", "report", |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "model",
            "stages",
            "und_accuracy",
            "und_perplexity",
            "gen_velocity_mse",
            "gen_fidelity",
            "activated_params",
            "activated_params_und",
            "total_params",
            "moe_activated_fraction",
        ])?;
        for r in &rows {
            let stages: Vec<&str> = r.stages.iter().map(|s| s.as_str()).collect();
            let x = &r.result;
            out.write_record([
                r.model.clone(),
                stages.join("+"),
                x.und_accuracy.to_string(),
                x.und_perplexity.to_string(),
                x.gen_velocity_mse.to_string(),
                x.gen_fidelity.to_string(),
                x.activated_params.to_string(),
                x.activated_params_und.to_string(),
                x.total_params.to_string(),
                x.moe_activated_fraction.map_or(String::new(), |f| f.to_string()),
            ])?;
        }
        out.flush()?;
        Ok(())
    })?;
    Ok(format!("report: {} models -> report.csv", rows.len()))
}
