//! End-to-end run drivers. Each public function here is the substance
//! behind one operator command — data generation, pre-training,
//! multi-task training, evaluation, adaptation, skill ablation, sweeps,
//! and the standalone oracle checks — so the command binary stays a thin
//! argument parser. Every driver is a pure function of its `RunConfig`
//! and seed: reruns produce byte-identical logs, tables, and checkpoints.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{adapt, AdaptationPlan, AdaptationReport};
use crate::baselines::{System, SystemKind};
use crate::crf::{crf_nll, crf_viterbi};
use crate::data::synth::{write_suite, SuiteSpec};
use crate::data::{load_jsonl, Vocab};
use crate::encoder::{EncodedBatch, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::model::MultiTaskModel;
use crate::pretrain::{
    initialize_from_pretrain, pretrain, Corpus, PretrainConfig, PretrainModel, PretrainSummary,
};
use crate::report::Report;
use crate::rng::{derived, sub_seed};
use crate::routing::{Skill, SkillRegistry, TaskSpec};
use crate::sampler::{sampling_probs, TaskSampler};
use crate::tensor::gradcheck::{check_gradients, GradCheckSettings};
use crate::tensor::{ParamSet, Tape};
use crate::trainer::{evaluate_all, Dataset, RunLog, TaskSplits, TrainConfig};

/// Environment variables that override the corresponding directories.
pub const ENV_DATA_DIR: &str = "SKILLNET_DATA_DIR";
pub const ENV_CHECKPOINT_DIR: &str = "SKILLNET_CHECKPOINT_DIR";
pub const ENV_METRICS_DIR: &str = "SKILLNET_METRICS_DIR";

fn default_encoder() -> EncoderConfig {
    EncoderConfig::desk_scale(Vocab::standard().len())
}

/// Everything a run needs, with desk-scale defaults for every field. A
/// config file may give any subset of fields; the `encoder` block, when
/// present, must be complete. Flag handling in the binary mutates the
/// loaded value afterwards, so precedence is flag over file over default.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stage derives its own stream from it, and the
    /// seed fields inside `train`/`pretrain` are overridden accordingly.
    pub seed: u64,
    /// Which system trains: skill-routed, dense, moe, or task-specific.
    pub system: String,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    /// Sizes for generated datasets (the suite's own seed field is
    /// replaced by the master seed).
    pub suite: SuiteSpec,
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub metrics_dir: PathBuf,
    /// Optional pre-training checkpoint that seeds multi-task training.
    pub init_from: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            system: SystemKind::SkillRouted.label().to_string(),
            encoder: default_encoder(),
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            suite: SuiteSpec::default(),
            data_dir: PathBuf::from("data"),
            checkpoint_dir: PathBuf::from("runs/checkpoints"),
            metrics_dir: PathBuf::from("runs/metrics"),
            init_from: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    /// Apply directory overrides from an environment-like lookup. Called
    /// before flag handling, so explicit flags still win.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) {
        if let Some(v) = get(ENV_DATA_DIR) {
            self.data_dir = PathBuf::from(v);
        }
        if let Some(v) = get(ENV_CHECKPOINT_DIR) {
            self.checkpoint_dir = PathBuf::from(v);
        }
        if let Some(v) = get(ENV_METRICS_DIR) {
            self.metrics_dir = PathBuf::from(v);
        }
    }

    pub fn system_kind(&self) -> Result<SystemKind> {
        SystemKind::parse(&self.system)
    }

    pub fn train_checkpoint(&self, kind: SystemKind) -> PathBuf {
        self.checkpoint_dir
            .join(format!("train-{}.ckpt", kind.label()))
    }

    fn log_to(&self, name: &str) -> Result<RunLog> {
        ensure_dir(&self.metrics_dir)?;
        RunLog::to_file(&self.metrics_dir.join(name))
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Write a table under `dir` as `{stem}.txt` (aligned text) and
/// `{stem}.jsonl` (one JSON row per line).
pub fn write_report(report: &Report, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    ensure_dir(dir)?;
    let text = dir.join(format!("{stem}.txt"));
    std::fs::write(&text, report.render()).map_err(|e| Error::io(&text, e))?;
    let jsonl = dir.join(format!("{stem}.jsonl"));
    std::fs::write(&jsonl, report.to_jsonl()).map_err(|e| Error::io(&jsonl, e))?;
    Ok((text, jsonl))
}

// ---------------------------------------------------------------- data

/// Generate the full synthetic suite (core tasks, follow-on tasks, and
/// the pre-training corpus) under the configured data directory.
pub fn gen_data(config: &RunConfig) -> Result<PathBuf> {
    let spec = SuiteSpec {
        seed: config.seed,
        ..config.suite.clone()
    };
    write_suite(&spec, &config.data_dir)?;
    Ok(config.data_dir.clone())
}

pub fn load_task_specs(path: &Path) -> Result<Vec<TaskSpec>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Load `{task}.train.jsonl` and `{task}.eval.jsonl` for every task.
pub fn load_dataset(dir: &Path, tasks: &[TaskSpec]) -> Result<Dataset> {
    let mut data = Dataset::new();
    for task in tasks {
        let splits = TaskSplits {
            train: load_jsonl(&dir.join(format!("{}.train.jsonl", task.name)))?,
            eval: load_jsonl(&dir.join(format!("{}.eval.jsonl", task.name)))?,
        };
        data.insert(task.name.clone(), splits);
    }
    Ok(data)
}

/// The six core task declarations plus their datasets.
pub fn load_core(config: &RunConfig) -> Result<(Vec<TaskSpec>, Dataset)> {
    let specs = load_task_specs(&config.data_dir.join("tasks.json"))?;
    let data = load_dataset(&config.data_dir, &specs)?;
    Ok((specs, data))
}

/// One follow-on task declaration plus its dataset.
pub fn load_new_task(config: &RunConfig, name: &str) -> Result<(TaskSpec, TaskSplits)> {
    let specs = load_task_specs(&config.data_dir.join("new_tasks.json"))?;
    let spec = specs
        .into_iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::UnknownTask(name.to_string()))?;
    let splits = TaskSplits {
        train: load_jsonl(&config.data_dir.join(format!("{name}.train.jsonl")))?,
        eval: load_jsonl(&config.data_dir.join(format!("{name}.eval.jsonl")))?,
    };
    Ok((spec, splits))
}

// ---------------------------------------------------------- pre-training

pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub summary: PretrainSummary,
}

/// Self-supervised pre-training over the generated corpus; emits one
/// checkpoint and a metrics log with both objective streams.
pub fn run_pretrain(config: &RunConfig) -> Result<PretrainOutcome> {
    let corpus = Corpus::load(&config.data_dir.join("corpus.txt"))?;
    let mut model = PretrainModel::init(
        config.encoder.clone(),
        sub_seed(config.seed, "pretrain-model"),
    )?;
    let mut pc = config.pretrain.clone();
    pc.seed = sub_seed(config.seed, "pretrain-loop");
    let mut log = config.log_to("pretrain.jsonl")?;
    let summary = pretrain(&mut model, &corpus, &pc, &mut log)?;
    ensure_dir(&config.checkpoint_dir)?;
    let checkpoint = config.checkpoint_dir.join("pretrain.ckpt");
    model.save(&checkpoint, None)?;
    Ok(PretrainOutcome {
        checkpoint,
        summary,
    })
}

// -------------------------------------------------------------- training

pub struct TrainOutcome {
    /// One checkpoint for unified systems; one per task for the fleet.
    pub checkpoints: Vec<PathBuf>,
    pub eval: BTreeMap<String, f64>,
    pub table: Report,
}

/// Multi-task training for the configured system.
pub fn run_train(config: &RunConfig) -> Result<TrainOutcome> {
    run_train_as(config, config.system_kind()?)
}

fn run_train_as(config: &RunConfig, kind: SystemKind) -> Result<TrainOutcome> {
    let (specs, data) = load_core(config)?;
    let mut system = System::build(
        kind,
        &config.encoder,
        &specs,
        sub_seed(config.seed, &format!("model:{}", kind.label())),
    )?;
    let mut log = config.log_to(&format!("train-{}.jsonl", kind.label()))?;
    if let Some(src) = &config.init_from {
        let System::Unified { model, .. } = &mut system else {
            return Err(Error::InvalidArgument(
                "pre-training handoff needs a single shared model".into(),
            ));
        };
        let source = PretrainModel::from_checkpoint(crate::checkpoint::load(src)?)?;
        let handoff = initialize_from_pretrain(model, &source)?;
        log.note(
            "handoff",
            serde_json::json!({
                "from": src.display().to_string(),
                "copied": handoff.copied,
                "cloned_from_general": handoff.cloned_from_general,
                "left_fresh": handoff.left_fresh,
            }),
        )?;
    }
    let mut tc = config.train.clone();
    tc.seed = sub_seed(config.seed, &format!("train:{}", kind.label()));
    let eval = system.train(&data, &tc, &mut log)?;

    ensure_dir(&config.checkpoint_dir)?;
    let mut checkpoints = Vec::new();
    match &system {
        System::Unified { model, .. } => {
            let path = config.train_checkpoint(kind);
            model.save(&path, None)?;
            checkpoints.push(path);
        }
        System::PerTask { models } => {
            for (name, model) in models {
                let path = config
                    .checkpoint_dir
                    .join(format!("train-task-specific-{name}.ckpt"));
                model.save(&path, None)?;
                checkpoints.push(path);
            }
        }
    }

    let names: Vec<String> = specs.iter().map(|t| t.name.clone()).collect();
    let mut table = Report::new(names.clone())?;
    table.push_with_params(
        kind.label(),
        eval.clone(),
        system_mean_activated(&system, &names)?,
    )?;
    write_report(&table, &config.metrics_dir, &format!("train-{}-summary", kind.label()))?;
    Ok(TrainOutcome {
        checkpoints,
        eval,
        table,
    })
}

// ------------------------------------------------------------ evaluation

/// Evaluate a saved model on every task it carries.
pub fn run_eval(config: &RunConfig, checkpoint: &Path) -> Result<Report> {
    let model = MultiTaskModel::from_checkpoint(crate::checkpoint::load(checkpoint)?)?;
    let specs = model.tasks().to_vec();
    let data = load_dataset(&config.data_dir, &specs)?;
    let names: Vec<String> = specs.iter().map(|t| t.name.clone()).collect();
    let scores: BTreeMap<String, f64> = evaluate_all(&model, &data, config.train.batch_size)?
        .into_iter()
        .collect();
    let label = checkpoint
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model");
    let mut table = Report::new(names.clone())?;
    table.push_with_params(label, scores, model_mean_activated(&model, &names)?)?;
    Ok(table)
}

// ------------------------------------------------------------ adaptation

#[derive(Debug, Clone)]
pub struct AdaptOptions {
    /// Name of a follow-on task declared in `new_tasks.json`.
    pub task: String,
    /// Skill module to inject for it (cloned from the general module).
    pub inject_skill: Option<String>,
    /// When false, everything but the injected module and the new head
    /// stays frozen.
    pub update_old_skills: bool,
    /// Base model; defaults to the trained skill-routed checkpoint,
    /// training it first if absent.
    pub base_checkpoint: Option<PathBuf>,
}

pub struct AdaptOutcome {
    pub checkpoint: PathBuf,
    pub report: AdaptationReport,
    /// Scalar parameters in the adapted task's forward/backward pass.
    pub activated_params: usize,
    /// Scalar parameters the adaptation actually updated.
    pub trainable_params: usize,
    pub table: Report,
}

/// Extend a trained model with a follow-on task, optionally injecting a
/// fresh skill module for it, and train under the chosen freeze regime.
pub fn run_adapt(config: &RunConfig, opts: &AdaptOptions) -> Result<AdaptOutcome> {
    let base = match &opts.base_checkpoint {
        Some(p) => {
            if !p.exists() {
                return Err(Error::InvalidArgument(format!(
                    "base checkpoint {} does not exist",
                    p.display()
                )));
            }
            p.clone()
        }
        None => {
            let p = config.train_checkpoint(SystemKind::SkillRouted);
            if !p.exists() {
                run_train_as(config, SystemKind::SkillRouted)?;
            }
            p
        }
    };
    let mut model = MultiTaskModel::from_checkpoint(crate::checkpoint::load(&base)?)?;
    let (mut spec, splits) = load_new_task(config, &opts.task)?;

    let mut plan = if let Some(id) = &opts.inject_skill {
        if !spec.skills.contains(id) {
            spec.skills.push(id.clone());
        }
        let skill = Skill::new(id, "module injected for the adapted task");
        AdaptationPlan::new(spec).with_skill(skill)
    } else {
        AdaptationPlan::new(spec)
    };
    plan = plan
        .updating_old_skills(opts.update_old_skills)
        .with_head_seed(sub_seed(config.seed, &format!("adapt-head:{}", opts.task)));

    let mut tc = config.train.clone();
    tc.seed = sub_seed(config.seed, &format!("adapt:{}", opts.task));
    let mut log = config.log_to(&format!("adapt-{}.jsonl", opts.task))?;
    let report = adapt(&mut model, &plan, &splits, &tc, &mut log)?;

    let activated_params = activated_elements(&model, &opts.task)?;
    let trainable_params = element_count(&model, &report.trainable)?;
    let metric = report.summary.eval.get(&opts.task).copied();
    log.note(
        "adaptation",
        serde_json::json!({
            "task": opts.task,
            "update_old_skills": opts.update_old_skills,
            "injected_skill": report.injected_skill,
            "params_activated": activated_params,
            "params_trainable": trainable_params,
            "metric": metric,
        }),
    )?;
    log.flush()?;

    ensure_dir(&config.checkpoint_dir)?;
    let checkpoint = config
        .checkpoint_dir
        .join(format!("adapt-{}.ckpt", opts.task));
    model.save(&checkpoint, None)?;

    let label = if report.head_only {
        "adapt-head-only"
    } else if opts.update_old_skills {
        "adapt-update-old"
    } else {
        "adapt-frozen"
    };
    let mut table = Report::new([opts.task.clone()])?;
    table.push_with_params(label, report.summary.eval.clone(), activated_params)?;
    write_report(&table, &config.metrics_dir, &format!("adapt-{}-summary", opts.task))?;
    Ok(AdaptOutcome {
        checkpoint,
        report,
        activated_params,
        trainable_params,
        table,
    })
}

// -------------------------------------------------------------- ablation

/// Delete each skill in turn from a trained skill-routed model's routing
/// and re-evaluate every task: one `full` row, then one `w/o {skill}` row
/// per registered skill. The model trains first if no checkpoint exists.
pub fn run_ablate(config: &RunConfig) -> Result<Report> {
    let path = config.train_checkpoint(SystemKind::SkillRouted);
    if !path.exists() {
        run_train_as(config, SystemKind::SkillRouted)?;
    }
    let mut model = MultiTaskModel::from_checkpoint(crate::checkpoint::load(&path)?)?;
    let specs = model.tasks().to_vec();
    let data = load_dataset(&config.data_dir, &specs)?;
    let names: Vec<String> = specs.iter().map(|t| t.name.clone()).collect();
    let batch = config.train.batch_size;

    let mut table = Report::new(names.clone())?;
    let full: BTreeMap<String, f64> = evaluate_all(&model, &data, batch)?.into_iter().collect();
    table.push_with_params("full", full, model_mean_activated(&model, &names)?)?;

    let original = model.routing().clone();
    let skill_ids: Vec<String> = model.registry().ids().map(str::to_string).collect();
    for sid in &skill_ids {
        let removed = model.registry().idx(sid)?;
        let ablated = original.ablate(model.registry(), sid)?;
        if ablated.iter().any(|(_, skills)| skills.contains(&removed)) {
            return Err(Error::Config(format!(
                "ablated routing still references {sid}"
            )));
        }
        model.set_routing(ablated)?;
        let scores: BTreeMap<String, f64> =
            evaluate_all(&model, &data, batch)?.into_iter().collect();
        let params = model_mean_activated(&model, &names)?;
        table.push_with_params(&format!("w/o {sid}"), scores, params)?;
    }
    model.set_routing(original)?;
    write_report(&table, &config.metrics_dir, "ablation-summary")?;
    Ok(table)
}

// ---------------------------------------------------------------- sweeps

#[derive(Debug, Clone)]
pub enum SweepKind {
    /// Train all four systems under the identical protocol.
    Systems,
    /// Train the skill-routed system once per sampling temperature.
    Alpha(Vec<f64>),
    /// Train the skill-routed system once per skill-layer count.
    SkillLayers(Vec<usize>),
}

impl SweepKind {
    fn stem(&self) -> &'static str {
        match self {
            SweepKind::Systems => "sweep-systems",
            SweepKind::Alpha(_) => "sweep-alpha",
            SweepKind::SkillLayers(_) => "sweep-skill-layers",
        }
    }
}

/// Run one sweep; each grid point is an independent seeded run, and the
/// merged table gets one row per point.
pub fn run_sweep(config: &RunConfig, sweep: &SweepKind) -> Result<Report> {
    let (specs, data) = load_core(config)?;
    let names: Vec<String> = specs.iter().map(|t| t.name.clone()).collect();
    let mut table = Report::new(names.clone())?;
    let stem = sweep.stem();

    let run_point = |system: &mut System,
                         tc: &TrainConfig,
                         label: &str,
                         log_name: &str,
                         table: &mut Report|
     -> Result<()> {
        let mut log = config.log_to(log_name)?;
        let eval = system.train(&data, tc, &mut log)?;
        table.push_with_params(label, eval, system_mean_activated(system, &names)?)
    };

    match sweep {
        SweepKind::Systems => {
            for kind in SystemKind::ALL {
                let mut system = System::build(
                    kind,
                    &config.encoder,
                    &specs,
                    sub_seed(config.seed, &format!("model:{}", kind.label())),
                )?;
                let mut tc = config.train.clone();
                tc.seed = sub_seed(config.seed, &format!("train:{}", kind.label()));
                run_point(
                    &mut system,
                    &tc,
                    kind.label(),
                    &format!("{stem}-{}.jsonl", kind.label()),
                    &mut table,
                )?;
            }
        }
        SweepKind::Alpha(values) => {
            if values.is_empty() {
                return Err(Error::InvalidArgument("empty sampling sweep grid".into()));
            }
            for &alpha in values {
                // one shared init seed isolates the temperature's effect
                let mut system = System::build(
                    SystemKind::SkillRouted,
                    &config.encoder,
                    &specs,
                    sub_seed(config.seed, "sweep-model"),
                )?;
                let mut tc = config.train.clone();
                tc.alpha = alpha;
                tc.seed = sub_seed(config.seed, "sweep-train");
                run_point(
                    &mut system,
                    &tc,
                    &format!("alpha={alpha}"),
                    &format!("{stem}-{alpha}.jsonl"),
                    &mut table,
                )?;
            }
        }
        SweepKind::SkillLayers(values) => {
            if values.is_empty() {
                return Err(Error::InvalidArgument("empty layer sweep grid".into()));
            }
            for &layers in values {
                let mut encoder = config.encoder.clone();
                encoder.skill_layers = layers;
                let mut system = System::build(
                    SystemKind::SkillRouted,
                    &encoder,
                    &specs,
                    sub_seed(config.seed, "sweep-model"),
                )?;
                let mut tc = config.train.clone();
                tc.seed = sub_seed(config.seed, "sweep-train");
                run_point(
                    &mut system,
                    &tc,
                    &format!("skill_layers={layers}"),
                    &format!("{stem}-{layers}.jsonl"),
                    &mut table,
                )?;
            }
        }
    }
    write_report(&table, &config.metrics_dir, &format!("{stem}-summary"))?;
    Ok(table)
}

// -------------------------------------------------- parameter accounting

fn element_count(model: &MultiTaskModel, names: &[String]) -> Result<usize> {
    let mut total = 0;
    for name in names {
        total += model.params.by_name(name)?.value.data().len();
    }
    Ok(total)
}

/// Scalar parameters in one task's forward/backward pass.
pub fn activated_elements(model: &MultiTaskModel, task: &str) -> Result<usize> {
    let names = model.active_param_names(task)?;
    element_count(model, &names)
}

fn model_mean_activated(model: &MultiTaskModel, tasks: &[String]) -> Result<usize> {
    let mut total = 0;
    for task in tasks {
        total += activated_elements(model, task)?;
    }
    Ok(((total as f64) / tasks.len() as f64).round() as usize)
}

fn system_mean_activated(system: &System, tasks: &[String]) -> Result<usize> {
    let mut total = 0;
    for task in tasks {
        total += activated_elements(system.model_for(task)?, task)?;
    }
    Ok(((total as f64) / tasks.len() as f64).round() as usize)
}

// ---------------------------------------------------------------- verify

/// Outcome of one standalone oracle check.
#[derive(Debug, Clone)]
pub struct VerifyCheck {
    pub name: &'static str,
    pub ok: bool,
    pub detail: String,
}

/// Run the oracle suites — gradient checks, exhaustive sequence-model
/// enumeration, and sampler statistics — without touching any dataset or
/// checkpoint.
pub fn run_verify() -> Vec<VerifyCheck> {
    let checks: [(&'static str, fn() -> Result<String>); 5] = [
        ("encoder-gradients", verify_encoder_gradients),
        ("moe-gradients", verify_moe_gradients),
        ("crf-enumeration", verify_crf),
        ("sampler-exactness", verify_sampler_exact),
        ("sampler-chi-square", verify_sampler_chi_square),
    ];
    checks
        .into_iter()
        .map(|(name, f)| match f() {
            Ok(detail) => VerifyCheck {
                name,
                ok: true,
                detail,
            },
            Err(e) => VerifyCheck {
                name,
                ok: false,
                detail: e.to_string(),
            },
        })
        .collect()
}

pub fn all_passed(checks: &[VerifyCheck]) -> bool {
    checks.iter().all(|c| c.ok)
}

fn verify_encoder_gradients() -> Result<String> {
    let registry = SkillRegistry::standard();
    let config = EncoderConfig {
        vocab_size: 13,
        max_len: 6,
        type_vocab: 2,
        hidden: 8,
        heads: 2,
        ffn_inner: 12,
        layers: 2,
        skill_layers: 1,
        moe_experts: 0,
        dropout: 0.0,
        ln_eps: 1e-12,
        init_std: 0.25,
    };
    let mut params = ParamSet::new();
    let mut rng = derived(11, "verify-encoder");
    let encoder = Encoder::init(config, &registry, &mut params, &mut rng)?;
    let batch = EncodedBatch::new(
        vec![vec![2, 5, 7, 9, 4, 3], vec![6, 8, 10, 3, 0, 0]],
        vec![vec![0; 6], vec![0, 0, 1, 1, 0, 0]],
        vec![6, 4],
    )?;
    let real = batch.real_rows();
    // fixed mixing weights keep the loss sensitive to the final layer norm
    let mix: Vec<f64> = (0..real.len() * 8)
        .map(|i| ((i * 29 + 5) % 19) as f64 * 0.1 - 0.9)
        .collect();
    let settings = GradCheckSettings {
        step: 1e-5,
        max_coords_per_param: Some(4),
    };
    let report = check_gradients(
        &mut params,
        None,
        |tape, ps| {
            let out = encoder.encode(tape, ps, &batch, &[0, 3, 6], None)?;
            let flat = tape.reshape(out, vec![batch.batch() * batch.seq_len(), 8])?;
            let kept = tape.gather_rows(flat, &real)?;
            let w = tape.constant_parts(vec![real.len(), 8], mix.clone())?;
            let mixed = tape.mul(kept, w)?;
            let squashed = tape.tanh(mixed);
            Ok(tape.mean_all(squashed))
        },
        &settings,
    )?;
    if report.max_rel_err >= 1e-5 {
        return Err(Error::InvalidArgument(format!(
            "encoder gradient mismatch: max relative error {:.3e}",
            report.max_rel_err
        )));
    }
    Ok(format!(
        "max relative error {:.3e} over {} coordinates",
        report.max_rel_err, report.coords_checked
    ))
}

fn verify_moe_gradients() -> Result<String> {
    const D: usize = 6;
    const EXPERTS: usize = 3;
    let mut params = ParamSet::new();
    let mut rng = derived(3, "verify-moe");
    crate::moe::init_layer(&mut params, "mix", D, 5, EXPERTS, 0.8, 2.0, &mut rng)?;
    let n = 8;
    let x: Vec<f64> = (0..n * D)
        .map(|i| ((i * 13 + 7) % 17) as f64 * 0.12 - 0.9)
        .collect();

    // expert selection must not flip under the finite-difference probes
    let gate_w = params.by_name("mix.gate.w")?.value.data().to_vec();
    let gate_b = params.by_name("mix.gate.b")?.value.data().to_vec();
    for row in 0..n {
        let mut logits: Vec<f64> = (0..EXPERTS)
            .map(|e| {
                gate_b[e]
                    + (0..D)
                        .map(|d| x[row * D + d] * gate_w[d * EXPERTS + e])
                        .sum::<f64>()
            })
            .collect();
        logits.sort_by(|a, b| b.partial_cmp(a).expect("finite logits"));
        if logits[1] - logits[2] <= 1e-3 {
            return Err(Error::InvalidArgument(format!(
                "gate margin {:.2e} too small for finite differences",
                logits[1] - logits[2]
            )));
        }
    }

    let settings = GradCheckSettings {
        step: 1e-5,
        max_coords_per_param: Some(6),
    };
    let report = check_gradients(
        &mut params,
        None,
        |tape, ps| {
            let inp = tape.constant_parts(vec![n, D], x.clone())?;
            let out = crate::moe::moe_ffn(tape, ps, "mix", inp, EXPERTS, None)?.out;
            let sq = tape.mul(out, out)?;
            Ok(tape.mean_all(sq))
        },
        &settings,
    )?;
    if report.max_rel_err >= 1e-5 {
        return Err(Error::InvalidArgument(format!(
            "mixture gradient mismatch: max relative error {:.3e}",
            report.max_rel_err
        )));
    }
    Ok(format!(
        "max relative error {:.3e} over {} coordinates",
        report.max_rel_err, report.coords_checked
    ))
}

fn verify_crf() -> Result<String> {
    let trials = 200;
    let mut rng = derived(17, "verify-crf");
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let l = rng.gen_range(1..=4usize);
        let k = rng.gen_range(1..=3usize);
        let draw = |rng: &mut rand_chacha::ChaCha20Rng, n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
        };
        let emissions = draw(&mut rng, l * k);
        let trans = draw(&mut rng, k * k);
        let start = draw(&mut rng, k);
        let end = draw(&mut rng, k);
        let labels: Vec<usize> = (0..l).map(|_| rng.gen_range(0..k)).collect();

        // exhaustive path scores, in lexicographic order
        let score_of = |path: &[usize]| -> f64 {
            let mut s = start[path[0]] + end[path[l - 1]];
            for (t, &y) in path.iter().enumerate() {
                s += emissions[t * k + y];
            }
            for t in 1..l {
                s += trans[path[t - 1] * k + path[t]];
            }
            s
        };
        let total = k.pow(l as u32);
        let mut best_path = Vec::new();
        let mut best_score = f64::NEG_INFINITY;
        let mut log_z = f64::NEG_INFINITY;
        for idx in 0..total {
            let path: Vec<usize> = (0..l)
                .map(|t| (idx / k.pow((l - 1 - t) as u32)) % k)
                .collect();
            let s = score_of(&path);
            // log-sum-exp accumulation
            let (hi, lo) = if log_z > s { (log_z, s) } else { (s, log_z) };
            log_z = if lo == f64::NEG_INFINITY {
                hi
            } else {
                hi + (1.0 + (lo - hi).exp()).ln()
            };
            if s > best_score {
                best_score = s;
                best_path = path;
            }
        }

        let mut tape = Tape::new();
        let e = tape.constant_parts(vec![l, k], emissions.clone())?;
        let tr = tape.constant_parts(vec![k, k], trans.clone())?;
        let st = tape.constant_parts(vec![1, k], start.clone())?;
        let en = tape.constant_parts(vec![1, k], end.clone())?;
        let nll = crf_nll(&mut tape, e, tr, st, en, &labels)?;
        let got = tape.data(nll)[0];
        let want = log_z - score_of(&labels);
        let diff = (got - want).abs();
        worst = worst.max(diff);
        if diff >= 1e-10 {
            return Err(Error::InvalidArgument(format!(
                "trial {trial}: negative log-likelihood off by {diff:.3e}"
            )));
        }
        let decoded = crf_viterbi(&emissions, l, k, &trans, &start, &end)?;
        if decoded != best_path {
            return Err(Error::InvalidArgument(format!(
                "trial {trial}: decoded {decoded:?}, enumeration says {best_path:?}"
            )));
        }
    }
    Ok(format!(
        "{trials} random instances; worst log-partition gap {worst:.2e}"
    ))
}

const SAMPLER_CHECK_SIZES: [usize; 6] = [9600, 50000, 34300, 53300, 15700, 10000];

fn verify_sampler_exact() -> Result<String> {
    let sizes = SAMPLER_CHECK_SIZES;
    let uniform = sampling_probs(&sizes, 0.0)?;
    if uniform.iter().any(|p| (p - 1.0 / 6.0).abs() >= 1e-12) {
        return Err(Error::InvalidArgument(
            "temperature 0 is not exactly uniform".into(),
        ));
    }
    for &alpha in &[0.5, 1.0] {
        let probs = sampling_probs(&sizes, alpha)?;
        let powered: Vec<f64> = sizes.iter().map(|&s| (s as f64).powf(alpha)).collect();
        let total: f64 = powered.iter().sum();
        for (p, w) in probs.iter().zip(&powered) {
            if (p - w / total).abs() >= 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "temperature {alpha} drifts from direct arithmetic"
                )));
            }
        }
    }
    Ok("closed-form probabilities match direct arithmetic at temperatures 0, 0.5, 1".into())
}

fn verify_sampler_chi_square() -> Result<String> {
    let sizes: Vec<(String, usize)> = SAMPLER_CHECK_SIZES
        .iter()
        .enumerate()
        .map(|(i, &s)| (format!("t{i}"), s))
        .collect();
    let sampler = TaskSampler::new(&sizes, 0.5)?;
    let mut rng = derived(23, "verify-sampler");
    let draws = 100_000usize;
    let mut counts = vec![0usize; sizes.len()];
    for _ in 0..draws {
        counts[sampler.draw(&mut rng)] += 1;
    }
    let chi2: f64 = sampler
        .probs()
        .iter()
        .zip(&counts)
        .map(|(p, &c)| {
            let expected = p * draws as f64;
            (c as f64 - expected).powi(2) / expected
        })
        .sum();
    // 25.7 is far into the tail for five degrees of freedom; a biased
    // sampler overshoots it by orders of magnitude
    if chi2 > 25.7 {
        return Err(Error::InvalidArgument(format!(
            "chi-square {chi2:.1} over {draws} draws exceeds the 25.7 bound"
        )));
    }
    Ok(format!("chi-square {chi2:.2} over {draws} draws (5 degrees of freedom)"))
}
