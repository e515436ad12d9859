//! Comparison systems trained under the same protocol as the skill-routed
//! model: a dense encoder whose tasks all share one feed-forward path, a
//! token-routed mixture of experts, and a fleet of single-task models.

use std::collections::BTreeMap;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::MultiTaskModel;
use crate::rng::sub_seed;
use crate::routing::{Skill, SkillRegistry, TaskSpec};
use crate::trainer::{evaluate_all, train_multitask, Dataset, RunLog, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SystemKind {
    /// Upper-layer feed-forward banks selected per task (the main model).
    SkillRouted,
    /// One shared feed-forward path; no routing of any kind.
    Dense,
    /// Gate-selected feed-forward experts, routed per token.
    Moe,
    /// An independent dense model per task; nothing is shared.
    TaskSpecific,
}

impl SystemKind {
    pub const ALL: [SystemKind; 4] = [
        SystemKind::SkillRouted,
        SystemKind::Dense,
        SystemKind::Moe,
        SystemKind::TaskSpecific,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            SystemKind::SkillRouted => "skill-routed",
            SystemKind::Dense => "dense",
            SystemKind::Moe => "moe",
            SystemKind::TaskSpecific => "task-specific",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "skill-routed" | "skill" => Ok(SystemKind::SkillRouted),
            "dense" => Ok(SystemKind::Dense),
            "moe" => Ok(SystemKind::Moe),
            "task-specific" => Ok(SystemKind::TaskSpecific),
            other => Err(Error::InvalidArgument(format!(
                "unknown system `{other}` (expected skill-routed, dense, moe, or task-specific)"
            ))),
        }
    }
}

/// Registry for systems without skill modularity: one always-on module.
pub fn shared_registry() -> SkillRegistry {
    SkillRegistry::new(vec![Skill::general("shared", "single shared feed-forward path")])
        .expect("one general skill is a valid registry")
}

/// The same tasks with their skill routing stripped, for systems that
/// have no banks to route to.
pub fn unrouted(tasks: &[TaskSpec]) -> Vec<TaskSpec> {
    tasks
        .iter()
        .cloned()
        .map(|mut t| {
            t.skills.clear();
            t
        })
        .collect()
}

/// One comparison system, ready to train.
pub enum System {
    Unified {
        kind: SystemKind,
        model: MultiTaskModel,
    },
    /// One independent model per task, keyed by task name.
    PerTask {
        models: BTreeMap<String, MultiTaskModel>,
    },
}

impl System {
    /// Build an untrained system over `tasks`. All systems share the base
    /// encoder dimensions; only the feed-forward organization differs.
    pub fn build(
        kind: SystemKind,
        base: &EncoderConfig,
        tasks: &[TaskSpec],
        seed: u64,
    ) -> Result<Self> {
        let mut config = base.clone();
        config.moe_experts = 0;
        match kind {
            SystemKind::SkillRouted => Ok(System::Unified {
                kind,
                model: MultiTaskModel::init(
                    config,
                    SkillRegistry::standard(),
                    tasks.to_vec(),
                    seed,
                )?,
            }),
            SystemKind::Dense => Ok(System::Unified {
                kind,
                model: MultiTaskModel::init(config, shared_registry(), unrouted(tasks), seed)?,
            }),
            SystemKind::Moe => {
                config.moe_experts = if base.moe_experts == 0 {
                    crate::moe::DEFAULT_EXPERTS
                } else {
                    base.moe_experts
                };
                Ok(System::Unified {
                    kind,
                    model: MultiTaskModel::init(
                        config,
                        SkillRegistry::standard(),
                        tasks.to_vec(),
                        seed,
                    )?,
                })
            }
            SystemKind::TaskSpecific => {
                let mut models = BTreeMap::new();
                for task in tasks {
                    let solo = unrouted(std::slice::from_ref(task));
                    let model_seed = sub_seed(seed, &format!("task-specific:{}", task.name));
                    models.insert(
                        task.name.clone(),
                        MultiTaskModel::init(
                            config.clone(),
                            shared_registry(),
                            solo,
                            model_seed,
                        )?,
                    );
                }
                Ok(System::PerTask { models })
            }
        }
    }

    pub fn kind(&self) -> SystemKind {
        match self {
            System::Unified { kind, .. } => *kind,
            System::PerTask { .. } => SystemKind::TaskSpecific,
        }
    }

    /// The model answering for `task`.
    pub fn model_for(&self, task: &str) -> Result<&MultiTaskModel> {
        match self {
            System::Unified { model, .. } => Ok(model),
            System::PerTask { models } => models
                .get(task)
                .ok_or_else(|| Error::UnknownTask(task.to_string())),
        }
    }

    /// Train under the shared protocol and return final eval metrics per
    /// task. A unified system runs the temperature-sampled loop as given;
    /// a per-task fleet splits the step budget evenly so the total update
    /// count matches.
    pub fn train(
        &mut self,
        data: &Dataset,
        config: &TrainConfig,
        log: &mut RunLog,
    ) -> Result<BTreeMap<String, f64>> {
        log.note(
            "system",
            serde_json::json!({ "system": self.kind().label() }),
        )?;
        match self {
            System::Unified { model, .. } => Ok(train_multitask(model, data, config, log)?.eval),
            System::PerTask { models } => {
                let active = models
                    .iter()
                    .filter(|(name, _)| {
                        data.get(*name).is_some_and(|s| !s.train.is_empty())
                    })
                    .count();
                if active == 0 {
                    return Err(Error::InvalidArgument(
                        "no task has training examples".into(),
                    ));
                }
                let mut per = config.clone();
                per.steps = (config.steps / active as u64).max(1);
                per.warmup = config.warmup.min(per.steps);
                let mut eval = BTreeMap::new();
                for (name, model) in models.iter_mut() {
                    let Some(splits) = data.get(name) else { continue };
                    if splits.train.is_empty() {
                        continue;
                    }
                    let mut solo = Dataset::new();
                    solo.insert(name.clone(), splits.clone());
                    per.seed = sub_seed(config.seed, &format!("train:{name}"));
                    let summary = train_multitask(model, &solo, &per, log)?;
                    eval.extend(summary.eval);
                }
                Ok(eval)
            }
        }
    }

    /// Metric per task over the given eval splits.
    pub fn evaluate(&self, data: &Dataset, batch_size: usize) -> Result<BTreeMap<String, f64>> {
        match self {
            System::Unified { model, .. } => {
                Ok(evaluate_all(model, data, batch_size)?.into_iter().collect())
            }
            System::PerTask { models } => {
                let mut out = BTreeMap::new();
                for (name, model) in models {
                    if let Some(splits) = data.get(name) {
                        if !splits.eval.is_empty() {
                            out.insert(
                                name.clone(),
                                model.evaluate(name, &splits.eval, batch_size)?,
                            );
                        }
                    }
                }
                Ok(out)
            }
        }
    }
}
