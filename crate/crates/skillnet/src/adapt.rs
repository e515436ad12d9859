//! Growing a trained model: inject a new skill whose feed-forward banks
//! start as a bitwise clone of the general banks, register a new task
//! routed through it, and fine-tune on that task alone — optionally with
//! every previously trained parameter frozen so old tasks cannot drift.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::heads::TaskHead;
use crate::model::MultiTaskModel;
use crate::routing::{Skill, TaskSpec};
use crate::trainer::{train_with_trainable, Dataset, RunLog, TaskSplits, TrainConfig, TrainSummary};

/// How to extend a trained model with one more task.
#[derive(Debug, Clone)]
pub struct AdaptationPlan {
    /// The task to add; its skill list may name `new_skill`.
    pub task: TaskSpec,
    /// Skill to inject first. Its banks are cloned from the general skill
    /// so the new module starts from broadly useful features.
    pub new_skill: Option<Skill>,
    /// When false, only the injected banks and the new head may move;
    /// everything the old tasks rely on stays frozen.
    pub update_old_skills: bool,
    /// Seed for the new head's initialization.
    pub head_seed: u64,
}

impl AdaptationPlan {
    pub fn new(task: TaskSpec) -> Self {
        Self {
            task,
            new_skill: None,
            update_old_skills: false,
            head_seed: 7,
        }
    }

    pub fn with_skill(mut self, skill: Skill) -> Self {
        self.new_skill = Some(skill);
        self
    }

    pub fn updating_old_skills(mut self, yes: bool) -> Self {
        self.update_old_skills = yes;
        self
    }

    pub fn with_head_seed(mut self, seed: u64) -> Self {
        self.head_seed = seed;
        self
    }
}

/// What an adaptation run changed and how training went.
#[derive(Debug, Clone)]
pub struct AdaptationReport {
    pub task: String,
    pub injected_skill: Option<String>,
    /// Skill ids the new task activates, in bank order.
    pub active_skills: Vec<String>,
    /// Parameters the run was allowed to update.
    pub trainable: Vec<String>,
    /// How many parameters stayed frozen.
    pub frozen: usize,
    /// True when only the head could move: no injected skill and old
    /// skills frozen. Legal, but the encoder cannot specialize at all.
    pub head_only: bool,
    pub summary: TrainSummary,
}

/// Inject the plan's skill (if any), register its task, and return the
/// parameter names the plan allows to train.
pub fn install(model: &mut MultiTaskModel, plan: &AdaptationPlan) -> Result<Vec<String>> {
    if let Some(skill) = &plan.new_skill {
        let general = model
            .registry()
            .get(model.registry().general_idx())
            .id
            .clone();
        model.add_skill(skill.clone(), &general)?;
    }
    model.add_task(plan.task.clone(), plan.head_seed)?;
    trainable_names(model, plan)
}

fn trainable_names(model: &MultiTaskModel, plan: &AdaptationPlan) -> Result<Vec<String>> {
    if plan.update_old_skills {
        return model.active_param_names(&plan.task.name);
    }
    let mut names = Vec::new();
    if let Some(skill) = &plan.new_skill {
        names.extend(model.encoder().skill_bank_names(&skill.id)?);
    }
    names.extend(TaskHead::for_task(&plan.task.kind).param_names(&plan.task.name));
    Ok(names)
}

/// Install the plan and fine-tune on the new task's data alone.
pub fn adapt(
    model: &mut MultiTaskModel,
    plan: &AdaptationPlan,
    data: &TaskSplits,
    config: &TrainConfig,
    log: &mut RunLog,
) -> Result<AdaptationReport> {
    let trainable = install(model, plan)?;
    let head_only = plan.new_skill.is_none() && !plan.update_old_skills;
    log.note(
        "adapt",
        serde_json::json!({
            "task": plan.task.name,
            "injected": plan.new_skill.as_ref().map(|s| s.id.clone()),
            "update_old_skills": plan.update_old_skills,
            "trainable": trainable.len(),
            "head_only": head_only,
        }),
    )?;

    let mut dataset = Dataset::new();
    dataset.insert(plan.task.name.clone(), data.clone());
    let mut per_task = BTreeMap::new();
    per_task.insert(plan.task.name.clone(), trainable.clone());
    let summary = train_with_trainable(model, &dataset, config, log, &per_task)?;

    let active_skills = model
        .active_skills(&plan.task.name)?
        .iter()
        .map(|&k| model.registry().get(k).id.clone())
        .collect();
    Ok(AdaptationReport {
        task: plan.task.name.clone(),
        injected_skill: plan.new_skill.as_ref().map(|s| s.id.clone()),
        active_skills,
        trainable: trainable.clone(),
        frozen: model.params.len() - trainable.len(),
        head_only,
        summary,
    })
}
