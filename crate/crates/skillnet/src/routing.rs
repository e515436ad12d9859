//! Skills, tasks, and the table that routes each task to its skill modules.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Skill {
    pub id: String,
    #[serde(default)]
    pub description: String,
    /// The general skill is activated for every task regardless of routing.
    #[serde(default)]
    pub general: bool,
}

impl Skill {
    pub fn new(id: &str, description: &str) -> Self {
        Self {
            id: id.into(),
            description: description.into(),
            general: false,
        }
    }

    pub fn general(id: &str, description: &str) -> Self {
        Self {
            id: id.into(),
            description: description.into(),
            general: true,
        }
    }
}

/// Ordered skill inventory. Order is load-bearing: it fixes parameter-bank
/// indices, canonical routing order, and checkpoint layout.
#[derive(Debug, Clone)]
pub struct SkillRegistry {
    skills: Vec<Skill>,
    index: HashMap<String, usize>,
    general: usize,
}

impl SkillRegistry {
    pub fn new(skills: Vec<Skill>) -> Result<Self> {
        if skills.is_empty() {
            return Err(Error::Config("skill registry is empty".into()));
        }
        let mut index = HashMap::new();
        let mut general = None;
        for (i, s) in skills.iter().enumerate() {
            if index.insert(s.id.clone(), i).is_some() {
                return Err(Error::Duplicate(s.id.clone()));
            }
            if s.general {
                if general.is_some() {
                    return Err(Error::Config(format!(
                        "more than one general skill (`{}`)",
                        s.id
                    )));
                }
                general = Some(i);
            }
        }
        let general = general
            .ok_or_else(|| Error::Config("no skill is marked general".into()))?;
        Ok(Self {
            skills,
            index,
            general,
        })
    }

    /// The seven-skill inventory used by the reference task suite.
    pub fn standard() -> Self {
        Self::new(vec![
            Skill::new("s1", "understand the meaning of a single sentence"),
            Skill::new("s2", "understand tokens and entities within a text"),
            Skill::new("s3", "understand the relation between two text segments"),
            Skill::new("s4", "judge sentiment and subjective tone"),
            Skill::new("s5", "answer questions against a context"),
            Skill::new("s6", "judge whether two texts mean the same thing"),
            Skill::general("s7", "general-purpose representation, always active"),
        ])
        .expect("standard registry is well-formed")
    }

    pub fn idx(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownSkill(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn get(&self, idx: usize) -> &Skill {
        &self.skills[idx]
    }

    pub fn id_of(&self, idx: usize) -> &str {
        &self.skills[idx].id
    }

    pub fn general_idx(&self) -> usize {
        self.general
    }

    pub fn len(&self) -> usize {
        self.skills.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skills.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Skill> {
        self.skills.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.skills.iter().map(|s| s.id.as_str())
    }

    /// Append a new (non-general) skill, returning its bank index.
    pub fn add(&mut self, skill: Skill) -> Result<usize> {
        if self.index.contains_key(&skill.id) {
            return Err(Error::Duplicate(skill.id));
        }
        if skill.general {
            return Err(Error::Config(format!(
                "`{}` cannot be general: `{}` already is",
                skill.id,
                self.skills[self.general].id
            )));
        }
        let idx = self.skills.len();
        self.index.insert(skill.id.clone(), idx);
        self.skills.push(skill);
        Ok(idx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    SingleClass { classes: usize },
    PairClass { classes: usize },
    SeqLabel { tags: usize },
    Span,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    BinaryF1,
    EntityF1,
    SpanF1,
    GroupTop1,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: TaskKind,
    pub metric: MetricKind,
    /// Raw skill ids from configuration; canonicalized during resolution.
    pub skills: Vec<String>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TaskKind::SingleClass { classes } | TaskKind::PairClass { classes } if classes < 2 => {
                Err(Error::Config(format!(
                    "task `{}` needs at least 2 classes",
                    self.name
                )))
            }
            TaskKind::SeqLabel { tags } if tags < 1 => Err(Error::Config(format!(
                "task `{}` needs at least 1 tag",
                self.name
            ))),
            _ => Ok(()),
        }
    }
}

/// Sort, dedupe, and force-include the general skill. The result is the
/// canonical activation set: ascending bank indices.
pub fn canonical_skill_set(registry: &SkillRegistry, ids: &[String]) -> Result<Vec<usize>> {
    let mut idxs = Vec::with_capacity(ids.len() + 1);
    for id in ids {
        idxs.push(registry.idx(id)?);
    }
    idxs.push(registry.general_idx());
    idxs.sort_unstable();
    idxs.dedup();
    Ok(idxs)
}

#[derive(Debug, Clone)]
pub struct RoutingTable {
    entries: Vec<(String, Vec<usize>)>,
    by_name: HashMap<String, usize>,
}

impl RoutingTable {
    pub fn resolve(registry: &SkillRegistry, tasks: &[TaskSpec]) -> Result<Self> {
        let mut entries = Vec::with_capacity(tasks.len());
        let mut by_name = HashMap::new();
        for t in tasks {
            t.validate()?;
            if by_name.insert(t.name.clone(), entries.len()).is_some() {
                return Err(Error::Duplicate(t.name.clone()));
            }
            entries.push((t.name.clone(), canonical_skill_set(registry, &t.skills)?));
        }
        Ok(Self { entries, by_name })
    }

    pub fn skills_for(&self, task: &str) -> Result<&[usize]> {
        self.by_name
            .get(task)
            .map(|&i| self.entries[i].1.as_slice())
            .ok_or_else(|| Error::UnknownTask(task.to_string()))
    }

    pub fn task_names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.entries.iter().map(|(n, s)| (n.as_str(), s.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Union of all tasks' active skills, ascending.
    pub fn active_union(&self) -> Vec<usize> {
        let mut u: Vec<usize> = self.entries.iter().flat_map(|(_, s)| s.iter().copied()).collect();
        u.sort_unstable();
        u.dedup();
        u
    }

    /// Overwrite one task's activation set with a canonicalized replacement.
    pub fn set_skills(
        &mut self,
        registry: &SkillRegistry,
        task: &str,
        ids: &[String],
    ) -> Result<()> {
        let i = *self
            .by_name
            .get(task)
            .ok_or_else(|| Error::UnknownTask(task.to_string()))?;
        self.entries[i].1 = canonical_skill_set(registry, ids)?;
        Ok(())
    }

    /// Drop one skill from every task's activation set. A task left with no
    /// skills falls back to the general skill, or to the lowest-index
    /// remaining skill when the general skill itself was dropped.
    pub fn ablate(&self, registry: &SkillRegistry, skill_id: &str) -> Result<Self> {
        let removed = registry.idx(skill_id)?;
        let fallback = if removed == registry.general_idx() {
            (0..registry.len()).find(|&i| i != removed).ok_or_else(|| {
                Error::Config("cannot ablate the only skill".into())
            })?
        } else {
            registry.general_idx()
        };
        let mut entries = Vec::with_capacity(self.entries.len());
        for (name, skills) in &self.entries {
            let mut kept: Vec<usize> = skills.iter().copied().filter(|&s| s != removed).collect();
            if kept.is_empty() {
                kept.push(fallback);
            }
            entries.push((name.clone(), kept));
        }
        Ok(Self {
            entries,
            by_name: self.by_name.clone(),
        })
    }
}

/// The six reference tasks and their skill routing.
pub fn standard_tasks() -> Vec<TaskSpec> {
    fn spec(name: &str, kind: TaskKind, metric: MetricKind, skills: &[&str]) -> TaskSpec {
        TaskSpec {
            name: name.into(),
            kind,
            metric,
            skills: skills.iter().map(|s| s.to_string()).collect(),
        }
    }
    vec![
        spec(
            "sentiment",
            TaskKind::SingleClass { classes: 2 },
            MetricKind::Accuracy,
            &["s1", "s4"],
        ),
        spec(
            "nli",
            TaskKind::PairClass { classes: 3 },
            MetricKind::Accuracy,
            &["s1", "s3"],
        ),
        spec(
            "paraphrase",
            TaskKind::PairClass { classes: 2 },
            MetricKind::Accuracy,
            &["s1", "s3", "s6"],
        ),
        spec(
            "topic",
            TaskKind::SingleClass { classes: 5 },
            MetricKind::Accuracy,
            &["s1"],
        ),
        spec(
            "ner",
            TaskKind::SeqLabel { tags: 7 },
            MetricKind::EntityF1,
            &["s2"],
        ),
        spec(
            "span_qa",
            TaskKind::Span,
            MetricKind::SpanF1,
            &["s2", "s3", "s5"],
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_enforces_single_general() {
        let err = SkillRegistry::new(vec![
            Skill::general("a", ""),
            Skill::general("b", ""),
        ]);
        assert!(err.is_err());
        let err = SkillRegistry::new(vec![Skill::new("a", "")]);
        assert!(err.is_err());
        let mut reg = SkillRegistry::standard();
        assert!(reg.add(Skill::new("s1", "dup")).is_err());
        assert!(reg.add(Skill::general("s8", "")).is_err());
        let idx = reg.add(Skill::new("s8", "new domain")).unwrap();
        assert_eq!(idx, 7);
        assert_eq!(reg.idx("s8").unwrap(), 7);
    }

    #[test]
    fn canonical_sets_sort_dedupe_and_include_general() {
        let reg = SkillRegistry::standard();
        let set = canonical_skill_set(
            &reg,
            &["s4".into(), "s1".into(), "s4".into()],
        )
        .unwrap();
        assert_eq!(set, vec![0, 3, 6]);
        let set = canonical_skill_set(&reg, &[]).unwrap();
        assert_eq!(set, vec![6]);
        assert!(canonical_skill_set(&reg, &["nope".into()]).is_err());
    }

    #[test]
    fn standard_routing_sets() {
        let reg = SkillRegistry::standard();
        let table = RoutingTable::resolve(&reg, &standard_tasks()).unwrap();
        let sets: Vec<(&str, Vec<&str>)> = table
            .iter()
            .map(|(n, s)| (n, s.iter().map(|&i| reg.id_of(i)).collect()))
            .collect();
        assert_eq!(
            sets,
            vec![
                ("sentiment", vec!["s1", "s4", "s7"]),
                ("nli", vec!["s1", "s3", "s7"]),
                ("paraphrase", vec!["s1", "s3", "s6", "s7"]),
                ("topic", vec!["s1", "s7"]),
                ("ner", vec!["s2", "s7"]),
                ("span_qa", vec!["s2", "s3", "s5", "s7"]),
            ]
        );
        assert_eq!(table.active_union(), vec![0, 1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn duplicate_task_names_rejected() {
        let reg = SkillRegistry::standard();
        let mut tasks = standard_tasks();
        tasks[1].name = "sentiment".into();
        assert!(RoutingTable::resolve(&reg, &tasks).is_err());
    }

    #[test]
    fn ablate_removes_skill_with_general_fallback() {
        let reg = SkillRegistry::standard();
        let table = RoutingTable::resolve(&reg, &standard_tasks()).unwrap();

        let no_s1 = table.ablate(&reg, "s1").unwrap();
        assert_eq!(no_s1.skills_for("sentiment").unwrap(), &[3, 6]);
        assert_eq!(no_s1.skills_for("topic").unwrap(), &[6]);

        // dropping the general skill falls back to the lowest remaining index
        let no_s7 = table.ablate(&reg, "s7").unwrap();
        assert_eq!(no_s7.skills_for("topic").unwrap(), &[0]);
        assert_eq!(no_s7.skills_for("ner").unwrap(), &[1]);

        // a task reduced to nothing gets the general skill
        let mut tasks = standard_tasks();
        tasks[3].skills = vec![];
        let t = RoutingTable::resolve(&reg, &tasks).unwrap();
        let no_s7 = t.ablate(&reg, "s7").unwrap();
        assert_eq!(no_s7.skills_for("topic").unwrap(), &[0]);

        assert!(table.ablate(&reg, "zzz").is_err());
    }

    #[test]
    fn task_specs_serialize_round_trip() {
        let tasks = standard_tasks();
        let json = serde_json::to_string(&tasks).unwrap();
        let back: Vec<TaskSpec> = serde_json::from_str(&json).unwrap();
        assert_eq!(back.len(), 6);
        assert_eq!(back[4].kind, TaskKind::SeqLabel { tags: 7 });
        assert_eq!(back[5].kind, TaskKind::Span);
        assert_eq!(back[0].metric, MetricKind::Accuracy);
    }
}
