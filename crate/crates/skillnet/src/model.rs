//! Task-routed multi-task model: one shared encoder whose upper-layer
//! feed-forward banks are selected per task by the routing table, plus
//! one output head per task. Ties together example encoding, loss
//! construction, prediction, and metric evaluation.

use rand_chacha::ChaCha20Rng;

use crate::data::metrics;
use crate::data::vocab::{Vocab, CLS, PAD, SEP};
use crate::data::Example;
use crate::encoder::{EncodedBatch, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::heads::{
    argmax_row, cls_logits, cls_loss, span_decode, span_logits, span_loss, tag_decode, tag_loss,
    TaskHead,
};
use crate::rng::derived;
use crate::routing::{
    canonical_skill_set, standard_tasks, MetricKind, RoutingTable, Skill, SkillRegistry, TaskKind,
    TaskSpec,
};
use crate::tensor::{NodeId, ParamSet, Tape};

/// Longest decodable answer span, in passage tokens.
pub const DEFAULT_MAX_ANSWER_LEN: usize = 8;

pub struct MultiTaskModel {
    encoder: Encoder,
    registry: SkillRegistry,
    routing: RoutingTable,
    tasks: Vec<TaskSpec>,
    vocab: Vocab,
    pub params: ParamSet,
    pub max_answer_len: usize,
}

/// Encoded batch plus the supervision targets for one task.
pub struct TaskBatch {
    pub encoded: EncodedBatch,
    pub targets: Targets,
}

pub enum Targets {
    Classes {
        labels: Vec<usize>,
        groups: Vec<Option<usize>>,
    },
    /// One tag row per example, aligned with the unpadded token rows.
    Tags { rows: Vec<Vec<usize>> },
    Spans {
        /// Row-major [B * L] passage eligibility.
        passage: Vec<bool>,
        /// Gold boundaries in encoded-row coordinates.
        starts: Vec<usize>,
        ends: Vec<usize>,
        /// Where each passage begins in its encoded row.
        offsets: Vec<usize>,
    },
}

pub enum Prediction {
    Classes {
        argmax: Vec<usize>,
        /// Softmax probability of class 1; meaningful for binary heads.
        positive: Vec<f64>,
    },
    Tags(Vec<Vec<usize>>),
    /// (start, end) in passage-token coordinates.
    Spans(Vec<(usize, usize)>),
}

impl MultiTaskModel {
    /// Fresh parameters for the encoder and every task head, drawn from a
    /// stream derived from `seed`.
    pub fn init(
        config: EncoderConfig,
        registry: SkillRegistry,
        tasks: Vec<TaskSpec>,
        seed: u64,
    ) -> Result<Self> {
        let mut params = ParamSet::new();
        let mut rng = derived(seed, "model-init");
        let encoder = Encoder::init(config, &registry, &mut params, &mut rng)?;
        for task in &tasks {
            task.validate()?;
            TaskHead::for_task(&task.kind).init(
                &task.name,
                &mut params,
                &mut rng,
                encoder.config().hidden,
                encoder.config().init_std,
            )?;
        }
        Self::attach(encoder, registry, tasks, params)
    }

    /// Bind to existing parameters (e.g. loaded from a checkpoint).
    pub fn attach(
        encoder: Encoder,
        registry: SkillRegistry,
        tasks: Vec<TaskSpec>,
        params: ParamSet,
    ) -> Result<Self> {
        let routing = RoutingTable::resolve(&registry, &tasks)?;
        let vocab = Vocab::standard();
        if vocab.len() != encoder.config().vocab_size {
            return Err(Error::InvalidArgument(format!(
                "config expects a vocabulary of {}, standard vocabulary has {}",
                encoder.config().vocab_size,
                vocab.len()
            )));
        }
        Ok(Self {
            encoder,
            registry,
            routing,
            tasks,
            vocab,
            params,
            max_answer_len: DEFAULT_MAX_ANSWER_LEN,
        })
    }

    /// Desk-scale model over the standard vocabulary, skills, and tasks.
    pub fn standard(seed: u64) -> Result<Self> {
        let vocab = Vocab::standard();
        Self::init(
            EncoderConfig::desk_scale(vocab.len()),
            SkillRegistry::standard(),
            standard_tasks(),
            seed,
        )
    }

    pub fn from_checkpoint(cp: crate::checkpoint::Checkpoint) -> Result<Self> {
        let encoder = Encoder::attach(cp.config, &cp.registry)?;
        Self::attach(encoder, cp.registry, cp.tasks, cp.params)
    }

    pub fn save(&self, path: &std::path::Path, adam: Option<&crate::optim::Adam>) -> Result<()> {
        crate::checkpoint::save(path, self.encoder.config(), &self.registry, &self.tasks, &self.params, adam)
    }

    /// Register a new skill and give it feed-forward banks cloned bitwise
    /// from `clone_banks_from` at every skill layer. Existing tasks keep
    /// their routing; the new bank index is returned.
    pub fn add_skill(&mut self, skill: Skill, clone_banks_from: &str) -> Result<usize> {
        if skill.general {
            return Err(Error::Config(format!(
                "`{}` cannot be general: `{}` already is",
                skill.id,
                self.registry.get(self.registry.general_idx()).id
            )));
        }
        // The encoder rejects duplicate ids and unknown sources; its bank
        // list mirrors the registry, so the registry add cannot fail after
        // the banks exist.
        self.encoder
            .add_skill_bank(&mut self.params, &skill.id, clone_banks_from)?;
        self.registry.add(skill)
    }

    /// Register a new task with a freshly initialized head. The task's
    /// skills must already exist; routing is re-resolved for all tasks.
    pub fn add_task(&mut self, spec: TaskSpec, seed: u64) -> Result<()> {
        spec.validate()?;
        if self.tasks.iter().any(|t| t.name == spec.name) {
            return Err(Error::Duplicate(spec.name));
        }
        // Validate routing before touching parameters so a bad skill list
        // leaves the model unchanged.
        canonical_skill_set(&self.registry, &spec.skills)?;
        let mut rng = derived(seed, &format!("head-init:{}", spec.name));
        TaskHead::for_task(&spec.kind).init(
            &spec.name,
            &mut self.params,
            &mut rng,
            self.encoder.config().hidden,
            self.encoder.config().init_std,
        )?;
        self.tasks.push(spec);
        self.routing = RoutingTable::resolve(&self.registry, &self.tasks)?;
        Ok(())
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn registry(&self) -> &SkillRegistry {
        &self.registry
    }

    pub fn registry_mut(&mut self) -> &mut SkillRegistry {
        &mut self.registry
    }

    pub fn routing(&self) -> &RoutingTable {
        &self.routing
    }

    /// Swap in a replacement routing table (e.g. one with a skill
    /// removed). The table must cover exactly this model's tasks and
    /// reference only registered skills.
    pub fn set_routing(&mut self, routing: RoutingTable) -> Result<()> {
        if routing.len() != self.tasks.len() {
            return Err(Error::InvalidArgument(format!(
                "routing covers {} tasks, model has {}",
                routing.len(),
                self.tasks.len()
            )));
        }
        for task in &self.tasks {
            let skills = routing.skills_for(&task.name)?;
            if let Some(&bad) = skills.iter().find(|&&s| s >= self.registry.len()) {
                return Err(Error::InvalidArgument(format!(
                    "task {} routes to skill index {bad}, registry has {}",
                    task.name,
                    self.registry.len()
                )));
            }
        }
        self.routing = routing;
        Ok(())
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn task(&self, name: &str) -> Result<&TaskSpec> {
        self.tasks
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::UnknownTask(name.to_string()))
    }

    /// Bank indices this task activates, ascending.
    pub fn active_skills(&self, task: &str) -> Result<&[usize]> {
        self.routing.skills_for(task)
    }

    /// Every parameter that takes gradient for this task: the shared
    /// trunk, the task's active banks, and the task's head.
    pub fn active_param_names(&self, task: &str) -> Result<Vec<String>> {
        let spec = self.task(task)?;
        let mut names = self
            .encoder
            .active_param_names(self.routing.skills_for(task)?)?;
        names.extend(TaskHead::for_task(&spec.kind).param_names(task));
        Ok(names)
    }

    fn pad_rows(
        rows: Vec<Vec<usize>>,
        types: Vec<Vec<usize>>,
    ) -> Result<EncodedBatch> {
        let width = rows.iter().map(Vec::len).max().unwrap_or(0);
        let lens: Vec<usize> = rows.iter().map(Vec::len).collect();
        let pad = |mut r: Vec<usize>| {
            r.resize(width, PAD);
            r
        };
        let rows: Vec<Vec<usize>> = rows.into_iter().map(pad).collect();
        let types: Vec<Vec<usize>> = types
            .into_iter()
            .map(|mut t| {
                t.resize(width, 0);
                t
            })
            .collect();
        EncodedBatch::new(rows, types, lens)
    }

    fn expect_err(&self, task: &str, got: &Example) -> Error {
        let what = match got {
            Example::Pair { .. } => "a sentence pair",
            Example::Single { .. } => "a single sentence",
            Example::Tagged { .. } => "a tagged sentence",
            Example::Span { .. } => "a question/passage pair",
        };
        Error::InvalidArgument(format!("task {task} cannot consume {what}"))
    }

    /// Turn raw examples into a padded batch plus targets for `task`.
    pub fn encode_batch(&self, task: &str, examples: &[Example]) -> Result<TaskBatch> {
        if examples.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let spec = self.task(task)?;
        let max_len = self.encoder.config().max_len;
        match spec.kind {
            TaskKind::SingleClass { classes } => {
                let mut rows = Vec::new();
                let mut types = Vec::new();
                let mut labels = Vec::new();
                for e in examples {
                    let Example::Single { text, label } = e else {
                        return Err(self.expect_err(task, e));
                    };
                    check_label(task, *label, classes)?;
                    let (ids, tys) = self.vocab.encode_single(text, max_len)?;
                    rows.push(ids);
                    types.push(tys);
                    labels.push(*label);
                }
                let groups = vec![None; labels.len()];
                Ok(TaskBatch {
                    encoded: Self::pad_rows(rows, types)?,
                    targets: Targets::Classes { labels, groups },
                })
            }
            TaskKind::PairClass { classes } => {
                let mut rows = Vec::new();
                let mut types = Vec::new();
                let mut labels = Vec::new();
                let mut groups = Vec::new();
                for e in examples {
                    let Example::Pair { text_a, text_b, label, group } = e else {
                        return Err(self.expect_err(task, e));
                    };
                    check_label(task, *label, classes)?;
                    let (ids, tys) = self.vocab.encode_pair(text_a, text_b, max_len)?;
                    rows.push(ids);
                    types.push(tys);
                    labels.push(*label);
                    groups.push(*group);
                }
                Ok(TaskBatch {
                    encoded: Self::pad_rows(rows, types)?,
                    targets: Targets::Classes { labels, groups },
                })
            }
            TaskKind::SeqLabel { tags } => {
                // tagged rows carry no marker tokens: emissions align
                // one-to-one with the words being labeled
                let mut rows = Vec::new();
                let mut types = Vec::new();
                let mut tag_rows = Vec::new();
                for e in examples {
                    let Example::Tagged { tokens, tags: gold } = e else {
                        return Err(self.expect_err(task, e));
                    };
                    let take = tokens.len().min(max_len);
                    let ids: Vec<usize> = tokens[..take]
                        .iter()
                        .map(|t| self.vocab.id_or_unk(t))
                        .collect();
                    let row: Vec<usize> = gold[..take]
                        .iter()
                        .map(|t| crate::data::tag_index(t))
                        .collect::<Result<_>>()?;
                    if row.iter().any(|&t| t >= tags) {
                        return Err(Error::InvalidArgument(format!(
                            "task {task} has {tags} tags but an example uses more"
                        )));
                    }
                    types.push(vec![0; ids.len()]);
                    rows.push(ids);
                    tag_rows.push(row);
                }
                Ok(TaskBatch {
                    encoded: Self::pad_rows(rows, types)?,
                    targets: Targets::Tags { rows: tag_rows },
                })
            }
            TaskKind::Span => {
                let mut rows = Vec::new();
                let mut types = Vec::new();
                let mut starts = Vec::new();
                let mut ends = Vec::new();
                let mut offsets = Vec::new();
                let mut passage_lens = Vec::new();
                for e in examples {
                    let Example::Span { question, passage, answer_start, answer_end } = e else {
                        return Err(self.expect_err(task, e));
                    };
                    let q = self.vocab.encode_words(question);
                    let p = self.vocab.encode_words(passage);
                    let total = 1 + q.len() + 1 + p.len() + 1;
                    if total > max_len {
                        return Err(Error::InvalidArgument(format!(
                            "task {task}: encoded question+passage of {total} exceeds {max_len}"
                        )));
                    }
                    let offset = 2 + q.len();
                    let mut ids = Vec::with_capacity(total);
                    ids.push(CLS);
                    ids.extend(&q);
                    ids.push(SEP);
                    ids.extend(&p);
                    ids.push(SEP);
                    let mut tys = vec![0; offset];
                    tys.resize(total, 1);
                    rows.push(ids);
                    types.push(tys);
                    starts.push(offset + answer_start);
                    ends.push(offset + answer_end);
                    offsets.push(offset);
                    passage_lens.push(p.len());
                }
                let encoded = Self::pad_rows(rows, types)?;
                let (b, l) = (encoded.batch(), encoded.seq_len());
                let mut passage = vec![false; b * l];
                for e in 0..b {
                    for t in offsets[e]..offsets[e] + passage_lens[e] {
                        passage[e * l + t] = true;
                    }
                }
                Ok(TaskBatch {
                    encoded,
                    targets: Targets::Spans { passage, starts, ends, offsets },
                })
            }
        }
    }

    fn hidden(
        &self,
        tape: &mut Tape,
        task: &str,
        encoded: &EncodedBatch,
        dropout_rng: Option<&mut ChaCha20Rng>,
    ) -> Result<NodeId> {
        let active = self.routing.skills_for(task)?;
        self.encoder
            .encode(tape, &self.params, encoded, active, dropout_rng)
    }

    /// Scalar training loss for one batch.
    pub fn loss(
        &self,
        tape: &mut Tape,
        task: &str,
        batch: &TaskBatch,
        dropout_rng: Option<&mut ChaCha20Rng>,
    ) -> Result<NodeId> {
        let spec = self.task(task)?;
        let hidden = self.hidden(tape, task, &batch.encoded, dropout_rng)?;
        match (&spec.kind, &batch.targets) {
            (TaskKind::SingleClass { .. } | TaskKind::PairClass { .. }, Targets::Classes { labels, .. }) => {
                Ok(cls_loss(tape, &self.params, task, hidden, labels)?.0)
            }
            (TaskKind::SeqLabel { .. }, Targets::Tags { rows }) => {
                tag_loss(tape, &self.params, task, hidden, batch.encoded.lens(), rows)
            }
            (TaskKind::Span, Targets::Spans { passage, starts, ends, .. }) => {
                Ok(span_loss(tape, &self.params, task, hidden, passage, starts, ends)?.loss)
            }
            _ => Err(Error::InvalidArgument(format!(
                "targets do not match task {task}"
            ))),
        }
    }

    /// Deterministic inference for one batch.
    pub fn predict(&self, task: &str, batch: &TaskBatch) -> Result<Prediction> {
        let spec = self.task(task)?;
        let mut tape = Tape::new();
        let hidden = self.hidden(&mut tape, task, &batch.encoded, None)?;
        match &spec.kind {
            TaskKind::SingleClass { .. } | TaskKind::PairClass { .. } => {
                let logits = cls_logits(&mut tape, &self.params, task, hidden)?;
                let probs = tape.softmax_rows(logits)?;
                let shape = tape.shape(probs).to_vec();
                let data = tape.data(probs);
                let mut argmax = Vec::with_capacity(shape[0]);
                let mut positive = Vec::with_capacity(shape[0]);
                for r in 0..shape[0] {
                    let row = &data[r * shape[1]..(r + 1) * shape[1]];
                    argmax.push(argmax_row(row));
                    positive.push(row.get(1).copied().unwrap_or(0.0));
                }
                Ok(Prediction::Classes { argmax, positive })
            }
            TaskKind::SeqLabel { .. } => Ok(Prediction::Tags(tag_decode(
                &mut tape,
                &self.params,
                task,
                hidden,
                batch.encoded.lens(),
            )?)),
            TaskKind::Span => {
                let Targets::Spans { passage, offsets, .. } = &batch.targets else {
                    return Err(Error::InvalidArgument(format!(
                        "targets do not match task {task}"
                    )));
                };
                let (sl, el) = span_logits(&mut tape, &self.params, task, hidden, passage)?;
                let sp = tape.softmax_rows(sl)?;
                let ep = tape.softmax_rows(el)?;
                let l = batch.encoded.seq_len();
                let sp = tape.data(sp).to_vec();
                let ep = tape.data(ep);
                let mut out = Vec::with_capacity(offsets.len());
                for (e, &off) in offsets.iter().enumerate() {
                    let (s, t) = span_decode(
                        &sp[e * l..(e + 1) * l],
                        &ep[e * l..(e + 1) * l],
                        self.max_answer_len,
                    );
                    // decoded positions sit inside the passage because
                    // off-passage probabilities are exactly zero
                    out.push((s.saturating_sub(off), t.saturating_sub(off)));
                }
                Ok(Prediction::Spans(out))
            }
        }
    }

    /// The task's metric over an example set, batched.
    pub fn evaluate(&self, task: &str, examples: &[Example], batch_size: usize) -> Result<f64> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("zero batch size".into()));
        }
        let spec = self.task(task)?;
        let mut argmax = Vec::new();
        let mut positive = Vec::new();
        let mut labels = Vec::new();
        let mut groups = Vec::new();
        let mut pred_tags = Vec::new();
        let mut gold_tags = Vec::new();
        let mut pred_spans = Vec::new();
        let mut gold_spans = Vec::new();
        for chunk in examples.chunks(batch_size) {
            let batch = self.encode_batch(task, chunk)?;
            match (self.predict(task, &batch)?, &batch.targets) {
                (Prediction::Classes { argmax: a, positive: p }, Targets::Classes { labels: l, groups: g }) => {
                    argmax.extend(a);
                    positive.extend(p);
                    labels.extend_from_slice(l);
                    groups.extend_from_slice(g);
                }
                (Prediction::Tags(p), Targets::Tags { rows }) => {
                    pred_tags.extend(p);
                    gold_tags.extend_from_slice(rows);
                }
                (Prediction::Spans(p), Targets::Spans { starts, ends, offsets, .. }) => {
                    pred_spans.extend(p);
                    for e in 0..chunk.len() {
                        gold_spans.push((starts[e] - offsets[e], ends[e] - offsets[e]));
                    }
                }
                _ => unreachable!("prediction shape follows the task kind"),
            }
        }
        match spec.metric {
            MetricKind::Accuracy => metrics::accuracy(&argmax, &labels),
            MetricKind::BinaryF1 => metrics::binary_f1(&argmax, &labels),
            MetricKind::EntityF1 => metrics::entity_f1(&pred_tags, &gold_tags),
            MetricKind::SpanF1 => metrics::span_f1(&pred_spans, &gold_spans),
            MetricKind::GroupTop1 => {
                let mut grouped: std::collections::BTreeMap<usize, Vec<(f64, bool)>> =
                    std::collections::BTreeMap::new();
                for ((g, &score), &label) in groups.iter().zip(&positive).zip(&labels) {
                    let g = g.ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "task {task} ranks grouped candidates but an example has no group"
                        ))
                    })?;
                    grouped.entry(g).or_default().push((score, label == 1));
                }
                let rows: Vec<Vec<(f64, bool)>> = grouped.into_values().collect();
                metrics::group_top1(&rows)
            }
        }
    }
}

fn check_label(task: &str, label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(Error::InvalidArgument(format!(
            "task {task}: label {label} outside {classes} classes"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{
        gen_med_rank, gen_ner, gen_nli, gen_paraphrase, gen_sentiment, gen_span_qa, gen_topic,
        new_task_specs,
    };
    use crate::data::vocab;
    use crate::rng::derived;

    fn tiny_config() -> EncoderConfig {
        let mut c = EncoderConfig::desk_scale(Vocab::standard().len());
        c.hidden = 16;
        c.heads = 2;
        c.ffn_inner = 24;
        c.max_len = 48;
        c
    }

    fn tiny_model() -> MultiTaskModel {
        MultiTaskModel::init(tiny_config(), SkillRegistry::standard(), standard_tasks(), 11)
            .unwrap()
    }

    #[test]
    fn same_seed_initializes_identically() {
        let a = tiny_model();
        let b = tiny_model();
        for (pa, pb) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.name(), pb.name());
            assert!(pa.value.bits_eq(&pb.value));
        }
        let c =
            MultiTaskModel::init(tiny_config(), SkillRegistry::standard(), standard_tasks(), 12)
                .unwrap();
        assert!(a
            .params
            .iter()
            .zip(c.params.iter())
            .any(|(x, y)| !x.value.bits_eq(&y.value)));
    }

    #[test]
    fn classification_rows_carry_marker_layout() {
        let m = tiny_model();
        let examples = gen_sentiment(&mut derived(3, "m1"), 4);
        let batch = m.encode_batch("sentiment", &examples).unwrap();
        let l = batch.encoded.seq_len();
        for (e, &len) in batch.encoded.lens().iter().enumerate() {
            let row = &batch.encoded.tokens()[e * l..e * l + len];
            assert_eq!(row[0], vocab::CLS);
            assert_eq!(*row.last().unwrap(), vocab::SEP);
            for &t in &batch.encoded.tokens()[e * l + len..(e + 1) * l] {
                assert_eq!(t, vocab::PAD);
            }
        }
        let Targets::Classes { labels, groups } = &batch.targets else { panic!() };
        assert_eq!(labels.len(), 4);
        assert!(groups.iter().all(Option::is_none));
    }

    #[test]
    fn pair_rows_switch_segment_after_first_separator() {
        let m = tiny_model();
        let examples = gen_nli(&mut derived(3, "m2"), 3);
        let batch = m.encode_batch("nli", &examples).unwrap();
        let l = batch.encoded.seq_len();
        for (e, &len) in batch.encoded.lens().iter().enumerate() {
            let row = &batch.encoded.tokens()[e * l..e * l + len];
            let tys = &batch.encoded.types()[e * l..e * l + len];
            let first_sep = row.iter().position(|&t| t == vocab::SEP).unwrap();
            assert!(tys[..=first_sep].iter().all(|&t| t == 0));
            assert!(tys[first_sep + 1..].iter().all(|&t| t == 1));
        }
    }

    #[test]
    fn tagged_rows_align_one_to_one_with_words() {
        let m = tiny_model();
        let examples = gen_ner(&mut derived(3, "m3"), 4);
        let batch = m.encode_batch("ner", &examples).unwrap();
        let Targets::Tags { rows } = &batch.targets else { panic!() };
        for (e, ex) in examples.iter().enumerate() {
            let Example::Tagged { tokens, .. } = ex else { panic!() };
            assert_eq!(batch.encoded.lens()[e], tokens.len());
            assert_eq!(rows[e].len(), tokens.len());
            let l = batch.encoded.seq_len();
            let row = &batch.encoded.tokens()[e * l..e * l + tokens.len()];
            assert!(row.iter().all(|&t| t != vocab::CLS && t != vocab::SEP));
        }
    }

    #[test]
    fn span_offsets_map_answers_into_the_passage() {
        let m = tiny_model();
        let examples = gen_span_qa(&mut derived(3, "m4"), 4);
        let batch = m.encode_batch("span_qa", &examples).unwrap();
        let Targets::Spans { passage, starts, ends, offsets } = &batch.targets else {
            panic!()
        };
        let l = batch.encoded.seq_len();
        for (e, ex) in examples.iter().enumerate() {
            let Example::Span { passage: ptext, answer_start, answer_end, .. } = ex else {
                panic!()
            };
            let plen = ptext.split_whitespace().count();
            assert_eq!(starts[e] - offsets[e], *answer_start);
            assert_eq!(ends[e] - offsets[e], *answer_end);
            let toks = &batch.encoded.tokens()[e * l..(e + 1) * l];
            assert_eq!(toks[offsets[e] - 1], vocab::SEP);
            assert_eq!(toks[offsets[e] + plen], vocab::SEP);
            for t in 0..l {
                let inside = t >= offsets[e] && t < offsets[e] + plen;
                assert_eq!(passage[e * l + t], inside);
            }
            assert!(passage[e * l + starts[e]] && passage[e * l + ends[e]]);
        }
    }

    #[test]
    fn mismatched_example_kinds_are_rejected() {
        let m = tiny_model();
        let pair = gen_nli(&mut derived(3, "m5"), 1);
        assert!(m.encode_batch("sentiment", &pair).is_err());
        let single = gen_sentiment(&mut derived(3, "m5b"), 1);
        assert!(m.encode_batch("ner", &single).is_err());
        assert!(m.encode_batch("nope", &single).is_err());
        assert!(m.encode_batch("sentiment", &[]).is_err());
    }

    #[test]
    fn active_names_cover_trunk_active_banks_and_own_head() {
        let m = tiny_model();
        let names = m.active_param_names("sentiment").unwrap();
        let skill_layer = m.encoder().config().layers - 1;
        let has = |n: &str| names.iter().any(|x| x == n);
        assert!(has("embed.token"));
        assert!(has(&format!("layer.{skill_layer}.ffn.s1.w1")));
        assert!(has(&format!("layer.{skill_layer}.ffn.s4.w1")));
        assert!(has(&format!("layer.{skill_layer}.ffn.s7.w1")));
        assert!(!has(&format!("layer.{skill_layer}.ffn.s2.w1")));
        assert!(has("head.sentiment.cls.w"));
        assert!(!has("head.nli.cls.w"));
        for n in &names {
            assert!(m.params.contains(n), "{n} not in the parameter set");
        }
    }

    #[test]
    fn backward_touches_only_active_banks_and_own_head() {
        let mut m = tiny_model();
        let examples = gen_sentiment(&mut derived(3, "m6"), 4);
        let batch = m.encode_batch("sentiment", &examples).unwrap();
        let mut tape = Tape::new();
        let loss = m.loss(&mut tape, "sentiment", &batch, None).unwrap();
        assert!(tape.data(loss)[0].is_finite());
        let mut params = std::mem::replace(&mut m.params, ParamSet::new());
        params.zero_grads();
        tape.backward(loss, &mut params).unwrap();
        let norm = |name: &str| -> f64 {
            params
                .by_name(name)
                .unwrap()
                .grad
                .data()
                .iter()
                .map(|g| g * g)
                .sum()
        };
        let skill_layer = m.encoder().config().layers - 1;
        assert!(norm("embed.token") > 0.0);
        assert!(norm(&format!("layer.{skill_layer}.ffn.s1.w1")) > 0.0);
        assert!(norm("head.sentiment.cls.w") > 0.0);
        assert_eq!(norm(&format!("layer.{skill_layer}.ffn.s2.w1")), 0.0);
        assert_eq!(norm(&format!("layer.{skill_layer}.ffn.s3.w1")), 0.0);
        assert_eq!(norm("head.nli.cls.w"), 0.0);
    }

    #[test]
    fn losses_and_predictions_run_for_every_task_kind() {
        let m = tiny_model();
        let mut rng = derived(3, "m7");
        let sets: Vec<(&str, Vec<Example>)> = vec![
            ("sentiment", gen_sentiment(&mut rng, 6)),
            ("nli", gen_nli(&mut rng, 6)),
            ("paraphrase", gen_paraphrase(&mut rng, 6)),
            ("topic", gen_topic(&mut rng, 6)),
            ("ner", gen_ner(&mut rng, 6)),
            ("span_qa", gen_span_qa(&mut rng, 6)),
        ];
        for (task, examples) in &sets {
            let batch = m.encode_batch(task, examples).unwrap();
            let mut tape = Tape::new();
            let loss = m.loss(&mut tape, task, &batch, None).unwrap();
            let v = tape.data(loss)[0];
            assert!(v.is_finite() && v > 0.0, "{task} loss {v}");
            match m.predict(task, &batch).unwrap() {
                Prediction::Classes { argmax, positive } => {
                    assert_eq!(argmax.len(), examples.len());
                    assert_eq!(positive.len(), examples.len());
                }
                Prediction::Tags(rows) => {
                    assert_eq!(rows.len(), examples.len());
                    for (r, &len) in rows.iter().zip(batch.encoded.lens()) {
                        assert_eq!(r.len(), len);
                    }
                }
                Prediction::Spans(spans) => {
                    assert_eq!(spans.len(), examples.len());
                    for (s, t) in spans {
                        assert!(s <= t);
                    }
                }
            }
            let score = m.evaluate(task, examples, 4).unwrap();
            assert!((0.0..=1.0).contains(&score), "{task} metric {score}");
        }
    }

    #[test]
    fn grouped_ranking_requires_group_ids() {
        let mut tasks = standard_tasks();
        tasks.extend(new_task_specs());
        let m =
            MultiTaskModel::init(tiny_config(), SkillRegistry::standard(), tasks, 11).unwrap();
        let groups = gen_med_rank(&mut derived(3, "m8"), 10);
        let score = m.evaluate("med_rank", &groups, 8).unwrap();
        assert!((0.0..=1.0).contains(&score));
        // examples without group ids cannot be ranked
        let ungrouped = gen_nli(&mut derived(3, "m8b"), 4);
        assert!(m.evaluate("med_rank", &ungrouped, 4).is_err());
    }

    #[test]
    fn checkpoint_round_trip_restores_the_model_bitwise() {
        let m = tiny_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        m.save(&path, None).unwrap();
        let restored =
            MultiTaskModel::from_checkpoint(crate::checkpoint::load(&path).unwrap()).unwrap();
        assert_eq!(m.params.len(), restored.params.len());
        for (a, b) in m.params.iter().zip(restored.params.iter()) {
            assert_eq!(a.name(), b.name());
            assert!(a.value.bits_eq(&b.value));
        }
        let examples = gen_sentiment(&mut derived(3, "m9"), 3);
        let batch = m.encode_batch("sentiment", &examples).unwrap();
        let (Prediction::Classes { positive: p1, .. }, Prediction::Classes { positive: p2, .. }) = (
            m.predict("sentiment", &batch).unwrap(),
            restored.predict("sentiment", &batch).unwrap(),
        ) else {
            panic!()
        };
        assert_eq!(p1, p2);
    }

    #[test]
    fn token_routed_mixture_models_share_experts_across_tasks() {
        let m = MultiTaskModel::init(
            tiny_config().with_moe(4),
            SkillRegistry::standard(),
            standard_tasks(),
            11,
        )
        .unwrap();
        // tasks with disjoint skill sets still train the same encoder set;
        // only the heads differ
        let strip_head = |names: Vec<String>| -> Vec<String> {
            names.into_iter().filter(|n| !n.starts_with("head.")).collect()
        };
        let a = strip_head(m.active_param_names("sentiment").unwrap());
        let b = strip_head(m.active_param_names("ner").unwrap());
        assert_eq!(a, b);
        assert!(a.iter().any(|n| n.contains(".moe.gate.")));

        let examples = gen_sentiment(&mut derived(3, "m10"), 4);
        let batch = m.encode_batch("sentiment", &examples).unwrap();
        let mut tape = Tape::new();
        let loss = m.loss(&mut tape, "sentiment", &batch, None).unwrap();
        assert!(tape.data(loss)[0].is_finite());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("moe.ckpt");
        m.save(&path, None).unwrap();
        let restored =
            MultiTaskModel::from_checkpoint(crate::checkpoint::load(&path).unwrap()).unwrap();
        assert_eq!(restored.encoder().config().moe_experts, 4);
        let (Prediction::Classes { positive: p1, .. }, Prediction::Classes { positive: p2, .. }) = (
            m.predict("sentiment", &batch).unwrap(),
            restored.predict("sentiment", &batch).unwrap(),
        ) else {
            panic!()
        };
        assert_eq!(p1, p2);
    }
}
