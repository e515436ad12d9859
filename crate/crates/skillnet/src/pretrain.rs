//! Self-supervised pre-training on an unlabeled corpus with two
//! objectives mixed at equal odds: masked-token recovery and sentence
//! ordering. Each objective activates its own subset of the skill banks,
//! so pre-training exercises the same sparse-routing machinery as
//! supervised training; afterwards the learned trunk and banks seed a
//! full multi-task model, with banks that never pre-trained starting as
//! copies of the general bank.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::data::vocab::{Vocab, SPECIALS};
use crate::encoder::{EncodedBatch, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::model::MultiTaskModel;
use crate::optim::{clip_global_norm, Adam, AdamConfig, LrSchedule};
use crate::rng::derived;
use crate::routing::{Skill, SkillRegistry};
use crate::tensor::{NodeId, ParamSet, Tape, Tensor};
use crate::trainer::RunLog;

/// Fraction of maskable positions selected for the masked-token objective.
pub const MASK_FRACTION: f64 = 0.15;
/// Of the selected positions: replaced by the mask token / replaced by a
/// random word / left unchanged.
pub const MASK_SPLIT: [f64; 3] = [0.8, 0.1, 0.1];

/// Skill ids active while recovering masked tokens.
pub const MASKED_TOKEN_SKILLS: [&str; 2] = ["s2", "s7"];
/// Skill ids active while judging sentence order.
pub const SENTENCE_ORDER_SKILLS: [&str; 3] = ["s1", "s3", "s7"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    MaskedTokens,
    SentenceOrder,
}

/// Equal-odds draw between the two objectives.
pub fn choose_objective(rng: &mut ChaCha20Rng) -> Objective {
    if rng.gen_bool(0.5) {
        Objective::MaskedTokens
    } else {
        Objective::SentenceOrder
    }
}

/// A corrupted token row plus the positions to reconstruct.
#[derive(Debug, Clone)]
pub struct MaskedRow {
    pub ids: Vec<usize>,
    /// (position, original id) for every selected position.
    pub targets: Vec<(usize, usize)>,
}

/// Select ~15% of the non-marker positions (at least one) and corrupt
/// them: 80% become the mask token, 10% a random word, 10% stay put.
/// The original id at every selected position is recorded as the target.
pub fn mask_tokens(rng: &mut ChaCha20Rng, ids: &[usize], vocab: &Vocab) -> Result<MaskedRow> {
    let candidates: Vec<usize> = (0..ids.len())
        .filter(|&i| !vocab.is_special(ids[i]))
        .collect();
    if candidates.is_empty() {
        return Err(Error::InvalidArgument(
            "row has no maskable positions".into(),
        ));
    }
    let mut selected: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|_| rng.gen_bool(MASK_FRACTION))
        .collect();
    if selected.is_empty() {
        selected.push(candidates[rng.gen_range(0..candidates.len())]);
    }
    let mut out = ids.to_vec();
    let mut targets = Vec::with_capacity(selected.len());
    let first_word = SPECIALS.len();
    for pos in selected {
        targets.push((pos, ids[pos]));
        let roll: f64 = rng.gen();
        if roll < MASK_SPLIT[0] {
            out[pos] = crate::data::vocab::MASK;
        } else if roll < MASK_SPLIT[0] + MASK_SPLIT[1] {
            out[pos] = rng.gen_range(first_word..vocab.len());
        }
    }
    Ok(MaskedRow { ids: out, targets })
}

/// Sentence inventory of an unlabeled corpus: documents are blank-line
/// separated, one sentence per line.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub docs: Vec<Vec<String>>,
}

impl Corpus {
    pub fn parse(text: &str) -> Result<Self> {
        let mut docs = Vec::new();
        let mut current = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                if !current.is_empty() {
                    docs.push(std::mem::take(&mut current));
                }
            } else {
                current.push(line.to_string());
            }
        }
        if !current.is_empty() {
            docs.push(current);
        }
        if docs.is_empty() {
            return Err(Error::Format("corpus has no documents".into()));
        }
        Ok(Self { docs })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn sentences(&self) -> impl Iterator<Item = &str> {
        self.docs.iter().flatten().map(String::as_str)
    }

    fn draw_sentence(&self, rng: &mut ChaCha20Rng) -> &str {
        let flat: usize = self.docs.iter().map(Vec::len).sum();
        let mut at = rng.gen_range(0..flat);
        for doc in &self.docs {
            if at < doc.len() {
                return &doc[at];
            }
            at -= doc.len();
        }
        unreachable!()
    }

    /// (first, second, label): label 1 means `second` really follows
    /// `first` in its document; label 0 pairs it with a sentence drawn
    /// from a different document.
    pub fn draw_pair(&self, rng: &mut ChaCha20Rng) -> Result<(&str, &str, usize)> {
        let long: Vec<usize> = (0..self.docs.len())
            .filter(|&i| self.docs[i].len() >= 2)
            .collect();
        if long.is_empty() || (self.docs.len() < 2 && long.len() < 2) {
            return Err(Error::InvalidArgument(
                "sentence ordering needs a multi-sentence document and a second document".into(),
            ));
        }
        let d = long[rng.gen_range(0..long.len())];
        let i = rng.gen_range(0..self.docs[d].len() - 1);
        let first = self.docs[d][i].as_str();
        if rng.gen_bool(0.5) {
            Ok((first, self.docs[d][i + 1].as_str(), 1))
        } else {
            let other = loop {
                let o = rng.gen_range(0..self.docs.len());
                if o != d {
                    break o;
                }
            };
            let s = rng.gen_range(0..self.docs[other].len());
            Ok((first, self.docs[other][s].as_str(), 0))
        }
    }
}

/// The four skills that exist at pre-training time; the rest of the
/// standard inventory is introduced later by the initialization handoff.
pub fn pretrain_registry() -> SkillRegistry {
    SkillRegistry::new(vec![
        Skill::new("s1", "pair relations"),
        Skill::new("s2", "token-level structure"),
        Skill::new("s3", "cross-sentence inference"),
        Skill::general("s7", "general language"),
    ])
    .expect("fixed registry is valid")
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup: u64,
    pub clip_norm: f64,
    pub seed: u64,
    pub log_every: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            peak_lr: 1e-3,
            warmup: 100,
            clip_norm: 1.0,
            seed: 7,
            log_every: 50,
        }
    }
}

pub struct PretrainModel {
    encoder: Encoder,
    registry: SkillRegistry,
    vocab: Vocab,
    pub params: ParamSet,
}

impl PretrainModel {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        let registry = pretrain_registry();
        let vocab = Vocab::standard();
        if vocab.len() != config.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "config expects a vocabulary of {}, standard vocabulary has {}",
                config.vocab_size,
                vocab.len()
            )));
        }
        let mut params = ParamSet::new();
        let mut rng = derived(seed, "pretrain-init");
        let encoder = Encoder::init(config, &registry, &mut params, &mut rng)?;
        let d = encoder.config().hidden;
        let std = encoder.config().init_std;
        let weight = |params: &mut ParamSet, name: &str, shape: &[usize], rng: &mut ChaCha20Rng| -> Result<()> {
            let mut t = Tensor::zeros(shape);
            for v in t.data_mut() {
                *v = crate::rng::truncated_normal(rng, std, crate::encoder::INIT_CUTOFF_SIGMA);
            }
            params.add(name.to_string(), t)?;
            Ok(())
        };
        weight(&mut params, "pretrain.mlm.dense.w", &[d, d], &mut rng)?;
        params.add("pretrain.mlm.dense.b", Tensor::zeros(&[1, d]))?;
        params.add("pretrain.mlm.norm.gain", Tensor::full(&[d], 1.0))?;
        params.add("pretrain.mlm.norm.bias", Tensor::zeros(&[d]))?;
        params.add(
            "pretrain.mlm.out_bias",
            Tensor::zeros(&[1, vocab.len()]),
        )?;
        weight(&mut params, "pretrain.nsp.pool.w", &[d, d], &mut rng)?;
        params.add("pretrain.nsp.pool.b", Tensor::zeros(&[1, d]))?;
        weight(&mut params, "pretrain.nsp.cls.w", &[d, 2], &mut rng)?;
        params.add("pretrain.nsp.cls.b", Tensor::zeros(&[1, 2]))?;
        Ok(Self {
            encoder,
            registry,
            vocab,
            params,
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn registry(&self) -> &SkillRegistry {
        &self.registry
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn bank_indices(&self, ids: &[&str]) -> Result<Vec<usize>> {
        let mut idx: Vec<usize> = ids
            .iter()
            .map(|id| self.registry.idx(id))
            .collect::<Result<_>>()?;
        idx.sort_unstable();
        Ok(idx)
    }

    pub fn objective_skills(&self, objective: Objective) -> Result<Vec<usize>> {
        match objective {
            Objective::MaskedTokens => self.bank_indices(&MASKED_TOKEN_SKILLS),
            Objective::SentenceOrder => self.bank_indices(&SENTENCE_ORDER_SKILLS),
        }
    }

    /// Parameters updated by one step of the given objective: the trunk,
    /// the objective's banks, and the objective's output head.
    pub fn objective_param_names(&self, objective: Objective) -> Result<Vec<String>> {
        let mut names = self
            .encoder
            .active_param_names(&self.objective_skills(objective)?)?;
        match objective {
            Objective::MaskedTokens => names.extend(
                [
                    "pretrain.mlm.dense.w",
                    "pretrain.mlm.dense.b",
                    "pretrain.mlm.norm.gain",
                    "pretrain.mlm.norm.bias",
                    "pretrain.mlm.out_bias",
                ]
                .map(String::from),
            ),
            Objective::SentenceOrder => names.extend(
                [
                    "pretrain.nsp.pool.w",
                    "pretrain.nsp.pool.b",
                    "pretrain.nsp.cls.w",
                    "pretrain.nsp.cls.b",
                ]
                .map(String::from),
            ),
        }
        Ok(names)
    }

    /// Masked-token loss: mean cross-entropy of the reconstructed ids at
    /// the selected positions. The decoder ties to the token embedding
    /// (scores are dot products against every embedding row) plus a
    /// separate per-token output bias.
    pub fn masked_token_loss(
        &self,
        tape: &mut Tape,
        batch: &EncodedBatch,
        targets: &[(usize, usize)],
    ) -> Result<NodeId> {
        if targets.is_empty() {
            return Err(Error::InvalidArgument("no masked positions".into()));
        }
        let seq = batch.seq_len();
        let active = self.objective_skills(Objective::MaskedTokens)?;
        let hidden = self
            .encoder
            .encode(tape, &self.params, batch, &active, None)?;
        let d = self.encoder.config().hidden;
        let flat = tape.reshape(hidden, vec![batch.batch() * seq, d])?;
        let rows: Vec<usize> = targets.iter().map(|&(pos, _)| pos).collect();
        let golds: Vec<usize> = targets.iter().map(|&(_, id)| id).collect();
        if let Some(&bad) = rows.iter().find(|&&r| r >= batch.batch() * seq) {
            return Err(Error::InvalidArgument(format!(
                "masked position {bad} outside the batch"
            )));
        }
        let sel = tape.gather_rows(flat, &rows)?;
        let w = tape.param_named(&self.params, "pretrain.mlm.dense.w")?;
        let b = tape.param_named(&self.params, "pretrain.mlm.dense.b")?;
        let gain = tape.param_named(&self.params, "pretrain.mlm.norm.gain")?;
        let nb = tape.param_named(&self.params, "pretrain.mlm.norm.bias")?;
        let proj = tape.matmul(sel, w)?;
        let proj = tape.add(proj, b)?;
        let act = tape.gelu(proj);
        let normed = tape.layer_norm(act, gain, nb, self.encoder.config().ln_eps)?;
        let table = tape.param_named(&self.params, "embed.token")?;
        let scores = tape.matmul_nt(normed, table)?;
        let bias = tape.param_named(&self.params, "pretrain.mlm.out_bias")?;
        let logits = tape.add(scores, bias)?;
        tape.cross_entropy_mean(logits, &golds)
    }

    /// Sentence-order loss: a tanh pooler over the leading marker vector
    /// feeds a two-way classifier.
    pub fn sentence_order_loss(
        &self,
        tape: &mut Tape,
        batch: &EncodedBatch,
        labels: &[usize],
    ) -> Result<NodeId> {
        let active = self.objective_skills(Objective::SentenceOrder)?;
        let hidden = self
            .encoder
            .encode(tape, &self.params, batch, &active, None)?;
        let (bsz, seq, d) = (batch.batch(), batch.seq_len(), self.encoder.config().hidden);
        let flat = tape.reshape(hidden, vec![bsz * seq, d])?;
        let first_rows: Vec<usize> = (0..bsz).map(|e| e * seq).collect();
        let cls = tape.gather_rows(flat, &first_rows)?;
        let pw = tape.param_named(&self.params, "pretrain.nsp.pool.w")?;
        let pb = tape.param_named(&self.params, "pretrain.nsp.pool.b")?;
        let pooled = tape.matmul(cls, pw)?;
        let pooled = tape.add(pooled, pb)?;
        let pooled = tape.tanh(pooled);
        let cw = tape.param_named(&self.params, "pretrain.nsp.cls.w")?;
        let cb = tape.param_named(&self.params, "pretrain.nsp.cls.b")?;
        let logits = tape.matmul(pooled, cw)?;
        let logits = tape.add(logits, cb)?;
        tape.cross_entropy_mean(logits, labels)
    }

    /// Assemble a masked-token batch from corpus sentences. Returned
    /// targets are (flat position, original id) in padded coordinates.
    pub fn masked_batch(
        &self,
        rng: &mut ChaCha20Rng,
        corpus: &Corpus,
        batch_size: usize,
    ) -> Result<(EncodedBatch, Vec<(usize, usize)>)> {
        let max_len = self.encoder.config().max_len;
        let mut rows = Vec::with_capacity(batch_size);
        let mut types = Vec::with_capacity(batch_size);
        let mut per_row = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let sentence = corpus.draw_sentence(rng);
            let (ids, tys) = self.vocab.encode_single(sentence, max_len)?;
            let row = mask_tokens(rng, &ids, &self.vocab)?;
            rows.push(row.ids);
            types.push(tys);
            per_row.push(row.targets);
        }
        let encoded = pad_batch(rows, types)?;
        let width = encoded.seq_len();
        let targets = per_row
            .into_iter()
            .enumerate()
            .flat_map(|(e, t)| t.into_iter().map(move |(pos, id)| (e * width + pos, id)))
            .collect();
        Ok((encoded, targets))
    }

    /// Assemble a sentence-order batch of first/second pairs.
    pub fn order_batch(
        &self,
        rng: &mut ChaCha20Rng,
        corpus: &Corpus,
        batch_size: usize,
    ) -> Result<(EncodedBatch, Vec<usize>)> {
        let max_len = self.encoder.config().max_len;
        let mut rows = Vec::with_capacity(batch_size);
        let mut types = Vec::with_capacity(batch_size);
        let mut labels = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let (a, b, label) = corpus.draw_pair(rng)?;
            let (ids, tys) = self.vocab.encode_pair(a, b, max_len)?;
            rows.push(ids);
            types.push(tys);
            labels.push(label);
        }
        Ok((pad_batch(rows, types)?, labels))
    }

    /// One optimization step: draw an objective, build its batch, update
    /// its parameter set. Returns (objective, loss).
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &mut self,
        adam: &mut Adam,
        rng: &mut ChaCha20Rng,
        corpus: &Corpus,
        step: u64,
        batch_size: usize,
        lr: f64,
        clip_norm: f64,
    ) -> Result<(Objective, f64)> {
        let objective = choose_objective(rng);
        let mut tape = Tape::new();
        let loss = match objective {
            Objective::MaskedTokens => {
                let (batch, targets) = self.masked_batch(rng, corpus, batch_size)?;
                self.masked_token_loss(&mut tape, &batch, &targets)?
            }
            Objective::SentenceOrder => {
                let (batch, labels) = self.order_batch(rng, corpus, batch_size)?;
                self.sentence_order_loss(&mut tape, &batch, &labels)?
            }
        };
        let value = tape.data(loss)[0];
        if !value.is_finite() {
            return Err(Error::Diverged { step, value });
        }
        let active = self.objective_param_names(objective)?;
        self.params.zero_grads();
        tape.backward(loss, &mut self.params)?;
        clip_global_norm(&mut self.params, &active, clip_norm)?;
        adam.step(&mut self.params, &active, lr)?;
        Ok((objective, value))
    }

    pub fn save(&self, path: &Path, adam: Option<&Adam>) -> Result<()> {
        crate::checkpoint::save(
            path,
            self.encoder.config(),
            &self.registry,
            &[],
            &self.params,
            adam,
        )
    }

    pub fn from_checkpoint(cp: crate::checkpoint::Checkpoint) -> Result<Self> {
        let vocab = Vocab::standard();
        if vocab.len() != cp.config.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "config expects a vocabulary of {}, standard vocabulary has {}",
                cp.config.vocab_size,
                vocab.len()
            )));
        }
        let encoder = Encoder::attach(cp.config, &cp.registry)?;
        Ok(Self {
            encoder,
            registry: cp.registry,
            vocab,
            params: cp.params,
        })
    }
}

fn pad_batch(rows: Vec<Vec<usize>>, types: Vec<Vec<usize>>) -> Result<EncodedBatch> {
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    let lens: Vec<usize> = rows.iter().map(Vec::len).collect();
    let rows: Vec<Vec<usize>> = rows
        .into_iter()
        .map(|mut r| {
            r.resize(width, crate::data::vocab::PAD);
            r
        })
        .collect();
    let types: Vec<Vec<usize>> = types
        .into_iter()
        .map(|mut t| {
            t.resize(width, 0);
            t
        })
        .collect();
    EncodedBatch::new(rows, types, lens)
}

#[derive(Debug, Clone)]
pub struct PretrainSummary {
    pub steps: u64,
    pub draws: BTreeMap<&'static str, u64>,
    /// Mean loss per objective over the first and last quarter of its draws.
    pub early_loss: BTreeMap<&'static str, f64>,
    pub late_loss: BTreeMap<&'static str, f64>,
}

fn objective_name(o: Objective) -> &'static str {
    match o {
        Objective::MaskedTokens => "masked_tokens",
        Objective::SentenceOrder => "sentence_order",
    }
}

/// Run the pre-training loop over a corpus.
pub fn pretrain(
    model: &mut PretrainModel,
    corpus: &Corpus,
    config: &PretrainConfig,
    log: &mut RunLog,
) -> Result<PretrainSummary> {
    if config.steps == 0 || config.batch_size == 0 {
        return Err(Error::InvalidArgument(
            "pre-training needs at least one step and a non-empty batch".into(),
        ));
    }
    let schedule = LrSchedule::new(config.peak_lr, config.warmup, config.steps)?;
    let mut adam = Adam::new(AdamConfig::default());
    let mut rng = derived(config.seed, "pretrain-loop");
    let mut series: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    for step in 1..=config.steps {
        let lr = schedule.lr_at(step);
        let (objective, loss) = model.step(
            &mut adam,
            &mut rng,
            corpus,
            step,
            config.batch_size,
            lr,
            config.clip_norm,
        )?;
        let name = objective_name(objective);
        series.entry(name).or_default().push(loss);
        if (config.log_every > 0 && step % config.log_every == 0) || step == config.steps {
            log.train(step, name, loss, lr)?;
        }
    }
    log.flush()?;
    let mut draws = BTreeMap::new();
    let mut early_loss = BTreeMap::new();
    let mut late_loss = BTreeMap::new();
    for (name, losses) in series {
        let q = (losses.len() / 4).max(1);
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        draws.insert(name, losses.len() as u64);
        early_loss.insert(name, mean(&losses[..q]));
        late_loss.insert(name, mean(&losses[losses.len() - q..]));
    }
    Ok(PretrainSummary {
        steps: config.steps,
        draws,
        early_loss,
        late_loss,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HandoffReport {
    /// Parameters copied one-to-one from the pre-trained set.
    pub copied: usize,
    /// Bank parameters cloned from the general bank.
    pub cloned_from_general: usize,
    /// Parameters left at their fresh initialization (task heads).
    pub left_fresh: usize,
}

/// Seed a multi-task model from pre-trained parameters: every shared
/// trunk and bank tensor is copied bitwise; banks for skills the
/// pre-training never saw start as bit-copies of the general bank; task
/// heads keep their fresh initialization.
pub fn initialize_from_pretrain(
    target: &mut MultiTaskModel,
    source: &PretrainModel,
) -> Result<HandoffReport> {
    if target.encoder().config() != source.encoder.config() {
        return Err(Error::Config(
            "pre-trained encoder shape differs from the target model".into(),
        ));
    }
    let general = source.registry.get(source.registry.general_idx()).id.clone();
    let known: std::collections::BTreeSet<&str> =
        source.registry.ids().collect();
    let mut report = HandoffReport {
        copied: 0,
        cloned_from_general: 0,
        left_fresh: 0,
    };
    let mut updates: Vec<(String, Tensor)> = Vec::new();
    for p in target.params.iter() {
        let name = p.name().to_string();
        if name.starts_with("head.") {
            report.left_fresh += 1;
            continue;
        }
        let source_name = bank_source_name(&name, &known, &general);
        let tensor = source
            .params
            .by_name(&source_name)
            .map_err(|_| {
                Error::Config(format!("no pre-trained source for parameter {name}"))
            })?
            .value
            .clone();
        if tensor.shape() != p.value.shape() {
            return Err(Error::Config(format!(
                "{name}: pre-trained shape {:?} vs {:?}",
                tensor.shape(),
                p.value.shape()
            )));
        }
        if source_name == name {
            report.copied += 1;
        } else {
            report.cloned_from_general += 1;
        }
        updates.push((name, tensor));
    }
    for (name, tensor) in updates {
        target.params.by_name_mut(&name)?.value = tensor;
    }
    Ok(report)
}

/// Where a target parameter comes from: itself when the pre-training knew
/// it, the general bank's counterpart for a new skill's bank tensors.
fn bank_source_name(
    name: &str,
    known_skills: &std::collections::BTreeSet<&str>,
    general: &str,
) -> String {
    let mut parts = name.split('.');
    if let (Some("layer"), Some(idx), Some("ffn"), Some(skill), Some(tail), None) = (
        parts.next(),
        parts.next(),
        parts.next(),
        parts.next(),
        parts.next(),
        parts.next(),
    ) {
        if skill.starts_with('s') && !known_skills.contains(skill) {
            return format!("layer.{idx}.ffn.{general}.{tail}");
        }
    }
    name.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::gen_corpus;
    use crate::routing::standard_tasks;

    fn tiny_config() -> EncoderConfig {
        let mut c = EncoderConfig::desk_scale(Vocab::standard().len());
        c.hidden = 16;
        c.heads = 2;
        c.ffn_inner = 24;
        c.max_len = 32;
        c
    }

    fn test_corpus(docs: usize) -> Corpus {
        Corpus::parse(&gen_corpus(&mut derived(11, "pre-corpus"), docs)).unwrap()
    }

    #[test]
    fn corpus_parsing_splits_documents_on_blank_lines() {
        let c = Corpus::parse("a b c\nd e f\n\ng h i\n").unwrap();
        assert_eq!(c.docs.len(), 2);
        assert_eq!(c.docs[0].len(), 2);
        assert_eq!(c.docs[1].len(), 1);
        assert!(Corpus::parse("\n\n").is_err());
    }

    #[test]
    fn masking_hits_the_pinned_fractions() {
        let vocab = Vocab::standard();
        let mut rng = derived(1, "mask-frac");
        let ids: Vec<usize> = (0..40)
            .map(|i| SPECIALS.len() + (i % (vocab.len() - SPECIALS.len())))
            .collect();
        let mut row = vec![crate::data::vocab::CLS];
        row.extend(&ids);
        row.push(crate::data::vocab::SEP);
        let (mut selected, mut masked, mut random, mut kept) = (0usize, 0usize, 0usize, 0usize);
        let trials = 4000;
        for _ in 0..trials {
            let out = mask_tokens(&mut rng, &row, &vocab).unwrap();
            assert!(!out.targets.is_empty());
            for &(pos, orig) in &out.targets {
                assert!(pos >= 1 && pos <= ids.len(), "marker positions untouched");
                assert_eq!(orig, row[pos]);
                selected += 1;
                let now = out.ids[pos];
                if now == crate::data::vocab::MASK {
                    masked += 1;
                } else if now == orig {
                    kept += 1;
                } else {
                    assert!(!vocab.is_special(now));
                    random += 1;
                }
            }
            assert_eq!(out.ids[0], crate::data::vocab::CLS);
            assert_eq!(*out.ids.last().unwrap(), crate::data::vocab::SEP);
        }
        let frac = selected as f64 / (trials * ids.len()) as f64;
        assert!((frac - MASK_FRACTION).abs() < 0.01, "selection rate {frac}");
        let m = masked as f64 / selected as f64;
        let r = random as f64 / selected as f64;
        let k = kept as f64 / selected as f64;
        assert!((m - 0.8).abs() < 0.02, "mask share {m}");
        // a random replacement can coincide with the original, shifting a
        // sliver of mass from the random to the kept bucket
        assert!((r - 0.1).abs() < 0.02, "random share {r}");
        assert!((k - 0.1).abs() < 0.02, "kept share {k}");
    }

    #[test]
    fn masking_always_selects_at_least_one_and_rejects_bare_markers() {
        let vocab = Vocab::standard();
        let mut rng = derived(2, "mask-one");
        let row = vec![crate::data::vocab::CLS, 7, crate::data::vocab::SEP];
        for _ in 0..200 {
            let out = mask_tokens(&mut rng, &row, &vocab).unwrap();
            assert_eq!(out.targets.len(), 1);
            assert_eq!(out.targets[0].0, 1);
        }
        let bare = vec![crate::data::vocab::CLS, crate::data::vocab::SEP];
        assert!(mask_tokens(&mut rng, &bare, &vocab).is_err());
    }

    #[test]
    fn objective_draws_are_an_even_coin() {
        let mut rng = derived(3, "coin");
        let n = 10_000;
        let masked = (0..n)
            .filter(|_| choose_objective(&mut rng) == Objective::MaskedTokens)
            .count();
        let frac = masked as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.02, "masked-token share {frac}");
    }

    #[test]
    fn ordered_pairs_are_really_consecutive() {
        let corpus = test_corpus(25);
        let mut rng = derived(4, "pairs");
        let mut positives = 0;
        let trials = 2000;
        for _ in 0..trials {
            let (a, b, label) = corpus.draw_pair(&mut rng).unwrap();
            let consecutive = corpus.docs.iter().any(|doc| {
                doc.windows(2).any(|w| w[0] == a && w[1] == b)
            });
            if label == 1 {
                assert!(consecutive);
                positives += 1;
            } else {
                // the two sentences come from different documents
                let doc_of = |s: &str| {
                    corpus
                        .docs
                        .iter()
                        .position(|d| d.iter().any(|x| x == s))
                        .unwrap()
                };
                assert_ne!(doc_of(a), doc_of(b));
            }
        }
        let frac = positives as f64 / trials as f64;
        assert!((frac - 0.5).abs() < 0.03, "ordered share {frac}");
    }

    #[test]
    fn untrained_masked_token_loss_sits_at_the_uniform_baseline() {
        let model = PretrainModel::init(tiny_config(), 5).unwrap();
        let corpus = test_corpus(40);
        let mut rng = derived(6, "mlm-baseline");
        let (batch, targets) = model.masked_batch(&mut rng, &corpus, 24).unwrap();
        let mut tape = Tape::new();
        let loss = model.masked_token_loss(&mut tape, &batch, &targets).unwrap();
        let v = tape.data(loss)[0];
        let uniform = (model.vocab.len() as f64).ln();
        assert!(
            (v - uniform).abs() < 0.1 * uniform,
            "loss {v} vs uniform {uniform}"
        );
    }

    #[test]
    fn each_objective_updates_only_its_own_banks() {
        let model = PretrainModel::init(tiny_config(), 7).unwrap();
        let corpus = test_corpus(30);
        let mut rng = derived(8, "obj-banks");
        let skill_layer = model.encoder.config().layers - 1;
        let grad_norm = |params: &ParamSet, name: &str| -> f64 {
            params
                .by_name(name)
                .unwrap()
                .grad
                .data()
                .iter()
                .map(|g| g * g)
                .sum()
        };

        let mut params = model.params.clone();
        let (batch, targets) = model.masked_batch(&mut rng, &corpus, 8).unwrap();
        let mut tape = Tape::new();
        let loss = model.masked_token_loss(&mut tape, &batch, &targets).unwrap();
        params.zero_grads();
        tape.backward(loss, &mut params).unwrap();
        assert!(grad_norm(&params, &format!("layer.{skill_layer}.ffn.s2.w1")) > 0.0);
        assert!(grad_norm(&params, &format!("layer.{skill_layer}.ffn.s7.w1")) > 0.0);
        assert_eq!(grad_norm(&params, &format!("layer.{skill_layer}.ffn.s1.w1")), 0.0);
        assert_eq!(grad_norm(&params, &format!("layer.{skill_layer}.ffn.s3.w1")), 0.0);
        assert_eq!(grad_norm(&params, "pretrain.nsp.pool.w"), 0.0);

        let (batch, labels) = model.order_batch(&mut rng, &corpus, 8).unwrap();
        let mut tape = Tape::new();
        let loss = model.sentence_order_loss(&mut tape, &batch, &labels).unwrap();
        params.zero_grads();
        tape.backward(loss, &mut params).unwrap();
        assert!(grad_norm(&params, &format!("layer.{skill_layer}.ffn.s1.w1")) > 0.0);
        assert!(grad_norm(&params, &format!("layer.{skill_layer}.ffn.s3.w1")) > 0.0);
        assert_eq!(grad_norm(&params, &format!("layer.{skill_layer}.ffn.s2.w1")), 0.0);
        assert_eq!(grad_norm(&params, "pretrain.mlm.dense.w"), 0.0);
    }

    #[test]
    fn losses_improve_over_three_hundred_steps() {
        let mut model = PretrainModel::init(tiny_config(), 9).unwrap();
        let corpus = test_corpus(60);
        let config = PretrainConfig {
            steps: 300,
            batch_size: 8,
            peak_lr: 2e-3,
            warmup: 30,
            seed: 10,
            log_every: 0,
            ..PretrainConfig::default()
        };
        let summary =
            pretrain(&mut model, &corpus, &config, &mut RunLog::discard()).unwrap();
        for name in ["masked_tokens", "sentence_order"] {
            assert!(summary.draws[name] > 0, "{name} never drawn");
            assert!(
                summary.late_loss[name] < summary.early_loss[name],
                "{name}: early {} late {}",
                summary.early_loss[name],
                summary.late_loss[name]
            );
        }
    }

    #[test]
    fn handoff_copies_shared_weights_and_clones_the_general_bank() {
        let pre = PretrainModel::init(tiny_config(), 12).unwrap();
        let mut multi = MultiTaskModel::init(
            tiny_config(),
            crate::routing::SkillRegistry::standard(),
            standard_tasks(),
            13,
        )
        .unwrap();
        let fresh_head = multi
            .params
            .by_name("head.sentiment.cls.w")
            .unwrap()
            .value
            .clone();
        let report = initialize_from_pretrain(&mut multi, &pre).unwrap();
        assert!(report.copied > 0 && report.cloned_from_general > 0 && report.left_fresh > 0);

        let skill_layer = multi.encoder().config().layers - 1;
        for name in ["embed.token", "layer.0.attn.wq", "layer.0.ffn.w1"] {
            let a = &multi.params.by_name(name).unwrap().value;
            let b = &pre.params.by_name(name).unwrap().value;
            assert!(a.bits_eq(b), "{name} not copied bitwise");
        }
        for sid in ["s1", "s2", "s3", "s7"] {
            let name = format!("layer.{skill_layer}.ffn.{sid}.w1");
            let a = &multi.params.by_name(&name).unwrap().value;
            let b = &pre.params.by_name(&name).unwrap().value;
            assert!(a.bits_eq(b), "{name} not copied bitwise");
        }
        let general = &pre
            .params
            .by_name(&format!("layer.{skill_layer}.ffn.s7.w1"))
            .unwrap()
            .value;
        for sid in ["s4", "s5", "s6"] {
            let name = format!("layer.{skill_layer}.ffn.{sid}.w1");
            let a = &multi.params.by_name(&name).unwrap().value;
            assert!(a.bits_eq(general), "{name} is not a clone of the general bank");
        }
        assert!(multi
            .params
            .by_name("head.sentiment.cls.w")
            .unwrap()
            .value
            .bits_eq(&fresh_head));
    }

    #[test]
    fn handoff_rejects_mismatched_shapes() {
        let pre = PretrainModel::init(tiny_config(), 14).unwrap();
        let mut big = tiny_config();
        big.hidden = 32;
        big.ffn_inner = 48;
        let mut multi = MultiTaskModel::init(
            big,
            crate::routing::SkillRegistry::standard(),
            standard_tasks(),
            15,
        )
        .unwrap();
        assert!(initialize_from_pretrain(&mut multi, &pre).is_err());
    }

    #[test]
    fn pretrain_checkpoints_round_trip() {
        let model = PretrainModel::init(tiny_config(), 16).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pre.ckpt");
        model.save(&path, None).unwrap();
        let restored =
            PretrainModel::from_checkpoint(crate::checkpoint::load(&path).unwrap()).unwrap();
        assert_eq!(model.params.len(), restored.params.len());
        for (a, b) in model.params.iter().zip(restored.params.iter()) {
            assert_eq!(a.name(), b.name());
            assert!(a.value.bits_eq(&b.value));
        }
    }
}
