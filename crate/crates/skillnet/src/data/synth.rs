//! Seeded synthetic datasets. Every task's label is a deterministic
//! function of its surface tokens, so each task is learnable by
//! construction; the word groups used by the rules are disjoint (see
//! `vocab::words`).
//!
//! Six core tasks: sentiment (single, 2 classes), nli (pair, 3),
//! paraphrase (pair, 2, finance-flavored), topic (single, 5), ner
//! (BIO over 3 entity types), span_qa (extractive). Two follow-on tasks
//! for adaptation experiments: pair_qa (binary answer matching) and
//! med_rank (grouped ranking in a disjoint medical domain). Plus a
//! document-structured pre-training corpus.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::Result;
use crate::rng::derived;
use crate::routing::{standard_tasks, MetricKind, TaskKind, TaskSpec};

use super::vocab::words;
use super::{save_jsonl, Example};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SuiteSpec {
    pub seed: u64,
    /// Train-set sizes for the six core tasks, in `standard_tasks` order.
    pub train_sizes: [usize; 6],
    pub eval_size: usize,
    /// Train/eval sizes for each follow-on task (med_rank counts groups).
    pub new_train: usize,
    pub new_eval: usize,
    pub corpus_docs: usize,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            train_sizes: [2000, 3000, 2500, 2500, 2000, 2500],
            eval_size: 300,
            new_train: 1500,
            new_eval: 300,
            corpus_docs: 400,
        }
    }
}

/// Routing declarations for the two follow-on tasks. The ranking task
/// deliberately routes through no injected skill here; adaptation plans
/// may extend it.
pub fn new_task_specs() -> Vec<TaskSpec> {
    vec![
        TaskSpec {
            name: "pair_qa".into(),
            kind: TaskKind::PairClass { classes: 2 },
            metric: MetricKind::BinaryF1,
            skills: ["s1", "s3", "s5"].iter().map(|s| s.to_string()).collect(),
        },
        TaskSpec {
            name: "med_rank".into(),
            kind: TaskKind::PairClass { classes: 2 },
            metric: MetricKind::GroupTop1,
            skills: ["s1", "s3"].iter().map(|s| s.to_string()).collect(),
        },
    ]
}

fn pick<'a, T>(rng: &mut ChaCha20Rng, xs: &'a [T]) -> &'a T {
    &xs[rng.gen_range(0..xs.len())]
}

fn filler_run(rng: &mut ChaCha20Rng, lo: usize, hi: usize) -> Vec<String> {
    let n = rng.gen_range(lo..=hi);
    (0..n)
        .map(|_| {
            if rng.gen_bool(0.4) {
                pick(rng, words::CONNECT).to_string()
            } else {
                pick(rng, words::FILLER).to_string()
            }
        })
        .collect()
}

/// Single-sentence polarity: the planted markers decide the label
/// (1 = positive). Markers of the other polarity never appear.
pub fn gen_sentiment(rng: &mut ChaCha20Rng, n: usize) -> Vec<Example> {
    (0..n)
        .map(|_| {
            let label = rng.gen_range(0..2usize);
            let bank = if label == 1 { words::POSITIVE } else { words::NEGATIVE };
            let mut toks = filler_run(rng, 3, 6);
            for _ in 0..rng.gen_range(1..=3) {
                let at = rng.gen_range(0..=toks.len());
                toks.insert(at, pick(rng, bank).to_string());
            }
            Example::Single {
                text: toks.join(" "),
                label,
            }
        })
        .collect()
}

fn adjective(side: usize, idx: usize) -> &'static str {
    if side == 0 {
        words::POSITIVE[idx]
    } else {
        words::NEGATIVE[idx]
    }
}

/// Premise/hypothesis over one noun: same adjective entails (0), the
/// paired opposite contradicts (2), any other adjective is neutral (1).
pub fn gen_nli(rng: &mut ChaCha20Rng, n: usize) -> Vec<Example> {
    let k = words::POSITIVE.len();
    (0..n)
        .map(|_| {
            let label = rng.gen_range(0..3usize);
            let noun = pick(rng, words::FILLER).to_string();
            let side = rng.gen_range(0..2usize);
            let idx = rng.gen_range(0..k);
            let (h_side, h_idx) = match label {
                0 => (side, idx),
                2 => (1 - side, idx),
                _ => {
                    let other = (idx + rng.gen_range(1..k)) % k;
                    (rng.gen_range(0..2usize), other)
                }
            };
            let decorate = |rng: &mut ChaCha20Rng, adj: &str| {
                if rng.gen_bool(0.5) {
                    let pad = if rng.gen_bool(0.5) { "very" } else { "quite" };
                    format!("{pad} {adj}")
                } else {
                    adj.to_string()
                }
            };
            let a = format!("the {noun} is {}", decorate(rng, adjective(side, idx)));
            let b = format!("the {noun} is {}", decorate(rng, adjective(h_side, h_idx)));
            Example::Pair {
                text_a: a,
                text_b: b,
                label,
                group: None,
            }
        })
        .collect()
}

fn content_nouns(rng: &mut ChaCha20Rng, n: usize) -> Vec<&'static str> {
    let mut pool: Vec<&'static str> = words::FILLER.to_vec();
    pool.shuffle(rng);
    pool.truncate(n);
    pool
}

fn assemble_finance(rng: &mut ChaCha20Rng, marker: &str, content: &[&str]) -> String {
    let mut toks: Vec<String> = content.iter().map(|s| s.to_string()).collect();
    toks.push(marker.to_string());
    toks.shuffle(rng);
    let mut out = Vec::with_capacity(toks.len() * 2);
    for t in toks {
        if rng.gen_bool(0.5) {
            out.push("the".to_string());
        }
        out.push(t);
    }
    out.join(" ")
}

/// Finance-flavored restatement matching: label 1 iff both sides carry
/// the same content nouns (word order and connectors vary freely).
pub fn gen_paraphrase(rng: &mut ChaCha20Rng, n: usize) -> Vec<Example> {
    (0..n)
        .map(|_| {
            let label = rng.gen_range(0..2usize);
            let marker = pick(rng, words::FINANCE_MARK);
            let content = content_nouns(rng, 3);
            let a = assemble_finance(rng, marker, &content);
            let b_content = if label == 1 {
                content.clone()
            } else {
                let mut c = content.clone();
                let swap_at = rng.gen_range(0..c.len());
                let replacement = *pick(
                    rng,
                    &words::FILLER
                        .iter()
                        .copied()
                        .filter(|w| !c.contains(w))
                        .collect::<Vec<_>>(),
                );
                c[swap_at] = replacement;
                c
            };
            let b = assemble_finance(rng, marker, &b_content);
            Example::Pair {
                text_a: a,
                text_b: b,
                label,
                group: None,
            }
        })
        .collect()
}

/// Five-way keyword classification; every keyword in a text belongs to
/// the label's group.
pub fn gen_topic(rng: &mut ChaCha20Rng, n: usize) -> Vec<Example> {
    (0..n)
        .map(|_| {
            let label = rng.gen_range(0..words::TOPICS.len());
            let (_, keywords) = words::TOPICS[label];
            let mut toks = filler_run(rng, 3, 5);
            for _ in 0..rng.gen_range(2..=3) {
                let at = rng.gen_range(0..=toks.len());
                toks.insert(at, pick(rng, keywords).to_string());
            }
            Example::Single {
                text: toks.join(" "),
                label,
            }
        })
        .collect()
}

struct Entity {
    tokens: Vec<String>,
    tags: Vec<&'static str>,
}

fn person(rng: &mut ChaCha20Rng) -> Entity {
    let mut tokens = vec![pick(rng, words::FIRST_NAMES).to_string()];
    let mut tags = vec!["B-PER"];
    if rng.gen_bool(0.4) {
        tokens.push(pick(rng, words::SURNAMES).to_string());
        tags.push("I-PER");
    }
    Entity { tokens, tags }
}

fn organization(rng: &mut ChaCha20Rng) -> Entity {
    let mut tokens = vec![pick(rng, words::ORGS).to_string()];
    let mut tags = vec!["B-ORG"];
    if rng.gen_bool(0.4) {
        tokens.push(pick(rng, words::ORG_SUFFIX).to_string());
        tags.push("I-ORG");
    }
    Entity { tokens, tags }
}

fn location(rng: &mut ChaCha20Rng) -> Entity {
    if rng.gen_bool(0.4) {
        Entity {
            tokens: vec![
                pick(rng, words::LOC_PREFIX).to_string(),
                pick(rng, words::LOCS).to_string(),
            ],
            tags: vec!["B-LOC", "I-LOC"],
        }
    } else {
        Entity {
            tokens: vec![pick(rng, words::LOCS).to_string()],
            tags: vec!["B-LOC"],
        }
    }
}

struct TaggedRow {
    tokens: Vec<String>,
    tags: Vec<String>,
}

impl TaggedRow {
    fn new() -> Self {
        Self {
            tokens: Vec::new(),
            tags: Vec::new(),
        }
    }

    fn outside(&mut self, words: &[String]) {
        for w in words {
            self.tokens.push(w.clone());
            self.tags.push("O".to_string());
        }
    }

    fn word(&mut self, w: &str) {
        self.tokens.push(w.to_string());
        self.tags.push("O".to_string());
    }

    fn entity(&mut self, e: Entity) -> (usize, usize) {
        let start = self.tokens.len();
        for (t, g) in e.tokens.into_iter().zip(e.tags) {
            self.tokens.push(t);
            self.tags.push(g.to_string());
        }
        (start, self.tokens.len() - 1)
    }
}

fn fact(rng: &mut ChaCha20Rng, row: &mut TaggedRow) {
    match rng.gen_range(0..3) {
        0 => {
            if rng.gen_bool(0.3) {
                row.word(if rng.gen_bool(0.5) { "mr" } else { "ms" });
            }
            row.entity(person(rng));
            row.word("works");
            row.word("at");
            row.entity(organization(rng));
        }
        1 => {
            row.entity(person(rng));
            row.word("visited");
            row.entity(location(rng));
        }
        _ => {
            row.entity(organization(rng));
            row.word("in");
            row.entity(location(rng));
        }
    }
}

/// BIO-tagged sentences built from entity lexicons; name, organization,
/// and place tokens appear only inside entities.
pub fn gen_ner(rng: &mut ChaCha20Rng, n: usize) -> Vec<Example> {
    (0..n)
        .map(|_| {
            let mut row = TaggedRow::new();
            row.outside(&filler_run(rng, 1, 3));
            fact(rng, &mut row);
            if rng.gen_bool(0.5) {
                row.word("and");
                fact(rng, &mut row);
            }
            row.outside(&filler_run(rng, 0, 2));
            Example::Tagged {
                tokens: row.tokens,
                tags: row.tags,
            }
        })
        .collect()
}

/// Extractive QA: "who works at X" finds the person before "works",
/// "where is N" finds the place after "in". A distractor fact keeps the
/// surface rule non-trivial.
pub fn gen_span_qa(rng: &mut ChaCha20Rng, n: usize) -> Vec<Example> {
    (0..n)
        .map(|_| {
            let mut row = TaggedRow::new();
            row.outside(&filler_run(rng, 0, 2));
            let who = person(rng);
            let name_head = who.tokens[0].clone();
            let (name_s, name_e) = row.entity(who);
            row.word("works");
            row.word("at");
            let org = organization(rng);
            let org_head = org.tokens[0].clone();
            row.entity(org);
            row.word("in");
            let place = location(rng);
            let (loc_s, loc_e) = row.entity(place);
            // distractor with a different person and place, no workplace
            row.word("and");
            let mut other = person(rng);
            while other.tokens[0] == name_head {
                other = person(rng);
            }
            row.entity(other);
            row.word("visited");
            let answered_loc = row.tokens[loc_s..=loc_e].to_vec();
            let mut elsewhere = location(rng);
            while elsewhere.tokens == answered_loc {
                elsewhere = location(rng);
            }
            row.entity(elsewhere);

            let (question, answer_start, answer_end) = if rng.gen_bool(0.5) {
                (format!("who works at {org_head}"), name_s, name_e)
            } else {
                (format!("where is {name_head}"), loc_s, loc_e)
            };
            Example::Span {
                question,
                passage: row.tokens.join(" "),
                answer_start,
                answer_end,
            }
        })
        .collect()
}

/// Question/candidate matching: label 1 iff the candidate sentence
/// answers the question (right relation, right subject).
pub fn gen_pair_qa(rng: &mut ChaCha20Rng, n: usize) -> Vec<Example> {
    (0..n)
        .map(|_| {
            let label = rng.gen_range(0..2usize);
            let name = pick(rng, words::FIRST_NAMES).to_string();
            let org = pick(rng, words::ORGS).to_string();
            let place = pick(rng, words::LOCS).to_string();
            let (question, candidate) = if rng.gen_bool(0.5) {
                let q = format!("who works at {org}");
                let c = if label == 1 {
                    format!("{name} works at {org}")
                } else if rng.gen_bool(0.5) {
                    let other = loop {
                        let o = pick(rng, words::ORGS).to_string();
                        if o != org {
                            break o;
                        }
                    };
                    format!("{name} works at {other}")
                } else {
                    format!("{name} visited {place}")
                };
                (q, c)
            } else {
                let q = format!("where is {name}");
                let c = if label == 1 {
                    format!("{name} is in {place}")
                } else if rng.gen_bool(0.5) {
                    let other = loop {
                        let o = pick(rng, words::FIRST_NAMES).to_string();
                        if o != name {
                            break o;
                        }
                    };
                    format!("{other} is in {place}")
                } else {
                    format!("{name} works at {org}")
                };
                (q, c)
            };
            Example::Pair {
                text_a: question,
                text_b: candidate,
                label,
                group: None,
            }
        })
        .collect()
}

/// Grouped ranking in the medical domain: each group pairs one question
/// with four candidate answers, exactly one carrying the remedy paired
/// to the asked symptom.
pub fn gen_med_rank(rng: &mut ChaCha20Rng, groups: usize) -> Vec<Example> {
    let k = words::SYMPTOMS.len();
    let mut out = Vec::with_capacity(groups * 4);
    for g in 0..groups {
        let symptom = rng.gen_range(0..k);
        let question = format!(
            "which remedy treats {} at the {}",
            words::SYMPTOMS[symptom],
            pick(rng, words::MED_FILLER)
        );
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(rng);
        for j in order {
            let answer = format!(
                "the {} helps the {} {}",
                words::REMEDIES[j],
                pick(rng, words::MED_FILLER),
                pick(rng, words::MED_FILLER)
            );
            out.push(Example::Pair {
                text_a: question.clone(),
                text_b: answer,
                label: usize::from(j == symptom),
                group: Some(g),
            });
        }
    }
    out
}

/// Topic-coherent documents: one sentence per line, documents separated
/// by a blank line.
pub fn gen_corpus(rng: &mut ChaCha20Rng, docs: usize) -> String {
    let mut out = String::new();
    for d in 0..docs {
        if d > 0 {
            out.push('\n');
        }
        let (_, keywords) = *pick(rng, words::TOPICS);
        for _ in 0..rng.gen_range(3..=6) {
            let mut toks = filler_run(rng, 3, 7);
            for _ in 0..rng.gen_range(1..=2) {
                let at = rng.gen_range(0..=toks.len());
                toks.insert(at, pick(rng, keywords).to_string());
            }
            if rng.gen_bool(0.25) {
                toks.push(pick(rng, words::FIRST_NAMES).to_string());
            }
            out.push_str(&toks.join(" "));
            out.push('\n');
        }
    }
    out
}

/// In-memory suite: (task spec, train split, eval split) for the six
/// core tasks, in `standard_tasks` order.
pub fn generate_suite(spec: &SuiteSpec) -> Vec<(TaskSpec, Vec<Example>, Vec<Example>)> {
    let tasks = standard_tasks();
    let gens: [fn(&mut ChaCha20Rng, usize) -> Vec<Example>; 6] = [
        gen_sentiment,
        gen_nli,
        gen_paraphrase,
        gen_topic,
        gen_ner,
        gen_span_qa,
    ];
    tasks
        .into_iter()
        .zip(gens)
        .zip(spec.train_sizes)
        .map(|((task, gen), train_n)| {
            let mut rng = derived(spec.seed, &format!("data:{}", task.name));
            let train = gen(&mut rng, train_n);
            let eval = gen(&mut rng, spec.eval_size);
            (task, train, eval)
        })
        .collect()
}

/// The two follow-on datasets: (spec, train, eval) each.
pub fn generate_new_tasks(spec: &SuiteSpec) -> Vec<(TaskSpec, Vec<Example>, Vec<Example>)> {
    new_task_specs()
        .into_iter()
        .map(|task| {
            let mut rng = derived(spec.seed, &format!("data:{}", task.name));
            let (train, eval) = if task.name == "med_rank" {
                // sizes count groups of four
                (
                    gen_med_rank(&mut rng, spec.new_train / 4),
                    gen_med_rank(&mut rng, spec.new_eval / 4),
                )
            } else {
                (
                    gen_pair_qa(&mut rng, spec.new_train),
                    gen_pair_qa(&mut rng, spec.new_eval),
                )
            };
            (task, train, eval)
        })
        .collect()
}

/// Write the whole suite under `dir`: `{task}.{train,eval}.jsonl` per
/// task, `tasks.json` + `new_tasks.json` routing declarations, and
/// `corpus.txt`.
pub fn write_suite(spec: &SuiteSpec, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    let write_sets = |sets: Vec<(TaskSpec, Vec<Example>, Vec<Example>)>| -> Result<Vec<TaskSpec>> {
        let mut specs = Vec::with_capacity(sets.len());
        for (task, train, eval) in sets {
            save_jsonl(&dir.join(format!("{}.train.jsonl", task.name)), &train)?;
            save_jsonl(&dir.join(format!("{}.eval.jsonl", task.name)), &eval)?;
            specs.push(task);
        }
        Ok(specs)
    };
    let core = write_sets(generate_suite(spec))?;
    let extra = write_sets(generate_new_tasks(spec))?;
    for (file, specs) in [("tasks.json", &core), ("new_tasks.json", &extra)] {
        let json = serde_json::to_string_pretty(specs)
            .map_err(|e| crate::Error::Format(e.to_string()))?;
        std::fs::write(dir.join(file), json + "\n")
            .map_err(|e| crate::Error::io(dir.join(file), e))?;
    }
    let mut rng = derived(spec.seed, "data:corpus");
    let corpus = gen_corpus(&mut rng, spec.corpus_docs);
    std::fs::write(dir.join("corpus.txt"), corpus)
        .map_err(|e| crate::Error::io(dir.join("corpus.txt"), e))?;
    Ok(())
}
