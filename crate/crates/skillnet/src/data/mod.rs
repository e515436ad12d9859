//! Toy text pipeline: whitespace vocabulary, JSONL datasets, seeded
//! synthetic task suites, and evaluation metrics.

pub mod metrics;
pub mod synth;
pub mod vocab;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use vocab::Vocab;

/// BIO tag inventory for the tagging task: outside, then begin/inside
/// pairs for the three entity types. Index order is load-bearing (tag ids
/// in model space).
pub const TAGS: [&str; 7] = ["O", "B-PER", "I-PER", "B-ORG", "I-ORG", "B-LOC", "I-LOC"];

pub fn tag_index(tag: &str) -> Result<usize> {
    TAGS.iter()
        .position(|&t| t == tag)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown tag `{tag}`")))
}

/// One dataset record. The JSON field set picks the variant:
/// `{"text","label"}`, `{"text_a","text_b","label"}` (plus optional
/// `"group"` for ranking), `{"tokens","tags"}`, or
/// `{"question","passage","answer_start","answer_end"}` with inclusive
/// token indices into the whitespace-split passage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum Example {
    Pair {
        text_a: String,
        text_b: String,
        label: usize,
        #[serde(skip_serializing_if = "Option::is_none")]
        group: Option<usize>,
    },
    Single {
        text: String,
        label: usize,
    },
    Tagged {
        tokens: Vec<String>,
        tags: Vec<String>,
    },
    Span {
        question: String,
        passage: String,
        answer_start: usize,
        answer_end: usize,
    },
}

impl Example {
    pub fn validate(&self) -> Result<()> {
        match self {
            Example::Single { text, .. } => {
                if text.trim().is_empty() {
                    return Err(Error::InvalidArgument("empty text".into()));
                }
            }
            Example::Pair { text_a, text_b, .. } => {
                if text_a.trim().is_empty() || text_b.trim().is_empty() {
                    return Err(Error::InvalidArgument("empty pair side".into()));
                }
            }
            Example::Tagged { tokens, tags } => {
                if tokens.is_empty() || tokens.len() != tags.len() {
                    return Err(Error::InvalidArgument(format!(
                        "{} tokens vs {} tags",
                        tokens.len(),
                        tags.len()
                    )));
                }
                for t in tags {
                    tag_index(t)?;
                }
            }
            Example::Span {
                passage,
                answer_start,
                answer_end,
                question,
            } => {
                if question.trim().is_empty() {
                    return Err(Error::InvalidArgument("empty question".into()));
                }
                let n = passage.split_whitespace().count();
                if *answer_start > *answer_end || *answer_end >= n {
                    return Err(Error::InvalidArgument(format!(
                        "answer ({answer_start},{answer_end}) outside passage of {n} tokens"
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn save_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        let line = serde_json::to_string(ex).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Example>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| {
            Error::Format(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        ex.validate()?;
        out.push(ex);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trips_every_variant() {
        let examples = vec![
            Example::Single {
                text: "bright warm day".into(),
                label: 1,
            },
            Example::Pair {
                text_a: "the ledger is sound".into(),
                text_b: "the ledger is sound".into(),
                label: 1,
                group: None,
            },
            Example::Pair {
                text_a: "which remedy treats fever".into(),
                text_b: "tonic treats fever".into(),
                label: 1,
                group: Some(3),
            },
            Example::Tagged {
                tokens: vec!["alice".into(), "visited".into(), "paris".into()],
                tags: vec!["B-PER".into(), "O".into(), "B-LOC".into()],
            },
            Example::Span {
                question: "who visited paris".into(),
                passage: "alice visited paris in spring".into(),
                answer_start: 0,
                answer_end: 0,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        save_jsonl(&path, &examples).unwrap();
        assert_eq!(load_jsonl(&path).unwrap(), examples);
    }

    #[test]
    fn loader_rejects_invalid_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"tokens\":[\"a\"],\"tags\":[\"B-XYZ\"]}\n").unwrap();
        assert!(load_jsonl(&path).is_err());
        std::fs::write(
            &path,
            "{\"question\":\"q\",\"passage\":\"a b\",\"answer_start\":1,\"answer_end\":5}\n",
        )
        .unwrap();
        assert!(load_jsonl(&path).is_err());
        std::fs::write(&path, "{\"what\":1}\n").unwrap();
        assert!(load_jsonl(&path).is_err());
    }

    #[test]
    fn tag_indices_follow_the_declared_order() {
        assert_eq!(tag_index("O").unwrap(), 0);
        assert_eq!(tag_index("B-PER").unwrap(), 1);
        assert_eq!(tag_index("I-LOC").unwrap(), 6);
        assert!(tag_index("B-MISC").is_err());
    }
}
