//! Whitespace token vocabulary with five reserved specials at fixed ids.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Word inventories the synthetic generators draw from. Groups are
/// disjoint so every task's labeling rule is decidable from surface
/// tokens alone.
pub mod words {
    pub const POSITIVE: &[&str] = &["great", "lovely", "superb", "shiny", "glad", "merry", "warm", "bright"];
    pub const NEGATIVE: &[&str] = &["awful", "dreary", "broken", "gloomy", "sour", "rusty", "cold", "dull"];
    pub const FILLER: &[&str] = &[
        "cat", "dog", "bird", "tree", "river", "house", "road", "wind", "cloud", "rain",
        "sun", "moon", "star", "grass", "hill", "lake", "boat", "chair", "table", "door",
        "window", "garden", "field", "forest", "valley", "bridge", "tower", "market", "street", "village",
    ];
    pub const CONNECT: &[&str] = &["the", "is", "was", "and", "very", "quite", "a", "near"];
    pub const TOPICS: &[(&str, &[&str])] = &[
        ("sports", &["match", "goal", "team", "score"]),
        ("finance", &["price", "stock", "profit", "trade"]),
        ("science", &["atom", "cell", "orbit", "theory"]),
        ("music", &["song", "melody", "rhythm", "chord"]),
        ("food", &["bread", "soup", "spice", "feast"]),
    ];
    pub const FIRST_NAMES: &[&str] = &["alice", "bob", "carol", "david", "emma", "frank", "grace", "henry"];
    pub const SURNAMES: &[&str] = &["smithson", "oakley", "devers", "hartley", "quimby", "fenwick"];
    pub const ORGS: &[&str] = &["acme", "globex", "initech", "vandelay", "hooli", "wonka"];
    pub const ORG_SUFFIX: &[&str] = &["corp", "union"];
    pub const LOCS: &[&str] = &["paris", "london", "tokyo", "cairo", "oslo", "lima", "quito", "dakar"];
    pub const LOC_PREFIX: &[&str] = &["north", "south"];
    pub const CUES: &[&str] = &["works", "at", "in", "visited", "from", "joined", "mr", "ms"];
    pub const FINANCE_MARK: &[&str] = &["ledger", "invoice", "account", "balance"];
    pub const QUESTION: &[&str] = &["who", "where", "which", "treats"];
    pub const SYMPTOMS: &[&str] = &["fever", "cough", "ache", "chill"];
    pub const REMEDIES: &[&str] = &["tonic", "salve", "balm", "elixir"];
    pub const MED_FILLER: &[&str] = &["clinic", "dose", "patient", "nurse", "ward", "chart"];

    pub fn all() -> Vec<&'static str> {
        let mut v = Vec::new();
        v.extend_from_slice(POSITIVE);
        v.extend_from_slice(NEGATIVE);
        v.extend_from_slice(FILLER);
        v.extend_from_slice(CONNECT);
        for (_, kw) in TOPICS {
            v.extend_from_slice(kw);
        }
        v.extend_from_slice(FIRST_NAMES);
        v.extend_from_slice(SURNAMES);
        v.extend_from_slice(ORGS);
        v.extend_from_slice(ORG_SUFFIX);
        v.extend_from_slice(LOCS);
        v.extend_from_slice(LOC_PREFIX);
        v.extend_from_slice(CUES);
        v.extend_from_slice(FINANCE_MARK);
        v.extend_from_slice(QUESTION);
        v.extend_from_slice(SYMPTOMS);
        v.extend_from_slice(REMEDIES);
        v.extend_from_slice(MED_FILLER);
        v
    }
}

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Build from plain words; the five specials are prepended at ids 0-4.
    pub fn new<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(String::from));
        let mut index = HashMap::new();
        for (i, t) in all.iter().enumerate() {
            if t.split_whitespace().count() != 1 {
                return Err(Error::InvalidArgument(format!(
                    "`{t}` is not a single token"
                )));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Duplicate(t.clone()));
            }
        }
        Ok(Self { tokens: all, index })
    }

    /// The full synthetic-suite vocabulary.
    pub fn standard() -> Self {
        Self::new(words::all()).expect("standard word list is duplicate-free")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::InvalidArgument(format!("token id {id} out of range")))
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// Ids of whitespace-split words, unknown words mapping to [UNK].
    pub fn encode_words(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id_or_unk(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            words.push(self.token(id)?);
        }
        Ok(words.join(" "))
    }

    /// `[CLS] text [SEP]`, all segment ids 0. Truncates the text to fit.
    pub fn encode_single(&self, text: &str, max_len: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut body = self.encode_words(text);
        if body.is_empty() {
            return Err(Error::InvalidArgument("cannot encode empty text".into()));
        }
        if max_len < 3 {
            return Err(Error::InvalidArgument(format!(
                "max_len {max_len} cannot hold [CLS] token [SEP]"
            )));
        }
        body.truncate(max_len - 2);
        let mut ids = Vec::with_capacity(body.len() + 2);
        ids.push(CLS);
        ids.extend_from_slice(&body);
        ids.push(SEP);
        let types = vec![0; ids.len()];
        Ok((ids, types))
    }

    /// `[CLS] a [SEP] b [SEP]`, segment ids 0 through the first [SEP] and
    /// 1 after it. When too long, the currently longer side loses its last
    /// word (ties trim the second side, keeping questions intact).
    pub fn encode_pair(&self, a: &str, b: &str, max_len: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut left = self.encode_words(a);
        let mut right = self.encode_words(b);
        if left.is_empty() || right.is_empty() {
            return Err(Error::InvalidArgument("cannot encode empty text".into()));
        }
        if max_len < 5 {
            return Err(Error::InvalidArgument(format!(
                "max_len {max_len} cannot hold a [CLS] a [SEP] b [SEP] pair"
            )));
        }
        while left.len() + right.len() + 3 > max_len {
            if left.len() > right.len() {
                left.pop();
            } else {
                right.pop();
            }
            if left.is_empty() || right.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "pair cannot fit in max_len {max_len} without losing a side"
                )));
            }
        }
        let mut ids = Vec::with_capacity(left.len() + right.len() + 3);
        let mut types = Vec::with_capacity(ids.capacity());
        ids.push(CLS);
        ids.extend_from_slice(&left);
        ids.push(SEP);
        types.resize(ids.len(), 0);
        ids.extend_from_slice(&right);
        ids.push(SEP);
        types.resize(ids.len(), 1);
        Ok((ids, types))
    }
}
