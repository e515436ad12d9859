//! Task prediction heads on top of the encoder output: sequence
//! classification from the leading [CLS] vector, CRF token tagging, and
//! extractive start/end span selection. Head parameters are always
//! trainable; skill freezing never touches them.

use rand_chacha::ChaCha20Rng;

use crate::crf::{crf_nll, crf_viterbi};
use crate::encoder::{ATTENTION_MASK_BIAS, INIT_CUTOFF_SIGMA};
use crate::error::{Error, Result};
use crate::rng::truncated_normal;
use crate::routing::TaskKind;
use crate::tensor::{NodeId, ParamSet, Tape, Tensor};

/// Output layer shape for one task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskHead {
    Classify { classes: usize },
    Tag { tags: usize },
    Span,
}

impl TaskHead {
    pub fn for_task(kind: &TaskKind) -> Self {
        match *kind {
            TaskKind::SingleClass { classes } | TaskKind::PairClass { classes } => {
                Self::Classify { classes }
            }
            TaskKind::SeqLabel { tags } => Self::Tag { tags },
            TaskKind::Span => Self::Span,
        }
    }

    /// Create this head's parameters under the `head.{task}.` prefix.
    /// Projections draw from the same truncated normal as the encoder,
    /// bias-like score vectors start at zero.
    pub fn init(
        &self,
        task: &str,
        params: &mut ParamSet,
        rng: &mut ChaCha20Rng,
        hidden: usize,
        init_std: f64,
    ) -> Result<()> {
        let weight = |params: &mut ParamSet, name: String, shape: &[usize], rng: &mut ChaCha20Rng| -> Result<()> {
            let mut t = Tensor::zeros(shape);
            for v in t.data_mut() {
                *v = truncated_normal(rng, init_std, INIT_CUTOFF_SIGMA);
            }
            params.add(name, t)?;
            Ok(())
        };
        match *self {
            Self::Classify { classes } => {
                if classes < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "classifier for {task} needs at least 2 classes"
                    )));
                }
                weight(params, format!("head.{task}.cls.w"), &[hidden, classes], rng)?;
                params.add(format!("head.{task}.cls.b"), Tensor::zeros(&[1, classes]))?;
            }
            Self::Tag { tags } => {
                if tags == 0 {
                    return Err(Error::InvalidArgument(format!(
                        "tagger for {task} needs at least 1 tag"
                    )));
                }
                weight(params, format!("head.{task}.emit.w"), &[hidden, tags], rng)?;
                params.add(format!("head.{task}.emit.b"), Tensor::zeros(&[1, tags]))?;
                weight(params, format!("head.{task}.crf.trans"), &[tags, tags], rng)?;
                params.add(format!("head.{task}.crf.start"), Tensor::zeros(&[1, tags]))?;
                params.add(format!("head.{task}.crf.end"), Tensor::zeros(&[1, tags]))?;
            }
            Self::Span => {
                weight(params, format!("head.{task}.span.start"), &[hidden, 1], rng)?;
                weight(params, format!("head.{task}.span.end"), &[hidden, 1], rng)?;
            }
        }
        Ok(())
    }

    pub fn param_names(&self, task: &str) -> Vec<String> {
        match *self {
            Self::Classify { .. } => vec![
                format!("head.{task}.cls.w"),
                format!("head.{task}.cls.b"),
            ],
            Self::Tag { .. } => vec![
                format!("head.{task}.emit.w"),
                format!("head.{task}.emit.b"),
                format!("head.{task}.crf.trans"),
                format!("head.{task}.crf.start"),
                format!("head.{task}.crf.end"),
            ],
            Self::Span => vec![
                format!("head.{task}.span.start"),
                format!("head.{task}.span.end"),
            ],
        }
    }
}

fn dims3(tape: &Tape, hidden: NodeId) -> Result<(usize, usize, usize)> {
    let shape = tape.shape(hidden);
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "head",
            detail: format!("encoder output {:?}, want [B,L,d]", shape),
        });
    }
    Ok((shape[0], shape[1], shape[2]))
}

/// Logits from the [CLS] vector of every sequence: [B, classes].
pub fn cls_logits(
    tape: &mut Tape,
    params: &ParamSet,
    task: &str,
    hidden: NodeId,
) -> Result<NodeId> {
    let (b, l, d) = dims3(tape, hidden)?;
    let flat = tape.reshape(hidden, vec![b * l, d])?;
    let first_rows: Vec<usize> = (0..b).map(|e| e * l).collect();
    let cls = tape.gather_rows(flat, &first_rows)?;
    let w = tape.param_named(params, &format!("head.{task}.cls.w"))?;
    let bias = tape.param_named(params, &format!("head.{task}.cls.b"))?;
    let proj = tape.matmul(cls, w)?;
    tape.add(proj, bias)
}

/// Mean cross-entropy over the batch; returns (loss, logits).
pub fn cls_loss(
    tape: &mut Tape,
    params: &ParamSet,
    task: &str,
    hidden: NodeId,
    labels: &[usize],
) -> Result<(NodeId, NodeId)> {
    let logits = cls_logits(tape, params, task, hidden)?;
    let loss = tape.cross_entropy_mean(logits, labels)?;
    Ok((loss, logits))
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn cls_predict(
    tape: &mut Tape,
    params: &ParamSet,
    task: &str,
    hidden: NodeId,
) -> Result<Vec<usize>> {
    let logits = cls_logits(tape, params, task, hidden)?;
    let shape = tape.shape(logits).to_vec();
    let data = tape.data(logits);
    Ok((0..shape[0])
        .map(|r| argmax_row(&data[r * shape[1]..(r + 1) * shape[1]]))
        .collect())
}

/// Per-example emission matrices [len_e, K] over the real (unpadded) rows.
fn tag_emissions(
    tape: &mut Tape,
    params: &ParamSet,
    task: &str,
    hidden: NodeId,
    lens: &[usize],
) -> Result<Vec<NodeId>> {
    let (b, l, d) = dims3(tape, hidden)?;
    if lens.len() != b {
        return Err(Error::InvalidArgument(format!(
            "{} lengths for batch of {}",
            lens.len(),
            b
        )));
    }
    let flat = tape.reshape(hidden, vec![b * l, d])?;
    let w = tape.param_named(params, &format!("head.{task}.emit.w"))?;
    let bias = tape.param_named(params, &format!("head.{task}.emit.b"))?;
    let mut out = Vec::with_capacity(b);
    for (e, &len) in lens.iter().enumerate() {
        if len == 0 || len > l {
            return Err(Error::InvalidArgument(format!(
                "example {e} length {len} outside 1..={l}"
            )));
        }
        let rows: Vec<usize> = (0..len).map(|t| e * l + t).collect();
        let h = tape.gather_rows(flat, &rows)?;
        let proj = tape.matmul(h, w)?;
        out.push(tape.add(proj, bias)?);
    }
    Ok(out)
}

/// Mean CRF negative log-likelihood over the batch. `labels[e]` must cover
/// exactly the `lens[e]` real positions of example `e`.
pub fn tag_loss(
    tape: &mut Tape,
    params: &ParamSet,
    task: &str,
    hidden: NodeId,
    lens: &[usize],
    labels: &[Vec<usize>],
) -> Result<NodeId> {
    if labels.len() != lens.len() {
        return Err(Error::InvalidArgument(format!(
            "{} label rows for batch of {}",
            labels.len(),
            lens.len()
        )));
    }
    let trans = tape.param_named(params, &format!("head.{task}.crf.trans"))?;
    let start = tape.param_named(params, &format!("head.{task}.crf.start"))?;
    let end = tape.param_named(params, &format!("head.{task}.crf.end"))?;
    let emissions = tag_emissions(tape, params, task, hidden, lens)?;
    let mut nlls = Vec::with_capacity(emissions.len());
    for (e, &em) in emissions.iter().enumerate() {
        nlls.push(crf_nll(tape, em, trans, start, end, &labels[e])?);
    }
    tape.mean_of(&nlls)
}

/// Viterbi decode for every example; returns one tag row per example.
pub fn tag_decode(
    tape: &mut Tape,
    params: &ParamSet,
    task: &str,
    hidden: NodeId,
    lens: &[usize],
) -> Result<Vec<Vec<usize>>> {
    let emissions = tag_emissions(tape, params, task, hidden, lens)?;
    let trans = params.by_name(&format!("head.{task}.crf.trans"))?.value.data();
    let start = params.by_name(&format!("head.{task}.crf.start"))?.value.data();
    let end = params.by_name(&format!("head.{task}.crf.end"))?.value.data();
    let k = start.len();
    emissions
        .iter()
        .zip(lens)
        .map(|(&em, &len)| crf_viterbi(tape.data(em), len, k, trans, start, end))
        .collect()
}

pub struct SpanOutput {
    pub loss: NodeId,
    /// Softmax over passage positions, [B, L]; zero outside the passage.
    pub start_probs: NodeId,
    pub end_probs: NodeId,
}

/// Start/end extraction loss: dot products with the start and end vectors,
/// softmaxed over passage positions only; the loss averages the two
/// cross-entropies. `passage` is a row-major [B*L] eligibility mask.
/// Passage-masked start/end logits, each [B, L]; positions outside the
/// passage carry a large negative bias so their probability underflows
/// to exactly zero.
pub fn span_logits(
    tape: &mut Tape,
    params: &ParamSet,
    task: &str,
    hidden: NodeId,
    passage: &[bool],
) -> Result<(NodeId, NodeId)> {
    let (b, l, d) = dims3(tape, hidden)?;
    if passage.len() != b * l {
        return Err(Error::InvalidArgument(format!(
            "passage mask of {} for {}x{} batch",
            passage.len(),
            b,
            l
        )));
    }
    let flat = tape.reshape(hidden, vec![b * l, d])?;
    let mask_data: Vec<f64> = passage
        .iter()
        .map(|&inside| if inside { 0.0 } else { ATTENTION_MASK_BIAS })
        .collect();
    let mask = tape.constant_parts(vec![b, l], mask_data)?;

    let side = |tape: &mut Tape, name: &str| -> Result<NodeId> {
        let v = tape.param_named(params, &format!("head.{task}.span.{name}"))?;
        let dots = tape.matmul(flat, v)?;
        let rows = tape.reshape(dots, vec![b, l])?;
        tape.add(rows, mask)
    };
    Ok((side(tape, "start")?, side(tape, "end")?))
}

pub fn span_loss(
    tape: &mut Tape,
    params: &ParamSet,
    task: &str,
    hidden: NodeId,
    passage: &[bool],
    starts: &[usize],
    ends: &[usize],
) -> Result<SpanOutput> {
    let (b, l, _) = dims3(tape, hidden)?;
    if starts.len() != b || ends.len() != b {
        return Err(Error::InvalidArgument(format!(
            "{} starts / {} ends for batch of {}",
            starts.len(),
            ends.len(),
            b
        )));
    }
    if passage.len() == b * l {
        for e in 0..b {
            let (s, t) = (starts[e], ends[e]);
            if s > t || t >= l || !passage[e * l + s] || !passage[e * l + t] {
                return Err(Error::InvalidArgument(format!(
                    "example {e}: answer ({s},{t}) not a forward span inside the passage"
                )));
            }
        }
    }
    let (start_logits, end_logits) = span_logits(tape, params, task, hidden, passage)?;

    let ce_start = tape.cross_entropy_mean(start_logits, starts)?;
    let ce_end = tape.cross_entropy_mean(end_logits, ends)?;
    let sum = tape.add(ce_start, ce_end)?;
    let loss = tape.scale(sum, 0.5);

    let start_probs = tape.softmax_rows(start_logits)?;
    let end_probs = tape.softmax_rows(end_logits)?;
    Ok(SpanOutput {
        loss,
        start_probs,
        end_probs,
    })
}

/// Best (start, end) pair by product of the two probabilities, over pairs
/// with start <= end and end - start < max_answer_len. Ties resolve to the
/// smaller start, then the smaller end.
#[allow(clippy::needless_range_loop)]
pub fn span_decode(start_probs: &[f64], end_probs: &[f64], max_answer_len: usize) -> (usize, usize) {
    debug_assert_eq!(start_probs.len(), end_probs.len());
    let l = start_probs.len().min(end_probs.len());
    let mut best = f64::NEG_INFINITY;
    let mut pair = (0, 0);
    for i in 0..l {
        for j in i..l.min(i + max_answer_len) {
            let p = start_probs[i] * end_probs[j];
            if p > best {
                best = p;
                pair = (i, j);
            }
        }
    }
    pair
}
