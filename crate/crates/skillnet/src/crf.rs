//! Linear-chain CRF: log-space forward algorithm for the loss, Viterbi for
//! decoding. Transition scores are a [K,K] matrix plus explicit start and
//! end score vectors.

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape};

fn check_vectors(tape: &Tape, k: usize, trans: NodeId, start: NodeId, end: NodeId) -> Result<()> {
    if tape.shape(trans) != [k, k] {
        return Err(Error::ShapeMismatch {
            op: "crf",
            detail: format!("transitions {:?}, want [{k},{k}]", tape.shape(trans)),
        });
    }
    for (name, node) in [("start", start), ("end", end)] {
        if tape.shape(node) != [1, k] {
            return Err(Error::ShapeMismatch {
                op: "crf",
                detail: format!("{name} scores {:?}, want [1,{k}]", tape.shape(node)),
            });
        }
    }
    Ok(())
}

/// Negative log-likelihood of one labeled sequence given emissions [L,K].
pub fn crf_nll(
    tape: &mut Tape,
    emissions: NodeId,
    trans: NodeId,
    start: NodeId,
    end: NodeId,
    labels: &[usize],
) -> Result<NodeId> {
    let shape = tape.shape(emissions).to_vec();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "crf",
            detail: format!("emissions {:?}, want [L,K]", shape),
        });
    }
    let (l, k) = (shape[0], shape[1]);
    check_vectors(tape, k, trans, start, end)?;
    if labels.len() != l || l == 0 {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {} positions",
            labels.len(),
            l
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {} out of range for {} tags",
            bad, k
        )));
    }

    // forward recursion in log space; alpha is a [1,K] row
    let emit_0 = tape.gather_rows(emissions, &[0])?;
    let mut alpha = tape.add(start, emit_0)?;
    for t in 1..l {
        let col = tape.reshape(alpha, vec![k, 1])?;
        let scores = tape.add(col, trans)?; // [i,j] = alpha_i + trans[i,j]
        let by_next = tape.permute_axes(scores, &[1, 0])?;
        let reduced = tape.log_sum_exp_rows(by_next)?; // over previous tag
        let row = tape.reshape(reduced, vec![1, k])?;
        let emit_t = tape.gather_rows(emissions, &[t])?;
        alpha = tape.add(row, emit_t)?;
    }
    let terminal = tape.add(alpha, end)?;
    let log_z = tape.log_sum_exp_rows(terminal)?; // [1]

    // score of the gold path
    let rows: Vec<usize> = (0..l).collect();
    let emit_scores = tape.gather_elems(emissions, &rows, labels)?;
    let mut gold = tape.sum_all(emit_scores);
    let s0 = tape.gather_elems(start, &[0], &[labels[0]])?;
    gold = tape.add(gold, s0)?;
    if l > 1 {
        let trans_scores = tape.gather_elems(trans, &labels[..l - 1], &labels[1..])?;
        let ts = tape.sum_all(trans_scores);
        gold = tape.add(gold, ts)?;
    }
    let e_last = tape.gather_elems(end, &[0], &[labels[l - 1]])?;
    gold = tape.add(gold, e_last)?;

    let log_z = tape.reshape(log_z, vec![1])?;
    let gold = tape.reshape(gold, vec![1])?;
    tape.sub(log_z, gold)
}

/// Highest-scoring tag sequence for emissions [L,K] (row-major slice).
/// Score ties resolve to the lower tag index at every choice.
pub fn crf_viterbi(
    emissions: &[f64],
    l: usize,
    k: usize,
    trans: &[f64],
    start: &[f64],
    end: &[f64],
) -> Result<Vec<usize>> {
    if l == 0 || k == 0 || emissions.len() != l * k {
        return Err(Error::InvalidArgument(format!(
            "emissions of {} values for L={} K={}",
            emissions.len(),
            l,
            k
        )));
    }
    if trans.len() != k * k || start.len() != k || end.len() != k {
        return Err(Error::ShapeMismatch {
            op: "crf_viterbi",
            detail: "transition/start/end sizes disagree with K".into(),
        });
    }

    let mut score: Vec<f64> = (0..k).map(|j| start[j] + emissions[j]).collect();
    let mut back: Vec<usize> = Vec::with_capacity((l - 1) * k);
    for t in 1..l {
        let mut next = vec![f64::NEG_INFINITY; k];
        for j in 0..k {
            let mut best_i = 0;
            let mut best = score[0] + trans[j];
            for i in 1..k {
                let cand = score[i] + trans[i * k + j];
                if cand > best {
                    best = cand;
                    best_i = i;
                }
            }
            next[j] = best + emissions[t * k + j];
            back.push(best_i);
        }
        score = next;
    }

    let mut last = 0;
    let mut best = score[0] + end[0];
    for j in 1..k {
        let cand = score[j] + end[j];
        if cand > best {
            best = cand;
            last = j;
        }
    }

    let mut path = vec![0usize; l];
    path[l - 1] = last;
    for t in (1..l).rev() {
        path[t - 1] = back[(t - 1) * k + path[t]];
    }
    Ok(path)
}
