//! Evaluation metrics: accuracy, binary F1, entity-level F1 over BIO
//! tags, token-overlap span F1, and top-1 accuracy over ranked groups.

use crate::error::{Error, Result};

use super::TAGS;

pub fn accuracy(preds: &[usize], golds: &[usize]) -> Result<f64> {
    if preds.len() != golds.len() || preds.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions vs {} golds",
            preds.len(),
            golds.len()
        )));
    }
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// F1 of the positive class (label 1). An empty positive set on both
/// sides counts as perfect.
pub fn binary_f1(preds: &[usize], golds: &[usize]) -> Result<f64> {
    if preds.len() != golds.len() || preds.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions vs {} golds",
            preds.len(),
            golds.len()
        )));
    }
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fneg = 0.0;
    for (&p, &g) in preds.iter().zip(golds) {
        match (p == 1, g == 1) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fneg += 1.0,
            (false, false) => {}
        }
    }
    let denom = 2.0 * tp + fp + fneg;
    Ok(if denom == 0.0 { 1.0 } else { 2.0 * tp / denom })
}

/// Entities as (type index, start, inclusive end) decoded from BIO tag
/// ids. A stray I-X (no compatible entity underway) opens a new entity.
pub fn decode_entities(tags: &[usize]) -> Result<Vec<(usize, usize, usize)>> {
    let mut out: Vec<(usize, usize, usize)> = Vec::new();
    let mut open: Option<(usize, usize)> = None; // (type, start)
    for (i, &t) in tags.iter().enumerate() {
        if t >= TAGS.len() {
            return Err(Error::InvalidArgument(format!("tag id {t} out of range")));
        }
        if t == 0 {
            if let Some((ty, s)) = open.take() {
                out.push((ty, s, i - 1));
            }
            continue;
        }
        let ty = (t - 1) / 2;
        let begins = t % 2 == 1;
        match open {
            Some((open_ty, _)) if !begins && open_ty == ty => {} // continue entity
            _ => {
                if let Some((open_ty, s)) = open.take() {
                    out.push((open_ty, s, i - 1));
                }
                open = Some((ty, i));
            }
        }
    }
    if let Some((ty, s)) = open {
        out.push((ty, s, tags.len() - 1));
    }
    Ok(out)
}

/// Micro-averaged exact-match entity F1 over a corpus of tag rows.
pub fn entity_f1(preds: &[Vec<usize>], golds: &[Vec<usize>]) -> Result<f64> {
    if preds.len() != golds.len() || preds.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} predicted rows vs {} gold rows",
            preds.len(),
            golds.len()
        )));
    }
    let mut tp = 0.0;
    let mut n_pred = 0.0;
    let mut n_gold = 0.0;
    for (p_row, g_row) in preds.iter().zip(golds) {
        let p = decode_entities(p_row)?;
        let mut g = decode_entities(g_row)?;
        n_pred += p.len() as f64;
        n_gold += g.len() as f64;
        for ent in p {
            if let Some(pos) = g.iter().position(|&e| e == ent) {
                g.swap_remove(pos);
                tp += 1.0;
            }
        }
    }
    let denom = n_pred + n_gold;
    Ok(if denom == 0.0 { 1.0 } else { 2.0 * tp / denom })
}

/// Mean per-example token-overlap F1 between predicted and gold spans
/// (inclusive index pairs).
pub fn span_f1(preds: &[(usize, usize)], golds: &[(usize, usize)]) -> Result<f64> {
    if preds.len() != golds.len() || preds.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} predicted spans vs {} gold spans",
            preds.len(),
            golds.len()
        )));
    }
    let mut total = 0.0;
    for (&(ps, pe), &(gs, ge)) in preds.iter().zip(golds) {
        if ps > pe || gs > ge {
            return Err(Error::InvalidArgument(format!(
                "backwards span ({ps},{pe}) or ({gs},{ge})"
            )));
        }
        let lo = ps.max(gs);
        let hi = pe.min(ge);
        let overlap = if lo <= hi { (hi - lo + 1) as f64 } else { 0.0 };
        if overlap > 0.0 {
            let p = overlap / (pe - ps + 1) as f64;
            let r = overlap / (ge - gs + 1) as f64;
            total += 2.0 * p * r / (p + r);
        }
    }
    Ok(total / preds.len() as f64)
}

/// Fraction of groups whose highest-scoring candidate is the positive
/// one. Candidates are (score, is_positive); ties keep the earlier
/// candidate.
pub fn group_top1(groups: &[Vec<(f64, bool)>]) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::InvalidArgument("no groups to score".into()));
    }
    let mut hits = 0.0;
    for (gi, group) in groups.iter().enumerate() {
        if group.is_empty() {
            return Err(Error::InvalidArgument(format!("group {gi} is empty")));
        }
        let mut best = 0;
        for (i, &(score, _)) in group.iter().enumerate().skip(1) {
            if score > group[best].0 {
                best = i;
            }
        }
        if group[best].1 {
            hits += 1.0;
        }
    }
    Ok(hits / groups.len() as f64)
}
