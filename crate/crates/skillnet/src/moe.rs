//! Token-routed mixture of experts for the skill layers: a learned gate
//! scores a bank of homogeneous feed-forward experts per token, the two
//! best run, and their outputs combine under softmax-renormalized gate
//! weights. Expert selection is discrete; the combination weights stay
//! on the tape, so the gate trains through them.

use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::rng::truncated_normal;
use crate::tensor::{NodeId, ParamSet, Tape, Tensor};

/// Expert count matching the standard skill inventory.
pub const DEFAULT_EXPERTS: usize = 7;
/// Experts run per token.
pub const TOP_K: usize = 2;

fn check_experts(experts: usize) -> Result<()> {
    if experts < TOP_K {
        return Err(Error::Config(format!(
            "a top-{TOP_K} mixture needs at least {TOP_K} experts, got {experts}"
        )));
    }
    Ok(())
}

/// Create gate and expert parameters under `prefix` (e.g. `layer.1.moe`).
/// Weights draw from a truncated normal, biases start at zero.
#[allow(clippy::too_many_arguments)]
pub fn init_layer(
    params: &mut ParamSet,
    prefix: &str,
    hidden: usize,
    inner: usize,
    experts: usize,
    init_std: f64,
    cutoff: f64,
    rng: &mut ChaCha20Rng,
) -> Result<()> {
    check_experts(experts)?;
    let weight = |params: &mut ParamSet,
                  name: String,
                  shape: &[usize],
                  rng: &mut ChaCha20Rng|
     -> Result<()> {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = truncated_normal(rng, init_std, cutoff);
        }
        params.add(name, t)?;
        Ok(())
    };
    weight(params, format!("{prefix}.gate.w"), &[hidden, experts], rng)?;
    params.add(format!("{prefix}.gate.b"), Tensor::zeros(&[1, experts]))?;
    for e in 0..experts {
        weight(params, format!("{prefix}.expert{e}.w1"), &[hidden, inner], rng)?;
        params.add(format!("{prefix}.expert{e}.b1"), Tensor::zeros(&[1, inner]))?;
        weight(params, format!("{prefix}.expert{e}.w2"), &[inner, hidden], rng)?;
        params.add(format!("{prefix}.expert{e}.b2"), Tensor::zeros(&[1, hidden]))?;
    }
    Ok(())
}

/// Parameter names created by [`init_layer`], in creation order.
pub fn layer_param_names(prefix: &str, experts: usize) -> Vec<String> {
    let mut names = vec![format!("{prefix}.gate.w"), format!("{prefix}.gate.b")];
    for e in 0..experts {
        for part in ["w1", "b1", "w2", "b2"] {
            names.push(format!("{prefix}.expert{e}.{part}"));
        }
    }
    names
}

/// Indices of the two largest entries; ties go to the lower index.
pub fn top2(row: &[f64]) -> [usize; 2] {
    debug_assert!(row.len() >= TOP_K);
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    let mut second = usize::MAX;
    for (j, &v) in row.iter().enumerate() {
        if j != best && (second == usize::MAX || v > row[second]) {
            second = j;
        }
    }
    [best, second]
}

/// One mixture application with its routing choices exposed.
pub struct MoeOutput {
    /// Combined expert outputs, [tokens, hidden].
    pub out: NodeId,
    /// Chosen (primary, secondary) expert per token.
    pub chosen: Vec<[usize; 2]>,
    /// Renormalized combination weights, [tokens, 2].
    pub weights: NodeId,
}

/// Apply the mixture to flat token states `x` of shape [tokens, hidden].
///
/// Each expert runs once per slot, over the tokens routed to it, and the
/// per-token results scatter back into place — compute scales with the
/// two chosen experts, not the bank size. `force` overrides the argmax
/// pair per token (weights still flow from the gate), which pins routing
/// for tests and ablations.
pub fn moe_ffn(
    tape: &mut Tape,
    params: &ParamSet,
    prefix: &str,
    x: NodeId,
    experts: usize,
    force: Option<&[[usize; 2]]>,
) -> Result<MoeOutput> {
    check_experts(experts)?;
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "moe_ffn",
            detail: format!("expected [tokens, hidden], got {shape:?}"),
        });
    }
    let n = shape[0];
    if n == 0 {
        return Err(Error::InvalidArgument("mixture over zero tokens".into()));
    }

    let gate_w = tape.param_named(params, &format!("{prefix}.gate.w"))?;
    let gate_b = tape.param_named(params, &format!("{prefix}.gate.b"))?;
    let logits = tape.matmul(x, gate_w)?;
    let logits = tape.add(logits, gate_b)?;

    let chosen: Vec<[usize; 2]> = match force {
        Some(pairs) => {
            if pairs.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "moe_ffn",
                    detail: format!("{} forced pairs for {} tokens", pairs.len(), n),
                });
            }
            for &[a, b] in pairs {
                if a == b || a >= experts || b >= experts {
                    return Err(Error::InvalidArgument(format!(
                        "forced pair ({a},{b}) must name two distinct experts below {experts}"
                    )));
                }
            }
            pairs.to_vec()
        }
        None => tape.data(logits).chunks(experts).map(top2).collect(),
    };

    // Differentiable combination weights for the chosen pair.
    let all: Vec<usize> = (0..n).collect();
    let primary: Vec<usize> = chosen.iter().map(|c| c[0]).collect();
    let secondary: Vec<usize> = chosen.iter().map(|c| c[1]).collect();
    let picked_0 = tape.gather_elems(logits, &all, &primary)?;
    let picked_1 = tape.gather_elems(logits, &all, &secondary)?;
    let pair_logits = tape.concat_cols(&[picked_0, picked_1])?;
    let weights = tape.softmax_rows(pair_logits)?;

    let mut combined: Option<NodeId> = None;
    for (slot, routed) in [&primary, &secondary].into_iter().enumerate() {
        let mut slot_out: Option<NodeId> = None;
        for e in 0..experts {
            let mine: Vec<usize> = (0..n).filter(|&i| routed[i] == e).collect();
            if mine.is_empty() {
                continue;
            }
            let grouped = tape.gather_rows(x, &mine)?;
            let run = expert_ffn(tape, params, prefix, e, grouped)?;
            let placed = tape.scatter_add_rows(run, &mine, n)?;
            slot_out = Some(match slot_out {
                Some(acc) => tape.add(acc, placed)?,
                None => placed,
            });
        }
        let slot_out = slot_out.expect("every token routes to one expert per slot");
        let w_col = tape.gather_elems(weights, &all, &vec![slot; n])?;
        let weighted = tape.mul(slot_out, w_col)?;
        combined = Some(match combined {
            Some(acc) => tape.add(acc, weighted)?,
            None => weighted,
        });
    }

    Ok(MoeOutput {
        out: combined.expect("at least one slot"),
        chosen,
        weights,
    })
}

fn expert_ffn(
    tape: &mut Tape,
    params: &ParamSet,
    prefix: &str,
    expert: usize,
    x: NodeId,
) -> Result<NodeId> {
    let w1 = tape.param_named(params, &format!("{prefix}.expert{expert}.w1"))?;
    let b1 = tape.param_named(params, &format!("{prefix}.expert{expert}.b1"))?;
    let w2 = tape.param_named(params, &format!("{prefix}.expert{expert}.w2"))?;
    let b2 = tape.param_named(params, &format!("{prefix}.expert{expert}.b2"))?;
    let h = tape.matmul(x, w1)?;
    let h = tape.add(h, b1)?;
    let h = tape.gelu(h);
    let y = tape.matmul(h, w2)?;
    tape.add(y, b2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, GradCheckSettings};
    use rand::Rng;

    const D: usize = 6;
    const INNER: usize = 5;

    fn layer_params(experts: usize, seed: u64, init_std: f64) -> ParamSet {
        let mut params = ParamSet::new();
        let mut rng = crate::rng::seeded(seed);
        init_layer(&mut params, "mix", D, INNER, experts, init_std, 2.0, &mut rng).unwrap();
        params
    }

    fn random_tokens(n: usize, seed: u64) -> Tensor {
        let mut rng = crate::rng::seeded(seed);
        let mut t = Tensor::zeros(&[n, D]);
        for v in t.data_mut() {
            *v = rng.gen::<f64>() * 2.0 - 1.0;
        }
        t
    }

    #[test]
    fn top2_prefers_larger_values_then_lower_indices() {
        assert_eq!(top2(&[0.1, 0.5, 0.3]), [1, 2]);
        assert_eq!(top2(&[0.9, 0.5, 0.3]), [0, 1]);
        assert_eq!(top2(&[0.5, 0.5, 0.1]), [0, 1]);
        assert_eq!(top2(&[0.1, 0.5, 0.5]), [1, 2]);
        assert_eq!(top2(&[0.5, 0.5, 0.5]), [0, 1]);
        assert_eq!(top2(&[-1.0, -3.0, -2.0]), [0, 2]);
    }

    #[test]
    fn an_all_zero_gate_routes_to_the_first_two_experts_with_equal_weight() {
        let mut params = layer_params(4, 1, 0.05);
        params
            .by_name_mut("mix.gate.w")
            .unwrap()
            .value
            .data_mut()
            .fill(0.0);
        let x = random_tokens(5, 2);
        let mut tape = Tape::new();
        let xn = tape.constant(x);
        let moe = moe_ffn(&mut tape, &params, "mix", xn, 4, None).unwrap();
        assert!(moe.chosen.iter().all(|&pair| pair == [0, 1]));
        assert!(tape.data(moe.weights).iter().all(|&w| w == 0.5));
    }

    #[test]
    fn every_token_runs_two_distinct_experts() {
        let params = layer_params(5, 3, 0.8);
        let x = random_tokens(40, 4);
        let mut tape = Tape::new();
        let xn = tape.constant(x);
        let moe = moe_ffn(&mut tape, &params, "mix", xn, 5, None).unwrap();
        assert_eq!(moe.chosen.len(), 40);
        for &[a, b] in &moe.chosen {
            assert_ne!(a, b);
            assert!(a < 5 && b < 5);
        }
        // the weights renormalize the two picked logits
        for row in tape.data(moe.weights).chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
            assert!(row[0] >= row[1], "primary weight below secondary");
        }
    }

    #[test]
    fn chosen_pairs_match_the_gate_logits() {
        let params = layer_params(6, 5, 0.8);
        let x = random_tokens(30, 6);
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let moe = moe_ffn(&mut tape, &params, "mix", xn, 6, None).unwrap();
        // recompute the gate by hand
        let gw = &params.by_name("mix.gate.w").unwrap().value;
        let gb = &params.by_name("mix.gate.b").unwrap().value;
        for (i, &pair) in moe.chosen.iter().enumerate() {
            let mut row = vec![0.0; 6];
            for (e, r) in row.iter_mut().enumerate() {
                *r = gb.data()[e];
                for k in 0..D {
                    *r += x.data()[i * D + k] * gw.data()[k * 6 + e];
                }
            }
            let mut order: Vec<usize> = (0..6).collect();
            order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            assert_eq!(pair, [order[0], order[1]], "token {i}");
        }
    }

    #[test]
    fn grouped_execution_matches_a_dense_combination() {
        let experts = 4;
        let params = layer_params(experts, 7, 0.8);
        let x = random_tokens(12, 8);
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let moe = moe_ffn(&mut tape, &params, "mix", xn, experts, None).unwrap();
        let out = tape.data(moe.out).to_vec();
        let weights = tape.data(moe.weights).to_vec();

        // dense reference: run every expert over every token, then blend
        // with the sparse weight matrix
        let dense: Vec<Vec<f64>> = (0..experts)
            .map(|e| {
                let mut t2 = Tape::new();
                let xn = t2.constant(x.clone());
                let y = expert_ffn(&mut t2, &params, "mix", e, xn).unwrap();
                t2.data(y).to_vec()
            })
            .collect();
        for i in 0..12 {
            let [a, b] = moe.chosen[i];
            for k in 0..D {
                let want =
                    weights[i * 2] * dense[a][i * D + k] + weights[i * 2 + 1] * dense[b][i * D + k];
                let got = out[i * D + k];
                assert!(
                    (want - got).abs() < 1e-12,
                    "token {i} dim {k}: dense {want} vs grouped {got}"
                );
            }
        }
    }

    #[test]
    fn forced_routing_overrides_the_gate_but_not_the_weights() {
        let experts = 4;
        let params = layer_params(experts, 9, 0.8);
        let x = random_tokens(6, 10);
        let forced = vec![[2usize, 0usize]; 6];
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let moe = moe_ffn(&mut tape, &params, "mix", xn, experts, Some(&forced)).unwrap();
        assert_eq!(moe.chosen, forced);
        // weights = softmax over the forced pair's live gate logits
        for row in tape.data(moe.weights).chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        }

        let mut bad = forced.clone();
        bad[3] = [1, 1];
        let mut t2 = Tape::new();
        let xn2 = t2.constant(x.clone());
        assert!(moe_ffn(&mut t2, &params, "mix", xn2, experts, Some(&bad)).is_err());
        bad[3] = [1, 9];
        let mut t3 = Tape::new();
        let xn3 = t3.constant(x);
        assert!(moe_ffn(&mut t3, &params, "mix", xn3, experts, Some(&bad)).is_err());
    }

    #[test]
    fn gate_and_expert_gradients_match_finite_differences() {
        let experts = 3;
        let mut params = layer_params(experts, 11, 0.8);
        let x = random_tokens(5, 12);

        // selection must not flip under finite-difference probes: demand a
        // clear margin between the runner-up and the best rejected expert
        {
            let mut tape = Tape::new();
            let xn = tape.constant(x.clone());
            let gw = tape.param_named(&params, "mix.gate.w").unwrap();
            let gb = tape.param_named(&params, "mix.gate.b").unwrap();
            let lg = tape.matmul(xn, gw).unwrap();
            let lg = tape.add(lg, gb).unwrap();
            for row in tape.data(lg).chunks(experts) {
                let mut sorted = row.to_vec();
                sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                assert!(sorted[1] - sorted[2] > 1e-3, "margin too thin: {row:?}");
            }
        }

        let report = check_gradients(
            &mut params,
            None,
            |tape, ps| {
                let xn = tape.constant(x.clone());
                let moe = moe_ffn(tape, ps, "mix", xn, experts, None)?;
                let sq = tape.mul(moe.out, moe.out)?;
                Ok(tape.mean_all(sq))
            },
            &GradCheckSettings::default(),
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-6,
            "worst coordinate {:?}",
            report.worst
        );
    }

    #[test]
    fn param_names_match_creation_order_and_bad_sizes_are_rejected() {
        let params = layer_params(3, 13, 0.05);
        let names: Vec<String> = params.names().map(String::from).collect();
        assert_eq!(names, layer_param_names("mix", 3));

        let mut empty = ParamSet::new();
        let mut rng = crate::rng::seeded(14);
        assert!(init_layer(&mut empty, "mix", D, INNER, 1, 0.05, 2.0, &mut rng).is_err());
        let one = random_tokens(3, 15);
        let mut tape = Tape::new();
        let xn = tape.constant(one);
        assert!(moe_ffn(&mut tape, &params, "mix", xn, 1, None).is_err());
    }
}
