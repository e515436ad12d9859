//! Central-finite-difference verification of tape gradients.

use super::{NodeId, ParamSet, Tape};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckSettings {
    /// Perturbation half-step for the central difference.
    pub step: f64,
    /// Cap on coordinates probed per parameter; evenly strided when hit.
    pub max_coords_per_param: Option<usize>,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords_per_param: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WorstCoord {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub worst: Option<WorstCoord>,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs() + 1e-12)
}

/// Compare tape gradients of a scalar loss against central differences.
///
/// `build` must construct the loss from scratch on the given tape; it is
/// invoked once for the analytic pass and twice per probed coordinate.
/// `names` restricts which parameters are probed (None probes all). Values
/// are restored bit-exactly afterwards.
pub fn check_gradients<F>(
    params: &mut ParamSet,
    names: Option<&[&str]>,
    build: F,
    settings: &GradCheckSettings,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<NodeId>,
{
    let eval = |params: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = build(&mut tape, params)?;
        tape.scalar(loss)
    };

    params.zero_grads();
    {
        let mut tape = Tape::new();
        let loss = build(&mut tape, params)?;
        tape.backward(loss, params)?;
    }
    let analytic: Vec<(String, Vec<f64>)> = params
        .iter()
        .map(|p| (p.name().to_string(), p.grad.data().to_vec()))
        .collect();

    let probe: Vec<String> = match names {
        Some(ns) => ns.iter().map(|s| s.to_string()).collect(),
        None => params.names().map(String::from).collect(),
    };

    let mut report = GradReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst: None,
    };

    for name in &probe {
        let numel = params.by_name(name)?.value.numel();
        let coords: Vec<usize> = match settings.max_coords_per_param {
            Some(cap) if numel > cap => {
                let stride = numel as f64 / cap as f64;
                (0..cap).map(|i| (i as f64 * stride) as usize).collect()
            }
            _ => (0..numel).collect(),
        };
        let grad_row = &analytic
            .iter()
            .find(|(n, _)| n == name)
            .expect("probed param has analytic grads")
            .1;
        for &idx in &coords {
            let orig = params.by_name(name)?.value.data()[idx];
            params.by_name_mut(name)?.value.data_mut()[idx] = orig + settings.step;
            let up = eval(params)?;
            params.by_name_mut(name)?.value.data_mut()[idx] = orig - settings.step;
            let down = eval(params)?;
            params.by_name_mut(name)?.value.data_mut()[idx] = orig;

            let numeric = (up - down) / (2.0 * settings.step);
            let a = grad_row[idx];
            let e = rel_err(a, numeric);
            report.coords_checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some(WorstCoord {
                    param: name.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_err: e,
                });
            }
        }
    }
    Ok(report)
}
