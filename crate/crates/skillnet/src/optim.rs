//! Adam with per-parameter step counts, an explicit active set, linear
//! warmup/decay scheduling, and global-norm gradient clipping.
//!
//! Sparse training means most steps touch only a slice of the model, so
//! bias correction tracks how often each parameter was actually updated.
//! Parameters outside the active set are skipped entirely: values, moments,
//! and counts keep their exact bit patterns.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::ParamSet;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
        }
    }
}

/// First/second moment buffers plus the number of updates this parameter
/// has received. Allocated lazily on first update.
#[derive(Debug, Clone)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: u64,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    slots: BTreeMap<String, AdamSlot>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            slots: BTreeMap::new(),
        }
    }

    /// Apply one update to exactly the named parameters using their current
    /// gradients. The update is `lr * mhat / (sqrt(vhat) + eps)`.
    pub fn step(&mut self, params: &mut ParamSet, active: &[String], lr: f64) -> Result<()> {
        let AdamConfig { beta1, beta2, eps } = self.config;
        for name in active {
            let p = params.by_name_mut(name)?;
            let n = p.value.numel();
            let slot = self
                .slots
                .entry(name.clone())
                .or_insert_with(|| AdamSlot {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                    steps: 0,
                });
            if slot.m.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    detail: format!(
                        "slot for `{}` holds {} elements, parameter has {}",
                        name,
                        slot.m.len(),
                        n
                    ),
                });
            }
            slot.steps += 1;
            let bc1 = 1.0 - beta1.powi(slot.steps as i32);
            let bc2 = 1.0 - beta2.powi(slot.steps as i32);
            let value = p.value.data_mut();
            let grad = p.grad.data();
            for i in 0..n {
                let g = grad[i];
                slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g;
                slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g * g;
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                value[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn slot(&self, name: &str) -> Option<&AdamSlot> {
        self.slots.get(name)
    }

    pub fn slots(&self) -> &BTreeMap<String, AdamSlot> {
        &self.slots
    }

    /// Replace all optimizer state, e.g. when restoring a checkpoint.
    pub fn restore_slots(&mut self, slots: BTreeMap<String, AdamSlot>) {
        self.slots = slots;
    }
}

/// Scale the named gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping. Gradients at or under the limit are
/// left untouched, bit for bit.
pub fn clip_global_norm(params: &mut ParamSet, active: &[String], max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 || !max_norm.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "clip norm must be positive and finite, got {}",
            max_norm
        )));
    }
    let mut sq = 0.0;
    for name in active {
        for &g in params.by_name(name)?.grad.data() {
            sq += g * g;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for name in active {
            for g in params.by_name_mut(name)?.grad.data_mut() {
                *g *= scale;
            }
        }
    }
    Ok(norm)
}

/// Linear warmup from zero to `peak` over `warmup` steps, then linear decay
/// to zero at `total`. Steps are 1-based: the first update uses step 1.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: u64,
    pub total: u64,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup: u64, total: u64) -> Result<Self> {
        if total == 0 || warmup > total {
            return Err(Error::InvalidArgument(format!(
                "schedule needs 0 <= warmup <= total with total > 0, got warmup {} total {}",
                warmup, total
            )));
        }
        if !(peak.is_finite() && peak > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "peak learning rate must be positive, got {}",
                peak
            )));
        }
        Ok(Self {
            peak,
            warmup,
            total,
        })
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step == 0 {
            return 0.0;
        }
        if step <= self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        if step >= self.total {
            return 0.0;
        }
        self.peak * (self.total - step) as f64 / (self.total - self.warmup) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(value: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::new(vec![1], vec![value]).unwrap())
            .unwrap();
        ps
    }

    fn set_grad(ps: &mut ParamSet, name: &str, g: &[f64]) {
        ps.by_name_mut(name)
            .unwrap()
            .grad
            .data_mut()
            .copy_from_slice(g);
    }

    #[test]
    fn first_step_with_unit_gradient_moves_by_lr() {
        // With g = 1 the bias-corrected moments are both exactly 1, so the
        // update is lr / (1 + eps), every step while the gradient stays 1.
        let mut ps = one_param(1.0);
        let mut adam = Adam::new(AdamConfig::default());
        let active = vec!["w".to_string()];
        set_grad(&mut ps, "w", &[1.0]);
        adam.step(&mut ps, &active, 0.1).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-6);
        assert!((ps.by_name("w").unwrap().value.data()[0] - expected).abs() < 1e-15);

        set_grad(&mut ps, "w", &[1.0]);
        adam.step(&mut ps, &active, 0.1).unwrap();
        let expected = expected - 0.1 / (1.0 + 1e-6);
        assert!((ps.by_name("w").unwrap().value.data()[0] - expected).abs() < 1e-15);

        let slot = adam.slot("w").unwrap();
        assert_eq!(slot.steps, 2);
        assert!((slot.m[0] - 0.19).abs() < 1e-15);
        assert!((slot.v[0] - 0.0396).abs() < 1e-15);
    }

    #[test]
    fn inactive_parameters_are_bit_frozen() {
        let mut ps = ParamSet::new();
        ps.add("a", Tensor::new(vec![2], vec![0.5, -0.5]).unwrap())
            .unwrap();
        ps.add("b", Tensor::new(vec![2], vec![0.25, -0.0]).unwrap())
            .unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        set_grad(&mut ps, "a", &[1.0, 2.0]);
        set_grad(&mut ps, "b", &[3.0, 4.0]);
        let before = ps.by_name("b").unwrap().value.clone();

        adam.step(&mut ps, &["a".to_string()], 0.01).unwrap();

        assert!(ps.by_name("b").unwrap().value.bits_eq(&before));
        assert!(adam.slot("b").is_none());
        assert_ne!(ps.by_name("a").unwrap().value.data()[0], 0.5);
    }

    #[test]
    fn per_parameter_counts_survive_skipped_steps() {
        // b skips a step; its own trajectory must match an uninterrupted one.
        let run = |skip_middle: bool| -> f64 {
            let mut ps = ParamSet::new();
            ps.add("a", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
            ps.add("b", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
            let mut adam = Adam::new(AdamConfig::default());
            let both = vec!["a".to_string(), "b".to_string()];
            let only_a = vec!["a".to_string()];

            set_grad(&mut ps, "a", &[0.3]);
            set_grad(&mut ps, "b", &[0.3]);
            adam.step(&mut ps, &both, 0.05).unwrap();

            if skip_middle {
                set_grad(&mut ps, "a", &[-0.1]);
                adam.step(&mut ps, &only_a, 0.05).unwrap();
            }

            set_grad(&mut ps, "a", &[0.2]);
            set_grad(&mut ps, "b", &[0.2]);
            adam.step(&mut ps, &both, 0.05).unwrap();
            ps.by_name("b").unwrap().value.data()[0]
        };
        assert_eq!(run(true).to_bits(), run(false).to_bits());
    }

    #[test]
    fn unknown_active_name_errors() {
        let mut ps = one_param(0.0);
        let mut adam = Adam::new(AdamConfig::default());
        assert!(adam.step(&mut ps, &["nope".to_string()], 0.1).is_err());
    }

    #[test]
    fn clip_rescales_only_above_threshold() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap())
            .unwrap();
        let active = vec!["w".to_string()];

        set_grad(&mut ps, "w", &[3.0, 4.0]);
        let norm = clip_global_norm(&mut ps, &active, 1.0).unwrap();
        assert!((norm - 5.0).abs() < 1e-12);
        let g = ps.by_name("w").unwrap().grad.data();
        assert!((g[0] - 0.6).abs() < 1e-12);
        assert!((g[1] - 0.8).abs() < 1e-12);

        set_grad(&mut ps, "w", &[0.3, 0.4]);
        let before = ps.by_name("w").unwrap().grad.clone();
        let norm = clip_global_norm(&mut ps, &active, 1.0).unwrap();
        assert!((norm - 0.5).abs() < 1e-12);
        assert!(ps.by_name("w").unwrap().grad.bits_eq(&before));
    }

    #[test]
    fn schedule_warms_up_then_decays_to_zero() {
        let s = LrSchedule::new(2e-5, 5, 20).unwrap();
        assert_eq!(s.lr_at(0), 0.0);
        assert!((s.lr_at(1) - 2e-5 / 5.0).abs() < 1e-20);
        assert!((s.lr_at(5) - 2e-5).abs() < 1e-20);
        // decay is linear between warmup and total
        assert!((s.lr_at(10) - 2e-5 * 10.0 / 15.0).abs() < 1e-20);
        assert_eq!(s.lr_at(20), 0.0);
        assert_eq!(s.lr_at(25), 0.0);
        assert!(LrSchedule::new(2e-5, 21, 20).is_err());
        assert!(LrSchedule::new(0.0, 1, 20).is_err());
    }
}
