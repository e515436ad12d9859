//! Temperature-controlled task sampling for multi-task training.
//!
//! Each task's base probability is its share of the total training examples;
//! exponentiating by `alpha` and renormalizing interpolates between uniform
//! sampling (alpha = 0) and fully proportional sampling (alpha = 1).

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::Rng;

use crate::error::{Error, Result};

/// q_i = p_i^alpha / sum_j p_j^alpha with p_i = n_i / sum_j n_j.
/// alpha = 0 and alpha = 1 take exact paths so the uniform and proportional
/// endpoints hold to the last bit.
pub fn sampling_probs(sizes: &[usize], alpha: f64) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::InvalidArgument("no task sizes given".into()));
    }
    if let Some(i) = sizes.iter().position(|&n| n == 0) {
        return Err(Error::InvalidArgument(format!(
            "task {} has zero examples",
            i
        )));
    }
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "sampling exponent must be finite and non-negative, got {}",
            alpha
        )));
    }
    let k = sizes.len();
    if alpha == 0.0 {
        return Ok(vec![1.0 / k as f64; k]);
    }
    let total: f64 = sizes.iter().map(|&n| n as f64).sum();
    let props: Vec<f64> = sizes.iter().map(|&n| n as f64 / total).collect();
    if alpha == 1.0 {
        return Ok(props);
    }
    let powered: Vec<f64> = props.iter().map(|p| p.powf(alpha)).collect();
    let norm: f64 = powered.iter().sum();
    Ok(powered.into_iter().map(|p| p / norm).collect())
}

#[derive(Debug, Clone)]
pub struct TaskSampler {
    names: Vec<String>,
    probs: Vec<f64>,
    dist: WeightedIndex<f64>,
}

impl TaskSampler {
    pub fn new(sizes: &[(String, usize)], alpha: f64) -> Result<Self> {
        let counts: Vec<usize> = sizes.iter().map(|(_, n)| *n).collect();
        let probs = sampling_probs(&counts, alpha)?;
        let dist = WeightedIndex::new(&probs)
            .map_err(|e| Error::InvalidArgument(format!("bad sampling weights: {}", e)))?;
        Ok(Self {
            names: sizes.iter().map(|(n, _)| n.clone()).collect(),
            probs,
            dist,
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn draw(&self, rng: &mut impl Rng) -> usize {
        self.dist.sample(rng)
    }

    pub fn draw_name(&self, rng: &mut impl Rng) -> &str {
        &self.names[self.draw(rng)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    const REFERENCE_SIZES: [usize; 6] = [9600, 50_000, 34_300, 53_300, 15_700, 10_000];

    #[test]
    fn alpha_zero_is_exactly_uniform() {
        let q = sampling_probs(&REFERENCE_SIZES, 0.0).unwrap();
        for &p in &q {
            assert_eq!(p.to_bits(), (1.0f64 / 6.0).to_bits());
        }
    }

    #[test]
    fn alpha_one_matches_proportions() {
        let q = sampling_probs(&REFERENCE_SIZES, 1.0).unwrap();
        let expected = [
            0.055523423944476576,
            0.2891844997108155,
            0.19838056680161945,
            0.3082706766917293,
            0.09080393290919607,
            0.0578368999421631,
        ];
        for (a, b) in q.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fractional_and_quadratic_exponents() {
        // sizes 1:4 at alpha 0.5 gives exactly 1:2 odds
        let q = sampling_probs(&[1, 4], 0.5).unwrap();
        assert!((q[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((q[1] - 2.0 / 3.0).abs() < 1e-12);

        // sizes 1:2:3 at alpha 2 gives 1:4:9
        let q = sampling_probs(&[1, 2, 3], 2.0).unwrap();
        assert!((q[0] - 1.0 / 14.0).abs() < 1e-12);
        assert!((q[1] - 4.0 / 14.0).abs() < 1e-12);
        assert!((q[2] - 9.0 / 14.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(sampling_probs(&[], 1.0).is_err());
        assert!(sampling_probs(&[3, 0], 1.0).is_err());
        assert!(sampling_probs(&[3, 1], -0.5).is_err());
        assert!(sampling_probs(&[3, 1], f64::NAN).is_err());
    }

    #[test]
    fn draw_frequencies_track_probabilities() {
        let sizes: Vec<(String, usize)> = [("a", 1usize), ("b", 4)]
            .iter()
            .map(|(n, s)| (n.to_string(), *s))
            .collect();
        let sampler = TaskSampler::new(&sizes, 0.5).unwrap();
        let mut r = rng::seeded(11);
        let mut counts = [0usize; 2];
        let n = 60_000;
        for _ in 0..n {
            counts[sampler.draw(&mut r)] += 1;
        }
        assert!((counts[0] as f64 / n as f64 - 1.0 / 3.0).abs() < 0.01);
        assert!((counts[1] as f64 / n as f64 - 2.0 / 3.0).abs() < 0.01);
    }

    #[test]
    fn draws_are_reproducible() {
        let sizes: Vec<(String, usize)> = REFERENCE_SIZES
            .iter()
            .enumerate()
            .map(|(i, &s)| (format!("t{}", i + 1), s))
            .collect();
        let sampler = TaskSampler::new(&sizes, 1.0).unwrap();
        let seq1: Vec<usize> = {
            let mut r = rng::derived(5, "sampler");
            (0..32).map(|_| sampler.draw(&mut r)).collect()
        };
        let seq2: Vec<usize> = {
            let mut r = rng::derived(5, "sampler");
            (0..32).map(|_| sampler.draw(&mut r)).collect()
        };
        assert_eq!(seq1, seq2);
    }
}
