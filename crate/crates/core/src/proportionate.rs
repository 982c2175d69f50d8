//! Diagonal proportionate matrix `G(k)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GainError {
    #[error("IPNLMS alpha must lie in [-1, 1], got {0}")]
    AlphaOutOfRange(f64),
    #[error("IPNLMS xi must be positive and finite, got {0}")]
    InvalidXi(f64),
}

/// How the proportionate gains are computed from the current weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum GainRule {
    /// `G = I`: the plain NSAF.
    Identity,
    /// `g_m = (1−α)/(2M) + (1+α)|w_m| / (2‖w‖₁ + ξ)`.
    Ipnlms {
        #[serde(default)]
        alpha: f64,
        #[serde(default = "default_xi")]
        xi: f64,
    },
}

fn default_xi() -> f64 {
    1e-3
}

impl Default for GainRule {
    fn default() -> Self {
        GainRule::Ipnlms {
            alpha: 0.0,
            xi: default_xi(),
        }
    }
}

impl GainRule {
    pub fn ipnlms(alpha: f64, xi: f64) -> Result<Self, GainError> {
        let rule = GainRule::Ipnlms { alpha, xi };
        rule.validate()?;
        Ok(rule)
    }

    pub fn validate(&self) -> Result<(), GainError> {
        if let GainRule::Ipnlms { alpha, xi } = *self {
            if !(-1.0..=1.0).contains(&alpha) {
                return Err(GainError::AlphaOutOfRange(alpha));
            }
            if !(xi > 0.0 && xi.is_finite()) {
                return Err(GainError::InvalidXi(xi));
            }
        }
        Ok(())
    }

    pub fn compute_gains(&self, weights: &[f64]) -> GainVector {
        let mut g = GainVector(vec![0.0; weights.len()]);
        self.compute_into(weights, &mut g);
        g
    }

    /// In-place variant of [`GainRule::compute_gains`]; resizes `out` to `weights.len()`.
    pub fn compute_into(&self, weights: &[f64], out: &mut GainVector) {
        let m = weights.len();
        out.0.resize(m, 0.0);
        match *self {
            GainRule::Identity => out.0.iter_mut().for_each(|g| *g = 1.0),
            GainRule::Ipnlms { alpha, xi } => {
                let l1: f64 = weights.iter().map(|w| w.abs()).sum();
                let floor = (1.0 - alpha) / (2.0 * m as f64);
                let scale = (1.0 + alpha) / (2.0 * l1 + xi);
                for (g, w) in out.0.iter_mut().zip(weights) {
                    *g = floor + scale * w.abs();
                }
            }
        }
    }
}

/// Diagonal of `G(k)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GainVector(pub Vec<f64>);

impl GainVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scaled(&self, c: f64) -> GainVector {
        GainVector(self.0.iter().map(|g| g * c).collect())
    }
}

pub fn gain_sum(g: &GainVector) -> f64 {
    g.0.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_gains_are_one() {
        let g = GainRule::Identity.compute_gains(&[0.3, -2.0, 0.0]);
        assert_eq!(g.as_slice(), &[1.0, 1.0, 1.0]);
        assert_eq!(gain_sum(&GainRule::Identity.compute_gains(&vec![0.5; 512])), 512.0);
    }

    #[test]
    fn ipnlms_hand_values() {
        let rule = GainRule::Ipnlms { alpha: 0.0, xi: 1e-300 };
        let g = rule.compute_gains(&[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(g.as_slice(), &[0.625, 0.125, 0.125, 0.125]);

        let all_nlms = GainRule::ipnlms(-1.0, 1e-3)
            .unwrap()
            .compute_gains(&[3.0, -1.0, 0.0, 7.0]);
        assert!(all_nlms.as_slice().iter().all(|&g| g == 0.25));
    }

    #[test]
    fn zero_weights_sum_to_first_term() {
        for alpha in [-0.5, 0.0, 0.5] {
            let g = GainRule::ipnlms(alpha, 1e-3).unwrap().compute_gains(&[0.0; 16]);
            assert!((gain_sum(&g) - (1.0 - alpha) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert_eq!(GainRule::ipnlms(1.5, 1e-3), Err(GainError::AlphaOutOfRange(1.5)));
        assert_eq!(GainRule::ipnlms(0.0, 0.0), Err(GainError::InvalidXi(0.0)));
    }

    proptest! {
        #[test]
        fn sum_rule_and_positivity(
            w in prop::collection::vec(-5.0f64..5.0, 1..64),
            alpha in -1.0f64..0.999,
            xi in 1e-6f64..1e-1,
        ) {
            let g = GainRule::ipnlms(alpha, xi).unwrap().compute_gains(&w);
            prop_assert!(g.as_slice().iter().all(|&x| x > 0.0 && x.is_finite()));
            let l1: f64 = w.iter().map(|x| x.abs()).sum();
            if l1 > 0.0 {
                let bound = xi / (2.0 * l1 + xi);
                prop_assert!((gain_sum(&g) - 1.0).abs() <= bound + 1e-12);
            }
        }

        #[test]
        fn larger_magnitude_gets_larger_gain(
            w in prop::collection::vec(-5.0f64..5.0, 2..32),
            alpha in -0.999f64..1.0,
        ) {
            let g = GainRule::ipnlms(alpha, 1e-3).unwrap().compute_gains(&w);
            for a in 0..w.len() {
                for b in 0..w.len() {
                    if w[a].abs() > w[b].abs() {
                        prop_assert!(g.0[a] > g.0[b]);
                    }
                }
            }
        }
    }
}
