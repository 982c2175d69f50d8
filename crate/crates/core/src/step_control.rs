//! Per-subband step sizes `μ_i(k)`.
//!
//! The shrinkage controller estimates the noise-free a priori subband error
//! by soft-thresholding the observed subband error at `t_i = sqrt(λ σ²_η/N)`,
//! tracks its power with forgetting factor `θ = 1 − N/(κM)`, and sets
//! `μ_i = σ²_ε / (σ²_ε + σ²_η/N)`. The controller never looks at the
//! proportionate gains, so it drives any gain rule.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StepError {
    #[error("fixed step size must lie in (0, 2), got {0}")]
    FixedOutOfRange(f64),
    #[error("lambda must be positive and finite, got {0}")]
    InvalidLambda(f64),
    #[error("kappa must lie in [1, 6], got {0}")]
    InvalidKappa(f64),
    #[error("gamma must be positive and finite, got {0}")]
    InvalidGamma(f64),
    #[error("noise variance must be positive and finite, got {0}")]
    InvalidNoiseVariance(f64),
    #[error("forgetting factor 1 - N/(kappa M) = {0} is outside (0, 1)")]
    InvalidForgetting(f64),
    #[error("number of subbands and filter length must be positive")]
    InvalidDimensions,
    #[error("expected {expected} subband errors, got {got}")]
    SubbandMismatch { expected: usize, got: usize },
}

/// Soft threshold `sgn(e)·max(|e| − t, 0)`.
#[inline]
pub fn shrink_error(e: f64, threshold: f64) -> f64 {
    let magnitude = (e.abs() - threshold).max(0.0);
    if magnitude == 0.0 {
        0.0
    } else {
        magnitude.copysign(e)
    }
}

/// `θ σ²_prev + (1 − θ) ε²`.
#[inline]
pub fn update_power(previous: f64, theta: f64, shrunk: f64) -> f64 {
    theta * previous + (1.0 - theta) * shrunk * shrunk
}

/// `σ²_ε / (σ²_ε + σ²_{η,D})`; zero at a zero error power.
#[inline]
pub fn vss_step(error_power: f64, subband_noise_variance: f64) -> f64 {
    if error_power == 0.0 {
        return 0.0;
    }
    error_power / (error_power + subband_noise_variance)
}

/// Set-membership step: `1 − 𝒢/|e|` outside the bound, zero inside.
#[inline]
pub fn sm_step(e: f64, bound: f64) -> f64 {
    if e.abs() > bound {
        1.0 - bound / e.abs()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetMembership {
    gamma: f64,
    noise_variance: f64,
    num_subbands: usize,
    bound: f64,
}

impl SetMembership {
    /// `𝒢 = sqrt(γ σ²_η / N)`.
    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShrinkageVss {
    lambda: f64,
    kappa: f64,
    noise_variance: f64,
    num_subbands: usize,
    filter_length: usize,
    theta: f64,
    subband_noise_variance: f64,
    threshold: f64,
    power: Vec<f64>,
}

impl ShrinkageVss {
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Forgetting factor `θ = 1 − N/(κM)`.
    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// Per-subband noise variance `σ²_η / N`.
    pub fn subband_noise_variance(&self) -> f64 {
        self.subband_noise_variance
    }

    /// Shrinkage threshold `t_i = sqrt(λ σ²_η / N)`.
    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Current error-power estimates `σ²_{ε_{i,a}}(k)`.
    pub fn power(&self) -> &[f64] {
        &self.power
    }

    pub fn filter_length(&self) -> usize {
        self.filter_length
    }
}

/// Strategy producing `μ_i(k)` each decimated iteration.
#[derive(Debug, Clone, PartialEq)]
pub enum StepController {
    Fixed { mu: f64 },
    SetMembership(SetMembership),
    ShrinkageVss(ShrinkageVss),
}

fn check_noise(noise_variance: f64) -> Result<(), StepError> {
    if noise_variance > 0.0 && noise_variance.is_finite() {
        Ok(())
    } else {
        Err(StepError::InvalidNoiseVariance(noise_variance))
    }
}

impl StepController {
    pub fn fixed(mu: f64) -> Result<Self, StepError> {
        if mu > 0.0 && mu < 2.0 {
            Ok(StepController::Fixed { mu })
        } else {
            Err(StepError::FixedOutOfRange(mu))
        }
    }

    pub fn set_membership(gamma: f64, noise_variance: f64, num_subbands: usize) -> Result<Self, StepError> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(StepError::InvalidGamma(gamma));
        }
        check_noise(noise_variance)?;
        if num_subbands == 0 {
            return Err(StepError::InvalidDimensions);
        }
        Ok(StepController::SetMembership(SetMembership {
            gamma,
            noise_variance,
            num_subbands,
            bound: (gamma * noise_variance / num_subbands as f64).sqrt(),
        }))
    }

    pub fn shrinkage_vss(
        lambda: f64,
        kappa: f64,
        noise_variance: f64,
        num_subbands: usize,
        filter_length: usize,
    ) -> Result<Self, StepError> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(StepError::InvalidLambda(lambda));
        }
        if !(1.0..=6.0).contains(&kappa) {
            return Err(StepError::InvalidKappa(kappa));
        }
        check_noise(noise_variance)?;
        if num_subbands == 0 || filter_length == 0 {
            return Err(StepError::InvalidDimensions);
        }
        let theta = 1.0 - num_subbands as f64 / (kappa * filter_length as f64);
        if !(theta > 0.0 && theta < 1.0) {
            return Err(StepError::InvalidForgetting(theta));
        }
        let subband_noise_variance = noise_variance / num_subbands as f64;
        Ok(StepController::ShrinkageVss(ShrinkageVss {
            lambda,
            kappa,
            noise_variance,
            num_subbands,
            filter_length,
            theta,
            subband_noise_variance,
            threshold: (lambda * subband_noise_variance).sqrt(),
            power: vec![0.0; num_subbands],
        }))
    }

    /// Writes `μ_i(k)` for the given subband errors into `steps`, advancing
    /// the controller state exactly once.
    pub fn controller_steps(&mut self, errors: &[f64], steps: &mut [f64]) -> Result<(), StepError> {
        if errors.len() != steps.len() {
            return Err(StepError::SubbandMismatch {
                expected: steps.len(),
                got: errors.len(),
            });
        }
        match self {
            StepController::Fixed { mu } => steps.iter_mut().for_each(|s| *s = *mu),
            StepController::SetMembership(sm) => {
                if errors.len() != sm.num_subbands {
                    return Err(StepError::SubbandMismatch {
                        expected: sm.num_subbands,
                        got: errors.len(),
                    });
                }
                for (s, &e) in steps.iter_mut().zip(errors) {
                    *s = sm_step(e, sm.bound);
                }
            }
            StepController::ShrinkageVss(vss) => {
                if errors.len() != vss.num_subbands {
                    return Err(StepError::SubbandMismatch {
                        expected: vss.num_subbands,
                        got: errors.len(),
                    });
                }
                for ((s, &e), p) in steps.iter_mut().zip(errors).zip(&mut vss.power) {
                    let eps = shrink_error(e, vss.threshold);
                    *p = update_power(*p, vss.theta, eps);
                    *s = vss_step(*p, vss.subband_noise_variance);
                }
            }
        }
        Ok(())
    }

    pub fn steps(&mut self, errors: &[f64]) -> Result<Vec<f64>, StepError> {
        let mut out = vec![0.0; errors.len()];
        self.controller_steps(errors, &mut out)?;
        Ok(out)
    }

    /// Clears the error-power estimates (Table-1 style cold start).
    pub fn reset(&mut self) {
        if let StepController::ShrinkageVss(vss) = self {
            vss.power.iter_mut().for_each(|p| *p = 0.0);
        }
    }

    /// Subband count the controller was built for; `None` for fixed steps.
    pub fn num_subbands(&self) -> Option<usize> {
        match self {
            StepController::Fixed { .. } => None,
            StepController::SetMembership(sm) => Some(sm.num_subbands),
            StepController::ShrinkageVss(vss) => Some(vss.num_subbands),
        }
    }

    pub fn noise_variance(&self) -> Option<f64> {
        match self {
            StepController::Fixed { .. } => None,
            StepController::SetMembership(sm) => Some(sm.noise_variance),
            StepController::ShrinkageVss(vss) => Some(vss.noise_variance),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn shrink_hand_values() {
        assert_eq!(shrink_error(0.1, 0.2), 0.0);
        assert!((shrink_error(-0.5, 0.2) - (-0.3)).abs() <= 1e-15);
        for e in [-3.0, -1e-9, 0.0, 2.5] {
            assert_eq!(shrink_error(e, 0.0), e);
        }
    }

    #[test]
    fn power_recursion() {
        let mut p = 0.0;
        for _ in 0..100 {
            p = update_power(p, 0.9, 0.0);
        }
        assert_eq!(p, 0.0);
        assert!((update_power(1.0, 0.9, 0.0) - 0.9).abs() <= 1e-15);
        let mut p = 0.0;
        for _ in 0..2000 {
            p = update_power(p, 0.9, 0.7);
        }
        assert!((p - 0.49).abs() < 1e-12);
    }

    #[test]
    fn vss_and_sm_hand_values() {
        assert_eq!(vss_step(0.0, 0.01), 0.0);
        assert_eq!(vss_step(0.01, 0.01), 0.5);
        assert_eq!(vss_step(0.03, 0.01), 0.75);
        assert_eq!(sm_step(0.5, 1.0), 0.0);
        assert_eq!(sm_step(-2.0, 1.0), 0.5);
        let big = sm_step(1e12, 1.0);
        assert!(big < 1.0 && big > 1.0 - 1e-11);
    }

    #[test]
    fn chained_shrinkage_example() {
        // N = 1, M = 10, κ = 1 gives θ = 0.9; σ²_η = 0.0025, λ = 3.
        let mut ctrl = StepController::shrinkage_vss(3.0, 1.0, 0.0025, 1, 10).unwrap();
        let StepController::ShrinkageVss(v) = &ctrl else {
            unreachable!()
        };
        assert!((v.theta() - 0.9).abs() < 1e-15);
        let t = v.threshold();
        assert!((t - 0.0866).abs() < 1e-4);
        let mu = ctrl.steps(&[0.5 + t]).unwrap()[0];
        let StepController::ShrinkageVss(v) = &ctrl else {
            unreachable!()
        };
        assert!((v.power()[0] - 0.025).abs() < 1e-15);
        assert!((mu - 0.025 / 0.0275).abs() < 1e-15);
    }

    #[test]
    fn cold_start_below_threshold_gives_zero() {
        let mut ctrl = StepController::shrinkage_vss(3.5, 1.0, 0.01, 4, 64).unwrap();
        let t = (3.5f64 * 0.01 / 4.0).sqrt();
        let steps = ctrl.steps(&[t, -t, 0.5 * t, 0.0]).unwrap();
        assert_eq!(steps, vec![0.0; 4]);
    }

    #[test]
    fn fixed_and_construction_errors() {
        let mut f = StepController::fixed(1.0).unwrap();
        assert_eq!(f.steps(&[3.0, -1.0, 0.0]).unwrap(), vec![1.0; 3]);
        assert_eq!(StepController::fixed(2.0), Err(StepError::FixedOutOfRange(2.0)));
        assert_eq!(StepController::fixed(0.0), Err(StepError::FixedOutOfRange(0.0)));
        assert!(matches!(
            StepController::shrinkage_vss(0.0, 1.0, 1.0, 4, 64),
            Err(StepError::InvalidLambda(_))
        ));
        assert!(matches!(
            StepController::shrinkage_vss(3.0, 7.0, 1.0, 4, 64),
            Err(StepError::InvalidKappa(_))
        ));
        assert!(matches!(
            StepController::shrinkage_vss(3.0, 1.0, 0.0, 4, 64),
            Err(StepError::InvalidNoiseVariance(_))
        ));
        assert!(matches!(
            StepController::shrinkage_vss(3.0, 1.0, 1.0, 4, 4),
            Err(StepError::InvalidForgetting(_))
        ));
        let mut sm = StepController::set_membership(9.0, 0.04, 4).unwrap();
        assert!(matches!(sm.steps(&[1.0; 3]), Err(StepError::SubbandMismatch { .. })));
        let StepController::SetMembership(s) = &sm else {
            unreachable!()
        };
        assert!((s.bound() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn reset_clears_power() {
        let mut ctrl = StepController::shrinkage_vss(3.0, 1.0, 0.01, 2, 16).unwrap();
        ctrl.steps(&[1.0, -2.0]).unwrap();
        ctrl.reset();
        let StepController::ShrinkageVss(v) = &ctrl else {
            unreachable!()
        };
        assert_eq!(v.power(), &[0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn shrinkage_is_a_contraction(e in -1e3f64..1e3, t in 0.0f64..10.0) {
            let s = shrink_error(e, t);
            prop_assert!(s.abs() <= e.abs());
            prop_assert!((s.abs() - (e.abs() - t).max(0.0)).abs() <= 1e-12 * e.abs().max(1.0));
            prop_assert!(s == 0.0 || s.signum() == e.signum());
        }

        #[test]
        fn vss_monotone(a in 1e-9f64..10.0, b in 1e-9f64..10.0, noise in 1e-6f64..1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assume!(hi > lo * (1.0 + 1e-9));
            prop_assert!(vss_step(lo, noise) < vss_step(hi, noise));
            prop_assert!(vss_step(a, noise) > vss_step(a, noise * 2.0));
        }

        #[test]
        fn emitted_steps_in_unit_interval(
            errors in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 4), 1..50),
            noise in 1e-6f64..1.0,
        ) {
            let mut vss = StepController::shrinkage_vss(3.5, 1.0, noise, 4, 32).unwrap();
            let mut sm = StepController::set_membership(9.0, noise, 4).unwrap();
            for e in &errors {
                for s in vss.steps(e).unwrap().into_iter().chain(sm.steps(e).unwrap()) {
                    prop_assert!((0.0..1.0).contains(&s));
                }
            }
        }
    }
}
