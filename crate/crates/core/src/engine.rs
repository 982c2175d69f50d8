//! The subband adaptive filter: per-subband a priori errors and the
//! proportionate, regularized weight update
//!
//! `w(k+1) = w(k) + Σ_i μ_i(k) G(k) u_i(k) e_{i,D}(k) / (u_iᵀ(k) G(k) u_i(k) + δ)`.
//!
//! Each decimated iteration runs analysis → errors → gains from `w(k)` →
//! step sizes → update, in that order.

use thiserror::Error;

use crate::filterbank::{dot, AnalysisBank, FilterBankError, SubbandAnalyzer, SubbandFrame};
use crate::proportionate::{GainError, GainRule, GainVector};
use crate::step_control::{StepController, StepError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("filter length must be positive")]
    EmptyFilter,
    #[error("number of subbands must be at least 1")]
    NoSubbands,
    #[error("regularization must be positive and finite, got {0}")]
    InvalidRegularization(f64),
    #[error("analysis bank has {bank} subbands but the configuration asks for {config}")]
    BankMismatch { bank: usize, config: usize },
    #[error("step controller was built for {controller} subbands, configuration has {config}")]
    ControllerMismatch { controller: usize, config: usize },
    #[error("dimension mismatch: {what} has length {got}, expected {expected}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("weight update produced a non-finite value")]
    NonFinite,
    #[error("adaptive filter diverged at iteration {iteration}")]
    Diverged { iteration: u64 },
    #[error(transparent)]
    Gain(#[from] GainError),
    #[error(transparent)]
    Step(#[from] StepError),
    #[error(transparent)]
    FilterBank(#[from] FilterBankError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SafConfig {
    /// `M`.
    pub filter_length: usize,
    /// `N`; also the decimation factor.
    pub num_subbands: usize,
    /// `δ`.
    pub regularization: f64,
    pub gain_rule: GainRule,
    pub step_controller: StepController,
}

impl SafConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.filter_length == 0 {
            return Err(EngineError::EmptyFilter);
        }
        if self.num_subbands == 0 {
            return Err(EngineError::NoSubbands);
        }
        if !(self.regularization > 0.0 && self.regularization.is_finite()) {
            return Err(EngineError::InvalidRegularization(self.regularization));
        }
        self.gain_rule.validate()?;
        if let Some(n) = self.step_controller.num_subbands() {
            if n != self.num_subbands {
                return Err(EngineError::ControllerMismatch {
                    controller: n,
                    config: self.num_subbands,
                });
            }
        }
        Ok(())
    }
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), EngineError> {
    if expected == got {
        Ok(())
    } else {
        Err(EngineError::Dimension { what, expected, got })
    }
}

/// `e_{i,D}(k) = d_{i,D}(k) − u_iᵀ(k) w(k)`, written into `errors`; the
/// subband outputs `y_{i,D}(k)` go into `outputs`.
pub fn subband_errors_into(
    weights: &[f64],
    frame: &SubbandFrame<'_>,
    errors: &mut [f64],
    outputs: &mut [f64],
) -> Result<(), EngineError> {
    let n = frame.num_subbands();
    check_len("errors", n, errors.len())?;
    check_len("outputs", n, outputs.len())?;
    if n > 0 {
        check_len("regressor", weights.len(), frame.filter_length())?;
    }
    for i in 0..n {
        let y = dot(frame.regressor(i), weights);
        outputs[i] = y;
        errors[i] = frame.desired()[i] - y;
    }
    Ok(())
}

pub fn subband_errors(weights: &[f64], frame: &SubbandFrame<'_>) -> Result<Vec<f64>, EngineError> {
    let n = frame.num_subbands();
    let mut errors = vec![0.0; n];
    let mut outputs = vec![0.0; n];
    subband_errors_into(weights, frame, &mut errors, &mut outputs)?;
    Ok(errors)
}

/// Summation tree with the same shape for every tap, so the result does not
/// depend on how subbands happen to be ordered in memory beyond their index.
fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let (a, b) = values.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

/// Applies one regularized proportionate update in place.
///
/// Subbands with `μ_i = 0`, `e_i = 0` or a zero denominator contribute
/// nothing. The `N` corrections are combined per tap before touching `w`.
/// Returns [`EngineError::NonFinite`] if any resulting weight is not finite;
/// `weights` is left holding the non-finite values in that case.
pub fn update_weights(
    weights: &mut [f64],
    frame: &SubbandFrame<'_>,
    errors: &[f64],
    gains: &GainVector,
    steps: &[f64],
    regularization: f64,
) -> Result<(), EngineError> {
    let n = frame.num_subbands();
    let m = weights.len();
    check_len("errors", n, errors.len())?;
    check_len("steps", n, steps.len())?;
    check_len("gains", m, gains.len())?;
    if n > 0 {
        check_len("regressor", m, frame.filter_length())?;
    }
    let g = gains.as_slice();

    let mut active: Vec<(usize, f64)> = Vec::with_capacity(n);
    for i in 0..n {
        if steps[i] == 0.0 || errors[i] == 0.0 {
            continue;
        }
        let u = frame.regressor(i);
        let energy: f64 = u.iter().zip(g).map(|(x, gm)| gm * x * x).sum();
        let denom = energy + regularization;
        if denom == 0.0 {
            continue;
        }
        active.push((i, steps[i] * errors[i] / denom));
    }
    if active.is_empty() {
        return Ok(());
    }

    let mut terms = vec![0.0; active.len()];
    let mut finite = true;
    for (tap, (w, &gm)) in weights.iter_mut().zip(g).enumerate() {
        for (t, &(i, c)) in terms.iter_mut().zip(&active) {
            *t = c * frame.regressor(i)[tap];
        }
        *w += gm * pairwise_sum(&terms);
        finite &= w.is_finite();
    }
    if finite {
        Ok(())
    } else {
        Err(EngineError::NonFinite)
    }
}

/// Per-iteration telemetry borrowed from the engine.
#[derive(Debug, Clone, Copy)]
pub struct BlockTelemetry<'a> {
    /// Index `k` of the iteration that produced this record.
    pub iteration: u64,
    pub errors: &'a [f64],
    pub steps: &'a [f64],
    /// `w(k+1)`.
    pub weights: &'a [f64],
}

/// Everything that went into one update, for analysis hooks.
#[derive(Debug, Clone, Copy)]
pub struct StepObservation<'a> {
    pub iteration: u64,
    pub frame: SubbandFrame<'a>,
    pub weights_before: &'a [f64],
    pub weights_after: &'a [f64],
    pub gains: &'a GainVector,
    pub errors: &'a [f64],
    pub steps: &'a [f64],
    pub regularization: f64,
}

#[derive(Debug, Clone)]
pub struct SafEngine {
    config: SafConfig,
    analyzer: SubbandAnalyzer,
    weights: Vec<f64>,
    previous: Vec<f64>,
    gains: GainVector,
    errors: Vec<f64>,
    outputs: Vec<f64>,
    steps: Vec<f64>,
    iteration: u64,
    diverged: bool,
}

impl SafEngine {
    pub fn new(config: SafConfig, bank: AnalysisBank) -> Result<Self, EngineError> {
        config.validate()?;
        if bank.num_subbands() != config.num_subbands {
            return Err(EngineError::BankMismatch {
                bank: bank.num_subbands(),
                config: config.num_subbands,
            });
        }
        let (m, n) = (config.filter_length, config.num_subbands);
        Ok(SafEngine {
            analyzer: SubbandAnalyzer::new(bank, m)?,
            weights: vec![0.0; m],
            previous: vec![0.0; m],
            gains: GainVector(vec![0.0; m]),
            errors: vec![0.0; n],
            outputs: vec![0.0; n],
            steps: vec![0.0; n],
            iteration: 0,
            diverged: false,
            config,
        })
    }

    pub fn config(&self) -> &SafConfig {
        &self.config
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Number of completed iterations `k`.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn errors(&self) -> &[f64] {
        &self.errors
    }

    /// Subband outputs `y_{i,D}(k)` of the last iteration.
    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }

    pub fn steps(&self) -> &[f64] {
        &self.steps
    }

    pub fn controller(&self) -> &StepController {
        &self.config.step_controller
    }

    pub fn has_diverged(&self) -> bool {
        self.diverged
    }

    /// One decimated iteration on `N` fresh fullband input and desired samples.
    pub fn process_block(
        &mut self,
        input_block: &[f64],
        desired_block: &[f64],
    ) -> Result<BlockTelemetry<'_>, EngineError> {
        self.advance(input_block, desired_block, false)?;
        Ok(self.telemetry())
    }

    /// Like [`SafEngine::process_block`] but also hands the full update
    /// context to `observe` before returning.
    pub fn process_block_observed<R>(
        &mut self,
        input_block: &[f64],
        desired_block: &[f64],
        observe: impl FnOnce(&StepObservation<'_>) -> R,
    ) -> Result<R, EngineError> {
        self.advance(input_block, desired_block, true)?;
        let views = self.analyzer.regressor_views();
        let obs = StepObservation {
            iteration: self.iteration - 1,
            frame: SubbandFrame::new(&views, self.analyzer.desired()),
            weights_before: &self.previous,
            weights_after: &self.weights,
            gains: &self.gains,
            errors: &self.errors,
            steps: &self.steps,
            regularization: self.config.regularization,
        };
        Ok(observe(&obs))
    }

    fn telemetry(&self) -> BlockTelemetry<'_> {
        BlockTelemetry {
            iteration: self.iteration - 1,
            errors: &self.errors,
            steps: &self.steps,
            weights: &self.weights,
        }
    }

    fn advance(&mut self, input_block: &[f64], desired_block: &[f64], keep_previous: bool) -> Result<(), EngineError> {
        if self.diverged {
            return Err(EngineError::Diverged {
                iteration: self.iteration,
            });
        }
        self.analyzer.push_block(input_block, desired_block)?;
        let views = self.analyzer.regressor_views();
        let frame = SubbandFrame::new(&views, self.analyzer.desired());
        subband_errors_into(&self.weights, &frame, &mut self.errors, &mut self.outputs)?;
        self.config.gain_rule.compute_into(&self.weights, &mut self.gains);
        self.config
            .step_controller
            .controller_steps(&self.errors, &mut self.steps)?;
        if keep_previous {
            self.previous.copy_from_slice(&self.weights);
        }
        let result = update_weights(
            &mut self.weights,
            &frame,
            &self.errors,
            &self.gains,
            &self.steps,
            self.config.regularization,
        );
        let iteration = self.iteration;
        self.iteration += 1;
        match result {
            Err(EngineError::NonFinite) => {
                self.diverged = true;
                log::warn!("weights became non-finite at iteration {iteration}");
                Err(EngineError::Diverged { iteration })
            }
            other => other,
        }
    }

    /// Back to `w(0) = 0`, `k = 0`, cleared analysis memories and controller state.
    pub fn reset(&mut self) {
        self.analyzer.reset();
        self.config.step_controller.reset();
        for buf in [
            &mut self.weights,
            &mut self.previous,
            &mut self.errors,
            &mut self.outputs,
            &mut self.steps,
        ] {
            buf.iter_mut().for_each(|x| *x = 0.0);
        }
        self.gains.0.iter_mut().for_each(|g| *g = 0.0);
        self.iteration = 0;
        self.diverged = false;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filterbank::{design_bank, AnalysisBank};
    use crate::signals::{gen_ar1, gen_white};

    fn nlms_config(m: usize, mu: f64) -> SafConfig {
        SafConfig {
            filter_length: m,
            num_subbands: 1,
            regularization: 1e-3,
            gain_rule: GainRule::Identity,
            step_controller: StepController::fixed(mu).unwrap(),
        }
    }

    #[test]
    fn hand_error() {
        let u0 = [2.0, 3.0];
        let regs = [&u0[..]];
        let frame = SubbandFrame::new(&regs, &[5.0]);
        assert_eq!(subband_errors(&[1.0, -1.0], &frame).unwrap(), vec![6.0]);
        assert_eq!(subband_errors(&[0.0, 0.0], &frame).unwrap(), vec![5.0]);
    }

    #[test]
    fn hand_nlms_step() {
        let u = [1.0, 1.0];
        let regs = [&u[..]];
        let frame = SubbandFrame::new(&regs, &[2.0]);
        let mut w = vec![0.0; 2];
        let e = subband_errors(&w, &frame).unwrap();
        update_weights(&mut w, &frame, &e, &GainVector(vec![1.0; 2]), &[1.0], 0.0).unwrap();
        assert_eq!(w, vec![1.0, 1.0]);
    }

    #[test]
    fn zero_error_or_step_is_a_fixed_point() {
        let u = [[0.3, -1.0, 2.0], [1.5, 0.2, -0.7]];
        let regs = [&u[0][..], &u[1][..]];
        let frame = SubbandFrame::new(&regs, &[1.0, 2.0]);
        let w0 = vec![0.1, 0.2, 0.3];
        let g = GainVector(vec![0.2, 0.5, 0.3]);
        let mut w = w0.clone();
        update_weights(&mut w, &frame, &[0.0, 0.0], &g, &[0.5, 0.5], 1e-3).unwrap();
        assert_eq!(w, w0);
        update_weights(&mut w, &frame, &[1.0, -3.0], &g, &[0.0, 0.0], 1e-3).unwrap();
        assert_eq!(w, w0);
    }

    #[test]
    fn dimension_errors() {
        let u = [1.0, 2.0];
        let regs = [&u[..]];
        let frame = SubbandFrame::new(&regs, &[1.0]);
        assert!(matches!(
            subband_errors(&[1.0; 3], &frame),
            Err(EngineError::Dimension { what: "regressor", .. })
        ));
        let mut w = vec![0.0; 2];
        assert!(matches!(
            update_weights(&mut w, &frame, &[1.0], &GainVector(vec![1.0; 3]), &[1.0], 0.0),
            Err(EngineError::Dimension { what: "gains", .. })
        ));
    }

    #[test]
    fn matches_independent_nlms() {
        let m = 16;
        let mu = 0.8;
        let delta = 1e-3;
        let input = gen_ar1(0.9, 4000, 3).unwrap();
        let noise = gen_white(1e-4, 4000, 4).unwrap();
        let path: Vec<f64> = (0..m)
            .map(|i| (0.7f64).powi(i as i32) * if i % 3 == 0 { 1.0 } else { -0.5 })
            .collect();
        let desired: Vec<f64> = (0..input.len())
            .map(|n| (0..m).filter(|&j| j <= n).map(|j| path[j] * input[n - j]).sum::<f64>() + noise[n])
            .collect();

        let mut engine = SafEngine::new(nlms_config(m, mu), AnalysisBank::identity()).unwrap();
        let mut w_ref = vec![0.0; m];
        let mut u = vec![0.0; m];
        for n in 0..input.len() {
            u.rotate_right(1);
            u[0] = input[n];
            let e = desired[n] - u.iter().zip(&w_ref).map(|(a, b)| a * b).sum::<f64>();
            let norm = u.iter().map(|x| x * x).sum::<f64>() + delta;
            for (w, x) in w_ref.iter_mut().zip(&u) {
                *w += mu * e * x / norm;
            }
            let t = engine.process_block(&input[n..=n], &desired[n..=n]).unwrap();
            let dev = t
                .weights
                .iter()
                .zip(&w_ref)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(dev <= 1e-12, "sample {n}: {dev}");
        }
    }

    #[test]
    fn cold_start_zero_blocks() {
        let bank = design_bank(4, 32, 60.0).unwrap();
        let controller = StepController::shrinkage_vss(3.5, 1.0, 1e-3, 4, 64).unwrap();
        let mut engine = SafEngine::new(
            SafConfig {
                filter_length: 64,
                num_subbands: 4,
                regularization: 1e-3,
                gain_rule: GainRule::default(),
                step_controller: controller,
            },
            bank,
        )
        .unwrap();
        for _ in 0..10 {
            let t = engine.process_block(&[0.0; 4], &[0.0; 4]).unwrap();
            assert!(t.weights.iter().all(|&w| w == 0.0));
            assert!(t.steps.iter().all(|&s| s == 0.0));
        }
        assert_eq!(engine.iteration(), 10);
    }

    #[test]
    fn reset_replays_identically() {
        let bank = design_bank(2, 16, 60.0).unwrap();
        let config = SafConfig {
            filter_length: 32,
            num_subbands: 2,
            regularization: 1e-3,
            gain_rule: GainRule::default(),
            step_controller: StepController::shrinkage_vss(3.5, 1.0, 1e-3, 2, 32).unwrap(),
        };
        let input = gen_ar1(0.95, 2000, 11).unwrap();
        let desired: Vec<f64> = input
            .iter()
            .enumerate()
            .map(|(n, x)| 0.5 * x - if n > 0 { 0.2 * input[n - 1] } else { 0.0 })
            .collect();
        let run = |engine: &mut SafEngine| -> Vec<Vec<f64>> {
            input
                .chunks(2)
                .zip(desired.chunks(2))
                .map(|(u, d)| engine.process_block(u, d).unwrap().weights.to_vec())
                .collect()
        };
        let mut a = SafEngine::new(config.clone(), bank.clone()).unwrap();
        let mut b = SafEngine::new(config, bank).unwrap();
        let first = run(&mut a);
        b.process_block(&input[..2], &desired[..2]).unwrap();
        b.reset();
        b.reset();
        assert_eq!(run(&mut b), first);
        a.reset();
        let t = a.process_block(&[0.0; 2], &[0.0; 2]).unwrap();
        assert!(t.weights.iter().chain(t.errors).chain(t.steps).all(|&x| x == 0.0));
    }

    #[test]
    fn config_validation() {
        let bank = design_bank(4, 32, 60.0).unwrap();
        let mut cfg = nlms_config(8, 1.0);
        assert!(matches!(
            SafEngine::new(cfg.clone(), bank.clone()),
            Err(EngineError::BankMismatch { bank: 4, config: 1 })
        ));
        cfg.regularization = 0.0;
        assert!(matches!(
            SafEngine::new(cfg.clone(), AnalysisBank::identity()),
            Err(EngineError::InvalidRegularization(_))
        ));
        cfg.regularization = 1e-3;
        cfg.num_subbands = 4;
        cfg.step_controller = StepController::set_membership(9.0, 1e-3, 2).unwrap();
        assert!(matches!(
            SafEngine::new(cfg, bank),
            Err(EngineError::ControllerMismatch {
                controller: 2,
                config: 4
            })
        ));
    }

    #[test]
    fn divergence_is_reported() {
        let mut engine = SafEngine::new(nlms_config(2, 1.0), AnalysisBank::identity()).unwrap();
        let err = engine.process_block(&[1.0], &[f64::NAN]).unwrap_err();
        assert!(matches!(err, EngineError::Diverged { iteration: 0 }), "{err}");
        assert!(engine.has_diverged());
        assert!(matches!(
            engine.process_block(&[0.0], &[0.0]),
            Err(EngineError::Diverged { iteration: 1 })
        ));
    }
}
