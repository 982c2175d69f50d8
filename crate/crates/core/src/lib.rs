//! Proportionate normalized subband adaptive filters (PNSAF family) with a
//! pluggable per-subband step-size controller.
//!
//! The crate is organised bottom-up:
//!
//! * [`filterbank`] designs a cosine-modulated analysis bank and runs the
//!   critically decimated analysis that feeds the adaptive filter.
//! * [`signals`] generates colored inputs, sparse echo paths and noisy
//!   desired signals, and reads PCM WAV files.
//! * [`proportionate`] computes the diagonal proportionate gain matrix.
//! * [`step_control`] produces per-subband step sizes: fixed, set-membership,
//!   or the shrinkage-based variable step size.
//! * [`engine`] is the subband adaptive filter itself.
//! * [`diagnostics`] holds NMSD/ERLE metrics and the energy-relation checks.
//! * [`harness`] assembles declarative experiments, ensembles and sweeps.
//!
//! ```
//! use pnsaf::engine::{SafConfig, SafEngine};
//! use pnsaf::filterbank::{design_prototype, modulate_bank};
//! use pnsaf::proportionate::GainRule;
//! use pnsaf::step_control::StepController;
//!
//! let bank = modulate_bank(&design_prototype(4, 32, 60.0).unwrap());
//! let config = SafConfig {
//!     filter_length: 64,
//!     num_subbands: 4,
//!     regularization: 1e-3,
//!     gain_rule: GainRule::ipnlms(0.0, 1e-3).unwrap(),
//!     step_controller: StepController::shrinkage_vss(3.5, 1.0, 1e-3, 4, 64).unwrap(),
//! };
//! let mut engine = SafEngine::new(config, bank).unwrap();
//! let telemetry = engine.process_block(&[0.1, -0.2, 0.3, 0.0], &[0.0; 4]).unwrap();
//! assert_eq!(telemetry.steps.len(), 4);
//! ```

pub mod delay;
pub mod diagnostics;
pub mod engine;
pub mod filterbank;
pub mod harness;
pub mod proportionate;
pub mod signals;
pub mod step_control;

mod spectrum;
