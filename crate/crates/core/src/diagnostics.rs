//! Performance metrics and one-step analysis quantities.
//!
//! Sign convention: the weight-error vector is `w̃ = w_o − w`, so the
//! a priori noise-free error is `ε_a = Uᵀ(w_o − w(k))` and, without noise,
//! `ε_a = e_D` exactly.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::filterbank::{dot, SubbandFrame};
use crate::proportionate::GainVector;

pub const NMSD_FLOOR_DB: f64 = -300.0;
pub const ERLE_CEILING_DB: f64 = 120.0;
pub const DEFAULT_ERLE_WINDOW: usize = 1024;

/// Conditioning beyond which `M(k)` is treated as singular.
const MAX_CONDITION: f64 = 1e13;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("true path has zero norm")]
    ZeroReference,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("window {window} exceeds sequence length {len}")]
    WindowTooLong { window: usize, len: usize },
    #[error("window must be at least 1")]
    EmptyWindow,
    #[error("M(k) is numerically singular (condition estimate {condition:e})")]
    Singular { condition: f64 },
    #[error("run carries no error energy; step bound undefined")]
    DegenerateRun,
}

fn same_len(a: usize, b: usize) -> Result<(), DiagnosticsError> {
    if a == b {
        Ok(())
    } else {
        Err(DiagnosticsError::LengthMismatch(a, b))
    }
}

/// `‖w_o − w‖²`.
pub fn deviation_power(w_o: &[f64], w: &[f64]) -> f64 {
    w_o.iter().zip(w).map(|(a, b)| (a - b) * (a - b)).sum()
}

pub fn to_db(ratio: f64, floor_db: f64) -> f64 {
    if ratio > 0.0 {
        (10.0 * ratio.log10()).max(floor_db)
    } else {
        floor_db
    }
}

/// `10 log10(‖w_o − w‖² / ‖w_o‖²)`, clipped below at [`NMSD_FLOOR_DB`].
pub fn nmsd_db(w_o: &[f64], w: &[f64]) -> Result<f64, DiagnosticsError> {
    nmsd_db_with_floor(w_o, w, NMSD_FLOOR_DB)
}

pub fn nmsd_db_with_floor(w_o: &[f64], w: &[f64], floor_db: f64) -> Result<f64, DiagnosticsError> {
    same_len(w_o.len(), w.len())?;
    let reference = dot(w_o, w_o);
    if reference == 0.0 {
        return Err(DiagnosticsError::ZeroReference);
    }
    Ok(to_db(deviation_power(w_o, w) / reference, floor_db))
}

/// Trailing sums of squares over `window` samples, one per `n ≥ window − 1`.
fn windowed_energy(x: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() + 1 - window);
    let mut acc = 0.0;
    for n in 0..x.len() {
        acc += x[n] * x[n];
        if n >= window {
            acc -= x[n - window] * x[n - window];
        }
        // Periodic exact recomputation keeps the running sum from drifting.
        if n >= window && (n + 1) % window == 0 {
            acc = x[n + 1 - window..=n].iter().map(|v| v * v).sum();
        }
        if n + 1 >= window {
            out.push(acc.max(0.0));
        }
    }
    out
}

/// `10 log10(E[d²]/E[e²])` with both expectations replaced by trailing
/// `window`-sample averages. Entry `j` belongs to fullband index
/// `n = window − 1 + j`. Values are clipped to `±ERLE_CEILING_DB`.
pub fn erle_db(desired: &[f64], error: &[f64], window: usize) -> Result<Vec<f64>, DiagnosticsError> {
    same_len(desired.len(), error.len())?;
    if window == 0 {
        return Err(DiagnosticsError::EmptyWindow);
    }
    if window > desired.len() {
        return Err(DiagnosticsError::WindowTooLong {
            window,
            len: desired.len(),
        });
    }
    let d = windowed_energy(desired, window);
    let e = windowed_energy(error, window);
    Ok(d.iter()
        .zip(&e)
        .map(|(&pd, &pe)| {
            if pe == 0.0 {
                if pd == 0.0 {
                    0.0
                } else {
                    ERLE_CEILING_DB
                }
            } else {
                to_db(pd / pe, -ERLE_CEILING_DB).min(ERLE_CEILING_DB)
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseFreeErrors {
    /// `ε_{i,a}(k) = u_iᵀ(k)[w_o − w(k)]`.
    pub a_priori: Vec<f64>,
    /// `ε_{i,p}(k) = u_iᵀ(k)[w_o − w(k+1)]`.
    pub a_posteriori: Vec<f64>,
}

pub fn noise_free_errors(w_o: &[f64], w_k: &[f64], w_next: &[f64], frame: &SubbandFrame<'_>) -> NoiseFreeErrors {
    let project = |w: &[f64]| -> Vec<f64> {
        frame
            .regressors()
            .iter()
            .map(|u| u.iter().zip(w_o).zip(w).map(|((x, a), b)| x * (a - b)).sum())
            .collect()
    };
    NoiseFreeErrors {
        a_priori: project(w_k),
        a_posteriori: project(w_next),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyCheckReport {
    pub lhs: f64,
    pub rhs: f64,
    /// `|lhs − rhs| / max(lhs, rhs)`; zero when both sides vanish.
    pub relative_residual: f64,
    /// 2-norm condition number of `M(k) = UᵀGU`.
    pub condition_estimate: f64,
}

impl EnergyCheckReport {
    fn new(lhs: f64, rhs: f64, condition_estimate: f64) -> Self {
        let scale = lhs.abs().max(rhs.abs());
        let relative_residual = if scale == 0.0 { 0.0 } else { (lhs - rhs).abs() / scale };
        EnergyCheckReport {
            lhs,
            rhs,
            relative_residual,
            condition_estimate,
        }
    }
}

fn regressor_matrix(frame: &SubbandFrame<'_>) -> DMatrix<f64> {
    let m = frame.filter_length();
    let n = frame.num_subbands();
    DMatrix::from_fn(m, n, |r, c| frame.regressor(c)[r])
}

/// `M(k) = Uᵀ G U`, its condition estimate, and `G U`.
fn weighted_gram(
    frame: &SubbandFrame<'_>,
    gains: &GainVector,
) -> Result<(DMatrix<f64>, DMatrix<f64>, f64), DiagnosticsError> {
    same_len(gains.len(), frame.filter_length())?;
    let u = regressor_matrix(frame);
    let g = DVector::from_column_slice(gains.as_slice());
    let gu = DMatrix::from_fn(u.nrows(), u.ncols(), |r, c| g[r] * u[(r, c)]);
    let gram = u.transpose() * &gu;
    let sv = gram.clone().singular_values();
    let (max, min) = sv
        .iter()
        .fold((0.0f64, f64::INFINITY), |(hi, lo), &s| (hi.max(s), lo.min(s)));
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(DiagnosticsError::Singular { condition });
    }
    Ok((gram, gu, condition))
}

fn check_weights(w_o: &[f64], w_k: &[f64], w_next: &[f64], frame: &SubbandFrame<'_>) -> Result<(), DiagnosticsError> {
    same_len(w_o.len(), w_k.len())?;
    same_len(w_o.len(), w_next.len())?;
    same_len(w_o.len(), frame.filter_length())
}

/// Both sides of
/// `‖w̃(k+1)‖² + ε_aᵀΓε_a = ‖w̃(k)‖² + ε_pᵀΓε_p`, `Γ = M⁻ᵀ UᵀGGU M⁻¹`,
/// evaluated for one observed update `w(k) → w(k+1)`.
///
/// The relation holds exactly when `G` is a multiple of the identity. For a
/// general diagonal `G`, the cross term of the squared update is
/// `w̃ᵀGUM⁻¹(·)`, which is not `ε_aᵀM⁻¹(·)`, and the two sides differ;
/// [`weighted_energy_relation_check`] evaluates the form that is exact for
/// every positive `G`.
pub fn energy_relation_check(
    w_o: &[f64],
    w_k: &[f64],
    w_next: &[f64],
    frame: &SubbandFrame<'_>,
    gains: &GainVector,
) -> Result<EnergyCheckReport, DiagnosticsError> {
    check_weights(w_o, w_k, w_next, frame)?;
    let (gram, gu, condition) = weighted_gram(frame, gains)?;
    let lu = gram.transpose().lu();
    // Zᵀ = M⁻ᵀ (GU)ᵀ, so Γ = ZᵀZ and xᵀΓx = ‖Z x‖².
    let zt = lu
        .solve(&gu.transpose())
        .ok_or(DiagnosticsError::Singular { condition })?;
    let z = zt.transpose();
    let errs = noise_free_errors(w_o, w_k, w_next, frame);
    let quad = |x: &[f64]| (&z * DVector::from_column_slice(x)).norm_squared();
    let lhs = deviation_power(w_o, w_next) + quad(&errs.a_priori);
    let rhs = deviation_power(w_o, w_k) + quad(&errs.a_posteriori);
    Ok(EnergyCheckReport::new(lhs, rhs, condition))
}

/// `‖w̃(k+1)‖²_{G⁻¹} + ε_aᵀM⁻¹ε_a = ‖w̃(k)‖²_{G⁻¹} + ε_pᵀM⁻¹ε_p`.
///
/// Exact for any positive diagonal `G`, any per-subband steps and any `δ`,
/// because the update always satisfies `w(k+1) − w(k) = GUM⁻¹(ε_a − ε_p)`.
pub fn weighted_energy_relation_check(
    w_o: &[f64],
    w_k: &[f64],
    w_next: &[f64],
    frame: &SubbandFrame<'_>,
    gains: &GainVector,
) -> Result<EnergyCheckReport, DiagnosticsError> {
    check_weights(w_o, w_k, w_next, frame)?;
    let (gram, _, condition) = weighted_gram(frame, gains)?;
    let lu = gram.lu();
    let errs = noise_free_errors(w_o, w_k, w_next, frame);
    let quad = |x: &[f64]| -> Result<f64, DiagnosticsError> {
        let v = DVector::from_column_slice(x);
        let y = lu.solve(&v).ok_or(DiagnosticsError::Singular { condition })?;
        Ok(v.dot(&y))
    };
    let weighted = |w: &[f64]| -> f64 {
        w_o.iter()
            .zip(w)
            .zip(gains.as_slice())
            .map(|((a, b), g)| (a - b) * (a - b) / g)
            .sum()
    };
    let lhs = weighted(w_next) + quad(&errs.a_priori)?;
    let rhs = weighted(w_k) + quad(&errs.a_posteriori)?;
    Ok(EnergyCheckReport::new(lhs, rhs, condition))
}

/// Per-iteration terms of `2 E[ε_aᵀΓe_D] / E[e_DᵀΓe_D]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepBoundSample {
    /// `ε_aᵀ(k) Γ(k) e_D(k)`.
    pub cross: f64,
    /// `e_Dᵀ(k) Γ(k) e_D(k)`.
    pub energy: f64,
}

/// Evaluates the two quadratic forms for one iteration with `Γ(k)` built
/// from the iteration's regressors and gains.
pub fn step_bound_sample(
    w_o: &[f64],
    w_k: &[f64],
    frame: &SubbandFrame<'_>,
    gains: &GainVector,
    errors: &[f64],
) -> Result<StepBoundSample, DiagnosticsError> {
    same_len(w_o.len(), w_k.len())?;
    same_len(w_o.len(), frame.filter_length())?;
    same_len(errors.len(), frame.num_subbands())?;
    let (gram, gu, condition) = weighted_gram(frame, gains)?;
    let zt = gram
        .transpose()
        .lu()
        .solve(&gu.transpose())
        .ok_or(DiagnosticsError::Singular { condition })?;
    let z = zt.transpose();
    let eps = noise_free_errors(w_o, w_k, w_k, frame).a_priori;
    let ze = &z * DVector::from_column_slice(errors);
    let za = &z * DVector::from_column_slice(&eps);
    Ok(StepBoundSample {
        cross: za.dot(&ze),
        energy: ze.norm_squared(),
    })
}

/// Sample-average estimate of the mean-square step-size bound.
pub fn empirical_step_bound(samples: &[StepBoundSample]) -> Result<f64, DiagnosticsError> {
    let cross: f64 = samples.iter().map(|s| s.cross).sum();
    let energy: f64 = samples.iter().map(|s| s.energy).sum();
    if !(energy > 0.0) {
        return Err(DiagnosticsError::DegenerateRun);
    }
    Ok(2.0 * cross / energy)
}
