//! Cosine-modulated analysis filter bank and critically decimated analysis.
//!
//! The prototype is a Kaiser-windowed sinc lowpass. Its Kaiser shape and its
//! cutoff are picked by a small deterministic search: among shapes derived
//! from the Kaiser attenuation formula, keep the one with the deepest
//! stopband beyond `π/N` whose modulated bank stays power complementary to
//! within [`POWER_SPREAD_TARGET_DB`]. The bank is then scaled so that
//! `Σ_i |H_i(e^{jω})|²` averages to one over frequency.

use std::f64::consts::PI;

use thiserror::Error;

use crate::delay::DelayLine;
use crate::spectrum::ResponseGrid;

/// Largest allowed `max_ω Σ|H_i|² / min_ω Σ|H_i|²` (dB) during design.
pub const POWER_SPREAD_TARGET_DB: f64 = 0.9;

const SEARCH_SPAN_DB: f64 = 20.0;
const SEARCH_STEP_DB: f64 = 0.25;
const CUTOFF_FACTOR_MAX: f64 = 1.4;
const SEARCH_ITERATIONS: usize = 32;
const SYMMETRY_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterBankError {
    #[error("number of subbands must be at least 1")]
    NoSubbands,
    #[error("prototype length {length} is shorter than 2N = {min}")]
    PrototypeTooShort { length: usize, min: usize },
    #[error("attenuation must be a positive finite number of dB, got {0}")]
    InvalidAttenuation(f64),
    #[error("prototype taps must be non-empty, finite and symmetric")]
    InvalidTaps,
    #[error("fft size {fft_size} must be a power of two and at least {min}")]
    InvalidFftSize { fft_size: usize, min: usize },
    #[error("block length {got} does not match the number of subbands {expected}")]
    BlockLength { expected: usize, got: usize },
    #[error("regressor length must be positive")]
    EmptyRegressor,
}

/// Linear-phase lowpass prototype of the analysis bank.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeFilter {
    taps: Vec<f64>,
    num_subbands: usize,
    target_attenuation_db: f64,
}

impl PrototypeFilter {
    /// Wraps externally supplied taps after checking the linear-phase invariant.
    pub fn from_taps(taps: Vec<f64>, num_subbands: usize, target_attenuation_db: f64) -> Result<Self, FilterBankError> {
        if num_subbands == 0 {
            return Err(FilterBankError::NoSubbands);
        }
        let len = taps.len();
        let symmetric = (0..len).all(|n| (taps[n] - taps[len - 1 - n]).abs() <= SYMMETRY_TOLERANCE);
        if len == 0 || !taps.iter().all(|t| t.is_finite()) || !symmetric {
            return Err(FilterBankError::InvalidTaps);
        }
        Ok(PrototypeFilter {
            taps,
            num_subbands,
            target_attenuation_db,
        })
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn num_subbands(&self) -> usize {
        self.num_subbands
    }

    pub fn target_attenuation_db(&self) -> f64 {
        self.target_attenuation_db
    }
}

/// `N` analysis filters `H_i`, each of the prototype's length.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisBank {
    filters: Vec<Vec<f64>>,
    prototype: PrototypeFilter,
}

impl AnalysisBank {
    pub fn identity() -> Self {
        AnalysisBank {
            filters: vec![vec![1.0]],
            prototype: PrototypeFilter {
                taps: vec![1.0],
                num_subbands: 1,
                target_attenuation_db: 0.0,
            },
        }
    }

    pub fn filters(&self) -> &[Vec<f64>] {
        &self.filters
    }

    pub fn filter(&self, i: usize) -> &[f64] {
        &self.filters[i]
    }

    pub fn num_subbands(&self) -> usize {
        self.filters.len()
    }

    pub fn filter_len(&self) -> usize {
        self.prototype.len()
    }

    pub fn prototype(&self) -> &PrototypeFilter {
        &self.prototype
    }
}

/// Zeroth-order modified Bessel function of the first kind.
pub fn bessel_i0(x: f64) -> f64 {
    let half = 0.5 * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    loop {
        term *= (half / k) * (half / k);
        sum += term;
        if term < sum * 1e-17 {
            return sum;
        }
        k += 1.0;
    }
}

/// Kaiser shape parameter for a stopband attenuation in dB.
pub fn kaiser_beta(attenuation_db: f64) -> f64 {
    if attenuation_db > 50.0 {
        0.1102 * (attenuation_db - 8.7)
    } else if attenuation_db >= 21.0 {
        0.5842 * (attenuation_db - 21.0).powf(0.4) + 0.07886 * (attenuation_db - 21.0)
    } else {
        0.0
    }
}

/// Kaiser-windowed sinc lowpass of length `len` with cutoff `cutoff` rad/sample.
/// The first half is computed and mirrored, so the taps are exactly symmetric.
fn windowed_sinc(len: usize, beta: f64, cutoff: f64) -> Vec<f64> {
    let center = (len as f64 - 1.0) / 2.0;
    let denom = bessel_i0(beta);
    let mut taps = vec![0.0; len];
    for n in 0..len.div_ceil(2) {
        let x = n as f64 - center;
        let sinc = if x == 0.0 {
            cutoff / PI
        } else {
            (cutoff * x).sin() / (PI * x)
        };
        let r = if center > 0.0 { x / center } else { 0.0 };
        let window = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / denom;
        taps[n] = sinc * window;
        taps[len - 1 - n] = taps[n];
    }
    taps
}

/// `2 cos((π/N)(i + 1/2)(n − (L−1)/2) + (−1)^i π/4)`.
fn modulation_table(num_subbands: usize, len: usize) -> Vec<Vec<f64>> {
    let center = (len as f64 - 1.0) / 2.0;
    (0..num_subbands)
        .map(|i| {
            let phase = if i % 2 == 0 { PI / 4.0 } else { -PI / 4.0 };
            (0..len)
                .map(|n| 2.0 * ((PI / num_subbands as f64) * (i as f64 + 0.5) * (n as f64 - center) + phase).cos())
                .collect()
        })
        .collect()
}

fn modulate_with(table: &[Vec<f64>], taps: &[f64]) -> Vec<Vec<f64>> {
    table
        .iter()
        .map(|row| row.iter().zip(taps).map(|(c, p)| c * p).collect())
        .collect()
}

struct DesignProbe {
    subbands: usize,
    table: Vec<Vec<f64>>,
    grid: ResponseGrid,
    response: Vec<f64>,
    total: Vec<f64>,
}

impl DesignProbe {
    fn new(subbands: usize, len: usize, fft_size: usize) -> Self {
        DesignProbe {
            subbands,
            table: modulation_table(subbands, len),
            grid: ResponseGrid::new(fft_size),
            response: Vec::new(),
            total: Vec::new(),
        }
    }

    /// `10 log10(max Σ|H_i|² / min Σ|H_i|²)`.
    fn power_spread_db(&mut self, taps: &[f64]) -> f64 {
        let bins = self.grid.size() / 2 + 1;
        self.total.clear();
        self.total.resize(bins, 0.0);
        for row in &self.table {
            let filter: Vec<f64> = row.iter().zip(taps).map(|(c, p)| c * p).collect();
            self.grid.power_response(&filter, &mut self.response);
            for (t, r) in self.total.iter_mut().zip(&self.response) {
                *t += r;
            }
        }
        let (lo, hi) = min_max(&self.total);
        10.0 * (hi / lo).log10()
    }

    fn stopband_db(&mut self, taps: &[f64]) -> f64 {
        self.grid.power_response(taps, &mut self.response);
        stopband_attenuation(&self.response, self.subbands, self.grid.size())
    }
}

fn min_max(xs: &[f64]) -> (f64, f64) {
    xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
        (lo.min(x), hi.max(x))
    })
}

/// Stopband rejection beyond `ω = π/N` from a power response on `0..=F/2`.
fn stopband_attenuation(power: &[f64], subbands: usize, fft_size: usize) -> f64 {
    let peak = power.iter().cloned().fold(0.0, f64::max);
    let stop = power
        .iter()
        .enumerate()
        .filter(|(k, _)| 2 * subbands * k >= fft_size)
        .map(|(_, &p)| p)
        .fold(0.0, f64::max);
    -10.0 * (stop / peak).log10()
}

/// Golden-section minimiser on `[lo, hi]`.
fn golden_min(mut lo: f64, mut hi: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..SEARCH_ITERATIONS {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}

/// Designs the lowpass prototype for an `N`-band cosine-modulated bank.
///
/// `N = 1` always yields the single tap `[1.0]` (identity bank).
pub fn design_prototype(
    num_subbands: usize,
    length: usize,
    attenuation_db: f64,
) -> Result<PrototypeFilter, FilterBankError> {
    if num_subbands == 0 {
        return Err(FilterBankError::NoSubbands);
    }
    if !attenuation_db.is_finite() || attenuation_db <= 0.0 {
        return Err(FilterBankError::InvalidAttenuation(attenuation_db));
    }
    if num_subbands == 1 {
        return Ok(PrototypeFilter {
            taps: vec![1.0],
            num_subbands: 1,
            target_attenuation_db: attenuation_db,
        });
    }
    if length < 2 * num_subbands {
        return Err(FilterBankError::PrototypeTooShort {
            length,
            min: 2 * num_subbands,
        });
    }

    let fft_size = (8 * length).next_power_of_two().max(1024);
    let mut probe = DesignProbe::new(num_subbands, length, fft_size);
    let base_cutoff = PI / (2.0 * num_subbands as f64);

    // (stopband dB, spread dB, taps); `best` honours the spread target,
    // `fallback` is the flattest candidate seen.
    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    let mut fallback: Option<(f64, f64, Vec<f64>)> = None;
    let steps = (SEARCH_SPAN_DB / SEARCH_STEP_DB).round() as usize;
    for s in 0..=steps {
        let design_db = (attenuation_db - SEARCH_SPAN_DB).max(0.0) + s as f64 * SEARCH_STEP_DB;
        if design_db > attenuation_db + 1e-9 {
            break;
        }
        let beta = kaiser_beta(design_db);
        let mut spread_at = |factor: f64| probe.power_spread_db(&windowed_sinc(length, beta, factor * base_cutoff));
        let flattest = golden_min(1.0, CUTOFF_FACTOR_MAX, &mut spread_at);
        let flattest_spread = spread_at(flattest);
        let factor = if flattest_spread > POWER_SPREAD_TARGET_DB {
            flattest
        } else if spread_at(1.0) <= POWER_SPREAD_TARGET_DB {
            1.0
        } else {
            // smallest cutoff (deepest stopband) still meeting the target
            let (mut lo, mut hi) = (1.0, flattest);
            for _ in 0..SEARCH_ITERATIONS {
                let mid = 0.5 * (lo + hi);
                if spread_at(mid) > POWER_SPREAD_TARGET_DB {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            hi
        };
        let taps = windowed_sinc(length, beta, factor * base_cutoff);
        let spread = probe.power_spread_db(&taps);
        let stop = probe.stopband_db(&taps);
        if spread <= POWER_SPREAD_TARGET_DB {
            if best.as_ref().is_none_or(|b| stop > b.0) {
                best = Some((stop, spread, taps));
            }
        } else if fallback.as_ref().is_none_or(|b| spread < b.1) {
            fallback = Some((stop, spread, taps));
        }
    }
    let (_, _, mut taps) = best.or(fallback).expect("search visits at least one candidate");

    let table = modulation_table(num_subbands, length);
    let energy: f64 = modulate_with(&table, &taps)
        .iter()
        .flat_map(|h| h.iter().map(|x| x * x))
        .sum();
    let scale = energy.sqrt().recip();
    taps.iter_mut().for_each(|t| *t *= scale);

    Ok(PrototypeFilter {
        taps,
        num_subbands,
        target_attenuation_db: attenuation_db,
    })
}

/// Builds the analysis filters
/// `h_i[n] = 2 p[n] cos((π/N)(i + 1/2)(n − (L−1)/2) + (−1)^i π/4)`.
pub fn modulate_bank(prototype: &PrototypeFilter) -> AnalysisBank {
    let n = prototype.num_subbands;
    let filters = if n == 1 {
        vec![prototype.taps.clone()]
    } else {
        modulate_with(&modulation_table(n, prototype.len()), &prototype.taps)
    };
    AnalysisBank {
        filters,
        prototype: prototype.clone(),
    }
}

/// Designs and modulates in one go.
pub fn design_bank(num_subbands: usize, length: usize, attenuation_db: f64) -> Result<AnalysisBank, FilterBankError> {
    design_prototype(num_subbands, length, attenuation_db).map(|p| modulate_bank(&p))
}

/// Measured frequency-domain quality of a bank.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct BankQuality {
    /// Minimum prototype rejection beyond `π/N`, relative to its passband peak.
    pub stopband_attenuation_db: f64,
    /// Peak deviation of `Σ_i |H_i|²` from its frequency average.
    pub amplitude_distortion_db: f64,
    /// Peak of `|H_i||H_{i+1}|` relative to the peak single-band power.
    pub max_alias_level_db: f64,
}

impl std::fmt::Display for BankQuality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "stopband_attenuation_db = {:.3}", self.stopband_attenuation_db)?;
        writeln!(f, "amplitude_distortion_db = {:.3}", self.amplitude_distortion_db)?;
        write!(f, "max_alias_level_db = {:.3}", self.max_alias_level_db)
    }
}

pub fn bank_quality_report(bank: &AnalysisBank, fft_size: usize) -> Result<BankQuality, FilterBankError> {
    let min = 8 * bank.filter_len();
    if !fft_size.is_power_of_two() || fft_size < min {
        return Err(FilterBankError::InvalidFftSize { fft_size, min });
    }
    let n = bank.num_subbands();
    let mut grid = ResponseGrid::new(fft_size);
    let mut scratch = Vec::new();

    let stopband_attenuation_db = if n == 1 {
        f64::INFINITY
    } else {
        grid.power_response(bank.prototype.taps(), &mut scratch);
        stopband_attenuation(&scratch, n, fft_size)
    };

    let responses: Vec<Vec<f64>> = bank
        .filters
        .iter()
        .map(|h| {
            grid.power_response(h, &mut scratch);
            scratch.clone()
        })
        .collect();
    let bins = fft_size / 2 + 1;
    // Parseval: the average of Σ|H_i|² over the full circle is Σ‖h_i‖².
    let mean: f64 = bank.filters.iter().flat_map(|h| h.iter().map(|x| x * x)).sum();
    let amplitude_distortion_db = (0..bins)
        .map(|k| {
            let total: f64 = responses.iter().map(|r| r[k]).sum();
            (10.0 * (total / mean).log10()).abs()
        })
        .fold(0.0, f64::max);

    let max_alias_level_db = if n == 1 {
        f64::NEG_INFINITY
    } else {
        let peak = responses.iter().flatten().cloned().fold(0.0, f64::max);
        let overlap = responses
            .windows(2)
            .flat_map(|pair| (0..bins).map(move |k| (pair[0][k] * pair[1][k]).sqrt()))
            .fold(0.0, f64::max);
        10.0 * (overlap / peak).log10()
    };

    Ok(BankQuality {
        stopband_attenuation_db,
        amplitude_distortion_db,
        max_alias_level_db,
    })
}

/// One decimated tick of subband data: `u_i(k)` (most recent first) and `d_{i,D}(k)`.
#[derive(Debug, Clone, Copy)]
pub struct SubbandFrame<'a> {
    regressors: &'a [&'a [f64]],
    desired: &'a [f64],
}

impl<'a> SubbandFrame<'a> {
    /// All regressors must share one length.
    pub fn new(regressors: &'a [&'a [f64]], desired: &'a [f64]) -> Self {
        assert_eq!(regressors.len(), desired.len(), "one desired sample per subband");
        assert!(
            regressors.windows(2).all(|w| w[0].len() == w[1].len()),
            "regressors must share one length"
        );
        SubbandFrame { regressors, desired }
    }

    pub fn num_subbands(&self) -> usize {
        self.desired.len()
    }

    pub fn filter_length(&self) -> usize {
        self.regressors.first().map_or(0, |r| r.len())
    }

    pub fn regressor(&self, i: usize) -> &'a [f64] {
        self.regressors[i]
    }

    pub fn regressors(&self) -> &'a [&'a [f64]] {
        self.regressors
    }

    pub fn desired(&self) -> &'a [f64] {
        self.desired
    }
}

/// Full-rate filtering through each `H_i` plus the per-subband regressor delay lines.
#[derive(Debug, Clone)]
pub struct SubbandAnalyzer {
    bank: AnalysisBank,
    input_history: DelayLine,
    desired_history: DelayLine,
    regressors: Vec<DelayLine>,
    desired: Vec<f64>,
}

impl SubbandAnalyzer {
    pub fn new(bank: AnalysisBank, regressor_len: usize) -> Result<Self, FilterBankError> {
        if regressor_len == 0 {
            return Err(FilterBankError::EmptyRegressor);
        }
        let n = bank.num_subbands();
        let l = bank.filter_len();
        Ok(SubbandAnalyzer {
            input_history: DelayLine::new(l),
            desired_history: DelayLine::new(l),
            regressors: (0..n).map(|_| DelayLine::new(regressor_len)).collect(),
            desired: vec![0.0; n],
            bank,
        })
    }

    pub fn bank(&self) -> &AnalysisBank {
        &self.bank
    }

    pub fn num_subbands(&self) -> usize {
        self.bank.num_subbands()
    }

    pub fn regressor_len(&self) -> usize {
        self.regressors[0].len()
    }

    /// Consumes `N` fullband samples of input and desired signal; the
    /// subband desired samples are taken at the last sample of the block.
    pub fn push_block(&mut self, input_block: &[f64], desired_block: &[f64]) -> Result<(), FilterBankError> {
        let n = self.num_subbands();
        for block in [input_block, desired_block] {
            if block.len() != n {
                return Err(FilterBankError::BlockLength {
                    expected: n,
                    got: block.len(),
                });
            }
        }
        for &x in input_block {
            self.input_history.push(x);
            let history = self.input_history.window();
            for (filter, line) in self.bank.filters.iter().zip(&mut self.regressors) {
                line.push(dot(filter, history));
            }
        }
        for &x in desired_block {
            self.desired_history.push(x);
        }
        let history = self.desired_history.window();
        for (filter, d) in self.bank.filters.iter().zip(&mut self.desired) {
            *d = dot(filter, history);
        }
        Ok(())
    }

    /// Regressor views for the current tick, to be wrapped in a [`SubbandFrame`].
    pub fn regressor_views(&self) -> Vec<&[f64]> {
        self.regressors.iter().map(DelayLine::window).collect()
    }

    pub fn desired(&self) -> &[f64] {
        &self.desired
    }

    pub fn reset(&mut self) {
        self.input_history.reset();
        self.desired_history.reset();
        self.regressors.iter_mut().for_each(DelayLine::reset);
        self.desired.iter_mut().for_each(|d| *d = 0.0);
    }
}

/// Stateless convenience over [`SubbandAnalyzer::push_block`]: advances the
/// analyzer and hands the resulting frame to `f`.
pub fn analyze_step<R>(
    analyzer: &mut SubbandAnalyzer,
    input_block: &[f64],
    desired_block: &[f64],
    f: impl FnOnce(SubbandFrame<'_>) -> R,
) -> Result<R, FilterBankError> {
    analyzer.push_block(input_block, desired_block)?;
    let views = analyzer.regressor_views();
    Ok(f(SubbandFrame::new(&views, analyzer.desired())))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dtft_power(taps: &[f64], omega: f64) -> f64 {
        let (re, im) = taps.iter().enumerate().fold((0.0, 0.0), |(re, im), (n, &h)| {
            (re + h * (omega * n as f64).cos(), im - h * (omega * n as f64).sin())
        });
        re * re + im * im
    }

    /// Independent oracle: direct DTFT evaluated on a dense grid.
    fn oracle_stopband_db(taps: &[f64], subbands: usize) -> f64 {
        let grid = 4096;
        let powers: Vec<(f64, f64)> = (0..=grid / 2)
            .map(|k| {
                let w = 2.0 * PI * k as f64 / grid as f64;
                (w, dtft_power(taps, w))
            })
            .collect();
        let peak = powers.iter().map(|p| p.1).fold(0.0, f64::max);
        let stop = powers
            .iter()
            .filter(|p| p.0 >= PI / subbands as f64 - 1e-12)
            .map(|p| p.1)
            .fold(0.0, f64::max);
        -10.0 * (stop / peak).log10()
    }

    #[test]
    fn single_subband_is_identity() {
        let p = design_prototype(1, 1, 60.0).unwrap();
        assert_eq!(p.taps(), &[1.0]);
        let bank = modulate_bank(&p);
        assert_eq!(bank.filters(), &[vec![1.0]]);
        let q = bank_quality_report(&bank, 8).unwrap();
        assert_eq!(q.amplitude_distortion_db, 0.0);
    }

    #[test]
    fn rejects_short_prototype_and_bad_attenuation() {
        assert_eq!(
            design_prototype(4, 4, 60.0),
            Err(FilterBankError::PrototypeTooShort { length: 4, min: 8 })
        );
        assert!(matches!(
            design_prototype(4, 32, f64::NAN),
            Err(FilterBankError::InvalidAttenuation(_))
        ));
        assert!(matches!(
            design_prototype(4, 32, -3.0),
            Err(FilterBankError::InvalidAttenuation(_))
        ));
        assert_eq!(design_prototype(0, 32, 60.0), Err(FilterBankError::NoSubbands));
    }

    #[test]
    fn designed_prototypes_meet_attenuation_by_direct_dtft() {
        for (n, l, min_db) in [(2, 16, 50.0), (4, 32, 50.0), (8, 64, 55.0)] {
            let p = design_prototype(n, l, 60.0).unwrap();
            let att = oracle_stopband_db(p.taps(), n);
            assert!(att >= min_db, "N={n} L={l}: {att} dB");
            for k in 0..l {
                assert!((p.taps()[k] - p.taps()[l - 1 - k]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn modulation_formula_at_first_tap() {
        let p = design_prototype(2, 16, 60.0).unwrap();
        let bank = modulate_bank(&p);
        let expected = 2.0 * ((PI / 2.0) * 0.5 * (0.0 - 7.5) + PI / 4.0).cos();
        assert!((bank.filter(0)[0] / p.taps()[0] - expected).abs() < 1e-12);
        let expected1 = 2.0 * ((PI / 2.0) * 1.5 * (0.0 - 7.5) - PI / 4.0).cos();
        assert!((bank.filter(1)[0] / p.taps()[0] - expected1).abs() < 1e-12);
    }

    #[test]
    fn power_complementary_by_direct_dtft() {
        for (n, l) in [(2, 16), (4, 32), (8, 64)] {
            let bank = design_bank(n, l, 60.0).unwrap();
            let sums: Vec<f64> = (0..=512)
                .map(|k| {
                    let w = PI * k as f64 / 512.0;
                    bank.filters().iter().map(|h| dtft_power(h, w)).sum()
                })
                .collect();
            let (lo, hi) = min_max(&sums);
            // best constant c sits at the geometric midpoint
            let ripple = 5.0 * (hi / lo).log10();
            assert!(ripple <= 1.0, "N={n}: {ripple}");
            let mean: f64 = bank.filters().iter().flatten().map(|x| x * x).sum();
            assert!((mean - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn quality_report_matches_oracle() {
        for (n, l, min_db) in [(2, 16, 50.0), (4, 32, 50.0), (8, 64, 55.0)] {
            let bank = design_bank(n, l, 60.0).unwrap();
            let q = bank_quality_report(&bank, 4096).unwrap();
            assert!(q.stopband_attenuation_db >= min_db);
            assert!((q.stopband_attenuation_db - oracle_stopband_db(bank.prototype().taps(), n)).abs() < 1e-6);
            assert!(q.amplitude_distortion_db <= 1.0);
            assert!(q.max_alias_level_db < 0.0);
        }
        let bank = design_bank(4, 32, 60.0).unwrap();
        assert!(matches!(
            bank_quality_report(&bank, 100),
            Err(FilterBankError::InvalidFftSize { .. })
        ));
        assert!(matches!(
            bank_quality_report(&bank, 128),
            Err(FilterBankError::InvalidFftSize { .. })
        ));
    }

    #[test]
    fn design_is_deterministic() {
        assert_eq!(design_prototype(4, 32, 60.0), design_prototype(4, 32, 60.0));
    }

    #[test]
    fn identity_analysis_is_a_tap_delay_line() {
        let mut a = SubbandAnalyzer::new(AnalysisBank::identity(), 4).unwrap();
        let mut line = DelayLine::new(4);
        for n in 0..20 {
            let x = (n as f64 * 0.7).sin();
            a.push_block(&[x], &[2.0 * x]).unwrap();
            line.push(x);
            assert_eq!(a.regressor_views()[0], line.window());
            assert_eq!(a.desired(), &[2.0 * x]);
        }
    }

    #[test]
    fn zero_input_gives_zero_frame() {
        let mut a = SubbandAnalyzer::new(design_bank(4, 32, 60.0).unwrap(), 8).unwrap();
        for _ in 0..10 {
            analyze_step(&mut a, &[0.0; 4], &[0.0; 4], |frame| {
                assert!(frame.desired().iter().all(|&d| d == 0.0));
                assert!(frame.regressors().iter().all(|r| r.iter().all(|&x| x == 0.0)));
            })
            .unwrap();
        }
    }

    #[test]
    fn impulse_response_by_direct_convolution() {
        let bank = design_bank(2, 16, 60.0).unwrap();
        let m = 24;
        let mut a = SubbandAnalyzer::new(bank.clone(), m).unwrap();
        let total = 20;
        let input: Vec<f64> = (0..2 * total).map(|n| if n == 0 { 1.0 } else { 0.0 }).collect();
        for k in 0..total {
            let block = &input[2 * k..2 * k + 2];
            a.push_block(block, block).unwrap();
            // full-rate index of the decimated instant
            let now = 2 * k + 1;
            for i in 0..2 {
                let h = bank.filter(i);
                let reg = a.regressor_views()[i];
                for (lag, &value) in reg.iter().enumerate() {
                    let expect = now.checked_sub(lag).and_then(|t| h.get(t)).copied().unwrap_or(0.0);
                    assert_eq!(value, expect);
                }
                assert_eq!(a.desired()[i], h.get(now).copied().unwrap_or(0.0));
            }
        }
    }

    #[test]
    fn wrong_block_length_is_rejected() {
        let mut a = SubbandAnalyzer::new(design_bank(4, 32, 60.0).unwrap(), 8).unwrap();
        assert_eq!(
            a.push_block(&[0.0; 3], &[0.0; 4]),
            Err(FilterBankError::BlockLength { expected: 4, got: 3 })
        );
    }
}
