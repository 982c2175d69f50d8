//! WebAssembly bindings behind `www/index.html`.
//!
//! Every export takes plain numbers or a JSON string and returns JSON, so the
//! page needs no generated type declarations. The `*_json` functions hold the
//! logic and are callable natively; the `#[wasm_bindgen]` wrappers only turn
//! their errors into JS exceptions.

use pnsaf::filterbank::{bank_quality_report, design_bank};
use pnsaf::harness::{
    run_ensemble, AlgorithmSpec, EnsembleResult, ExperimentSpec, InputSpec, MetricOptions, PathSpec, StepControlSpec,
};
use pnsaf::proportionate::GainRule;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Frequency points of the plotted magnitude responses (0 to π inclusive).
pub const RESPONSE_POINTS: usize = 257;
/// Longest curve handed to the page; longer ones are decimated.
pub const MAX_CURVE_POINTS: usize = 1500;
/// Upper bound on `run_length × ensemble_size × algorithms` so the tab stays responsive.
pub const MAX_WORK_SAMPLES: usize = 2_000_000;
pub const MAX_FILTER_LENGTH: usize = 1024;

/// Prototype taps, per-band magnitude responses in dB and the quality report.
pub fn design_bank_json(num_subbands: usize, length: usize, attenuation_db: f64) -> Result<String, String> {
    let bank = design_bank(num_subbands, length, attenuation_db).map_err(|e| e.to_string())?;
    let fft = (8 * bank.filter_len()).next_power_of_two().max(1024);
    let quality = bank_quality_report(&bank, fft).map_err(|e| e.to_string())?;
    let responses: Vec<Vec<f64>> = bank.filters().iter().map(|h| magnitude_db(h)).collect();
    let total: Vec<f64> = (0..RESPONSE_POINTS)
        .map(|k| {
            let p: f64 = responses.iter().map(|r| 10f64.powf(r[k] / 10.0)).sum();
            10.0 * p.log10()
        })
        .collect();
    let out = json!({
        "num_subbands": num_subbands,
        "taps": bank.prototype().taps(),
        "frequencies": (0..RESPONSE_POINTS).map(|k| k as f64 / (RESPONSE_POINTS - 1) as f64).collect::<Vec<_>>(),
        "responses_db": responses,
        "total_db": total,
        // non-finite fields (N = 1 has no stopband) serialize as null
        "quality": serde_json::to_value(quality).unwrap_or(Value::Null),
    });
    Ok(out.to_string())
}

/// Runs an experiment given as JSON (the same shape as the CLI's TOML configs).
pub fn simulate_json(spec_json: &str) -> Result<String, String> {
    let spec: ExperimentSpec = serde_json::from_str(spec_json).map_err(|e| format!("invalid experiment: {e}"))?;
    check_budget(&spec)?;
    let result = run_ensemble(&spec).map_err(|e| e.to_string())?;
    Ok(result_json(&result).to_string())
}

/// One shrinkage-VSS filter against fixed μ = 1 and μ = 0.1 on AR(1) input,
/// with the subband-averaged VSS step size over time.
pub fn vss_curve_json(
    lambda: f64,
    snr_db: f64,
    num_subbands: usize,
    run_length: usize,
    seed: u64,
) -> Result<String, String> {
    let alg = |name: &str, step_control| AlgorithmSpec {
        name: name.into(),
        gain_rule: GainRule::default(),
        step_control,
        regularization: 1e-3,
        num_subbands: None,
    };
    let spec = ExperimentSpec {
        input: InputSpec::Ar1 {
            pole: 0.95,
            innovation_variance: 1.0,
        },
        filter_length: 256,
        num_subbands,
        prototype_length: None,
        stopband_db: 60.0,
        snr_db,
        path: PathSpec::Sparse {
            active_taps: 16,
            decay_rate: 4.0,
        },
        path_flip_sample: Some(run_length / 2),
        run_length,
        ensemble_size: 1,
        base_seed: seed,
        metrics: MetricOptions {
            nmsd_stride: 1,
            erle_window: None,
            record_steps: true,
        },
        algorithms: vec![
            alg("vss", StepControlSpec::ShrinkageVss { lambda, kappa: 1.0 }),
            alg("mu_1", StepControlSpec::Fixed { mu: 1.0 }),
            alg("mu_0.1", StepControlSpec::Fixed { mu: 0.1 }),
        ],
    };
    spec.validate().map_err(|e| e.to_string())?;
    check_budget(&spec)?;
    let result = run_ensemble(&spec).map_err(|e| e.to_string())?;
    let mut out = result_json(&result);
    let vss = &result.algorithms[0].mean;
    if let Some(steps) = &vss.mean_steps {
        let stride = stride_for(steps.len());
        let mean: Vec<f64> = steps
            .iter()
            .step_by(stride)
            .map(|s| s.iter().sum::<f64>() / s.len().max(1) as f64)
            .collect();
        out["vss_mean_step"] = json!(mean);
    }
    Ok(out.to_string())
}

fn check_budget(spec: &ExperimentSpec) -> Result<(), String> {
    let work = spec
        .run_length
        .saturating_mul(spec.ensemble_size)
        .saturating_mul(spec.algorithms.len());
    if work > MAX_WORK_SAMPLES {
        return Err(format!(
            "experiment too large for the browser demo ({work} samples > {MAX_WORK_SAMPLES}); use the CLI"
        ));
    }
    if spec.filter_length > MAX_FILTER_LENGTH {
        return Err(format!(
            "filter_length {} exceeds the demo limit {MAX_FILTER_LENGTH}",
            spec.filter_length
        ));
    }
    if matches!(spec.input, InputSpec::Wav { .. }) || matches!(spec.path, PathSpec::File { .. }) {
        return Err("file inputs are not available in the browser".into());
    }
    Ok(())
}

fn stride_for(len: usize) -> usize {
    len.div_ceil(MAX_CURVE_POINTS).max(1)
}

fn result_json(result: &EnsembleResult) -> Value {
    let algorithms: Vec<Value> = result
        .algorithms
        .iter()
        .map(|a| {
            let m = &a.mean;
            let stride = stride_for(m.len());
            json!({
                "name": a.name,
                "num_subbands": a.num_subbands,
                "fullband": m.fullband.iter().step_by(stride).collect::<Vec<_>>(),
                "nmsd_db": m.nmsd_db.iter().step_by(stride).map(|&x| finite_or_null(x)).collect::<Vec<_>>(),
                "steady_state_db": finite_or_null(a.steady_state_db),
                "samples_to_minus20": a.time_to(-20.0).map(|c| c.sample),
                "step_range": [finite_or_null(a.step_range.0), finite_or_null(a.step_range.1)],
                "diverged": !a.diverged.is_empty(),
            })
        })
        .collect();
    json!({
        "run_length": result.spec.effective_run_length(),
        "flip_sample": result.aligned_flip_sample,
        "algorithms": algorithms,
    })
}

fn finite_or_null(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// `|H(e^{jω})|²` in dB on [`RESPONSE_POINTS`] frequencies by direct evaluation.
fn magnitude_db(h: &[f64]) -> Vec<f64> {
    (0..RESPONSE_POINTS)
        .map(|k| {
            let w = std::f64::consts::PI * k as f64 / (RESPONSE_POINTS - 1) as f64;
            let (re, im) = h.iter().enumerate().fold((0.0, 0.0), |(re, im), (n, &c)| {
                let (s, co) = (w * n as f64).sin_cos();
                (re + c * co, im - c * s)
            });
            10.0 * (re * re + im * im).max(1e-30).log10()
        })
        .collect()
}

#[wasm_bindgen(js_name = designBank)]
pub fn design_bank_js(num_subbands: usize, length: usize, attenuation_db: f64) -> Result<String, JsError> {
    design_bank_json(num_subbands, length, attenuation_db).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = simulate)]
pub fn simulate_js(spec_json: &str) -> Result<String, JsError> {
    simulate_json(spec_json).map_err(|e| JsError::new(&e))
}

/// `seed` is a `u32` so the page can pass a plain number rather than a BigInt.
#[wasm_bindgen(js_name = vssCurve)]
pub fn vss_curve_js(
    lambda: f64,
    snr_db: f64,
    num_subbands: usize,
    run_length: usize,
    seed: u32,
) -> Result<String, JsError> {
    vss_curve_json(lambda, snr_db, num_subbands, run_length, seed.into()).map_err(|e| JsError::new(&e))
}
