//! Explanation fidelity: local R² of an attribution-derived linear
//! surrogate, top-k fidelity Φ, per-feature fidelity and sliding-window
//! temporal fidelity.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::exec::{map_indexed, ExecMode};
use crate::explain::{explain_with, Attribution, ExplainConfig, Method};
use crate::model::Predictor;
use crate::stats::{summarize, Summary};
use crate::trace::{window_iter, KpmSample, FEATURE_NAMES};

/// Cells with `|x̃ − b|` at or below this get a zero surrogate slope.
pub const SLOPE_EPS: f64 = 1e-6;
/// Variances below this count as zero.
pub const VARIANCE_EPS: f64 = 1e-12;
/// Reported R² is floored here; raw values are kept alongside.
pub const R2_FLOOR: f64 = -10.0;
/// Smallest |ŷ_full| for which Φ is defined.
pub const PHI_DENOM_EPS: f64 = 1e-9;
/// Attribution mass the top-k set must cover.
pub const DEFAULT_TOPK_MASS: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodConfig {
    pub n_samples: usize,
    /// Gaussian std in normalized units.
    pub perturb_std: f64,
    pub seed: u64,
}

impl Default for NeighborhoodConfig {
    fn default() -> Self {
        Self {
            n_samples: 64,
            perturb_std: 0.25,
            seed: 42,
        }
    }
}

impl NeighborhoodConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(config("n_samples", "needs at least 2 neighborhood samples"));
        }
        if !(self.perturb_std > 0.0 && self.perturb_std.is_finite()) {
            return Err(config("perturb_std", "must be positive"));
        }
        Ok(())
    }

    /// Neighborhood for window `index`; its seed is `seed ^ index`.
    pub fn for_window(&self, index: usize) -> Self {
        Self {
            seed: self.seed ^ index as u64,
            ..*self
        }
    }
}

/// Linear surrogate `g(x) = w0 + Σ w[t][i] x[t][i]` built from an attribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    pub weights: Array2<f64>,
    pub intercept: f64,
}

impl Surrogate {
    pub fn eval(&self, x: &Array2<f64>) -> f64 {
        self.intercept + (&self.weights * x).sum()
    }
}

/// Slopes `e / (x̃ − b)` anchored so that `g(x̃) = f(x̃)`.
pub fn surrogate_from_attribution(
    e: &Array2<f64>,
    x: &Array2<f64>,
    baseline: &Array2<f64>,
    f_x: f64,
) -> Surrogate {
    let mut weights = Array2::zeros(x.dim());
    for ((w, &ev), (&xv, &bv)) in weights.iter_mut().zip(e).zip(x.iter().zip(baseline)) {
        let d: f64 = xv - bv;
        if d.abs() > SLOPE_EPS {
            *w = ev / d;
        }
    }
    let intercept = f_x - (&weights * x).sum();
    Surrogate { weights, intercept }
}

/// Outcome of one local R² evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalR2 {
    /// Unfloored value; `NaN` when degenerate.
    pub raw: f64,
    /// The model is locally constant but the surrogate is not.
    pub degenerate: bool,
}

impl LocalR2 {
    /// Value floored at [`R2_FLOOR`]; `None` when degenerate.
    pub fn reported(&self) -> Option<f64> {
        (!self.degenerate).then(|| self.raw.max(R2_FLOOR))
    }
}

fn r2_from(fs: &[f64], gs: &[f64]) -> LocalR2 {
    let mean = fs.iter().sum::<f64>() / fs.len() as f64;
    let ss_res: f64 = fs.iter().zip(gs).map(|(f, g)| (f - g).powi(2)).sum();
    let ss_tot: f64 = fs.iter().map(|f| (f - mean).powi(2)).sum();
    if ss_tot < VARIANCE_EPS {
        if ss_res <= VARIANCE_EPS {
            LocalR2 {
                raw: 1.0,
                degenerate: false,
            }
        } else {
            LocalR2 {
                raw: f64::NAN,
                degenerate: true,
            }
        }
    } else {
        LocalR2 {
            raw: 1.0 - ss_res / ss_tot,
            degenerate: false,
        }
    }
}

/// Local R² over Gaussian perturbations of the cells where `perturb(t, i)`
/// holds.
fn r2_over(
    predictor: &Predictor,
    x: &Array2<f64>,
    surrogate: &Surrogate,
    cfg: &NeighborhoodConfig,
    perturb: impl Fn(usize, usize) -> bool,
) -> Result<LocalR2> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.perturb_std).expect("positive std");
    let mut fs = Vec::with_capacity(cfg.n_samples);
    let mut gs = Vec::with_capacity(cfg.n_samples);
    for _ in 0..cfg.n_samples {
        let mut xj = x.clone();
        for ((t, i), v) in xj.indexed_iter_mut() {
            // Always draw so the stream does not depend on the cell subset.
            let d = noise.sample(&mut rng);
            if perturb(t, i) {
                *v += d;
            }
        }
        fs.push(predictor.predict(&xj)?);
        gs.push(surrogate.eval(&xj));
    }
    Ok(r2_from(&fs, &gs))
}

/// Local R² of the attribution's surrogate over a perturbation neighborhood.
pub fn local_r2(
    predictor: &Predictor,
    x: &Array2<f64>,
    baseline: &Array2<f64>,
    e: &Attribution,
    cfg: &NeighborhoodConfig,
) -> Result<LocalR2> {
    let f_x = predictor.predict(x)?;
    let g = surrogate_from_attribution(&e.e, x, baseline, f_x);
    r2_over(predictor, x, &g, cfg, |_, _| true)
}

/// Per-feature local R²: only column `i` is perturbed, so only its slopes
/// and the intercept matter.
pub fn featurewise_fidelity(
    predictor: &Predictor,
    x: &Array2<f64>,
    baseline: &Array2<f64>,
    e: &Attribution,
    cfg: &NeighborhoodConfig,
) -> Result<Vec<LocalR2>> {
    let f_x = predictor.predict(x)?;
    let g = surrogate_from_attribution(&e.e, x, baseline, f_x);
    (0..x.ncols())
        .map(|col| r2_over(predictor, x, &g, cfg, |_, i| i == col))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub phi: f64,
    pub k_used: usize,
    pub y_full: f64,
    pub y_topk: f64,
}

/// Cells ranked by `|e|` (descending; ties by index) and the smallest prefix
/// holding `mass` of the total absolute attribution.
pub fn topk_cells(e: &Array2<f64>, mass: f64) -> Vec<(usize, usize)> {
    let n = e.ncols();
    let mut order: Vec<(usize, f64)> = e.iter().map(|v| v.abs()).enumerate().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let total: f64 = order.iter().map(|(_, v)| v).sum();
    let target = mass * total;
    let mut acc = 0.0;
    let mut k = order.len();
    for (j, (_, v)) in order.iter().enumerate() {
        acc += v;
        if acc >= target {
            k = j + 1;
            break;
        }
    }
    order[..k].iter().map(|&(idx, _)| (idx / n, idx % n)).collect()
}

/// Φ = 1 − |ŷ_full − ŷ_top-k| / |ŷ_full| with the top-k cells kept and the
/// rest set to `baseline`.
pub fn topk_fidelity(
    predictor: &Predictor,
    x: &Array2<f64>,
    e: &Attribution,
    mass: f64,
    baseline: &Array2<f64>,
) -> Result<TopK> {
    if !(mass > 0.0 && mass <= 1.0) {
        return Err(config("mass", "must lie in (0, 1]"));
    }
    let keep = topk_cells(&e.e, mass);
    let y_full = predictor.predict(x)?;
    if y_full.abs() < PHI_DENOM_EPS {
        return Err(Error::Degenerate(format!("|ŷ_full| = {y_full:e}")));
    }
    let y_topk = predictor.forward_masked(x, &keep, baseline)?;
    Ok(TopK {
        phi: phi_score(y_full, y_topk),
        k_used: keep.len(),
        y_full,
        y_topk,
    })
}

pub fn phi_score(y_full: f64, y_topk: f64) -> f64 {
    1.0 - (y_full - y_topk).abs() / y_full.abs()
}

/// All fidelity numbers for one explained window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub window: usize,
    pub method: Method,
    pub r2_loc: LocalR2,
    /// `None` when |ŷ_full| is below the Φ guard.
    pub phi: Option<f64>,
    pub k_used: usize,
    /// Filled when per-feature evaluation is requested.
    pub per_feature_r2: Option<BTreeMap<String, LocalR2>>,
    /// |Σe − (f(x̃) − f(b))| / |f(x̃) − f(b)|.
    pub completeness_gap: Option<f64>,
    pub prediction: f64,
}

pub fn feature_name(i: usize) -> String {
    FEATURE_NAMES
        .get(i)
        .map_or_else(|| format!("f{i}"), |s| s.to_string())
}

/// Explain one normalized input and score the explanation.
pub fn evaluate_window(
    predictor: &Predictor,
    x: &Array2<f64>,
    explain: &ExplainConfig,
    cfg: &NeighborhoodConfig,
    window: usize,
    featurewise: bool,
) -> Result<FidelityReport> {
    let cache = predictor.forward_cache(x)?;
    let e = explain_with(predictor, &cache, explain, window as u64, ExecMode::Sequential)?
        .ok_or_else(|| config("method", "fidelity needs an explaining method"))?;
    let b = explain.baseline.resolve(&predictor.norm, x.dim())?;
    let local_cfg = cfg.for_window(window);
    let r2_loc = local_r2(predictor, x, &b, &e, &local_cfg)?;
    let (phi, k_used) = match topk_fidelity(predictor, x, &e, DEFAULT_TOPK_MASS, &b) {
        Ok(tk) => (Some(tk.phi), tk.k_used),
        Err(Error::Degenerate(_)) => (None, topk_cells(&e.e, DEFAULT_TOPK_MASS).len()),
        Err(err) => return Err(err),
    };
    let per_feature_r2 = if featurewise {
        let per = featurewise_fidelity(predictor, x, &b, &e, &local_cfg)?;
        Some(
            per.into_iter()
                .enumerate()
                .map(|(i, r)| (feature_name(i), r))
                .collect(),
        )
    } else {
        None
    };
    let prediction = predictor.norm.to_target_units(cache.output);
    let completeness_gap = matches!(explain.method, Method::Ig | Method::Hybrid | Method::Shap)
        .then(|| -> Result<f64> {
            let span = prediction - predictor.predict(&b)?;
            Ok((e.total() - span).abs() / span.abs())
        })
        .transpose()?;
    Ok(FidelityReport {
        window,
        method: explain.method,
        r2_loc,
        phi,
        k_used,
        per_feature_r2,
        completeness_gap,
        prediction,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalFidelity {
    pub method: Method,
    pub reports: Vec<FidelityReport>,
    /// `(window, r2)` after rolling-mean smoothing over `eval_window_len`.
    pub series: Vec<(usize, f64)>,
    pub eval_window_len: usize,
    /// Statistics of the reported (floored) per-window R².
    pub summary: Summary,
    pub phi_excluded: usize,
    pub perturbation: String,
}

impl TemporalFidelity {
    /// Per-window reported R², `None` for degenerate windows.
    pub fn r2_values(&self) -> Vec<Option<f64>> {
        self.reports.iter().map(|r| r.r2_loc.reported()).collect()
    }

    /// Write `window,method,r2,phi,k_used,completeness_gap` rows; empty
    /// cells mark degenerate or undefined values.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "window,method,r2,phi,k_used,completeness_gap")?;
        let cell = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        for r in &self.reports {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.window,
                r.method,
                cell(r.r2_loc.reported()),
                cell(r.phi),
                r.k_used,
                cell(r.completeness_gap)
            )?;
        }
        Ok(())
    }
}

pub const FEATUREWISE_DEFINITION: &str =
    "per-feature R2: perturb one feature column across all timesteps, others fixed";

/// Trailing rolling mean; `len == 1` returns the input.
pub fn rolling_mean(values: &[(usize, f64)], len: usize) -> Vec<(usize, f64)> {
    if len <= 1 {
        return values.to_vec();
    }
    values
        .windows(len)
        .map(|w| {
            let mean = w.iter().map(|(_, v)| v).sum::<f64>() / len as f64;
            (w[len - 1].0, mean)
        })
        .collect()
}

/// Sliding-window fidelity: one explanation and one local R² per prediction
/// window of the trace.
#[allow(clippy::too_many_arguments)]
pub fn temporal_fidelity(
    trace: &[KpmSample],
    window_len: usize,
    predictor: &Predictor,
    explain: &ExplainConfig,
    eval_window_len: usize,
    cfg: &NeighborhoodConfig,
    featurewise: bool,
    mode: ExecMode,
) -> Result<TemporalFidelity> {
    cfg.validate()?;
    if eval_window_len == 0 {
        return Err(config("eval_window_len", "must be at least 1"));
    }
    let inputs: Vec<Array2<f64>> = window_iter(trace, window_len, 1)?
        .iter()
        .map(|(w, _)| predictor.norm.normalize(&w.to_matrix()))
        .collect();
    if inputs.len() < eval_window_len || inputs.is_empty() {
        return Err(Error::Size(format!(
            "{} windows, need at least {}",
            inputs.len(),
            eval_window_len.max(1)
        )));
    }
    let reports = map_indexed(inputs.len(), mode, |j| {
        evaluate_window(predictor, &inputs[j], explain, cfg, j, featurewise)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    temporal_from_reports(explain.method, reports, eval_window_len)
}

pub fn temporal_from_reports(
    method: Method,
    reports: Vec<FidelityReport>,
    eval_window_len: usize,
) -> Result<TemporalFidelity> {
    let raw: Vec<(usize, f64)> = reports
        .iter()
        .filter_map(|r| r.r2_loc.reported().map(|v| (r.window, v)))
        .collect();
    let excluded = reports.len() - raw.len();
    let values: Vec<f64> = raw.iter().map(|(_, v)| *v).collect();
    let mut summary = summarize(&values)?;
    summary.excluded_count = excluded;
    let series = rolling_mean(&raw, eval_window_len);
    if series.is_empty() {
        return Err(Error::Size("empty fidelity series".into()));
    }
    let phi_excluded = reports.iter().filter(|r| r.phi.is_none()).count();
    Ok(TemporalFidelity {
        method,
        reports,
        series,
        eval_window_len,
        summary,
        phi_excluded,
        perturbation: FEATUREWISE_DEFINITION.into(),
    })
}

/// Mean per-feature R² across windows, skipping degenerate entries.
pub fn mean_featurewise(t: &TemporalFidelity) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in &t.reports {
        for (name, v) in r.per_feature_r2.iter().flatten() {
            if let Some(v) = v.reported() {
                let slot = acc.entry(name.clone()).or_default();
                slot.0 += v;
                slot.1 += 1;
            }
        }
    }
    acc.into_iter()
        .map(|(k, (s, c))| (k, s / c.max(1) as f64))
        .collect()
}
