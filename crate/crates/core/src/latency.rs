//! Latency decomposition per inference cycle: `T_total = T_inf + T_xai + T_comm`.
//!
//! Holds the analytic overhead model for each explanation method, the
//! per-cycle record built from monotonic stage timestamps, budget verdicts,
//! the least-squares calibration of the model against measurements, and the
//! per-method latency table.

use std::fmt::Write as _;
use std::sync::OnceLock;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::explain::Method;
use crate::stats::median;

/// Nanoseconds on a process-wide monotonic clock.
pub fn now_ns() -> u64 {
    static EPOCH: OnceLock<Instant> = OnceLock::new();
    EPOCH.get_or_init(Instant::now).elapsed().as_nanos() as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModelParams {
    /// Mean single-inference time, seconds.
    pub t_inf: f64,
    pub t_comm: f64,
    /// Attention overhead as a fraction of `t_inf`.
    pub alpha_attn: f64,
    /// Cost of one IG step as a fraction of `t_inf`.
    pub beta_ig: f64,
    /// Effective parallelism dividing the SHAP passes.
    pub p_shap: f64,
    /// Forward evaluations per SHAP permutation (the number of input cells).
    pub shap_passes_per_sample: usize,
}

impl Default for LatencyModelParams {
    fn default() -> Self {
        Self {
            t_inf: 5.2e-3,
            t_comm: 0.2e-3,
            alpha_attn: 0.1,
            beta_ig: 0.1,
            p_shap: 1.0,
            shap_passes_per_sample: 25,
        }
    }
}

impl LatencyModelParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("t_inf", self.t_inf),
            ("t_comm", self.t_comm),
            ("alpha_attn", self.alpha_attn),
            ("beta_ig", self.beta_ig),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config(name, "must be finite and non-negative"));
            }
        }
        if !(self.p_shap > 0.0 && self.p_shap.is_finite()) {
            return Err(config("p_shap", "must be positive"));
        }
        Ok(())
    }

    /// Per-cycle IG overhead as a multiple of `t_inf`: `γ = k·β_ig`.
    pub fn gamma(&self, k: usize) -> f64 {
        k as f64 * self.beta_ig
    }
}

/// Predicted explanation overhead in seconds.
pub fn predict_overhead(
    method: Method,
    k_or_m: usize,
    params: &LatencyModelParams,
) -> Result<f64> {
    params.validate()?;
    Ok(match method {
        Method::None => 0.0,
        Method::Attention => params.alpha_attn * params.t_inf,
        Method::Ig | Method::Hybrid => params.gamma(k_or_m) * params.t_inf,
        Method::Shap => {
            k_or_m as f64 * params.shap_passes_per_sample as f64 / params.p_shap * params.t_inf
        }
    })
}

/// A `[start, end]` interval on the [`now_ns`] clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start_ns: u64,
    pub end_ns: u64,
}

impl Span {
    pub fn new(start_ns: u64, end_ns: u64) -> Self {
        Self { start_ns, end_ns }
    }

    fn seconds(&self, stage: &str) -> Result<f64> {
        self.end_ns
            .checked_sub(self.start_ns)
            .map(|d| d as f64 * 1e-9)
            .ok_or_else(|| Error::Measurement(format!("{stage} clock went backwards")))
    }
}

/// Raw stage timestamps for one cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub cycle: usize,
    pub method: Method,
    pub k_or_m: Option<usize>,
    pub inference: Span,
    /// Absent for [`Method::None`].
    pub xai: Option<Span>,
    /// Bus publish → receive.
    pub comm: Span,
    pub forward_evals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub cycle: usize,
    pub method: Method,
    pub k_or_m: Option<usize>,
    pub t_inf: f64,
    pub t_xai: f64,
    pub t_comm: f64,
    pub t_total: f64,
    pub forward_evals: usize,
    pub within_budget: bool,
}

/// Build a record from stage timestamps. `within_budget` is left `true`;
/// [`LatencyRecord::apply_budget`] sets it.
pub fn measure_cycle(timings: &StageTimings) -> Result<LatencyRecord> {
    let t_inf = timings.inference.seconds("inference")?;
    let t_xai = match (timings.method, timings.xai) {
        (Method::None, _) | (_, None) => 0.0,
        (_, Some(span)) => span.seconds("explanation")?,
    };
    let t_comm = timings.comm.seconds("bus")?;
    Ok(LatencyRecord {
        cycle: timings.cycle,
        method: timings.method,
        k_or_m: timings.k_or_m,
        t_inf,
        t_xai,
        t_comm,
        t_total: t_inf + t_xai + t_comm,
        forward_evals: timings.forward_evals,
        within_budget: true,
    })
}

impl LatencyRecord {
    pub fn apply_budget(&mut self, budget: &Budget) {
        self.within_budget = matches!(check_budget(self.t_total, budget), Verdict::Ok);
    }

    /// Zero every timing field, for byte-stable logs.
    pub fn canonicalize(&mut self) {
        self.t_inf = 0.0;
        self.t_xai = 0.0;
        self.t_comm = 0.0;
        self.t_total = 0.0;
        self.within_budget = true;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    /// Seconds.
    pub limit: f64,
}

impl Default for Budget {
    fn default() -> Self {
        Self { limit: 10e-3 }
    }
}

impl Budget {
    pub fn from_ms(ms: f64) -> Result<Self> {
        if !(ms > 0.0 && ms.is_finite()) {
            return Err(config("budget", "must be positive"));
        }
        Ok(Self { limit: ms * 1e-3 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Verdict {
    Ok,
    /// Over the limit by this many seconds.
    Exceeded(f64),
}

/// `Ok` iff `t_total <= limit`.
pub fn check_budget(t_total: f64, budget: &Budget) -> Verdict {
    if t_total <= budget.limit {
        Verdict::Ok
    } else {
        Verdict::Exceeded(t_total - budget.limit)
    }
}

/// Result of calibrating the latency model on measured records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyFit {
    pub t_inf: f64,
    pub t_comm: f64,
    pub alpha_attn: Option<f64>,
    pub beta_ig: Option<f64>,
    pub p_shap: Option<f64>,
    /// RMS residual of measured against fitted `t_xai`, per method label.
    pub residual_rms: Vec<(String, f64)>,
    /// Methods that had no records and were not fitted.
    pub missing: Vec<String>,
}

impl LatencyFit {
    /// Fitted values, falling back to `defaults` where a method was missing.
    pub fn params(&self, defaults: &LatencyModelParams) -> LatencyModelParams {
        LatencyModelParams {
            t_inf: self.t_inf,
            t_comm: self.t_comm,
            alpha_attn: self.alpha_attn.unwrap_or(defaults.alpha_attn),
            beta_ig: self.beta_ig.unwrap_or(defaults.beta_ig),
            p_shap: self.p_shap.unwrap_or(defaults.p_shap),
            shap_passes_per_sample: defaults.shap_passes_per_sample,
        }
    }
}

/// Minimum records per fitted method.
pub const MIN_FIT_RECORDS: usize = 30;

/// Least squares of `t_xai ≈ c · x` through the origin; returns `c` and the
/// RMS residual.
fn fit_through_origin(points: &[(f64, f64)]) -> (f64, f64) {
    let sxy: f64 = points.iter().map(|(x, y)| x * y).sum();
    let sxx: f64 = points.iter().map(|(x, _)| x * x).sum();
    let c = sxy / sxx;
    let rss: f64 = points.iter().map(|(x, y)| (y - c * x).powi(2)).sum();
    (c, (rss / points.len() as f64).sqrt())
}

/// Calibrate the overhead model: `t_inf` and `t_comm` are medians over the
/// NONE records; α, β and 1/p are least-squares slopes of measured `t_xai`
/// against the model's regressors.
pub fn fit_model_params(
    records: &[LatencyRecord],
    shap_passes_per_sample: usize,
) -> Result<LatencyFit> {
    let of = |m: Method| -> Vec<&LatencyRecord> { records.iter().filter(|r| r.method == m).collect() };
    let none = of(Method::None);
    if none.len() < MIN_FIT_RECORDS {
        return Err(Error::Size(format!(
            "{} NONE records, need at least {MIN_FIT_RECORDS}",
            none.len()
        )));
    }
    let t_inf = median(&none.iter().map(|r| r.t_inf).collect::<Vec<_>>());
    let t_comm = median(&none.iter().map(|r| r.t_comm).collect::<Vec<_>>());
    if t_inf <= 0.0 {
        return Err(Error::Measurement("median inference time is zero".into()));
    }

    let mut residual_rms = Vec::new();
    let mut missing = Vec::new();
    let mut fit = |label: &str, rs: Vec<&LatencyRecord>, regressor: &dyn Fn(&LatencyRecord) -> Option<f64>| -> Result<Option<f64>> {
        if rs.is_empty() {
            missing.push(label.to_string());
            return Ok(None);
        }
        if rs.len() < MIN_FIT_RECORDS {
            return Err(Error::Size(format!(
                "{} {label} records, need at least {MIN_FIT_RECORDS}",
                rs.len()
            )));
        }
        let points = rs
            .iter()
            .map(|r| {
                regressor(r)
                    .map(|x| (x, r.t_xai))
                    .ok_or_else(|| config("k_or_m", format!("{label} record without k/m")))
            })
            .collect::<Result<Vec<_>>>()?;
        let (c, rms) = fit_through_origin(&points);
        residual_rms.push((label.to_string(), rms));
        Ok(Some(c))
    };

    let alpha_attn = fit("attention", of(Method::Attention), &|_| Some(t_inf))?;
    let mut ig_like = of(Method::Ig);
    ig_like.extend(of(Method::Hybrid));
    let beta_ig = fit("ig", ig_like, &|r| r.k_or_m.map(|k| k as f64 * t_inf))?;
    let inv_p = fit("shap", of(Method::Shap), &|r| {
        r.k_or_m
            .map(|m| (m * shap_passes_per_sample) as f64 * t_inf)
    })?;

    Ok(LatencyFit {
        t_inf,
        t_comm,
        alpha_attn,
        beta_ig,
        p_shap: inv_p.map(|v| 1.0 / v),
        residual_rms,
        missing,
    })
}

/// One row of the per-method latency table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub label: String,
    pub method: Method,
    pub k_or_m: Option<usize>,
    pub cycles: usize,
    /// Means over the measured cycles, seconds.
    pub t_inf: f64,
    pub t_xai: f64,
    pub t_comm: f64,
    pub t_total: f64,
    pub median_t_xai: f64,
    pub forward_evals: usize,
    pub verdict: Verdict,
}

pub fn table_label(method: Method, k_or_m: Option<usize>) -> String {
    match (method, k_or_m) {
        (Method::None, _) => "Non-XAI (Baseline)".into(),
        (Method::Shap, Some(m)) => format!("XAI (SHAP, m={m})"),
        (Method::Attention, _) => "XAI (Attention only)".into(),
        (Method::Hybrid, Some(k)) => format!("Ours (Attention + IG, k={k})"),
        (Method::Ig, Some(k)) => format!("XAI (IG, k={k})"),
        (m, _) => m.to_string(),
    }
}

/// Aggregate the records of one method. If `comm_override` is set, it
/// replaces the measured `t_comm` in the total.
pub fn summarize_records(
    records: &[LatencyRecord],
    budget: &Budget,
    comm_override: Option<f64>,
) -> Result<LatencyRow> {
    let first = records
        .first()
        .ok_or_else(|| Error::Size("no latency records".into()))?;
    let n = records.len() as f64;
    let mean = |f: &dyn Fn(&LatencyRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    let t_inf = mean(&|r| r.t_inf);
    let t_xai = mean(&|r| r.t_xai);
    let t_comm = comm_override.unwrap_or_else(|| mean(&|r| r.t_comm));
    let t_total = t_inf + t_xai + t_comm;
    Ok(LatencyRow {
        label: table_label(first.method, first.k_or_m),
        method: first.method,
        k_or_m: first.k_or_m,
        cycles: records.len(),
        t_inf,
        t_xai,
        t_comm,
        t_total,
        median_t_xai: median(&records.iter().map(|r| r.t_xai).collect::<Vec<_>>()),
        forward_evals: first.forward_evals,
        verdict: check_budget(t_total, budget),
    })
}

fn ms(s: f64) -> String {
    format!("{:.4} ms", s * 1e3)
}

pub fn latency_markdown(rows: &[LatencyRow], budget: &Budget, comm_note: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "| Model | T_inf | T_xai | T_comm | T_total | Forward evals | Budget ({}) |",
        ms(budget.limit)
    );
    let _ = writeln!(s, "|---|---:|---:|---:|---:|---:|---|");
    for r in rows {
        let verdict = match r.verdict {
            Verdict::Ok => "OK".to_string(),
            Verdict::Exceeded(by) => format!("EXCEEDED (+{})", ms(by)),
        };
        let xai = if r.method == Method::None {
            "--".to_string()
        } else {
            ms(r.t_xai)
        };
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} |",
            r.label,
            ms(r.t_inf),
            xai,
            ms(r.t_comm),
            ms(r.t_total),
            r.forward_evals,
            verdict
        );
    }
    let _ = writeln!(
        s,
        "\nMeans over {} measured cycles per row. Compute proxy: forward evaluations and CPU wall-clock. {comm_note}",
        rows.first().map_or(0, |r| r.cycles)
    );
    s
}

pub fn latency_csv(rows: &[LatencyRow]) -> String {
    let mut s = String::from("model,t_inf_ms,t_xai_ms,t_comm_ms,t_total_ms,median_t_xai_ms,forward_evals,within_budget\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.label,
            r.t_inf * 1e3,
            r.t_xai * 1e3,
            r.t_comm * 1e3,
            r.t_total * 1e3,
            r.median_t_xai * 1e3,
            r.forward_evals,
            matches!(r.verdict, Verdict::Ok)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn overhead_examples() {
        let p = LatencyModelParams::default();
        assert!(close(predict_overhead(Method::Attention, 0, &p).unwrap(), 0.52e-3, 1e-12));
        assert!(close(predict_overhead(Method::Hybrid, 5, &p).unwrap(), 2.6e-3, 1e-12));
        assert!(close(p.gamma(5), 0.5, 1e-12));
        assert_eq!(predict_overhead(Method::Ig, 0, &p).unwrap(), 0.0);
        assert_eq!(predict_overhead(Method::None, 7, &p).unwrap(), 0.0);
        assert!(close(
            predict_overhead(Method::Shap, 16, &p).unwrap(),
            16.0 * 25.0 * 5.2e-3,
            1e-12
        ));
    }

    #[test]
    fn predictions_increase_with_k_and_m() {
        let p = LatencyModelParams::default();
        for k in 1..50 {
            assert!(
                predict_overhead(Method::Ig, k + 1, &p).unwrap()
                    > predict_overhead(Method::Ig, k, &p).unwrap()
            );
            assert!(
                predict_overhead(Method::Shap, k + 1, &p).unwrap()
                    > predict_overhead(Method::Shap, k, &p).unwrap()
            );
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let p = LatencyModelParams {
            alpha_attn: -1.0,
            ..LatencyModelParams::default()
        };
        assert!(predict_overhead(Method::Attention, 0, &p).is_err());
    }

    #[test]
    fn budget_verdicts() {
        let b = Budget::default();
        assert_eq!(check_budget(8.1e-3, &b), Verdict::Ok);
        match check_budget(20.4e-3, &b) {
            Verdict::Exceeded(by) => assert!(close(by, 10.4e-3, 1e-12)),
            Verdict::Ok => panic!("20.4 ms must exceed 10 ms"),
        }
        assert_eq!(check_budget(b.limit, &b), Verdict::Ok);
        assert!(Budget::from_ms(0.0).is_err());
    }

    #[test]
    fn measure_cycle_sum_identity_and_none() {
        let t = StageTimings {
            cycle: 3,
            method: Method::None,
            k_or_m: None,
            inference: Span::new(100, 1_100),
            xai: Some(Span::new(1_100, 5_000)),
            comm: Span::new(1_100, 1_300),
            forward_evals: 1,
        };
        let r = measure_cycle(&t).unwrap();
        assert_eq!(r.t_xai, 0.0);
        assert!(close(r.t_total, r.t_inf + r.t_xai + r.t_comm, 1e-9));

        let t = StageTimings {
            method: Method::Hybrid,
            k_or_m: Some(5),
            ..t
        };
        let r = measure_cycle(&t).unwrap();
        assert!(close(r.t_xai, 3.9e-6, 1e-15));
        assert!(close(r.t_total, r.t_inf + r.t_xai + r.t_comm, 1e-9));
    }

    #[test]
    fn backwards_clock_is_measurement_error() {
        let t = StageTimings {
            cycle: 0,
            method: Method::Attention,
            k_or_m: None,
            inference: Span::new(500, 400),
            xai: None,
            comm: Span::new(0, 1),
            forward_evals: 1,
        };
        assert!(matches!(measure_cycle(&t), Err(Error::Measurement(_))));
    }

    fn synthetic(truth: &LatencyModelParams, noise: f64, seed: u64) -> Vec<LatencyRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut jitter = move || 1.0 + noise * rng.random_range(-1.0..1.0);
        let mut out = Vec::new();
        let mut push = |method, k_or_m: Option<usize>, t_xai: f64, t_inf: f64| {
            out.push(LatencyRecord {
                cycle: out.len(),
                method,
                k_or_m,
                t_inf,
                t_xai,
                t_comm: truth.t_comm,
                t_total: t_inf + t_xai + truth.t_comm,
                forward_evals: 1,
                within_budget: true,
            });
        };
        for i in 0..40 {
            push(Method::None, None, 0.0, truth.t_inf * jitter());
            push(
                Method::Attention,
                None,
                predict_overhead(Method::Attention, 0, truth).unwrap() * jitter(),
                truth.t_inf,
            );
            let k = 1 + i % 8;
            push(
                Method::Ig,
                Some(k),
                predict_overhead(Method::Ig, k, truth).unwrap() * jitter(),
                truth.t_inf,
            );
            let m = 4 + 4 * (i % 4);
            push(
                Method::Shap,
                Some(m),
                predict_overhead(Method::Shap, m, truth).unwrap() * jitter(),
                truth.t_inf,
            );
        }
        out
    }

    #[test]
    fn fit_recovers_noiseless_parameters() {
        let truth = LatencyModelParams {
            t_inf: 1.3e-4,
            t_comm: 2e-6,
            alpha_attn: 0.07,
            beta_ig: 0.45,
            p_shap: 3.0,
            shap_passes_per_sample: 25,
        };
        let fit = fit_model_params(&synthetic(&truth, 0.0, 1), 25).unwrap();
        assert!(close(fit.t_inf, truth.t_inf, 1e-6));
        assert!(close(fit.alpha_attn.unwrap(), truth.alpha_attn, 1e-6));
        assert!(close(fit.beta_ig.unwrap(), truth.beta_ig, 1e-6));
        assert!(close(fit.p_shap.unwrap(), truth.p_shap, 1e-6));
    }

    #[test]
    fn fit_tolerates_ten_percent_noise() {
        let truth = LatencyModelParams {
            p_shap: 2.0,
            ..LatencyModelParams::default()
        };
        let fit = fit_model_params(&synthetic(&truth, 0.1, 9), 25).unwrap();
        let rel = |a: f64, b: f64| (a - b).abs() / b;
        assert!(rel(fit.t_inf, truth.t_inf) <= 0.15);
        assert!(rel(fit.alpha_attn.unwrap(), truth.alpha_attn) <= 0.15);
        assert!(rel(fit.beta_ig.unwrap(), truth.beta_ig) <= 0.15);
        assert!(rel(fit.p_shap.unwrap(), truth.p_shap) <= 0.15);
    }

    #[test]
    fn missing_shap_is_flagged_and_short_sets_rejected() {
        let recs: Vec<_> = synthetic(&LatencyModelParams::default(), 0.0, 2)
            .into_iter()
            .filter(|r| r.method != Method::Shap)
            .collect();
        let fit = fit_model_params(&recs, 25).unwrap();
        assert_eq!(fit.p_shap, None);
        assert_eq!(fit.missing, vec!["shap".to_string()]);
        assert!(fit_model_params(&recs[..20], 25).is_err());
        assert!(fit_model_params(&[], 25).is_err());
    }
}
