//! Attribution methods: intrinsic attention, Integrated Gradients,
//! permutation-sampled Shapley values, the Attention+IG hybrid, and an exact
//! Shapley oracle for small inputs.
//!
//! Every attribution is a `W × n` matrix over normalized input cells,
//! expressed as contributions to the prediction in target units.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::exec::{derive_seed, map_indexed, ExecMode};
use crate::model::{ForwardCache, Normalizer, Predictor};

/// Largest input size `shapley_exact` will enumerate.
pub const EXACT_SHAPLEY_MAX_CELLS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    /// No explanation; prediction only.
    None,
    Attention,
    Ig,
    Shap,
    /// Attention profile plus IG attributions from one shared forward pass.
    Hybrid,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Attention => "attention",
            Method::Ig => "ig",
            Method::Shap => "shap",
            Method::Hybrid => "hybrid",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Method::None),
            "attention" | "attn" => Ok(Method::Attention),
            "ig" => Ok(Method::Ig),
            "shap" => Ok(Method::Shap),
            "hybrid" => Ok(Method::Hybrid),
            other => Err(config("method", format!("unknown method `{other}`"))),
        }
    }
}

/// Reference input that attributions are measured against.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum BaselineSpec {
    /// Zero in normalized space, i.e. the per-feature training mean.
    #[default]
    NormalizedZero,
    /// Literal zero in raw units.
    RawZero,
    /// Explicit matrix in normalized space.
    Custom(Array2<f64>),
}

impl BaselineSpec {
    /// Baseline matrix in normalized space.
    pub fn resolve(&self, norm: &Normalizer, shape: (usize, usize)) -> Result<Array2<f64>> {
        match self {
            BaselineSpec::NormalizedZero => Ok(Array2::zeros(shape)),
            BaselineSpec::RawZero => Ok(norm.normalize(&Array2::zeros(shape))),
            BaselineSpec::Custom(m) if m.dim() == shape => Ok(m.clone()),
            BaselineSpec::Custom(m) => Err(Error::Contract(format!(
                "custom baseline shape {:?} differs from input {:?}",
                m.dim(),
                shape
            ))),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            BaselineSpec::NormalizedZero => "normalized_zero",
            BaselineSpec::RawZero => "raw_zero",
            BaselineSpec::Custom(_) => "custom",
        }
    }
}

impl FromStr for BaselineSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalized_zero" | "normalized-zero" | "mean" => Ok(BaselineSpec::NormalizedZero),
            "raw_zero" | "raw-zero" => Ok(BaselineSpec::RawZero),
            other => Err(config("baseline", format!("unknown baseline `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AttributionMeta {
    /// IG steps or SHAP permutations.
    pub k_or_m: Option<usize>,
    pub baseline: String,
    pub seed: Option<u64>,
    pub wallclock_ns: u64,
    /// Model evaluations spent, forward-only or forward+backward.
    pub forward_evals: usize,
    /// Temporal attention profile, for ATTENTION and HYBRID.
    pub attention: Option<Vec<f64>>,
    /// Path integration rule for gradient methods.
    pub integration: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attribution {
    pub e: Array2<f64>,
    pub method: Method,
    pub meta: AttributionMeta,
}

/// JSON wire form of an [`Attribution`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionJson {
    pub method: Method,
    pub k_or_m: Option<usize>,
    pub seed: Option<u64>,
    pub baseline: String,
    pub wallclock_ns: u64,
    pub rows: usize,
    pub cols: usize,
    pub e: Vec<f64>,
    pub attention: Option<Vec<f64>>,
}

impl Attribution {
    pub fn to_json(&self) -> AttributionJson {
        AttributionJson {
            method: self.method,
            k_or_m: self.meta.k_or_m,
            seed: self.meta.seed,
            baseline: self.meta.baseline.clone(),
            wallclock_ns: self.meta.wallclock_ns,
            rows: self.e.nrows(),
            cols: self.e.ncols(),
            e: self.e.iter().copied().collect(),
            attention: self.meta.attention.clone(),
        }
    }

    pub fn from_json(j: &AttributionJson) -> Result<Self> {
        let e = Array2::from_shape_vec((j.rows, j.cols), j.e.clone())
            .map_err(|err| Error::Contract(err.to_string()))?;
        Ok(Self {
            e,
            method: j.method,
            meta: AttributionMeta {
                k_or_m: j.k_or_m,
                baseline: j.baseline.clone(),
                seed: j.seed,
                wallclock_ns: j.wallclock_ns,
                attention: j.attention.clone(),
                ..AttributionMeta::default()
            },
        })
    }

    /// Sum over all cells.
    pub fn total(&self) -> f64 {
        self.e.sum()
    }

    /// Per-timestep sums.
    pub fn row_sums(&self) -> Vec<f64> {
        self.e.rows().into_iter().map(|r| r.sum()).collect()
    }
}

fn elapsed_ns(start: Instant) -> u64 {
    start.elapsed().as_nanos() as u64
}

/// Lift the attention weights of a completed forward pass to a `W × n`
/// matrix, spreading `a_t` evenly across features.
pub fn explain_attention(cache: &ForwardCache) -> Attribution {
    let start = Instant::now();
    let n = cache.input.ncols();
    let w = cache.attention.len();
    let share = 1.0 / n as f64;
    let e = Array2::from_shape_fn((w, n), |(t, _)| cache.attention[t] * share);
    Attribution {
        e,
        method: Method::Attention,
        meta: AttributionMeta {
            baseline: "none".into(),
            attention: Some(cache.attention.to_vec()),
            wallclock_ns: elapsed_ns(start),
            ..AttributionMeta::default()
        },
    }
}

/// Midpoint-rule Integrated Gradients matrix.
pub fn integrated_gradients(
    predictor: &Predictor,
    x: &Array2<f64>,
    baseline: &Array2<f64>,
    k: usize,
) -> Result<Array2<f64>> {
    if k < 1 {
        return Err(config("k", "IG needs at least one step"));
    }
    if baseline.dim() != x.dim() {
        return Err(Error::Contract("baseline shape differs from input".into()));
    }
    let delta = x - baseline;
    let mut grad_sum = Array2::zeros(x.dim());
    for j in 1..=k {
        let alpha = (j as f64 - 0.5) / k as f64;
        let point = baseline + &(&delta * alpha);
        let (_, g) = predictor.gradient(&point)?;
        grad_sum += &g;
    }
    Ok(delta * grad_sum / k as f64)
}

fn ig_meta(k: usize, baseline: &BaselineSpec) -> AttributionMeta {
    AttributionMeta {
        k_or_m: Some(k),
        baseline: baseline.id().into(),
        integration: Some("midpoint".into()),
        ..AttributionMeta::default()
    }
}

/// Standalone Integrated Gradients: runs its own forward pass on `x` for the
/// prediction, then `k` gradient evaluations along the path.
pub fn explain_ig(
    predictor: &Predictor,
    x: &Array2<f64>,
    baseline: &BaselineSpec,
    k: usize,
) -> Result<Attribution> {
    let start = Instant::now();
    if k < 1 {
        return Err(config("k", "IG needs at least one step"));
    }
    let b = baseline.resolve(&predictor.norm, x.dim())?;
    let _cache = predictor.forward_cache(x)?;
    let e = integrated_gradients(predictor, x, &b, k)?;
    let mut meta = ig_meta(k, baseline);
    meta.forward_evals = k + 1;
    meta.wallclock_ns = elapsed_ns(start);
    Ok(Attribution {
        e,
        method: Method::Ig,
        meta,
    })
}

/// Attention + IG. Reuses the forward pass that produced `cache` for the
/// prediction and the attention profile; only the `k` path gradients are new.
pub fn explain_hybrid(
    predictor: &Predictor,
    cache: &ForwardCache,
    baseline: &BaselineSpec,
    k: usize,
) -> Result<Attribution> {
    let start = Instant::now();
    let x = &cache.input;
    let b = baseline.resolve(&predictor.norm, x.dim())?;
    let e = integrated_gradients(predictor, x, &b, k)?;
    let mut meta = ig_meta(k, baseline);
    meta.forward_evals = k;
    meta.attention = Some(cache.attention.to_vec());
    meta.wallclock_ns = elapsed_ns(start);
    Ok(Attribution {
        e,
        method: Method::Hybrid,
        meta,
    })
}

/// Sampled Shapley estimate together with per-cell standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapEstimate {
    pub attribution: Attribution,
    /// Standard error of each cell's mean credit; zero when `m == 1`.
    pub std_err: Array2<f64>,
}

/// Marginal credits along one permutation of the cells.
fn permutation_credits(
    predictor: &Predictor,
    x: &Array2<f64>,
    baseline: &Array2<f64>,
    f_base: f64,
    seed: u64,
) -> Result<Array2<f64>> {
    let (w, n) = x.dim();
    let mut order: Vec<usize> = (0..w * n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut current = baseline.clone();
    let mut prev = f_base;
    let mut credit = Array2::zeros((w, n));
    for idx in order {
        let cell = (idx / n, idx % n);
        current[cell] = x[cell];
        let next = predictor.predict(&current)?;
        credit[cell] = next - prev;
        prev = next;
    }
    Ok(credit)
}

/// Monte-Carlo permutation Shapley values over the `W·n` scalar cells.
///
/// Permutation `p` draws from a stream seeded by `(seed, p)`, and credits are
/// reduced in permutation order, so the result does not depend on `mode`.
pub fn explain_shap(
    predictor: &Predictor,
    x: &Array2<f64>,
    baseline: &BaselineSpec,
    m: usize,
    seed: u64,
    mode: ExecMode,
) -> Result<ShapEstimate> {
    let start = Instant::now();
    if m < 1 {
        return Err(config("m", "SHAP needs at least one permutation"));
    }
    let b = baseline.resolve(&predictor.norm, x.dim())?;
    let f_base = predictor.predict(&b)?;
    let credits = map_indexed(m, mode, |p| {
        permutation_credits(predictor, x, &b, f_base, derive_seed(seed, p as u64))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut mean = Array2::zeros(x.dim());
    for c in &credits {
        mean += c;
    }
    mean /= m as f64;
    let mut std_err = Array2::zeros(x.dim());
    if m > 1 {
        for c in &credits {
            std_err += &(c - &mean).mapv(|d| d * d);
        }
        std_err.mapv_inplace(|ss: f64| (ss / (m - 1) as f64 / m as f64).sqrt());
    }
    let d = x.len();
    Ok(ShapEstimate {
        attribution: Attribution {
            e: mean,
            method: Method::Shap,
            meta: AttributionMeta {
                k_or_m: Some(m),
                baseline: baseline.id().into(),
                seed: Some(seed),
                forward_evals: m * d + 1,
                wallclock_ns: elapsed_ns(start),
                ..AttributionMeta::default()
            },
        },
        std_err,
    })
}

/// Exact Shapley values by enumerating all `2^d` coalitions of cells.
pub fn shapley_exact(
    predictor: &Predictor,
    x: &Array2<f64>,
    baseline: &BaselineSpec,
) -> Result<Attribution> {
    let start = Instant::now();
    let (w, n) = x.dim();
    let d = w * n;
    if d > EXACT_SHAPLEY_MAX_CELLS {
        return Err(Error::Size(format!(
            "exact Shapley enumerates 2^{d} coalitions; limit is {EXACT_SHAPLEY_MAX_CELLS} cells"
        )));
    }
    let b = baseline.resolve(&predictor.norm, x.dim())?;
    let n_sets = 1usize << d;
    let mut value = Vec::with_capacity(n_sets);
    for mask in 0..n_sets {
        let mut mixed = b.clone();
        for idx in (0..d).filter(|idx| mask >> idx & 1 == 1) {
            mixed[(idx / n, idx % n)] = x[(idx / n, idx % n)];
        }
        value.push(predictor.predict(&mixed)?);
    }
    // weight(s) = s! (d - s - 1)! / d!
    let fact: Vec<f64> = (0..=d)
        .scan(1.0, |acc, i| {
            if i > 0 {
                *acc *= i as f64;
            }
            Some(*acc)
        })
        .collect();
    let weight: Vec<f64> = (0..d).map(|s| fact[s] * fact[d - s - 1] / fact[d]).collect();

    let mut e = Array2::zeros((w, n));
    for idx in 0..d {
        let bit = 1usize << idx;
        let mut phi = 0.0;
        for mask in (0..n_sets).filter(|m| m & bit == 0) {
            let s = mask.count_ones() as usize;
            phi += weight[s] * (value[mask | bit] - value[mask]);
        }
        e[(idx / n, idx % n)] = phi;
    }
    Ok(Attribution {
        e,
        method: Method::Shap,
        meta: AttributionMeta {
            baseline: baseline.id().into(),
            forward_evals: n_sets,
            wallclock_ns: elapsed_ns(start),
            integration: Some("exact".into()),
            ..AttributionMeta::default()
        },
    })
}

/// Method selection plus its knobs, shared by the evaluation and pipeline
/// drivers.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplainConfig {
    pub method: Method,
    /// IG / hybrid path steps.
    pub k: usize,
    /// SHAP permutations.
    pub m: usize,
    pub baseline: BaselineSpec,
    pub seed: u64,
}

impl ExplainConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            k: 5,
            m: 16,
            baseline: BaselineSpec::NormalizedZero,
            seed: 42,
        }
    }

    /// `k` for gradient methods, `m` for SHAP.
    pub fn k_or_m(&self) -> Option<usize> {
        match self.method {
            Method::Ig | Method::Hybrid => Some(self.k),
            Method::Shap => Some(self.m),
            Method::None | Method::Attention => None,
        }
    }
}

/// Run the configured explainer for one input. `cache` must come from a
/// forward pass on `cache.input`; ATTENTION and HYBRID reuse it, IG and SHAP
/// start from the input alone. `stream` decorrelates SHAP draws across
/// windows. Returns `None` for [`Method::None`].
pub fn explain_with(
    predictor: &Predictor,
    cache: &ForwardCache,
    cfg: &ExplainConfig,
    stream: u64,
    mode: ExecMode,
) -> Result<Option<Attribution>> {
    let x = &cache.input;
    Ok(match cfg.method {
        Method::None => None,
        Method::Attention => Some(explain_attention(cache)),
        Method::Ig => Some(explain_ig(predictor, x, &cfg.baseline, cfg.k)?),
        Method::Hybrid => Some(explain_hybrid(predictor, cache, &cfg.baseline, cfg.k)?),
        Method::Shap => Some(
            explain_shap(predictor, x, &cfg.baseline, cfg.m, cfg.seed ^ stream, mode)?.attribution,
        ),
    })
}
