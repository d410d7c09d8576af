//! Attention-based throughput predictor with hand-derived gradients.
//!
//! Per timestep `t` the normalized input row `x_t` is embedded and squashed,
//! `u_t = act(E x_t + b)`, scored by `s_t = v · u_t`, and the scores are
//! softmax-normalized into attention weights `a`. The context `c = Σ a_t u_t`
//! feeds a linear head `y = w · c + b_out`. `y` lives in normalized target
//! units; [`Predictor`] converts it to Mbps.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::trace::{window_iter, KpmSample, KpmWindow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    /// Linear embedding; with zero attention scorer the whole model is affine.
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative(self, u: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - u * u,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `h × n` embedding.
    pub embed_w: Array2<f64>,
    pub embed_b: Array1<f64>,
    /// Additive attention scorer.
    pub attn_v: Array1<f64>,
    pub out_w: Array1<f64>,
    pub out_b: f64,
    pub activation: Activation,
}

impl ModelParams {
    pub fn zeros(n_features: usize, hidden: usize) -> Self {
        Self {
            embed_w: Array2::zeros((hidden, n_features)),
            embed_b: Array1::zeros(hidden),
            attn_v: Array1::zeros(hidden),
            out_w: Array1::zeros(hidden),
            out_b: 0.0,
            activation: Activation::Tanh,
        }
    }

    /// Uniform(±0.5/√fan_in) weights, zero biases.
    pub fn init(n_features: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(n_features, hidden);
        let lim_e = 0.5 / (n_features as f64).sqrt();
        let lim_h = 0.5 / (hidden as f64).sqrt();
        p.embed_w.mapv_inplace(|_| rng.random_range(-lim_e..=lim_e));
        p.attn_v.mapv_inplace(|_| rng.random_range(-lim_h..=lim_h));
        p.out_w.mapv_inplace(|_| rng.random_range(-lim_h..=lim_h));
        p
    }

    pub fn n_features(&self) -> usize {
        self.embed_w.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.embed_w.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden();
        if self.embed_b.len() != h || self.attn_v.len() != h || self.out_w.len() != h {
            return Err(Error::Contract(format!(
                "parameter dimensions inconsistent with hidden size {h}"
            )));
        }
        if !self.flat().iter().all(|v| v.is_finite()) {
            return Err(Error::Contract("non-finite parameter".into()));
        }
        Ok(())
    }

    /// All parameters in a fixed order: embed_w (row-major), embed_b, attn_v, out_w, out_b.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        v.extend(self.embed_w.iter());
        v.extend(self.embed_b.iter());
        v.extend(self.attn_v.iter());
        v.extend(self.out_w.iter());
        v.push(self.out_b);
        v
    }

    pub fn n_params(&self) -> usize {
        self.hidden() * (self.n_features() + 3) + 1
    }

    pub fn set_flat(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.n_params());
        let (h, n) = (self.hidden(), self.n_features());
        let mut it = v.iter().copied();
        self.embed_w = Array2::from_shape_fn((h, n), |_| it.next().unwrap());
        self.embed_b = Array1::from_shape_fn(h, |_| it.next().unwrap());
        self.attn_v = Array1::from_shape_fn(h, |_| it.next().unwrap());
        self.out_w = Array1::from_shape_fn(h, |_| it.next().unwrap());
        self.out_b = it.next().unwrap();
    }
}

/// Per-feature z-score statistics; `target` names the feature whose
/// statistics also scale the prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
    pub target: usize,
}

impl Normalizer {
    pub fn identity(n_features: usize) -> Self {
        Self {
            mean: Array1::zeros(n_features),
            std: Array1::ones(n_features),
            target: 0,
        }
    }

    /// Fit on the rows of the given raw windows. Constant features get std 1.
    pub fn fit<'a>(windows: impl IntoIterator<Item = ArrayView2<'a, f64>>, target: usize) -> Self {
        let rows: Vec<Array1<f64>> = windows
            .into_iter()
            .flat_map(|w| w.rows().into_iter().map(|r| r.to_owned()).collect::<Vec<_>>())
            .collect();
        let n = rows.first().map_or(0, |r| r.len());
        let count = rows.len().max(1) as f64;
        let mean = rows.iter().fold(Array1::zeros(n), |acc, r| acc + r) / count;
        let var = rows
            .iter()
            .fold(Array1::zeros(n), |acc, r| acc + (r - &mean).mapv(|d| d * d))
            / count;
        let std = var.mapv(|v: f64| {
            let sd = v.sqrt();
            if sd > 1e-12 && sd.is_finite() {
                sd
            } else {
                1.0
            }
        });
        Self { mean, std, target }
    }

    pub fn n_features(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, raw: &Array2<f64>) -> Array2<f64> {
        let mut x = raw.clone();
        for mut row in x.rows_mut() {
            row -= &self.mean;
            row /= &self.std;
        }
        x
    }

    pub fn denormalize(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut raw = x.clone();
        for mut row in raw.rows_mut() {
            row *= &self.std;
            row += &self.mean;
        }
        raw
    }

    pub fn target_scale(&self) -> f64 {
        self.std[self.target]
    }

    pub fn to_target_units(&self, y_norm: f64) -> f64 {
        y_norm * self.std[self.target] + self.mean[self.target]
    }

    pub fn from_target_units(&self, y: f64) -> f64 {
        (y - self.mean[self.target]) / self.std[self.target]
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    /// Normalized input, `W × n`.
    pub input: Array2<f64>,
    /// Pre-activations, `W × h`.
    pub z: Array2<f64>,
    /// Activations, `W × h`.
    pub u: Array2<f64>,
    pub scores: Array1<f64>,
    pub attention: Array1<f64>,
    pub context: Array1<f64>,
    /// Head output in normalized target units.
    pub output: f64,
}

/// Forward pass on a normalized input matrix.
pub fn forward_normalized(params: &ModelParams, input: &Array2<f64>) -> Result<ForwardCache> {
    if input.ncols() != params.n_features() || input.nrows() == 0 {
        return Err(Error::Contract(format!(
            "input shape {:?} incompatible with {} features",
            input.shape(),
            params.n_features()
        )));
    }
    let z = input.dot(&params.embed_w.t()) + &params.embed_b;
    let u = z.mapv(|v| params.activation.apply(v));
    let scores = u.dot(&params.attn_v);
    let max = scores.fold(f64::NEG_INFINITY, |m, &s| m.max(s));
    let exp = scores.mapv(|s| (s - max).exp());
    let attention = &exp / exp.sum();
    let context = attention.dot(&u);
    let output = params.out_w.dot(&context) + params.out_b;
    Ok(ForwardCache {
        input: input.clone(),
        z,
        u,
        scores,
        attention,
        context,
        output,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// `∂y/∂x̃`, `W × n`.
    pub input: Array2<f64>,
    /// `∂y/∂θ`, shaped like the parameters.
    pub params: ModelParams,
}

/// Exact gradients of the head output `y` with respect to the normalized
/// input and the parameters.
pub fn backward(params: &ModelParams, cache: &ForwardCache) -> Result<Gradients> {
    let (w, h) = cache.u.dim();
    if h != params.hidden() || cache.input.ncols() != params.n_features() || cache.attention.len() != w {
        return Err(Error::Contract("cache does not match parameters".into()));
    }
    // q_t = w_out · u_t; y - b_out = Σ a_t q_t
    let q = cache.u.dot(&params.out_w);
    let qbar = cache.attention.dot(&q);
    let d_scores = &cache.attention * &(q - qbar);

    // ∂y/∂u_t = a_t w_out + (∂y/∂s_t) v
    let mut d_u = Array2::zeros((w, h));
    for t in 0..w {
        let mut row = d_u.row_mut(t);
        row.scaled_add(cache.attention[t], &params.out_w);
        row.scaled_add(d_scores[t], &params.attn_v);
    }
    let d_z = &d_u * &cache.u.mapv(|v| params.activation.derivative(v));

    let input = d_z.dot(&params.embed_w);
    let grads = ModelParams {
        embed_w: d_z.t().dot(&cache.input),
        embed_b: d_z.sum_axis(Axis(0)),
        attn_v: d_scores.dot(&cache.u),
        out_w: cache.context.clone(),
        out_b: 1.0,
        activation: params.activation,
    };
    Ok(Gradients {
        input,
        params: grads,
    })
}

/// A trained model together with its normalizer. Predictions are in target
/// units (Mbps for throughput); gradients are with respect to normalized
/// inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    pub params: ModelParams,
    pub norm: Normalizer,
}

impl Predictor {
    pub fn new(params: ModelParams, norm: Normalizer) -> Result<Self> {
        params.validate()?;
        if norm.n_features() != params.n_features() || norm.target >= norm.n_features() {
            return Err(Error::Contract("normalizer does not match model".into()));
        }
        Ok(Self { params, norm })
    }

    pub fn n_features(&self) -> usize {
        self.params.n_features()
    }

    /// Forward pass from a raw window.
    pub fn forward(&self, window: &KpmWindow) -> Result<(f64, ForwardCache)> {
        let x = self.norm.normalize(&window.to_matrix());
        let cache = forward_normalized(&self.params, &x)?;
        Ok((self.norm.to_target_units(cache.output), cache))
    }

    /// Forward pass on a normalized input; returns the cache.
    pub fn forward_cache(&self, x: &Array2<f64>) -> Result<ForwardCache> {
        forward_normalized(&self.params, x)
    }

    /// Prediction in target units for a normalized input.
    pub fn predict(&self, x: &Array2<f64>) -> Result<f64> {
        Ok(self.norm.to_target_units(forward_normalized(&self.params, x)?.output))
    }

    /// Prediction and `∂ŷ/∂x̃`, both in target units.
    pub fn gradient(&self, x: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
        let cache = forward_normalized(&self.params, x)?;
        let g = backward(&self.params, &cache)?;
        let scale = self.norm.target_scale();
        Ok((self.norm.to_target_units(cache.output), g.input * scale))
    }

    /// Prediction with every cell outside `keep` replaced by `baseline`.
    pub fn forward_masked(
        &self,
        x: &Array2<f64>,
        keep: &[(usize, usize)],
        baseline: &Array2<f64>,
    ) -> Result<f64> {
        if baseline.dim() != x.dim() {
            return Err(Error::Contract("baseline shape differs from input".into()));
        }
        let (w, n) = x.dim();
        let mut mixed = baseline.clone();
        for &(t, i) in keep {
            if t >= w || i >= n {
                return Err(Error::Contract(format!("keep index ({t}, {i}) out of range")));
            }
            mixed[[t, i]] = x[[t, i]];
        }
        self.predict(&mixed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden: usize,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub train_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            lr: 0.01,
            momentum: 0.9,
            epochs: 200,
            batch_size: 32,
            seed: 42,
            train_frac: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// MSE in normalized target units.
    pub epochs: Vec<EpochStats>,
    pub n_train: usize,
    pub n_val: usize,
    /// Validation RMSE in target units.
    pub val_rmse: f64,
    /// Coefficient of determination of predictions against validation targets.
    pub val_r2: f64,
}

fn mse(params: &ModelParams, xs: &[Array2<f64>], ys: &[f64]) -> Result<f64> {
    let mut acc = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let d = forward_normalized(params, x)?.output - y;
        acc += d * d;
    }
    Ok(acc / xs.len().max(1) as f64)
}

/// Train on raw input matrices and raw targets. The split is chronological:
/// the first `train_frac` of the samples train, the rest validate.
pub fn train_matrices(
    inputs: &[Array2<f64>],
    targets: &[f64],
    target_feature: usize,
    cfg: &TrainConfig,
) -> Result<(Predictor, TrainReport)> {
    if inputs.len() != targets.len() {
        return Err(Error::Contract("inputs and targets differ in length".into()));
    }
    if !(cfg.train_frac > 0.0 && cfg.train_frac < 1.0) {
        return Err(config("train_frac", "must lie strictly between 0 and 1"));
    }
    if cfg.hidden == 0 {
        return Err(config("hidden", "must be at least 1"));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(config("lr", "must be positive"));
    }
    let n_train = ((inputs.len() as f64) * cfg.train_frac).round() as usize;
    if n_train < 1 || n_train >= inputs.len() {
        return Err(Error::Size(format!(
            "{} samples cannot be split into train/validation at {}",
            inputs.len(),
            cfg.train_frac
        )));
    }
    let n_features = inputs[0].ncols();
    let norm = Normalizer::fit(inputs[..n_train].iter().map(|m| m.view()), target_feature);
    let xs: Vec<Array2<f64>> = inputs.iter().map(|m| norm.normalize(m)).collect();
    let ys: Vec<f64> = targets.iter().map(|&y| norm.from_target_units(y)).collect();
    let (x_tr, x_val) = xs.split_at(n_train);
    let (y_tr, y_val) = ys.split_at(n_train);

    let mut params = ModelParams::init(n_features, cfg.hidden, cfg.seed);
    let mut velocity = vec![0.0; params.n_params()];
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let batch = cfg.batch_size.max(1);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mut grad = vec![0.0; params.n_params()];
            for &j in chunk {
                let cache = forward_normalized(&params, &x_tr[j])?;
                let g = backward(&params, &cache)?;
                let coef = 2.0 * (cache.output - y_tr[j]) / chunk.len() as f64;
                for (acc, v) in grad.iter_mut().zip(g.params.flat()) {
                    *acc += coef * v;
                }
            }
            let mut flat = params.flat();
            for ((p, v), g) in flat.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = cfg.momentum * *v - cfg.lr * g;
                *p += *v;
            }
            params.set_flat(&flat);
        }
        let train_mse = mse(&params, x_tr, y_tr)?;
        let val_mse = mse(&params, x_val, y_val)?;
        if !train_mse.is_finite() || !val_mse.is_finite() {
            return Err(Error::Divergence { epoch, lr: cfg.lr });
        }
        history.push(EpochStats {
            epoch,
            train_mse,
            val_mse,
        });
    }

    let predictor = Predictor::new(params, norm)?;
    let raw_val = &targets[n_train..];
    let preds: Vec<f64> = x_val
        .iter()
        .map(|x| predictor.predict(x))
        .collect::<Result<_>>()?;
    let mean = raw_val.iter().sum::<f64>() / raw_val.len() as f64;
    let ss_res: f64 = preds.iter().zip(raw_val).map(|(p, y)| (p - y).powi(2)).sum();
    let ss_tot: f64 = raw_val.iter().map(|y| (y - mean).powi(2)).sum();
    let val_r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { f64::NAN };
    let report = TrainReport {
        epochs: history,
        n_train,
        n_val: inputs.len() - n_train,
        val_rmse: (ss_res / raw_val.len() as f64).sqrt(),
        val_r2,
    };
    Ok((predictor, report))
}

/// Train a throughput predictor on a KPM trace.
pub fn train(
    trace: &[KpmSample],
    window: usize,
    horizon: usize,
    cfg: &TrainConfig,
) -> Result<(Predictor, TrainReport)> {
    let pairs = window_iter(trace, window, horizon)?;
    if pairs.len() < 2 {
        return Err(Error::Size(format!(
            "trace of {} samples yields too few windows to train",
            trace.len()
        )));
    }
    let (inputs, targets): (Vec<_>, Vec<_>) =
        pairs.iter().map(|(w, y)| (w.to_matrix(), *y)).unzip();
    train_matrices(&inputs, &targets, 0, cfg)
}

const CHECKPOINT_MAGIC: &str = "xai-ran-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

fn push_values<'a>(out: &mut String, key: &str, vals: impl IntoIterator<Item = &'a f64>) {
    out.push_str(key);
    for v in vals {
        let _ = write!(out, " {v:.16e}");
    }
    out.push('\n');
}

/// Serialize to the versioned key/value checkpoint format.
pub fn checkpoint_to_string(p: &Predictor) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}");
    let _ = writeln!(s, "n_features {}", p.params.n_features());
    let _ = writeln!(s, "hidden {}", p.params.hidden());
    let act = match p.params.activation {
        Activation::Tanh => "tanh",
        Activation::Identity => "identity",
    };
    let _ = writeln!(s, "activation {act}");
    let _ = writeln!(s, "target {}", p.norm.target);
    push_values(&mut s, "embed_w", p.params.embed_w.iter());
    push_values(&mut s, "embed_b", p.params.embed_b.iter());
    push_values(&mut s, "attn_v", p.params.attn_v.iter());
    push_values(&mut s, "out_w", p.params.out_w.iter());
    push_values(&mut s, "out_b", [p.params.out_b].iter());
    push_values(&mut s, "norm_mean", p.norm.mean.iter());
    push_values(&mut s, "norm_std", p.norm.std.iter());
    s
}

pub fn checkpoint_from_str(text: &str) -> Result<Predictor> {
    let bad = |msg: String| Error::Checkpoint(msg);
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty checkpoint".into()))?;
    if header != format!("{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}") {
        return Err(bad(format!("unsupported header `{header}`")));
    }
    let mut fields = std::collections::HashMap::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap_or_default().to_string();
        let vals: Vec<&str> = parts.collect();
        fields.insert(key, vals);
    }
    let scalar = |k: &str| -> Result<usize> {
        fields
            .get(k)
            .and_then(|v| v.first())
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(format!("missing or invalid `{k}`")))
    };
    let floats = |k: &str, len: usize| -> Result<Vec<f64>> {
        let raw = fields.get(k).ok_or_else(|| bad(format!("missing `{k}`")))?;
        if raw.len() != len {
            return Err(bad(format!("`{k}` has {} values, expected {len}", raw.len())));
        }
        raw.iter()
            .map(|v| v.parse::<f64>().map_err(|_| bad(format!("bad number in `{k}`"))))
            .collect()
    };
    let n = scalar("n_features")?;
    let h = scalar("hidden")?;
    let target = scalar("target")?;
    let activation = match fields.get("activation").and_then(|v| v.first()).copied() {
        Some("tanh") => Activation::Tanh,
        Some("identity") => Activation::Identity,
        other => return Err(bad(format!("unknown activation {other:?}"))),
    };
    let params = ModelParams {
        embed_w: Array2::from_shape_vec((h, n), floats("embed_w", h * n)?)
            .map_err(|e| bad(e.to_string()))?,
        embed_b: Array1::from(floats("embed_b", h)?),
        attn_v: Array1::from(floats("attn_v", h)?),
        out_w: Array1::from(floats("out_w", h)?),
        out_b: floats("out_b", 1)?[0],
        activation,
    };
    let norm = Normalizer {
        mean: Array1::from(floats("norm_mean", n)?),
        std: Array1::from(floats("norm_std", n)?),
        target,
    };
    Predictor::new(params, norm)
}

pub fn save_checkpoint(p: &Predictor, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(p))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Predictor> {
    checkpoint_from_str(&std::fs::read_to_string(path)?)
}
