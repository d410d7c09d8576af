use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use xai_ran_core::explain::Method;

#[derive(Parser, Debug)]
#[command(name = "xai-ran", version)]
#[command(about = "Explainable throughput prediction for a near-RT RIC xApp loop")]
pub struct Cli {
    /// Directory every input and output path is resolved against
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic bursty KPM trace
    GenTrace(GenTraceArgs),
    /// Train the attention predictor on a trace
    Train(TrainArgs),
    /// Run the predictor/explainer pipeline and log every cycle
    Run(RunArgs),
    /// Sliding-window fidelity of one explanation method
    Evaluate(EvaluateArgs),
    /// Paired bootstrap comparison of methods
    Compare(CompareArgs),
    /// Measure per-cycle latency for each method
    LatencyTable(LatencyArgs),
    /// Assemble fidelity and latency tables, end to end or from run directories
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SeedArg {
    /// Seed; XAI_RAN_SEED overrides the default
    #[arg(long, env = "XAI_RAN_SEED", default_value_t = 42)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct TraceShape {
    /// Samples in the trace
    #[arg(long, default_value_t = 2000)]
    pub length: usize,
    /// Burst cycle length in samples
    #[arg(long, default_value_t = 20)]
    pub period: usize,
    /// Fraction of each cycle spent at the high level
    #[arg(long, default_value_t = 0.5)]
    pub duty: f64,
    /// High throughput level, Mbps
    #[arg(long, default_value_t = 100.0)]
    pub th_high: f64,
    /// Low throughput level, Mbps
    #[arg(long, default_value_t = 10.0)]
    pub th_low: f64,
    /// Noise scale relative to the level range
    #[arg(long, default_value_t = 0.05)]
    pub noise_std: f64,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct GenTraceArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub shape: TraceShape,
    #[command(flatten)]
    #[serde(flatten)]
    pub seed: SeedArg,
    #[arg(long, default_value = "trace.csv")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct TrainArgs {
    #[arg(long, default_value = "trace.csv")]
    pub trace: PathBuf,
    /// Timesteps per input window
    #[arg(long, default_value_t = 5)]
    pub window: usize,
    /// Steps ahead to predict
    #[arg(long, default_value_t = 1)]
    pub horizon: usize,
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.8)]
    pub train_frac: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub seed: SeedArg,
    #[arg(long, default_value = "model.ckpt")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct Inputs {
    #[arg(long, default_value = "trace.csv")]
    pub trace: PathBuf,
    #[arg(long, default_value = "model.ckpt")]
    pub model: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ExplainArgs {
    /// IG / hybrid integration steps
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// SHAP permutations
    #[arg(long, default_value_t = 16)]
    pub m: usize,
    /// normalized-zero or raw-zero
    #[arg(long, default_value = "normalized-zero")]
    pub baseline: String,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct NeighborhoodArgs {
    /// Perturbations per window for local R²
    #[arg(long, default_value_t = 64)]
    pub n_samples: usize,
    /// Std of the Gaussian perturbations in normalized units
    #[arg(long, default_value_t = 0.25)]
    pub perturb_std: f64,
    /// Rolling-mean length applied to the R² series
    #[arg(long, default_value_t = 1)]
    pub eval_window_len: usize,
    /// Disable the data-parallel path
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct RunArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub inputs: Inputs,
    #[arg(long, default_value = "hybrid")]
    pub method: Method,
    #[command(flatten)]
    #[serde(flatten)]
    pub explain: ExplainArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub seed: SeedArg,
    /// Per-cycle latency budget, ms
    #[arg(long, default_value_t = 10.0)]
    pub budget_ms: f64,
    /// Score every explanation with local R² and Φ
    #[arg(long)]
    pub online_fidelity: bool,
    /// Run both stages on the calling thread
    #[arg(long)]
    pub single_threaded: bool,
    /// Stop after this many cycles
    #[arg(long)]
    pub cycles: Option<usize>,
    #[arg(long, default_value_t = 5)]
    pub window: usize,
    /// Zero all timing fields in the log
    #[arg(long)]
    pub canonical: bool,
    #[arg(long, default_value = "log.jsonl")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct EvaluateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub inputs: Inputs,
    #[arg(long, default_value = "hybrid")]
    pub method: Method,
    #[command(flatten)]
    #[serde(flatten)]
    pub explain: ExplainArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub neighborhood: NeighborhoodArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub seed: SeedArg,
    /// Also score each feature column separately
    #[arg(long)]
    pub featurewise: bool,
    #[arg(long, default_value_t = 5)]
    pub window: usize,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct CompareArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub inputs: Inputs,
    /// First method is compared against each of the others
    #[arg(long, value_delimiter = ',', default_value = "hybrid,shap,attention")]
    pub methods: Vec<Method>,
    #[command(flatten)]
    #[serde(flatten)]
    pub explain: ExplainArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub neighborhood: NeighborhoodArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub seed: SeedArg,
    #[arg(long, default_value_t = 10)]
    pub block_len: usize,
    #[arg(long, default_value_t = 1000)]
    pub n_resamples: usize,
    #[arg(long, default_value_t = 5)]
    pub window: usize,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct LatencyArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub inputs: Inputs,
    #[arg(long, value_delimiter = ',', default_value = "none,attention,hybrid,shap")]
    pub methods: Vec<Method>,
    #[command(flatten)]
    #[serde(flatten)]
    pub explain: ExplainArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub seed: SeedArg,
    /// Measured cycles per row
    #[arg(long, default_value_t = 100)]
    pub cycles: usize,
    /// Discarded cycles before measuring
    #[arg(long, default_value_t = 10)]
    pub warmup: usize,
    #[arg(long, default_value_t = 10.0)]
    pub budget_ms: f64,
    /// Replace measured T_comm with this constant, ms
    #[arg(long)]
    pub comm_ms: Option<f64>,
    #[arg(long, default_value_t = 5)]
    pub window: usize,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ReportArgs {
    /// Run directories to assemble; without it the full study runs in --out-dir
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub from: Vec<PathBuf>,
    /// Allow runs whose traces used different seeds
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub seed: SeedArg,
    /// Training epochs for the end-to-end study
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    /// Latency cycles per row for the end-to-end study
    #[arg(long, default_value_t = 100)]
    pub cycles: usize,
}
