use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use xai_ran_core::explain::{BaselineSpec, ExplainConfig, Method};
use xai_ran_core::fidelity::{
    mean_featurewise, temporal_fidelity, NeighborhoodConfig, TemporalFidelity,
};
use xai_ran_core::latency::{
    fit_model_params, latency_csv, latency_markdown, predict_overhead, Budget, LatencyModelParams,
    LatencyRecord, LatencyRow, Verdict,
};
use xai_ran_core::model::{load_checkpoint, save_checkpoint, train, Predictor, TrainConfig};
use xai_ran_core::pipeline::{measure_latency_row, run_pipeline, PipelineOptions};
use xai_ran_core::stats::{align_pairs, comparison_markdown, median, paired_delta, BootstrapConfig, ComparisonRow};
use xai_ran_core::trace::{generate_trace, read_trace_csv, write_trace_csv, BurstConfig, KpmSample};
use xai_ran_core::ExecMode;

use crate::args::*;
use crate::output::{read_config, trace_seed, RunDir};

fn load_inputs(dir: &RunDir, inputs: &Inputs) -> Result<(Vec<KpmSample>, Predictor)> {
    let trace_path = dir.path(&inputs.trace);
    let trace = read_trace_csv(&trace_path)
        .with_context(|| format!("reading trace {}", trace_path.display()))?;
    let model_path = dir.path(&inputs.model);
    let predictor = load_checkpoint(&model_path)
        .with_context(|| format!("loading model {}", model_path.display()))?;
    Ok((trace, predictor))
}

fn explain_config(method: Method, a: &ExplainArgs, seed: u64) -> Result<ExplainConfig> {
    Ok(ExplainConfig {
        method,
        k: a.k,
        m: a.m,
        baseline: a.baseline.parse::<BaselineSpec>()?,
        seed,
    })
}

fn neighborhood(a: &NeighborhoodArgs, seed: u64) -> NeighborhoodConfig {
    NeighborhoodConfig {
        n_samples: a.n_samples,
        perturb_std: a.perturb_std,
        seed,
    }
}

fn exec_mode(sequential: bool) -> ExecMode {
    if sequential {
        ExecMode::Sequential
    } else {
        ExecMode::Parallel
    }
}

fn run_tag(cfg: &ExplainConfig) -> String {
    match cfg.k_or_m() {
        Some(k) if cfg.method == Method::Shap => format!("{}_m{k}", cfg.method),
        Some(k) => format!("{}_k{k}", cfg.method),
        None => cfg.method.to_string(),
    }
}

fn display_name(m: Method) -> &'static str {
    match m {
        Method::Hybrid => "Ours",
        Method::Shap => "SHAP",
        Method::Attention => "Attention",
        Method::Ig => "IG",
        Method::None => "None",
    }
}

pub fn gen_trace(dir: &RunDir, a: &GenTraceArgs) -> Result<()> {
    let cfg = BurstConfig {
        period: a.shape.period,
        duty: a.shape.duty,
        th_high: a.shape.th_high,
        th_low: a.shape.th_low,
        noise_std: a.shape.noise_std,
        length: a.shape.length,
        seed: a.seed.seed,
    };
    let trace = generate_trace(&cfg)?;
    let path = dir.path(&a.out);
    write_trace_csv(&trace, &path)?;
    dir.record_config("gen-trace", a)?;
    println!("wrote {} samples to {}", trace.len(), path.display());
    Ok(())
}

pub fn train_cmd(dir: &RunDir, a: &TrainArgs) -> Result<Predictor> {
    let trace = read_trace_csv(dir.path(&a.trace))?;
    let cfg = TrainConfig {
        hidden: a.hidden,
        lr: a.lr,
        momentum: 0.9,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed.seed,
        train_frac: a.train_frac,
    };
    let (predictor, report) = train(&trace, a.window, a.horizon, &cfg)?;
    let path = dir.path(&a.out);
    save_checkpoint(&predictor, &path)?;
    dir.write_json("train_report.json", &report)?;
    dir.record_config("train", a)?;
    println!(
        "trained on {} windows, validated on {}: RMSE {:.3} Mbps, R² {:.4}; checkpoint {}",
        report.n_train,
        report.n_val,
        report.val_rmse,
        report.val_r2,
        path.display()
    );
    Ok(predictor)
}

pub fn run(dir: &RunDir, a: &RunArgs) -> Result<()> {
    let (trace, predictor) = load_inputs(dir, &a.inputs)?;
    let mut opts = PipelineOptions::new(explain_config(a.method, &a.explain, a.seed.seed)?);
    opts.budget = Budget::from_ms(a.budget_ms)?;
    opts.online_fidelity = a.online_fidelity.then(|| NeighborhoodConfig {
        seed: a.seed.seed,
        ..NeighborhoodConfig::default()
    });
    opts.single_threaded = a.single_threaded;
    opts.max_cycles = a.cycles;
    opts.window_len = a.window;
    let log = run_pipeline(&trace, &predictor, &opts)?;
    let path = dir.path(&a.out);
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    log.write_jsonl(BufWriter::new(file), a.canonical)?;
    dir.record_config("run", a)?;
    let s = &log.summary;
    println!(
        "{} cycles: {} explained, {} dropped, {} over budget; log {}",
        s.inferences,
        s.explained,
        s.dropped,
        s.budget_violations,
        path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvaluationSummary<'a> {
    method: Method,
    k_or_m: Option<usize>,
    baseline: &'a str,
    windows: usize,
    r2: &'a xai_ran_core::stats::Summary,
    mean_phi: Option<f64>,
    phi_excluded: usize,
    median_completeness_gap: Option<f64>,
    featurewise: Option<std::collections::BTreeMap<String, f64>>,
    featurewise_definition: &'a str,
}

fn evaluation_summary<'a>(tf: &'a TemporalFidelity, cfg: &'a ExplainConfig) -> EvaluationSummary<'a> {
    let phis: Vec<f64> = tf.reports.iter().filter_map(|r| r.phi).collect();
    let gaps: Vec<f64> = tf
        .reports
        .iter()
        .filter_map(|r| r.completeness_gap)
        .filter(|g| g.is_finite())
        .collect();
    let featurewise = tf.reports.iter().any(|r| r.per_feature_r2.is_some());
    EvaluationSummary {
        method: cfg.method,
        k_or_m: cfg.k_or_m(),
        baseline: cfg.baseline.id(),
        windows: tf.reports.len(),
        r2: &tf.summary,
        mean_phi: (!phis.is_empty()).then(|| phis.iter().sum::<f64>() / phis.len() as f64),
        phi_excluded: tf.phi_excluded,
        median_completeness_gap: (!gaps.is_empty()).then(|| median(&gaps)),
        featurewise: featurewise.then(|| mean_featurewise(tf)),
        featurewise_definition: &tf.perturbation,
    }
}

fn series_csv(tf: &TemporalFidelity) -> String {
    let mut s = String::from("window,r2\n");
    for (w, v) in &tf.series {
        let _ = writeln!(s, "{w},{v}");
    }
    s
}

fn write_fidelity(dir: &RunDir, tf: &TemporalFidelity, cfg: &ExplainConfig) -> Result<()> {
    let tag = run_tag(cfg);
    let mut csv = Vec::new();
    tf.write_csv(&mut csv)?;
    dir.write(format!("fidelity_{tag}.csv"), csv)?;
    dir.write(format!("series_{tag}.csv"), series_csv(tf))?;
    dir.write_json(format!("fidelity_{tag}.json"), &evaluation_summary(tf, cfg))?;
    Ok(())
}

pub fn evaluate(dir: &RunDir, a: &EvaluateArgs) -> Result<TemporalFidelity> {
    if a.method == Method::None {
        bail!(xai_ran_core::Error::Config {
            field: "method",
            msg: "evaluate needs an explaining method".into()
        });
    }
    let (trace, predictor) = load_inputs(dir, &a.inputs)?;
    let cfg = explain_config(a.method, &a.explain, a.seed.seed)?;
    let tf = temporal_fidelity(
        &trace,
        a.window,
        &predictor,
        &cfg,
        a.neighborhood.eval_window_len,
        &neighborhood(&a.neighborhood, a.seed.seed),
        a.featurewise,
        exec_mode(a.neighborhood.sequential),
    )?;
    write_fidelity(dir, &tf, &cfg)?;
    dir.record_config(&format!("evaluate-{}", run_tag(&cfg)), a)?;
    let s = evaluation_summary(&tf, &cfg);
    println!(
        "{}: mean R² {:.4} (std {:.4}) over {} windows, {} degenerate; median completeness gap {}",
        run_tag(&cfg),
        tf.summary.mean,
        tf.summary.std,
        tf.summary.count,
        tf.summary.excluded_count,
        s.median_completeness_gap
            .map_or_else(|| "n/a".to_string(), |g| format!("{g:.4}"))
    );
    Ok(tf)
}

#[derive(Serialize)]
struct ComparisonOutput<'a> {
    methods: Vec<Method>,
    mean_r2: Vec<(Method, f64)>,
    rows: &'a [ComparisonRow],
}

pub fn compare(dir: &RunDir, a: &CompareArgs) -> Result<String> {
    if a.methods.len() < 2 {
        bail!(xai_ran_core::Error::Config {
            field: "methods",
            msg: "compare needs at least two methods".into()
        });
    }
    if a.methods.contains(&Method::None) {
        bail!(xai_ran_core::Error::Config {
            field: "methods",
            msg: "none has no fidelity to compare".into()
        });
    }
    let (trace, predictor) = load_inputs(dir, &a.inputs)?;
    let nb = neighborhood(&a.neighborhood, a.seed.seed);
    let mode = exec_mode(a.neighborhood.sequential);
    let mut runs = Vec::with_capacity(a.methods.len());
    for &m in &a.methods {
        let cfg = explain_config(m, &a.explain, a.seed.seed)?;
        let tf = temporal_fidelity(
            &trace,
            a.window,
            &predictor,
            &cfg,
            a.neighborhood.eval_window_len,
            &nb,
            false,
            mode,
        )?;
        write_fidelity(dir, &tf, &cfg)?;
        runs.push((cfg, tf));
    }
    let boot = BootstrapConfig {
        block_len: a.block_len,
        n_resamples: a.n_resamples,
        seed: a.seed.seed,
    };
    let (first_cfg, first) = &runs[0];
    let mut rows = Vec::new();
    for (cfg, other) in &runs[1..] {
        let (x, y) = align_pairs(&first.r2_values(), &other.r2_values());
        rows.push(ComparisonRow {
            label: format!(
                "{} − {}",
                display_name(first_cfg.method),
                display_name(cfg.method)
            ),
            comparison: paired_delta(&x, &y, &boot, mode)?,
        });
    }

    let mut md = String::from("## Fidelity comparison\n\n");
    md.push_str(&comparison_markdown(&rows));
    md.push_str("\n| Method | Mean R²_loc | Std | Degenerate windows |\n|---|---:|---:|---:|\n");
    for (cfg, tf) in &runs {
        let _ = writeln!(
            md,
            "| {} | {:.4} | {:.4} | {} |",
            run_tag(cfg),
            tf.summary.mean,
            tf.summary.std,
            tf.summary.excluded_count
        );
    }
    let _ = writeln!(
        md,
        "\nLocal R² from {} Gaussian perturbations (std {}) per window, baseline {}, floored at −10 for reporting.",
        nb.n_samples,
        nb.perturb_std,
        first_cfg.baseline.id()
    );
    dir.write("comparison.md", &md)?;
    dir.write_json(
        "comparison.json",
        &ComparisonOutput {
            methods: a.methods.clone(),
            mean_r2: runs.iter().map(|(c, t)| (c.method, t.summary.mean)).collect(),
            rows: &rows,
        },
    )?;
    dir.record_config("compare", a)?;
    print!("{md}");
    Ok(md)
}

/// Measured rows and the records behind them.
pub fn measure_latency(
    trace: &[KpmSample],
    predictor: &Predictor,
    a: &LatencyArgs,
) -> Result<(Vec<LatencyRow>, Vec<LatencyRecord>)> {
    let budget = Budget::from_ms(a.budget_ms)?;
    let comm = a.comm_ms.map(|ms| ms * 1e-3);
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for &m in &a.methods {
        let cfg = explain_config(m, &a.explain, a.seed.seed)?;
        let (row, recs) =
            measure_latency_row(trace, predictor, &cfg, a.cycles, a.warmup, &budget, comm)?;
        rows.push(row);
        records.extend(recs);
    }
    Ok((rows, records))
}

fn latency_report(rows: &[LatencyRow], records: &[LatencyRecord], a: &LatencyArgs) -> Result<String> {
    let budget = Budget::from_ms(a.budget_ms)?;
    let comm_note = match a.comm_ms {
        Some(ms) => format!("T_comm is the configured constant {ms} ms, not the measured in-process bus latency."),
        None => "T_comm is the measured in-process bus latency.".to_string(),
    };
    let mut md = String::from("## Latency per inference cycle\n\n");
    md.push_str(&latency_markdown(rows, &budget, &comm_note));

    let shap = rows.iter().find(|r| r.method == Method::Shap);
    if let Some(r) = shap {
        if matches!(r.verdict, Verdict::Ok) {
            let _ = writeln!(
                md,
                "\nSerial SHAP fits the {} ms budget on this machine; only the ordering of T_xai is meaningful here.",
                a.budget_ms
            );
        }
    }

    let reference = LatencyModelParams::default();
    let _ = writeln!(md, "\n### Overhead model check\n");
    let _ = writeln!(md, "| Quantity | Model | Reference measurement |\n|---|---:|---:|");
    let _ = writeln!(
        md,
        "| Attention, t_inf = {} ms, α = {} | {:.2} ms | 0.6 ms |",
        reference.t_inf * 1e3,
        reference.alpha_attn,
        predict_overhead(Method::Attention, 0, &reference)? * 1e3
    );
    let _ = writeln!(
        md,
        "| Attention + IG, k = 5, β = {} (γ = {}) | {:.2} ms | 2.8 ms |",
        reference.beta_ig,
        reference.gamma(5),
        predict_overhead(Method::Hybrid, 5, &reference)? * 1e3
    );

    let present = |m: Method| records.iter().any(|r| r.method == m);
    if present(Method::None) && a.cycles >= xai_ran_core::latency::MIN_FIT_RECORDS {
        let fit = fit_model_params(records, reference.shap_passes_per_sample)?;
        let _ = writeln!(md, "\n### Fitted on this machine\n");
        let _ = writeln!(
            md,
            "t_inf = {:.4} ms, t_comm = {:.4} ms, α = {}, β = {}, p = {}",
            fit.t_inf * 1e3,
            fit.t_comm * 1e3,
            fmt_opt(fit.alpha_attn),
            fmt_opt(fit.beta_ig),
            fmt_opt(fit.p_shap)
        );
        if !fit.missing.is_empty() {
            let _ = writeln!(md, "\nNot fitted (no records): {}", fit.missing.join(", "));
        }
    }
    Ok(md)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

pub fn latency_table(dir: &RunDir, a: &LatencyArgs) -> Result<String> {
    let (trace, predictor) = load_inputs(dir, &a.inputs)?;
    let (rows, records) = measure_latency(&trace, &predictor, a)?;
    let md = latency_report(&rows, &records, a)?;
    dir.write("latency.md", &md)?;
    dir.write("latency.csv", latency_csv(&rows))?;
    let mut jsonl = String::new();
    for r in &records {
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
    }
    dir.write("latency_records.jsonl", jsonl)?;
    dir.record_config("latency-table", a)?;
    print!("{md}");
    Ok(md)
}

/// Relative completeness gap of IG at `k = 5` and `k = 512` on evenly spaced
/// windows.
fn completeness_study(trace: &[KpmSample], predictor: &Predictor, seed: u64, window: usize) -> Result<String> {
    use xai_ran_core::explain::explain_ig;
    use xai_ran_core::trace::window_iter;
    let windows = window_iter(trace, window, 1)?;
    let n = windows.len().min(100);
    let stride = (windows.len() / n.max(1)).max(1);
    let cfg = ExplainConfig {
        seed,
        ..ExplainConfig::new(Method::Ig)
    };
    let mut md = String::from("## IG completeness\n\n| k | Median relative gap |\n|---:|---:|\n");
    for k in [5usize, 512] {
        let mut gaps = Vec::with_capacity(n);
        for (w, _) in windows.iter().step_by(stride).take(n) {
            let x = predictor.norm.normalize(&w.to_matrix());
            let b = cfg.baseline.resolve(&predictor.norm, x.dim())?;
            let span = predictor.predict(&x)? - predictor.predict(&b)?;
            let e = explain_ig(predictor, &x, &cfg.baseline, k)?;
            if span.abs() > 1e-9 {
                gaps.push((e.total() - span).abs() / span.abs());
            }
        }
        let _ = writeln!(md, "| {k} | {:.3e} |", median(&gaps));
    }
    let _ = writeln!(md, "\nOver {n} windows, midpoint rule, baseline {}.", cfg.baseline.id());
    Ok(md)
}

pub fn report(dir: &RunDir, a: &ReportArgs) -> Result<()> {
    let body = if a.from.is_empty() {
        end_to_end(dir, a)?
    } else {
        assemble(dir, a)?
    };
    dir.write("report.md", &body)?;
    println!("wrote {}", dir.path("report.md").display());
    Ok(())
}

fn end_to_end(dir: &RunDir, a: &ReportArgs) -> Result<String> {
    let seed = SeedArg { seed: a.seed.seed };
    gen_trace(
        dir,
        &GenTraceArgs {
            shape: TraceShape {
                length: 2000,
                period: 20,
                duty: 0.5,
                th_high: 100.0,
                th_low: 10.0,
                noise_std: 0.05,
            },
            seed: seed.clone(),
            out: "trace.csv".into(),
        },
    )?;
    let predictor = train_cmd(
        dir,
        &TrainArgs {
            trace: "trace.csv".into(),
            window: 5,
            horizon: 1,
            hidden: 16,
            lr: 0.01,
            epochs: a.epochs,
            batch_size: 32,
            train_frac: 0.8,
            seed: seed.clone(),
            out: "model.ckpt".into(),
        },
    )?;
    let inputs = Inputs {
        trace: "trace.csv".into(),
        model: "model.ckpt".into(),
    };
    let explain = ExplainArgs {
        k: 5,
        m: 16,
        baseline: "normalized-zero".into(),
    };
    let nb = NeighborhoodArgs {
        n_samples: 64,
        perturb_std: 0.25,
        eval_window_len: 1,
        sequential: false,
    };
    let comparison = compare(
        dir,
        &CompareArgs {
            inputs: inputs.clone(),
            methods: vec![Method::Hybrid, Method::Shap, Method::Attention],
            explain: explain.clone(),
            neighborhood: nb.clone(),
            seed: seed.clone(),
            block_len: 10,
            n_resamples: 1000,
            window: 5,
        },
    )?;
    let evaluate_with = |method, featurewise| {
        evaluate(
            dir,
            &EvaluateArgs {
                inputs: inputs.clone(),
                method,
                explain: explain.clone(),
                neighborhood: nb.clone(),
                seed: seed.clone(),
                featurewise,
                window: 5,
            },
        )
    };
    let ig = evaluate_with(Method::Ig, false)?;
    let attention = evaluate_with(Method::Attention, false)?;
    let featurewise = evaluate_with(Method::Hybrid, true)?;
    let trace = read_trace_csv(dir.path("trace.csv"))?;
    let completeness = completeness_study(&trace, &predictor, a.seed.seed, 5)?;
    let latency = latency_table(
        dir,
        &LatencyArgs {
            inputs,
            methods: vec![Method::None, Method::Attention, Method::Hybrid, Method::Shap],
            explain,
            seed,
            cycles: a.cycles,
            warmup: 10,
            budget_ms: 10.0,
            comm_ms: None,
            window: 5,
        },
    )?;
    dir.record_config("report", a)?;

    let mut md = format!("# XAI-RAN report\n\nTrace seed {}, default burst trace.\n\n", a.seed.seed);
    md.push_str(&comparison);
    let _ = writeln!(
        md,
        "\n## IG and attention series\n\n| Method | Mean R²_loc | Std |\n|---|---:|---:|\n| ig_k5 | {:.4} | {:.4} |\n| attention | {:.4} | {:.4} |\n\nPer-window values: series_ig_k5.csv, series_attention.csv.",
        ig.summary.mean, ig.summary.std, attention.summary.mean, attention.summary.std
    );
    md.push_str("\n## Per-feature fidelity (hybrid)\n\n| Feature | Mean R² |\n|---|---:|\n");
    for (name, v) in mean_featurewise(&featurewise) {
        let _ = writeln!(md, "| {name} | {v:.4} |");
    }
    let _ = writeln!(md, "\n{}.\n", featurewise.perturbation);
    md.push_str(&completeness);
    md.push('\n');
    md.push_str(&latency);
    md.push_str("\nSeries behind the fidelity plots: series_<method>.csv (window, R²).\n");
    Ok(md)
}

fn assemble(dir: &RunDir, a: &ReportArgs) -> Result<String> {
    let mut seeds = Vec::new();
    for d in &a.from {
        let cfg = read_config(d)?
            .with_context(|| format!("{} has no config.json", d.display()))?;
        seeds.push((d, trace_seed(&cfg)));
    }
    let first = seeds[0].1;
    if let Some((d, s)) = seeds.iter().find(|(_, s)| *s != first) {
        if !a.force {
            bail!(
                "{} used trace seed {:?}, {} used {:?}; pass --force to combine them",
                seeds[0].0.display(),
                first,
                d.display(),
                s
            );
        }
    }
    let mut md = String::from("# XAI-RAN report\n");
    for (d, s) in &seeds {
        let _ = writeln!(
            md,
            "\n# Run {} (trace seed {})\n",
            d.display(),
            s.map_or_else(|| "unknown".into(), |s| s.to_string())
        );
        for part in ["comparison.md", "latency.md"] {
            let p = Path::new(d).join(part);
            if p.exists() {
                md.push_str(&std::fs::read_to_string(&p)?);
                md.push('\n');
            }
        }
    }
    dir.record_config("report", a)?;
    Ok(md)
}
