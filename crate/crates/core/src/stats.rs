//! Paired method comparison across sliding windows: median difference,
//! circular moving-block bootstrap confidence interval and win rate.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, ExecMode};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
    pub excluded_count: usize,
}

pub fn summarize(series: &[f64]) -> Result<Summary> {
    if series.is_empty() {
        return Err(Error::Size("cannot summarize an empty series".into()));
    }
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(Summary {
        mean,
        std: var.sqrt(),
        min: series.iter().copied().fold(f64::INFINITY, f64::min),
        max: series.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        count: series.len(),
        excluded_count: 0,
    })
}

/// Median of an unsorted slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    median_sorted(&v)
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Linear-interpolation percentile of sorted data, `q` in [0, 1].
pub fn percentile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub block_len: usize,
    pub n_resamples: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            block_len: 10,
            n_resamples: 1000,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub median_delta: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Fraction of windows with a strictly positive difference.
    pub win_rate: f64,
    pub n_windows: usize,
    pub block_len: usize,
    pub n_resamples: usize,
    pub seed: u64,
}

/// One circular moving-block resample of `deltas`.
fn block_resample(deltas: &[f64], block_len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = deltas.len();
    let mut out = Vec::with_capacity(n + block_len);
    while out.len() < n {
        let start = rng.random_range(0..n);
        out.extend((0..block_len).map(|o| deltas[(start + o) % n]));
    }
    out.truncate(n);
    out
}

/// Compare `a` against `b` window by window.
///
/// Resample `r` uses ChaCha stream `r` of `seed`, so the interval is the same
/// whether resamples run in parallel or not.
pub fn paired_delta(
    a: &[f64],
    b: &[f64],
    cfg: &BootstrapConfig,
    mode: ExecMode,
) -> Result<PairedComparison> {
    if a.len() != b.len() {
        return Err(Error::Size(format!(
            "series lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if cfg.block_len == 0 || cfg.n_resamples == 0 {
        return Err(Error::Size("block length and resample count must be positive".into()));
    }
    let n = a.len();
    if n < 2 * cfg.block_len {
        return Err(Error::Size(format!(
            "{n} windows, need at least {}",
            2 * cfg.block_len
        )));
    }
    let deltas: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let median_delta = median(&deltas);
    let wins = deltas.iter().filter(|&&d| d > 0.0).count();

    let mut medians = map_indexed(cfg.n_resamples, mode, |r| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(r as u64);
        median(&block_resample(&deltas, cfg.block_len, &mut rng))
    });
    medians.sort_by(f64::total_cmp);

    Ok(PairedComparison {
        median_delta,
        ci_low: percentile_sorted(&medians, 0.025),
        ci_high: percentile_sorted(&medians, 0.975),
        win_rate: wins as f64 / n as f64,
        n_windows: n,
        block_len: cfg.block_len,
        n_resamples: cfg.n_resamples,
        seed: cfg.seed,
    })
}

/// Keep only the windows where both series have a value.
pub fn align_pairs(a: &[Option<f64>], b: &[Option<f64>]) -> (Vec<f64>, Vec<f64>) {
    a.iter()
        .zip(b)
        .filter_map(|(x, y)| Some(((*x)?, (*y)?)))
        .unzip()
}

/// A labelled row of the paired-comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub comparison: PairedComparison,
}

pub fn comparison_markdown(rows: &[ComparisonRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "| Comparison | Median ΔR²_loc | 95% CI | Win Rate |");
    let _ = writeln!(s, "|---|---|---|---|");
    for r in rows {
        let c = &r.comparison;
        let _ = writeln!(
            s,
            "| {} | {:+.2} | [ {:+.2} , {:+.2} ] | {:.0}% |",
            r.label,
            c.median_delta,
            c.ci_low,
            c.ci_high,
            100.0 * c.win_rate
        );
    }
    if let Some(c) = rows.first().map(|r| &r.comparison) {
        let _ = writeln!(
            s,
            "\nCircular moving-block bootstrap: block length {}, {} resamples, seed {}, {} windows.",
            c.block_len, c.n_resamples, c.seed, c.n_windows
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn series(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identical_series() {
        let a = series(100, 1);
        let c = paired_delta(&a, &a, &BootstrapConfig::default(), ExecMode::Sequential).unwrap();
        assert_eq!(c.median_delta, 0.0);
        assert_eq!(c.win_rate, 0.0);
        assert_eq!((c.ci_low, c.ci_high), (0.0, 0.0));
    }

    #[test]
    fn constant_shift() {
        // Offsets chosen so that a - b is exactly 0.5 in floating point.
        let b: Vec<f64> = (0..100).map(|i| (i % 7) as f64 * 0.25).collect();
        let a: Vec<f64> = b.iter().map(|v| v + 0.5).collect();
        let c = paired_delta(&a, &b, &BootstrapConfig::default(), ExecMode::Sequential).unwrap();
        assert_eq!(c.median_delta, 0.5);
        assert_eq!(c.win_rate, 1.0);
        assert_eq!((c.ci_low, c.ci_high), (0.5, 0.5));
    }

    #[test]
    fn size_errors() {
        let a = series(30, 1);
        assert!(paired_delta(&a, &a[..29], &BootstrapConfig::default(), ExecMode::Sequential).is_err());
        assert!(paired_delta(&a[..19], &a[..19], &BootstrapConfig::default(), ExecMode::Sequential).is_err());
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn summary_values() {
        let s = summarize(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!((s.mean, s.std), (1.0, 0.0));
        let s = summarize(&[0.0, 1.0]).unwrap();
        assert_eq!((s.mean, s.std, s.min, s.max, s.count), (0.5, 0.5, 0.0, 1.0, 2));
    }

    #[test]
    fn bootstrap_modes_agree() {
        let a = series(200, 3);
        let b = series(200, 4);
        let cfg = BootstrapConfig::default();
        assert_eq!(
            paired_delta(&a, &b, &cfg, ExecMode::Sequential).unwrap(),
            paired_delta(&a, &b, &cfg, ExecMode::Parallel).unwrap()
        );
    }

    #[test]
    fn coverage_of_known_shift() {
        let normal = Normal::new(0.4, 0.1).unwrap();
        let zeros = vec![0.0; 500];
        let mut covered = 0;
        for trial in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
            let d: Vec<f64> = (0..500).map(|_| normal.sample(&mut rng)).collect();
            let cfg = BootstrapConfig {
                seed: trial,
                ..BootstrapConfig::default()
            };
            let c = paired_delta(&d, &zeros, &cfg, ExecMode::Parallel).unwrap();
            if c.ci_low <= 0.4 && 0.4 <= c.ci_high {
                covered += 1;
            }
        }
        assert!(covered >= 90, "covered {covered}/100");
    }

    #[test]
    fn ci_narrows_with_more_windows() {
        let normal = Normal::new(0.4, 0.1).unwrap();
        let mut widths = Vec::new();
        for n in [100usize, 200, 400, 800, 1600] {
            let mut w = Vec::new();
            for trial in 0..31u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(trial * 31 + n as u64);
                let d: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
                let cfg = BootstrapConfig {
                    seed: trial,
                    ..BootstrapConfig::default()
                };
                let c = paired_delta(&d, &vec![0.0; n], &cfg, ExecMode::Parallel).unwrap();
                w.push(c.ci_high - c.ci_low);
            }
            widths.push(median(&w));
        }
        assert!(widths.windows(2).all(|p| p[1] <= p[0]), "{widths:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn antisymmetry(seed in 0u64..10_000, n in 20usize..120) {
            let a = series(n, seed);
            let b = series(n, seed + 1);
            let cfg = BootstrapConfig { n_resamples: 50, ..BootstrapConfig::default() };
            let ab = paired_delta(&a, &b, &cfg, ExecMode::Sequential).unwrap();
            let ba = paired_delta(&b, &a, &cfg, ExecMode::Sequential).unwrap();
            prop_assert_eq!(ab.median_delta, -ba.median_delta);
            prop_assert!(ab.win_rate + ba.win_rate <= 1.0);
            prop_assert!(ab.ci_low <= ab.ci_high);
            prop_assert!((0.0..=1.0).contains(&ab.win_rate));
        }

        #[test]
        fn summary_is_order_free(mut v in proptest::collection::vec(-100.0f64..100.0, 1..50), seed in 0u64..1000) {
            let s1 = summarize(&v).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            use rand::seq::SliceRandom;
            v.shuffle(&mut rng);
            let s2 = summarize(&v).unwrap();
            prop_assert!((s1.mean - s2.mean).abs() < 1e-12);
            prop_assert!((s1.std - s2.std).abs() < 1e-12);
            prop_assert_eq!(s1.min, s2.min);
            prop_assert_eq!(s1.max, s2.max);
            prop_assert_eq!(s1.count, s2.count);
        }
    }

    #[test]
    fn ties_count_as_losses() {
        let a = vec![1.0; 20];
        let mut b = vec![1.0; 20];
        b[0] = 0.0;
        let c = paired_delta(&a, &b, &BootstrapConfig::default(), ExecMode::Sequential).unwrap();
        assert_eq!(c.win_rate, 1.0 / 20.0);
        let rev = paired_delta(&b, &a, &BootstrapConfig::default(), ExecMode::Sequential).unwrap();
        assert_eq!(rev.win_rate, 0.0);
    }
}
