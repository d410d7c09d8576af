//! Synthetic periodic-burst KPM traces, CSV I/O and sliding windows.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};

/// Number of KPM features per timestep.
pub const N_FEATURES: usize = 5;
/// Feature names in column order.
pub const FEATURE_NAMES: [&str; N_FEATURES] = ["th", "bler", "mcs", "rp", "sinr"];
/// Default history length fed to the predictor.
pub const DEFAULT_WINDOW: usize = 5;

pub const MCS_MAX: u8 = 28;

const SINR_BASE_DB: f64 = 15.0;
const SINR_SLOPE_DB: f64 = 10.0;
const RP_MIN_DBM: f64 = -110.0;
const RP_MAX_DBM: f64 = -70.0;

// Nominal feature ranges; noise_std is a fraction of these.
const SINR_RANGE_DB: f64 = 10.0;
const BLER_RANGE: f64 = 0.5;
const RP_RANGE_DB: f64 = RP_MAX_DBM - RP_MIN_DBM;

/// One timestep of the five KPM features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KpmSample {
    pub t: u64,
    /// Downlink throughput, Mbps.
    pub th: f64,
    /// Block error rate in [0, 1].
    pub bler: f64,
    /// MCS index in 0..=28.
    pub mcs: u8,
    /// Received reference power, dBm.
    pub rp: f64,
    /// SINR, dB.
    pub sinr: f64,
}

impl KpmSample {
    /// Feature vector in [`FEATURE_NAMES`] order.
    pub fn features(&self) -> [f64; N_FEATURES] {
        [self.th, self.bler, f64::from(self.mcs), self.rp, self.sinr]
    }

    /// Returns the name of the first violated invariant, if any.
    pub fn violation(&self) -> Option<&'static str> {
        if !(self.th.is_finite() && self.th >= 0.0) {
            Some("th")
        } else if !(0.0..=1.0).contains(&self.bler) {
            Some("bler")
        } else if self.mcs > MCS_MAX {
            Some("mcs")
        } else if !self.rp.is_finite() {
            Some("rp")
        } else if !self.sinr.is_finite() {
            Some("sinr")
        } else {
            None
        }
    }
}

/// A run of `W` consecutive samples.
#[derive(Debug, Clone, PartialEq)]
pub struct KpmWindow {
    samples: Vec<KpmSample>,
}

impl KpmWindow {
    pub fn new(samples: Vec<KpmSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Contract("window must not be empty".into()));
        }
        if samples.windows(2).any(|p| p[1].t != p[0].t + 1) {
            return Err(Error::Contract(
                "window timesteps must be strictly consecutive".into(),
            ));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[KpmSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Raw feature matrix, `W × N_FEATURES`.
    pub fn to_matrix(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.samples.len(), N_FEATURES));
        for (t, s) in self.samples.iter().enumerate() {
            for (i, v) in s.features().into_iter().enumerate() {
                m[[t, i]] = v;
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BurstConfig {
    /// Steps per burst cycle.
    pub period: usize,
    /// Fraction of the period spent at high load.
    pub duty: f64,
    pub th_high: f64,
    pub th_low: f64,
    /// Per-feature Gaussian noise, as a fraction of each feature's range.
    pub noise_std: f64,
    pub length: usize,
    pub seed: u64,
}

impl Default for BurstConfig {
    fn default() -> Self {
        Self {
            period: 20,
            duty: 0.5,
            th_high: 100.0,
            th_low: 10.0,
            noise_std: 0.05,
            length: 2000,
            seed: 42,
        }
    }
}

impl BurstConfig {
    pub fn validate(&self) -> Result<()> {
        if self.period < 2 {
            return Err(config("period", "must be at least 2"));
        }
        if !(self.duty > 0.0 && self.duty < 1.0) {
            return Err(config("duty", "must lie strictly between 0 and 1"));
        }
        if !(self.th_low >= 0.0 && self.th_low.is_finite()) {
            return Err(config("th_low", "must be finite and non-negative"));
        }
        if !(self.th_high > self.th_low && self.th_high.is_finite()) {
            return Err(config("th_high", "must be finite and exceed th_low"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(config("noise_std", "must be finite and non-negative"));
        }
        Ok(())
    }

    /// Number of high-load steps at the start of each period.
    fn high_steps(&self) -> usize {
        ((self.duty * self.period as f64).round() as usize).clamp(1, self.period - 1)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Generate a periodic-burst trace.
///
/// Throughput is a square wave (`th_high` for the first `duty·period` steps of
/// each cycle, `th_low` afterwards) plus noise. SINR rises linearly with
/// throughput, BLER falls with SINR, MCS tracks rounded SINR and RP is a
/// bounded random walk.
pub fn generate_trace(cfg: &BurstConfig) -> Result<Vec<KpmSample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let th_range = cfg.th_high - cfg.th_low;
    let th_mid = 0.5 * (cfg.th_high + cfg.th_low);
    let high = cfg.high_steps();
    let mut rp = 0.5 * (RP_MIN_DBM + RP_MAX_DBM);

    let mut out = Vec::with_capacity(cfg.length);
    for t in 0..cfg.length {
        // One draw per feature per step regardless of noise level keeps the
        // stream layout fixed.
        let n_th = unit.sample(&mut rng);
        let n_sinr = unit.sample(&mut rng);
        let n_bler = unit.sample(&mut rng);
        let n_rp = unit.sample(&mut rng);

        let base = if t % cfg.period < high {
            cfg.th_high
        } else {
            cfg.th_low
        };
        let th = (base + cfg.noise_std * th_range * n_th).max(0.0);
        let sinr = SINR_BASE_DB
            + SINR_SLOPE_DB * (th - th_mid) / th_range
            + cfg.noise_std * SINR_RANGE_DB * n_sinr;
        let bler = (0.5 * sigmoid(-(sinr - 10.0) / 3.0) + cfg.noise_std * BLER_RANGE * n_bler)
            .clamp(0.0, 1.0);
        let mcs = sinr.round().clamp(0.0, f64::from(MCS_MAX)) as u8;
        rp += cfg.noise_std * RP_RANGE_DB * n_rp;
        // Reflect at the walls, then clamp in case a step overshoots both.
        if rp > RP_MAX_DBM {
            rp = 2.0 * RP_MAX_DBM - rp;
        }
        if rp < RP_MIN_DBM {
            rp = 2.0 * RP_MIN_DBM - rp;
        }
        rp = rp.clamp(RP_MIN_DBM, RP_MAX_DBM);

        out.push(KpmSample {
            t: t as u64,
            th,
            bler,
            mcs,
            rp,
            sinr,
        });
    }
    Ok(out)
}

/// Sliding `(window, next throughput)` pairs.
///
/// Pair `j` covers samples `j..j+w` and targets `th[j + w - 1 + horizon]`.
/// Returns an empty vector if the trace is too short.
pub fn window_iter(
    trace: &[KpmSample],
    w: usize,
    horizon: usize,
) -> Result<Vec<(KpmWindow, f64)>> {
    if w == 0 {
        return Err(config("window", "must be at least 1"));
    }
    if horizon == 0 {
        return Err(config("horizon", "must be at least 1"));
    }
    if trace.len() < w + horizon {
        return Ok(Vec::new());
    }
    (0..=trace.len() - w - horizon)
        .map(|j| {
            let window = KpmWindow::new(trace[j..j + w].to_vec())?;
            Ok((window, trace[j + w - 1 + horizon].th))
        })
        .collect()
}

/// Round to 9 significant digits and print the shortest representation.
fn fmt_sig9(x: f64) -> String {
    let rounded: f64 = format!("{x:.8e}").parse().expect("float formatting");
    format!("{rounded}")
}

pub const CSV_HEADER: [&str; 6] = ["t", "th", "bler", "mcs", "rp", "sinr"];

pub fn write_trace<W: Write>(trace: &[KpmSample], writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for s in trace {
        w.write_record([
            s.t.to_string(),
            fmt_sig9(s.th),
            fmt_sig9(s.bler),
            s.mcs.to_string(),
            fmt_sig9(s.rp),
            fmt_sig9(s.sinr),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace_csv(trace: &[KpmSample], path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_trace(trace, std::io::BufWriter::new(file))
}

pub fn read_trace<R: Read>(reader: R) -> Result<Vec<KpmSample>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header `{}`", CSV_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let parse_err = |field: &str| Error::Parse {
            line,
            msg: format!("cannot parse `{field}`"),
        };
        let float = |idx: usize| -> Result<f64> {
            rec[idx]
                .trim()
                .parse::<f64>()
                .map_err(|_| parse_err(CSV_HEADER[idx]))
        };
        let t: u64 = rec[0].trim().parse().map_err(|_| parse_err("t"))?;
        let mcs_raw: i64 = rec[3].trim().parse().map_err(|_| parse_err("mcs"))?;
        if !(0..=i64::from(MCS_MAX)).contains(&mcs_raw) {
            return Err(Error::Validation { field: "mcs", line });
        }
        let sample = KpmSample {
            t,
            th: float(1)?,
            bler: float(2)?,
            mcs: mcs_raw as u8,
            rp: float(4)?,
            sinr: float(5)?,
        };
        if let Some(field) = sample.violation() {
            return Err(Error::Validation { field, line });
        }
        out.push(sample);
    }
    Ok(out)
}

pub fn read_trace_csv(path: impl AsRef<Path>) -> Result<Vec<KpmSample>> {
    let file = std::fs::File::open(path)?;
    read_trace(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_noise(period: usize, length: usize) -> BurstConfig {
        BurstConfig {
            period,
            duty: 0.5,
            th_high: 100.0,
            th_low: 10.0,
            noise_std: 0.0,
            length,
            seed: 1,
        }
    }

    #[test]
    fn zero_noise_square_wave() {
        let tr = generate_trace(&zero_noise(20, 40)).unwrap();
        let th: Vec<f64> = tr.iter().map(|s| s.th).collect();
        let mut expected = vec![100.0; 10];
        expected.extend([10.0; 10]);
        expected.extend([100.0; 10]);
        expected.extend([10.0; 10]);
        assert_eq!(th, expected);
    }

    #[test]
    fn forty_step_period_gives_twenty_high_then_twenty_low() {
        let tr = generate_trace(&zero_noise(40, 40)).unwrap();
        assert!(tr[..20].iter().all(|s| s.th == 100.0));
        assert!(tr[20..].iter().all(|s| s.th == 10.0));
    }

    #[test]
    fn zero_noise_is_periodic() {
        let tr = generate_trace(&zero_noise(20, 200)).unwrap();
        for t in 20..200 {
            let (a, b) = (tr[t], tr[t - 20]);
            assert_eq!(a.features(), b.features());
        }
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        let cfg = BurstConfig {
            seed: 7,
            length: 40,
            ..BurstConfig::default()
        };
        assert_eq!(generate_trace(&cfg).unwrap(), generate_trace(&cfg).unwrap());
    }

    #[test]
    fn bad_config_names_field() {
        let cfg = BurstConfig {
            duty: 1.0,
            ..BurstConfig::default()
        };
        match generate_trace(&cfg) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "duty"),
            other => panic!("unexpected {other:?}"),
        }
        let cfg = BurstConfig {
            period: 1,
            ..BurstConfig::default()
        };
        assert!(matches!(
            generate_trace(&cfg),
            Err(Error::Config { field: "period", .. })
        ));
        let cfg = BurstConfig {
            th_high: 5.0,
            ..BurstConfig::default()
        };
        assert!(matches!(
            generate_trace(&cfg),
            Err(Error::Config { field: "th_high", .. })
        ));
    }

    #[test]
    fn window_counts() {
        let tr = generate_trace(&zero_noise(20, 10)).unwrap();
        assert_eq!(window_iter(&tr, 5, 1).unwrap().len(), 5);
        let six = &tr[..6];
        let pairs = window_iter(six, 5, 1).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].1, six[5].th);
        assert!(window_iter(&tr[..5], 5, 1).unwrap().is_empty());
    }

    #[test]
    fn window_targets_follow_horizon() {
        let cfg = BurstConfig {
            length: 30,
            ..BurstConfig::default()
        };
        let tr = generate_trace(&cfg).unwrap();
        let pairs = window_iter(&tr, 5, 3).unwrap();
        assert_eq!(pairs.len(), 30 - 5 - 3 + 1);
        for (j, (w, y)) in pairs.iter().enumerate() {
            assert_eq!(w.samples()[0].t, j as u64);
            assert_eq!(*y, tr[j + 5 - 1 + 3].th);
        }
    }

    #[test]
    fn csv_round_trip() {
        let tr = generate_trace(&BurstConfig {
            length: 100,
            ..BurstConfig::default()
        })
        .unwrap();
        let mut buf = Vec::new();
        write_trace(&tr, &mut buf).unwrap();
        let back = read_trace(buf.as_slice()).unwrap();
        assert_eq!(back.len(), tr.len());
        for (a, b) in tr.iter().zip(&back) {
            assert_eq!(a.t, b.t);
            assert_eq!(a.mcs, b.mcs);
            for (x, y) in a.features().iter().zip(b.features()) {
                assert!((x - y).abs() <= 1e-8 * x.abs().max(1.0));
            }
        }
        // Serialized form is a fixed point.
        let mut again = Vec::new();
        write_trace(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn header_only_is_empty() {
        let tr = read_trace("t,th,bler,mcs,rp,sinr\n".as_bytes()).unwrap();
        assert!(tr.is_empty());
    }

    #[test]
    fn bler_out_of_range_reports_line() {
        let csv = "t,th,bler,mcs,rp,sinr\n0,10,0.1,12,-90,12\n1,10,1.5,12,-90,12\n";
        let err = read_trace(csv.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Validation { field: "bler", line: 3 }));
        assert_eq!(err.to_string(), "bler out of range, line 3");
    }

    #[test]
    fn malformed_row_reports_line() {
        let csv = "t,th,bler,mcs,rp,sinr\n0,abc,0.1,12,-90,12\n";
        match read_trace(csv.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let short = "t,th,bler,mcs,rp,sinr\n0,1,0.1\n";
        assert!(matches!(
            read_trace(short.as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn wrong_header_rejected() {
        let csv = "t,th,bler,mcs,sinr,rp\n";
        assert!(matches!(
            read_trace(csv.as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn window_rejects_gaps() {
        let tr = generate_trace(&zero_noise(20, 10)).unwrap();
        let gap = vec![tr[0], tr[2]];
        assert!(KpmWindow::new(gap).is_err());
    }
}
