use ndarray::Array2;

use xai_ran_core::model::{load_checkpoint, save_checkpoint, ModelParams, Normalizer, Predictor};
use xai_ran_core::trace::{generate_trace, read_trace_csv, write_trace_csv, BurstConfig};
use xai_ran_core::Error;

#[test]
fn trace_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    let cfg = BurstConfig {
        length: 300,
        seed: 7,
        ..BurstConfig::default()
    };
    let trace = generate_trace(&cfg).unwrap();
    write_trace_csv(&trace, &path).unwrap();
    let back = read_trace_csv(&path).unwrap();
    // The file stores 9 significant digits; a second pass is a fixed point.
    let again = dir.path().join("again.csv");
    write_trace_csv(&back, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    assert_eq!(back.len(), trace.len());
    for (a, b) in trace.iter().zip(&back) {
        assert_eq!(a.t, b.t);
        assert_eq!(a.mcs, b.mcs);
        assert!((a.th - b.th).abs() <= 1e-8 * a.th.abs().max(1.0));
    }
}

#[test]
fn checkpoint_file_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let norm = Normalizer::fit(
        [Array2::from_shape_fn((5, 5), |(t, i)| (t * 7 + i * 3) as f64 * 0.37)].iter().map(|m| m.view()),
        0,
    );
    let p = Predictor::new(ModelParams::init(5, 16, 99), norm).unwrap();
    save_checkpoint(&p, &path).unwrap();
    let q = load_checkpoint(&path).unwrap();
    assert_eq!(q.params.flat(), p.params.flat());
    assert_eq!(q.norm, p.norm);
    let x = Array2::from_shape_fn((5, 5), |(t, i)| (t as f64 - i as f64) * 0.2);
    assert_eq!(q.predict(&x).unwrap().to_bits(), p.predict(&x).unwrap().to_bits());
}

#[test]
fn missing_checkpoint_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_checkpoint(dir.path().join("none.ckpt")), Err(Error::Io(_))));
}
