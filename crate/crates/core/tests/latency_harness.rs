use std::thread;
use std::time::Duration;

use xai_ran_core::explain::Method;
use xai_ran_core::latency::{measure_cycle, now_ns, Span, StageTimings};
use xai_ran_core::pipeline::Bus;
use xai_ran_core::stats::median;

fn timed(d: Duration) -> Span {
    let start = now_ns();
    thread::sleep(d);
    Span::new(start, now_ns())
}

#[test]
fn stub_stages_add_up_to_their_sleeps() {
    let bus: Bus<usize> = Bus::new();
    bus.register("stub", 4).unwrap();
    let sub = bus.subscribe("stub").unwrap();
    let mut totals = Vec::new();
    for cycle in 0..100 {
        let inference = timed(Duration::from_micros(1000));
        bus.publish("stub", cycle).unwrap();
        thread::sleep(Duration::from_micros(200));
        let delivery = sub.recv().unwrap();
        let xai = timed(Duration::from_micros(2000));
        let rec = measure_cycle(&StageTimings {
            cycle,
            method: Method::Hybrid,
            k_or_m: Some(5),
            inference,
            xai: Some(xai),
            comm: delivery.comm_span(),
            forward_evals: 6,
        })
        .unwrap();
        assert_eq!(rec.t_total, rec.t_inf + rec.t_xai + rec.t_comm);
        totals.push(rec.t_total);
    }
    let m = median(&totals);
    assert!((m - 3.2e-3).abs() <= 0.5e-3, "median t_total {m}");
}
