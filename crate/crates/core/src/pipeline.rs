//! In-process simulation of the predictor → explainer xApp loop.
//!
//! The predictor stage runs the model on each window, stores the window and
//! its forward cache in a bounded shared data layer and publishes an
//! [`InferenceEvent`] on the message bus. The explainer stage subscribes,
//! fetches the window, explains it, times the cycle and checks the budget.

use std::collections::{HashMap, VecDeque};
use std::io::Write;
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;

use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::exec::ExecMode;
use crate::explain::{explain_with, AttributionJson, ExplainConfig, Method};
use crate::fidelity::{evaluate_window, FidelityReport, NeighborhoodConfig};
use crate::latency::{
    measure_cycle, now_ns, summarize_records, Budget, LatencyRecord, LatencyRow, Span,
    StageTimings,
};
use crate::model::{ForwardCache, Predictor};
use crate::trace::{window_iter, KpmSample, KpmWindow};

pub const DEFAULT_TOPIC_CAPACITY: usize = 1024;
pub const DEFAULT_QUEUE_CAPACITY: usize = 64;
pub const DEFAULT_SDL_CAPACITY: usize = 256;
pub const INFERENCE_TOPIC: &str = "tp.inference";

/// A message as received, with its bus timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivery<T> {
    pub payload: T,
    pub seq: u64,
    pub published_ns: u64,
    pub received_ns: u64,
}

impl<T> Delivery<T> {
    pub fn comm_span(&self) -> Span {
        Span::new(self.published_ns, self.received_ns)
    }
}

struct TopicState<T> {
    buf: VecDeque<(T, u64, u64)>,
    next_seq: u64,
    dropped: u64,
    closed: bool,
}

struct Topic<T> {
    state: Mutex<TopicState<T>>,
    ready: Condvar,
    capacity: usize,
}

/// Topic-based in-order message bus. Each topic is a bounded queue; when it
/// is full the oldest undelivered message is dropped and counted.
pub struct Bus<T> {
    topics: RwLock<HashMap<String, Arc<Topic<T>>>>,
}

impl<T> Default for Bus<T> {
    fn default() -> Self {
        Self {
            topics: RwLock::new(HashMap::new()),
        }
    }
}

impl<T> Bus<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, topic: &str, capacity: usize) -> Result<()> {
        if capacity == 0 {
            return Err(config("capacity", "topic capacity must be positive"));
        }
        self.topics.write().entry(topic.to_string()).or_insert_with(|| {
            Arc::new(Topic {
                state: Mutex::new(TopicState {
                    buf: VecDeque::with_capacity(capacity),
                    next_seq: 0,
                    dropped: 0,
                    closed: false,
                }),
                ready: Condvar::new(),
                capacity,
            })
        });
        Ok(())
    }

    fn topic(&self, name: &str) -> Result<Arc<Topic<T>>> {
        self.topics
            .read()
            .get(name)
            .cloned()
            .ok_or_else(|| config("topic", format!("unknown topic `{name}`")))
    }

    pub fn publish(&self, topic: &str, msg: T) -> Result<u64> {
        let t = self.topic(topic)?;
        let mut st = t.state.lock();
        if st.closed {
            return Err(config("topic", format!("topic `{topic}` is closed")));
        }
        if st.buf.len() == t.capacity {
            st.buf.pop_front();
            st.dropped += 1;
        }
        let seq = st.next_seq;
        st.next_seq += 1;
        st.buf.push_back((msg, seq, now_ns()));
        drop(st);
        t.ready.notify_one();
        Ok(seq)
    }

    pub fn subscribe(&self, topic: &str) -> Result<Subscription<T>> {
        Ok(Subscription {
            topic: self.topic(topic)?,
        })
    }

    /// No further publishes; subscribers drain what is queued and then see
    /// the end of the stream.
    pub fn close(&self, topic: &str) -> Result<()> {
        let t = self.topic(topic)?;
        t.state.lock().closed = true;
        t.ready.notify_all();
        Ok(())
    }

    pub fn dropped(&self, topic: &str) -> Result<u64> {
        Ok(self.topic(topic)?.state.lock().dropped)
    }

    pub fn pending(&self, topic: &str) -> Result<usize> {
        Ok(self.topic(topic)?.state.lock().buf.len())
    }
}

pub struct Subscription<T> {
    topic: Arc<Topic<T>>,
}

impl<T> Subscription<T> {
    fn deliver(entry: (T, u64, u64)) -> Delivery<T> {
        let (payload, seq, published_ns) = entry;
        Delivery {
            payload,
            seq,
            published_ns,
            received_ns: now_ns().max(published_ns),
        }
    }

    /// Block until a message arrives; `None` once the topic is closed and empty.
    pub fn recv(&self) -> Option<Delivery<T>> {
        let mut st = self.topic.state.lock();
        loop {
            if let Some(entry) = st.buf.pop_front() {
                return Some(Self::deliver(entry));
            }
            if st.closed {
                return None;
            }
            self.topic.ready.wait(&mut st);
        }
    }

    pub fn try_recv(&self) -> Option<Delivery<T>> {
        self.topic.state.lock().buf.pop_front().map(Self::deliver)
    }
}

/// Bounded window store; inserting past capacity evicts the oldest entry.
pub struct SharedDataLayer {
    inner: RwLock<SdlInner>,
    capacity: usize,
}

struct SdlInner {
    map: HashMap<u64, Arc<(KpmWindow, ForwardCache)>>,
    order: VecDeque<u64>,
}

impl SharedDataLayer {
    pub fn new(capacity: usize) -> Self {
        Self {
            inner: RwLock::new(SdlInner {
                map: HashMap::with_capacity(capacity),
                order: VecDeque::with_capacity(capacity),
            }),
            capacity: capacity.max(1),
        }
    }

    pub fn insert(&self, id: u64, window: KpmWindow, cache: ForwardCache) {
        let mut inner = self.inner.write();
        if inner.map.insert(id, Arc::new((window, cache))).is_none() {
            inner.order.push_back(id);
        }
        while inner.map.len() > self.capacity {
            if let Some(old) = inner.order.pop_front() {
                inner.map.remove(&old);
            }
        }
    }

    pub fn get(&self, id: u64) -> Option<Arc<(KpmWindow, ForwardCache)>> {
        self.inner.read().map.get(&id).cloned()
    }

    pub fn len(&self) -> usize {
        self.inner.read().map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceEvent {
    pub cycle: usize,
    pub window_id: u64,
    pub prediction: f64,
    pub inference: Span,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationEvent {
    pub cycle: usize,
    pub window_id: u64,
    pub prediction: f64,
    pub attribution: Option<AttributionJson>,
    pub fidelity: Option<FidelityReport>,
    pub latency: LatencyRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub method: Method,
    pub k_or_m: Option<usize>,
    pub inferences: usize,
    pub explained: usize,
    pub dropped: usize,
    /// Cycles whose clock samples went backwards.
    pub discarded_measurements: usize,
    pub budget_limit_s: f64,
    pub budget_violations: usize,
    pub single_threaded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineLog {
    pub events: Vec<ExplanationEvent>,
    pub summary: PipelineSummary,
}

#[derive(Debug, Clone, Serialize)]
struct Footer<'a> {
    summary: &'a PipelineSummary,
}

impl PipelineLog {
    /// JSON lines: one [`ExplanationEvent`] per line, then a summary footer.
    /// `canonical` zeroes every timing-dependent field.
    pub fn write_jsonl<W: Write>(&self, mut out: W, canonical: bool) -> Result<()> {
        for ev in &self.events {
            if canonical {
                let mut ev = ev.clone();
                ev.latency.canonicalize();
                if let Some(a) = ev.attribution.as_mut() {
                    a.wallclock_ns = 0;
                }
                serde_json::to_writer(&mut out, &ev)?;
            } else {
                serde_json::to_writer(&mut out, ev)?;
            }
            out.write_all(b"\n")?;
        }
        let mut summary = self.summary.clone();
        if canonical {
            summary.budget_violations = 0;
        }
        serde_json::to_writer(&mut out, &Footer { summary: &summary })?;
        out.write_all(b"\n")?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    pub explain: ExplainConfig,
    pub budget: Budget,
    /// Score every explanation online with this neighborhood.
    pub online_fidelity: Option<NeighborhoodConfig>,
    pub single_threaded: bool,
    pub window_len: usize,
    /// Explainer backlog bound; overflow drops the oldest event.
    pub queue_capacity: usize,
    pub sdl_capacity: usize,
    /// Stop after this many cycles.
    pub max_cycles: Option<usize>,
}

impl PipelineOptions {
    pub fn new(explain: ExplainConfig) -> Self {
        Self {
            explain,
            budget: Budget::default(),
            online_fidelity: None,
            single_threaded: false,
            window_len: crate::trace::DEFAULT_WINDOW,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            sdl_capacity: DEFAULT_SDL_CAPACITY,
            max_cycles: None,
        }
    }
}

struct Predicted {
    event: InferenceEvent,
    window: KpmWindow,
    cache: ForwardCache,
}

fn predict_cycle(predictor: &Predictor, cycle: usize, window: KpmWindow) -> Result<Predicted> {
    let start = now_ns();
    let (prediction, cache) = predictor.forward(&window)?;
    let end = now_ns();
    Ok(Predicted {
        event: InferenceEvent {
            cycle,
            window_id: window.samples()[0].t,
            prediction,
            inference: Span::new(start, end),
        },
        window,
        cache,
    })
}

/// `Ok(None)` when the cycle's clock samples were not monotonic; such cycles
/// are discarded and counted.
fn explain_cycle(
    predictor: &Predictor,
    sdl: &SharedDataLayer,
    delivery: Delivery<InferenceEvent>,
    opts: &PipelineOptions,
) -> Result<Option<ExplanationEvent>> {
    let ev = delivery.payload.clone();
    let entry = sdl.get(ev.window_id).ok_or_else(|| {
        Error::Integrity(format!(
            "window {} for cycle {} not in the shared data layer",
            ev.window_id, ev.cycle
        ))
    })?;
    let (_, cache) = &*entry;

    let start = now_ns();
    let attribution = explain_with(
        predictor,
        cache,
        &opts.explain,
        ev.cycle as u64,
        ExecMode::Sequential,
    )?;
    let end = now_ns();

    let forward_evals = 1 + attribution.as_ref().map_or(0, |a| a.meta.forward_evals);
    let timings = StageTimings {
        cycle: ev.cycle,
        method: opts.explain.method,
        k_or_m: opts.explain.k_or_m(),
        inference: ev.inference,
        xai: attribution.as_ref().map(|_| Span::new(start, end)),
        comm: delivery.comm_span(),
        forward_evals,
    };
    let mut latency = match measure_cycle(&timings) {
        Ok(rec) => rec,
        Err(Error::Measurement(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    latency.apply_budget(&opts.budget);

    let fidelity = match (&opts.online_fidelity, opts.explain.method) {
        (Some(cfg), m) if m != Method::None => Some(evaluate_window(
            predictor,
            &cache.input,
            &opts.explain,
            cfg,
            ev.cycle,
            false,
        )?),
        _ => None,
    };

    Ok(Some(ExplanationEvent {
        cycle: ev.cycle,
        window_id: ev.window_id,
        prediction: ev.prediction,
        attribution: attribution.map(|a| a.to_json()),
        fidelity,
        latency,
    }))
}

/// Run the predictor/explainer loop over every window of `trace`.
pub fn run_pipeline(
    trace: &[KpmSample],
    predictor: &Predictor,
    opts: &PipelineOptions,
) -> Result<PipelineLog> {
    let mut windows: Vec<KpmWindow> = window_iter(trace, opts.window_len, 1)?
        .into_iter()
        .map(|(w, _)| w)
        .collect();
    if let Some(max) = opts.max_cycles {
        windows.truncate(max);
    }
    if windows.is_empty() {
        return Err(Error::Size("trace yields no prediction windows".into()));
    }
    let inferences = windows.len();
    let bus: Bus<InferenceEvent> = Bus::new();
    bus.register(INFERENCE_TOPIC, opts.queue_capacity)?;
    let sdl = SharedDataLayer::new(opts.sdl_capacity);
    let sub = bus.subscribe(INFERENCE_TOPIC)?;

    let discarded = std::sync::atomic::AtomicUsize::new(0);
    let keep = |ev: Option<ExplanationEvent>| {
        if ev.is_none() {
            discarded.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        }
        ev
    };
    let events = if opts.single_threaded {
        let mut events = Vec::with_capacity(inferences);
        for (cycle, window) in windows.into_iter().enumerate() {
            let p = predict_cycle(predictor, cycle, window)?;
            sdl.insert(p.event.window_id, p.window, p.cache);
            bus.publish(INFERENCE_TOPIC, p.event)?;
            let delivery = sub
                .recv()
                .ok_or_else(|| Error::Integrity("bus closed mid-cycle".into()))?;
            events.extend(keep(explain_cycle(predictor, &sdl, delivery, opts)?));
        }
        events
    } else {
        thread::scope(|scope| -> Result<Vec<ExplanationEvent>> {
            let (log_tx, log_rx) = mpsc::channel::<ExplanationEvent>();
            let producer = scope.spawn(|| -> Result<()> {
                let result = windows.into_iter().enumerate().try_for_each(|(cycle, window)| {
                    let p = predict_cycle(predictor, cycle, window)?;
                    sdl.insert(p.event.window_id, p.window, p.cache);
                    bus.publish(INFERENCE_TOPIC, p.event).map(|_| ())
                });
                bus.close(INFERENCE_TOPIC)?;
                result
            });
            let consumer = scope.spawn(|| -> Result<()> {
                while let Some(delivery) = sub.recv() {
                    if let Some(ev) = keep(explain_cycle(predictor, &sdl, delivery, opts)?) {
                        if log_tx.send(ev).is_err() {
                            break;
                        }
                    }
                }
                drop(log_tx);
                Ok(())
            });
            let events: Vec<ExplanationEvent> = log_rx.iter().collect();
            producer.join().expect("predictor stage panicked")?;
            consumer.join().expect("explainer stage panicked")?;
            Ok(events)
        })?
    };

    let dropped = bus.dropped(INFERENCE_TOPIC)? as usize;
    let budget_violations = events.iter().filter(|e| !e.latency.within_budget).count();
    Ok(PipelineLog {
        summary: PipelineSummary {
            method: opts.explain.method,
            k_or_m: opts.explain.k_or_m(),
            inferences,
            explained: events.len(),
            dropped,
            discarded_measurements: discarded.into_inner(),
            budget_limit_s: opts.budget.limit,
            budget_violations,
            single_threaded: opts.single_threaded,
        },
        events,
    })
}

/// Measure one latency-table row: run `warmup + cycles` single-threaded
/// cycles and aggregate the last `cycles`.
pub fn measure_latency_row(
    trace: &[KpmSample],
    predictor: &Predictor,
    explain: &ExplainConfig,
    cycles: usize,
    warmup: usize,
    budget: &Budget,
    comm_override: Option<f64>,
) -> Result<(LatencyRow, Vec<LatencyRecord>)> {
    let mut opts = PipelineOptions::new(explain.clone());
    opts.single_threaded = true;
    opts.budget = *budget;
    opts.max_cycles = Some(cycles + warmup);
    let log = run_pipeline(trace, predictor, &opts)?;
    if log.events.len() < cycles + warmup {
        return Err(Error::Size(format!(
            "trace yields {} cycles, need {}",
            log.events.len(),
            cycles + warmup
        )));
    }
    let records: Vec<LatencyRecord> = log.events[warmup..]
        .iter()
        .map(|e| e.latency.clone())
        .collect();
    Ok((summarize_records(&records, budget, comm_override)?, records))
}
