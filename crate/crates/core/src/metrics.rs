//! Runtime metrics: wall time, peak tracked memory, swap latency and
//! optional energy, collected per phase and exported as JSONL or CSV.
//!
//! Wall time comes from the monotonic clock. Peak memory is the high-water
//! mark of live tensor bytes on the measuring thread, with the process
//! resident set sampled for top-level phases as a secondary figure.

use std::cell::Cell;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::alloc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// A whole training call.
    Finetune,
    /// One epoch inside `Finetune`.
    FinetuneEpoch,
    /// A whole prediction call.
    Predict,
    /// One batch inside `Predict`.
    PredictBatch,
    LoadComponent,
    Swap,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Finetune => "finetune",
            Phase::FinetuneEpoch => "finetune_epoch",
            Phase::Predict => "predict",
            Phase::PredictBatch => "predict_batch",
            Phase::LoadComponent => "load_component",
            Phase::Swap => "swap",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub phase: Phase,
    pub wall_time_s: f64,
    /// Tracked tensor high-water mark during the phase, baseline included.
    pub peak_mem_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resident_bytes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_j: Option<f64>,
    pub batch_count: u64,
    /// Seconds since the Unix epoch at phase start; for ordering only.
    pub timestamp: f64,
    pub failed: bool,
    /// Nesting level; 0 for top-level phases.
    pub depth: u32,
}

impl RunMetrics {
    pub fn with_batches(mut self, n: u64) -> Self {
        self.batch_count = n;
        self
    }
}

/// Source of cumulative energy readings in joules.
pub trait EnergyProbe: Send + Sync {
    /// Cumulative joules, or `None` when no reading is available.
    fn read(&self) -> Option<f64>;

    fn available(&self) -> bool {
        self.read().is_some()
    }
}

/// Always unavailable; phases measured with it carry no energy field.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoopProbe;

impl EnergyProbe for NoopProbe {
    fn read(&self) -> Option<f64> {
        None
    }
    fn available(&self) -> bool {
        false
    }
}

/// Reads a cumulative joule count from a text file on each call, e.g. a
/// counter exported by a power monitor.
#[derive(Clone, Debug)]
pub struct FileProbe {
    path: std::path::PathBuf,
}

impl FileProbe {
    pub fn new(path: impl Into<std::path::PathBuf>) -> Self {
        FileProbe { path: path.into() }
    }
}

impl EnergyProbe for FileProbe {
    fn read(&self) -> Option<f64> {
        std::fs::read_to_string(&self.path).ok()?.trim().parse().ok()
    }
}

/// Advances by a fixed amount on every read.
#[derive(Debug)]
pub struct CounterProbe {
    micro_joules: AtomicU64,
    step_uj: u64,
}

impl CounterProbe {
    pub fn new(step_joules: f64) -> Self {
        CounterProbe {
            micro_joules: AtomicU64::new(0),
            step_uj: (step_joules * 1e6).round() as u64,
        }
    }
}

impl EnergyProbe for CounterProbe {
    fn read(&self) -> Option<f64> {
        Some(self.micro_joules.fetch_add(self.step_uj, Ordering::Relaxed) as f64 / 1e6)
    }
}

thread_local! {
    static DEPTH: Cell<u32> = const { Cell::new(0) };
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Resident set size from `/proc/self/status`, where available.
pub fn resident_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmRSS:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

struct Open {
    phase: Phase,
    depth: u32,
    start: Instant,
    timestamp: f64,
    outer_peak: usize,
    energy_start: Option<f64>,
}

fn open(phase: Phase, probe: Option<&dyn EnergyProbe>) -> Open {
    let depth = DEPTH.with(|d| {
        let v = d.get();
        d.set(v + 1);
        v
    });
    let outer_peak = alloc::peak_bytes();
    alloc::reset_peak();
    Open {
        phase,
        depth,
        timestamp: unix_now(),
        energy_start: probe.and_then(|p| p.read()),
        start: Instant::now(),
        outer_peak,
    }
}

fn close(o: Open, probe: Option<&dyn EnergyProbe>, failed: bool) -> RunMetrics {
    let wall = o.start.elapsed().as_secs_f64();
    let peak = alloc::peak_bytes();
    alloc::raise_peak(o.outer_peak);
    DEPTH.with(|d| d.set(o.depth));
    let energy_j = match (o.energy_start, probe.and_then(|p| p.read())) {
        (Some(a), Some(b)) => Some((b - a).max(0.0)),
        _ => None,
    };
    RunMetrics {
        phase: o.phase,
        wall_time_s: wall,
        peak_mem_bytes: peak as u64,
        resident_bytes: if o.depth == 0 { resident_bytes() } else { None },
        energy_j,
        batch_count: 0,
        timestamp: o.timestamp,
        failed,
        depth: o.depth,
    }
}

fn measure<T, E>(phase: Phase, probe: Option<&dyn EnergyProbe>, f: impl FnOnce() -> Result<T, E>) -> (Result<T, E>, RunMetrics) {
    let o = open(phase, probe);
    let out = f();
    let m = close(o, probe, out.is_err());
    (out, m)
}

/// Runs `f` and measures it. A failing `f` still yields a record, flagged
/// `failed`, next to the propagated error. Phases nest: wall time is
/// inclusive and `depth` records the hierarchy.
pub fn time_phase<T, E>(phase: Phase, f: impl FnOnce() -> Result<T, E>) -> (Result<T, E>, RunMetrics) {
    measure(phase, None, f)
}

/// [`time_phase`] with energy read from `probe` at entry and exit.
pub fn time_phase_with<T, E>(
    phase: Phase,
    probe: &dyn EnergyProbe,
    f: impl FnOnce() -> Result<T, E>,
) -> (Result<T, E>, RunMetrics) {
    measure(phase, Some(probe), f)
}

/// Measures the tracked-allocation high-water mark while `f` runs.
pub fn track_peak_memory<T>(phase: Phase, f: impl FnOnce() -> T) -> (T, RunMetrics) {
    let (out, m) = measure(phase, None, || Ok::<T, std::convert::Infallible>(f()));
    match out {
        Ok(v) => (v, m),
        Err(never) => match never {},
    }
}

/// Append-only record sink, shareable across threads.
#[derive(Clone, Default)]
pub struct MetricsCollector {
    records: Arc<Mutex<Vec<RunMetrics>>>,
    probe: Option<Arc<dyn EnergyProbe>>,
}

impl fmt::Debug for MetricsCollector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MetricsCollector")
            .field("records", &self.len())
            .field("energy", &self.probe.is_some())
            .finish()
    }
}

impl MetricsCollector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_probe(probe: Arc<dyn EnergyProbe>) -> Self {
        MetricsCollector {
            records: Arc::default(),
            probe: Some(probe),
        }
    }

    pub fn push(&self, m: RunMetrics) {
        self.records.lock().expect("collector lock").push(m);
    }

    /// Measures `f` and appends the record.
    pub fn time<T, E>(&self, phase: Phase, f: impl FnOnce() -> Result<T, E>) -> (Result<T, E>, RunMetrics) {
        let (out, m) = measure(phase, self.probe.as_deref(), f);
        self.push(m.clone());
        (out, m)
    }

    /// [`time`](Self::time) with the record's batch count set.
    pub fn time_batches<T, E>(&self, phase: Phase, batches: u64, f: impl FnOnce() -> Result<T, E>) -> (Result<T, E>, RunMetrics) {
        let (out, m) = measure(phase, self.probe.as_deref(), f);
        let m = m.with_batches(batches);
        self.push(m.clone());
        (out, m)
    }

    pub fn records(&self) -> Vec<RunMetrics> {
        self.records.lock().expect("collector lock").clone()
    }

    pub fn len(&self) -> usize {
        self.records.lock().expect("collector lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn take(&self) -> Vec<RunMetrics> {
        std::mem::take(&mut *self.records.lock().expect("collector lock"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    Jsonl,
    Csv,
}

pub const CSV_COLUMNS: [&str; 8] = [
    "phase",
    "wall_time_s",
    "peak_mem_bytes",
    "resident_bytes",
    "energy_j",
    "batch_count",
    "timestamp",
    "failed",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// CSV cells for one record, in [`CSV_COLUMNS`] order.
pub fn csv_cells(m: &RunMetrics) -> [String; 8] {
    [
        m.phase.to_string(),
        m.wall_time_s.to_string(),
        m.peak_mem_bytes.to_string(),
        opt(m.resident_bytes),
        opt(m.energy_j),
        m.batch_count.to_string(),
        m.timestamp.to_string(),
        m.failed.to_string(),
    ]
}

/// Writes records to `path`: JSONL with one record per line, or CSV with
/// the fixed [`CSV_COLUMNS`].
pub fn export_metrics(records: &[RunMetrics], format: ExportFormat, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    match format {
        ExportFormat::Jsonl => {
            let mut w = BufWriter::new(file);
            for r in records {
                serde_json::to_writer(&mut w, r)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        ExportFormat::Csv => {
            let mut w = csv::Writer::from_writer(file);
            w.write_record(CSV_COLUMNS).map_err(csv_err)?;
            for r in records {
                w.write_record(csv_cells(r)).map_err(csv_err)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

/// Parses a JSONL metrics file.
pub fn read_metrics_jsonl(path: &Path) -> Result<Vec<RunMetrics>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("csv: {other:?}")),
    }
}
