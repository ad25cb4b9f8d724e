//! The live annotation queue.
//!
//! The pipeline runs on its own thread and hands each segment's packets to the
//! service, which queues them for human annotators. Annotators lease packets,
//! submit labels, and the pipeline resumes once every packet of the segment
//! is labelled.
//!
//! All state changes are [`ServiceEvent`]s applied by a single writer and
//! appended to a line-oriented log first. Replaying the log rebuilds the
//! state exactly; because the pipeline is deterministic, a recovered service
//! restarts the pipeline and re-attaches it to the recovered queue.
//!
//! # Log format
//!
//! Tab-separated lines after a `#states` header, as in the record format:
//!
//! ```text
//! start    delta_min=0.3  c_min=10  ...
//! enqueue  <id>  <segment>  <reason>  <frame,frame,...>
//! lease    <id>  <expiry ms>
//! expire   <id>
//! labels   <id>  <frame:state,...>
//! auto     <segment>  <frame:state:source,...>
//! model    <version>
//! finish
//! ```

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hmm::{HmmModel, StateIndex, StateSpace};
use crate::pipeline::{
    run_pipeline, segment_frames, AnnotationPacket, Annotator, AnnotatorError, FrameLabel, FrameRecord,
    LabelRecord, LabelSource, PacketReason, PipelineError, PipelineParams, RunEvent,
};
use crate::providers::{header_line, parse_header, RecordStream};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("no queue entry {0}")]
    UnknownEntry(u64),
    #[error("entry {0} is not leased")]
    NotLeased(u64),
    #[error("entry {0} was already completed with different labels")]
    AlreadyCompleted(u64),
    #[error("labels do not match the packet: missing {missing:?}, extra {extra:?}")]
    FrameMismatch { missing: Vec<u64>, extra: Vec<u64> },
    #[error("unknown state names: {0:?}")]
    UnknownState(Vec<(u64, String)>),
    #[error("parameters can only change before the run starts")]
    AlreadyStarted,
    #[error(transparent)]
    Params(#[from] PipelineError),
    #[error("log line {line}: {message}")]
    Log { line: usize, message: String },
    #[error("recovered log does not match the pipeline: {0}")]
    Diverged(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Clock
// ---------------------------------------------------------------------------

/// Milliseconds since an arbitrary epoch.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// A clock that only moves when told to.
#[derive(Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        Self(AtomicU64::new(start_ms))
    }

    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

impl<C: Clock + ?Sized> Clock for Arc<C> {
    fn now_ms(&self) -> u64 {
        (**self).now_ms()
    }
}

// ---------------------------------------------------------------------------
// State
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryStatus {
    Pending,
    Leased,
    Completed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueEntry {
    /// Enqueue sequence number.
    pub id: u64,
    pub packet: AnnotationPacket,
    pub status: EntryStatus,
    pub lease_expiry_ms: Option<u64>,
    /// Present once completed, in packet frame order.
    pub labels: Option<Vec<FrameLabel>>,
}

/// One logged state change.
#[derive(Debug, Clone, PartialEq)]
pub enum ServiceEvent {
    Start(PipelineParams),
    Enqueue { id: u64, packet: AnnotationPacket },
    Lease { id: u64, expiry_ms: u64 },
    Expire { id: u64 },
    Labels { id: u64, labels: Vec<FrameLabel> },
    Auto { segment_id: usize, labels: Vec<LabelRecord> },
    Model { version: u32 },
    Finish,
}

/// Everything the log determines.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueState {
    pub params: PipelineParams,
    pub started: bool,
    pub entries: BTreeMap<u64, QueueEntry>,
    /// Automatic labels by frame.
    pub auto_labels: BTreeMap<u64, (StateIndex, LabelSource)>,
    /// Segments whose automatic labels are recorded.
    pub segments_done: usize,
    pub model_version: u32,
    pub finished: bool,
}

impl QueueState {
    pub fn new(params: PipelineParams) -> Self {
        Self {
            params,
            started: false,
            entries: BTreeMap::new(),
            auto_labels: BTreeMap::new(),
            segments_done: 0,
            model_version: 0,
            finished: false,
        }
    }

    /// Checks that `event` is a legal transition from this state.
    pub fn check(&self, event: &ServiceEvent) -> Result<(), ServiceError> {
        let status = |id: &u64| {
            self.entries
                .get(id)
                .map(|e| e.status)
                .ok_or(ServiceError::UnknownEntry(*id))
        };
        match event {
            ServiceEvent::Enqueue { id, .. } if self.entries.contains_key(id) => {
                Err(ServiceError::Diverged(format!("entry {id} enqueued twice")))
            }
            ServiceEvent::Lease { id, .. } if status(id)? != EntryStatus::Pending => {
                Err(ServiceError::Diverged(format!("lease of entry {id} that is not pending")))
            }
            ServiceEvent::Expire { id } | ServiceEvent::Labels { id, .. } if status(id)? != EntryStatus::Leased => {
                Err(ServiceError::NotLeased(*id))
            }
            _ => Ok(()),
        }
    }

    /// Applies one event after [`check`](Self::check)ing it.
    pub fn apply(&mut self, event: ServiceEvent) -> Result<(), ServiceError> {
        self.check(&event)?;
        match event {
            ServiceEvent::Start(params) => {
                self.params = params;
                self.started = true;
            }
            ServiceEvent::Enqueue { id, packet } => {
                self.entries.insert(
                    id,
                    QueueEntry {
                        id,
                        packet,
                        status: EntryStatus::Pending,
                        lease_expiry_ms: None,
                        labels: None,
                    },
                );
            }
            ServiceEvent::Lease { id, expiry_ms } => {
                let e = self.entries.get_mut(&id).expect("checked");
                e.status = EntryStatus::Leased;
                e.lease_expiry_ms = Some(expiry_ms);
            }
            ServiceEvent::Expire { id } => {
                let e = self.entries.get_mut(&id).expect("checked");
                e.status = EntryStatus::Pending;
                e.lease_expiry_ms = None;
            }
            ServiceEvent::Labels { id, labels } => {
                let e = self.entries.get_mut(&id).expect("checked");
                e.status = EntryStatus::Completed;
                e.labels = Some(labels);
            }
            ServiceEvent::Auto { labels, .. } => {
                for l in labels {
                    self.auto_labels.insert(l.frame_index, (l.state, l.source));
                }
                self.segments_done += 1;
            }
            ServiceEvent::Model { version } => self.model_version = version,
            ServiceEvent::Finish => self.finished = true,
        }
        Ok(())
    }

    pub fn next_id(&self) -> u64 {
        self.entries.keys().next_back().map_or(0, |k| k + 1)
    }

    /// Manual and automatic labels merged in frame order.
    pub fn labels(&self) -> Vec<LabelRecord> {
        let mut out: Vec<LabelRecord> = self
            .manual_labels()
            .map(|l| LabelRecord {
                frame_index: l.frame_index,
                state: l.state,
                source: LabelSource::Manual,
            })
            .chain(self.auto_labels.iter().map(|(&frame_index, &(state, source))| LabelRecord {
                frame_index,
                state,
                source,
            }))
            .collect();
        out.sort_by_key(|l| l.frame_index);
        out
    }

    pub fn manual_labels(&self) -> impl Iterator<Item = &FrameLabel> {
        self.entries.values().filter_map(|e| e.labels.as_ref()).flatten()
    }

    fn count(&self, status: EntryStatus) -> usize {
        self.entries.values().filter(|e| e.status == status).count()
    }
}

// ---------------------------------------------------------------------------
// Log encoding
// ---------------------------------------------------------------------------

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(",")
}

fn encode_params(params: &PipelineParams) -> String {
    let value = serde_json::to_value(params).expect("params serialise");
    let map = value.as_object().expect("params serialise to an object");
    map.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join("\t")
}

/// One log line for `event`, without the newline.
pub fn encode_event(event: &ServiceEvent, states: &StateSpace) -> String {
    let name = |s: StateIndex| states.name(s).unwrap_or("?").to_string();
    match event {
        ServiceEvent::Start(p) => format!("start\t{}", encode_params(p)),
        ServiceEvent::Enqueue { id, packet } => format!(
            "enqueue\t{id}\t{}\t{}\t{}",
            packet.segment_id,
            packet.reason.as_str(),
            join(&packet.frames, |f| f.to_string())
        ),
        ServiceEvent::Lease { id, expiry_ms } => format!("lease\t{id}\t{expiry_ms}"),
        ServiceEvent::Expire { id } => format!("expire\t{id}"),
        ServiceEvent::Labels { id, labels } => {
            format!("labels\t{id}\t{}", join(labels, |l| format!("{}:{}", l.frame_index, name(l.state))))
        }
        ServiceEvent::Auto { segment_id, labels } => format!(
            "auto\t{segment_id}\t{}",
            join(labels, |l| format!("{}:{}:{}", l.frame_index, name(l.state), l.source.as_str()))
        ),
        ServiceEvent::Model { version } => format!("model\t{version}"),
        ServiceEvent::Finish => "finish".to_string(),
    }
}

/// Parses one non-header log line.
pub fn decode_event(line: &str, states: &StateSpace) -> Result<ServiceEvent, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    let want = |n: usize| {
        if fields.len() == n {
            Ok(())
        } else {
            Err(format!("{} expects {} fields, got {}", fields[0], n, fields.len()))
        }
    };
    fn num<T: std::str::FromStr>(s: &str) -> Result<T, String> {
        s.parse().map_err(|_| format!("{s:?} is not a number"))
    }
    let state = |s: &str| states.index_of(s).ok_or_else(|| format!("unknown state {s:?}"));
    let list = |s: &str| -> Vec<String> {
        if s.is_empty() {
            Vec::new()
        } else {
            s.split(',').map(str::to_string).collect()
        }
    };
    match fields[0] {
        "start" => {
            let mut map = serde_json::Map::new();
            for kv in &fields[1..] {
                let (k, v) = kv.split_once('=').ok_or_else(|| format!("expected key=value, got {kv:?}"))?;
                let v: serde_json::Value = serde_json::from_str(v).map_err(|e| format!("{k}: {e}"))?;
                map.insert(k.to_string(), v);
            }
            let params = serde_json::from_value(serde_json::Value::Object(map)).map_err(|e| e.to_string())?;
            Ok(ServiceEvent::Start(params))
        }
        "enqueue" => {
            want(5)?;
            let reason = PacketReason::parse(fields[3]).ok_or_else(|| format!("unknown reason {:?}", fields[3]))?;
            let frames = list(fields[4]).iter().map(|f| num(f)).collect::<Result<_, _>>()?;
            Ok(ServiceEvent::Enqueue {
                id: num(fields[1])?,
                packet: AnnotationPacket {
                    reason,
                    frames,
                    segment_id: num(fields[2])?,
                },
            })
        }
        "lease" => {
            want(3)?;
            Ok(ServiceEvent::Lease {
                id: num(fields[1])?,
                expiry_ms: num(fields[2])?,
            })
        }
        "expire" => {
            want(2)?;
            Ok(ServiceEvent::Expire { id: num(fields[1])? })
        }
        "labels" => {
            want(3)?;
            let labels = list(fields[2])
                .iter()
                .map(|item| {
                    let (f, s) = item.split_once(':').ok_or_else(|| format!("expected frame:state, got {item:?}"))?;
                    Ok(FrameLabel {
                        frame_index: num(f)?,
                        state: state(s)?,
                    })
                })
                .collect::<Result<_, String>>()?;
            Ok(ServiceEvent::Labels {
                id: num(fields[1])?,
                labels,
            })
        }
        "auto" => {
            want(3)?;
            let labels = list(fields[2])
                .iter()
                .map(|item| {
                    let parts: Vec<&str> = item.split(':').collect();
                    let [f, s, src] = parts[..] else {
                        return Err(format!("expected frame:state:source, got {item:?}"));
                    };
                    Ok(LabelRecord {
                        frame_index: num(f)?,
                        state: state(s)?,
                        source: LabelSource::parse(src).ok_or_else(|| format!("unknown source {src:?}"))?,
                    })
                })
                .collect::<Result<_, String>>()?;
            Ok(ServiceEvent::Auto {
                segment_id: num(fields[1])?,
                labels,
            })
        }
        "model" => {
            want(2)?;
            Ok(ServiceEvent::Model { version: num(fields[1])? })
        }
        "finish" => {
            want(1)?;
            Ok(ServiceEvent::Finish)
        }
        other => Err(format!("unknown event {other:?}")),
    }
}

/// Reads a log back into its events. The header must name the same states.
pub fn read_log<R: BufRead>(input: R, states: &StateSpace) -> Result<Vec<ServiceEvent>, ServiceError> {
    let mut events = Vec::new();
    let mut lines = input.lines().enumerate();
    let header = match lines.next() {
        Some((_, line)) => line?,
        None => return Ok(events),
    };
    let logged = parse_header(&header).map_err(|e| ServiceError::Log {
        line: 1,
        message: e.to_string(),
    })?;
    if &logged != states {
        return Err(ServiceError::Log {
            line: 1,
            message: "state names differ from the record stream".into(),
        });
    }
    for (i, line) in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        events.push(decode_event(&line, states).map_err(|message| ServiceError::Log { line: i + 1, message })?);
    }
    Ok(events)
}

/// Rebuilds queue state from logged events.
pub fn replay_log(events: impl IntoIterator<Item = ServiceEvent>, params: PipelineParams) -> Result<QueueState, ServiceError> {
    let mut state = QueueState::new(params);
    for e in events {
        state.apply(e)?;
    }
    Ok(state)
}

// ---------------------------------------------------------------------------
// Service
// ---------------------------------------------------------------------------

/// Returned by [`AnnotationService::next_packet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextPacket {
    pub entry: Option<QueueEntry>,
    /// True once the pipeline has finished and nothing is left to label.
    pub drained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitAck {
    pub id: u64,
    pub accepted_frames: usize,
    /// The entry was already completed with these labels.
    pub duplicate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressSnapshot {
    /// In-segment frames of the whole stream.
    pub total_frames: u64,
    pub manual_frames: u64,
    pub auto_frames: u64,
    pub auto_stable: u64,
    pub auto_confident: u64,
    pub pending_packets: u64,
    pub leased_packets: u64,
    pub completed_packets: u64,
    pub unconfident_change_packets: u64,
    pub unverified_interval_packets: u64,
    pub unstable_segment_packets: u64,
    /// Labelled frames per manual frame so far.
    pub reduction_factor: Option<f64>,
    /// Over labelled frames with ground truth.
    pub accuracy: Option<f64>,
    pub model_version: u32,
    pub started: bool,
    pub finished: bool,
    pub error: Option<String>,
}

struct Inner {
    state: QueueState,
    log: Box<dyn Write + Send>,
    /// Entries recovered from a log that the restarted pipeline has not yet
    /// re-requested.
    replay_cursor: u64,
    /// Incremented whenever the pipeline starts waiting on a new batch.
    batch_generation: u64,
    waiting_on: Vec<u64>,
    pipeline_running: bool,
    /// Latest re-estimated model, not logged.
    model: Option<HmmModel>,
    error: Option<String>,
    shutdown: bool,
}

impl Inner {
    /// Logs `event`, then applies it. Illegal events are neither.
    fn record(&mut self, event: ServiceEvent, states: &StateSpace) -> Result<(), ServiceError> {
        self.state.check(&event)?;
        writeln!(self.log, "{}", encode_event(&event, states))?;
        self.log.flush()?;
        self.state.apply(event)
    }
}

struct Shared {
    states: StateSpace,
    records: Arc<Vec<FrameRecord>>,
    truth: HashMap<u64, StateIndex>,
    total_frames: u64,
    model: HmmModel,
    clock: Box<dyn Clock>,
    inner: Mutex<Inner>,
    changed: Condvar,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// The annotation queue and the pipeline thread feeding it.
pub struct AnnotationService {
    shared: Arc<Shared>,
    worker: Mutex<Option<JoinHandle<()>>>,
}

impl AnnotationService {
    /// A fresh service writing its log to `log`.
    pub fn new(
        stream: RecordStream,
        model: HmmModel,
        params: PipelineParams,
        mut log: Box<dyn Write + Send>,
        clock: Box<dyn Clock>,
    ) -> Result<Self, ServiceError> {
        params.validate()?;
        writeln!(log, "{}", header_line(&stream.states))?;
        log.flush()?;
        Self::assemble(stream, model, QueueState::new(params), log, clock)
    }

    /// Rebuilds a service from an existing log and keeps appending to `log`.
    /// If the logged run had started, the pipeline is restarted and
    /// re-attached to the recovered queue.
    pub fn recover<R: BufRead>(
        stream: RecordStream,
        model: HmmModel,
        params: PipelineParams,
        logged: R,
        log: Box<dyn Write + Send>,
        clock: Box<dyn Clock>,
    ) -> Result<Self, ServiceError> {
        let events = read_log(logged, &stream.states)?;
        let state = replay_log(events, params)?;
        let started = state.started;
        let service = Self::assemble(stream, model, state, log, clock)?;
        if started {
            service.spawn_pipeline();
        }
        Ok(service)
    }

    fn assemble(
        stream: RecordStream,
        model: HmmModel,
        state: QueueState,
        log: Box<dyn Write + Send>,
        clock: Box<dyn Clock>,
    ) -> Result<Self, ServiceError> {
        let segments = segment_frames(&stream.records)?;
        let truth = stream
            .records
            .iter()
            .filter_map(|r| Some((r.frame_index, r.ground_truth?)))
            .collect();
        Ok(Self {
            shared: Arc::new(Shared {
                states: stream.states,
                records: Arc::new(stream.records),
                truth,
                total_frames: segments.iter().map(|s| s.len as u64).sum(),
                model,
                clock,
                inner: Mutex::new(Inner {
                    state,
                    log,
                    replay_cursor: 0,
                    batch_generation: 0,
                    waiting_on: Vec::new(),
                    pipeline_running: false,
                    model: None,
                    error: None,
                    shutdown: false,
                }),
                changed: Condvar::new(),
            }),
            worker: Mutex::new(None),
        })
    }

    pub fn states(&self) -> &StateSpace {
        &self.shared.states
    }

    pub fn frame(&self, frame_index: u64) -> Option<&FrameRecord> {
        let records = &self.shared.records;
        records
            .binary_search_by_key(&frame_index, |r| r.frame_index)
            .ok()
            .map(|i| &records[i])
    }

    pub fn params(&self) -> PipelineParams {
        self.shared.lock().state.params.clone()
    }

    /// Replaces the thresholds; only before the run starts.
    pub fn set_params(&self, params: PipelineParams) -> Result<PipelineParams, ServiceError> {
        params.validate()?;
        let mut inner = self.shared.lock();
        if inner.state.started {
            return Err(ServiceError::AlreadyStarted);
        }
        inner.state.params = params.clone();
        Ok(params)
    }

    /// Starts the pipeline if it is not running yet.
    pub fn start(&self) -> Result<(), ServiceError> {
        {
            let mut inner = self.shared.lock();
            if inner.state.started {
                return Ok(());
            }
            let params = inner.state.params.clone();
            inner.record(ServiceEvent::Start(params), &self.shared.states)?;
        }
        self.spawn_pipeline();
        Ok(())
    }

    /// Starts the pipeline thread and waits until it either asks for labels
    /// or ends.
    fn spawn_pipeline(&self) {
        self.shared.lock().pipeline_running = true;
        let shared = Arc::clone(&self.shared);
        let handle = std::thread::spawn(move || {
            let params = shared.lock().state.params.clone();
            let records = Arc::clone(&shared.records);
            let mut annotator = ServiceAnnotator { shared: &shared };
            let result = run_pipeline(&records, &shared.model, &params, &mut annotator);
            let mut inner = shared.lock();
            if let Err(e) = result {
                if !inner.shutdown {
                    inner.error = Some(e.to_string());
                }
            }
            inner.pipeline_running = false;
            shared.changed.notify_all();
        });
        *self.worker.lock().unwrap_or_else(|e| e.into_inner()) = Some(handle);
        let mut inner = self.shared.lock();
        while inner.batch_generation == 0 && inner.pipeline_running {
            inner = self.shared.changed.wait(inner).unwrap_or_else(|e| e.into_inner());
        }
    }

    /// Leases the oldest pending entry, reclaiming expired leases first.
    /// Starts the run on first use.
    pub fn next_packet(&self, lease_ms: u64) -> Result<NextPacket, ServiceError> {
        self.start()?;
        let now = self.shared.clock.now_ms();
        let mut inner = self.shared.lock();
        let expired: Vec<u64> = inner
            .state
            .entries
            .values()
            .filter(|e| e.status == EntryStatus::Leased && e.lease_expiry_ms.is_some_and(|t| t <= now))
            .map(|e| e.id)
            .collect();
        for id in expired {
            inner.record(ServiceEvent::Expire { id }, &self.shared.states)?;
        }
        let next = inner
            .state
            .entries
            .values()
            .find(|e| e.status == EntryStatus::Pending)
            .map(|e| e.id);
        match next {
            Some(id) => {
                let expiry_ms = now.saturating_add(lease_ms);
                inner.record(ServiceEvent::Lease { id, expiry_ms }, &self.shared.states)?;
                Ok(NextPacket {
                    entry: Some(inner.state.entries[&id].clone()),
                    drained: false,
                })
            }
            None => {
                let open = inner.state.count(EntryStatus::Leased) > 0;
                let done = inner.state.finished || inner.error.is_some();
                Ok(NextPacket {
                    entry: None,
                    drained: done && !open,
                })
            }
        }
    }

    /// Accepts labels (frame → state name) for a leased entry.
    ///
    /// Returns after the pipeline has absorbed the labels, so a following
    /// [`progress`](Self::progress) call reflects any retraining they caused.
    pub fn submit_labels(&self, id: u64, labels: &BTreeMap<u64, String>) -> Result<SubmitAck, ServiceError> {
        let shared = &self.shared;
        let mut inner = shared.lock();
        let entry = inner.state.entries.get(&id).ok_or(ServiceError::UnknownEntry(id))?;
        if entry.status == EntryStatus::Pending {
            return Err(ServiceError::NotLeased(id));
        }

        let frames = &entry.packet.frames;
        let missing: Vec<u64> = frames.iter().copied().filter(|f| !labels.contains_key(f)).collect();
        let extra: Vec<u64> = labels.keys().copied().filter(|f| !frames.contains(f)).collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(ServiceError::FrameMismatch { missing, extra });
        }
        let unknown: Vec<(u64, String)> = labels
            .iter()
            .filter(|(_, name)| shared.states.index_of(name).is_none())
            .map(|(f, name)| (*f, name.clone()))
            .collect();
        if !unknown.is_empty() {
            return Err(ServiceError::UnknownState(unknown));
        }
        let parsed: Vec<FrameLabel> = frames
            .iter()
            .map(|&f| FrameLabel {
                frame_index: f,
                state: shared.states.index_of(&labels[&f]).expect("checked above"),
            })
            .collect();

        match entry.status {
            EntryStatus::Completed => {
                return if entry.labels.as_ref() == Some(&parsed) {
                    Ok(SubmitAck {
                        id,
                        accepted_frames: parsed.len(),
                        duplicate: true,
                    })
                } else {
                    Err(ServiceError::AlreadyCompleted(id))
                };
            }
            EntryStatus::Pending | EntryStatus::Leased => {}
        }

        let n = parsed.len();
        inner.record(ServiceEvent::Labels { id, labels: parsed }, &shared.states)?;
        let generation = inner.batch_generation;
        let releases_batch = inner.waiting_on.contains(&id)
            && inner
                .waiting_on
                .iter()
                .all(|i| inner.state.entries[i].status == EntryStatus::Completed);
        shared.changed.notify_all();
        if releases_batch {
            while inner.batch_generation == generation && inner.pipeline_running && !inner.shutdown {
                inner = shared.changed.wait(inner).unwrap_or_else(|e| e.into_inner());
            }
        }
        Ok(SubmitAck {
            id,
            accepted_frames: n,
            duplicate: false,
        })
    }

    /// The model the pipeline currently uses.
    pub fn current_model(&self) -> HmmModel {
        let inner = self.shared.lock();
        inner.model.clone().unwrap_or_else(|| self.shared.model.clone())
    }

    pub fn entry(&self, id: u64) -> Option<QueueEntry> {
        self.shared.lock().state.entries.get(&id).cloned()
    }

    /// A copy of the logged state.
    pub fn queue_state(&self) -> QueueState {
        self.shared.lock().state.clone()
    }

    pub fn progress(&self) -> ProgressSnapshot {
        let inner = self.shared.lock();
        let s = &inner.state;
        let mut manual = 0u64;
        let mut correct = 0u64;
        let mut judged = 0u64;
        let mut judge = |frame: u64, state: StateIndex| {
            if let Some(&t) = self.shared.truth.get(&frame) {
                judged += 1;
                correct += u64::from(t == state);
            }
        };
        for l in s.manual_labels() {
            manual += 1;
            judge(l.frame_index, l.state);
        }
        let (mut stable, mut confident) = (0u64, 0u64);
        for (&f, &(state, source)) in &s.auto_labels {
            match source {
                LabelSource::AutoStable => stable += 1,
                _ => confident += 1,
            }
            judge(f, state);
        }
        let by_reason = |r: PacketReason| s.entries.values().filter(|e| e.packet.reason == r).count() as u64;
        let labelled = manual + stable + confident;
        ProgressSnapshot {
            total_frames: self.shared.total_frames,
            manual_frames: manual,
            auto_frames: stable + confident,
            auto_stable: stable,
            auto_confident: confident,
            pending_packets: s.count(EntryStatus::Pending) as u64,
            leased_packets: s.count(EntryStatus::Leased) as u64,
            completed_packets: s.count(EntryStatus::Completed) as u64,
            unconfident_change_packets: by_reason(PacketReason::UnconfidentChange),
            unverified_interval_packets: by_reason(PacketReason::UnverifiedInterval),
            unstable_segment_packets: by_reason(PacketReason::UnstableSegment),
            reduction_factor: (manual > 0).then(|| labelled as f64 / manual as f64),
            accuracy: (judged > 0).then(|| correct as f64 / judged as f64),
            model_version: s.model_version,
            started: s.started,
            finished: s.finished,
            error: inner.error.clone(),
        }
    }

    /// Blocks until the pipeline has finished or failed.
    pub fn wait_finished(&self) {
        let mut inner = self.shared.lock();
        while !inner.state.finished && inner.error.is_none() && !inner.shutdown {
            inner = self.shared.changed.wait(inner).unwrap_or_else(|e| e.into_inner());
        }
    }
}

impl Drop for AnnotationService {
    fn drop(&mut self) {
        self.shared.lock().shutdown = true;
        self.shared.changed.notify_all();
        if let Some(handle) = self.worker.lock().unwrap_or_else(|e| e.into_inner()).take() {
            let _ = handle.join();
        }
    }
}

/// The pipeline's view of the service.
struct ServiceAnnotator<'a> {
    shared: &'a Shared,
}

impl ServiceAnnotator<'_> {
    fn record(&self, inner: &mut Inner, event: ServiceEvent) -> Result<(), AnnotatorError> {
        inner
            .record(event, &self.shared.states)
            .map_err(|e| AnnotatorError(e.to_string()))
    }
}

impl Annotator for ServiceAnnotator<'_> {
    fn annotate(&mut self, packet: &AnnotationPacket) -> Result<Vec<FrameLabel>, AnnotatorError> {
        Ok(self.annotate_batch(std::slice::from_ref(packet))?.remove(0))
    }

    fn annotate_batch(&mut self, packets: &[AnnotationPacket]) -> Result<Vec<Vec<FrameLabel>>, AnnotatorError> {
        let shared = self.shared;
        let mut inner = shared.lock();
        let mut ids = Vec::with_capacity(packets.len());
        for packet in packets {
            let id = inner.replay_cursor;
            inner.replay_cursor += 1;
            match inner.state.entries.get(&id) {
                Some(e) if &e.packet == packet => {}
                Some(e) => {
                    return Err(AnnotatorError(
                        ServiceError::Diverged(format!("entry {id} holds {:?}, pipeline produced {packet:?}", e.packet))
                            .to_string(),
                    ))
                }
                None => self.record(
                    &mut inner,
                    ServiceEvent::Enqueue {
                        id,
                        packet: packet.clone(),
                    },
                )?,
            }
            ids.push(id);
        }
        inner.waiting_on = ids.clone();
        inner.batch_generation += 1;
        shared.changed.notify_all();
        loop {
            if inner.shutdown {
                return Err(AnnotatorError("service stopped".into()));
            }
            if ids.iter().all(|i| inner.state.entries[i].status == EntryStatus::Completed) {
                break;
            }
            inner = shared.changed.wait(inner).unwrap_or_else(|e| e.into_inner());
        }
        inner.waiting_on.clear();
        Ok(ids
            .iter()
            .map(|i| inner.state.entries[i].labels.clone().expect("completed entries carry labels"))
            .collect())
    }

    fn observe(&mut self, event: RunEvent<'_>) {
        let mut inner = self.shared.lock();
        let logged = match event {
            RunEvent::SegmentFinished { segment_id, labels } => {
                if segment_id < inner.state.segments_done {
                    return;
                }
                let auto = labels.iter().filter(|l| l.source != LabelSource::Manual).copied().collect();
                ServiceEvent::Auto {
                    segment_id,
                    labels: auto,
                }
            }
            RunEvent::Retrained { version, model } => {
                inner.model = Some(model.clone());
                if version <= inner.state.model_version {
                    return;
                }
                ServiceEvent::Model { version }
            }
            RunEvent::Finished => {
                if inner.state.finished {
                    return;
                }
                ServiceEvent::Finish
            }
        };
        if let Err(e) = self.record(&mut inner, logged) {
            inner.error = Some(e.0);
        }
        self.shared.changed.notify_all();
    }
}
