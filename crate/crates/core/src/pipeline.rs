//! The annotation data flow: segmentation, change detection with confident
//! classification around each change, change verification, stable-state
//! labelling of the intervals between changes, and routing of everything
//! else to a human annotator.

use std::collections::HashMap;

use log::debug;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hmm::{ConfusionCounts, HmmError, HmmModel, StateIndex, TransitionCounts};

/// Class probability vectors must sum to 1 within this tolerance.
pub const PROBABILITY_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("frame index {frame_index} at record {position} does not increase")]
    NonMonotoneFrameIndex { position: usize, frame_index: u64 },
    #[error("frame {frame_index}: {reason}")]
    InvalidRecord { frame_index: u64, reason: String },
    #[error("invalid parameter {name}: {reason}")]
    InvalidParams { name: &'static str, reason: String },
    #[error("annotator failed: {0}")]
    Annotator(#[from] AnnotatorError),
    #[error("annotator response for packet in segment {segment_id} is missing frames {missing:?} and has extra frames {extra:?}")]
    IncompleteAnnotation {
        segment_id: usize,
        missing: Vec<u64>,
        extra: Vec<u64>,
    },
    #[error(transparent)]
    Model(#[from] HmmError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct AnnotatorError(pub String);

// ---------------------------------------------------------------------------
// Records and parameters
// ---------------------------------------------------------------------------

/// Per-frame measurements as seen by the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_index: u64,
    pub object_present: bool,
    /// Classifier probabilities over the state space; present iff the object is.
    pub class_probs: Option<Vec<f64>>,
    /// Change score against the previous record; absent at stream start and
    /// after an absence.
    pub change_score: Option<f64>,
    pub ground_truth: Option<StateIndex>,
}

impl FrameRecord {
    pub fn absent(frame_index: u64) -> Self {
        Self {
            frame_index,
            object_present: false,
            class_probs: None,
            change_score: None,
            ground_truth: None,
        }
    }
}

/// Checks every record invariant for a stream over `n_states` states.
pub fn validate_records(records: &[FrameRecord], n_states: usize) -> Result<(), PipelineError> {
    let invalid = |r: &FrameRecord, reason: String| PipelineError::InvalidRecord {
        frame_index: r.frame_index,
        reason,
    };
    let mut prev: Option<&FrameRecord> = None;
    for (position, r) in records.iter().enumerate() {
        if let Some(p) = prev {
            if r.frame_index <= p.frame_index {
                return Err(PipelineError::NonMonotoneFrameIndex {
                    position,
                    frame_index: r.frame_index,
                });
            }
        }
        match (&r.class_probs, r.object_present) {
            (Some(probs), true) => {
                if probs.len() != n_states {
                    return Err(invalid(r, format!("{} class probabilities for {n_states} states", probs.len())));
                }
                if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
                    return Err(invalid(r, "class probabilities must be finite and non-negative".into()));
                }
                let sum: f64 = probs.iter().sum();
                if (sum - 1.0).abs() > PROBABILITY_TOLERANCE {
                    return Err(invalid(r, format!("class probabilities sum to {sum}")));
                }
            }
            (None, false) => {}
            (Some(_), false) => return Err(invalid(r, "class probabilities on an absent frame".into())),
            (None, true) => return Err(invalid(r, "present frame without class probabilities".into())),
        }
        let score_allowed = r.object_present && prev.is_some_and(|p| p.object_present);
        match r.change_score {
            Some(s) if !score_allowed => {
                return Err(invalid(r, format!("change score {s} without a present predecessor")))
            }
            Some(s) if !(0.0..=1.0).contains(&s) => {
                return Err(invalid(r, format!("change score {s} outside [0, 1]")))
            }
            None if score_allowed => {
                return Err(invalid(r, "missing change score after a present frame".into()))
            }
            _ => {}
        }
        if let Some(t) = r.ground_truth {
            if t >= n_states {
                return Err(invalid(r, format!("ground truth {t} outside the state space")));
            }
        }
        prev = Some(r);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineParams {
    /// Change scores at or above this become change-points.
    pub delta_min: f64,
    /// Minimum top-two probability ratio for a confident decision.
    pub c_min: f64,
    /// Minimum normalised unchanged-state likelihood for auto-labelling.
    pub v_u_min: f64,
    /// Frames classified on each side of a change-point.
    pub context_radius: usize,
    /// Manual labels between model re-estimations; 0 disables retraining.
    pub retrain_interval: usize,
    pub smoothing_alpha: f64,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            delta_min: 0.3,
            c_min: 10.0,
            v_u_min: 1.0,
            context_radius: 2,
            retrain_interval: 20_000,
            smoothing_alpha: 1.0,
        }
    }
}

impl PipelineParams {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |name, reason: &str| {
            Err(PipelineError::InvalidParams {
                name,
                reason: reason.to_string(),
            })
        };
        if !(self.delta_min > 0.0 && self.delta_min < 1.0) {
            return bad("delta_min", "must lie in (0, 1)");
        }
        if !(self.c_min >= 1.0 && self.c_min.is_finite()) {
            return bad("c_min", "must be finite and at least 1");
        }
        if !(self.v_u_min > 0.0 && self.v_u_min.is_finite()) {
            return bad("v_u_min", "must be finite and positive");
        }
        if !(self.smoothing_alpha >= 0.0 && self.smoothing_alpha.is_finite()) {
            return bad("smoothing_alpha", "must be finite and non-negative");
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Outputs
// ---------------------------------------------------------------------------

/// Maximal run of consecutive object-present records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub id: usize,
    /// First and last frame index, inclusive.
    pub start: u64,
    pub end: u64,
    /// Position of the first record of the segment in the stream.
    pub offset: usize,
    pub len: usize,
}

impl Segment {
    pub fn records<'a>(&self, records: &'a [FrameRecord]) -> &'a [FrameRecord] {
        &records[self.offset..self.offset + self.len]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangePoint {
    pub frame_index: u64,
    /// Position within the segment.
    pub position: usize,
    pub pre_label: Option<StateIndex>,
    pub post_label: Option<StateIndex>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PacketReason {
    UnconfidentChange,
    UnverifiedInterval,
    UnstableSegment,
    Seed,
}

impl PacketReason {
    pub fn as_str(self) -> &'static str {
        match self {
            PacketReason::UnconfidentChange => "unconfident_change",
            PacketReason::UnverifiedInterval => "unverified_interval",
            PacketReason::UnstableSegment => "unstable_segment",
            PacketReason::Seed => "seed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "unconfident_change" => PacketReason::UnconfidentChange,
            "unverified_interval" => PacketReason::UnverifiedInterval,
            "unstable_segment" => PacketReason::UnstableSegment,
            "seed" => PacketReason::Seed,
            _ => return None,
        })
    }
}

/// Frames of one segment routed to the human queue.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationPacket {
    pub reason: PacketReason,
    /// Sorted frame indices.
    pub frames: Vec<u64>,
    pub segment_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Manual,
    AutoStable,
    AutoConfident,
}

impl LabelSource {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelSource::Manual => "manual",
            LabelSource::AutoStable => "auto_stable",
            LabelSource::AutoConfident => "auto_confident",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "manual" => LabelSource::Manual,
            "auto_stable" => LabelSource::AutoStable,
            "auto_confident" => LabelSource::AutoConfident,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub frame_index: u64,
    pub state: StateIndex,
    pub source: LabelSource,
}

/// A label supplied by the annotator for one queued frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameLabel {
    pub frame_index: u64,
    pub state: StateIndex,
}

// ---------------------------------------------------------------------------
// Component algorithms
// ---------------------------------------------------------------------------

/// Splits the stream into maximal object-present runs.
pub fn segment_frames(records: &[FrameRecord]) -> Result<Vec<Segment>, PipelineError> {
    let mut segments: Vec<Segment> = Vec::new();
    let mut open: Option<Segment> = None;
    for (position, r) in records.iter().enumerate() {
        if position > 0 && r.frame_index <= records[position - 1].frame_index {
            return Err(PipelineError::NonMonotoneFrameIndex {
                position,
                frame_index: r.frame_index,
            });
        }
        if r.object_present {
            match open.as_mut() {
                Some(seg) => {
                    seg.end = r.frame_index;
                    seg.len += 1;
                }
                None => {
                    open = Some(Segment {
                        id: segments.len(),
                        start: r.frame_index,
                        end: r.frame_index,
                        offset: position,
                        len: 1,
                    })
                }
            }
        } else if let Some(seg) = open.take() {
            segments.push(seg);
        }
    }
    segments.extend(open);
    Ok(segments)
}

/// Argmax state if the ratio of the top two probabilities reaches `c_min`.
///
/// A zero runner-up gives infinite confidence. A tied top only passes when
/// `c_min <= 1`, in which case the lowest tied index is returned.
pub fn confident_class(class_probs: &[f64], c_min: f64) -> Option<StateIndex> {
    let mut top = 0;
    for (i, &p) in class_probs.iter().enumerate() {
        if p > class_probs[top] {
            top = i;
        }
    }
    let p1 = *class_probs.get(top)?;
    let p2 = class_probs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, &p)| p)
        .fold(0.0, f64::max);
    (p1 >= c_min * p2).then_some(top)
}

/// Plain classifier decision (confidence threshold 1).
pub fn classify(class_probs: &[f64]) -> StateIndex {
    confident_class(class_probs, 1.0).unwrap_or(0)
}

/// Change-points at every frame whose change score reaches `delta_min`.
pub fn binarize_changes(frames: &[FrameRecord], delta_min: f64) -> Vec<ChangePoint> {
    frames
        .iter()
        .enumerate()
        .filter(|(_, r)| r.change_score.is_some_and(|s| s >= delta_min))
        .map(|(position, r)| ChangePoint {
            frame_index: r.frame_index,
            position,
            pre_label: None,
            post_label: None,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SegmentOutcome {
    /// Automatic labels for every frame not routed to a packet.
    pub labels: Vec<LabelRecord>,
    pub packets: Vec<AnnotationPacket>,
    pub changes: Vec<ChangePoint>,
}

/// Shared decision of a run of context frames, if they all agree.
fn agreed(decisions: &[Option<StateIndex>]) -> Option<StateIndex> {
    let first = (*decisions.first()?)?;
    decisions
        .iter()
        .all(|d| *d == Some(first))
        .then_some(first)
}

struct SegmentWork<'a> {
    frames: &'a [FrameRecord],
    segment_id: usize,
    queued: Vec<bool>,
    auto: Vec<Option<(StateIndex, LabelSource)>>,
    packets: Vec<AnnotationPacket>,
}

impl SegmentWork<'_> {
    /// Queues the not-yet-queued positions of `range` as one packet.
    fn queue(&mut self, range: std::ops::Range<usize>, reason: PacketReason) {
        let mut frames = Vec::new();
        for i in range {
            if !self.queued[i] {
                self.queued[i] = true;
                frames.push(self.frames[i].frame_index);
            }
        }
        if !frames.is_empty() {
            self.packets.push(AnnotationPacket {
                reason,
                frames,
                segment_id: self.segment_id,
            });
        }
    }
}

/// Runs change classification, verification and stable-state detection over
/// one segment.
///
/// Every frame of the segment ends up either in exactly one packet or with
/// exactly one automatic label.
pub fn process_segment(
    segment_id: usize,
    frames: &[FrameRecord],
    model: &HmmModel,
    params: &PipelineParams,
) -> Result<SegmentOutcome, PipelineError> {
    let n = frames.len();
    let probs = |i: usize| -> Result<&[f64], PipelineError> {
        frames[i]
            .class_probs
            .as_deref()
            .ok_or_else(|| PipelineError::InvalidRecord {
                frame_index: frames[i].frame_index,
                reason: "segment frame without class probabilities".into(),
            })
    };
    let mut confident = Vec::with_capacity(n);
    let mut decisions = Vec::with_capacity(n);
    for i in 0..n {
        let p = probs(i)?;
        confident.push(confident_class(p, params.c_min));
        decisions.push(classify(p));
    }

    let mut work = SegmentWork {
        frames,
        segment_id,
        queued: vec![false; n],
        auto: vec![None; n],
        packets: Vec::new(),
    };
    let r = params.context_radius;
    let mut changes = binarize_changes(frames, params.delta_min);

    // Confident classification around each change-point.
    for cp in changes.iter_mut() {
        let p = cp.position;
        let pre = p.saturating_sub(r)..p;
        let post = p + 1..(p + 1 + r).min(n);
        cp.pre_label = agreed(&confident[pre.clone()]);
        cp.post_label = agreed(&confident[post.clone()]);
        let context_ok = pre.clone().chain(post.clone()).all(|i| confident[i].is_some());
        // The change frame opens the new state.
        let at_change = confident[p].or(cp.post_label);
        match (context_ok, at_change) {
            (true, Some(state)) => {
                for i in pre.chain(post) {
                    work.auto[i] = confident[i].map(|s| (s, LabelSource::AutoConfident));
                }
                work.auto[p] = Some((state, LabelSource::AutoConfident));
            }
            _ => {
                cp.pre_label = None;
                cp.post_label = None;
                work.queue(p.saturating_sub(r)..(p + 1 + r).min(n), PacketReason::UnconfidentChange);
            }
        }
    }

    // Intervals between, before and after change-points. Each is
    // (first position, end position exclusive, verified).
    let mut intervals = Vec::with_capacity(changes.len() + 1);
    match (changes.first(), changes.last()) {
        (Some(first), Some(last)) => {
            intervals.push((0, first.position, first.pre_label.is_some()));
            for w in changes.windows(2) {
                let ok = w[0].post_label.is_some() && w[0].post_label == w[1].pre_label;
                intervals.push((w[0].position + 1, w[1].position, ok));
            }
            intervals.push((last.position + 1, n, last.post_label.is_some()));
        }
        _ => intervals.push((0, n, true)),
    }

    for &(lo, hi, verified) in &intervals {
        if lo >= hi {
            continue;
        }
        if !verified {
            work.queue(lo..hi, PacketReason::UnverifiedInterval);
            continue;
        }
        let core: Vec<usize> = (lo..hi)
            .filter(|&i| !work.queued[i] && work.auto[i].is_none())
            .collect();
        let Some((&first, &last)) = core.first().zip(core.last()) else {
            continue;
        };
        let obs: Vec<StateIndex> = core.iter().map(|&i| decisions[i]).collect();
        let stable = match model.stable_state_score(&obs) {
            Ok(score) => (score.v_u >= params.v_u_min).then_some(score.best_state),
            Err(HmmError::ImpossibleObservation { .. }) => None,
            Err(e) => return Err(e.into()),
        };
        match stable {
            Some(state) => core
                .iter()
                .for_each(|&i| work.auto[i] = Some((state, LabelSource::AutoStable))),
            None => work.queue(first..last + 1, PacketReason::UnstableSegment),
        }
    }

    let labels = (0..n)
        .filter(|&i| !work.queued[i])
        .map(|i| {
            let (state, source) = work.auto[i].expect("every unqueued frame is labelled");
            LabelRecord {
                frame_index: frames[i].frame_index,
                state,
                source,
            }
        })
        .collect();
    Ok(SegmentOutcome {
        labels,
        packets: work.packets,
        changes,
    })
}

// ---------------------------------------------------------------------------
// Annotator interface
// ---------------------------------------------------------------------------

/// Progress notifications emitted while a run advances.
#[derive(Debug, Clone, Copy)]
pub enum RunEvent<'a> {
    /// All labels of a segment are final.
    SegmentFinished {
        segment_id: usize,
        labels: &'a [LabelRecord],
    },
    Retrained {
        version: u32,
        model: &'a HmmModel,
    },
    Finished,
}

/// The human in the loop: labels every frame of each packet it is handed.
pub trait Annotator {
    fn annotate(&mut self, packet: &AnnotationPacket) -> Result<Vec<FrameLabel>, AnnotatorError>;

    /// Labels a segment's packets together. Results are in packet order.
    fn annotate_batch(
        &mut self,
        packets: &[AnnotationPacket],
    ) -> Result<Vec<Vec<FrameLabel>>, AnnotatorError> {
        packets.iter().map(|p| self.annotate(p)).collect()
    }

    fn observe(&mut self, _event: RunEvent<'_>) {}
}

impl<F> Annotator for F
where
    F: FnMut(&AnnotationPacket) -> Result<Vec<FrameLabel>, AnnotatorError>,
{
    fn annotate(&mut self, packet: &AnnotationPacket) -> Result<Vec<FrameLabel>, AnnotatorError> {
        self(packet)
    }
}

/// Answers every packet with the records' ground truth.
pub struct GroundTruthAnnotator {
    truth: HashMap<u64, StateIndex>,
}

impl GroundTruthAnnotator {
    pub fn new(records: &[FrameRecord]) -> Self {
        Self {
            truth: records
                .iter()
                .filter_map(|r| Some((r.frame_index, r.ground_truth?)))
                .collect(),
        }
    }
}

impl Annotator for GroundTruthAnnotator {
    fn annotate(&mut self, packet: &AnnotationPacket) -> Result<Vec<FrameLabel>, AnnotatorError> {
        packet
            .frames
            .iter()
            .map(|&f| {
                self.truth
                    .get(&f)
                    .map(|&state| FrameLabel { frame_index: f, state })
                    .ok_or_else(|| AnnotatorError(format!("no ground truth for frame {f}")))
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Full run
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounters {
    /// Frames inside segments.
    pub total_frames: u64,
    pub manual_frames: u64,
    pub auto_frames: u64,
    pub auto_stable: u64,
    pub auto_confident: u64,
    pub unconfident_change_packets: u64,
    pub unverified_interval_packets: u64,
    pub unstable_segment_packets: u64,
    pub change_points: u64,
}

impl RunCounters {
    fn count_packet(&mut self, reason: PacketReason) {
        match reason {
            PacketReason::UnconfidentChange => self.unconfident_change_packets += 1,
            PacketReason::UnverifiedInterval => self.unverified_interval_packets += 1,
            PacketReason::UnstableSegment => self.unstable_segment_packets += 1,
            PacketReason::Seed => {}
        }
    }
}

/// Everything a run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRun {
    /// Finalised labels in frame order.
    pub labels: Vec<LabelRecord>,
    pub packets: Vec<AnnotationPacket>,
    pub counters: RunCounters,
    /// Number of re-estimations performed.
    pub model_version: u32,
    pub final_model: HmmModel,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{error}")]
pub struct RunError {
    #[source]
    pub error: PipelineError,
    /// Results up to the failure.
    pub partial: Box<AnnotationRun>,
}

/// Label history carried into a run and grown by it; the source of every
/// re-estimation.
#[derive(Debug, Clone)]
pub struct TrainingHistory {
    pub transitions: TransitionCounts,
    /// (classifier decision, manual label) pairs.
    pub confusion: ConfusionCounts,
}

impl TrainingHistory {
    pub fn new(n_states: usize) -> Self {
        Self {
            transitions: TransitionCounts::new(n_states),
            confusion: ConfusionCounts::new(n_states),
        }
    }
}

/// Runs the full flow with no prior label history.
pub fn run_pipeline<A: Annotator + ?Sized>(
    records: &[FrameRecord],
    initial_model: &HmmModel,
    params: &PipelineParams,
    annotator: &mut A,
) -> Result<AnnotationRun, RunError> {
    let history = TrainingHistory::new(initial_model.n_states());
    run_pipeline_with_history(records, initial_model, params, history, annotator)
}

/// Runs the full flow; re-estimations pool `history` with this run's labels.
pub fn run_pipeline_with_history<A: Annotator + ?Sized>(
    records: &[FrameRecord],
    initial_model: &HmmModel,
    params: &PipelineParams,
    history: TrainingHistory,
    annotator: &mut A,
) -> Result<AnnotationRun, RunError> {
    let mut runner = Runner {
        model: initial_model.clone(),
        params,
        history,
        labels: Vec::new(),
        packets: Vec::new(),
        counters: RunCounters::default(),
        model_version: 0,
        next_retrain: params.retrain_interval as u64,
    };
    match runner.run(records, annotator) {
        Ok(()) => Ok(runner.finish()),
        Err(error) => Err(RunError {
            error,
            partial: Box::new(runner.finish()),
        }),
    }
}

struct Runner<'p> {
    model: HmmModel,
    params: &'p PipelineParams,
    history: TrainingHistory,
    labels: Vec<LabelRecord>,
    packets: Vec<AnnotationPacket>,
    counters: RunCounters,
    model_version: u32,
    next_retrain: u64,
}

impl Runner<'_> {
    fn run<A: Annotator + ?Sized>(
        &mut self,
        records: &[FrameRecord],
        annotator: &mut A,
    ) -> Result<(), PipelineError> {
        self.params.validate()?;
        validate_records(records, self.model.n_states())?;
        let segments = segment_frames(records)?;
        self.counters.total_frames = segments.iter().map(|s| s.len as u64).sum();

        for seg in &segments {
            let frames = seg.records(records);
            let outcome = process_segment(seg.id, frames, &self.model, self.params)?;
            self.counters.change_points += outcome.changes.len() as u64;

            let mut seg_labels = outcome.labels;
            for l in &seg_labels {
                self.counters.auto_frames += 1;
                match l.source {
                    LabelSource::AutoStable => self.counters.auto_stable += 1,
                    _ => self.counters.auto_confident += 1,
                }
            }

            if !outcome.packets.is_empty() {
                let answers = annotator.annotate_batch(&outcome.packets)?;
                for (packet, answer) in outcome.packets.into_iter().zip(answers) {
                    let manual = self.check_answer(&packet, answer)?;
                    for label in &manual {
                        let pos = frames
                            .binary_search_by_key(&label.frame_index, |r| r.frame_index)
                            .expect("packet frames lie in their segment");
                        let rec = &frames[pos];
                        let decision = classify(rec.class_probs.as_deref().unwrap_or(&[]));
                        self.history.confusion.add(decision, label.state)?;
                        seg_labels.push(LabelRecord {
                            frame_index: label.frame_index,
                            state: label.state,
                            source: LabelSource::Manual,
                        });
                    }
                    self.counters.manual_frames += manual.len() as u64;
                    self.counters.count_packet(packet.reason);
                    self.packets.push(packet);
                    self.maybe_retrain(annotator)?;
                }
            }

            seg_labels.sort_by_key(|l| l.frame_index);
            debug_assert_eq!(seg_labels.len(), seg.len);
            let states: Vec<StateIndex> = seg_labels.iter().map(|l| l.state).collect();
            self.history.transitions.add_segment(&states)?;
            annotator.observe(RunEvent::SegmentFinished {
                segment_id: seg.id,
                labels: &seg_labels,
            });
            self.labels.extend(seg_labels);
        }
        annotator.observe(RunEvent::Finished);
        Ok(())
    }

    fn check_answer(
        &self,
        packet: &AnnotationPacket,
        mut answer: Vec<FrameLabel>,
    ) -> Result<Vec<FrameLabel>, PipelineError> {
        answer.sort_by_key(|l| l.frame_index);
        let got: Vec<u64> = answer.iter().map(|l| l.frame_index).collect();
        let n = self.model.n_states();
        if got != packet.frames {
            return Err(PipelineError::IncompleteAnnotation {
                segment_id: packet.segment_id,
                missing: packet.frames.iter().copied().filter(|f| !got.contains(f)).collect(),
                extra: got.into_iter().filter(|f| !packet.frames.contains(f)).collect(),
            });
        }
        if let Some(bad) = answer.iter().find(|l| l.state >= n) {
            return Err(PipelineError::Annotator(AnnotatorError(format!(
                "state {} for frame {} is outside the state space",
                bad.state, bad.frame_index
            ))));
        }
        Ok(answer)
    }

    fn maybe_retrain<A: Annotator + ?Sized>(&mut self, annotator: &mut A) -> Result<(), PipelineError> {
        let interval = self.params.retrain_interval as u64;
        if interval == 0 || self.counters.manual_frames < self.next_retrain {
            return Ok(());
        }
        while self.next_retrain <= self.counters.manual_frames {
            self.next_retrain += interval;
        }
        let alpha = self.params.smoothing_alpha;
        let mut model = self.model.clone();
        match self.history.transitions.estimate(alpha) {
            Ok(chain) => model = model.with_chain(chain)?,
            Err(e) => debug!("keeping transitions: {e}"),
        }
        match self.history.confusion.estimate(alpha) {
            Ok(emission) => model = model.with_emission(emission)?,
            Err(e) => debug!("keeping emission: {e}"),
        }
        self.model = model;
        self.model_version += 1;
        annotator.observe(RunEvent::Retrained {
            version: self.model_version,
            model: &self.model,
        });
        Ok(())
    }

    fn finish(&mut self) -> AnnotationRun {
        AnnotationRun {
            labels: std::mem::take(&mut self.labels),
            packets: std::mem::take(&mut self.packets),
            counters: std::mem::take(&mut self.counters),
            model_version: self.model_version,
            final_model: self.model.clone(),
        }
    }
}
