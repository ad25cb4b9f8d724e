//! Oracle replay, effort/accuracy metrics and parameter sweeps.
//!
//! Every queued frame is answered with its ground truth, so manual labels are
//! correct by construction and every labelling error comes from an automatic
//! label. Effort reduction is the number of in-segment frames per manually
//! labelled frame.

use std::io::Write;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hmm::{ConfusionCounts, HmmError, HmmModel, TransitionCounts};
use crate::pipeline::{
    classify, run_pipeline_with_history, segment_frames, validate_records, AnnotationRun, FrameRecord,
    GroundTruthAnnotator, LabelSource, PipelineError, PipelineParams, RunError, TrainingHistory,
};
use crate::providers::{parse_records, simulate_records, ProviderError, RecordStream, SimConfig};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("frame {frame_index} is inside a segment but has no ground truth")]
    MissingGroundTruth { frame_index: u64 },
    #[error("invalid sweep spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("run failed after {} labels: {}", .0.partial.labels.len(), .0.error)]
    Run(#[from] RunError),
    #[error(transparent)]
    Model(#[from] HmmError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Frame counts split by the source of the final label.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCounts {
    pub manual: u64,
    pub auto_stable: u64,
    pub auto_confident: u64,
}

impl SourceCounts {
    fn bump(&mut self, source: LabelSource) {
        match source {
            LabelSource::Manual => self.manual += 1,
            LabelSource::AutoStable => self.auto_stable += 1,
            LabelSource::AutoConfident => self.auto_confident += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.manual + self.auto_stable + self.auto_confident
    }

    fn add(&mut self, other: &Self) {
        self.manual += other.manual;
        self.auto_stable += other.auto_stable;
        self.auto_confident += other.auto_confident;
    }
}

/// One evaluated parameter setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub params: PipelineParams,
    /// In-segment frames.
    pub total_frames: u64,
    pub manual_frames: u64,
    pub auto_frames: u64,
    /// `total_frames / manual_frames`, or `total_frames` when nothing was manual.
    pub reduction_factor: f64,
    /// Fraction of in-segment frames whose final label equals ground truth.
    pub accuracy: f64,
    /// Set when no frame needed a human.
    pub no_manual: bool,
    pub labels_by_source: SourceCounts,
    pub errors_by_source: SourceCounts,
    pub model_version: u32,
    /// Runs pooled into this point.
    pub repetitions: u32,
    pub pareto: bool,
}

impl TradeoffPoint {
    fn from_counts(params: PipelineParams, labels: SourceCounts, errors: SourceCounts, model_version: u32, repetitions: u32) -> Self {
        let total = labels.total();
        let manual = labels.manual;
        let wrong = errors.total();
        Self {
            params,
            total_frames: total,
            manual_frames: manual,
            auto_frames: labels.auto_stable + labels.auto_confident,
            reduction_factor: if manual > 0 { total as f64 / manual as f64 } else { total as f64 },
            accuracy: if total > 0 { (total - wrong) as f64 / total as f64 } else { 1.0 },
            no_manual: manual == 0,
            labels_by_source: labels,
            errors_by_source: errors,
            model_version,
            repetitions,
            pareto: false,
        }
    }
}

/// Scores a finished run against the records' ground truth.
pub fn score_run(records: &[FrameRecord], run: &AnnotationRun, params: &PipelineParams) -> Result<TradeoffPoint, EvalError> {
    let (labels, errors) = tally(records, run)?;
    Ok(TradeoffPoint::from_counts(params.clone(), labels, errors, run.model_version, 1))
}

fn tally(records: &[FrameRecord], run: &AnnotationRun) -> Result<(SourceCounts, SourceCounts), EvalError> {
    let mut labels = SourceCounts::default();
    let mut errors = SourceCounts::default();
    let mut recs = records.iter();
    for l in &run.labels {
        let rec = recs
            .find(|r| r.frame_index == l.frame_index)
            .expect("run labels follow record order");
        let truth = rec
            .ground_truth
            .ok_or(EvalError::MissingGroundTruth { frame_index: l.frame_index })?;
        labels.bump(l.source);
        if l.state != truth {
            errors.bump(l.source);
        }
    }
    Ok((labels, errors))
}

fn check_ground_truth(records: &[FrameRecord]) -> Result<(), EvalError> {
    match records.iter().find(|r| r.object_present && r.ground_truth.is_none()) {
        Some(r) => Err(EvalError::MissingGroundTruth { frame_index: r.frame_index }),
        None => Ok(()),
    }
}

/// Runs the pipeline with an oracle annotator and scores the result.
pub fn replay_metrics(records: &[FrameRecord], model: &HmmModel, params: &PipelineParams) -> Result<TradeoffPoint, EvalError> {
    replay_metrics_with_history(records, model, params, TrainingHistory::new(model.n_states()))
}

/// [`replay_metrics`] with label history from earlier annotation pooled into
/// re-estimation.
pub fn replay_metrics_with_history(
    records: &[FrameRecord],
    model: &HmmModel,
    params: &PipelineParams,
    history: TrainingHistory,
) -> Result<TradeoffPoint, EvalError> {
    check_ground_truth(records)?;
    let mut oracle = GroundTruthAnnotator::new(records);
    let run = run_pipeline_with_history(records, model, params, history, &mut oracle)?;
    score_run(records, &run, params)
}

// ---------------------------------------------------------------------------
// Seeding
// ---------------------------------------------------------------------------

/// Initial model and label history from a manually annotated stream prefix.
#[derive(Debug, Clone)]
pub struct Seeded {
    pub model: HmmModel,
    pub history: TrainingHistory,
    /// Records consumed by the seed; replay starts here.
    pub split: usize,
}

/// Treats at least the first `seed_frames` records as manually annotated.
///
/// The prefix is extended to the next absent frame so no segment straddles
/// the split. Priors and transitions come from the prefix's ground-truth
/// segments, emission from its (decision, truth) pairs.
pub fn seed_model(stream: &RecordStream, seed_frames: usize, alpha: f64) -> Result<Seeded, EvalError> {
    let records = &stream.records;
    let n = stream.states.len();
    let mut split = seed_frames.min(records.len());
    while split < records.len() && split > 0 && records[split].object_present && records[split - 1].object_present {
        split += 1;
    }
    let prefix = &records[..split];
    check_ground_truth(prefix)?;

    let mut transitions = TransitionCounts::new(n);
    let mut confusion = ConfusionCounts::new(n);
    for seg in segment_frames(prefix)? {
        let frames = seg.records(prefix);
        let truth: Vec<_> = frames.iter().filter_map(|r| r.ground_truth).collect();
        transitions.add_segment(&truth)?;
        for (r, &t) in frames.iter().zip(&truth) {
            confusion.add(classify(r.class_probs.as_deref().unwrap_or(&[])), t)?;
        }
    }
    let chain = transitions.estimate(alpha)?;
    let emission = confusion.estimate(alpha)?;
    let model = HmmModel::new(stream.states.clone(), chain.priors, chain.transitions, emission)?;
    Ok(Seeded {
        model,
        history: TrainingHistory { transitions, confusion },
        split,
    })
}

/// Seeds on the prefix, then replays the rest with the oracle annotator.
pub fn evaluate_stream(stream: &RecordStream, params: &PipelineParams, seed_frames: usize) -> Result<TradeoffPoint, EvalError> {
    params.validate()?;
    validate_records(&stream.records, stream.states.len())?;
    let seeded = seed_model(stream, seed_frames, params.smoothing_alpha)?;
    replay_metrics_with_history(&stream.records[seeded.split..], &seeded.model, params, seeded.history)
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// Where a sweep's streams come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepSource {
    /// Simulated; repetition `r` uses seed `config.seed + r`.
    Simulation(SimConfig),
    /// A record file; only one repetition makes sense.
    Records(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub delta_min: Vec<f64>,
    /// Empty means `base.c_min` only.
    pub c_min: Vec<f64>,
    /// Empty means `base.v_u_min` only.
    pub v_u_min: Vec<f64>,
    /// Values for every parameter not on a grid axis.
    pub base: PipelineParams,
    pub source: SweepSource,
    pub repetitions: u32,
    pub seed_frames: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            delta_min: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            c_min: Vec::new(),
            v_u_min: Vec::new(),
            base: PipelineParams::default(),
            source: SweepSource::Simulation(SimConfig {
                length: 1_000_000,
                ..SimConfig::default()
            }),
            repetitions: 1,
            seed_frames: 20_000,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.delta_min.is_empty() {
            return Err(EvalError::Spec("delta_min grid is empty".into()));
        }
        if self.repetitions == 0 {
            return Err(EvalError::Spec("repetitions must be positive".into()));
        }
        if matches!(self.source, SweepSource::Records(_)) && self.repetitions != 1 {
            return Err(EvalError::Spec("a record file supports exactly one repetition".into()));
        }
        for p in self.grid() {
            p.validate()?;
        }
        Ok(())
    }

    /// Grid points in order: delta_min outermost, then c_min, then v_u_min.
    pub fn grid(&self) -> Vec<PipelineParams> {
        let or_base = |axis: &[f64], base: f64| if axis.is_empty() { vec![base] } else { axis.to_vec() };
        let c_axis = or_base(&self.c_min, self.base.c_min);
        let v_axis = or_base(&self.v_u_min, self.base.v_u_min);
        let mut out = Vec::new();
        for &delta_min in &self.delta_min {
            for &c_min in &c_axis {
                for &v_u_min in &v_axis {
                    out.push(PipelineParams {
                        delta_min,
                        c_min,
                        v_u_min,
                        ..self.base.clone()
                    });
                }
            }
        }
        out
    }

    fn streams(&self) -> Result<Vec<RecordStream>, EvalError> {
        match &self.source {
            SweepSource::Simulation(config) => (0..self.repetitions)
                .into_par_iter()
                .map(|r| {
                    let config = SimConfig {
                        seed: config.seed.wrapping_add(u64::from(r)),
                        ..config.clone()
                    };
                    Ok(simulate_records(&config)?)
                })
                .collect(),
            SweepSource::Records(path) => {
                let file = std::fs::File::open(path)?;
                Ok(vec![parse_records(std::io::BufReader::new(file))?])
            }
        }
    }
}

/// Outcome of one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub params: PipelineParams,
    pub result: Result<TradeoffPoint, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn points(&self) -> impl Iterator<Item = &TradeoffPoint> {
        self.rows.iter().filter_map(|r| r.result.as_ref().ok())
    }

    /// Pareto-optimal points ordered by increasing reduction factor.
    pub fn frontier(&self) -> Vec<&TradeoffPoint> {
        let mut f: Vec<_> = self.points().filter(|p| p.pareto).collect();
        f.sort_by(|a, b| a.reduction_factor.total_cmp(&b.reduction_factor).then(b.accuracy.total_cmp(&a.accuracy)));
        f
    }

    /// One CSV line per grid point; failed points leave the metric fields empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), EvalError> {
        #[derive(Serialize)]
        struct Line {
            delta_min: f64,
            c_min: f64,
            v_u_min: f64,
            total_frames: Option<u64>,
            manual_frames: Option<u64>,
            reduction_factor: Option<f64>,
            accuracy: Option<f64>,
            pareto: u8,
        }
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            let ok = row.result.as_ref().ok();
            w.serialize(Line {
                delta_min: row.params.delta_min,
                c_min: row.params.c_min,
                v_u_min: row.params.v_u_min,
                total_frames: ok.map(|p| p.total_frames),
                manual_frames: ok.map(|p| p.manual_frames),
                reduction_factor: ok.map(|p| p.reduction_factor),
                accuracy: ok.map(|p| p.accuracy),
                pareto: u8::from(ok.is_some_and(|p| p.pareto)),
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String, EvalError> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
    }
}

/// Marks points not dominated in both reduction factor and accuracy.
/// Identical points are all kept.
pub fn mark_pareto(points: &mut [TradeoffPoint]) {
    let dominated: Vec<bool> = points
        .iter()
        .map(|p| {
            points.iter().any(|q| {
                q.reduction_factor >= p.reduction_factor
                    && q.accuracy >= p.accuracy
                    && (q.reduction_factor > p.reduction_factor || q.accuracy > p.accuracy)
            })
        })
        .collect();
    for (p, d) in points.iter_mut().zip(dominated) {
        p.pareto = !d;
    }
}

fn pool(params: PipelineParams, runs: &[TradeoffPoint]) -> TradeoffPoint {
    let mut labels = SourceCounts::default();
    let mut errors = SourceCounts::default();
    for r in runs {
        labels.add(&r.labels_by_source);
        errors.add(&r.errors_by_source);
    }
    let version = runs.iter().map(|r| r.model_version).max().unwrap_or(0);
    TradeoffPoint::from_counts(params, labels, errors, version, runs.len() as u32)
}

/// Evaluates every grid point on every repetition's stream.
///
/// Repetitions are pooled by summing frame counts. A failing point is
/// reported in its row without stopping the others. Output order follows
/// [`SweepSpec::grid`] regardless of scheduling.
pub fn sweep(spec: &SweepSpec) -> Result<SweepResult, EvalError> {
    spec.validate()?;
    let streams = spec.streams()?;
    let alpha = spec.base.smoothing_alpha;
    let seeds: Vec<Result<Seeded, String>> = streams
        .par_iter()
        .map(|s| {
            validate_records(&s.records, s.states.len()).map_err(|e| e.to_string())?;
            seed_model(s, spec.seed_frames, alpha).map_err(|e| e.to_string())
        })
        .collect();

    let grid = spec.grid();
    let jobs: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|g| (0..streams.len()).map(move |s| (g, s)))
        .collect();
    let outcomes: Vec<Result<TradeoffPoint, String>> = jobs
        .par_iter()
        .map(|&(g, s)| {
            let seeded = seeds[s].as_ref().map_err(Clone::clone)?;
            let records = &streams[s].records[seeded.split..];
            replay_metrics_with_history(records, &seeded.model, &grid[g], seeded.history.clone())
                .map_err(|e| e.to_string())
        })
        .collect();

    let mut rows: Vec<SweepRow> = grid
        .into_iter()
        .zip(outcomes.chunks(streams.len()))
        .map(|(params, runs)| {
            let result = runs
                .iter()
                .cloned()
                .collect::<Result<Vec<_>, String>>()
                .map(|runs| pool(params.clone(), &runs));
            SweepRow { params, result }
        })
        .collect();

    let mut ok: Vec<TradeoffPoint> = rows.iter().filter_map(|r| r.result.clone().ok()).collect();
    mark_pareto(&mut ok);
    let mut marked = ok.into_iter();
    for row in rows.iter_mut().filter(|r| r.result.is_ok()) {
        row.result = Ok(marked.next().expect("one marked point per successful row"));
    }
    Ok(SweepResult { rows })
}
