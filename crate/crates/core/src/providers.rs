//! Frame-record sources: a seeded statistical simulator standing in for a
//! real classifier/change-detector stack, and the line-oriented record format
//! used to exchange streams with external tools.
//!
//! # Record format
//!
//! Plain UTF-8 text, one record per line, tab-separated fields:
//!
//! ```text
//! #states<TAB>Road<TAB>Center Stack<TAB>...
//! <frame_index><TAB><0|1><TAB><p_0,p_1,...|null><TAB><change_score|null><TAB><state name|null>
//! ```
//!
//! Decimals are written in shortest round-trip form with a `.` separator, so
//! `parse(serialize(stream)) == stream` holds bit for bit. Lines starting with
//! `#` after the header are comments.

use std::io::{BufRead, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::hmm::{HmmError, StateIndex, StateSpace, STOCHASTIC_TOLERANCE};
use crate::pipeline::{validate_records, FrameRecord, PipelineError, PROBABILITY_TOLERANCE};

/// Change-score threshold at which `change_tpr` / `change_fpr` are calibrated.
pub const CALIBRATION_DELTA: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("invalid simulator config: {0}")]
    Config(String),
    #[error("record stream is empty")]
    Empty,
    #[error("line 1: expected a '#states' header")]
    MissingHeader,
    #[error("line {line}, field {field}: {message}")]
    Line {
        line: usize,
        field: &'static str,
        message: String,
    },
    #[error(transparent)]
    States(#[from] HmmError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A state space and its frame records in stream order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordStream {
    pub states: StateSpace,
    pub records: Vec<FrameRecord>,
}

// ---------------------------------------------------------------------------
// Simulator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub states: StateSpace,
    /// Hidden-state dynamics, one step per frame.
    pub true_transitions: Vec<Vec<f64>>,
    /// Distribution of the first hidden state; uniform when absent.
    pub initial: Option<Vec<f64>>,
    /// `emission[truth][decision]`: distribution of the classifier's argmax.
    pub emission: Vec<Vec<f64>>,
    /// Long-run fraction of frames with the object present.
    pub presence_rate: f64,
    /// Mean length of an absence run in frames. `1 / presence_rate` makes
    /// presence independent per frame; larger values make dropouts bursty.
    pub mean_absence_run: f64,
    /// P(change_score >= 0.5) at a true state transition.
    pub change_tpr: f64,
    /// P(change_score >= 0.5) everywhere else.
    pub change_fpr: f64,
    /// Standard deviation of the (truncated normal) change-score distributions.
    pub score_noise: f64,
    /// Top-two probability ratio separating confident from unconfident outputs.
    pub confidence_anchor: f64,
    /// P(ratio >= confidence_anchor) when the decision is correct.
    pub confident_correct: f64,
    /// P(ratio >= confidence_anchor) when the decision is wrong.
    pub confident_wrong: f64,
    /// Probability that a frame repeats the previous frame's classifier output
    /// while the hidden state is unchanged. Preserves the emission marginals.
    pub decision_persistence: f64,
    pub length: usize,
    pub seed: u64,
}

/// Six-region confusion matrix whose diagonal averages 0.754, with most
/// off-diagonal mass on neighbouring regions.
pub fn gaze_emission() -> Vec<Vec<f64>> {
    const DIAGONAL: [f64; 6] = [0.85, 0.70, 0.72, 0.78, 0.75, 0.724];
    // Road, Center Stack, Instrument Cluster, Rearview Mirror, Left, Right
    const NEIGHBOURS: [&[usize]; 6] = [&[2, 3, 4, 5], &[2, 5], &[0, 1], &[0, 5], &[0], &[0, 1, 3]];
    const NEIGHBOUR_SHARE: f64 = 0.7;
    (0..6)
        .map(|k| {
            let off = 1.0 - DIAGONAL[k];
            let near = NEIGHBOURS[k];
            let far = 5 - near.len();
            let near_share = if far == 0 { 1.0 } else { NEIGHBOUR_SHARE };
            (0..6)
                .map(|j| {
                    if j == k {
                        DIAGONAL[k]
                    } else if near.contains(&j) {
                        off * near_share / near.len() as f64
                    } else {
                        off * (1.0 - near_share) / far as f64
                    }
                })
                .collect()
        })
        .collect()
}

/// Glance dynamics: long dwells, and off-road glances mostly return to the road.
pub fn gaze_transitions() -> Vec<Vec<f64>> {
    const STAY: [f64; 6] = [0.997, 0.985, 0.985, 0.985, 0.985, 0.985];
    const TO_ROAD: f64 = 0.6;
    (0..6)
        .map(|k| {
            let off = 1.0 - STAY[k];
            (0..6)
                .map(|j| match (k, j) {
                    _ if j == k => STAY[k],
                    (0, _) => off / 5.0,
                    (_, 0) => off * TO_ROAD,
                    _ => off * (1.0 - TO_ROAD) / 4.0,
                })
                .collect()
        })
        .collect()
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            states: StateSpace::gaze_regions(),
            true_transitions: gaze_transitions(),
            initial: None,
            emission: gaze_emission(),
            presence_rate: 0.794,
            mean_absence_run: 4.0,
            change_tpr: 0.9,
            change_fpr: 0.001,
            score_noise: 0.15,
            confidence_anchor: 10.0,
            confident_correct: 0.55,
            confident_wrong: 0.096,
            decision_persistence: 0.0,
            length: 100_000,
            seed: 0x5eed,
        }
    }
}

fn check_row(what: &str, row: &[f64], n: usize) -> Result<(), ProviderError> {
    let bad = |m: String| Err(ProviderError::Config(format!("{what}: {m}")));
    if row.len() != n {
        return bad(format!("expected {n} entries, got {}", row.len()));
    }
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return bad("entries must be finite and non-negative".into());
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > STOCHASTIC_TOLERANCE {
        return bad(format!("sums to {sum}"));
    }
    Ok(())
}

fn check_unit(what: &str, p: f64) -> Result<(), ProviderError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(ProviderError::Config(format!("{what} = {p} is not a probability")))
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), ProviderError> {
        let n = self.states.len();
        if self.length == 0 {
            return Err(ProviderError::Config("length must be positive".into()));
        }
        if self.true_transitions.len() != n || self.emission.len() != n {
            return Err(ProviderError::Config(format!("matrices must have {n} rows")));
        }
        for row in &self.true_transitions {
            check_row("true_transitions", row, n)?;
        }
        for row in &self.emission {
            check_row("emission", row, n)?;
        }
        if let Some(init) = &self.initial {
            check_row("initial", init, n)?;
        }
        for (what, p) in [
            ("presence_rate", self.presence_rate),
            ("change_tpr", self.change_tpr),
            ("change_fpr", self.change_fpr),
            ("confident_correct", self.confident_correct),
            ("confident_wrong", self.confident_wrong),
        ] {
            check_unit(what, p)?;
        }
        if !(0.0..1.0).contains(&self.decision_persistence) {
            return Err(ProviderError::Config("decision_persistence must lie in [0, 1)".into()));
        }
        if self.presence_rate > 0.0 && self.presence_rate < 1.0 {
            let leave_absence = 1.0 / self.mean_absence_run;
            if !(leave_absence > 0.0 && leave_absence <= 1.0)
                || leave_absence * (1.0 - self.presence_rate) / self.presence_rate > 1.0
            {
                return Err(ProviderError::Config(format!(
                    "mean_absence_run {} is incompatible with presence_rate {}",
                    self.mean_absence_run, self.presence_rate
                )));
            }
        }
        if !(self.score_noise > 0.0 && self.score_noise.is_finite()) {
            return Err(ProviderError::Config("score_noise must be positive".into()));
        }
        if !(self.confidence_anchor > 1.0 && self.confidence_anchor.is_finite()) {
            return Err(ProviderError::Config("confidence_anchor must exceed 1".into()));
        }
        Ok(())
    }
}

/// Normal(mean, sd) truncated to [0, 1], sampled by inverse CDF.
#[derive(Debug, Clone)]
struct UnitTruncatedNormal {
    mean: f64,
    sd: f64,
    lo: f64,
    hi: f64,
}

impl UnitTruncatedNormal {
    fn new(mean: f64, sd: f64) -> Self {
        let std = Normal::standard();
        Self {
            mean,
            sd,
            lo: std.cdf(-mean / sd),
            hi: std.cdf((1.0 - mean) / sd),
        }
    }

    /// Mean whose truncated distribution puts `tail` mass at or above `at`.
    fn calibrated(tail: f64, at: f64, sd: f64) -> Self {
        let tail_of = |mean: f64| {
            let d = Self::new(mean, sd);
            let above = Normal::standard().cdf((at - mean) / sd);
            (d.hi - above) / (d.hi - d.lo)
        };
        let (mut lo, mut hi) = (-10.0 * sd - 1.0, 1.0 + 10.0 * sd);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if tail_of(mid) < tail {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Self::new(0.5 * (lo + hi), sd)
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let u = self.lo + (self.hi - self.lo) * rng.random::<f64>();
        let x = self.mean + self.sd * Normal::standard().inverse_cdf(u.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON));
        x.clamp(0.0, 1.0)
    }
}

/// One classifier output: the argmax decision and whether it clears the
/// confidence anchor.
#[derive(Debug, Clone, Copy)]
struct Decision {
    state: StateIndex,
    confident: bool,
    ratio_draw: f64,
}

fn class_probs<R: Rng>(
    n: usize,
    decision: Decision,
    truth: StateIndex,
    anchor: f64,
    rng: &mut R,
) -> Vec<f64> {
    const FLOOR_RATIO: f64 = 1.1;
    let ratio = if decision.confident {
        anchor * 4f64.powf(decision.ratio_draw)
    } else {
        FLOOR_RATIO * (anchor / FLOOR_RATIO).powf(0.98 * decision.ratio_draw)
    };
    let runner_up = if decision.state != truth {
        truth
    } else {
        let k = rng.random_range(0..n - 1);
        if k >= decision.state {
            k + 1
        } else {
            k
        }
    };
    let mut weights: Vec<f64> = (0..n)
        .map(|i| {
            if i == decision.state {
                ratio
            } else if i == runner_up {
                1.0
            } else {
                0.9 * rng.random::<f64>()
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    weights
}

fn weighted(rows: &[Vec<f64>]) -> Result<Vec<WeightedIndex<f64>>, ProviderError> {
    rows.iter()
        .map(|r| WeightedIndex::new(r).map_err(|e| ProviderError::Config(e.to_string())))
        .collect()
}

/// Generates a stream with ground truth. Deterministic in `config.seed`.
pub fn simulate_records(config: &SimConfig) -> Result<RecordStream, ProviderError> {
    config.validate()?;
    let n = config.states.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let transitions = weighted(&config.true_transitions)?;
    let emission = weighted(&config.emission)?;
    let initial = match &config.initial {
        Some(p) => WeightedIndex::new(p).map_err(|e| ProviderError::Config(e.to_string()))?,
        None => WeightedIndex::new(vec![1.0; n]).expect("uniform weights"),
    };
    let on_change = UnitTruncatedNormal::calibrated(config.change_tpr, CALIBRATION_DELTA, config.score_noise);
    let off_change = UnitTruncatedNormal::calibrated(config.change_fpr, CALIBRATION_DELTA, config.score_noise);

    let p = config.presence_rate;
    let (leave_presence, leave_absence) = if p <= 0.0 || p >= 1.0 {
        (1.0 - p, p)
    } else {
        let r = 1.0 / config.mean_absence_run;
        (r * (1.0 - p) / p, r)
    };

    let mut records = Vec::with_capacity(config.length);
    let mut truth = initial.sample(&mut rng);
    let mut present = rng.random_bool(p);
    let mut last: Option<(StateIndex, Decision)> = None;

    for frame in 0..config.length {
        if frame > 0 {
            let prev_truth = truth;
            truth = transitions[truth].sample(&mut rng);
            present = if present {
                !rng.random_bool(leave_presence)
            } else {
                rng.random_bool(leave_absence)
            };
            if prev_truth != truth {
                last = None;
            }
        }
        if !present {
            last = None;
            records.push(FrameRecord {
                ground_truth: Some(truth),
                ..FrameRecord::absent(frame as u64)
            });
            continue;
        }

        let repeat = match last {
            Some((_, d)) if rng.random_bool(config.decision_persistence) => Some(d),
            _ => None,
        };
        let decision = repeat.unwrap_or_else(|| {
            let state = emission[truth].sample(&mut rng);
            let rate = if state == truth {
                config.confident_correct
            } else {
                config.confident_wrong
            };
            Decision {
                state,
                confident: rng.random_bool(rate),
                ratio_draw: rng.random(),
            }
        });
        let probs = class_probs(n, decision, truth, config.confidence_anchor, &mut rng);

        let change_score = match records.last() {
            Some(prev) if prev.object_present => {
                let moved = prev.ground_truth != Some(truth);
                Some(if moved { on_change.sample(&mut rng) } else { off_change.sample(&mut rng) })
            }
            _ => None,
        };
        records.push(FrameRecord {
            frame_index: frame as u64,
            object_present: true,
            class_probs: Some(probs),
            change_score,
            ground_truth: Some(truth),
        });
        last = Some((truth, decision));
    }

    Ok(RecordStream {
        states: config.states.clone(),
        records,
    })
}

// ---------------------------------------------------------------------------
// Text format
// ---------------------------------------------------------------------------

const NULL: &str = "null";
const HEADER: &str = "#states";

/// The `#states` header for `states`, without the newline.
pub fn header_line(states: &StateSpace) -> String {
    std::iter::once(HEADER)
        .chain(states.names().iter().map(String::as_str))
        .collect::<Vec<_>>()
        .join("\t")
}

pub fn write_records<W: Write>(stream: &RecordStream, mut out: W) -> Result<(), ProviderError> {
    writeln!(out, "{}", header_line(&stream.states))?;
    for r in &stream.records {
        write!(out, "{}\t{}\t", r.frame_index, u8::from(r.object_present))?;
        match &r.class_probs {
            Some(probs) => {
                for (i, p) in probs.iter().enumerate() {
                    if i > 0 {
                        out.write_all(b",")?;
                    }
                    write!(out, "{p}")?;
                }
            }
            None => out.write_all(NULL.as_bytes())?,
        }
        match r.change_score {
            Some(s) => write!(out, "\t{s}")?,
            None => write!(out, "\t{NULL}")?,
        }
        let truth = r
            .ground_truth
            .and_then(|t| stream.states.name(t))
            .unwrap_or(NULL);
        writeln!(out, "\t{truth}")?;
    }
    Ok(())
}

pub fn records_to_string(stream: &RecordStream) -> String {
    let mut buf = Vec::new();
    write_records(stream, &mut buf).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("record format is UTF-8")
}

/// Parses a `#states` header line into a state space.
pub fn parse_header(line: &str) -> Result<StateSpace, ProviderError> {
    let mut fields = line.trim_end_matches(['\r', '\n']).split('\t');
    if fields.next() != Some(HEADER) {
        return Err(ProviderError::MissingHeader);
    }
    StateSpace::new(fields).map_err(|e| ProviderError::Line {
        line: 1,
        field: "states",
        message: e.to_string(),
    })
}

fn parse_f64(s: &str, line: usize, field: &'static str) -> Result<f64, ProviderError> {
    let v: f64 = s.parse().map_err(|_| ProviderError::Line {
        line,
        field,
        message: format!("{s:?} is not a decimal number"),
    })?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(ProviderError::Line {
            line,
            field,
            message: format!("{s:?} is not finite"),
        })
    }
}

fn parse_line(text: &str, line: usize, states: &StateSpace) -> Result<FrameRecord, ProviderError> {
    let err = |field, message: String| ProviderError::Line { line, field, message };
    let fields: Vec<&str> = text.split('\t').collect();
    if fields.len() != 5 {
        return Err(err("record", format!("expected 5 tab-separated fields, got {}", fields.len())));
    }
    let frame_index = fields[0]
        .parse::<u64>()
        .map_err(|_| err("frame_index", format!("{:?} is not a non-negative integer", fields[0])))?;
    let object_present = match fields[1] {
        "0" => false,
        "1" => true,
        other => return Err(err("object_present", format!("{other:?} is not 0 or 1"))),
    };
    let class_probs = match fields[2] {
        NULL => None,
        list => {
            let probs = list
                .split(',')
                .map(|p| parse_f64(p, line, "class_probs"))
                .collect::<Result<Vec<_>, _>>()?;
            if probs.len() != states.len() {
                return Err(err(
                    "class_probs",
                    format!("{} values for {} states", probs.len(), states.len()),
                ));
            }
            let sum: f64 = probs.iter().sum();
            if (sum - 1.0).abs() > PROBABILITY_TOLERANCE || probs.iter().any(|p| *p < 0.0) {
                return Err(err("class_probs", format!("not a probability vector (sum {sum})")));
            }
            Some(probs)
        }
    };
    let change_score = match fields[3] {
        NULL => None,
        s => Some(parse_f64(s, line, "change_score")?),
    };
    let ground_truth = match fields[4] {
        NULL => None,
        name => Some(
            states
                .index_of(name)
                .ok_or_else(|| err("ground_truth", format!("unknown state {name:?}")))?,
        ),
    };
    Ok(FrameRecord {
        frame_index,
        object_present,
        class_probs,
        change_score,
        ground_truth,
    })
}

/// Reads a record stream, validating every record invariant.
pub fn parse_records<R: BufRead>(input: R) -> Result<RecordStream, ProviderError> {
    let mut lines = input.lines();
    let header = match lines.next() {
        Some(line) => line?,
        None => return Err(ProviderError::Empty),
    };
    let states = parse_header(&header)?;
    let mut records = Vec::new();
    // Line number of each record, for cross-record errors.
    let mut line_of = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let text = line?;
        let text = text.trim_end_matches('\r');
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        records.push(parse_line(text, line_no, &states)?);
        line_of.push(line_no);
    }
    if records.is_empty() {
        return Err(ProviderError::Empty);
    }
    validate_records(&records, states.len()).map_err(|e| {
        let (field, position) = match &e {
            PipelineError::NonMonotoneFrameIndex { position, .. } => ("frame_index", *position),
            PipelineError::InvalidRecord { frame_index, .. } => (
                "record",
                records.iter().position(|r| r.frame_index == *frame_index).unwrap_or(0),
            ),
            _ => ("record", 0),
        };
        ProviderError::Line {
            line: line_of[position],
            field,
            message: e.to_string(),
        }
    })?;
    Ok(RecordStream { states, records })
}

pub fn parse_records_str(text: &str) -> Result<RecordStream, ProviderError> {
    parse_records(text.as_bytes())
}
