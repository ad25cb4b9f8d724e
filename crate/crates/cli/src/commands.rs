//! The work behind each subcommand, callable without a process boundary.

use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use stablelabel::evaluation::{evaluate_stream, replay_metrics, sweep as run_sweep, SweepResult, SweepSpec, TradeoffPoint};
use stablelabel::hmm::{HmmModel, StateSpace};
use stablelabel::pipeline::PipelineParams;
use stablelabel::providers::{parse_records, simulate_records, write_records, RecordStream, SimConfig};
use stablelabel::pupil::{extract_pupil, parse_polygon, GrayImage, PupilError};
use stablelabel::service::{AnnotationService, Clock};

/// Diagonal of the fallback emission matrix; the mean classifier accuracy
/// the simulator is built around.
pub const DEFAULT_DIAGONAL: f64 = 0.754;

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

pub fn load_records(path: &Path) -> Result<RecordStream> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    parse_records(BufReader::new(file)).with_context(|| format!("reading records from {}", path.display()))
}

fn load_params(path: Option<&Path>) -> Result<PipelineParams> {
    let params = match path {
        Some(p) => load_json(p)?,
        None => PipelineParams::default(),
    };
    params.validate()?;
    Ok(params)
}

/// Uniform chain with a flat confusion matrix: [`DEFAULT_DIAGONAL`] on the
/// diagonal, the rest spread evenly.
pub fn default_model(states: &StateSpace) -> Result<HmmModel> {
    let n = states.len();
    let off = (1.0 - DEFAULT_DIAGONAL) / (n - 1) as f64;
    let emission = (0..n)
        .map(|i| (0..n).map(|j| if i == j { DEFAULT_DIAGONAL } else { off }).collect())
        .collect();
    Ok(HmmModel::uniform_chain(states.clone(), emission)?)
}

fn load_model(path: Option<&Path>, states: &StateSpace) -> Result<HmmModel> {
    let Some(path) = path else {
        return default_model(states);
    };
    let model: HmmModel = load_json(path)?;
    anyhow::ensure!(
        model.states() == states,
        "model states {:?} do not match the records' {:?}",
        model.states().names(),
        states.names()
    );
    Ok(model)
}

pub fn simulate(config: Option<&Path>, out: &Path) -> Result<RecordStream> {
    let config: SimConfig = match config {
        Some(p) => load_json(p)?,
        None => SimConfig::default(),
    };
    let stream = simulate_records(&config)?;
    let file = File::create(out).with_context(|| format!("creating {}", out.display()))?;
    write_records(&stream, BufWriter::new(file))?;
    Ok(stream)
}

/// With a model, replays every record against it. Without one, the first
/// `seed_frames` frames estimate the model and the rest are replayed.
pub fn replay(
    records: &Path,
    params: Option<&Path>,
    model: Option<&Path>,
    seed_frames: usize,
    out: Option<&Path>,
) -> Result<TradeoffPoint> {
    let stream = load_records(records)?;
    let params = load_params(params)?;
    let point = match model {
        Some(_) => {
            let model = load_model(model, &stream.states)?;
            replay_metrics(&stream.records, &model, &params)?
        }
        None => evaluate_stream(&stream, &params, seed_frames)?,
    };
    if let Some(out) = out {
        write_json(&point, out)?;
    }
    Ok(point)
}

pub fn sweep(spec: Option<&Path>, out: &Path) -> Result<SweepResult> {
    let spec: SweepSpec = match spec {
        Some(p) => load_json(p)?,
        None => SweepSpec::default(),
    };
    let result = run_sweep(&spec)?;
    let file = File::create(out).with_context(|| format!("creating {}", out.display()))?;
    result.write_csv(BufWriter::new(file))?;
    Ok(result)
}

/// `"x y area"`, or `"no-pupil"` when no setting yields a round blob.
pub fn pupil_detect(image: &Path, polygon: &Path) -> Result<String> {
    let eye = GrayImage::read_pgm(image)?;
    let text = std::fs::read_to_string(polygon).with_context(|| format!("reading {}", polygon.display()))?;
    let polygon = parse_polygon(&text)?;
    match extract_pupil(&eye, &polygon) {
        Ok(p) => Ok(format!("{:.3} {:.3} {}", p.center.0, p.center.1, p.blob_area)),
        Err(PupilError::NoPupil) => Ok("no-pupil".to_string()),
        Err(e) => Err(e.into()),
    }
}

/// Opens the service for `records`, resuming from `log` when it already
/// holds events and starting it afresh otherwise.
pub fn open_service(
    records: &Path,
    params: Option<&Path>,
    model: Option<&Path>,
    log: &Path,
    clock: Box<dyn Clock>,
) -> Result<AnnotationService> {
    let stream = load_records(records)?;
    let params = load_params(params)?;
    let model = load_model(model, &stream.states)?;
    let resume = std::fs::metadata(log).map(|m| m.len() > 0).unwrap_or(false);
    let writer = OpenOptions::new()
        .create(true)
        .append(true)
        .open(log)
        .with_context(|| format!("opening log {}", log.display()))?;
    let service = if resume {
        let logged = BufReader::new(File::open(log)?);
        AnnotationService::recover(stream, model, params, logged, Box::new(writer), clock)
    } else {
        AnnotationService::new(stream, model, params, Box::new(writer), clock)
    };
    service.with_context(|| format!("starting service with log {}", log.display()))
}
