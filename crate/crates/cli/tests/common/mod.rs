#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::Value;
use stablelabel::hmm::{HmmModel, StateSpace};
use stablelabel::pipeline::{FrameRecord, PipelineParams};
use stablelabel::providers::{simulate_records, RecordStream, SimConfig};
use stablelabel::service::{AnnotationService, ManualClock};
use stablelabel_cli::server::{router, AppState};
use tower::ServiceExt;

/// Drives the router in-process, one request per call.
#[derive(Clone)]
pub struct Client(pub Router);

impl Client {
    pub fn new(service: Arc<AnnotationService>, images: Option<std::path::PathBuf>) -> Self {
        Self(router(AppState { service, images }))
    }

    pub async fn call(&self, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let builder = Request::builder().method(method).uri(uri);
        let req = match body {
            Some(v) => builder
                .header("content-type", "application/json")
                .body(Body::from(v.to_string()))
                .unwrap(),
            None => builder.body(Body::empty()).unwrap(),
        };
        let resp = self.0.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let value = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
        };
        (status, value)
    }

    pub async fn get(&self, uri: &str) -> (StatusCode, Value) {
        self.call(Method::GET, uri, None).await
    }

    pub async fn post(&self, uri: &str, body: Value) -> (StatusCode, Value) {
        self.call(Method::POST, uri, Some(body)).await
    }

    pub async fn put(&self, uri: &str, body: Value) -> (StatusCode, Value) {
        self.call(Method::PUT, uri, Some(body)).await
    }

    /// Answers every packet with ground truth until the queue drains or
    /// `limit` packets are done. Returns the number answered.
    pub async fn drive(&self, stream: &RecordStream, limit: usize) -> usize {
        let mut done = 0;
        while done < limit {
            let (status, next) = self.get("/api/queue/next?lease=60").await;
            assert_eq!(status, StatusCode::OK, "{next}");
            if next["entry"].is_null() {
                if next["drained"] == Value::Bool(true) {
                    break;
                }
                tokio::time::sleep(std::time::Duration::from_millis(1)).await;
                continue;
            }
            let id = next["entry"]["id"].as_u64().unwrap();
            let body = serde_json::json!({ "labels": truth_labels(stream, &next["entry"]) });
            let (status, ack) = self.post(&format!("/api/queue/{id}/labels"), body).await;
            assert_eq!(status, StatusCode::OK, "{ack}");
            done += 1;
        }
        done
    }
}

pub fn truth_labels(stream: &RecordStream, entry: &Value) -> BTreeMap<String, String> {
    entry["packet"]["frames"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| {
            let f = f.as_u64().unwrap();
            let r = stream.records.iter().find(|r| r.frame_index == f).unwrap();
            (f.to_string(), stream.states.name(r.ground_truth.unwrap()).unwrap().to_string())
        })
        .collect()
}

pub fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// Two segments: the first has unconfident change-points at 3 and 9 and
/// yields four packets in one batch, the second is confident throughout.
pub fn crafted() -> RecordStream {
    let mut records = Vec::new();
    for i in 0..12u64 {
        records.push(FrameRecord {
            frame_index: i,
            object_present: true,
            class_probs: Some(vec![0.5, 0.5]),
            change_score: (i > 0).then_some(if i == 3 || i == 9 { 0.9 } else { 0.0 }),
            ground_truth: Some(usize::from((3..9).contains(&i))),
        });
    }
    records.push(FrameRecord {
        ground_truth: Some(1),
        ..FrameRecord::absent(12)
    });
    for i in 13..21u64 {
        records.push(FrameRecord {
            frame_index: i,
            object_present: true,
            class_probs: Some(vec![0.01, 0.99]),
            change_score: (i > 13).then_some(0.0),
            ground_truth: Some(1),
        });
    }
    RecordStream {
        states: StateSpace::new(["Road", "Left"]).unwrap(),
        records,
    }
}

pub fn crafted_model() -> HmmModel {
    HmmModel::uniform_chain(StateSpace::new(["Road", "Left"]).unwrap(), identity(2)).unwrap()
}

pub fn sim_stream(length: usize, seed: u64) -> (RecordStream, HmmModel) {
    let config = SimConfig {
        length,
        seed,
        ..SimConfig::default()
    };
    let stream = simulate_records(&config).unwrap();
    let n = config.states.len();
    let model = HmmModel::new(config.states.clone(), vec![1.0 / n as f64; n], config.true_transitions, config.emission).unwrap();
    (stream, model)
}

pub fn service_with_clock(
    stream: RecordStream,
    model: HmmModel,
    params: PipelineParams,
) -> (Arc<AnnotationService>, Arc<ManualClock>) {
    let clock = Arc::new(ManualClock::new(1_000));
    let svc = AnnotationService::new(stream, model, params, Box::new(std::io::sink()), Box::new(clock.clone())).unwrap();
    (Arc::new(svc), clock)
}
