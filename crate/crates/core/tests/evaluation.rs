mod common;

use common::{rng, sim_model, small_stream};
use rand::seq::SliceRandom;
use rand::Rng;
use stablelabel::evaluation::{
    evaluate_stream, mark_pareto, replay_metrics, seed_model, sweep, EvalError, SweepSource, SweepSpec, TradeoffPoint,
};
use stablelabel::hmm::{HmmModel, StateSpace};
use stablelabel::pipeline::{FrameRecord, PipelineParams};
use stablelabel::providers::{write_records, SimConfig};

fn identity_model(n: usize) -> HmmModel {
    let e = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    HmmModel::uniform_chain(StateSpace::numbered(n).unwrap(), e).unwrap()
}

fn truth_path(seed: u64, n: usize, length: usize) -> Vec<usize> {
    let mut r = rng(seed);
    let mut state = 0;
    (0..length)
        .map(|i| {
            if i % 17 == 0 {
                state = r.random_range(0..n);
            }
            state
        })
        .collect()
}

#[test]
fn saturation_gives_unit_reduction_and_perfect_accuracy() {
    let n = 4;
    let records: Vec<FrameRecord> = truth_path(1, n, 500)
        .into_iter()
        .enumerate()
        .map(|(i, s)| FrameRecord {
            frame_index: i as u64,
            object_present: true,
            class_probs: Some(vec![0.25; n]),
            change_score: (i > 0).then_some(1.0),
            ground_truth: Some(s),
        })
        .collect();
    let p = replay_metrics(&records, &identity_model(n), &PipelineParams::default()).unwrap();
    assert_eq!(p.reduction_factor, 1.0);
    assert_eq!(p.accuracy, 1.0);
    assert_eq!(p.manual_frames, 500);
    assert!(!p.no_manual);
}

#[test]
fn noiseless_stream_needs_no_human() {
    let n = 6;
    let path = truth_path(2, n, 2_000);
    let records: Vec<FrameRecord> = path
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let mut probs = vec![0.0; n];
            probs[s] = 1.0;
            FrameRecord {
                frame_index: i as u64,
                object_present: true,
                class_probs: Some(probs),
                change_score: (i > 0).then(|| if path[i - 1] != s { 1.0 } else { 0.0 }),
                ground_truth: Some(s),
            }
        })
        .collect();
    let p = replay_metrics(&records, &identity_model(n), &PipelineParams::default()).unwrap();
    assert_eq!(p.manual_frames, 0);
    assert_eq!(p.accuracy, 1.0);
    assert!(p.no_manual);
    assert_eq!(p.reduction_factor, 2_000.0);
}

#[test]
fn errors_come_only_from_automatic_labels() {
    for seed in 0..4 {
        let (config, stream) = small_stream(30_000, seed);
        let p = replay_metrics(&stream.records, &sim_model(&config), &PipelineParams::default()).unwrap();
        assert_eq!(p.errors_by_source.manual, 0);
        assert!(p.errors_by_source.auto_stable <= p.labels_by_source.auto_stable);
        assert!(p.errors_by_source.auto_confident <= p.labels_by_source.auto_confident);
        let wrong = p.errors_by_source.total() as f64;
        assert!((p.accuracy - (1.0 - wrong / p.total_frames as f64)).abs() < 1e-12);
        assert_eq!(p.manual_frames + p.auto_frames, p.total_frames);
        assert!(p.reduction_factor >= 1.0);
    }
}

#[test]
fn missing_ground_truth_is_an_error() {
    let (config, mut stream) = small_stream(2_000, 5);
    let i = stream.records.iter().position(|r| r.object_present).unwrap();
    stream.records[i].ground_truth = None;
    let err = replay_metrics(&stream.records, &sim_model(&config), &PipelineParams::default()).unwrap_err();
    assert!(matches!(err, EvalError::MissingGroundTruth { .. }), "{err:?}");
}

#[test]
fn seed_split_never_cuts_a_segment() {
    let (_, stream) = small_stream(20_000, 6);
    for wanted in [0, 1, 777, 5_000, 19_999, 40_000] {
        let seeded = seed_model(&stream, wanted, 1.0).unwrap();
        let s = seeded.split;
        assert!(s >= wanted.min(stream.records.len()));
        if s > 0 && s < stream.records.len() {
            assert!(!(stream.records[s - 1].object_present && stream.records[s].object_present));
        }
    }
}

fn small_spec(repetitions: u32) -> SweepSpec {
    SweepSpec {
        source: SweepSource::Simulation(SimConfig {
            length: 40_000,
            seed: 99,
            ..SimConfig::default()
        }),
        repetitions,
        seed_frames: 5_000,
        ..SweepSpec::default()
    }
}

#[test]
fn sweeps_are_byte_reproducible() {
    let spec = small_spec(2);
    let a = sweep(&spec).unwrap().to_csv_string().unwrap();
    let b = sweep(&spec).unwrap().to_csv_string().unwrap();
    assert_eq!(a, b);
    let mut lines = a.lines();
    assert_eq!(
        lines.next().unwrap(),
        "delta_min,c_min,v_u_min,total_frames,manual_frames,reduction_factor,accuracy,pareto"
    );
    assert_eq!(lines.count(), 5);
}

#[test]
fn repetitions_pool_frame_counts() {
    let spec = small_spec(2);
    let result = sweep(&spec).unwrap();
    let SweepSource::Simulation(config) = &spec.source else { unreachable!() };
    for row in &result.rows {
        let pooled = row.result.as_ref().unwrap();
        let singles: Vec<TradeoffPoint> = (0..2)
            .map(|r| {
                let cfg = SimConfig {
                    seed: config.seed + r,
                    ..config.clone()
                };
                let stream = stablelabel::providers::simulate_records(&cfg).unwrap();
                evaluate_stream(&stream, &row.params, spec.seed_frames).unwrap()
            })
            .collect();
        let total: u64 = singles.iter().map(|p| p.total_frames).sum();
        let manual: u64 = singles.iter().map(|p| p.manual_frames).sum();
        let wrong: u64 = singles.iter().map(|p| p.errors_by_source.total()).sum();
        assert_eq!(pooled.total_frames, total);
        assert_eq!(pooled.manual_frames, manual);
        assert_eq!(pooled.reduction_factor, total as f64 / manual as f64);
        assert_eq!(pooled.accuracy, (total - wrong) as f64 / total as f64);
        assert_eq!(pooled.repetitions, 2);
    }
}

#[test]
fn record_file_source_matches_direct_evaluation() {
    let (_, stream) = small_stream(30_000, 7);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("records.tsv");
    write_records(&stream, std::fs::File::create(&path).unwrap()).unwrap();
    let spec = SweepSpec {
        delta_min: vec![0.3],
        source: SweepSource::Records(path),
        seed_frames: 5_000,
        ..SweepSpec::default()
    };
    let result = sweep(&spec).unwrap();
    assert_eq!(result.rows.len(), 1);
    let mut expected = evaluate_stream(&stream, &spec.grid()[0], 5_000).unwrap();
    expected.pareto = true;
    assert_eq!(result.rows[0].result.as_ref().unwrap(), &expected);
}

#[test]
fn bad_specs_are_rejected() {
    let empty = SweepSpec {
        delta_min: vec![],
        ..small_spec(1)
    };
    assert!(matches!(sweep(&empty), Err(EvalError::Spec(_))));
    let out_of_range = SweepSpec {
        delta_min: vec![0.3, 1.5],
        ..small_spec(1)
    };
    assert!(sweep(&out_of_range).is_err());
}

#[test]
fn pareto_marking_ignores_order() {
    let mut r = rng(8);
    let template = evaluate_stream(&small_stream(3_000, 9).1, &PipelineParams::default(), 500).unwrap();
    for _ in 0..200 {
        let k = r.random_range(1..30);
        let mut pts: Vec<TradeoffPoint> = (0..k)
            .map(|i| {
                let mut p = template.clone();
                // Coarse values so ties and duplicates occur.
                p.reduction_factor = f64::from(r.random_range(1..8u8));
                p.accuracy = f64::from(r.random_range(90..100u8)) / 100.0;
                p.total_frames = i;
                p
            })
            .collect();
        mark_pareto(&mut pts);
        let mut shuffled = pts.clone();
        shuffled.shuffle(&mut r);
        mark_pareto(&mut shuffled);
        let frontier = |v: &[TradeoffPoint]| {
            let mut ids: Vec<u64> = v.iter().filter(|p| p.pareto).map(|p| p.total_frames).collect();
            ids.sort();
            ids
        };
        assert_eq!(frontier(&pts), frontier(&shuffled));
        // Brute-force definition.
        for p in &pts {
            let dominated = pts.iter().any(|q| {
                (q.reduction_factor > p.reduction_factor && q.accuracy >= p.accuracy)
                    || (q.reduction_factor >= p.reduction_factor && q.accuracy > p.accuracy)
            });
            assert_eq!(p.pareto, !dominated);
        }
    }
}
