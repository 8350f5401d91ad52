use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sad_core::config::{Ablation, ExperimentConfig};
use sad_core::egraph::{EventStream, Label, TemporalGraph};
use sad_core::losses::Mode;
use sad_core::membank::ReferenceScore;
use sad_core::model::{ModelConfig, ParamGroup, SadModel};
use sad_core::parallel::Execution;
use sad_core::synth::{self, SynthConfig, DAY};
use sad_core::trainer::{batch_objective, infer_scores, load_model, train, TrainOptions, TrainReport};

fn small_stream() -> EventStream {
    synth::generate(
        &SynthConfig {
            num_users: 16,
            num_items: 8,
            horizon_seconds: 3.0 * DAY,
            base_rate: 10.0,
            anomaly_user_fraction: 0.25,
            anomaly_window_seconds: 2.0 * DAY,
            seed: 5,
            ..SynthConfig::default()
        }
        .with_uniform_shift(8, 2.0),
    )
    .unwrap()
}

fn quick(ablation: Ablation) -> ExperimentConfig {
    ExperimentConfig { ablation, per_hop: 4, epochs: 2, batch_size: 64, ..Default::default() }
}

/// Reports with the wall-clock fields zeroed.
fn timeless(mut r: TrainReport) -> TrainReport {
    r.wall_seconds = 0.0;
    for e in &mut r.epochs {
        e.seconds = 0.0;
    }
    r
}

#[test]
fn training_is_deterministic() {
    let stream = small_stream();
    let config = quick(Ablation::Scl);
    let a = train(&stream, &config, &TrainOptions::default()).unwrap();
    let b = train(&stream, &config, &TrainOptions::default()).unwrap();
    assert_eq!(timeless(a.report), timeless(b.report));
    assert_eq!(a.model.store.values(), b.model.store.values());
}

#[test]
fn execution_policies_agree() {
    let stream = small_stream();
    let seq = ExperimentConfig { execution: Execution::Sequential, ..quick(Ablation::Time) };
    let par = ExperimentConfig { execution: Execution::Parallel, ..seq.clone() };
    let a = train(&stream, &seq, &TrainOptions::default()).unwrap();
    let b = train(&stream, &par, &TrainOptions::default()).unwrap();
    assert_eq!(a.report.test_auc, b.report.test_auc);
    assert_eq!(a.model.store.values(), b.model.store.values());
}

#[test]
fn bank_never_exceeds_capacity() {
    let stream = small_stream();
    let config = ExperimentConfig { bank_capacity: 50, bank_sample_size: 20, ..quick(Ablation::Mem) };
    let out = train(&stream, &config, &TrainOptions::default()).unwrap();
    for e in &out.report.epochs {
        assert_eq!(e.bank_len, 50);
    }
    let off = train(&stream, &quick(Ablation::Dev), &TrainOptions::default()).unwrap();
    assert!(off.report.epochs.iter().all(|e| e.bank_len == 0));
}

fn group_norms(ablation: Ablation, sup_to_encoder: bool) -> [f64; 3] {
    let stream = small_stream();
    let graph = TemporalGraph::new(stream.clone());
    let model = SadModel::new(ModelConfig::new(stream.edge_feature_dim()), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let config = ExperimentConfig { ablation, sup_to_encoder, ..quick(ablation) };
    // a window holding both labels
    let end = stream.events().iter().rposition(|e| e.label == Label::Anomalous).unwrap() + 1;
    let range = end.saturating_sub(64)..end;
    let obj = batch_objective(&graph, &model, &config, range, &ReferenceScore::standard(0.0), None).unwrap();
    let mut norms = [0.0; 3];
    for ((id, _, _), g) in model.store.iter().zip(&obj.grads) {
        let slot = match model.group_of(id) {
            ParamGroup::Encoder => 0,
            ParamGroup::Detector => 1,
            ParamGroup::Projection => 2,
        };
        norms[slot] += g.data().iter().map(|v| v * v).sum::<f64>();
    }
    norms
}

#[test]
fn disabled_terms_leave_gradients_at_zero() {
    let [enc, det, proj] = group_norms(Ablation::Backbone, false);
    assert_eq!((enc, det), (0.0, 0.0));
    assert!(proj > 0.0);

    let [enc, det, proj] = group_norms(Ablation::Backbone, true);
    assert!(enc > 0.0 && proj > 0.0);
    assert_eq!(det, 0.0);

    let [enc, det, _] = group_norms(Ablation::Dev, false);
    assert!(enc > 0.0 && det > 0.0);
}

#[test]
fn checkpoint_roundtrip_reproduces_scores() {
    let stream = small_stream();
    let config = quick(Ablation::Scl);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let options = TrainOptions { checkpoint: Some(path.clone()), progress: false };
    let out = train(&stream, &config, &options).unwrap();
    let loaded = load_model(&path).unwrap();
    let a = infer_scores(&stream, &out.model, &config).unwrap();
    let b = infer_scores(&stream, &loaded, &config).unwrap();
    assert_eq!(a.len(), stream.len());
    assert_eq!(a, b);
    assert!(a.iter().all(|s| s.score.is_finite() && (0.0..=1.0).contains(&s.probability)));
}

#[test]
fn mismatched_feature_width_is_rejected() {
    let stream = small_stream();
    let model = SadModel::new(ModelConfig::new(stream.edge_feature_dim() + 1), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(infer_scores(&stream, &model, &quick(Ablation::Scl)).is_err());
}

#[test]
fn trained_model_separates_labels() {
    let stream = small_stream();
    let config = ExperimentConfig { epochs: 4, ..quick(Ablation::Scl) };
    let out = train(&stream, &config, &TrainOptions::default()).unwrap();
    let scores = infer_scores(&stream, &out.model, &config).unwrap();
    let mean = |label: Label| {
        let v: Vec<f64> = stream
            .events()
            .iter()
            .zip(&scores)
            .filter(|(e, _)| e.label == label)
            .map(|(_, s)| s.ranking_value(Mode::Downstream))
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mean(Label::Anomalous) > mean(Label::Normal));
}
