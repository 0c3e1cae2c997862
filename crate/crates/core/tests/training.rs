use cgtp_core::model::{prepare_scenario, Cgtp, ModelConfig};
use cgtp_core::scene::{generate_synthetic_scenario, ScenarioKind};
use cgtp_core::training::{train_epoch, training_forward, Checkpoint, TrainConfig, CHECKPOINT_FORMAT};

fn small_data(n: u64) -> Vec<cgtp_core::model::PreparedScenario<f64>> {
    let cfg = ModelConfig::small();
    ScenarioKind::ALL
        .iter()
        .flat_map(|&k| (0..n).map(move |s| (k, s)))
        .map(|(k, s)| prepare_scenario(&generate_synthetic_scenario(k, s), &cfg).unwrap())
        .collect()
}

#[test]
fn losses_fall_over_a_few_epochs() {
    let data = small_data(1);
    let (model, mut store) = Cgtp::init::<f64>(ModelConfig::small(), 3);
    let tc = TrainConfig { batch_size: 4, epochs: 20, ..TrainConfig::default() };
    let t0 = std::time::Instant::now();
    let first = train_epoch(&model, &mut store, &data, &tc, 0).unwrap();
    let mut last = first;
    for e in 1..tc.epochs {
        last = train_epoch(&model, &mut store, &data, &tc, e).unwrap();
    }
    eprintln!("{:?}\n{:?}\n{:?}", first, last, t0.elapsed());
    assert!(last.losses.total < first.losses.total);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let (_, store) = Cgtp::init::<f64>(ModelConfig::small(), 9);
    let c = Checkpoint { format: CHECKPOINT_FORMAT, model: ModelConfig::small(), train: TrainConfig::default(), epochs_completed: 4, store };
    let mut buf = Vec::new();
    c.save(&mut buf).unwrap();
    let back = Checkpoint::<f64>::load(buf.as_slice()).unwrap();
    assert_eq!(back, c);
}

#[test]
fn forward_is_deterministic() {
    let data = small_data(1);
    let (model, store) = Cgtp::init::<f64>(ModelConfig::small(), 1);
    let tc = TrainConfig::default();
    for p in &data {
        let a = training_forward(&model, &store, p, &tc).unwrap();
        let b = training_forward(&model, &store, p, &tc).unwrap();
        assert_eq!(a.values, b.values);
        assert!(a.targets.k_j < 25);
    }
}
