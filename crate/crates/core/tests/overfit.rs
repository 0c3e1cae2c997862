use cgtp_core::inference::{predict_scenario, PredictConfig};
use cgtp_core::model::{prepare_scenario, Cgtp, ModelConfig, PreparedScenario};
use cgtp_core::scene::{generate_synthetic_scenario, ScenarioKind};
use cgtp_core::training::{train_epoch, training_forward, TrainConfig, TrainError};

fn suite(cfg: &ModelConfig) -> Vec<PreparedScenario<f64>> {
    ScenarioKind::ALL
        .iter()
        .flat_map(|&k| (0..2).map(move |s| generate_synthetic_scenario(k, s)))
        .map(|s| prepare_scenario(&s, cfg).unwrap())
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[test]
fn overfit_suite_trends_down_and_conditions_on_the_query() {
    let cfg = ModelConfig::small();
    let data = suite(&cfg);
    let (model, mut store) = Cgtp::init::<f64>(cfg, 0);
    let train = TrainConfig {
        batch_size: 1,
        epochs: 300,
        ..TrainConfig::default()
    };
    let mut totals = Vec::new();
    for e in 0..train.epochs {
        totals.push(train_epoch(&model, &mut store, &data, &train, e).unwrap().losses.total);
    }
    // window means over 50 epochs fall from one window to the next
    let means: Vec<f64> = totals.chunks(50).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    for w in means.windows(2) {
        assert!(w[1] < w[0], "window means {means:?}");
    }

    for prep in &data {
        let f = training_forward(&model, &store, prep, &train).unwrap();
        let v = f.values;
        for part in [v.goal_a, v.goal_b, v.joint, v.traj] {
            assert!(part >= 0.0);
        }
        assert_eq!(v.total, ((v.goal_a + v.goal_b) + v.joint) + v.traj);
    }

    let pcfg = PredictConfig::for_model(&model);
    let sensitive = data.iter().any(|prep| {
        let pred = predict_scenario(&model, &store, prep, &pcfg).unwrap();
        let picks: Vec<usize> = pred.conditionals_b.iter().map(|d| argmax(&d.probs)).collect();
        picks.iter().any(|&p| p != picks[0])
    });
    assert!(sensitive, "every query gives the same conditional argmax");
}

#[test]
fn diverging_run_reports_the_batch() {
    let cfg = ModelConfig::small();
    let data = suite(&cfg);
    let (model, mut store) = Cgtp::init::<f64>(cfg, 0);
    let train = TrainConfig {
        batch_size: 8,
        lr: 1e200,
        ..TrainConfig::default()
    };
    let mut failure = None;
    for e in 0..5 {
        if let Err(err) = train_epoch(&model, &mut store, &data, &train, e) {
            failure = Some(err);
            break;
        }
    }
    match failure {
        Some(TrainError::NonFinite { ids, detail }) => {
            assert_eq!(ids.len(), 8);
            assert!(!detail.is_empty());
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}
