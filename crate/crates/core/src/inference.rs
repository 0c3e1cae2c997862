//! Free-running joint prediction: marginal goals of A, conditional goals of
//! B per query, goal-pair scoring, joint rollout and optional suppression.

use crate::cgpnet::{
    goal_offsets, goal_scores, joint_distribution, nms_filter, rank_pairs, select_top_goals, softmax_probs,
    GoalDistribution, GoalPair,
};
use crate::gtfnet::RolloutMode;
use crate::metrics::{ModePair, Submission};
use crate::model::{Cgtp, PreparedScenario};
use crate::numerics::{NumericsError, ParameterStore, Tape};
use crate::scalar::Scalar;
use crate::scene::Point;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictConfig {
    /// Modes to emit; below `𝒦²` triggers suppression.
    pub keep: usize,
    pub nms_radius: f64,
    /// Ignore A's goal when predicting B.
    pub marginal_only: bool,
}

impl PredictConfig {
    pub fn for_model(model: &Cgtp) -> Self {
        Self {
            keep: model.cfg.top_k * model.cfg.top_k,
            nms_radius: model.cfg.nms_radius,
            marginal_only: false,
        }
    }
}

/// One predicted pair with its goals and world-frame trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct JointMode<T> {
    pub pair: GoalPair<T>,
    pub traj_a: Vec<Point<T>>,
    pub traj_b: Vec<Point<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointPrediction<T> {
    pub scenario_id: String,
    pub marginal_a: GoalDistribution<T>,
    pub conditionals_b: Vec<GoalDistribution<T>>,
    /// Emitted modes, score descending.
    pub modes: Vec<JointMode<T>>,
}

impl<T: Scalar> JointPrediction<T> {
    pub fn submission(&self) -> Submission<T> {
        Submission {
            scenario_id: self.scenario_id.clone(),
            modes: self
                .modes
                .iter()
                .map(|m| ModePair {
                    score: m.pair.score,
                    traj_a: m.traj_a.clone(),
                    traj_b: m.traj_b.clone(),
                })
                .collect(),
        }
    }
}

pub fn predict_scenario<T: Scalar>(
    model: &Cgtp,
    store: &ParameterStore<T>,
    prep: &PreparedScenario<T>,
    cfg: &PredictConfig,
) -> Result<JointPrediction<T>, NumericsError> {
    let kk = model.cfg.top_k;
    let (a, b) = (&prep.a, &prep.b);
    let mut tape = Tape::new();
    let fa = model.frame_forward(&mut tape, store, a)?;
    let fb = model.frame_forward(&mut tape, store, b)?;

    let logits = goal_scores(&model.cgp.seg_a, &mut tape, store, fa.seg_base, None)?;
    let probs = softmax_probs(&mut tape, logits)?;
    let offs = goal_offsets(&model.cgp.reg_a, &mut tape, store, fa.reg_base, None)?;
    let marginal_a = GoalDistribution::from_usable(
        a.goals.len(),
        &fa.goals.candidates,
        tape.value(probs).data(),
        Some(tape.value(offs).data()),
        None,
    );
    let top_a = select_top_goals(&marginal_a.probs, &marginal_a.mask, kk);

    let mut conditionals_b = Vec::with_capacity(top_a.len());
    for &ca in &top_a {
        let query = if cfg.marginal_only {
            None
        } else {
            Some(model.scaled_query(prep.a_to_b.apply(a.goals.positions[ca])))
        };
        let logits = goal_scores(&model.cgp.seg_b, &mut tape, store, fb.seg_base, query)?;
        let probs = softmax_probs(&mut tape, logits)?;
        let offs = goal_offsets(&model.cgp.reg_b, &mut tape, store, fb.reg_base, query)?;
        conditionals_b.push(GoalDistribution::from_usable(
            b.goals.len(),
            &fb.goals.candidates,
            tape.value(probs).data(),
            Some(tape.value(offs).data()),
            query,
        ));
    }
    let set = joint_distribution(&marginal_a, &conditionals_b, &top_a, &a.goals.positions, &b.goals.positions, kk);
    let pairs = set.pairs;
    let m = pairs.len();

    let setup = model.rollout_setup(
        &mut tape,
        store,
        prep,
        &fa,
        &fb,
        pairs.iter().map(|p| p.goal_a).collect(),
        pairs.iter().map(|p| p.goal_b).collect(),
    )?;
    let trace = model
        .gtf
        .rollout_joint(&mut tape, store, &setup, prep.horizon, RolloutMode::FreeRunning, None)?;
    let traj = model.gtf.trajectories(&mut tape, &trace)?;
    let values = tape.value(traj);
    let world = |row: usize, frame: &crate::scene::Pose<T>| -> Vec<Point<T>> {
        values
            .row_slice(row)
            .chunks(2)
            .map(|c| frame.to_world(Point::new(c[0], c[1])))
            .collect()
    };
    let mut modes: Vec<JointMode<T>> = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| JointMode {
            pair: *p,
            traj_a: world(i, &a.frame),
            traj_b: world(m + i, &b.frame),
        })
        .collect();

    let chosen: Vec<GoalPair<T>> = if cfg.keep < m {
        nms_filter(&pairs, cfg.keep, T::lit(cfg.nms_radius), |p| {
            let md = &modes[index_of(&pairs, p.kappa)];
            (*md.traj_a.last().unwrap(), *md.traj_b.last().unwrap())
        })
    } else {
        let mut r = pairs.clone();
        rank_pairs(&mut r);
        r
    };
    let mut out = Vec::with_capacity(chosen.len());
    for p in chosen {
        let i = index_of(&pairs, p.kappa);
        out.push(std::mem::replace(
            &mut modes[i],
            JointMode {
                pair: p,
                traj_a: Vec::new(),
                traj_b: Vec::new(),
            },
        ));
    }
    Ok(JointPrediction {
        scenario_id: prep.id.clone(),
        marginal_a,
        conditionals_b,
        modes: out,
    })
}

fn index_of<T>(pairs: &[GoalPair<T>], kappa: usize) -> usize {
    pairs.iter().position(|p| p.kappa == kappa).expect("pair from this set")
}

/// Predictions for many scenarios, in input order.
pub fn predict_all<T: Scalar>(
    model: &Cgtp,
    store: &ParameterStore<T>,
    preps: &[PreparedScenario<T>],
    cfg: &PredictConfig,
) -> Result<Vec<JointPrediction<T>>, NumericsError> {
    use rayon::prelude::*;
    preps
        .par_iter()
        .map(|p| predict_scenario(model, store, p, cfg))
        .collect()
}
