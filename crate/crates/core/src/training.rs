//! Goal targets, the four training losses, staged parameter updates and
//! checkpoints.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cgpnet::{goal_offsets, goal_scores, kappa, select_top_goals, softmax_probs};
use crate::model::{Cgtp, ModelConfig, ModelError, PreparedScenario};
use crate::numerics::{AdamConfig, NdArray, NumericsError, ParameterStore, Tape, Var};
use crate::scalar::Scalar;
use crate::scene::{GoalCandidateSet, Point};

pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite value in batch [{}]: {detail}", ids.join(", "))]
    NonFinite { ids: Vec<String>, detail: String },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl From<NumericsError> for TrainError {
    fn from(e: NumericsError) -> Self {
        TrainError::Model(ModelError::Numerics(e))
    }
}

/// Parameter groups, named by the prefix before the first `.`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    GoiNet,
    SegA,
    RegA,
    SegB,
    RegB,
    EncGru,
    DecGru,
    Traj,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<Self> {
        Some(match name.split('.').next()? {
            "goinet" => Self::GoiNet,
            "seg_a" => Self::SegA,
            "reg_a" => Self::RegA,
            "seg_b" => Self::SegB,
            "reg_b" => Self::RegB,
            "enc" => Self::EncGru,
            "dec" => Self::DecGru,
            "traj" => Self::Traj,
            _ => return None,
        })
    }
}

/// The four updates of one batch, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    MarginalGoal,
    ConditionalGoal,
    Interactive,
    Trajectory,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::MarginalGoal,
        Stage::ConditionalGoal,
        Stage::Interactive,
        Stage::Trajectory,
    ];

    pub fn groups(self) -> &'static [ParamGroup] {
        use ParamGroup::*;
        match self {
            Stage::MarginalGoal => &[GoiNet, SegA, RegA],
            Stage::ConditionalGoal => &[GoiNet, SegB, RegB],
            Stage::Interactive => &[GoiNet, SegA, SegB],
            Stage::Trajectory => &[GoiNet, EncGru, DecGru, Traj],
        }
    }

    pub fn updates(self, name: &str) -> bool {
        ParamGroup::of(name).is_some_and(|g| self.groups().contains(&g))
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Regress only the best joint mode in the trajectory loss.
    pub traj_loss_mask_nonbest: bool,
    /// Run the interactive-loss update; off gives the marginal ablation.
    pub interactive_loss: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            lr_decay: 0.5,
            decay_every: 30,
            batch_size: 64,
            epochs: 200,
            seed: 0,
            traj_loss_mask_nonbest: true,
            interactive_loss: true,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && self.lr_decay > 0.0
            && self.decay_every > 0
            && self.batch_size > 0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(TrainError::Config(format!("{self:?}")))
        }
    }

    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    /// Learning rate of a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

/// Supervision of one scenario; candidate indices refer to the full sets.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalTargets<T> {
    pub k_a: Vec<usize>,
    pub k_b: Vec<usize>,
    /// 0-based joint index `𝒦·q + k`.
    pub k_j: usize,
    pub endpoint_a: Point<T>,
    pub endpoint_b: Point<T>,
}

/// `k` usable candidates nearest to `p`, nearest first, ties → lower index.
pub fn nearest_candidates<T: Scalar>(goals: &GoalCandidateSet<T>, usable: &[usize], p: Point<T>, k: usize) -> Vec<usize> {
    let mut idx = usable.to_vec();
    idx.sort_by(|&a, &b| {
        let da = goals.positions[a].dist(p);
        let db = goals.positions[b].dist(p);
        da.partial_cmp(&db).unwrap().then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// `top_b[q]` lists B's selected candidates under the query `top_a[q]`.
/// `k_J` minimizes the summed candidate-to-endpoint distance over the grid
/// (ties → lower κ).
#[allow(clippy::too_many_arguments)]
pub fn build_goal_targets<T: Scalar>(
    goals_a: &GoalCandidateSet<T>,
    usable_a: &[usize],
    goals_b: &GoalCandidateSet<T>,
    usable_b: &[usize],
    endpoint_a: Point<T>,
    endpoint_b: Point<T>,
    top_a: &[usize],
    top_b: &[Vec<usize>],
    top_k: usize,
) -> GoalTargets<T> {
    let mut best: Option<(T, usize)> = None;
    for (q, (&ca, row)) in top_a.iter().zip(top_b).enumerate() {
        let da = goals_a.positions[ca].dist(endpoint_a);
        for (k, &cb) in row.iter().enumerate() {
            let d = da + goals_b.positions[cb].dist(endpoint_b);
            let kap = kappa(top_k, q, k);
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, kap));
            }
        }
    }
    GoalTargets {
        k_a: nearest_candidates(goals_a, usable_a, endpoint_a, top_k),
        k_b: nearest_candidates(goals_b, usable_b, endpoint_b, top_k),
        k_j: best.map_or(0, |(_, k)| k),
        endpoint_a,
        endpoint_b,
    }
}

/// Per-row classification and offset targets of a head's usable rows.
fn row_targets<T: Scalar>(
    goals: &GoalCandidateSet<T>,
    candidates: &[usize],
    positives: &[usize],
    endpoint: Point<T>,
) -> (Vec<T>, NdArray<T>) {
    let mut labels = Vec::with_capacity(candidates.len());
    let mut offsets = Vec::with_capacity(2 * candidates.len());
    for &k in candidates {
        if positives.contains(&k) {
            labels.push(T::one());
            let d = endpoint.sub(goals.positions[k]);
            offsets.extend([d.x, d.y]);
        } else {
            labels.push(T::zero());
            offsets.extend([T::zero(), T::zero()]);
        }
    }
    let n = candidates.len();
    (labels, NdArray::matrix(n, 2, offsets).expect("offset targets"))
}

/// Mean over usable candidates of `BCE(π, 𝟙(k∈K)) + ‖μ − 𝟙(k∈K)·Δg‖²`.
/// `probs` is `[1, n]`, `offsets` `[n, 2]`, rows ordered as `candidates`.
pub fn goal_loss_marginal<T: Scalar>(
    tape: &mut Tape<T>,
    probs: Var,
    offsets: Var,
    goals: &GoalCandidateSet<T>,
    candidates: &[usize],
    positives: &[usize],
    endpoint: Point<T>,
) -> Result<Var, NumericsError> {
    goal_loss_conditional(tape, &[(probs, offsets)], goals, candidates, positives, endpoint)
}

/// Mean over queries and usable candidates of the marginal loss form.
pub fn goal_loss_conditional<T: Scalar>(
    tape: &mut Tape<T>,
    per_query: &[(Var, Var)],
    goals: &GoalCandidateSet<T>,
    candidates: &[usize],
    positives: &[usize],
    endpoint: Point<T>,
) -> Result<Var, NumericsError> {
    let n = candidates.len();
    if n == 0 || per_query.is_empty() {
        return Err(NumericsError::Contract("goal loss over an empty candidate set".into()));
    }
    let (labels, targets) = row_targets(goals, candidates, positives, endpoint);
    let w = T::one() / T::from_usize(n * per_query.len()).unwrap();
    let mut terms = Vec::with_capacity(2 * per_query.len());
    for &(p, o) in per_query {
        terms.push(tape.bce(p, labels.clone(), vec![w; n], T::lit(BCE_EPS))?);
        terms.push(tape.weighted_sq_err(o, targets.clone(), vec![w; n])?);
    }
    sum_all(tape, &terms)
}

/// Mean over the `𝒦²` grid of `BCE(score(κ), 𝟙(κ = k_J))`; `joint` is
/// `[𝒦², 1]`.
pub fn goal_interactive_loss<T: Scalar>(tape: &mut Tape<T>, joint: Var, k_j: usize) -> Result<Var, NumericsError> {
    let n = tape.shape(joint).0;
    let labels = (0..n).map(|i| if i == k_j { T::one() } else { T::zero() }).collect();
    let w = T::one() / T::from_usize(n).unwrap();
    tape.bce(joint, labels, vec![w; n], T::lit(BCE_EPS))
}

/// `(1/(2𝒦²T)) Σ_κ Σ_δ Σ_i ‖ŷ − 𝟙(κ=k_J)·y‖²`. `pred` is `[2·𝒦², 2T]`
/// meters: A modes then B modes. With `mask_nonbest` the non-`k_J` modes
/// carry no weight.
pub fn trajectory_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    gt_a: &[Point<T>],
    gt_b: &[Point<T>],
    k_j: usize,
    mask_nonbest: bool,
) -> Result<Var, NumericsError> {
    let (rows, cols) = tape.shape(pred);
    let modes = rows / 2;
    let horizon = cols / 2;
    if rows != 2 * modes || gt_a.len() != horizon || gt_b.len() != horizon || modes == 0 {
        return Err(NumericsError::Dimension(format!(
            "trajectory loss: prediction {rows}x{cols} vs ground truth {} / {}",
            gt_a.len(),
            gt_b.len()
        )));
    }
    let w = T::one() / T::from_usize(2 * modes * horizon).unwrap();
    let mut target = Vec::with_capacity(rows * cols);
    let mut weights = Vec::with_capacity(rows);
    for r in 0..rows {
        let best = r % modes == k_j;
        let gt = if r < modes { gt_a } else { gt_b };
        for p in gt {
            if best {
                target.extend([p.x, p.y]);
            } else {
                target.extend([T::zero(), T::zero()]);
            }
        }
        weights.push(if best || !mask_nonbest { w } else { T::zero() });
    }
    tape.weighted_sq_err(pred, NdArray::matrix(rows, cols, target)?, weights)
}

fn sum_all<T: Scalar>(tape: &mut Tape<T>, terms: &[Var]) -> Result<Var, NumericsError> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub goal_a: f64,
    pub goal_b: f64,
    pub joint: f64,
    pub traj: f64,
    pub total: f64,
}

impl LossValues {
    fn add(&mut self, o: &LossValues) {
        self.goal_a += o.goal_a;
        self.goal_b += o.goal_b;
        self.joint += o.joint;
        self.traj += o.traj;
        self.total += o.total;
    }

    fn scale(&mut self, s: f64) {
        self.goal_a *= s;
        self.goal_b *= s;
        self.joint *= s;
        self.traj *= s;
        self.total *= s;
    }

    pub fn is_finite(&self) -> bool {
        [self.goal_a, self.goal_b, self.joint, self.traj, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// One scenario's training graph.
pub struct ScenarioForward<T> {
    pub tape: Tape<T>,
    /// Losses in [`Stage::ALL`] order.
    pub losses: [Var; 4],
    pub total: Var,
    pub values: LossValues,
    pub targets: GoalTargets<T>,
    pub top_a: Vec<usize>,
    pub top_b: Vec<Vec<usize>>,
    /// Joint scores over the grid, index `κ`.
    pub joint_scores: Vec<T>,
}

impl<T: Scalar> ScenarioForward<T> {
    /// Whether the best-scored joint mode is `k_J` (ties → lower κ).
    pub fn joint_top1(&self) -> bool {
        let mut best = 0;
        for (i, s) in self.joint_scores.iter().enumerate() {
            if *s > self.joint_scores[best] {
                best = i;
            }
        }
        best == self.targets.k_j
    }
}

/// Loss nodes of one scenario on a shared tape.
pub struct ScenarioLosses<T> {
    /// Losses in [`Stage::ALL`] order.
    pub losses: [Var; 4],
    pub total: Var,
    /// Joint scores `[𝒦², 1]`, index `κ`.
    pub joint: Var,
    pub targets: GoalTargets<T>,
    pub top_a: Vec<usize>,
    pub top_b: Vec<Vec<usize>>,
}

/// Teacher-forced forward pass adding all four losses of one scenario to
/// `tape`.
pub fn scenario_losses<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Cgtp,
    store: &ParameterStore<T>,
    prep: &PreparedScenario<T>,
    cfg: &TrainConfig,
) -> Result<ScenarioLosses<T>, NumericsError> {
    let kk = model.cfg.top_k;
    let fa = model.frame_forward(tape, store, &prep.a)?;
    let fb = model.frame_forward(tape, store, &prep.b)?;
    let (a, b) = (&prep.a, &prep.b);
    let (end_a, end_b) = (a.endpoint(), b.endpoint());

    // marginal goals of A
    let logits_a = goal_scores(&model.cgp.seg_a, tape, store, fa.seg_base, None)?;
    let probs_a = softmax_probs(tape, logits_a)?;
    let off_a = goal_offsets(&model.cgp.reg_a, tape, store, fa.reg_base, None)?;

    // conditional goals of B under A's true endpoint
    let q_true = model.scaled_query(prep.a_to_b.apply(end_a));
    let logits_b = goal_scores(&model.cgp.seg_b, tape, store, fb.seg_base, Some(q_true))?;
    let probs_b = softmax_probs(tape, logits_b)?;
    let off_b = goal_offsets(&model.cgp.reg_b, tape, store, fb.reg_base, Some(q_true))?;

    // joint grid under A's predicted top goals
    let cand_a = &fa.goals.candidates;
    let cand_b = &fb.goals.candidates;
    let pa = tape.value(probs_a).data().to_vec();
    let top_a_rows = select_top_goals(&pa, &vec![true; pa.len()], kk);
    let mut top_b_rows = Vec::with_capacity(kk);
    let mut cond_parts = Vec::with_capacity(kk);
    for &ra in &top_a_rows {
        let q = model.scaled_query(prep.a_to_b.apply(a.goals.positions[cand_a[ra]]));
        let lg = goal_scores(&model.cgp.seg_b, tape, store, fb.seg_base, Some(q))?;
        let pb = softmax_probs(tape, lg)?;
        let vals = tape.value(pb).data().to_vec();
        let rows = select_top_goals(&vals, &vec![true; vals.len()], kk);
        cond_parts.push(tape.gather_elems(pb, &rows.iter().map(|&r| (0, r)).collect::<Vec<_>>())?);
        top_b_rows.push(rows);
    }
    let rep: Vec<(usize, usize)> = top_a_rows
        .iter()
        .zip(&top_b_rows)
        .flat_map(|(&ra, rows)| std::iter::repeat((0, ra)).take(rows.len()))
        .collect();
    let marg = tape.gather_elems(probs_a, &rep)?;
    let cond = tape.concat_rows(&cond_parts)?;
    let joint = tape.mul(marg, cond)?;

    let top_a: Vec<usize> = top_a_rows.iter().map(|&r| cand_a[r]).collect();
    let top_b: Vec<Vec<usize>> = top_b_rows
        .iter()
        .map(|rows| rows.iter().map(|&r| cand_b[r]).collect())
        .collect();
    let targets = build_goal_targets(
        &a.goals, &a.usable, &b.goals, &b.usable, end_a, end_b, &top_a, &top_b, kk,
    );

    let loss_a = goal_loss_marginal(tape, probs_a, off_a, &a.goals, cand_a, &targets.k_a, end_a)?;
    let loss_b = goal_loss_conditional(tape, &[(probs_b, off_b)], &b.goals, cand_b, &targets.k_b, end_b)?;
    let loss_j = goal_interactive_loss(tape, joint, targets.k_j)?;

    let traj = model.teacher_forced_trajectories(
        tape,
        store,
        prep,
        &fa,
        &fb,
        (&a.partner_future, &b.partner_future),
    )?;
    let modes = kk * kk;
    let idx: Vec<usize> = std::iter::repeat(0).take(modes).chain(std::iter::repeat(1).take(modes)).collect();
    let all_modes = tape.gather_rows(traj, &idx)?;
    let loss_t = trajectory_loss(
        tape,
        all_modes,
        &a.future,
        &b.future,
        targets.k_j,
        cfg.traj_loss_mask_nonbest,
    )?;

    let total = if cfg.interactive_loss {
        sum_all(tape, &[loss_a, loss_b, loss_j, loss_t])?
    } else {
        sum_all(tape, &[loss_a, loss_b, loss_t])?
    };
    Ok(ScenarioLosses {
        losses: [loss_a, loss_b, loss_j, loss_t],
        total,
        joint,
        targets,
        top_a,
        top_b,
    })
}

/// [`scenario_losses`] on a fresh tape.
pub fn training_forward<T: Scalar>(
    model: &Cgtp,
    store: &ParameterStore<T>,
    prep: &PreparedScenario<T>,
    cfg: &TrainConfig,
) -> Result<ScenarioForward<T>, NumericsError> {
    let mut tape = Tape::new();
    let l = scenario_losses(&mut tape, model, store, prep, cfg)?;
    let [a, b, j, t] = l.losses;
    let val = |v: Var| tape.value(v).item().to_f64_lossy();
    let values = LossValues {
        goal_a: val(a),
        goal_b: val(b),
        joint: val(j),
        traj: val(t),
        total: val(l.total),
    };
    let joint_scores = tape.value(l.joint).data().to_vec();
    Ok(ScenarioForward {
        tape,
        losses: l.losses,
        total: l.total,
        values,
        targets: l.targets,
        top_a: l.top_a,
        top_b: l.top_b,
        joint_scores,
    })
}

type GradMap<T> = BTreeMap<String, NdArray<T>>;

/// Per-stage parameter gradients of one scenario.
pub struct ScenarioGrads<T> {
    pub stages: [GradMap<T>; 4],
    pub values: LossValues,
}

pub fn scenario_gradients<T: Scalar>(
    model: &Cgtp,
    store: &ParameterStore<T>,
    prep: &PreparedScenario<T>,
    cfg: &TrainConfig,
) -> Result<ScenarioGrads<T>, NumericsError> {
    let fwd = training_forward(model, store, prep, cfg)?;
    let mut stages: [GradMap<T>; 4] = Default::default();
    for stage in Stage::ALL {
        if stage == Stage::Interactive && !cfg.interactive_loss {
            continue;
        }
        let g = fwd.tape.backward(fwd.losses[stage.index()])?;
        let mut grads = fwd.tape.param_grads(&g);
        grads.retain(|name, _| stage.updates(name));
        stages[stage.index()] = grads;
    }
    Ok(ScenarioGrads {
        stages,
        values: fwd.values,
    })
}

fn add_into<T: Scalar>(acc: &mut GradMap<T>, g: GradMap<T>) {
    for (name, v) in g {
        match acc.get_mut(&name) {
            Some(a) => a.add_assign(&v),
            None => {
                acc.insert(name, v);
            }
        }
    }
}

fn grad_norm<T: Scalar>(g: &GradMap<T>) -> f64 {
    g.values()
        .flat_map(|a| a.data().iter())
        .map(|v| v.to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossValues,
    /// Mean batch gradient norm per stage.
    pub grad_norms: [f64; 4],
}

/// Applies the staged updates of one batch: mean gradients over the batch,
/// then one masked Adam step per stage in order. Returns the summed loss
/// values and per-stage gradient norms.
pub fn train_batch<T: Scalar>(
    model: &Cgtp,
    store: &mut ParameterStore<T>,
    batch: &[&PreparedScenario<T>],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<(LossValues, [f64; 4]), TrainError> {
    let chunk = rayon::current_num_threads().max(1) * 2;
    let mut acc: [GradMap<T>; 4] = Default::default();
    let mut sums = LossValues::default();
    let frozen: &ParameterStore<T> = store;
    for part in batch.chunks(chunk) {
        let results: Vec<Result<ScenarioGrads<T>, NumericsError>> = part
            .par_iter()
            .map(|p| scenario_gradients(model, frozen, p, cfg))
            .collect();
        for (p, r) in part.iter().zip(results) {
            let sg = r.map_err(|e| match e {
                NumericsError::NonFinite(d) => TrainError::NonFinite {
                    ids: batch.iter().map(|s| s.id.clone()).collect(),
                    detail: format!("{}: {d}", p.id),
                },
                other => other.into(),
            })?;
            if !sg.values.is_finite() {
                return Err(TrainError::NonFinite {
                    ids: batch.iter().map(|s| s.id.clone()).collect(),
                    detail: format!("{}: loss {:?}", p.id, sg.values),
                });
            }
            sums.add(&sg.values);
            for (a, g) in acc.iter_mut().zip(sg.stages) {
                add_into(a, g);
            }
        }
    }
    let inv = T::one() / T::from_usize(batch.len()).unwrap();
    let adam = cfg.adam(lr);
    let mut norms = [0.0; 4];
    for stage in Stage::ALL {
        if stage == Stage::Interactive && !cfg.interactive_loss {
            continue;
        }
        let g = &mut acc[stage.index()];
        for v in g.values_mut() {
            v.scale_assign(inv);
        }
        norms[stage.index()] = grad_norm(g);
        apply_stage(store, stage, g, &adam)?;
    }
    Ok((sums, norms))
}

/// One masked Adam step of `stage` with the given gradients; entries
/// outside the stage's groups are left untouched.
pub fn apply_stage<T: Scalar>(
    store: &mut ParameterStore<T>,
    stage: Stage,
    grads: &BTreeMap<String, NdArray<T>>,
    adam: &AdamConfig,
) -> Result<(), NumericsError> {
    store.accumulate_grads(grads)?;
    store.adam_update_masked(adam, |n| stage.updates(n))
}

/// One pass over the dataset in a seeded shuffled order.
pub fn train_epoch<T: Scalar>(
    model: &Cgtp,
    store: &mut ParameterStore<T>,
    data: &[PreparedScenario<T>],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochReport, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Config("empty dataset".into()));
    }
    cfg.validate()?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(epoch as u64 + 1);
    order.shuffle(&mut rng);
    let lr = cfg.lr_at(epoch);
    let mut losses = LossValues::default();
    let mut norms = [0.0; 4];
    let mut batches = 0;
    for idx in order.chunks(cfg.batch_size) {
        let batch: Vec<&PreparedScenario<T>> = idx.iter().map(|&i| &data[i]).collect();
        let (l, n) = train_batch(model, store, &batch, cfg, lr)?;
        losses.add(&l);
        for (a, b) in norms.iter_mut().zip(n) {
            *a += b;
        }
        batches += 1;
    }
    losses.scale(1.0 / data.len() as f64);
    for n in &mut norms {
        *n /= batches as f64;
    }
    Ok(EpochReport {
        epoch,
        lr,
        losses,
        grad_norms: norms,
    })
}

/// Mean loss values of a dataset without updating parameters.
pub fn evaluate_losses<T: Scalar>(
    model: &Cgtp,
    store: &ParameterStore<T>,
    data: &[PreparedScenario<T>],
    cfg: &TrainConfig,
) -> Result<LossValues, TrainError> {
    let results: Vec<Result<LossValues, NumericsError>> = data
        .par_iter()
        .map(|p| training_forward(model, store, p, cfg).map(|f| f.values))
        .collect();
    let mut sum = LossValues::default();
    for r in results {
        sum.add(&r?);
    }
    sum.scale(1.0 / data.len().max(1) as f64);
    Ok(sum)
}

pub const CHECKPOINT_FORMAT: u32 = 1;

/// Parameters with optimizer state, configs and progress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Checkpoint<T> {
    pub format: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epochs_completed: usize,
    pub store: ParameterStore<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn save<W: Write>(&self, mut w: W) -> Result<(), TrainError> {
        serde_json::to_writer(&mut w, self).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load<R: Read>(r: R) -> Result<Self, TrainError> {
        let c: Self = serde_json::from_reader(r).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(TrainError::Checkpoint(format!("unsupported format {}", c.format)));
        }
        Ok(c)
    }
}
