//! Model configuration, parameter layout and per-scenario network inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cgpnet::{CgpNet, HeadBase};
use crate::goinet::{
    assemble_agent_feature, assemble_goal_features, usable_goals, vectorize_polyline, FrameEncoding, GoalFeatures,
    GoiNet, GoiNetConfig, PolylineGraph, PolylineRole,
};
use crate::gtfnet::{FrameMap, GtfConfig, GtfNet, RolloutMode, RolloutSetup};
use crate::numerics::{NdArray, NumericsError, ParameterStore, Tape, Var};
use crate::scalar::Scalar;
use crate::scene::{
    enumerate_future_lanes, sample_goal_candidates, select_context_agents, GoalCandidateSet, GoalSamplingConfig,
    LaneSearchConfig, Point, Pose, Role, Scenario, SceneError, State,
};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{scenario}: agent {role:?} has {have} usable goal candidates, {need} needed")]
    TooFewGoals {
        scenario: String,
        role: Role,
        have: usize,
        need: usize,
    },
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
}

/// Network sizes and scene pre-processing constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_h: usize,
    pub graph_layers: usize,
    pub head_hidden: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub context_slots: usize,
    pub max_paths: usize,
    pub goals_per_path: usize,
    pub goal_spacing: f64,
    pub snap_radius: f64,
    pub depth_limit: f64,
    /// `𝒦`: goals kept per agent, giving `𝒦²` joint modes.
    pub top_k: usize,
    pub coord_scale: f64,
    /// Scale of candidate and query coordinates fed to the goal heads.
    pub goal_input_scale: f64,
    pub nms_radius: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_h: 16,
            graph_layers: 3,
            head_hidden: 128,
            enc_hidden: 128,
            dec_hidden: 128,
            context_slots: 14,
            max_paths: 6,
            goals_per_path: 200,
            goal_spacing: 0.5,
            snap_radius: 3.0,
            depth_limit: 120.0,
            top_k: 5,
            coord_scale: 0.1,
            goal_input_scale: 1.0,
            nms_radius: 2.0,
        }
    }
}

impl ModelConfig {
    /// Reduced widths and scene sizes for quick experiments and tests.
    pub fn small() -> Self {
        Self {
            d_h: 4,
            head_hidden: 64,
            enc_hidden: 16,
            dec_hidden: 32,
            context_slots: 4,
            max_paths: 2,
            goals_per_path: 50,
            ..Self::default()
        }
    }

    pub fn goinet(&self) -> GoiNetConfig {
        GoiNetConfig {
            d_h: self.d_h,
            layers: self.graph_layers,
            coord_scale: self.coord_scale,
        }
    }

    pub fn gtf(&self) -> GtfConfig {
        GtfConfig {
            enc_hidden: self.enc_hidden,
            dec_hidden: self.dec_hidden,
            coord_scale: self.coord_scale,
        }
    }

    pub fn lane_search(&self) -> LaneSearchConfig {
        LaneSearchConfig {
            max_paths: self.max_paths,
            snap_radius: self.snap_radius,
            depth_limit: self.depth_limit,
        }
    }

    pub fn goal_sampling(&self) -> GoalSamplingConfig {
        GoalSamplingConfig {
            goals_per_path: self.goals_per_path,
            spacing: self.goal_spacing,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let counts = [
            self.d_h,
            self.graph_layers,
            self.head_hidden,
            self.enc_hidden,
            self.dec_hidden,
            self.max_paths,
            self.goals_per_path,
            self.top_k,
        ];
        let reals = [self.goal_spacing, self.snap_radius, self.depth_limit, self.coord_scale, self.goal_input_scale, self.nms_radius];
        if counts.contains(&0) || reals.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(ModelError::Layout(format!("non-positive model setting in {self:?}")));
        }
        Ok(())
    }
}

/// The three networks; parameters live in a separate [`ParameterStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Cgtp {
    pub cfg: ModelConfig,
    pub goinet: GoiNet,
    pub cgp: CgpNet,
    pub gtf: GtfNet,
}

impl Cgtp {
    /// Registers freshly initialized parameters drawn from `seed`.
    pub fn init<T: Scalar>(cfg: ModelConfig, seed: u64) -> (Self, ParameterStore<T>) {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = cfg.goinet();
        let goinet = GoiNet::register(&mut store, g, &mut rng);
        let cgp = CgpNet::register(&mut store, g.goal_feature_dim(), cfg.head_hidden, &mut rng);
        let gtf = GtfNet::register(&mut store, cfg.gtf(), g.agent_feature_dim(), &mut rng);
        (Self { cfg, goinet, cgp, gtf }, store)
    }

    /// Network description for `cfg`, checked against an existing store.
    pub fn for_store<T: Scalar>(cfg: ModelConfig, store: &ParameterStore<T>) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (model, fresh) = Self::init::<T>(cfg, 0);
        for (name, entry) in fresh.entries() {
            let have = store
                .entry(name)
                .map_err(|_| ModelError::Layout(format!("missing parameter {name}")))?;
            if have.value.shape() != entry.value.shape() {
                return Err(ModelError::Layout(format!(
                    "{name}: expected shape {:?}, found {:?}",
                    entry.value.shape(),
                    have.value.shape()
                )));
            }
        }
        if let Some(extra) = store.names().find(|n| !fresh.contains(n)) {
            return Err(ModelError::Layout(format!("unexpected parameter {extra}")));
        }
        Ok(model)
    }
}

/// Everything one agent frame contributes to the networks.
#[derive(Debug, Clone)]
pub struct AgentView<T> {
    pub role: Role,
    pub frame: Pose<T>,
    pub graph: PolylineGraph<T>,
    pub goals: GoalCandidateSet<T>,
    pub usable: Vec<usize>,
    /// `[x, y, heading, speed]` per observed step, own frame.
    pub history: Vec<[T; 4]>,
    /// Ground-truth future, own frame.
    pub future: Vec<Point<T>>,
    /// Partner's ground-truth future, own frame.
    pub partner_future: Vec<Point<T>>,
    /// Partner's last observed position, own frame.
    pub partner_last: Point<T>,
    pub last_state: State<T>,
}

impl<T: Scalar> AgentView<T> {
    pub fn endpoint(&self) -> Point<T> {
        *self.future.last().expect("future present")
    }
}

#[derive(Debug, Clone)]
pub struct PreparedScenario<T> {
    pub id: String,
    pub a: AgentView<T>,
    pub b: AgentView<T>,
    pub horizon: usize,
    pub b_to_a: FrameMap<T>,
    pub a_to_b: FrameMap<T>,
}

impl<T: Scalar> PreparedScenario<T> {
    pub fn view(&self, role: Role) -> &AgentView<T> {
        match role {
            Role::A => &self.a,
            Role::B => &self.b,
        }
    }
}

fn agent_view<T: Scalar>(s: &Scenario<T>, role: Role, cfg: &ModelConfig) -> Result<AgentView<T>, ModelError> {
    let track = s.track(role);
    let partner = s.track(role.other());
    let frame = s.frame(role);
    let last = s.last_observed(track);
    let t_last = last.t;

    let mut graph = PolylineGraph::new(cfg.context_slots, cfg.max_paths);
    let trajectory = |tr: &crate::scene::Track<T>, role: PolylineRole, slot: usize| {
        let hist = s.history(tr);
        let pts: Vec<Point<T>> = hist.iter().map(|st| frame.to_local(st.position())).collect();
        let times: Vec<T> = hist.iter().map(|st| st.t - t_last).collect();
        vectorize_polyline(&pts, &times, role, slot)
    };
    graph.slots[0] = Some(trajectory(track, PolylineRole::EgoHistory, 0));
    let ctx = select_context_agents(s, track.id, cfg.context_slots);
    for (i, agent) in ctx.slots.iter().enumerate() {
        if let Some(idx) = agent {
            graph.slots[1 + i] = Some(trajectory(&s.agents[*idx], PolylineRole::ContextHistory, 1 + i));
        }
    }

    let paths = enumerate_future_lanes(s, track.id, &cfg.lane_search())?;
    let goals = sample_goal_candidates(
        &paths,
        track.id,
        &frame,
        Some(s.endpoint(role)),
        cfg.max_paths,
        &cfg.goal_sampling(),
    );
    for p in 0..cfg.max_paths {
        let idx = goals.path_goals(p);
        if idx.len() < 2 {
            continue;
        }
        let pts: Vec<Point<T>> = idx.iter().map(|&k| goals.positions[k]).collect();
        let arcs: Vec<T> = idx.iter().map(|&k| goals.arc[k]).collect();
        let slot = graph.lane_slot(p);
        graph.slots[slot] = Some(vectorize_polyline(&pts, &arcs, PolylineRole::FutureLane, slot));
    }
    let usable = usable_goals(&goals);
    if usable.len() < cfg.top_k {
        return Err(ModelError::TooFewGoals {
            scenario: s.id(),
            role,
            have: usable.len(),
            need: cfg.top_k,
        });
    }

    let history = s
        .history(track)
        .iter()
        .map(|st| {
            let p = frame.to_local(st.position());
            [p.x, p.y, crate::scene::normalize_angle(st.heading - frame.heading), st.speed]
        })
        .collect();
    let local = |states: &[State<T>]| states.iter().map(|st| frame.to_local(st.position())).collect();
    Ok(AgentView {
        role,
        frame,
        graph,
        goals,
        usable,
        history,
        future: local(s.future(role)),
        partner_future: local(s.future(role.other())),
        partner_last: frame.to_local(s.last_observed(partner).position()),
        last_state: last,
    })
}

/// Builds both agent views. Fails when an agent cannot be bound to a lane
/// or has fewer than `𝒦` usable goal candidates.
pub fn prepare_scenario<T: Scalar>(s: &Scenario<T>, cfg: &ModelConfig) -> Result<PreparedScenario<T>, ModelError> {
    s.validate()?;
    let a = agent_view(s, Role::A, cfg)?;
    let b = agent_view(s, Role::B, cfg)?;
    let (m, c) = a.frame.relative_transform(&b.frame);
    let b_to_a = FrameMap { m, c };
    let (m, c) = b.frame.relative_transform(&a.frame);
    let a_to_b = FrameMap { m, c };
    Ok(PreparedScenario {
        id: s.id(),
        a,
        b,
        horizon: s.horizon,
        b_to_a,
        a_to_b,
    })
}

/// Encoder outputs of one agent frame.
#[derive(Debug, Clone)]
pub struct FrameForward {
    pub encoding: FrameEncoding,
    pub agent_feature: Var,
    pub goals: GoalFeatures,
    pub seg_base: HeadBase,
    pub reg_base: HeadBase,
}

impl Cgtp {
    pub fn frame_forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        view: &AgentView<T>,
    ) -> Result<FrameForward, NumericsError> {
        let encoding = self.goinet.encode_frame(tape, store, &view.graph)?;
        let agent_feature = assemble_agent_feature(tape, &encoding)?;
        let goals = assemble_goal_features(tape, &encoding, &view.graph, &view.goals)?;
        let s = T::lit(self.cfg.goal_input_scale);
        let data = goals
            .candidates
            .iter()
            .flat_map(|&k| [view.goals.positions[k].x * s, view.goals.positions[k].y * s])
            .collect();
        let pos = tape.constant(NdArray::matrix(goals.candidates.len(), 2, data)?)?;
        let seg_base = self.cgp.seg(view.role).base(tape, store, goals.features, pos)?;
        let reg_base = self.cgp.reg(view.role).base(tape, store, goals.features, pos)?;
        Ok(FrameForward {
            encoding,
            agent_feature,
            goals,
            seg_base,
            reg_base,
        })
    }

    /// Rollout inputs for the given per-mode goal pairs (meters, own frames).
    #[allow(clippy::too_many_arguments)]
    pub fn rollout_setup<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        prep: &PreparedScenario<T>,
        fa: &FrameForward,
        fb: &FrameForward,
        goals_a: Vec<Point<T>>,
        goals_b: Vec<Point<T>>,
    ) -> Result<RolloutSetup<T>, NumericsError> {
        let u = self
            .gtf
            .encode_histories(tape, store, &[&prep.a.history, &prep.b.history])?;
        let u_a = tape.slice_rows(u, 0..1)?;
        let u_b = tape.slice_rows(u, 1..2)?;
        Ok(RolloutSetup {
            modes: goals_a.len(),
            goals_a,
            goals_b,
            s_a: fa.agent_feature,
            s_b: fb.agent_feature,
            u_a,
            u_b,
            b_to_a: prep.b_to_a,
            a_to_b: prep.a_to_b,
            init_for_a: prep.a.partner_last,
            init_for_b: prep.b.partner_last,
        })
    }

    /// Single-mode rollout towards the true endpoints, fed the partner
    /// states in `partner` (`.0` in A's frame, `.0[δ]` consumed at step
    /// `δ+2`). Returns `[2, 2T]` meters, A's row first.
    pub fn teacher_forced_trajectories<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        prep: &PreparedScenario<T>,
        fa: &FrameForward,
        fb: &FrameForward,
        partner: (&[Point<T>], &[Point<T>]),
    ) -> Result<Var, NumericsError> {
        let setup = self.rollout_setup(tape, store, prep, fa, fb, vec![prep.a.endpoint()], vec![prep.b.endpoint()])?;
        let trace = self
            .gtf
            .rollout_joint(tape, store, &setup, prep.horizon, RolloutMode::TeacherForced, Some(partner))?;
        self.gtf.trajectories(tape, &trace)
    }

    /// Query point scaled for the heads.
    pub fn scaled_query<T: Scalar>(&self, p: Point<T>) -> Point<T> {
        p.scale(T::lit(self.cfg.goal_input_scale))
    }
}
