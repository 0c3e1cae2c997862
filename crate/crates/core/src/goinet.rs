//! Hierarchical vectorized context encoder: per-polyline local graphs,
//! polyline pooling, attention across polylines and structural features
//! for agents and goal candidates.

use std::ops::Range;

use rand::Rng;

use crate::numerics::{scaled_dot_attention, Dense, NdArray, NormedDense, NumericsError, ParameterStore, Tape, Var};
use crate::scalar::Scalar;
use crate::scene::{GoalCandidateSet, Point};

/// Per-node input width: start (2), end (2), lane flag, ego flag, position.
pub const NODE_INPUT_DIM: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoiNetConfig {
    /// Width of the first layer's mapped feature.
    pub d_h: usize,
    /// Number of local graph layers.
    pub layers: usize,
    /// Meters to network units for coordinates.
    pub coord_scale: f64,
}

impl Default for GoiNetConfig {
    fn default() -> Self {
        Self {
            d_h: 16,
            layers: 3,
            coord_scale: 0.1,
        }
    }
}

impl GoiNetConfig {
    /// Output width of the mapping at layer `l` (0-based): doubles per layer.
    pub fn mapped_dim(&self, l: usize) -> usize {
        self.d_h << l
    }

    /// Node feature width after layer `l`: mapped part plus pooled part.
    pub fn node_dim(&self, l: usize) -> usize {
        2 * self.mapped_dim(l)
    }

    /// Polyline feature width `d_H`.
    pub fn feature_dim(&self) -> usize {
        self.node_dim(self.layers - 1)
    }

    pub fn agent_feature_dim(&self) -> usize {
        2 * self.feature_dim()
    }

    pub fn goal_feature_dim(&self) -> usize {
        3 * self.feature_dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolylineRole {
    EgoHistory,
    ContextHistory,
    FutureLane,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VectorNode<T> {
    pub start: Point<T>,
    pub end: Point<T>,
    pub polyline: usize,
    pub role: PolylineRole,
    /// Timestamp (trajectories, seconds) or arc length (lanes, meters) of
    /// the end point.
    pub position: T,
}

impl<T: Scalar> VectorNode<T> {
    pub fn features(&self, coord_scale: T) -> [T; NODE_INPUT_DIM] {
        let flag = |b: bool| if b { T::one() } else { T::zero() };
        let pos = match self.role {
            PolylineRole::FutureLane => self.position * coord_scale,
            _ => self.position,
        };
        [
            self.start.x * coord_scale,
            self.start.y * coord_scale,
            self.end.x * coord_scale,
            self.end.y * coord_scale,
            flag(self.role == PolylineRole::FutureLane),
            flag(self.role == PolylineRole::EgoHistory),
            pos,
        ]
    }
}

/// Connects consecutive key points into vectors. `positions[i]` belongs to
/// `points[i]`; fewer than two points give no nodes.
pub fn vectorize_polyline<T: Scalar>(
    points: &[Point<T>],
    positions: &[T],
    role: PolylineRole,
    j: usize,
) -> Vec<VectorNode<T>> {
    points
        .windows(2)
        .zip(positions.iter().skip(1))
        .map(|(w, &position)| VectorNode {
            start: w[0],
            end: w[1],
            polyline: j,
            role,
            position,
        })
        .collect()
}

/// All polyline slots of one agent frame. Slot 0 is the ego history,
/// followed by context histories and then future lanes; `None` slots are
/// masked.
#[derive(Debug, Clone, PartialEq)]
pub struct PolylineGraph<T> {
    pub slots: Vec<Option<Vec<VectorNode<T>>>>,
    pub context_slots: usize,
    pub lane_slots: usize,
}

impl<T: Scalar> PolylineGraph<T> {
    pub fn new(context_slots: usize, lane_slots: usize) -> Self {
        Self {
            slots: vec![None; 1 + context_slots + lane_slots],
            context_slots,
            lane_slots,
        }
    }

    pub fn lane_slot(&self, path: usize) -> usize {
        1 + self.context_slots + path
    }

    pub fn mask(&self) -> Vec<bool> {
        self.slots.iter().map(|s| s.as_ref().is_some_and(|n| !n.is_empty())).collect()
    }

    /// Stacked node inputs, one row range per present slot, and the slot of
    /// each range.
    pub fn node_matrix(&self, coord_scale: f64) -> (NdArray<T>, Vec<Range<usize>>, Vec<usize>) {
        let scale = T::lit(coord_scale);
        let mut data = Vec::new();
        let mut segments = Vec::new();
        let mut slots = Vec::new();
        let mut row = 0;
        for (slot, nodes) in self.slots.iter().enumerate() {
            let Some(nodes) = nodes else { continue };
            if nodes.is_empty() {
                continue;
            }
            for n in nodes {
                data.extend_from_slice(&n.features(scale));
            }
            segments.push(row..row + nodes.len());
            slots.push(slot);
            row += nodes.len();
        }
        let m = NdArray::matrix(row, NODE_INPUT_DIM, data).expect("node matrix");
        (m, segments, slots)
    }
}

/// Encoder parameters, named under `goinet.`.
#[derive(Debug, Clone, PartialEq)]
pub struct GoiNet {
    pub cfg: GoiNetConfig,
    layers: Vec<NormedDense>,
    query: Dense,
    key: Dense,
    value: Dense,
}

/// Outputs of one frame's encoding.
#[derive(Debug, Clone)]
pub struct FrameEncoding {
    /// Final node features of every present node.
    pub nodes: Var,
    pub segments: Vec<Range<usize>>,
    /// Slot of each segment.
    pub segment_slots: Vec<usize>,
    /// Padded polyline features, one row per slot (zero rows if masked).
    pub local: Var,
    /// Attention output per slot (zero rows if masked).
    pub global: Var,
    pub mask: Vec<bool>,
}

impl FrameEncoding {
    pub fn segment_of_slot(&self, slot: usize) -> Option<&Range<usize>> {
        self.segment_slots
            .iter()
            .position(|&s| s == slot)
            .map(|i| &self.segments[i])
    }
}

impl GoiNet {
    pub fn register<T: Scalar>(store: &mut ParameterStore<T>, cfg: GoiNetConfig, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(cfg.layers);
        let mut input = NODE_INPUT_DIM;
        for l in 0..cfg.layers {
            let out = cfg.mapped_dim(l);
            layers.push(NormedDense::register(store, &format!("goinet.local.l{l}"), out, input, rng));
            input = cfg.node_dim(l);
        }
        let d = cfg.feature_dim();
        let query = Dense::register(store, "goinet.att.query", d, d, true, rng);
        let key = Dense::register(store, "goinet.att.key", d, d, true, rng);
        let value = Dense::register(store, "goinet.att.value", d, d, true, rng);
        Self {
            cfg,
            layers,
            query,
            key,
            value,
        }
    }

    /// Runs the local graph layers over stacked nodes. Returns the final
    /// node features and the max-pooled feature of each segment.
    pub fn encode_local<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        nodes: Var,
        segments: &[Range<usize>],
    ) -> Result<(Var, Var), NumericsError> {
        let mut v = nodes;
        for layer in &self.layers {
            let h = layer.forward(tape, store, v)?;
            let pooled = tape.segment_max_others(h, segments)?;
            v = tape.concat_cols(&[h, pooled])?;
        }
        let poly = tape.segment_max(v, segments)?;
        Ok((v, poly))
    }

    /// Single-head attention across the padded polyline rows.
    pub fn global_interaction<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        h: Var,
        mask: &[bool],
    ) -> Result<Var, NumericsError> {
        if !mask.iter().any(|&m| m) {
            return Err(NumericsError::Contract("global interaction: every polyline is masked".into()));
        }
        let q = self.query.forward(tape, store, h)?;
        let k = self.key.forward(tape, store, h)?;
        let v = self.value.forward(tape, store, h)?;
        scaled_dot_attention(tape, q, k, v, Some(mask), Some(mask))
    }

    pub fn encode_frame<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        graph: &PolylineGraph<T>,
    ) -> Result<FrameEncoding, NumericsError> {
        let (inputs, segments, segment_slots) = graph.node_matrix(self.cfg.coord_scale);
        if segments.is_empty() {
            return Err(NumericsError::Contract("frame has no polylines".into()));
        }
        let x = tape.constant(inputs)?;
        let (nodes, poly) = self.encode_local(tape, store, x, &segments)?;
        let local = tape.scatter_rows(poly, &segment_slots, graph.slots.len())?;
        let mask = graph.mask();
        let global = self.global_interaction(tape, store, local, &mask)?;
        Ok(FrameEncoding {
            nodes,
            segments,
            segment_slots,
            local,
            global,
            mask,
        })
    }
}

/// Local and pooled features of a single polyline.
pub fn encode_local_graph<T: Scalar>(
    net: &GoiNet,
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    nodes: &[VectorNode<T>],
) -> Result<(Var, Var), NumericsError> {
    if nodes.is_empty() {
        return Err(NumericsError::Contract("local graph needs at least one node".into()));
    }
    let scale = T::lit(net.cfg.coord_scale);
    let data = nodes.iter().flat_map(|n| n.features(scale)).collect();
    let x = tape.constant(NdArray::matrix(nodes.len(), NODE_INPUT_DIM, data)?)?;
    net.encode_local(tape, store, x, &[0..nodes.len()])
}

/// `s_X = [local ‖ global]` of the ego history slot, shape `[1, 2·d_H]`.
pub fn assemble_agent_feature<T: Scalar>(tape: &mut Tape<T>, enc: &FrameEncoding) -> Result<Var, NumericsError> {
    let local = tape.slice_rows(enc.local, 0..1)?;
    let global = tape.slice_rows(enc.global, 0..1)?;
    tape.concat_cols(&[local, global])
}

/// Structural features of the usable candidates.
#[derive(Debug, Clone)]
pub struct GoalFeatures {
    /// `[n, 3·d_H]`: node, lane local and lane global features.
    pub features: Var,
    /// Candidate index of each feature row.
    pub candidates: Vec<usize>,
}

/// Candidates usable by the heads: real and on a lane polyline that was
/// encoded (at least two candidates on the path).
pub fn usable_goals<T: Scalar>(goals: &GoalCandidateSet<T>) -> Vec<usize> {
    (0..goals.num_paths())
        .flat_map(|p| {
            let idx = goals.path_goals(p);
            if idx.len() >= 2 { idx } else { Vec::new() }
        })
        .collect()
}

/// Goal `i` of a path binds to the vector ending at it; the first goal
/// binds to the first vector.
pub fn assemble_goal_features<T: Scalar>(
    tape: &mut Tape<T>,
    enc: &FrameEncoding,
    graph: &PolylineGraph<T>,
    goals: &GoalCandidateSet<T>,
) -> Result<GoalFeatures, NumericsError> {
    let candidates = usable_goals(goals);
    let mut node_rows = Vec::with_capacity(candidates.len());
    let mut slot_rows = Vec::with_capacity(candidates.len());
    for &k in &candidates {
        let path = goals.path_of(k);
        let slot = graph.lane_slot(path);
        let seg = enc.segment_of_slot(slot).ok_or_else(|| {
            NumericsError::Contract(format!("goal {k} lies on unencoded lane slot {slot}"))
        })?;
        let i = k - path * goals.goals_per_path;
        node_rows.push(seg.start + i.max(1) - 1);
        slot_rows.push(slot);
    }
    if candidates.is_empty() {
        return Err(NumericsError::Contract("no usable goal candidates".into()));
    }
    let node = tape.gather_rows(enc.nodes, &node_rows)?;
    let local = tape.gather_rows(enc.local, &slot_rows)?;
    let global = tape.gather_rows(enc.global, &slot_rows)?;
    let features = tape.concat_cols(&[node, local, global])?;
    Ok(GoalFeatures { features, candidates })
}
