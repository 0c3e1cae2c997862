use std::f64::consts::FRAC_PI_2;

use super::geometry::{normalize_angle, Point, Pose};
use super::polyline::Polyline;
use super::types::{AgentId, LaneId, Scenario};
use super::SceneError;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneSearchConfig {
    /// Maximum number of future lane paths `P`.
    pub max_paths: usize,
    pub snap_radius: f64,
    /// Cumulative path length after which the search stops descending.
    pub depth_limit: f64,
}

impl Default for LaneSearchConfig {
    fn default() -> Self {
        Self {
            max_paths: 6,
            snap_radius: 3.0,
            depth_limit: 120.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoalSamplingConfig {
    pub goals_per_path: usize,
    pub spacing: f64,
}

impl Default for GoalSamplingConfig {
    fn default() -> Self {
        Self {
            goals_per_path: 200,
            spacing: 0.5,
        }
    }
}

/// Result of binding a point to the lane graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneMatch<T> {
    pub lane: LaneId,
    pub arc: T,
    pub distance: T,
}

/// Nearest lane within `radius`. Lanes whose direction agrees with
/// `heading` (when given) win over opposing ones; a projection onto the
/// very end of a lane that continues into successors is left to them.
pub fn snap_to_lane<T: Scalar>(
    s: &Scenario<T>,
    p: Point<T>,
    heading: Option<T>,
    radius: f64,
) -> Option<LaneMatch<T>> {
    let mut best: Option<((bool, T, LaneId), LaneMatch<T>)> = None;
    for lane in &s.lanes {
        let Some(poly) = lane.polyline() else { continue };
        let proj = poly.project(p);
        if proj.distance > T::lit(radius) {
            continue;
        }
        let at_end = proj.arc >= poly.length() - T::lit(1e-6);
        if at_end && !lane.successors.is_empty() {
            continue;
        }
        let misaligned = heading.map_or(false, |h| {
            normalize_angle(h - proj.heading).abs() > T::lit(FRAC_PI_2)
        });
        let key = (misaligned, proj.distance, lane.id);
        let better = match &best {
            None => true,
            Some((k, _)) => {
                (key.0, key.1, key.2)
                    .partial_cmp(&(k.0, k.1, k.2))
                    .map_or(false, |o| o.is_lt())
            }
        };
        if better {
            best = Some((
                key,
                LaneMatch {
                    lane: lane.id,
                    arc: proj.arc,
                    distance: proj.distance,
                },
            ));
        }
    }
    best.map(|(_, m)| m)
}

/// A candidate future route concatenated into one polyline that starts at
/// the agent's projection onto its current lane.
#[derive(Debug, Clone, PartialEq)]
pub struct LanePath<T> {
    pub lane_ids: Vec<LaneId>,
    pub polyline: Polyline<T>,
    /// Arc length along `polyline` at which each lane of `lane_ids` begins.
    pub lane_starts: Vec<T>,
}

impl<T: Scalar> LanePath<T> {
    pub fn lane_at(&self, arc: T) -> LaneId {
        let i = self.lane_starts.iter().rposition(|&s| s <= arc).unwrap_or(0);
        self.lane_ids[i]
    }

    pub fn length(&self) -> T {
        self.polyline.length()
    }
}

/// Depth-first search over successors (ascending id) from the lane the
/// agent is snapped to. Each emitted path runs until the lane graph ends or
/// the cumulative length reaches the depth limit.
pub fn enumerate_future_lanes<T: Scalar>(
    s: &Scenario<T>,
    agent: AgentId,
    cfg: &LaneSearchConfig,
) -> Result<Vec<LanePath<T>>, SceneError> {
    let track = s
        .agent(agent)
        .ok_or_else(|| SceneError::Invalid(format!("{}: agent {agent} missing", s.id())))?;
    let last = s.last_observed(track);
    let m = snap_to_lane(s, last.position(), Some(last.heading), cfg.snap_radius).ok_or_else(
        || SceneError::NoLane {
            scenario: s.id(),
            agent,
            radius: cfg.snap_radius,
        },
    )?;
    let mut out = Vec::new();
    let mut stack = vec![m.lane];
    dfs(s, cfg, m.arc, &mut stack, &mut out);
    if out.is_empty() {
        return Err(SceneError::NoLane {
            scenario: s.id(),
            agent,
            radius: cfg.snap_radius,
        });
    }
    Ok(out)
}

fn dfs<T: Scalar>(
    s: &Scenario<T>,
    cfg: &LaneSearchConfig,
    start_arc: T,
    stack: &mut Vec<LaneId>,
    out: &mut Vec<LanePath<T>>,
) {
    if out.len() >= cfg.max_paths {
        return;
    }
    let path = build_path(s, stack, start_arc);
    let reached = path
        .as_ref()
        .map_or(false, |p| p.length() >= T::lit(cfg.depth_limit));
    let mut next: Vec<LaneId> = s
        .lane(*stack.last().unwrap())
        .map(|l| l.successors.clone())
        .unwrap_or_default();
    next.sort_unstable();
    next.dedup();
    next.retain(|id| !stack.contains(id));
    if reached || next.is_empty() {
        if let Some(p) = path {
            out.push(p);
        }
        return;
    }
    for id in next {
        stack.push(id);
        dfs(s, cfg, start_arc, stack, out);
        stack.pop();
    }
}

fn build_path<T: Scalar>(s: &Scenario<T>, ids: &[LaneId], start_arc: T) -> Option<LanePath<T>> {
    let mut pts: Vec<Point<T>> = Vec::new();
    let mut starts = Vec::new();
    let mut offset = T::zero();
    for (i, id) in ids.iter().enumerate() {
        let poly = s.lane(*id)?.polyline()?;
        let piece = if i == 0 {
            match poly.tail_from(start_arc) {
                Some(p) => p,
                None => {
                    starts.push(T::zero());
                    continue;
                }
            }
        } else {
            poly
        };
        starts.push(offset);
        offset = offset + piece.length();
        pts.extend_from_slice(piece.points());
    }
    let polyline = Polyline::new(pts)?;
    Some(LanePath {
        lane_ids: ids.to_vec(),
        polyline,
        lane_starts: starts,
    })
}

/// Fine-grained goal candidates of one agent: `P` path slots of `G`
/// candidates each, expressed in the agent's frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalCandidateSet<T> {
    pub agent_id: AgentId,
    pub goals_per_path: usize,
    pub positions: Vec<Point<T>>,
    pub mask: Vec<bool>,
    pub source_lane: Vec<Option<LaneId>>,
    /// Arc length of each candidate along its path.
    pub arc: Vec<T>,
    /// `endpoint − candidate` for real candidates when the endpoint is known.
    pub offsets_gt: Vec<Point<T>>,
    /// True endpoint in the agent's frame, if known.
    pub endpoint: Option<Point<T>>,
}

impl<T: Scalar> GoalCandidateSet<T> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn num_paths(&self) -> usize {
        self.len() / self.goals_per_path.max(1)
    }

    pub fn path_of(&self, k: usize) -> usize {
        k / self.goals_per_path
    }

    pub fn real_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn real_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i)
    }

    /// Real candidates of one path slot, in order.
    pub fn path_goals(&self, path: usize) -> Vec<usize> {
        let g = self.goals_per_path;
        (path * g..(path + 1) * g).filter(|&k| self.mask[k]).collect()
    }

    /// Real candidate closest to `p` (ties → lower index).
    pub fn nearest(&self, p: Point<T>) -> Option<usize> {
        self.real_indices().fold(None, |best: Option<(usize, T)>, k| {
            let d = self.positions[k].dist(p);
            match best {
                Some((_, bd)) if bd <= d => best,
                _ => Some((k, d)),
            }
        })
        .map(|(k, _)| k)
    }
}

/// Resamples every path at `spacing` from the agent's projection:
/// `min(G, floor(L / spacing))` real candidates per path, the rest masked.
/// Slots beyond the available paths are fully masked.
pub fn sample_goal_candidates<T: Scalar>(
    paths: &[LanePath<T>],
    agent_id: AgentId,
    frame: &Pose<T>,
    endpoint_world: Option<Point<T>>,
    max_paths: usize,
    cfg: &GoalSamplingConfig,
) -> GoalCandidateSet<T> {
    let g = cfg.goals_per_path;
    let k_total = max_paths * g;
    let endpoint = endpoint_world.map(|p| frame.to_local(p));
    let mut set = GoalCandidateSet {
        agent_id,
        goals_per_path: g,
        positions: vec![Point::default(); k_total],
        mask: vec![false; k_total],
        source_lane: vec![None; k_total],
        arc: vec![T::zero(); k_total],
        offsets_gt: vec![Point::default(); k_total],
        endpoint,
    };
    for (p, path) in paths.iter().take(max_paths).enumerate() {
        let len = path.length().to_f64_lossy();
        let count = ((len / cfg.spacing + 1e-9).floor() as usize).min(g);
        for i in 0..count {
            let k = p * g + i;
            let s = T::lit((i + 1) as f64 * cfg.spacing);
            let local = frame.to_local(path.polyline.point_at(s));
            set.positions[k] = local;
            set.mask[k] = true;
            set.source_lane[k] = Some(path.lane_at(s));
            set.arc[k] = s;
            if let Some(e) = endpoint {
                set.offsets_gt[k] = e.sub(local);
            }
        }
    }
    set
}
