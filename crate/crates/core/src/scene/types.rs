use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::geometry::{Point, Pose};
use super::polyline::Polyline;
use super::SceneError;
use crate::scalar::Scalar;

pub type AgentId = u32;
pub type LaneId = u32;

/// Sampling interval of every track, seconds.
pub const STEP_SECONDS: f64 = 0.1;

/// One tracked state; serialized as `[t, x, y, heading, speed]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", from = "[T; 5]", into = "[T; 5]")]
pub struct State<T> {
    pub t: T,
    pub x: T,
    pub y: T,
    pub heading: T,
    pub speed: T,
}

impl<T> From<[T; 5]> for State<T> {
    fn from([t, x, y, heading, speed]: [T; 5]) -> Self {
        Self { t, x, y, heading, speed }
    }
}

impl<T> From<State<T>> for [T; 5] {
    fn from(s: State<T>) -> Self {
        [s.t, s.x, s.y, s.heading, s.speed]
    }
}

impl<T: Scalar> State<T> {
    pub fn position(&self) -> Point<T> {
        Point::new(self.x, self.y)
    }

    pub fn pose(&self) -> Pose<T> {
        Pose::new(self.x, self.y, self.heading)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Track<T> {
    pub id: AgentId,
    /// `[length, width]` in meters.
    #[serde(rename = "box")]
    pub box_dims: [T; 2],
    pub states: Vec<State<T>>,
}

impl<T: Scalar> Track<T> {
    pub fn length(&self) -> T {
        self.box_dims[0]
    }

    pub fn width(&self) -> T {
        self.box_dims[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Lane<T> {
    pub id: LaneId,
    pub centerline: Vec<Point<T>>,
    pub successors: Vec<LaneId>,
}

impl<T: Scalar> Lane<T> {
    pub fn polyline(&self) -> Option<Polyline<T>> {
        Polyline::new(self.centerline.iter().copied())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    CutIn,
    Yielding,
    Merging,
    LeftTurn,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::CutIn,
        ScenarioKind::Yielding,
        ScenarioKind::Merging,
        ScenarioKind::LeftTurn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::CutIn => "cut_in",
            ScenarioKind::Yielding => "yielding",
            ScenarioKind::Merging => "merging",
            ScenarioKind::LeftTurn => "left_turn",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioKind {
    type Err = SceneError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| SceneError::Invalid(format!("unknown scenario kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roles {
    #[serde(rename = "A")]
    pub a: AgentId,
    #[serde(rename = "B")]
    pub b: AgentId,
}

/// Which of the two interacting agents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    A,
    B,
}

impl Role {
    pub fn other(self) -> Role {
        match self {
            Role::A => Role::B,
            Role::B => Role::A,
        }
    }
}

/// One frame: the interacting pair, surrounding traffic and the lane graph.
///
/// Every track shares the time grid starting at index 0. States
/// `0..t_obs` are observed; `t_obs..t_obs + horizon` is the future.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Scenario<T> {
    pub kind: ScenarioKind,
    pub seed: u64,
    pub agents: Vec<Track<T>>,
    pub lanes: Vec<Lane<T>>,
    pub roles: Roles,
    pub t_obs: usize,
    pub horizon: usize,
}

impl<T: Scalar> Scenario<T> {
    pub fn id(&self) -> String {
        format!("{}_{}", self.kind, self.seed)
    }

    pub fn agent_index(&self, id: AgentId) -> Option<usize> {
        self.agents.iter().position(|a| a.id == id)
    }

    pub fn agent(&self, id: AgentId) -> Option<&Track<T>> {
        self.agents.iter().find(|a| a.id == id)
    }

    pub fn role_id(&self, role: Role) -> AgentId {
        match role {
            Role::A => self.roles.a,
            Role::B => self.roles.b,
        }
    }

    /// Track of an interacting agent. Panics on an unvalidated scenario.
    pub fn track(&self, role: Role) -> &Track<T> {
        self.agent(self.role_id(role)).expect("role agent present")
    }

    /// Agents other than the interacting pair.
    pub fn context(&self) -> impl Iterator<Item = &Track<T>> {
        let r = self.roles;
        self.agents.iter().filter(move |a| a.id != r.a && a.id != r.b)
    }

    pub fn lane(&self, id: LaneId) -> Option<&Lane<T>> {
        self.lanes.iter().find(|l| l.id == id)
    }

    pub fn last_observed(&self, track: &Track<T>) -> State<T> {
        track.states[self.t_obs - 1]
    }

    /// Reference frame of an agent: its last observed pose.
    pub fn frame(&self, role: Role) -> Pose<T> {
        self.last_observed(self.track(role)).pose()
    }

    pub fn history<'a>(&self, track: &'a Track<T>) -> &'a [State<T>] {
        &track.states[..self.t_obs]
    }

    pub fn future(&self, role: Role) -> &[State<T>] {
        &self.track(role).states[self.t_obs..self.t_obs + self.horizon]
    }

    pub fn endpoint(&self, role: Role) -> Point<T> {
        self.future(role).last().expect("horizon > 0").position()
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::Invalid(format!("{}: {m}", self.id())));
        if self.t_obs == 0 {
            return bad("t_obs must be positive".into());
        }
        if self.horizon == 0 {
            return bad("horizon must be positive".into());
        }
        if self.roles.a == self.roles.b {
            return bad("roles A and B name the same agent".into());
        }
        let mut seen = BTreeMap::new();
        for a in &self.agents {
            if seen.insert(a.id, ()).is_some() {
                return bad(format!("duplicate agent id {}", a.id));
            }
            if !(a.box_dims[0] > T::zero() && a.box_dims[1] > T::zero()) {
                return bad(format!("agent {} has a non-positive box", a.id));
            }
            if a.states.len() < self.t_obs {
                return bad(format!("agent {} lacks a full history", a.id));
            }
            for w in a.states.windows(2) {
                if !(w[1].t > w[0].t) {
                    return bad(format!("agent {} timestamps not strictly increasing", a.id));
                }
            }
            for s in &a.states {
                let v: [T; 5] = (*s).into();
                if v.iter().any(|x| !x.is_finite()) {
                    return bad(format!("agent {} has a non-finite state", a.id));
                }
            }
        }
        for role in [Role::A, Role::B] {
            let id = self.role_id(role);
            match self.agent(id) {
                None => return bad(format!("role agent {id} missing")),
                Some(t) if t.states.len() < self.t_obs + self.horizon => {
                    return bad(format!("agent {id} lacks a full future"))
                }
                _ => {}
            }
        }
        let mut lane_ids = BTreeMap::new();
        for l in &self.lanes {
            if lane_ids.insert(l.id, ()).is_some() {
                return bad(format!("duplicate lane id {}", l.id));
            }
        }
        for l in &self.lanes {
            if l.centerline.len() < 2 {
                return bad(format!("lane {} has fewer than two points", l.id));
            }
            if l.centerline.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
                return bad(format!("lane {} has a non-finite point", l.id));
            }
            if l.centerline.windows(2).any(|w| w[0] == w[1]) {
                return bad(format!("lane {} repeats a centerline point", l.id));
            }
            if let Some(s) = l.successors.iter().find(|s| !lane_ids.contains_key(s)) {
                return bad(format!("lane {} names unknown successor {s}", l.id));
            }
        }
        Ok(())
    }
}
