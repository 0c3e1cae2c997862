//! Scenario data model, agent frames, lane search, goal sampling and the
//! synthetic scenario generator.

mod context;
mod generator;
mod geometry;
mod io;
mod lanes;
mod polyline;
mod types;

pub use context::{select_context_agents, ContextSelection, DEFAULT_CONTEXT_SLOTS};
pub use generator::{generate_scenario_with, generate_synthetic_scenario, GeneratorConfig};
pub use geometry::{
    from_agent_frame, normalize_angle, project_on_segment, to_agent_frame, Point, Pose,
};
pub use io::{from_json_line, read_scenarios, to_json_line, write_scenarios};
pub use lanes::{
    enumerate_future_lanes, sample_goal_candidates, snap_to_lane, GoalCandidateSet,
    GoalSamplingConfig, LaneMatch, LanePath, LaneSearchConfig,
};
pub use polyline::{Polyline, Projection};
pub use types::{
    AgentId, Lane, LaneId, Role, Roles, Scenario, ScenarioKind, State, Track, STEP_SECONDS,
};

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("{scenario}: agent {agent} has no lane within {radius} m")]
    NoLane {
        scenario: String,
        agent: AgentId,
        radius: f64,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
