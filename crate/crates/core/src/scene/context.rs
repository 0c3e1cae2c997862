use super::types::{AgentId, Scenario};
use crate::scalar::Scalar;

/// Default number of neighbour slots.
pub const DEFAULT_CONTEXT_SLOTS: usize = 14;

/// Padded, distance-ordered neighbour slots of one agent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextSelection {
    /// Index into `Scenario::agents` per slot; `None` is a masked slot.
    pub slots: Vec<Option<usize>>,
}

impl ContextSelection {
    pub fn present(&self) -> impl Iterator<Item = usize> + '_ {
        self.slots.iter().flatten().copied()
    }

    pub fn mask(&self) -> Vec<bool> {
        self.slots.iter().map(Option::is_some).collect()
    }
}

/// Every other agent (the interaction partner included), nearest first by
/// position at the last observed step; ties keep file order.
pub fn select_context_agents<T: Scalar>(
    s: &Scenario<T>,
    agent: AgentId,
    slots: usize,
) -> ContextSelection {
    let Some(me) = s.agent(agent) else {
        return ContextSelection { slots: vec![None; slots] };
    };
    let origin = s.last_observed(me).position();
    let mut others: Vec<(T, usize)> = s
        .agents
        .iter()
        .enumerate()
        .filter(|(_, a)| a.id != agent)
        .map(|(i, a)| (s.last_observed(a).position().dist(origin), i))
        .collect();
    others.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut out: Vec<Option<usize>> = others.into_iter().take(slots).map(|(_, i)| Some(i)).collect();
    out.resize(slots, None);
    ContextSelection { slots: out }
}
