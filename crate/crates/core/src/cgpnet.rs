//! Marginal and conditional goal prediction, offsets, joint goal pairs and
//! pair suppression.

use rand::Rng;

use crate::numerics::{Dense, Mlp, NdArray, NumericsError, ParameterStore, Tape, Var};
use crate::scalar::Scalar;
use crate::scene::{Point, Role};

/// Three-layer head over `[s_goal, g, q, flag]`. The first layer is stored
/// as a goal part (with bias) and a query part, so the goal part can be
/// shared by every query.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalHead {
    goal_in: Dense,
    query_in: Dense,
    rest: Mlp,
}

/// First-layer goal pre-activations of one candidate set.
#[derive(Debug, Clone, Copy)]
pub struct HeadBase(Var);

impl GoalHead {
    pub fn register<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        feature_dim: usize,
        hidden: usize,
        out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let goal_in = Dense::register(store, &format!("{name}.in_goal"), hidden, feature_dim + 2, true, rng);
        let query_in = Dense::register(store, &format!("{name}.in_query"), hidden, 3, false, rng);
        let rest = Mlp::register(store, &format!("{name}.mlp"), &[hidden, hidden, out], rng);
        Self { goal_in, query_in, rest }
    }

    /// `feats`: `[n, d]` structural features; `goals`: `[n, 2]` scaled
    /// candidate coordinates.
    pub fn base<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        feats: Var,
        goals: Var,
    ) -> Result<HeadBase, NumericsError> {
        let x = tape.concat_cols(&[feats, goals])?;
        Ok(HeadBase(self.goal_in.forward(tape, store, x)?))
    }

    /// Head output `[n, out]`. `query` is the scaled query point in this
    /// agent's frame; `None` is the marginal mode (zero query, flag 0).
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        base: HeadBase,
        query: Option<Point<T>>,
    ) -> Result<Var, NumericsError> {
        let pre = match query {
            None => base.0,
            Some(q) => {
                let qrow = tape.constant(NdArray::row(vec![q.x, q.y, T::one()]))?;
                let term = self.query_in.forward(tape, store, qrow)?;
                tape.add_row(base.0, term)?
            }
        };
        let h = tape.relu(pre)?;
        self.rest.forward(tape, store, h)
    }
}

/// Score and offset heads for both roles (`seg_a`, `reg_a`, `seg_b`, `reg_b`).
#[derive(Debug, Clone, PartialEq)]
pub struct CgpNet {
    pub seg_a: GoalHead,
    pub reg_a: GoalHead,
    pub seg_b: GoalHead,
    pub reg_b: GoalHead,
}

impl CgpNet {
    pub fn register<T: Scalar>(
        store: &mut ParameterStore<T>,
        feature_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            seg_a: GoalHead::register(store, "seg_a", feature_dim, hidden, 1, rng),
            reg_a: GoalHead::register(store, "reg_a", feature_dim, hidden, 2, rng),
            seg_b: GoalHead::register(store, "seg_b", feature_dim, hidden, 1, rng),
            reg_b: GoalHead::register(store, "reg_b", feature_dim, hidden, 2, rng),
        }
    }

    pub fn seg(&self, role: Role) -> &GoalHead {
        match role {
            Role::A => &self.seg_a,
            Role::B => &self.seg_b,
        }
    }

    pub fn reg(&self, role: Role) -> &GoalHead {
        match role {
            Role::A => &self.reg_a,
            Role::B => &self.reg_b,
        }
    }
}

/// Logits `[n, 1]` of the usable candidates.
pub fn goal_scores<T: Scalar>(
    head: &GoalHead,
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    base: HeadBase,
    query: Option<Point<T>>,
) -> Result<Var, NumericsError> {
    head.forward(tape, store, base, query)
}

/// Softmax of `[n, 1]` logits as a `[1, n]` row.
pub fn softmax_probs<T: Scalar>(tape: &mut Tape<T>, logits: Var) -> Result<Var, NumericsError> {
    let row = tape.transpose(logits)?;
    tape.masked_softmax_rows(row, None, None)
}

/// Offset means `[n, 2]` in meters.
pub fn goal_offsets<T: Scalar>(
    head: &GoalHead,
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    base: HeadBase,
    query: Option<Point<T>>,
) -> Result<Var, NumericsError> {
    head.forward(tape, store, base, query)
}

/// Probabilities and offsets over all `K` candidate slots.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalDistribution<T> {
    pub probs: Vec<T>,
    pub mask: Vec<bool>,
    pub offsets: Vec<Point<T>>,
    pub query: Option<Point<T>>,
}

impl<T: Scalar> GoalDistribution<T> {
    /// Scatters per-usable-candidate values into `k_total` slots.
    pub fn from_usable(
        k_total: usize,
        candidates: &[usize],
        probs: &[T],
        offsets: Option<&[T]>,
        query: Option<Point<T>>,
    ) -> Self {
        let mut d = Self {
            probs: vec![T::zero(); k_total],
            mask: vec![false; k_total],
            offsets: vec![Point::default(); k_total],
            query,
        };
        for (r, &k) in candidates.iter().enumerate() {
            d.probs[k] = probs[r];
            d.mask[k] = true;
            if let Some(o) = offsets {
                d.offsets[k] = Point::new(o[2 * r], o[2 * r + 1]);
            }
        }
        d
    }
}

/// Indices of the `k` largest probabilities among unmasked entries, highest
/// first; ties go to the lower index. Returns fewer when fewer are unmasked.
pub fn select_top_goals<T: Scalar>(probs: &[T], mask: &[bool], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).filter(|&i| mask[i]).collect();
    idx.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Joint mode index, 0-based: `κ = 𝒦·q + k`.
pub fn kappa(top_k: usize, q: usize, k: usize) -> usize {
    top_k * q + k
}

/// Inverse of [`kappa`].
pub fn kappa_split(top_k: usize, kappa: usize) -> (usize, usize) {
    (kappa / top_k, kappa % top_k)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoalPair<T> {
    pub q: usize,
    pub k: usize,
    pub kappa: usize,
    pub cand_a: usize,
    pub cand_b: usize,
    /// Refined goal of A in A's frame.
    pub goal_a: Point<T>,
    /// Refined goal of B in B's frame.
    pub goal_b: Point<T>,
    pub score: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoalPairSet<T> {
    pub top_k: usize,
    pub pairs: Vec<GoalPair<T>>,
}

/// `score(q, k) = π_A(topA[q]) · π_B(k | q)` over B's top candidates under
/// each conditional; refined goals are candidate plus predicted offset.
pub fn joint_distribution<T: Scalar>(
    marginal_a: &GoalDistribution<T>,
    conditionals_b: &[GoalDistribution<T>],
    top_a: &[usize],
    positions_a: &[Point<T>],
    positions_b: &[Point<T>],
    top_k: usize,
) -> GoalPairSet<T> {
    let mut pairs = Vec::with_capacity(top_a.len() * top_k);
    for (q, (&ca, cond)) in top_a.iter().zip(conditionals_b).enumerate() {
        let top_b = select_top_goals(&cond.probs, &cond.mask, top_k);
        for (k, &cb) in top_b.iter().enumerate() {
            pairs.push(GoalPair {
                q,
                k,
                kappa: kappa(top_k, q, k),
                cand_a: ca,
                cand_b: cb,
                goal_a: positions_a[ca].add(marginal_a.offsets[ca]),
                goal_b: positions_b[cb].add(cond.offsets[cb]),
                score: marginal_a.probs[ca] * cond.probs[cb],
            });
        }
    }
    GoalPairSet { top_k, pairs }
}

/// Orders pairs by score descending, ties by lower κ.
pub fn rank_pairs<T: Scalar>(pairs: &mut [GoalPair<T>]) {
    pairs.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then(a.kappa.cmp(&b.kappa)));
}

/// Greedy suppression on endpoint pairs. A pair is dropped when both its
/// goals lie within `radius` of the respective goals of a kept pair (goals
/// compared in world coordinates via `to_world`). Short results are
/// backfilled from the suppressed pairs by score.
pub fn nms_filter<T: Scalar>(
    pairs: &[GoalPair<T>],
    keep: usize,
    radius: T,
    to_world: impl Fn(&GoalPair<T>) -> (Point<T>, Point<T>),
) -> Vec<GoalPair<T>> {
    let mut ranked = pairs.to_vec();
    rank_pairs(&mut ranked);
    let mut kept: Vec<(GoalPair<T>, (Point<T>, Point<T>))> = Vec::new();
    let mut suppressed = Vec::new();
    for p in ranked {
        if kept.len() >= keep {
            break;
        }
        let w = to_world(&p);
        let dup = kept
            .iter()
            .any(|(_, kw)| w.0.dist(kw.0) <= radius && w.1.dist(kw.1) <= radius);
        if dup {
            suppressed.push(p);
        } else {
            kept.push((p, w));
        }
    }
    let mut out: Vec<GoalPair<T>> = kept.into_iter().map(|(p, _)| p).collect();
    for p in suppressed {
        if out.len() >= keep {
            break;
        }
        out.push(p);
    }
    out
}
