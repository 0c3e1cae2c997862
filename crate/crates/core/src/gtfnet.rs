//! History encoding and the synchronized two-agent rollout.

use rand::Rng;

use crate::numerics::{Dense, GruCell, NdArray, NumericsError, ParameterStore, Tape, Var};
use crate::scalar::Scalar;
use crate::scene::Point;

/// Per-step encoder input: position, heading and speed.
pub const HISTORY_INPUT_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtfConfig {
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub coord_scale: f64,
}

impl Default for GtfConfig {
    fn default() -> Self {
        Self {
            enc_hidden: 128,
            dec_hidden: 128,
            coord_scale: 0.1,
        }
    }
}

impl GtfConfig {
    /// Width of `u_X`.
    pub fn summary_dim(&self) -> usize {
        2 * self.enc_hidden
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutMode {
    TeacherForced,
    FreeRunning,
}

/// Encoder (`enc.*`), decoder (`dec.*`) and trajectory head (`traj.*`).
#[derive(Debug, Clone, PartialEq)]
pub struct GtfNet {
    pub cfg: GtfConfig,
    /// `[layer][direction]`, direction 0 forward.
    enc: [[GruCell; 2]; 2],
    dec_init: [Dense; 2],
    dec_point: Dense,
    dec_ctx: Dense,
    dec: [GruCell; 2],
    traj: Dense,
}

/// Affine map between agent frames in meters: `p ↦ M·p + c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameMap<T> {
    pub m: [T; 4],
    pub c: Point<T>,
}

impl<T: Scalar> FrameMap<T> {
    pub fn apply(&self, p: Point<T>) -> Point<T> {
        Point::new(
            self.m[0] * p.x + self.m[1] * p.y + self.c.x,
            self.m[2] * p.x + self.m[3] * p.y + self.c.y,
        )
    }
}

/// Inputs shared by every mode of one rollout.
#[derive(Debug, Clone)]
pub struct RolloutSetup<T> {
    /// Modes per agent; rows `0..modes` are A, `modes..2·modes` are B.
    pub modes: usize,
    /// Goals in meters, own frame, per mode.
    pub goals_a: Vec<Point<T>>,
    pub goals_b: Vec<Point<T>>,
    /// `[1, 2·d_H]` structural features.
    pub s_a: Var,
    pub s_b: Var,
    /// `[1, u_dim]` history summaries.
    pub u_a: Var,
    pub u_b: Var,
    /// B frame → A frame and A frame → B frame.
    pub b_to_a: FrameMap<T>,
    pub a_to_b: FrameMap<T>,
    /// Partner's last observed position, in A's and B's frame respectively.
    pub init_for_a: Point<T>,
    pub init_for_b: Point<T>,
}

/// Recurrent state of a rollout in progress.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub rows: usize,
    ctx_gates: Var,
    hidden: [Var; 2],
}

/// Per-step record of a rollout, in network units (scaled, own frame).
#[derive(Debug, Clone)]
pub struct RolloutTrace {
    /// Cross-fed partner points consumed at each step, `[2·modes, 2]`.
    pub inputs: Vec<Var>,
    /// Emitted points at each step, `[2·modes, 2]`.
    pub outputs: Vec<Var>,
}

impl GtfNet {
    pub fn register<T: Scalar>(
        store: &mut ParameterStore<T>,
        cfg: GtfConfig,
        structural_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let he = cfg.enc_hidden;
        let hd = cfg.dec_hidden;
        let mut enc_cell = |layer: usize, dir: &str, input: usize| {
            GruCell::register(store, &format!("enc.l{layer}.{dir}"), input, he, rng)
        };
        let enc = [
            [enc_cell(0, "fwd", HISTORY_INPUT_DIM), enc_cell(0, "bwd", HISTORY_INPUT_DIM)],
            [enc_cell(1, "fwd", 2 * he), enc_cell(1, "bwd", 2 * he)],
        ];
        let u = cfg.summary_dim();
        let dec_init = [
            Dense::register(store, "dec.init.l0", hd, u, true, rng),
            Dense::register(store, "dec.init.l1", hd, u, true, rng),
        ];
        let ctx_dim = 2 + structural_dim + u;
        let dec_point = Dense::register(store, "dec.l0.point", 3 * hd, 2, false, rng);
        let dec_ctx = Dense::register(store, "dec.l0.ctx", 3 * hd, ctx_dim, true, rng);
        let l0 = GruCell::named("dec.l0", hd);
        store.add_weight(&l0.w_hh, 3 * hd, hd, rng);
        store.add_zeros(&l0.b_hh, 3 * hd);
        let l1 = GruCell::register(store, "dec.l1", hd, hd, rng);
        let traj = Dense::register(store, "traj.out", 2, hd, true, rng);
        Self {
            cfg,
            enc,
            dec_init,
            dec_point,
            dec_ctx,
            dec: [l0, l1],
            traj,
        }
    }

    fn history_rows<T: Scalar>(&self, histories: &[&[[T; 4]]], t: usize) -> NdArray<T> {
        let s = T::lit(self.cfg.coord_scale);
        let data = histories
            .iter()
            .flat_map(|h| {
                let [x, y, heading, speed] = h[t];
                [x * s, y * s, heading, speed * s]
            })
            .collect();
        NdArray::matrix(histories.len(), HISTORY_INPUT_DIM, data).expect("history rows")
    }

    /// Two-layer bidirectional encoding of equal-length histories
    /// (`[x, y, heading, speed]` in each agent's own frame). Returns
    /// `[rows, 2·enc_hidden]`: final forward and backward states of the top
    /// layer.
    pub fn encode_histories<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        histories: &[&[[T; 4]]],
    ) -> Result<Var, NumericsError> {
        let n = histories.first().map_or(0, |h| h.len());
        if n == 0 || histories.iter().any(|h| h.len() != n) {
            return Err(NumericsError::Contract(
                "history encoding needs equal, non-empty histories".into(),
            ));
        }
        let rows = histories.len();
        let he = self.cfg.enc_hidden;
        let mut inputs = Vec::with_capacity(n);
        for t in 0..n {
            inputs.push(tape.constant(self.history_rows(histories, t))?);
        }
        let zero = tape.constant(NdArray::zeros(&[rows, he]))?;
        let mut last = (zero, zero);
        for layer in &self.enc {
            let mut fwd = Vec::with_capacity(n);
            let mut h = zero;
            for &x in &inputs {
                h = layer[0].step(tape, store, x, h)?;
                fwd.push(h);
            }
            let mut bwd = vec![zero; n];
            let mut h = zero;
            for t in (0..n).rev() {
                h = layer[1].step(tape, store, inputs[t], h)?;
                bwd[t] = h;
            }
            last = (fwd[n - 1], bwd[0]);
            inputs = fwd
                .iter()
                .zip(&bwd)
                .map(|(&f, &b)| tape.concat_cols(&[f, b]))
                .collect::<Result<_, _>>()?;
        }
        tape.concat_cols(&[last.0, last.1])
    }

    /// Single-history convenience returning `[1, 2·enc_hidden]`.
    pub fn encode_history<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        history: &[[T; 4]],
    ) -> Result<Var, NumericsError> {
        self.encode_histories(tape, store, &[history])
    }

    fn scaled_rows<T: Scalar>(&self, pts: &[Point<T>]) -> NdArray<T> {
        let s = T::lit(self.cfg.coord_scale);
        let data = pts.iter().flat_map(|p| [p.x * s, p.y * s]).collect();
        NdArray::matrix(pts.len(), 2, data).expect("point rows")
    }

    /// Builds the per-row context and the initial decoder state.
    pub fn start<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        setup: &RolloutSetup<T>,
    ) -> Result<DecoderState, NumericsError> {
        let m = setup.modes;
        if setup.goals_a.len() != m || setup.goals_b.len() != m {
            return Err(NumericsError::Dimension(format!(
                "rollout: {m} modes but {} / {} goals",
                setup.goals_a.len(),
                setup.goals_b.len()
            )));
        }
        let rep = vec![0usize; m];
        let mut halves = Vec::with_capacity(2);
        let mut us = Vec::with_capacity(2);
        for (goals, s, u) in [(&setup.goals_a, setup.s_a, setup.u_a), (&setup.goals_b, setup.s_b, setup.u_b)] {
            let g = tape.constant(self.scaled_rows(goals))?;
            let s = tape.gather_rows(s, &rep)?;
            let u = tape.gather_rows(u, &rep)?;
            halves.push(tape.concat_cols(&[g, s, u])?);
            us.push(u);
        }
        let ctx = tape.concat_rows(&halves)?;
        let u = tape.concat_rows(&us)?;
        let ctx_gates = self.dec_ctx.forward(tape, store, ctx)?;
        let h0 = self.dec_init[0].forward(tape, store, u)?;
        let h1 = self.dec_init[1].forward(tape, store, u)?;
        Ok(DecoderState {
            rows: 2 * m,
            ctx_gates,
            hidden: [h0, h1],
        })
    }

    /// Advances every row one step given the cross-fed partner points
    /// `[rows, 2]` (scaled, own frame); returns the emitted points.
    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        state: &mut DecoderState,
        cross: Var,
    ) -> Result<Var, NumericsError> {
        let p = self.dec_point.forward(tape, store, cross)?;
        let gx = tape.add(state.ctx_gates, p)?;
        let h0 = self.dec[0].step_from_gates(tape, store, gx, state.hidden[0])?;
        let h1 = self.dec[1].step(tape, store, h0, state.hidden[1])?;
        state.hidden = [h0, h1];
        self.traj.forward(tape, store, h1)
    }

    /// Swaps the A and B halves of `emitted` and maps each into the other
    /// agent's frame: the inputs of the next step in free-running mode.
    pub fn cross_feed<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        emitted: Var,
        setup: &RolloutSetup<T>,
    ) -> Result<Var, NumericsError> {
        let m = setup.modes;
        let s = T::lit(self.cfg.coord_scale);
        let mut map = |rows: std::ops::Range<usize>, f: &FrameMap<T>| -> Result<Var, NumericsError> {
            let part = tape.slice_rows(emitted, rows)?;
            let mt = tape.constant(NdArray::matrix(2, 2, vec![f.m[0], f.m[2], f.m[1], f.m[3]])?)?;
            let rotated = tape.matmul(part, mt)?;
            let c = tape.constant(NdArray::row(vec![f.c.x * s, f.c.y * s]))?;
            tape.add_row(rotated, c)
        };
        let b_in_a = map(m..2 * m, &setup.b_to_a)?;
        let a_in_b = map(0..m, &setup.a_to_b)?;
        tape.concat_rows(&[b_in_a, a_in_b])
    }

    /// Initial cross-fed inputs: each agent sees the partner's last
    /// observed position.
    pub fn initial_cross<T: Scalar>(&self, tape: &mut Tape<T>, setup: &RolloutSetup<T>) -> Result<Var, NumericsError> {
        let m = setup.modes;
        let pts: Vec<Point<T>> = std::iter::repeat(setup.init_for_a)
            .take(m)
            .chain(std::iter::repeat(setup.init_for_b).take(m))
            .collect();
        tape.constant(self.scaled_rows(&pts))
    }

    /// Lockstep rollout over `horizon` steps. `feed(tape, δ, previous)`
    /// supplies the cross-fed inputs of step `δ ≥ 1` from the outputs of
    /// step `δ − 1`.
    pub fn rollout_with<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        setup: &RolloutSetup<T>,
        horizon: usize,
        mut feed: impl FnMut(&mut Tape<T>, usize, Var) -> Result<Var, NumericsError>,
    ) -> Result<RolloutTrace, NumericsError> {
        if horizon == 0 {
            return Err(NumericsError::Contract("rollout horizon must be positive".into()));
        }
        let mut state = self.start(tape, store, setup)?;
        let mut trace = RolloutTrace {
            inputs: Vec::with_capacity(horizon),
            outputs: Vec::with_capacity(horizon),
        };
        let mut cross = self.initial_cross(tape, setup)?;
        for delta in 0..horizon {
            if delta > 0 {
                cross = feed(tape, delta, *trace.outputs.last().unwrap())?;
            }
            let out = self.step(tape, store, &mut state, cross)?;
            trace.inputs.push(cross);
            trace.outputs.push(out);
        }
        Ok(trace)
    }

    /// Teacher forcing feeds the partner's ground truth of the previous
    /// step (`gt_for_a[δ]` is B's true point in A's frame, meters);
    /// free running feeds the partner's previous prediction.
    pub fn rollout_joint<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        setup: &RolloutSetup<T>,
        horizon: usize,
        mode: RolloutMode,
        partner_truth: Option<(&[Point<T>], &[Point<T>])>,
    ) -> Result<RolloutTrace, NumericsError> {
        match mode {
            RolloutMode::FreeRunning => {
                self.rollout_with(tape, store, setup, horizon, |t, _, prev| self.cross_feed(t, prev, setup))
            }
            RolloutMode::TeacherForced => {
                let (for_a, for_b) = partner_truth.ok_or_else(|| {
                    NumericsError::Contract("teacher forcing needs the partner ground truth".into())
                })?;
                if for_a.len() + 1 < horizon || for_b.len() + 1 < horizon {
                    return Err(NumericsError::Contract("partner ground truth shorter than horizon".into()));
                }
                let m = setup.modes;
                self.rollout_with(tape, store, setup, horizon, |t, delta, _| {
                    let pts: Vec<Point<T>> = std::iter::repeat(for_a[delta - 1])
                        .take(m)
                        .chain(std::iter::repeat(for_b[delta - 1]).take(m))
                        .collect();
                    t.constant(self.scaled_rows(&pts))
                })
            }
        }
    }

    /// Stacks the trace into `[rows, 2·T]` meters, each row
    /// `x₁, y₁, x₂, y₂, …` in its own frame.
    pub fn trajectories<T: Scalar>(&self, tape: &mut Tape<T>, trace: &RolloutTrace) -> Result<Var, NumericsError> {
        let stacked = tape.concat_cols(&trace.outputs)?;
        tape.scale(stacked, T::one() / T::lit(self.cfg.coord_scale))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (GtfNet, ParameterStore<f64>) {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = GtfConfig {
            enc_hidden: 6,
            dec_hidden: 8,
            coord_scale: 0.1,
        };
        (GtfNet::register(&mut store, cfg, 10, &mut rng), store)
    }

    fn setup(tape: &mut Tape<f64>, modes: usize) -> RolloutSetup<f64> {
        let s = tape.constant(NdArray::row(vec![0.1; 10])).unwrap();
        let u = tape.constant(NdArray::row(vec![-0.2; 12])).unwrap();
        let a = crate::scene::Pose::new(0.0, 0.0, 0.0);
        let b = crate::scene::Pose::new(10.0, -5.0, 1.2);
        let (m1, c1) = a.relative_transform(&b);
        let (m2, c2) = b.relative_transform(&a);
        RolloutSetup {
            modes,
            goals_a: (0..modes).map(|i| Point::new(20.0 + i as f64, 0.0)).collect(),
            goals_b: (0..modes).map(|i| Point::new(15.0, i as f64)).collect(),
            s_a: s,
            s_b: s,
            u_a: u,
            u_b: u,
            b_to_a: FrameMap { m: m1, c: c1 },
            a_to_b: FrameMap { m: m2, c: c2 },
            init_for_a: b.translation(),
            init_for_b: b.to_local(a.translation()),
        }
    }

    #[test]
    fn output_lengths_match_horizon() {
        let (net, store) = small();
        let mut tape = Tape::new();
        let st = setup(&mut tape, 3);
        let trace = net
            .rollout_joint(&mut tape, &store, &st, 7, RolloutMode::FreeRunning, None)
            .unwrap();
        let traj = net.trajectories(&mut tape, &trace).unwrap();
        assert_eq!(tape.shape(traj), (6, 14));
    }

    #[test]
    fn zero_horizon_is_rejected() {
        let (net, store) = small();
        let mut tape = Tape::new();
        let st = setup(&mut tape, 1);
        assert!(net.rollout_joint(&mut tape, &store, &st, 0, RolloutMode::FreeRunning, None).is_err());
    }

    #[test]
    fn constant_history_is_direction_symmetric() {
        let (net, store) = small();
        let h = vec![[1.0, 2.0, 0.3, 4.0]; 5];
        let mut rev = h.clone();
        rev.reverse();
        let mut tape = Tape::new();
        let a = net.encode_history(&mut tape, &store, &h).unwrap();
        let b = net.encode_history(&mut tape, &store, &rev).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
        let one = net.encode_history(&mut tape, &store, &h[..1]).unwrap();
        assert_eq!(tape.shape(one), (1, 12));
        assert!(net.encode_history(&mut tape, &store, &[]).is_err());
    }

    #[test]
    fn cross_feed_matches_frame_maps() {
        let (net, _) = small();
        let mut tape = Tape::new();
        let st = setup(&mut tape, 1);
        let emitted = tape
            .constant(NdArray::matrix(2, 2, vec![0.3, -0.1, 0.7, 0.2]).unwrap())
            .unwrap();
        let fed = net.cross_feed(&mut tape, emitted, &st).unwrap();
        let v = tape.value(fed);
        let want_a = st.b_to_a.apply(Point::new(7.0, 2.0));
        let want_b = st.a_to_b.apply(Point::new(3.0, -1.0));
        assert!((v.at(0, 0) * 10.0 - want_a.x).abs() < 1e-9 && (v.at(0, 1) * 10.0 - want_a.y).abs() < 1e-9);
        assert!((v.at(1, 0) * 10.0 - want_b.x).abs() < 1e-9 && (v.at(1, 1) * 10.0 - want_b.y).abs() < 1e-9);
    }
}
