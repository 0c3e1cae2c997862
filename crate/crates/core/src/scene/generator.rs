use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::geometry::{normalize_angle, Point};
use super::polyline::Polyline;
use super::types::{Lane, LaneId, Roles, Scenario, ScenarioKind, State, Track, STEP_SECONDS};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorConfig {
    pub history: usize,
    pub horizon: usize,
    /// Upper bound on surrounding vehicles (drawn uniformly in `0..=max`).
    pub max_context: usize,
    pub box_length: f64,
    pub box_width: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            history: 20,
            horizon: 30,
            max_context: 3,
            box_length: 4.7,
            box_width: 2.1,
        }
    }
}

const MAX_SPEED: f64 = 20.0;
const MIN_SPEED: f64 = 0.1;
const CLEARANCE: f64 = 6.0;
const MAX_DRAWS: usize = 64;

/// Deterministic synthetic scenario with default horizons.
pub fn generate_synthetic_scenario(kind: ScenarioKind, seed: u64) -> Scenario<f64> {
    generate_scenario_with(kind, seed, &GeneratorConfig::default())
}

/// Speed profile around the last observed step: `v0 + a_hist·τ` before it,
/// `v0 + a_fut·τ` after, clamped below by `floor`.
#[derive(Debug, Clone, Copy)]
struct Motion {
    route: usize,
    s_obs: f64,
    v0: f64,
    a_hist: f64,
    a_fut: f64,
    floor: f64,
    lateral: f64,
}

struct Layout {
    lanes: Vec<Lane<f64>>,
    routes: Vec<Vec<LaneId>>,
}

fn straight(id: LaneId, a: (f64, f64), b: (f64, f64), succ: &[LaneId]) -> Lane<f64> {
    Lane {
        id,
        centerline: vec![Point::new(a.0, a.1), Point::new(b.0, b.1)],
        successors: succ.to_vec(),
    }
}

fn smoothstep(u: f64) -> f64 {
    u * u * (3.0 - 2.0 * u)
}

/// Lane blending laterally from `y0` to `y1` over `[x0, x1]`.
fn s_curve(id: LaneId, x0: f64, x1: f64, y0: f64, y1: f64, succ: &[LaneId]) -> Lane<f64> {
    let n = ((x1 - x0) / 0.5).ceil() as usize;
    let centerline = (0..=n)
        .map(|i| {
            let u = i as f64 / n as f64;
            Point::new(x0 + (x1 - x0) * u, y0 + (y1 - y0) * smoothstep(u))
        })
        .collect();
    Lane {
        id,
        centerline,
        successors: succ.to_vec(),
    }
}

fn arc(id: LaneId, c: (f64, f64), r: f64, th0: f64, th1: f64, succ: &[LaneId]) -> Lane<f64> {
    let n = ((r * (th1 - th0).abs()) / 0.5).ceil() as usize;
    let centerline = (0..=n)
        .map(|i| {
            let th = th0 + (th1 - th0) * i as f64 / n as f64;
            Point::new(c.0 + r * th.cos(), c.1 + r * th.sin())
        })
        .collect();
    Lane {
        id,
        centerline,
        successors: succ.to_vec(),
    }
}

fn layout(kind: ScenarioKind) -> Layout {
    match kind {
        ScenarioKind::CutIn => Layout {
            lanes: vec![
                straight(10, (-80.0, 0.0), (0.0, 0.0), &[11]),
                straight(11, (0.0, 0.0), (20.0, 0.0), &[12]),
                straight(12, (20.0, 0.0), (120.0, 0.0), &[]),
                straight(20, (-80.0, 3.5), (0.0, 3.5), &[21, 22]),
                s_curve(21, 0.0, 20.0, 3.5, 0.0, &[12]),
                straight(22, (0.0, 3.5), (120.0, 3.5), &[]),
            ],
            routes: vec![vec![10, 11, 12], vec![20, 21, 12], vec![20, 22]],
        },
        ScenarioKind::Yielding => Layout {
            lanes: vec![
                straight(30, (-80.0, 0.0), (-6.0, 0.0), &[31]),
                straight(31, (-6.0, 0.0), (6.0, 0.0), &[32]),
                straight(32, (6.0, 0.0), (120.0, 0.0), &[]),
                straight(40, (0.0, -80.0), (0.0, -6.0), &[41]),
                straight(41, (0.0, -6.0), (0.0, 6.0), &[42]),
                straight(42, (0.0, 6.0), (0.0, 120.0), &[]),
            ],
            routes: vec![vec![30, 31, 32], vec![40, 41, 42]],
        },
        ScenarioKind::Merging => Layout {
            lanes: vec![
                straight(50, (-100.0, 0.0), (0.0, 0.0), &[51]),
                straight(51, (0.0, 0.0), (120.0, 0.0), &[]),
                straight(60, (-100.0, -10.0), (-40.0, -10.0), &[61]),
                s_curve(61, -40.0, 0.0, -10.0, 0.0, &[51]),
            ],
            routes: vec![vec![50, 51], vec![60, 61, 51]],
        },
        ScenarioKind::LeftTurn => Layout {
            lanes: vec![
                straight(70, (-1.75, 80.0), (-1.75, 8.0), &[71]),
                straight(71, (-1.75, 8.0), (-1.75, -8.0), &[72]),
                straight(72, (-1.75, -8.0), (-1.75, -120.0), &[]),
                straight(80, (1.75, -80.0), (1.75, -8.0), &[81, 82]),
                arc(81, (-8.0, -8.0), 9.75, 0.0, FRAC_PI_2, &[83]),
                straight(82, (1.75, -8.0), (1.75, 8.0), &[84]),
                straight(83, (-8.0, 1.75), (-120.0, 1.75), &[]),
                straight(84, (1.75, 8.0), (1.75, 120.0), &[]),
            ],
            routes: vec![vec![70, 71, 72], vec![80, 81, 83], vec![80, 82, 84]],
        },
    }
}

fn route_polyline(lanes: &[Lane<f64>], ids: &[LaneId]) -> Polyline<f64> {
    let pts = ids.iter().flat_map(|id| {
        lanes
            .iter()
            .find(|l| l.id == *id)
            .expect("route lane")
            .centerline
            .iter()
            .copied()
    });
    Polyline::new(pts).expect("route polyline")
}

fn u(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

/// Interacting pair motions for a kind; A first.
fn pair_motions(kind: ScenarioKind, routes: &[Polyline<f64>], rng: &mut ChaCha8Rng) -> [Motion; 2] {
    let at = |r: usize, p: (f64, f64)| routes[r].project(Point::new(p.0, p.1)).arc;
    let lat_a = u(rng, -0.2, 0.2);
    let lat_b = u(rng, -0.2, 0.2);
    match kind {
        ScenarioKind::CutIn => {
            let xa = u(rng, -26.0, -18.0);
            let xb = u(rng, -10.0, -4.0);
            [
                Motion {
                    route: 0,
                    s_obs: at(0, (xa, 0.0)),
                    v0: u(rng, 4.0, 6.0),
                    a_hist: u(rng, -0.3, 0.3),
                    a_fut: u(rng, -0.4, 0.4),
                    floor: 1.0,
                    lateral: lat_a,
                },
                Motion {
                    route: 1,
                    s_obs: at(1, (xb, 3.5)),
                    v0: u(rng, 5.0, 7.0),
                    a_hist: u(rng, -0.3, 0.3),
                    a_fut: u(rng, -0.2, 0.3),
                    floor: 1.0,
                    lateral: lat_b,
                },
            ]
        }
        ScenarioKind::Yielding => {
            let xa = u(rng, -14.0, -8.0);
            let yb = u(rng, -22.0, -16.0);
            let vb = u(rng, 4.0, 6.0);
            let v_end = u(rng, 0.1, 0.5);
            [
                Motion {
                    route: 0,
                    s_obs: at(0, (xa, 0.0)),
                    v0: u(rng, 5.0, 7.0),
                    a_hist: u(rng, -0.2, 0.2),
                    a_fut: u(rng, 0.0, 0.4),
                    floor: 1.0,
                    lateral: lat_a,
                },
                Motion {
                    route: 1,
                    s_obs: at(1, (0.0, yb)),
                    v0: vb,
                    a_hist: u(rng, -0.2, 0.2),
                    a_fut: -(vb - v_end) / 2.5,
                    floor: v_end,
                    lateral: lat_b,
                },
            ]
        }
        ScenarioKind::Merging => {
            let xa = u(rng, -24.0, -16.0);
            let xb = u(rng, -32.0, -24.0);
            let yb = -10.0 * (1.0 - smoothstep((xb + 40.0) / 40.0));
            [
                Motion {
                    route: 0,
                    s_obs: at(0, (xa, 0.0)),
                    v0: u(rng, 5.0, 7.0),
                    a_hist: u(rng, -0.2, 0.2),
                    a_fut: u(rng, -0.2, 0.3),
                    floor: 1.0,
                    lateral: lat_a,
                },
                Motion {
                    route: 1,
                    s_obs: at(1, (xb, yb)),
                    v0: u(rng, 4.0, 6.0),
                    a_hist: u(rng, -0.2, 0.2),
                    a_fut: u(rng, -0.5, 0.2),
                    floor: 1.0,
                    lateral: lat_b,
                },
            ]
        }
        ScenarioKind::LeftTurn => {
            let ya = u(rng, 12.0, 18.0);
            let yb = u(rng, -18.0, -12.0);
            [
                Motion {
                    route: 0,
                    s_obs: at(0, (-1.75, ya)),
                    v0: u(rng, 5.0, 7.0),
                    a_hist: u(rng, -0.2, 0.2),
                    a_fut: u(rng, 0.0, 0.3),
                    floor: 1.0,
                    lateral: lat_a,
                },
                Motion {
                    route: 1,
                    s_obs: at(1, (1.75, yb)),
                    v0: u(rng, 3.5, 5.0),
                    a_hist: u(rng, -0.2, 0.2),
                    a_fut: u(rng, -0.6, -0.1),
                    floor: 0.5,
                    lateral: lat_b,
                },
            ]
        }
    }
}

/// Positions, headings and speeds on the shared time grid.
fn realize(m: &Motion, route: &Polyline<f64>, obs: usize, total: usize) -> Vec<State<f64>> {
    let speed = |i: usize| {
        let tau = (i as f64 - obs as f64) * STEP_SECONDS;
        let a = if tau < 0.0 { m.a_hist } else { m.a_fut };
        (m.v0 + a * tau).clamp(m.floor.max(MIN_SPEED), MAX_SPEED)
    };
    let mut arc = vec![0.0; total];
    arc[obs] = m.s_obs;
    for i in obs + 1..total {
        arc[i] = arc[i - 1] + 0.5 * (speed(i - 1) + speed(i)) * STEP_SECONDS;
    }
    for i in (0..obs).rev() {
        arc[i] = arc[i + 1] - 0.5 * (speed(i) + speed(i + 1)) * STEP_SECONDS;
    }
    (0..total)
        .map(|i| {
            let s = arc[i];
            let d = route.point_at(s + 0.5).sub(route.point_at(s - 0.5));
            let heading = d.y.atan2(d.x);
            let p = route
                .point_at(s)
                .add(Point::new(-heading.sin(), heading.cos()).scale(m.lateral));
            State {
                t: i as f64 * STEP_SECONDS,
                x: p.x,
                y: p.y,
                heading: normalize_angle(heading),
                speed: speed(i),
            }
        })
        .collect()
}

fn clear_history(a: &[State<f64>], b: &[State<f64>], obs: usize) -> bool {
    a[..=obs]
        .iter()
        .zip(&b[..=obs])
        .all(|(p, q)| p.position().dist(q.position()) >= CLEARANCE)
}

/// Deterministic per `(kind, seed)`: the random stream is keyed by both.
pub fn generate_scenario_with<T: Scalar>(
    kind: ScenarioKind,
    seed: u64,
    cfg: &GeneratorConfig,
) -> Scenario<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(kind as u64 + 1);
    let Layout { lanes, routes } = layout(kind);
    let polys: Vec<Polyline<f64>> = routes.iter().map(|r| route_polyline(&lanes, r)).collect();
    let obs = cfg.history - 1;
    let total = cfg.history + cfg.horizon;

    let mut tracks: Vec<Vec<State<f64>>> = Vec::new();
    for _ in 0..MAX_DRAWS {
        let [ma, mb] = pair_motions(kind, &polys, &mut rng);
        tracks = vec![
            realize(&ma, &polys[ma.route], obs, total),
            realize(&mb, &polys[mb.route], obs, total),
        ];
        if clear_history(&tracks[0], &tracks[1], obs) {
            break;
        }
    }

    let n_context = rng.gen_range(0..=cfg.max_context);
    for _ in 0..n_context {
        for _attempt in 0..20 {
            let route = rng.gen_range(0..polys.len());
            let len = polys[route].length();
            let m = Motion {
                route,
                s_obs: u(&mut rng, 20.0, len - 40.0),
                v0: u(&mut rng, 3.0, 8.0),
                a_hist: u(&mut rng, -0.3, 0.3),
                a_fut: u(&mut rng, -0.3, 0.3),
                floor: 1.0,
                lateral: u(&mut rng, -0.2, 0.2),
            };
            let states = realize(&m, &polys[route], obs, total);
            if tracks.iter().all(|t| clear_history(t, &states, obs)) {
                tracks.push(states);
                break;
            }
        }
    }

    let conv_state = |s: &State<f64>| State {
        t: T::lit(s.t),
        x: T::lit(s.x),
        y: T::lit(s.y),
        heading: T::lit(s.heading),
        speed: T::lit(s.speed),
    };
    let agents = tracks
        .iter()
        .enumerate()
        .map(|(i, states)| Track {
            id: i as u32 + 1,
            box_dims: [T::lit(cfg.box_length), T::lit(cfg.box_width)],
            states: states.iter().map(conv_state).collect(),
        })
        .collect();
    let lanes = lanes
        .iter()
        .map(|l| Lane {
            id: l.id,
            centerline: l
                .centerline
                .iter()
                .map(|p| Point::new(T::lit(p.x), T::lit(p.y)))
                .collect(),
            successors: l.successors.clone(),
        })
        .collect();
    Scenario {
        kind,
        seed,
        agents,
        lanes,
        roles: Roles { a: 1, b: 2 },
        t_obs: cfg.history,
        horizon: cfg.horizon,
    }
}
