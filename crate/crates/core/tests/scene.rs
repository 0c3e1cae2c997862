use cgtp_core::metrics::{intersection_area, OrientedBox};
use cgtp_core::scene::{
    enumerate_future_lanes, generate_synthetic_scenario, read_scenarios, sample_goal_candidates, select_context_agents,
    write_scenarios, GoalSamplingConfig, Lane, LanePath, LaneSearchConfig, Point, Polyline, Pose, Roles, Role,
    Scenario, ScenarioKind, State, Track,
};

fn pt(x: f64, y: f64) -> Point<f64> {
    Point::new(x, y)
}

fn parked(id: u32, x: f64, y: f64) -> Track<f64> {
    Track {
        id,
        box_dims: [4.5, 2.0],
        states: (0..5)
            .map(|i| State {
                t: i as f64 * 0.1,
                x,
                y,
                heading: 0.0,
                speed: 0.0,
            })
            .collect(),
    }
}

fn scene(agents: Vec<Track<f64>>, lanes: Vec<Lane<f64>>) -> Scenario<f64> {
    Scenario {
        kind: ScenarioKind::CutIn,
        seed: 0,
        agents,
        lanes,
        roles: Roles { a: 0, b: 1 },
        t_obs: 3,
        horizon: 2,
    }
}

fn lane(id: u32, from: (f64, f64), to: (f64, f64), successors: &[u32]) -> Lane<f64> {
    Lane {
        id,
        centerline: vec![pt(from.0, from.1), pt(to.0, to.1)],
        successors: successors.to_vec(),
    }
}

#[test]
fn lone_agent_has_every_slot_masked() {
    let s = scene(vec![parked(0, 0.0, 0.0)], Vec::new());
    let sel = select_context_agents(&s, 0, 14);
    assert_eq!(sel.slots.len(), 14);
    assert!(sel.mask().iter().all(|m| !m));
}

#[test]
fn twenty_neighbours_keep_the_fourteen_nearest() {
    let mut agents = vec![parked(0, 0.0, 0.0)];
    // scattered, file order unrelated to distance
    for i in 0..20u32 {
        let r = 3.0 + ((i * 7) % 20) as f64 * 1.5;
        let a = i as f64 * 0.9;
        agents.push(parked(i + 1, r * a.cos(), r * a.sin()));
    }
    let s = scene(agents, Vec::new());
    let sel = select_context_agents(&s, 0, 14);

    let mut oracle: Vec<(f64, usize)> = (1..s.agents.len())
        .map(|i| {
            let st = s.agents[i].states[2];
            ((st.x * st.x + st.y * st.y).sqrt(), i)
        })
        .collect();
    oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let want: Vec<Option<usize>> = oracle.iter().take(14).map(|&(_, i)| Some(i)).collect();
    assert_eq!(sel.slots, want);
}

#[test]
fn three_neighbours_in_distance_order() {
    let s = scene(
        vec![parked(0, 0.0, 0.0), parked(1, 2.0, 0.0), parked(2, 0.0, 1.0), parked(3, -3.0, 0.0)],
        Vec::new(),
    );
    let sel = select_context_agents(&s, 0, 14);
    assert_eq!(&sel.slots[..4], &[Some(2), Some(1), Some(3), None]);
}

fn lane_ids(s: &Scenario<f64>, max_paths: usize) -> Vec<Vec<u32>> {
    let cfg = LaneSearchConfig {
        max_paths,
        ..LaneSearchConfig::default()
    };
    enumerate_future_lanes(s, 0, &cfg)
        .unwrap()
        .into_iter()
        .map(|p| p.lane_ids)
        .collect()
}

fn binary_tree() -> Vec<Lane<f64>> {
    vec![
        lane(0, (-5.0, 0.0), (10.0, 0.0), &[1, 2]),
        lane(1, (10.0, 0.0), (20.0, 5.0), &[3, 4]),
        lane(2, (10.0, 0.0), (20.0, -5.0), &[5, 6]),
        lane(3, (20.0, 5.0), (30.0, 10.0), &[]),
        lane(4, (20.0, 5.0), (30.0, 5.0), &[]),
        lane(5, (20.0, -5.0), (30.0, -5.0), &[]),
        lane(6, (20.0, -5.0), (30.0, -10.0), &[]),
    ]
}

#[test]
fn binary_branching_gives_four_paths_or_the_cap() {
    let s = scene(vec![parked(0, 1.0, 0.0), parked(1, 1.0, 40.0)], binary_tree());
    let all = lane_ids(&s, 6);
    assert_eq!(all, vec![vec![0, 1, 3], vec![0, 1, 4], vec![0, 2, 5], vec![0, 2, 6]]);
    assert_eq!(lane_ids(&s, 3), all[..3].to_vec());
}

#[test]
fn uneven_branching_follows_successor_order() {
    let lanes = vec![
        lane(0, (-5.0, 0.0), (10.0, 0.0), &[3, 1, 2]),
        lane(1, (10.0, 0.0), (20.0, 5.0), &[5, 4]),
        lane(2, (10.0, 0.0), (20.0, 0.0), &[]),
        lane(3, (10.0, 0.0), (20.0, -5.0), &[]),
        lane(4, (20.0, 5.0), (30.0, 10.0), &[]),
        lane(5, (20.0, 5.0), (30.0, 5.0), &[]),
    ];
    let s = scene(vec![parked(0, 1.0, 0.0), parked(1, 1.0, 40.0)], lanes);
    assert_eq!(
        lane_ids(&s, 6),
        vec![vec![0, 1, 4], vec![0, 1, 5], vec![0, 2], vec![0, 3]]
    );
}

fn straight_path(length: f64) -> LanePath<f64> {
    LanePath {
        lane_ids: vec![0],
        polyline: Polyline::new([pt(0.0, 0.0), pt(length, 0.0)]).unwrap(),
        lane_starts: vec![0.0],
    }
}

#[test]
fn hundred_meter_path_fills_all_slots_at_half_meter_spacing() {
    let set = sample_goal_candidates(
        &[straight_path(100.0)],
        0,
        &Pose::new(0.0, 0.0, 0.0),
        None,
        1,
        &GoalSamplingConfig::default(),
    );
    assert_eq!(set.len(), 200);
    assert!(set.mask.iter().all(|&m| m));
    for w in set.positions.windows(2) {
        assert!((w[1].dist(w[0]) - 0.5).abs() < 1e-12);
    }
}

#[test]
fn ten_meter_path_is_padded() {
    let set = sample_goal_candidates(
        &[straight_path(10.0)],
        0,
        &Pose::new(0.0, 0.0, 0.0),
        None,
        6,
        &GoalSamplingConfig::default(),
    );
    assert_eq!(set.len(), 1200);
    assert_eq!(set.real_count(), 20);
    assert!(set.mask[..20].iter().all(|&m| m));
    assert!(set.mask[20..].iter().all(|&m| !m));
}

#[test]
fn generated_scenarios_satisfy_invariants() {
    for kind in ScenarioKind::ALL {
        for seed in 0..100 {
            let s = generate_synthetic_scenario(kind, seed);
            s.validate().unwrap();
            for a in &s.agents {
                assert!(a.states.iter().all(|st| st.speed <= 20.0), "{} agent {}", s.id(), a.id);
            }
            let (ta, tb) = (s.track(Role::A), s.track(Role::B));
            for d in 0..s.t_obs {
                let (sa, sb) = (ta.states[d], tb.states[d]);
                let ba = OrientedBox::new(sa.position(), sa.heading, ta.length(), ta.width());
                let bb = OrientedBox::new(sb.position(), sb.heading, tb.length(), tb.width());
                assert_eq!(intersection_area(&ba, &bb).unwrap(), 0.0, "{} collides at step {d}", s.id());
            }
        }
    }
}

#[test]
fn scenario_files_round_trip_exactly() {
    let scenarios: Vec<_> = ScenarioKind::ALL
        .iter()
        .map(|&k| generate_synthetic_scenario(k, 9))
        .collect();
    let mut buf = Vec::new();
    write_scenarios(&mut buf, &scenarios).unwrap();
    let back: Vec<Scenario<f64>> = read_scenarios(buf.as_slice()).unwrap();
    assert_eq!(back, scenarios);
    let mut again = Vec::new();
    write_scenarios(&mut again, &back).unwrap();
    assert_eq!(buf, again);
}

#[test]
fn single_precision_scenarios_load() {
    let mut buf = Vec::new();
    write_scenarios(&mut buf, &[generate_synthetic_scenario(ScenarioKind::Merging, 1)]).unwrap();
    let back: Vec<Scenario<f32>> = read_scenarios(buf.as_slice()).unwrap();
    back[0].validate().unwrap();
}
