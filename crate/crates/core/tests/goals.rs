use cgtp_core::cgpnet::{goal_offsets, joint_distribution, kappa, select_top_goals, GoalDistribution};
use cgtp_core::model::{prepare_scenario, Cgtp, ModelConfig};
use cgtp_core::numerics::{AdamConfig, NdArray, ParameterStore, Tape};
use cgtp_core::scene::{generate_synthetic_scenario, GoalCandidateSet, Point, ScenarioKind};
use cgtp_core::training::{
    build_goal_targets, goal_interactive_loss, goal_loss_conditional, goal_loss_marginal, nearest_candidates,
    train_epoch, trajectory_loss, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pt(x: f64, y: f64) -> Point<f64> {
    Point::new(x, y)
}

fn candidates(positions: Vec<Point<f64>>) -> GoalCandidateSet<f64> {
    let n = positions.len();
    GoalCandidateSet {
        agent_id: 0,
        goals_per_path: n,
        mask: vec![true; n],
        source_lane: vec![Some(0); n],
        arc: (0..n).map(|i| i as f64).collect(),
        offsets_gt: vec![Point::default(); n],
        endpoint: None,
        positions,
    }
}

fn random_set(rng: &mut ChaCha8Rng, n: usize) -> GoalCandidateSet<f64> {
    candidates(
        (0..n)
            .map(|_| pt(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)))
            .collect(),
    )
}

fn bce(p: f64, t: f64) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

#[test]
fn endpoint_on_a_candidate_ranks_it_first() {
    let set = candidates((0..10).map(|i| pt(i as f64, 0.0)).collect());
    let usable: Vec<usize> = (0..10).collect();
    assert_eq!(nearest_candidates(&set, &usable, pt(6.0, 0.0), 3), vec![6, 5, 7]);
}

#[test]
fn single_cell_grid_always_picks_it() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let a = random_set(&mut rng, 6);
        let b = random_set(&mut rng, 6);
        let usable: Vec<usize> = (0..6).collect();
        let t = build_goal_targets(&a, &usable, &b, &usable, pt(1.0, 2.0), pt(-3.0, 0.5), &[4], &[vec![2]], 1);
        assert_eq!(t.k_j, 0);
    }
}

#[test]
fn hand_two_by_two_grid() {
    // A candidates at distance 1 and 3 from the endpoint, B at 2/0.5 and 1/4
    let a = candidates(vec![pt(1.0, 0.0), pt(3.0, 0.0)]);
    let b = candidates(vec![pt(0.0, 2.0), pt(0.0, 0.5), pt(0.0, 1.0), pt(0.0, 4.0)]);
    let usable_a = vec![0, 1];
    let usable_b = vec![0, 1, 2, 3];
    let top_a = [0, 1];
    let top_b = [vec![0, 1], vec![2, 3]];
    // sums: (0,0)=3, (0,1)=1.5, (1,0)=4, (1,1)=7
    let t = build_goal_targets(&a, &usable_a, &b, &usable_b, pt(0.0, 0.0), pt(0.0, 0.0), &top_a, &top_b, 2);
    assert_eq!(t.k_j, 1);
}

#[test]
fn grid_target_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let kk = rng.gen_range(1..=5);
        let a = random_set(&mut rng, 12);
        let b = random_set(&mut rng, 12);
        let usable: Vec<usize> = (0..12).collect();
        let ea = pt(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0));
        let eb = pt(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0));
        let pick = |rng: &mut ChaCha8Rng| {
            let mut v: Vec<usize> = (0..12).collect();
            for i in 0..kk {
                let j = rng.gen_range(i..12);
                v.swap(i, j);
            }
            v.truncate(kk);
            v
        };
        let top_a = pick(&mut rng);
        let top_b: Vec<Vec<usize>> = (0..kk).map(|_| pick(&mut rng)).collect();
        let t = build_goal_targets(&a, &usable, &b, &usable, ea, eb, &top_a, &top_b, kk);

        let mut best = (f64::INFINITY, usize::MAX);
        for q in 0..kk {
            for k in 0..kk {
                let d = a.positions[top_a[q]].dist(ea) + b.positions[top_b[q][k]].dist(eb);
                if d < best.0 {
                    best = (d, q * kk + k);
                }
            }
        }
        assert_eq!(t.k_j, best.1);

        let mut by_dist: Vec<usize> = (0..12).collect();
        by_dist.sort_by(|&x, &y| a.positions[x].dist(ea).partial_cmp(&a.positions[y].dist(ea)).unwrap());
        assert_eq!(t.k_a, by_dist[..kk].to_vec());
    }
}

fn marginal_loss(probs: Vec<f64>, offsets: Vec<f64>, set: &GoalCandidateSet<f64>, pos: &[usize], end: Point<f64>) -> f64 {
    let n = probs.len();
    let mut tape = Tape::new();
    let p = tape.constant(NdArray::matrix(1, n, probs).unwrap()).unwrap();
    let o = tape.constant(NdArray::matrix(n, 2, offsets).unwrap()).unwrap();
    let rows: Vec<usize> = (0..n).collect();
    let l = goal_loss_marginal(&mut tape, p, o, set, &rows, pos, end).unwrap();
    tape.value(l).item()
}

#[test]
fn uniform_probabilities_and_zero_offsets_closed_form() {
    let m = 8;
    let kk = 3;
    let set = candidates((0..m).map(|i| pt(i as f64, 0.0)).collect());
    let end = pt(1.2, 0.5);
    let pos = [1, 2, 0];
    let got = marginal_loss(vec![1.0 / m as f64; m], vec![0.0; 2 * m], &set, &pos, end);
    let mf = m as f64;
    let bce_term = -(kk as f64 * (1.0 / mf).ln() + (mf - kk as f64) * (1.0 - 1.0 / mf).ln()) / mf;
    let mse_term: f64 = pos
        .iter()
        .map(|&k| {
            let d = end.sub(set.positions[k]);
            d.x * d.x + d.y * d.y
        })
        .sum::<f64>()
        / mf;
    assert!((got - (bce_term + mse_term)).abs() < 1e-12, "{got} vs {}", bce_term + mse_term);
}

#[test]
fn perfect_head_has_vanishing_loss() {
    let m = 6;
    let set = candidates((0..m).map(|i| pt(i as f64, 1.0)).collect());
    let end = pt(2.3, 0.8);
    let pos = [2, 3];
    let probs = (0..m).map(|k| if pos.contains(&k) { 1.0 } else { 0.0 }).collect();
    let mut offsets = vec![0.0; 2 * m];
    for &k in &pos {
        let d = end.sub(set.positions[k]);
        offsets[2 * k] = d.x;
        offsets[2 * k + 1] = d.y;
    }
    assert!(marginal_loss(probs, offsets, &set, &pos, end) < 1e-6);
}

#[test]
fn conditional_loss_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..50 {
        let n = rng.gen_range(2..9);
        let queries = rng.gen_range(1..4);
        let set = random_set(&mut rng, n);
        let end = pt(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
        let pos: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.4)).collect();
        let mut tape = Tape::new();
        let mut parts = Vec::new();
        let mut oracle = 0.0;
        for _ in 0..queries {
            let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let offs: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            for k in 0..n {
                let hit = pos.contains(&k);
                let (tx, ty) = if hit {
                    let d = end.sub(set.positions[k]);
                    (d.x, d.y)
                } else {
                    (0.0, 0.0)
                };
                let sq = (offs[2 * k] - tx).powi(2) + (offs[2 * k + 1] - ty).powi(2);
                oracle += (bce(probs[k], if hit { 1.0 } else { 0.0 }) + sq) / (n * queries) as f64;
            }
            let p = tape.constant(NdArray::matrix(1, n, probs).unwrap()).unwrap();
            let o = tape.constant(NdArray::matrix(n, 2, offs).unwrap()).unwrap();
            parts.push((p, o));
        }
        let rows: Vec<usize> = (0..n).collect();
        let l = goal_loss_conditional(&mut tape, &parts, &set, &rows, &pos, end).unwrap();
        assert!((tape.value(l).item() - oracle).abs() < 1e-12, "trial {trial}");
    }
}

#[test]
fn repeated_query_equals_single_query() {
    let set = candidates((0..5).map(|i| pt(0.0, i as f64)).collect());
    let end = pt(0.3, 2.2);
    let mut tape = Tape::new();
    let p = tape
        .constant(NdArray::matrix(1, 5, vec![0.1, 0.2, 0.4, 0.2, 0.1]).unwrap())
        .unwrap();
    let o = tape
        .constant(NdArray::matrix(5, 2, vec![0.1, -0.1, 0.0, 0.2, 0.3, 0.3, -0.2, 0.0, 0.5, 0.1]).unwrap())
        .unwrap();
    let rows: Vec<usize> = (0..5).collect();
    let one = goal_loss_conditional(&mut tape, &[(p, o)], &set, &rows, &[2], end).unwrap();
    let three = goal_loss_conditional(&mut tape, &[(p, o), (p, o), (p, o)], &set, &rows, &[2], end).unwrap();
    assert!((tape.value(one).item() - tape.value(three).item()).abs() < 1e-15);
}

#[test]
fn one_hot_joint_has_vanishing_loss() {
    let mut tape = Tape::new();
    let mut v = vec![0.0; 25];
    v[7] = 1.0;
    let j = tape.constant(NdArray::matrix(25, 1, v).unwrap()).unwrap();
    let l = goal_interactive_loss(&mut tape, j, 7).unwrap();
    assert!(tape.value(l).item() < 1e-6);
}

#[test]
fn one_adam_step_raises_the_target_pair() {
    // marginal over 2 goals and one conditional per query over 2 goals
    let mut store = ParameterStore::new();
    store.insert("marg", NdArray::matrix(1, 2, vec![0.3, -0.1]).unwrap());
    store.insert("cond", NdArray::matrix(2, 2, vec![0.2, 0.0, -0.4, 0.1]).unwrap());
    let k_j = 3;
    let score = |s: &ParameterStore<f64>| -> (Tape<f64>, cgtp_core::numerics::Var) {
        let mut t = Tape::new();
        let m = t.param(s, "marg").unwrap();
        let c = t.param(s, "cond").unwrap();
        let pm = t.masked_softmax_rows(m, None, None).unwrap();
        let pc = t.masked_softmax_rows(c, None, None).unwrap();
        let rep = t.gather_elems(pm, &[(0, 0), (0, 0), (0, 1), (0, 1)]).unwrap();
        let cond = t.gather_elems(pc, &[(0, 0), (0, 1), (1, 0), (1, 1)]).unwrap();
        let joint = t.mul(rep, cond).unwrap();
        (t, joint)
    };
    let before = {
        let (t, j) = score(&store);
        t.value(j).data()[k_j]
    };
    let (t, j) = score(&store);
    let mut t = t;
    let l = goal_interactive_loss(&mut t, j, k_j).unwrap();
    let g = t.backward(l).unwrap();
    store.accumulate_grads(&t.param_grads(&g)).unwrap();
    store.adam_update(&AdamConfig::default()).unwrap();
    let after = {
        let (t, j) = score(&store);
        t.value(j).data()[k_j]
    };
    assert!(after > before, "{before} -> {after}");
}

fn traj_rows(gt_a: &[Point<f64>], gt_b: &[Point<f64>], modes: usize, k_j: usize, err: Point<f64>) -> NdArray<f64> {
    let t = gt_a.len();
    let mut data = Vec::new();
    for r in 0..2 * modes {
        let gt = if r < modes { gt_a } else { gt_b };
        for p in gt {
            if r % modes == k_j {
                data.extend([p.x + err.x, p.y + err.y]);
            } else {
                data.extend([0.0, 0.0]);
            }
        }
    }
    NdArray::matrix(2 * modes, 2 * t, data).unwrap()
}

#[test]
fn trajectory_loss_normalizes_over_horizon() {
    let gt = |t: usize, y: f64| -> Vec<Point<f64>> { (0..t).map(|i| pt(i as f64 * 0.7, y)).collect() };
    for mask in [false, true] {
        let mut tape = Tape::new();
        let exact = tape.constant(traj_rows(&gt(6, 0.0), &gt(6, 3.0), 4, 2, pt(0.0, 0.0))).unwrap();
        let l = trajectory_loss(&mut tape, exact, &gt(6, 0.0), &gt(6, 3.0), 2, mask).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let e = pt(0.6, -0.8);
        let short = tape.constant(traj_rows(&gt(5, 0.0), &gt(5, 3.0), 4, 1, e)).unwrap();
        let long = tape.constant(traj_rows(&gt(10, 0.0), &gt(10, 3.0), 4, 1, e)).unwrap();
        let ls = trajectory_loss(&mut tape, short, &gt(5, 0.0), &gt(5, 3.0), 1, mask).unwrap();
        let ll = trajectory_loss(&mut tape, long, &gt(10, 0.0), &gt(10, 3.0), 1, mask).unwrap();
        assert!((tape.value(ls).item() - tape.value(ll).item()).abs() < 1e-14);
        // one of four modes carries ‖e‖² = 1 on both agents
        assert!((tape.value(ls).item() - 0.25).abs() < 1e-12);
    }
}

#[test]
fn joint_scores_are_products_of_random_simplexes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let simplex = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    };
    for _ in 0..100 {
        let n = rng.gen_range(3..10);
        let kk = rng.gen_range(1..=3);
        let pos: Vec<Point<f64>> = (0..n).map(|i| pt(i as f64, 0.0)).collect();
        let dist = |p: Vec<f64>| GoalDistribution {
            mask: vec![true; p.len()],
            offsets: vec![Point::default(); p.len()],
            probs: p,
            query: None,
        };
        let ma = dist(simplex(&mut rng, n));
        let top = select_top_goals(&ma.probs, &ma.mask, kk);
        let conds: Vec<_> = (0..kk).map(|_| dist(simplex(&mut rng, n))).collect();
        let set = joint_distribution(&ma, &conds, &top, &pos, &pos, kk);
        assert_eq!(set.pairs.len(), kk * kk);
        for p in &set.pairs {
            assert_eq!(p.kappa, kappa(kk, p.q, p.k));
            let want = ma.probs[top[p.q]] * conds[p.q].probs[p.cand_b];
            assert!((p.score - want).abs() < 1e-12);
        }
        if kk == n.min(kk) && kk > 0 {
            let full: f64 = ma.probs.iter().sum::<f64>();
            assert!((full - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn one_hot_marginal_concentrates_the_joint() {
    let pos: Vec<Point<f64>> = (0..3).map(|i| pt(i as f64, 0.0)).collect();
    let d = |p: Vec<f64>| GoalDistribution {
        mask: vec![true; 3],
        offsets: vec![Point::default(); 3],
        probs: p,
        query: None,
    };
    let ma = d(vec![0.0, 1.0, 0.0]);
    let top = select_top_goals(&ma.probs, &ma.mask, 2);
    assert_eq!(top[0], 1);
    let conds = vec![d(vec![0.2, 0.5, 0.3]), d(vec![0.6, 0.1, 0.3])];
    let set = joint_distribution(&ma, &conds, &top, &pos, &pos, 2);
    let in_block: f64 = set.pairs.iter().filter(|p| p.q == 0).map(|p| p.score).sum();
    let outside: f64 = set.pairs.iter().filter(|p| p.q != 0).map(|p| p.score).sum();
    assert!((in_block - 0.8).abs() < 1e-15);
    assert_eq!(outside, 0.0);
}

#[test]
fn top_goal_selection_examples() {
    assert_eq!(select_top_goals(&[0.1, 0.5, 0.4], &[true; 3], 2), vec![1, 2]);
    assert_eq!(select_top_goals(&[0.25; 4], &[true; 4], 2), vec![0, 1]);
    let mut all = select_top_goals(&[0.3, 0.1, 0.6], &[true; 3], 3);
    all.sort();
    assert_eq!(all, vec![0, 1, 2]);
    assert_eq!(select_top_goals(&[0.9, 0.05, 0.05], &[false, true, true], 2), vec![1, 2]);
}

#[test]
fn zero_weight_offset_head_outputs_zeros() {
    let cfg = ModelConfig::small();
    let (model, mut store) = Cgtp::init::<f64>(cfg.clone(), 0);
    let names: Vec<String> = store
        .names()
        .filter(|n| n.starts_with("reg_a."))
        .map(str::to_string)
        .collect();
    for n in names {
        for v in store.value_mut(&n).unwrap().data_mut() {
            *v = 0.0;
        }
    }
    let prep = prepare_scenario(&generate_synthetic_scenario(ScenarioKind::CutIn, 0), &cfg).unwrap();
    let mut tape = Tape::new();
    let fa = model.frame_forward(&mut tape, &store, &prep.a).unwrap();
    let o = goal_offsets(&model.cgp.reg_a, &mut tape, &store, fa.reg_base, None).unwrap();
    assert_eq!(tape.shape(o), (fa.goals.candidates.len(), 2));
    assert!(tape.value(o).data().iter().all(|&v| v == 0.0));
}

#[test]
fn overfit_offset_reaches_the_true_endpoint() {
    let cfg = ModelConfig::small();
    let prep = prepare_scenario(&generate_synthetic_scenario(ScenarioKind::Yielding, 0), &cfg).unwrap();
    let data = vec![prep];
    let (model, mut store) = Cgtp::init::<f64>(cfg, 0);
    let train = TrainConfig {
        batch_size: 1,
        epochs: 2000,
        decay_every: 400,
        ..TrainConfig::default()
    };
    for e in 0..train.epochs {
        train_epoch(&model, &mut store, &data, &train, e).unwrap();
    }
    let prep = &data[0];
    let mut tape = Tape::new();
    let fa = model.frame_forward(&mut tape, &store, &prep.a).unwrap();
    let o = goal_offsets(&model.cgp.reg_a, &mut tape, &store, fa.reg_base, None).unwrap();
    let end = prep.a.endpoint();
    let nearest = nearest_candidates(&prep.a.goals, &prep.a.usable, end, 1)[0];
    let row = fa.goals.candidates.iter().position(|&c| c == nearest).unwrap();
    let pred = pt(tape.value(o).at(row, 0), tape.value(o).at(row, 1));
    let truth = end.sub(prep.a.goals.positions[nearest]);
    assert!(pred.dist(truth) < 0.1, "offset {pred:?} vs {truth:?}");
}
