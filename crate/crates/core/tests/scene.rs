use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trajirl_core::adaptor::{assign_index, assign_to_grid, reward_head, reward_head_spec, R_MIN};
use trajirl_core::nn::{Graph, Mat, ParamSpec, ParamStore};
use trajirl_core::scene::{
    adjacent, demonstration_from_future, dist, generate_scenario, to_target_frame, BoolGrid, GeneratorParams, GridSpec,
    Point, Pose, ScenarioKind,
};

fn kind(i: u8) -> ScenarioKind {
    if i.is_multiple_of(2) {
        ScenarioKind::TJunction
    } else {
        ScenarioKind::Crossing
    }
}

fn points(max: usize) -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec((-24.9f64..24.9, -24.9f64..24.9).prop_map(|(x, y)| [x, y]), 1..max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantized_futures_are_valid_demonstrations(future in points(40), h in 1usize..30) {
        let grid = GridSpec::new(25, 2.0);
        let q = demonstration_from_future(&future, grid, h).unwrap();
        let st = &q.demo.states;
        prop_assert!(!st.is_empty() && st.len() <= h);
        prop_assert_eq!(st[0], grid.index(12, 12));
        prop_assert!(st.iter().all(|&s| s < grid.num_cells()));
        for w in st.windows(2) {
            prop_assert!(adjacent(grid, w[0], w[1]), "{} -> {}", w[0], w[1]);
        }
        prop_assert!(!q.clamped);
    }

    #[test]
    fn pose_transforms_are_isometries(x in -50f64..50.0, y in -50f64..50.0, th in -4f64..4.0, pts in points(12)) {
        let pose = Pose { x, y, heading: th };
        for a in &pts {
            for b in &pts {
                let d0 = dist(*a, *b);
                prop_assert!((dist(pose.to_local(*a), pose.to_local(*b)) - d0).abs() <= 1e-9);
                prop_assert!((dist(pose.to_parent(*a), pose.to_parent(*b)) - d0).abs() <= 1e-9);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn target_frame_preserves_distances(seed in 0u64..10_000, k in 0u8..2) {
        let s = generate_scenario(kind(k), &GeneratorParams::default(), seed).unwrap();
        let n = to_target_frame(&s).unwrap();
        let before: Vec<Point> = s.lanes.iter().flat_map(|l| l.centerline.clone())
            .chain(s.agents.iter().flat_map(|a| a.track.iter().filter(|t| t.valid).map(|t| [t.x, t.y])))
            .collect();
        let after: Vec<Point> = n.scenario.lanes.iter().flat_map(|l| l.centerline.clone())
            .chain(n.scenario.agents.iter().flat_map(|a| a.track.iter().filter(|t| t.valid).map(|t| [t.x, t.y])))
            .collect();
        prop_assert_eq!(before.len(), after.len());
        for i in (0..before.len()).step_by(7) {
            for j in (0..before.len()).step_by(11) {
                prop_assert!((dist(before[i], before[j]) - dist(after[i], after[j])).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn generated_futures_avoid_blocked_cells(seed in 0u64..100_000, k in 0u8..2) {
        let params = GeneratorParams { block_prob: 0.9, ..Default::default() };
        let s = generate_scenario(kind(k), &params, seed).unwrap();
        let grid = s.grid();
        for p in s.future_points().unwrap() {
            let local = s.grid_pose.to_local(p);
            if let Some((r, c)) = grid.cell_of(local) {
                prop_assert!(!s.meta.blocked_cells.contains(&[r, c]), "future enters blocked cell ({r},{c})");
            }
        }
    }

    #[test]
    fn assignment_is_zero_off_mask_and_local(seed in any::<u64>(), extra in prop::collection::vec((0usize..20, 0usize..20), 1..15)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = GridSpec::new(20, 1.0);
        let mut mask = BoolGrid::new(20, false);
        let mut nodes = Vec::new();
        for r in 0..20 {
            for c in 0..20 {
                if rng.random_bool(0.6) {
                    mask.set(r, c, true);
                    nodes.push(grid.cell_center(r, c));
                }
            }
        }
        let feats = Mat::from_vec(nodes.len(), 3, (0..nodes.len() * 3).map(|_| rng.random_range(0.1..1.0)).collect());
        let out = assign_to_grid(&feats, &assign_index(grid, &nodes, &mask));
        for r in 0..20 {
            for c in 0..20 {
                let row = out.row(grid.index(r, c));
                if !mask.get(r, c) {
                    prop_assert!(row.iter().all(|v| *v == 0.0));
                } else {
                    prop_assert!(row.iter().all(|v| *v != 0.0));
                }
            }
        }
        let mut masked = mask.clone();
        for &(r, c) in &extra {
            masked.set(r, c, false);
        }
        let out2 = assign_to_grid(&feats, &assign_index(grid, &nodes, &masked));
        for r in 0..20 {
            for c in 0..20 {
                let i = grid.index(r, c);
                if extra.contains(&(r, c)) {
                    prop_assert!(out2.row(i).iter().all(|v| *v == 0.0));
                } else {
                    prop_assert_eq!(out.row(i), out2.row(i));
                }
            }
        }
    }

    #[test]
    fn transient_rewards_stay_below_bound(seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut specs: Vec<ParamSpec> = Vec::new();
        reward_head_spec(&mut specs, 4);
        let mut store = ParamStore::init(&specs, seed);
        for n in store.names().cloned().collect::<Vec<_>>() {
            store.get_mut(&n).unwrap().data.iter_mut().for_each(|v| *v *= scale);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x = Mat::from_vec(30, 4, (0..120).map(|_| rng.random_range(-5.0..5.0)).collect());
        let mut g = Graph::new();
        let xin = g.leaf(x);
        let nodes = reward_head(&mut g, &store, xin);
        prop_assert!(g.value(nodes.transient).data.iter().all(|&r| r <= -R_MIN));
    }
}
