use std::f64::consts::PI;

use proptest::prelude::*;
use tinynav_core::sim::*;
use tinynav_core::{ControlCommand, SensorConfig};

fn open_box(half: f64) -> Vec<Segment> {
    vec![
        Segment::new(-half, -half, half, -half),
        Segment::new(half, -half, half, half),
        Segment::new(half, half, -half, half),
        Segment::new(-half, half, -half, -half),
    ]
}

fn world_with(walls: Vec<Segment>, spawn: Pose) -> SimWorld {
    SimWorld { name: "prop".into(), walls, spawn, checkpoints: Vec::new(), wall_height: DEFAULT_WALL_HEIGHT, seed: 0 }
}

fn segment_strategy() -> impl Strategy<Value = Segment> {
    (0.3f64..3.0, -2.0f64..2.0, 0.3f64..3.0, -2.0f64..2.0)
        .prop_filter("non-degenerate", |(a, b, c, d)| (a - c).abs() + (b - d).abs() > 0.05)
        .prop_map(|(a, b, c, d)| Segment::new(a, b, c, d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mirrored_world_mirrors_the_frame(extra in proptest::collection::vec(segment_strategy(), 1..6)) {
        let mut walls = open_box(20.0);
        walls.extend(extra);
        let world = world_with(walls, Pose::default());
        let state = world.spawn_state();
        let mirrored = world.mirrored_about(Pose::default());
        let cfg = SensorConfig::default();
        let a = render_depth(&world, &state, &cfg);
        let b = render_depth(&mirrored, &mirrored.spawn_state(), &cfg);
        for r in 0..25 {
            for c in 0..25 {
                prop_assert_eq!(a.get(r, c), b.get(r, 24 - c));
            }
        }
        let ca = expert_policy(&a, &cfg).unwrap();
        let cb = expert_policy(&b, &cfg).unwrap();
        prop_assert_eq!(ca.throttle, cb.throttle);
        // The pivot breaks exact ties to the right on both sides.
        if ca.steering != 0.0 && !(ca.throttle == 0.15 && ca.steering.abs() == 1.0 && cb.steering == ca.steering) {
            prop_assert_eq!(ca.steering, -cb.steering);
        }
    }

    #[test]
    fn one_step_never_moves_further_than_top_speed(
        x in -1.0f64..1.0, y in -1.0f64..1.0, h in -PI..PI,
        s in -1.0f64..1.0, t in 0.0f64..1.0,
    ) {
        let world = world_with(open_box(3.0), Pose::new(x, y, h));
        let st = world.spawn_state();
        let (next, _) = step_physics(&world, &st, ControlCommand::new(s, t), PHYSICS_DT);
        let moved = (next.pose.x - x).hypot(next.pose.y - y);
        prop_assert!(moved <= V_MAX * PHYSICS_DT + 1e-12);
        prop_assert!(next.v_left.abs() <= V_MAX && next.v_right.abs() <= V_MAX);
    }

    #[test]
    fn approaching_a_wall_never_increases_centre_depth(start in 0.4f64..2.4, angle in -0.3f64..0.3) {
        let mut walls = open_box(30.0);
        walls.push(Segment::new(start + 0.5, -5.0, start + 0.5 + 10.0 * angle, 5.0));
        let world = world_with(walls, Pose::new(0.0, 0.0, 0.0));
        let cfg = SensorConfig::default();
        let mut st = world.spawn_state();
        let mut last = render_depth(&world, &st, &cfg).get(12, 12);
        for _ in 0..400 {
            let (next, hit) = step_physics(&world, &st, ControlCommand::new(0.0, 1.0), PHYSICS_DT);
            if hit {
                break;
            }
            st = next;
            let px = render_depth(&world, &st, &cfg).get(12, 12);
            prop_assert!(px == 0 || last == 0 || px <= last, "{px} after {last}");
            if last == 0 {
                prop_assert_eq!(px, 0);
            }
            last = px;
        }
    }
}

#[test]
fn gap_of_five_centimetres_collides_within_a_tenth_of_a_second() {
    let mut world = world_with(open_box(2.0), Pose::default());
    world.spawn = Pose::new(2.0 - BODY_RADIUS - 0.05, 0.0, 0.0);
    let mut st = world.spawn_state();
    let mut steps = 0;
    loop {
        let (next, hit) = step_physics(&world, &st, ControlCommand::new(0.0, 1.0), PHYSICS_DT);
        steps += 1;
        if hit {
            break;
        }
        // Geometric oracle: the body is still clear of the wall.
        assert!(2.0 - next.pose.x > BODY_RADIUS);
        st = next;
        assert!(steps < 10, "no contact after {steps} steps");
    }
    assert!(steps as f64 * PHYSICS_DT <= 0.1);
}

#[test]
fn expert_laps_the_oval_cleanly() {
    let world = oval_world();
    let r = run_closed_loop(&world, &mut ExpertPolicy::default(), &RunConfig { seconds: 120.0, ..Default::default() })
        .unwrap();
    assert!(r.laps >= 2, "{} laps", r.laps);
    assert_eq!(r.collisions, 0);
    assert_eq!(r.log.len() as u64, r.ticks);
    assert_eq!(r.ticks, 2400);
}

#[test]
fn expert_laps_the_maze() {
    let world = maze_world();
    let r = run_closed_loop(&world, &mut ExpertPolicy::default(), &RunConfig { seconds: 120.0, ..Default::default() })
        .unwrap();
    assert!(r.laps >= 1);
    assert_eq!(r.collisions, 0);
}

#[test]
fn lap_target_stops_the_run() {
    let world = oval_world();
    let cfg = RunConfig { seconds: 600.0, laps_target: Some(1), ..Default::default() };
    let r = run_closed_loop(&world, &mut ExpertPolicy::default(), &cfg).unwrap();
    assert_eq!(r.laps, 1);
    assert!(r.ticks < 12_000);
}

#[test]
fn closed_loop_is_deterministic() {
    let world = maze_world();
    let cfg = RunConfig { seconds: 20.0, seed: 9, noise: NoiseConfig::DATASET, ..Default::default() };
    let a = run_closed_loop(&world, &mut ExpertPolicy::default(), &cfg).unwrap();
    let b = run_closed_loop(&world, &mut ExpertPolicy::default(), &cfg).unwrap();
    assert_eq!(a, b);
    let c = run_closed_loop(&world, &mut ExpertPolicy::default(), &RunConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(a.log, c.log);
}

#[test]
fn noise_leaves_labels_clean() {
    let world = oval_world();
    let cfg = RunConfig { seconds: 10.0, seed: 4, noise: NoiseConfig::DATASET, ..Default::default() };
    let r = run_closed_loop(&world, &mut ExpertPolicy::default(), &cfg).unwrap();
    let sensor = SensorConfig::default();
    for e in &r.log {
        assert_eq!(expert_policy(&e.frame, &sensor).unwrap(), e.command);
    }
    assert!(r.log.iter().any(|e| e.applied != e.command));
}

#[test]
fn recordings_build_windows() {
    use tinynav_core::pipeline::{build_windows, Rotation};
    let world = oval_world();
    let r = run_closed_loop(&world, &mut ExpertPolicy::default(), &RunConfig { seconds: 3.0, ..Default::default() })
        .unwrap();
    let rec = r.to_recording();
    rec.validate().unwrap();
    assert_eq!(build_windows(&rec, 0, Rotation::R0).unwrap().len(), 60 - 19);
}

#[test]
fn model_policy_waits_for_a_full_window() {
    let world = oval_world();
    let model = tinynav_core::FloatModel::init(3);
    let mut policy = ModelPolicy::new(&model);
    let r = run_closed_loop(&world, &mut policy, &RunConfig { seconds: 2.0, ..Default::default() }).unwrap();
    for e in &r.log[..19] {
        assert_eq!(e.command, ControlCommand::STOP);
    }
    assert_ne!(r.log[19].command, ControlCommand::STOP);
}

#[test]
fn sampled_poses_are_inside_and_clear() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    for world in [oval_world(), maze_world(), deadend_world()] {
        for _ in 0..50 {
            let p = world.sample_pose(&mut rng, 0.05).unwrap();
            assert!(world.contains(p.x, p.y));
            assert!(world.walls.iter().all(|w| w.distance_to(p.x, p.y) > BODY_RADIUS));
        }
        let (x0, y0, _, _) = world.bounds();
        assert!(!world.contains(x0 - 1.0, y0 - 1.0));
    }
}
