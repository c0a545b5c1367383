use std::collections::HashMap;
use std::sync::Arc;

use approx::assert_abs_diff_eq;
use phygen::datapipe::to_bytes;
use phygen::geometry::{obb_overlap, Vec2};
use phygen::map::{Lane, LaneType, MapGraph};
use phygen::scenario_gen::*;
use phygen::scene::LogTag;
use phygen::world_sim::{footprint, AgentState, WorldState};
use phygen::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn modes_are_drawn_with_equal_probability() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let n = 30_000;
    let mut counts: HashMap<PerturbMode, usize> = HashMap::new();
    for i in 0..n {
        let target = if i % 2 == 0 { PerturbTarget::Ego } else { PerturbTarget::Adv };
        let p = sample_perturbation(&mut rng, target);
        *counts.entry(p.mode).or_default() += 1;
        assert!((0.0..=30.0).contains(&p.target_speed));
        assert!((-200.0..=200.0).contains(&p.lateral_offset));
        match p.mode {
            PerturbMode::OffsetOnly => assert_eq!(p.target_speed, 10.0),
            PerturbMode::SpeedOnly => assert_eq!(p.lateral_offset, 0.0),
            PerturbMode::Both => {}
        }
        assert_eq!(p.perturb_target, target);
    }
    assert_eq!(counts.len(), 3);
    for (mode, c) in counts {
        let f = c as f64 / n as f64;
        assert!((0.32..=0.35).contains(&f), "{mode:?} frequency {f}");
    }
}

#[test]
fn sampled_values_stay_near_anchors() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5000 {
        let p = sample_perturbation(&mut rng, PerturbTarget::Adv);
        if p.mode != PerturbMode::OffsetOnly {
            let d = SPEED_ANCHORS.iter().map(|a| (a - p.target_speed).abs()).fold(f64::INFINITY, f64::min);
            assert!(d <= SPEED_JITTER + 1e-9);
        }
        if p.mode != PerturbMode::SpeedOnly {
            let d = OFFSET_ANCHORS.iter().map(|a| (a - p.lateral_offset).abs()).fold(f64::INFINITY, f64::min);
            assert!(d <= OFFSET_JITTER + 1e-9);
        }
    }
}

#[test]
fn invalid_specs_rejected() {
    let bad = PerturbationSpec {
        mode: PerturbMode::OffsetOnly,
        target_speed: 12.0,
        lateral_offset: 50.0,
        perturb_target: PerturbTarget::Ego,
    };
    assert!(matches!(bad.validate(), Err(Error::Input(_))));
    let bad = PerturbationSpec {
        mode: PerturbMode::Both,
        target_speed: 31.0,
        ..bad
    };
    assert!(bad.validate().is_err());
}

fn straight(len: f64) -> Vec<Vec2> {
    (0..=len as usize).map(|i| Vec2::new(i as f64, 0.0)).collect()
}

#[test]
fn zero_offset_is_identity() {
    let r: Vec<Vec2> = (0..200).map(|i| Vec2::new(i as f64, (i as f64 * 0.02).sin() * 5.0)).collect();
    assert_eq!(cosine_offset_route(&r, 0.0, 40.0).unwrap(), r);
}

#[test]
fn offset_route_midpoint_and_end() {
    let r = straight(100.0);
    let out = cosine_offset_route(&r, 6.0, 40.0).unwrap();
    assert_eq!(out[0], r[0]);
    assert_abs_diff_eq!(out[20].y, 3.0, epsilon = 1e-12);
    assert_abs_diff_eq!(out[40].y, 6.0, epsilon = 1e-12);
    assert_abs_diff_eq!(out[90].y, 6.0, epsilon = 1e-12);
    for (a, b) in r.iter().zip(&out) {
        assert_abs_diff_eq!(a.x, b.x, epsilon = 1e-12);
    }
    let right = cosine_offset_route(&r, -6.0, 40.0).unwrap();
    assert_abs_diff_eq!(right[60].y, -6.0, epsilon = 1e-12);
}

#[test]
fn profile_is_c1_at_both_ends() {
    let (offset, l) = (200.0, 40.0);
    let d = |s: f64| cosine_displacement(s, offset, l);
    let h = 1e-6;
    for s0 in [0.0, l] {
        let left = (d(s0) - d(s0 - h)) / h;
        let right = (d(s0 + h) - d(s0)) / h;
        assert!((left - right).abs() <= 1e-6, "slope jump {} at s={s0}", left - right);
    }
    let mid = (d(l / 2.0 + h) - d(l / 2.0 - h)) / (2.0 * h);
    assert_abs_diff_eq!(mid, offset * std::f64::consts::PI / (2.0 * l), epsilon = 1e-4);
}

#[test]
fn route_shorter_than_transition_rejected() {
    assert!(matches!(cosine_offset_route(&straight(30.0), 5.0, 40.0), Err(Error::Input(_))));
}

fn three_lane_road() -> Arc<MapGraph> {
    let lanes = [-3.5, 0.0, 3.5]
        .iter()
        .map(|&y| Lane {
            centerline: vec![Vec2::new(-300.0, y), Vec2::new(300.0, y)],
            width: 3.5,
            lane_type: LaneType::Drivable,
        })
        .collect();
    Arc::new(MapGraph::new(lanes, vec![]).unwrap())
}

fn ego_route() -> Vec<Vec2> {
    (0..=400).map(|i| Vec2::new(-200.0 + i as f64, 0.0)).collect()
}

#[test]
fn lone_ego_spawns_nearby_without_overlap() {
    let world = WorldState::new(vec![AgentState::vehicle(0, 0.0, 0.0, 0.0, 8.0)], three_lane_road()).unwrap();
    let ego_fp = footprint(world.agent(0).unwrap());
    let route = ego_route();
    let (mut ahead, mut behind) = (0, 0);
    for seed in 0..1000 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let adv = spawn_adversary(&world, 0, &route, 1, &SpawnParams::default(), &mut rng).unwrap();
        let p = adv.pose.position();
        assert!(p.norm() <= 15.0, "spawned {:.2} m away", p.norm());
        assert!(!obb_overlap(&ego_fp, &footprint(&adv)).unwrap());
        assert!(world.map.is_drivable(p));
        assert_abs_diff_eq!(adv.pose.yaw, 0.0, epsilon = 1e-9);
        if p.x > 0.0 {
            ahead += 1;
        } else if p.x < 0.0 {
            behind += 1;
        }
    }
    assert!(ahead > 100 && behind > 100, "ahead {ahead}, behind {behind}");
}

#[test]
fn congested_neighbourhood_skips_scenario() {
    let params = SpawnParams::default();
    let mut agents = vec![AgentState::vehicle(0, 0.0, 0.0, 0.0, 8.0)];
    let mut id = 1;
    for k in -6..=6 {
        for lat in [-3.5, 0.0, 3.5] {
            let x = k as f64 * params.longitudinal_step;
            if lat == 0.0 && x.abs() < 3.0 {
                continue;
            }
            agents.push(AgentState::vehicle(id, x, lat, 0.0, 8.0));
            id += 1;
        }
    }
    let world = WorldState::new(agents, three_lane_road()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = spawn_adversary(&world, 0, &ego_route(), 999, &params, &mut rng);
    assert!(matches!(r, Err(Error::ScenarioSkip(_))), "{r:?}");
}

#[test]
fn log_length_contract() {
    let cfg = RolloutConfig::default();
    let (mut tagged, mut free) = (0, 0);
    for seed in 0..40 {
        for kind in [SceneKind::Ego, SceneKind::Adv] {
            let log = match simulate_scene(&cfg, kind, seed) {
                Ok(l) => l,
                Err(Error::ScenarioSkip(_)) => continue,
                Err(e) => panic!("{e}"),
            };
            match log.tag {
                LogTag::EventFree => {
                    assert!(log.events.is_empty());
                    assert_eq!(log.len(), 144);
                    free += 1;
                }
                LogTag::EventTagged => {
                    let first = log.events.iter().map(|e| e.t_event).min().unwrap();
                    assert!(first >= 24);
                    assert_eq!(log.len(), first + 49, "event at {first}");
                    assert_eq!(log.frames.last().unwrap().frame_index, first + 48);
                    tagged += 1;
                }
            }
        }
        if tagged >= 5 && free >= 1 {
            break;
        }
    }
    assert!(tagged >= 5 && free >= 1, "tagged {tagged}, free {free}");
}

#[test]
fn warmup_frames_match_unperturbed_rollout() {
    let cfg = RolloutConfig::default();
    for seed in 0..6 {
        let map = scene_map(&cfg, seed);
        for kind in [SceneKind::Ego, SceneKind::Adv] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = sample_perturbation(&mut rng, kind.target().unwrap());
            let perturbed = match run_rollout(&cfg, &map, kind, Some(&p), seed) {
                Ok(l) => l,
                Err(Error::ScenarioSkip(_)) => continue,
                Err(e) => panic!("{e}"),
            };
            let plain = run_rollout(&cfg, &map, kind, None, seed).unwrap();
            assert_eq!(perturbed.frames[..24], plain.frames[..24]);
        }
    }
}

#[test]
fn same_seed_gives_identical_bytes() {
    let cfg = RolloutConfig::default();
    for kind in [SceneKind::Nominal, SceneKind::Ego, SceneKind::Adv] {
        let a = simulate_scene(&cfg, kind, 17);
        let b = simulate_scene(&cfg, kind, 17);
        match (a, b) {
            (Ok(a), Ok(b)) => assert_eq!(to_bytes(&a).unwrap(), to_bytes(&b).unwrap()),
            (Err(Error::ScenarioSkip(_)), Err(Error::ScenarioSkip(_))) => {}
            other => panic!("{other:?}"),
        }
    }
}

#[test]
fn mismatched_perturbation_target_rejected() {
    let cfg = RolloutConfig::default();
    let map = scene_map(&cfg, 3);
    let p = PerturbationSpec {
        mode: PerturbMode::SpeedOnly,
        target_speed: 20.0,
        lateral_offset: 0.0,
        perturb_target: PerturbTarget::Adv,
    };
    assert!(matches!(run_rollout(&cfg, &map, SceneKind::Ego, Some(&p), 3), Err(Error::Config(_))));
}
