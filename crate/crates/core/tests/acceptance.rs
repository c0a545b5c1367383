//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use phygen::autodiff::Graph;
use phygen::cli::{run_cli, EXIT_OK};
use phygen::datapipe::*;
use phygen::evalkit::{accel_hist_csv, collision_drop, speed_profile};
use phygen::flow_toy::{self, ExactOracle, FlowCondition, FlowConfig, FlowModel, LatentGrid};
use phygen::geometry::{obb_overlap, oriented_rect, Vec2};
use phygen::map::{Lane, LaneType, MapGraph, Obstacle};
use phygen::pipeline::*;
use phygen::rectifier::*;
use phygen::scene::SceneLog;
use phygen::world_sim::{EventRecord, EventType, Pose6DoF};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    id: usize,
    pass: bool,
}

struct Suite {
    results: Vec<Outcome>,
}

impl Suite {
    fn record(&mut self, id: usize, name: &str, pass: bool, detail: String, started: Instant) {
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("{tag} criterion {id:2} {name}: {detail} [{:.1}s]", started.elapsed().as_secs_f64());
        self.results.push(Outcome { id, pass });
    }
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn base_config() -> PipelineConfig {
    PipelineConfig::load(&repo_root().join("docs/pipeline.toml")).expect("canonical pipeline config")
}

fn rich_of(pairs: &[TrainingPair]) -> Vec<TrainingPair> {
    pairs.iter().filter(|p| p.source == ClipSource::PhysicsRich).cloned().collect()
}

fn nominal_of(pairs: &[TrainingPair]) -> Vec<TrainingPair> {
    pairs.iter().filter(|p| p.source == ClipSource::Nominal).cloned().collect()
}

fn train_on(cfg: &PipelineConfig, set: &PairSet) -> RectifierModel {
    train(&cfg.rectifier, &set.split(Split::Train), &[]).expect("training").0
}

fn rich_l2(model: &RectifierModel, set: &PairSet, cfg: &PipelineConfig) -> f64 {
    evaluate(model, &rich_of(&set.split(Split::Val)), cfg).expect("evaluation").report.l2_6dof
}

/// Mean predicted and ground-truth speed drop over static-collision clips
/// whose first event belongs to the subject.
fn static_drops(model: &RectifierModel, pairs: &[TrainingPair]) -> (f64, Vec<f64>) {
    let mut pred_drops = Vec::new();
    let mut gt_drops = Vec::new();
    for p in pairs {
        let Some(first) = p.events.iter().min_by_key(|e| e.t_event) else { continue };
        if first.event_type != EventType::CollisionStatic || first.subject_id != p.subject_id {
            continue;
        }
        let (Some(tc), Some(si)) = (p.t_c, p.agents.iter().position(|a| a.agent_id == p.subject_id)) else {
            continue;
        };
        let pred = rectify_pair(model, p).expect("rectify");
        let v = speed_profile(&pred[si].to_2d().points, DT);
        let vg = speed_profile(&p.targets[si].to_2d().points, DT);
        if let (Some(d), Some(dg)) = (collision_drop(&v, tc), collision_drop(&vg, tc)) {
            pred_drops.push(d);
            gt_drops.push(dg);
        }
    }
    let mean = pred_drops.iter().sum::<f64>() / pred_drops.len().max(1) as f64;
    (mean, gt_drops)
}

const DT: f64 = 1.0 / 12.0;

fn main() {
    let mut suite = Suite { results: Vec::new() };

    weight_exactness(&mut suite);
    corruption_invariants(&mut suite);
    geometry_oracle(&mut suite);
    gradient_checks(&mut suite);
    trained_criteria(&mut suite);
    determinism(&mut suite);

    suite.results.sort_by_key(|o| o.id);
    let failed: Vec<usize> = suite.results.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    println!(
        "acceptance: {} of {} criteria passed",
        suite.results.len() - failed.len(),
        suite.results.len()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

/// Direct re-evaluation of the decaying event schedule.
fn closed_form(t: usize, te: usize, t_len: usize, lambda: f64) -> f64 {
    let s = if te >= 1 { te - 1 } else { 0 };
    let e = if te + 10 < t_len { te + 10 } else { t_len - 1 };
    if t < s || t > e {
        return 1.0;
    }
    if e == s {
        return lambda;
    }
    lambda.powf((e - t) as f64 / (e - s) as f64)
}

fn clip_with(events: Vec<EventRecord>, n_agents: usize, t_len: usize, involved: std::collections::BTreeSet<u32>) -> Clip {
    let log = common::synthetic_log(t_len, &(0..n_agents as u32).collect::<Vec<_>>(), |i, t| (t as f64, 4.0 * i as f64), vec![], Some(0));
    Clip {
        source: ClipSource::PhysicsRich,
        start_frame: 0,
        frames: log.frames.clone(),
        events,
        involved_ids: involved,
        subject_id: 0,
        ego_id: 0,
        agents: log.agents.clone(),
        map: log.map.clone(),
        dt: DT,
        seed: 0,
    }
}

fn weight_exactness(suite: &mut Suite) {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut violations = Vec::new();
    let mut worst_rel = 0.0f64;
    let t_len = 36;
    for case in 0..1000 {
        let lambda_event = if case % 10 == 0 { 1.0 } else { rng.random_range(1.0..20.0) };
        let lambda_agent = rng.random_range(1.0..20.0);
        let spec = WeightSpec {
            lambda_event,
            lambda_agent,
            ..WeightSpec::default()
        };
        let n_events = rng.random_range(1..=4);
        let frames: Vec<usize> = (0..n_events).map(|_| rng.random_range(0..t_len)).collect();
        let n_agents = rng.random_range(1..=6);
        let involved: std::collections::BTreeSet<u32> = (0..n_agents as u32).filter(|_| rng.random_bool(0.4)).collect();
        let events = frames
            .iter()
            .map(|&t_event| EventRecord {
                event_type: EventType::CollisionStatic,
                t_event,
                subject_id: 0,
                partner_id: None,
            })
            .collect();
        let clip = clip_with(events, n_agents, t_len, involved.clone());
        let w = compute_weights(&clip, &spec).expect("weights");
        let combined = temporal_weights(&frames, t_len, &spec);

        for &te in &frames {
            let single = temporal_weights(&[te], t_len, &spec);
            let s = if te >= 1 { te - 1 } else { 0 };
            let e = (te + 10).min(t_len - 1);
            if single[s] != lambda_event {
                violations.push(format!("case {case}: start {} != {lambda_event}", single[s]));
            }
            if e > s && single[e] != 1.0 {
                violations.push(format!("case {case}: end {} != 1", single[e]));
            }
            for t in 0..t_len {
                let want = closed_form(t, te, t_len, lambda_event);
                let rel = (single[t] - want).abs() / want;
                worst_rel = worst_rel.max(rel);
                if rel > 1e-12 {
                    violations.push(format!("case {case}: t {t} got {} want {want}", single[t]));
                }
                if lambda_event > 1.0 && t >= s && t < e && single[t + 1] >= single[t] {
                    violations.push(format!("case {case}: not decreasing at {t}"));
                }
            }
        }
        for t in 0..t_len {
            let max = frames.iter().map(|&te| closed_form(t, te, t_len, lambda_event)).fold(1.0, f64::max);
            if (combined[t] - max).abs() > 1e-12 * max {
                violations.push(format!("case {case}: overlap at {t}"));
            }
            for i in 0..n_agents {
                let factor = if involved.contains(&(i as u32)) { lambda_agent } else { 1.0 };
                if w[[i, t]] != combined[t] * factor {
                    violations.push(format!("case {case}: row {i} t {t}"));
                }
            }
        }
    }
    suite.record(
        6,
        "weight-formula exactness",
        violations.is_empty(),
        format!(
            "1000 random configurations, worst relative deviation {worst_rel:.1e}, {} violations{}",
            violations.len(),
            violations.first().map(|v| format!(" (first: {v})")).unwrap_or_default()
        ),
        started,
    );
}

fn corruption_invariants(suite: &mut Suite) {
    let started = Instant::now();
    let cfg = base_config();
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    let mut prefix_breaks = 0usize;
    let mut index = 0usize;
    while checked < 1000 && index < 5000 {
        let log = generate_log(&cfg.rollout, cfg.seed.wrapping_add(1), index, 0).expect("rollout");
        index += 1;
        for clip in extract_clips(&log) {
            if checked >= 1000 {
                break;
            }
            let Ok(corrupted) = corrupt_counterfactual(&clip) else { continue };
            let t_c = clip.corruption_frame().expect("corruptible clip has t_c");
            for (gt, inp) in clip.ground_truth_2d().iter().zip(&corrupted) {
                for t in 0..t_c {
                    if gt.points[t].x.to_bits() != inp.points[t].x.to_bits() || gt.points[t].y.to_bits() != inp.points[t].y.to_bits() {
                        prefix_breaks += 1;
                    }
                }
                let v = gt.points[t_c - 1] - gt.points[t_c - 2];
                for t in t_c..inp.points.len() {
                    let d = inp.points[t] - inp.points[t - 1];
                    worst = worst.max((d.x - v.x).abs()).max((d.y - v.y).abs());
                }
            }
            checked += 1;
        }
    }
    suite.record(
        7,
        "corruption invariants",
        checked >= 1000 && prefix_breaks == 0 && worst <= 1e-9,
        format!("{checked} seeded clips from {index} rollouts, {prefix_breaks} prefix mismatches, worst displacement deviation {worst:.1e} (limit 1e-9)"),
        started,
    );
}

fn geometry_oracle(suite: &mut Suite) {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut agree = 0usize;
    let mut overlaps = 0usize;
    let n = 10_000;
    for _ in 0..n {
        let rect = |rng: &mut ChaCha8Rng| {
            oriented_rect(
                Vec2::new(rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)),
                rng.random_range(-PI..PI),
                rng.random_range(0.2..8.0),
                rng.random_range(0.2..4.0),
            )
        };
        let a = rect(&mut rng);
        let b = rect(&mut rng);
        let got = obb_overlap(&a, &b).expect("four corners");
        let want = common::polygons_intersect(&a, &b);
        overlaps += want as usize;
        agree += (got == want) as usize;
    }
    suite.record(
        8,
        "geometry oracle",
        agree == n,
        format!("{agree}/{n} rectangle pairs agree with the brute-force oracle ({overlaps} overlapping)"),
        started,
    );
}

fn tiny_rectifier(head: HeadKind) -> RectifierConfig {
    RectifierConfig {
        token_dim: 8,
        num_blocks: 1,
        num_heads: 2,
        deformable_samples: 2,
        num_anchors: 3,
        tcn_layers: 1,
        time_dim: 4,
        head_hidden: 8,
        horizon: 6,
        pe_bands: 2,
        map_points: 4,
        map_piece_len: 15.0,
        head,
        seed: 3,
        ..RectifierConfig::default()
    }
}

fn rectifier_gradient_error(head: HeadKind) -> f64 {
    let mut model = RectifierModel::new(tiny_rectifier(head)).expect("model");
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for v in model.params.values.iter_mut() {
        v.mapv_inplace(|x| x + rng.random_range(-0.2..0.2));
    }
    let map = MapGraph::new(
        vec![Lane {
            centerline: vec![Vec2::new(-60.0, 0.0), Vec2::new(60.0, 0.0)],
            width: 7.0,
            lane_type: LaneType::Drivable,
        }],
        vec![Obstacle {
            center: Vec2::new(4.0, 4.0),
            yaw: 0.3,
            length: 1.0,
            width: 1.0,
        }],
    )
    .expect("map");
    let path = |id: u32, f: &dyn Fn(f64) -> (f64, f64)| Trajectory2D {
        agent_id: id,
        points: (0..6)
            .map(|t| {
                let (x, y) = f(t as f64);
                Vec2::new(x, y)
            })
            .collect(),
    };
    let trajs = vec![path(1, &|t| (-3.0 + 1.1 * t, 0.4 + 0.15 * t * t)), path(2, &|t| (6.0 - 0.8 * t, -1.5 + 0.3 * t))];
    let mut env = env_for(&map, &trajs, 0.5).expect("env");
    let mut raster = (*env.raster).clone();
    raster.data.iter_mut().for_each(|v| *v += rng.random_range(-1.0..1.0));
    env.raster = std::sync::Arc::new(raster);
    let gt: Vec<Trajectory6DoF> = trajs
        .iter()
        .map(|tr| Trajectory6DoF {
            agent_id: tr.agent_id,
            poses: tr
                .points
                .iter()
                .map(|p| Pose6DoF {
                    x: p.x + rng.random_range(-1.0..1.0),
                    y: p.y + rng.random_range(-1.0..1.0),
                    z: rng.random_range(-0.3..0.3),
                    roll: rng.random_range(-0.2..0.2),
                    pitch: rng.random_range(-0.2..0.2),
                    yaw: rng.random_range(-PI..PI),
                })
                .collect(),
        })
        .collect();
    let w = Array2::from_shape_fn((2, 6), |_| rng.random_range(1.0..10.0));
    let eval = |m: &RectifierModel| {
        let mut g = Graph::new();
        let out = m.forward(&mut g, &SceneInput::new(&trajs, &map, &env)).expect("forward");
        let l = RectifierModel::loss_node(&mut g, out.pred, &gt, &w);
        (g, l)
    };
    let (g, l) = eval(&model);
    let analytic = g.backward(l, &model.params).expect("backward");
    let errs = common::gradient_check(&model.params, &analytic, 1e-6, |store| {
        let mut m = model.clone();
        m.params = store.clone();
        let (g, l) = eval(&m);
        g.scalar(l)
    });
    errs[0].1
}

fn flow_gradient_error() -> f64 {
    let cfg = FlowConfig {
        frames: 2,
        height: 4,
        width: 4,
        n_tags: 2,
        hidden: 4,
        seed: 11,
        ..FlowConfig::default()
    };
    let mut model = FlowModel::new(cfg.clone()).expect("flow model");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for v in model.params.values.iter_mut() {
        v.mapv_inplace(|x| x + 0.1 * (rng.random::<f64>() - 0.5));
    }
    let conds: Vec<FlowCondition> = (0..2)
        .map(|tag| {
            let layout = LatentGrid::from_vec(2, 4, 4, (0..32).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()).expect("grid");
            FlowCondition {
                init_frame: layout.frame(0).to_vec(),
                layout,
                tag,
            }
        })
        .collect();
    let batch: Vec<_> = conds
        .iter()
        .map(|c| (LatentGrid::noise(2, 4, 4, &mut rng), &c.layout, rng.random_range(0.05..0.95), c))
        .collect();
    let (_, grads) = model.loss_grad(&batch).expect("flow gradients");
    let errs = common::gradient_check(&model.params, &grads, 1e-6, |p| {
        let mut m = model.clone();
        m.params = p.clone();
        m.batch_loss(&batch).expect("flow loss")
    });
    errs[0].1
}

fn gradient_checks(suite: &mut Suite) {
    let started = Instant::now();
    let tw = rectifier_gradient_error(HeadKind::TimeWise);
    let mlp = rectifier_gradient_error(HeadKind::Mlp);
    let flow = flow_gradient_error();
    let worst = tw.max(mlp).max(flow);
    suite.record(
        9,
        "gradient checks",
        worst <= 1e-4,
        format!("worst relative error: rectifier time-wise {tw:.1e}, rectifier MLP head {mlp:.1e}, flow {flow:.1e} (limit 1e-4)"),
        started,
    );
}

fn trained_criteria(suite: &mut Suite) {
    let cfg = base_config();
    let started = Instant::now();
    let logs = generate_logs(&cfg.rollout, cfg.seed, cfg.n_rollouts_nominal, cfg.n_rollouts_rich).expect("rollouts");
    let named: Vec<(String, SceneLog)> = logs.into_iter().enumerate().map(|(i, l)| (log_file_name(i), l)).collect();
    println!(
        "dataset: {} nominal and {} physics-rich rollouts generated in {:.1}s",
        cfg.n_rollouts_nominal,
        cfg.n_rollouts_rich,
        started.elapsed().as_secs_f64()
    );

    dataset_shift(suite, &cfg, &named);

    let started = Instant::now();
    let set = make_pairs(&named, &cfg);
    let val = set.split(Split::Val);
    let (rich_val, nominal_val) = (rich_of(&val), nominal_of(&val));
    let model = train_on(&cfg, &set);
    let rich = evaluate(&model, &rich_val, &cfg).expect("evaluation").report;
    let nominal = evaluate(&model, &nominal_val, &cfg).expect("evaluation").report;
    println!(
        "main rectifier: {} training pairs, trained and scored in {:.1}s",
        set.split(Split::Train).len(),
        started.elapsed().as_secs_f64()
    );
    let gain = 1.0 - rich.l2_6dof / rich.l2_6dof_baseline;
    suite.record(
        1,
        "rectification gain",
        rich.clip_count >= 100 && gain >= 0.25,
        format!(
            "{} held-out physics-rich clips, L2 {:.4} vs lifted baseline {:.4}, {:.1}% lower (need >= 25%)",
            rich.clip_count,
            rich.l2_6dof,
            rich.l2_6dof_baseline,
            100.0 * gain
        ),
        started,
    );
    suite.record(
        2,
        "nominal preservation",
        nominal.clip_count >= 100 && nominal.l2_6dof <= nominal.l2_6dof_baseline + 0.05,
        format!(
            "{} held-out nominal clips, L2 {:.4} vs limit {:.4} (baseline {:.4} + 0.05)",
            nominal.clip_count,
            nominal.l2_6dof,
            nominal.l2_6dof_baseline + 0.05,
            nominal.l2_6dof_baseline
        ),
        started,
    );

    let started = Instant::now();
    let mut mlp_cfg = cfg.clone();
    mlp_cfg.rectifier.head = HeadKind::Mlp;
    let mlp = train_on(&mlp_cfg, &set);
    let (tw_drop, gt_drops) = static_drops(&model, &rich_val);
    let (mlp_drop, _) = static_drops(&mlp, &rich_val);
    let gt_exact = gt_drops.iter().all(|d| (d - 1.0).abs() <= 1e-9);
    suite.record(
        4,
        "collision-dynamics sharpness",
        !gt_drops.is_empty() && tw_drop > mlp_drop && gt_exact,
        format!(
            "{} static-collision clips, mean drop time-wise {tw_drop:.3} vs MLP head {mlp_drop:.3}, ground truth drop 1.0 on {}/{} clips",
            gt_drops.len(),
            gt_drops.iter().filter(|d| (*d - 1.0).abs() <= 1e-9).count(),
            gt_drops.len()
        ),
        started,
    );

    let started = Instant::now();
    let main_rich = rich.l2_6dof;
    let ablate = |lambda_event: f64, lambda_agent: f64| -> f64 {
        if lambda_event == cfg.weights.lambda_event && lambda_agent == cfg.weights.lambda_agent {
            return main_rich;
        }
        let mut c = cfg.clone();
        c.weights.lambda_event = lambda_event;
        c.weights.lambda_agent = lambda_agent;
        let s = make_pairs(&named, &c);
        let m = train_on(&c, &s);
        rich_l2(&m, &s, &c)
    };
    let flat = |vals: &[(f64, f64)]| {
        let best = vals.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
        let ratio = vals.iter().map(|v| v.1).fold(0.0, f64::max) / best;
        (ratio, ratio <= 1.5)
    };
    let event_sweep: Vec<(f64, f64)> = [1.0, 5.0, 10.0].iter().map(|&le| (le, ablate(le, 5.0))).collect();
    let agent_sweep: Vec<(f64, f64)> = [1.0, 10.0, 20.0].iter().map(|&la| (la, ablate(10.0, la))).collect();
    let (re, ok_e) = flat(&event_sweep);
    let (ra, ok_a) = flat(&agent_sweep);
    let show = |v: &[(f64, f64)]| v.iter().map(|(l, x)| format!("{l}: {x:.4}")).collect::<Vec<_>>().join(", ");
    suite.record(
        3,
        "lambda ablation flatness",
        ok_e && ok_a,
        format!(
            "rich L2 by lambda_event (lambda_agent 5) [{}] worst/best {re:.2}; by lambda_agent (lambda_event 10) [{}] worst/best {ra:.2} (limit 1.5)",
            show(&event_sweep),
            show(&agent_sweep)
        ),
        started,
    );

    flow_learning(suite, &cfg, &set);
}

fn dataset_shift(suite: &mut Suite, cfg: &PipelineConfig, named: &[(String, SceneLog)]) {
    let started = Instant::now();
    let pools = dataset_accel(named).expect("accelerations");
    let stats = pools.stats(cfg.accel_bins, cfg.accel_max);
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).expect("output dir");
    let csv_path = dir.join("accel_hist.csv");
    let csv = accel_hist_csv(&stats);
    std::fs::write(&csv_path, &csv).expect("histogram csv");
    let written = std::fs::read_to_string(&csv_path).map(|s| s.lines().count()).unwrap_or(0);
    let median = |name: &str| stats.pools.iter().find(|p| p.pool == name).map(|p| p.median_max_accel).unwrap_or(f64::NAN);
    let (nominal, rich) = (median("nominal"), median("physics_rich"));
    let ratio = rich / nominal;
    suite.record(
        5,
        "dataset shift",
        cfg.n_rollouts_nominal >= 200 && cfg.n_rollouts_rich >= 200 && ratio >= 1.5 && written == cfg.accel_bins + 1,
        format!(
            "{} nominal / {} physics-rich rollouts ({} / {} clips), median max accel {nominal:.2} vs {rich:.2} m/s^2, ratio {ratio:.2} (need >= 1.5), histogram CSV {} ({written} lines)",
            cfg.n_rollouts_nominal,
            cfg.n_rollouts_rich,
            pools.nominal.len(),
            pools.physics_rich.len(),
            csv_path.display()
        ),
        started,
    );
}

fn flow_learning(suite: &mut Suite, cfg: &PipelineConfig, set: &PairSet) {
    let started = Instant::now();
    let train_s = flow_samples(&set.split(Split::Train), &cfg.flow).expect("flow samples");
    let val_s = flow_samples(&set.split(Split::Val), &cfg.flow).expect("flow samples");
    let (_, _, report, _) = run_flow(&cfg.flow, &train_s, &val_s).expect("flow run");
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    for s in &val_s {
        let t = &s.target;
        let z0 = LatentGrid::noise(t.frames, t.height, t.width, &mut rng);
        let oracle = ExactOracle {
            z0: z0.clone(),
            z1: t.clone(),
        };
        let out = flow_toy::sample_from(&oracle, z0, &s.cond, 1).expect("oracle sampling");
        for (a, b) in out.values.iter().zip(&t.values) {
            worst = worst.max((a - b).abs());
        }
    }
    let ratio = report.val_loss / report.zero_predictor_loss;
    suite.record(
        10,
        "flow-toy learning signal",
        ratio <= 0.5 && worst <= 1e-12,
        format!(
            "val fm_loss {:.4} vs zero predictor {:.4}, ratio {ratio:.3} (need <= 0.5); one-step oracle max deviation from z1 {worst:.1e} over {} samples",
            report.val_loss,
            report.zero_predictor_loss,
            val_s.len()
        ),
        started,
    );
}

const DETERMINISM_CONFIG: &str = r#"
seed = 5
val_every = 3
rectifier.token_dim = 16
rectifier.num_blocks = 1
rectifier.num_heads = 2
rectifier.head_hidden = 16
rectifier.batch_size = 8
rectifier.steps = 60
rectifier.env_resolution = 1.0
"#;

fn pipeline_once(root: &Path) -> Option<Vec<u8>> {
    std::fs::create_dir_all(root).ok()?;
    let cfg = root.join("pipeline.toml");
    std::fs::write(&cfg, DETERMINISM_CONFIG).ok()?;
    let (c, d, o) = (cfg.to_str()?, root.join("data"), root.join("out"));
    let (d, o) = (d.to_str()?, o.to_str()?);
    let steps: [&[&str]; 4] = [
        &["gen-data", "--config", c, "--n-nominal", "40", "--n-rich", "60", "--out", d],
        &["make-pairs", "--config", c, "--data", d, "--out", o],
        &["train-rectifier", "--config", c, "--out", o],
        &["eval", "--config", c, "--out", o],
    ];
    for args in steps {
        let mut argv = vec!["phygen"];
        argv.extend_from_slice(args);
        if run_cli(argv) != EXIT_OK {
            return None;
        }
    }
    std::fs::read(root.join("out/report.json")).ok()
}

fn determinism(suite: &mut Suite) {
    let started = Instant::now();
    let dir = tempfile::tempdir().expect("tempdir");
    let a = pipeline_once(&dir.path().join("a"));
    let b = pipeline_once(&dir.path().join("b"));
    let (pass, detail) = match (a, b) {
        (Some(a), Some(b)) => (
            a == b,
            format!("two full CLI pipeline runs, report.json {} bytes, identical: {}", a.len(), a == b),
        ),
        _ => (false, "pipeline run failed".to_string()),
    };
    suite.record(11, "end-to-end determinism", pass, detail, started);
}
