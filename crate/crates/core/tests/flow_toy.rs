mod common;

use phygen::flow_toy::*;
use phygen::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_cfg() -> FlowConfig {
    FlowConfig {
        frames: 2,
        height: 4,
        width: 4,
        n_tags: 2,
        hidden: 4,
        seed: 11,
        ..FlowConfig::default()
    }
}

fn cond(cfg: &FlowConfig, rng: &mut ChaCha8Rng, tag: usize) -> FlowCondition {
    let (f, h, w) = (cfg.frames, cfg.height, cfg.width);
    let layout = LatentGrid::from_vec(f, h, w, (0..f * h * w).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()).unwrap();
    FlowCondition {
        init_frame: layout.frame(0).to_vec(),
        layout,
        tag,
    }
}

/// Target equals the layout, so the condition is informative.
fn toy_samples(cfg: &FlowConfig, n: usize, seed: u64) -> Vec<FlowSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let c = cond(cfg, &mut rng, i % cfg.n_tags);
            FlowSample {
                target: c.layout.clone(),
                cond: c,
            }
        })
        .collect()
}

#[test]
fn gradients_match_finite_differences() {
    let cfg = tiny_cfg();
    let mut model = FlowModel::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for v in model.params.values.iter_mut() {
        v.mapv_inplace(|x| x + 0.1 * (rng.random::<f64>() - 0.5));
    }
    let samples = toy_samples(&cfg, 2, 9);
    let batch: Vec<_> = samples
        .iter()
        .map(|s| (LatentGrid::noise(2, 4, 4, &mut rng), &s.target, rng.random_range(0.05..0.95), &s.cond))
        .collect();
    let (_, grads) = model.loss_grad(&batch).unwrap();
    let probe = model.clone();
    let report = common::gradient_check(&model.params, &grads, 1e-6, |p| {
        let mut m = probe.clone();
        m.params = p.clone();
        m.batch_loss(&batch).unwrap()
    });
    assert!(report[0].1 <= 1e-4, "{report:?}");
    assert!(grads.iter().all(|g| g.iter().any(|v| *v != 0.0)));
}

#[test]
fn interpolation_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z0 = LatentGrid::noise(2, 3, 3, &mut rng);
    let z1 = LatentGrid::noise(2, 3, 3, &mut rng);
    assert_eq!(interpolate(&z0, &z1, 0.0).unwrap(), z0);
    assert_eq!(interpolate(&z0, &z1, 1.0).unwrap(), z1);
    let mid = interpolate(&z0, &z1, 0.5).unwrap();
    for i in 0..z0.values.len() {
        assert!((mid.values[i] - 0.5 * (z0.values[i] + z1.values[i])).abs() <= 1e-12);
    }
    assert!(matches!(interpolate(&z0, &z1, 1.5), Err(Error::Input(_))));
    assert!(interpolate(&z0, &LatentGrid::zeros(1, 3, 3), 0.5).is_err());
}

proptest! {
    #[test]
    fn interpolation_is_affine_and_symmetric(seed in 0u64..1000, t in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z0 = LatentGrid::noise(1, 3, 4, &mut rng);
        let z1 = LatentGrid::noise(1, 3, 4, &mut rng);
        let a = interpolate(&z0, &z1, t).unwrap();
        let b = interpolate(&z1, &z0, 1.0 - t).unwrap();
        for i in 0..a.values.len() {
            let lin = z0.values[i] + t * (z1.values[i] - z0.values[i]);
            prop_assert!((a.values[i] - lin).abs() <= 1e-12);
            prop_assert!((a.values[i] - b.values[i]).abs() <= 1e-12);
        }
    }
}

#[test]
fn logit_normal_median_and_support() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut draws: Vec<f64> = (0..100_000).map(|_| sample_logit_normal(&mut rng, 0.0, 1.0)).collect();
    assert!(draws.iter().all(|&t| t > 0.0 && t < 1.0));
    draws.sort_by(f64::total_cmp);
    let median = draws[draws.len() / 2];
    assert!((median - 0.5).abs() <= 0.05, "median {median}");
    // an extreme logit must still stay inside the open interval
    let t = sample_logit_normal(&mut rng, 800.0, 1.0);
    assert!(t < 1.0);
}

#[test]
fn loss_vanishes_only_for_the_exact_field() {
    let cfg = tiny_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = cond(&cfg, &mut rng, 0);
    let z0 = LatentGrid::noise(2, 4, 4, &mut rng);
    let z1 = LatentGrid::noise(2, 4, 4, &mut rng);
    let exact = ExactOracle {
        z0: z0.clone(),
        z1: z1.clone(),
    };
    for t in [0.0, 0.3, 1.0] {
        assert_eq!(fm_loss(&exact, &z0, &z1, t, &c).unwrap(), 0.0);
    }
    let mut off = z1.clone();
    off.values[5] += 0.4;
    let wrong = ExactOracle { z0: z0.clone(), z1: off };
    let l = fm_loss(&wrong, &z0, &z1, 0.3, &c).unwrap();
    assert!((l - 0.16 / 32.0).abs() < 1e-12);
    let zero = fm_loss(&ZeroField, &z0, &z1, 0.6, &c).unwrap();
    let expected = z0.values.iter().zip(&z1.values).map(|(a, b)| (b - a).powi(2)).sum::<f64>() / 32.0;
    assert!((zero - expected).abs() < 1e-12);
}

#[test]
fn one_step_oracle_sampling_is_exact() {
    let cfg = tiny_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = cond(&cfg, &mut rng, 1);
    for _ in 0..20 {
        let z0 = LatentGrid::noise(2, 4, 4, &mut rng);
        let z1 = LatentGrid::noise(2, 4, 4, &mut rng);
        let oracle = ExactOracle {
            z0: z0.clone(),
            z1: z1.clone(),
        };
        let out = sample_from(&oracle, z0.clone(), &c, 1).unwrap();
        for (a, b) in out.values.iter().zip(&z1.values) {
            assert!((a - b).abs() <= 1e-12);
        }
        let many = sample_from(&oracle, z0, &c, 7).unwrap();
        for (a, b) in many.values.iter().zip(&z1.values) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
    assert!(matches!(sample_from(&ZeroField, LatentGrid::zeros(2, 4, 4), &c, 0), Err(Error::Config(_))));
}

#[test]
fn seeded_sampling_is_repeatable() {
    let cfg = tiny_cfg();
    let model = FlowModel::new(cfg.clone()).unwrap();
    let c = cond(&cfg, &mut ChaCha8Rng::seed_from_u64(5), 0);
    assert_eq!(sample(&model, &c, 5, 9).unwrap(), sample(&model, &c, 5, 9).unwrap());
    assert_ne!(sample(&model, &c, 5, 9).unwrap(), sample(&model, &c, 5, 10).unwrap());
}

#[test]
fn condition_shape_is_checked() {
    let cfg = tiny_cfg();
    let model = FlowModel::new(cfg.clone()).unwrap();
    let mut c = cond(&cfg, &mut ChaCha8Rng::seed_from_u64(5), 0);
    c.tag = 5;
    assert!(matches!(model.velocity(&LatentGrid::zeros(2, 4, 4), 0.5, &c), Err(Error::Input(_))));
    c.tag = 0;
    assert!(model.velocity(&LatentGrid::zeros(1, 4, 4), 0.5, &c).is_err());
    assert!(FlowModel::new(FlowConfig { hidden: 0, ..cfg }).is_err());
}

fn train_cfg() -> FlowConfig {
    FlowConfig {
        frames: 2,
        height: 6,
        width: 6,
        n_tags: 2,
        hidden: 8,
        steps: 150,
        batch_size: 4,
        eval_every: 50,
        learning_rate: 5e-3,
        seed: 2,
        ..FlowConfig::default()
    }
}

#[test]
fn training_is_deterministic_and_learns() {
    let cfg = train_cfg();
    let train = toy_samples(&cfg, 24, 1);
    let val = toy_samples(&cfg, 8, 2);
    let (m1, log1) = train_toy(&cfg, &train, &val).unwrap();
    let (m2, log2) = train_toy(&cfg, &train, &val).unwrap();
    assert_eq!(log1, log2);
    assert_eq!(m1.params, m2.params);
    let draws = EvalDraws::new(&val, &cfg, 99);
    let trained = eval_loss(&m1, &val, &draws, None).unwrap();
    let zero = eval_loss(&ZeroField, &val, &draws, None).unwrap();
    assert!(trained < zero, "trained {trained} zero {zero}");
    assert_eq!(log1.iter().filter(|r| r.val_loss.is_some()).count(), 3);
    assert!(matches!(train_toy(&cfg, &[], &val), Err(Error::Config(_))));
}

#[test]
fn checkpoint_round_trip() {
    let cfg = tiny_cfg();
    let mut model = FlowModel::new(cfg).unwrap();
    model.params.values[0][[0, 0]] = 0.123456789;
    let bytes = checkpoint_bytes(&model).unwrap();
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
    assert_eq!(checkpoint_from_bytes(&bytes).unwrap(), model);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flow.ckpt");
    save_checkpoint(&model, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), model);
    assert!(checkpoint_from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(checkpoint_from_bytes(&bad).is_err());
}

#[test]
fn grid_exports() {
    let mut g = LatentGrid::zeros(2, 2, 3);
    g.set(1, 0, 2, 0.5);
    g.set(0, 1, 0, -3.0);
    let csv = g.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "frame,row,c0,c1,c2");
    assert_eq!(lines.len(), 1 + 2 * 2);
    assert_eq!(lines[2], "0,1,-3.000000,0.000000,0.000000");
    assert_eq!(lines[3], "1,0,0.000000,0.000000,0.500000");
    let pgm = g.to_pgm();
    assert!(pgm.starts_with("P2\n3 4\n255\n"));
    let px: Vec<u32> = pgm.lines().skip(3).flat_map(|l| l.split(' ').map(|v| v.parse::<u32>().unwrap()).collect::<Vec<_>>()).collect();
    assert_eq!(px.len(), 12);
    assert_eq!(px[3], 0);
    assert_eq!(px[0], 128);
    assert_eq!(px[8], 191);
}

#[test]
fn region_contrast_splits_by_layout() {
    let layout = LatentGrid::from_vec(1, 1, 4, vec![1.0, 1.0, -1.0, -1.0]).unwrap();
    let grid = LatentGrid::from_vec(1, 1, 4, vec![0.8, 0.6, -0.2, 0.0]).unwrap();
    let (i, o) = region_contrast(&grid, &layout).unwrap();
    assert!((i - 0.7).abs() < 1e-12 && (o + 0.1).abs() < 1e-12);
    assert!(region_contrast(&grid, &LatentGrid::filled(1, 1, 4, 1.0)).is_none());
}
