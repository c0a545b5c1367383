//! End-to-end stages shared by the command line and the acceptance suite:
//! seeded log generation, pair manifests, evaluation and the flow demo.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datapipe::{build_pair, extract_clips, read_log, write_log, ClipSource, TrainingPair, WeightSpec};
use crate::error::{Error, Result};
use crate::evalkit::{
    ctrl_err, l2_6dof, max_accel_of, offroad_rate, penetration_rate, speed_profile, AccelStats, EvalResults,
    MetricReport, PoolL2, Units, VelocityProfile,
};
use crate::flow_toy::{self, EvalDraws, FlowConfig, FlowSample};
use crate::rectifier::{lift_baseline, RectifierConfig, RectifierModel, SceneInput};
use crate::scenario_gen::{simulate_scene, RolloutConfig, SceneKind};
use crate::scene::{SceneLog, SCHEMA_VERSION};
use crate::world_sim::EventType;

pub const REPORT_SCHEMA_VERSION: &str = "1";
const MAX_ATTEMPTS: u64 = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Master seed for rollouts; `--seed` also applies it to both models.
    pub seed: u64,
    pub n_rollouts_nominal: usize,
    pub n_rollouts_rich: usize,
    /// Every `val_every`-th log is held out.
    pub val_every: usize,
    pub n_profiles: usize,
    pub accel_bins: usize,
    pub accel_max: f64,
    pub rollout: RolloutConfig,
    pub weights: WeightSpec,
    pub rectifier: RectifierConfig,
    pub flow: FlowConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            seed: 0,
            n_rollouts_nominal: 200,
            n_rollouts_rich: 320,
            val_every: 3,
            n_profiles: 4,
            accel_bins: 24,
            accel_max: 120.0,
            rollout: RolloutConfig::default(),
            weights: WeightSpec::default(),
            rectifier: RectifierConfig::default(),
            flow: FlowConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.val_every < 2 {
            return Err(Error::Config("val_every must be at least 2".into()));
        }
        if self.accel_bins == 0 || !(self.accel_max > 0.0 && self.accel_max.is_finite()) {
            return Err(Error::Config("accel histogram needs bins and a positive range".into()));
        }
        self.rollout.validate()?;
        self.weights.validate()?;
        self.rectifier.validate()?;
        self.flow.validate()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.rectifier.seed = seed;
        self.flow.seed = seed;
        self
    }

    pub fn is_val_log(&self, index: usize) -> bool {
        index % self.val_every == self.val_every - 1
    }
}

/// Scene kind of log `index`: nominal logs first, then physics-rich logs
/// alternating ego and adversary perturbations.
pub fn log_kind(index: usize, n_nominal: usize) -> SceneKind {
    if index < n_nominal {
        SceneKind::Nominal
    } else if (index - n_nominal) % 2 == 0 {
        SceneKind::Ego
    } else {
        SceneKind::Adv
    }
}

/// Rollout seed for a log index and retry attempt.
pub fn log_seed(master: u64, index: usize, attempt: u64) -> u64 {
    master
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((index as u64) << 8)
        .wrapping_add(attempt)
}

/// Simulates log `index`, retrying with the next seed when spawning or the
/// route makes the scenario unusable.
pub fn generate_log(rollout: &RolloutConfig, master: u64, index: usize, n_nominal: usize) -> Result<SceneLog> {
    let kind = log_kind(index, n_nominal);
    let mut last = None;
    for attempt in 0..MAX_ATTEMPTS {
        match simulate_scene(rollout, kind, log_seed(master, index, attempt)) {
            Ok(log) => return Ok(log),
            Err(e @ (Error::ScenarioSkip(_) | Error::Input(_))) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::ScenarioSkip(format!("log {index}"))))
}

/// Generates `n_nominal + n_rich` logs in parallel; results are ordered by
/// index and independent of the worker count.
pub fn generate_logs(rollout: &RolloutConfig, master: u64, n_nominal: usize, n_rich: usize) -> Result<Vec<SceneLog>> {
    (0..n_nominal + n_rich)
        .into_par_iter()
        .map(|i| generate_log(rollout, master, i, n_nominal))
        .collect()
}

pub fn log_file_name(index: usize) -> String {
    format!("log_{index:05}.jsonl")
}

pub fn write_logs(logs: &[SceneLog], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    logs.iter()
        .enumerate()
        .map(|(i, log)| {
            let p = dir.join(log_file_name(i));
            write_log(log, &p)?;
            Ok(p)
        })
        .collect()
}

/// Log files of a data directory in name order.
pub fn list_logs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("log_") && n.ends_with(".jsonl"))
        })
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Error::Input(format!("no log_*.jsonl files in {}", dir.display())));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// Where a pair comes from; enough to rebuild it from the logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub log: String,
    pub log_index: usize,
    pub clip_index: usize,
    pub source: ClipSource,
    pub split: Split,
    pub subject_id: u32,
    pub t_c: Option<usize>,
    pub involved_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub schema_version: String,
    pub data_dir: PathBuf,
    pub env_resolution: f64,
    pub weights: WeightSpec,
    pub n_pairs: usize,
}

#[derive(Debug, Clone)]
pub struct PairSet {
    pub records: Vec<PairRecord>,
    pub pairs: Vec<TrainingPair>,
}

impl PairSet {
    pub fn split(&self, split: Split) -> Vec<TrainingPair> {
        self.records
            .iter()
            .zip(&self.pairs)
            .filter(|(r, _)| r.split == split)
            .map(|(_, p)| p.clone())
            .collect()
    }
}

/// Pairs of one log. Clips whose corruption cannot be built are skipped.
pub fn pairs_of_log(log: &SceneLog, weights: &WeightSpec, env_resolution: f64) -> Vec<(usize, TrainingPair)> {
    extract_clips(log)
        .iter()
        .enumerate()
        .filter_map(|(k, c)| build_pair(c, weights, env_resolution).ok().map(|p| (k, p)))
        .collect()
}

/// Extracts, corrupts and weights every clip of the given logs.
pub fn make_pairs(logs: &[(String, SceneLog)], cfg: &PipelineConfig) -> PairSet {
    let mut records = Vec::new();
    let mut pairs = Vec::new();
    for (i, (name, log)) in logs.iter().enumerate() {
        let split = if cfg.is_val_log(i) { Split::Val } else { Split::Train };
        for (k, p) in pairs_of_log(log, &cfg.weights, cfg.rectifier.env_resolution) {
            records.push(PairRecord {
                log: name.clone(),
                log_index: i,
                clip_index: k,
                source: p.source,
                split,
                subject_id: p.subject_id,
                t_c: p.t_c,
                involved_ids: p.involved_ids.iter().copied().collect(),
            });
            pairs.push(p);
        }
    }
    PairSet { records, pairs }
}

pub fn read_logs(dir: &Path) -> Result<Vec<(String, SceneLog)>> {
    list_logs(dir)?
        .into_iter()
        .map(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            Ok((name, read_log(&p)?))
        })
        .collect()
}

pub fn write_manifest(set: &PairSet, cfg: &PipelineConfig, data_dir: &Path, path: &Path) -> Result<()> {
    let header = ManifestHeader {
        schema_version: SCHEMA_VERSION.to_string(),
        data_dir: data_dir.to_path_buf(),
        env_resolution: cfg.rectifier.env_resolution,
        weights: cfg.weights,
        n_pairs: set.records.len(),
    };
    let mut buf = Vec::new();
    let js = |e: serde_json::Error| Error::Input(e.to_string());
    serde_json::to_writer(&mut buf, &header).map_err(js)?;
    buf.push(b'\n');
    for r in &set.records {
        serde_json::to_writer(&mut buf, r).map_err(js)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads a manifest and rebuilds its pairs from the referenced logs.
pub fn load_manifest(path: &Path) -> Result<(ManifestHeader, PairSet)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(f).lines();
    let loc = |k: usize| format!("{}: line {}", path.display(), k + 1);
    let first = lines
        .next()
        .ok_or_else(|| Error::parse(loc(0), "empty manifest"))?
        .map_err(|e| Error::io(path, e))?;
    let header: ManifestHeader = serde_json::from_str(&first).map_err(|e| Error::parse(loc(0), e.to_string()))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::parse(
            loc(0),
            format!("unsupported manifest schema version {}", header.schema_version),
        ));
    }
    let mut records = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        records.push(serde_json::from_str::<PairRecord>(&line).map_err(|e| Error::parse(loc(k + 1), e.to_string()))?);
    }
    if records.len() != header.n_pairs {
        return Err(Error::parse(
            path.display().to_string(),
            format!("manifest declares {} pairs, found {}", header.n_pairs, records.len()),
        ));
    }
    let mut pairs = Vec::with_capacity(records.len());
    let mut cache: Option<(String, Vec<(usize, TrainingPair)>)> = None;
    for r in &records {
        if cache.as_ref().is_none_or(|(n, _)| *n != r.log) {
            let log = read_log(&header.data_dir.join(&r.log))?;
            cache = Some((r.log.clone(), pairs_of_log(&log, &header.weights, header.env_resolution)));
        }
        let (_, built) = cache.as_ref().expect("filled above");
        let p = built
            .iter()
            .find(|(k, _)| *k == r.clip_index)
            .map(|(_, p)| p.clone())
            .ok_or_else(|| Error::Input(format!("{}: clip {} no longer builds a pair", r.log, r.clip_index)))?;
        pairs.push(p);
    }
    Ok((header, PairSet { records, pairs }))
}

/// Agents scored by the L2 metric: the involved set, or the subject alone
/// for event-free clips.
pub fn scored_ids(pair: &TrainingPair) -> BTreeSet<u32> {
    if pair.involved_ids.is_empty() {
        [pair.subject_id].into()
    } else {
        pair.involved_ids.clone()
    }
}

pub fn rectify_pair(model: &RectifierModel, pair: &TrainingPair) -> Result<Vec<crate::datapipe::Trajectory6DoF>> {
    model.rectify(&SceneInput::new(&pair.inputs, &pair.map, &pair.env))
}

fn pool_name(s: ClipSource) -> &'static str {
    match s {
        ClipSource::Nominal => "nominal",
        ClipSource::PhysicsRich => "physics_rich",
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Scores a model against the lifted baseline on `pairs` and collects the
/// per-pool acceleration histogram and velocity profiles of the first
/// static-collision clips.
pub fn evaluate(model: &RectifierModel, pairs: &[TrainingPair], cfg: &PipelineConfig) -> Result<EvalResults> {
    if pairs.is_empty() {
        return Err(Error::Input("no evaluation pairs".into()));
    }
    let mut l2 = Vec::new();
    let mut l2_base = Vec::new();
    let mut ctrl = Vec::new();
    let mut pen = Vec::new();
    let mut pen_in = Vec::new();
    let mut off = Vec::new();
    let mut accel: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut profiles = Vec::new();
    let mut per_pool: [(Vec<f64>, Vec<f64>); 2] = Default::default();
    for p in pairs {
        let pred = rectify_pair(model, p)?;
        let base = lift_baseline(&p.inputs)?;
        let ids = scored_ids(p);
        let (a, b) = (l2_6dof(&pred, &p.targets, &ids)?, l2_6dof(&base, &p.targets, &ids)?);
        l2.push(a);
        l2_base.push(b);
        let pool = usize::from(p.source == ClipSource::PhysicsRich);
        per_pool[pool].0.push(a);
        per_pool[pool].1.push(b);
        let s = p
            .agents
            .iter()
            .position(|x| x.agent_id == p.subject_id)
            .ok_or_else(|| Error::Input("subject missing from pair".into()))?;
        ctrl.push(ctrl_err(&pred[s], &p.targets[s])?);
        let extents: Vec<_> = p.agents.iter().map(|a| a.extent).collect();
        pen.push(penetration_rate(&pred, &extents, &p.map)?);
        pen_in.push(penetration_rate(&base, &extents, &p.map)?);
        off.push(offroad_rate(&pred, &extents, &p.map)?);
        let dt = 1.0 / f64::from(cfg.rollout.rate_hz);
        let gt2 = p.targets[s].to_2d();
        accel[pool].push(max_accel_of(&gt2.points, dt)?);
        let static_hit = p
            .events
            .iter()
            .any(|e| e.event_type == EventType::CollisionStatic && e.subject_id == p.subject_id);
        if profiles.len() < cfg.n_profiles && static_hit && p.t_c.is_some() {
            profiles.push(VelocityProfile {
                name: format!("clip_{:03}", profiles.len()),
                t_event: p.t_c,
                gt: speed_profile(&gt2.points, dt),
                corrupted: speed_profile(&p.inputs[s].points, dt),
                rectified: speed_profile(&pred[s].to_2d().points, dt),
            });
        }
    }
    let accel_stats = AccelStats::from_pools(
        &[("nominal", accel[0].clone()), ("physics_rich", accel[1].clone())],
        cfg.accel_bins,
        cfg.accel_max,
    );
    let by_pool = [ClipSource::Nominal, ClipSource::PhysicsRich]
        .iter()
        .enumerate()
        .filter(|(i, _)| !per_pool[*i].0.is_empty())
        .map(|(i, s)| PoolL2 {
            pool: pool_name(*s).to_string(),
            clip_count: per_pool[i].0.len(),
            l2_6dof: mean(&per_pool[i].0),
            l2_6dof_baseline: mean(&per_pool[i].1),
        })
        .collect();
    let report = MetricReport {
        schema_version: REPORT_SCHEMA_VERSION.to_string(),
        l2_6dof: mean(&l2),
        l2_6dof_baseline: mean(&l2_base),
        ctrl_err: mean(&ctrl),
        penetration_rate: mean(&pen),
        penetration_rate_input: mean(&pen_in),
        offroad_rate: mean(&off),
        accel_stats,
        by_pool,
        clip_count: pairs.len(),
        units: Units::default(),
    };
    report.validate()?;
    Ok(EvalResults { report, profiles })
}

/// Per-clip maximum subject acceleration of each pool, from raw logs.
pub fn dataset_accel(logs: &[(String, SceneLog)]) -> Result<AccelPools> {
    let mut pools = AccelPools::default();
    for (_, log) in logs {
        for c in extract_clips(log) {
            let v = crate::evalkit::max_accel(&c)?;
            match c.source {
                ClipSource::Nominal => pools.nominal.push(v),
                ClipSource::PhysicsRich => pools.physics_rich.push(v),
            }
        }
    }
    Ok(pools)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AccelPools {
    pub nominal: Vec<f64>,
    pub physics_rich: Vec<f64>,
}

impl AccelPools {
    pub fn stats(&self, bins: usize, max_value: f64) -> AccelStats {
        AccelStats::from_pools(
            &[
                ("nominal", self.nominal.clone()),
                ("physics_rich", self.physics_rich.clone()),
            ],
            bins,
            max_value,
        )
    }
}

/// Summary of a flow-toy run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowReport {
    pub schema_version: String,
    pub train_samples: usize,
    pub val_samples: usize,
    pub val_loss: f64,
    pub zero_predictor_loss: f64,
    pub shuffled_condition_loss: f64,
    /// Held-out conditions whose sample is brighter inside the layout boxes.
    pub region_contrast_fraction: f64,
}

pub fn flow_samples(pairs: &[TrainingPair], cfg: &FlowConfig) -> Result<Vec<FlowSample>> {
    pairs.iter().map(|p| flow_toy::sample_from_pair(p, cfg)).collect()
}

/// Rotates conditions by one position so every sample gets another's.
pub fn rotated_conditions(samples: &[FlowSample]) -> Vec<flow_toy::FlowCondition> {
    (0..samples.len())
        .map(|i| samples[(i + 1) % samples.len()].cond.clone())
        .collect()
}

/// Trains the toy flow model and scores it on the held-out samples.
pub fn run_flow(
    cfg: &FlowConfig,
    train: &[FlowSample],
    val: &[FlowSample],
) -> Result<(flow_toy::FlowModel, Vec<flow_toy::FlowLogRow>, FlowReport, Vec<crate::flow_toy::LatentGrid>)> {
    let (model, log) = flow_toy::train_toy(cfg, train, val)?;
    let draws = EvalDraws::new(val, cfg, cfg.seed ^ 0x0e7a);
    let val_loss = flow_toy::eval_loss(&model, val, &draws, None)?;
    let zero = flow_toy::eval_loss(&flow_toy::ZeroField, val, &draws, None)?;
    let shuffled = flow_toy::eval_loss(&model, val, &draws, Some(&rotated_conditions(val)))?;
    let mut wins = 0;
    let mut counted = 0;
    let mut samples = Vec::with_capacity(val.len());
    for (i, s) in val.iter().enumerate() {
        let z = flow_toy::sample(&model, &s.cond, cfg.sample_steps, cfg.seed.wrapping_add(i as u64))?;
        if let Some((inside, outside)) = flow_toy::region_contrast(&z, &s.cond.layout) {
            counted += 1;
            if inside > outside {
                wins += 1;
            }
        }
        samples.push(z);
    }
    let report = FlowReport {
        schema_version: REPORT_SCHEMA_VERSION.to_string(),
        train_samples: train.len(),
        val_samples: val.len(),
        val_loss,
        zero_predictor_loss: zero,
        shuffled_condition_loss: shuffled,
        region_contrast_fraction: if counted == 0 { 0.0 } else { wins as f64 / counted as f64 },
    };
    Ok((model, log, report, samples))
}
