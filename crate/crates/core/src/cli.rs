//! Command-line front end. Exit codes: 0 success, 1 runtime error, 2 usage.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::datapipe::{read_log, Trajectory6DoF};
use crate::error::{Error, Result};
use crate::evalkit::{accel_hist_csv, accel_hist_svg, emit_report};
use crate::flow_toy;
use crate::pipeline::{self, PipelineConfig, Split};
use crate::rectifier::{load_checkpoint, save_checkpoint, train, write_train_log};
use crate::scene::SCHEMA_VERSION;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

const PAIRS_FILE: &str = "pairs.jsonl";
const RECTIFIER_FILE: &str = "rectifier.ckpt";

#[derive(Debug, Parser)]
#[command(name = "phygen", about = "Physics-rich scenario generation and trajectory rectification")]
#[command(disable_version_flag = true)]
struct Cli {
    #[command(flatten)]
    common: Common,
    /// Print schema and tool versions.
    #[arg(long)]
    version: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Args)]
struct Common {
    /// Master seed; falls back to PHYGEN_SEED, then the config file.
    #[arg(long, global = true, env = "PHYGEN_SEED")]
    seed: Option<u64>,
    /// TOML config with dotted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate nominal and physics-rich rollouts into log files.
    GenData {
        /// Total log count, split evenly between nominal and physics-rich.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        n_nominal: Option<usize>,
        #[arg(long)]
        n_rich: Option<usize>,
    },
    /// Extract clips, corrupt them and write the pair manifest.
    MakePairs {
        /// Directory of log files.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the rectifier on the training split of a manifest.
    TrainRectifier {
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Rectify every clip of one log with a trained checkpoint.
    Rectify {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        log: PathBuf,
    },
    /// Score a checkpoint on the held-out split and emit the report.
    Eval {
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Train the toy flow model on rasterized clips and export samples.
    FlowDemo {
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Dataset-shift histogram of per-clip maximum acceleration.
    Plot {
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

pub fn version_text() -> String {
    format!(
        "phygen {}\nlog schema {}\nreport schema {}\ncheckpoint format {}",
        env!("CARGO_PKG_VERSION"),
        SCHEMA_VERSION,
        pipeline::REPORT_SCHEMA_VERSION,
        crate::checkpoint::BLOB_VERSION
    )
}

/// Parses `argv` (program name first) and runs the command.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if cli.version {
        println!("{}", version_text());
        return EXIT_OK;
    }
    let Some(command) = cli.command else {
        eprintln!("error: a subcommand is required\n\nUsage: phygen [OPTIONS] <COMMAND>\nTry 'phygen --help'.");
        return EXIT_USAGE;
    };
    match dispatch(&cli.common, command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| Error::Input(e.to_string()))
}

fn dispatch(common: &Common, command: Command) -> Result<()> {
    let mut cfg = load_config(common)?;
    let out = cfg.out_dir.clone();
    ensure_dir(&out)?;
    let pairs_path = |p: Option<PathBuf>| p.unwrap_or_else(|| out.join(PAIRS_FILE));
    match command {
        Command::GenData { n, n_nominal, n_rich } => {
            let (mut nn, mut nr) = (cfg.n_rollouts_nominal, cfg.n_rollouts_rich);
            if let Some(n) = n {
                nn = n / 2;
                nr = n - n / 2;
            }
            nn = n_nominal.unwrap_or(nn);
            nr = n_rich.unwrap_or(nr);
            let logs = pipeline::generate_logs(&cfg.rollout, cfg.seed, nn, nr)?;
            let files = pipeline::write_logs(&logs, &out)?;
            println!("wrote {} logs to {}", files.len(), out.display());
        }
        Command::MakePairs { data } => {
            let data = data.unwrap_or_else(|| cfg.data_dir.clone());
            let logs = pipeline::read_logs(&data)?;
            let set = pipeline::make_pairs(&logs, &cfg);
            let data_abs = std::fs::canonicalize(&data).map_err(|e| Error::io(&data, e))?;
            pipeline::write_manifest(&set, &cfg, &data_abs, &out.join(PAIRS_FILE))?;
            let val = set.records.iter().filter(|r| r.split == Split::Val).count();
            println!("{} pairs ({} held out)", set.records.len(), val);
        }
        Command::TrainRectifier { pairs, steps } => {
            if let Some(s) = steps {
                cfg.rectifier.steps = s;
            }
            let (header, set) = pipeline::load_manifest(&pairs_path(pairs))?;
            cfg.rectifier.env_resolution = header.env_resolution;
            cfg.rectifier.weights = header.weights;
            let (model, log) = train(&cfg.rectifier, &set.split(Split::Train), &set.split(Split::Val))?;
            save_checkpoint(&model, &out.join(RECTIFIER_FILE))?;
            write_train_log(&log, &out.join("train_log.csv"))?;
            println!("trained {} steps, {} parameters", log.len(), model.parameter_count());
        }
        Command::Rectify { ckpt, log } => {
            let model = load_checkpoint(&ckpt)?;
            let scene = read_log(&log)?;
            let pairs = pipeline::pairs_of_log(&scene, &model.config.weights, model.config.env_resolution);
            let mut rectified: Vec<(usize, Vec<Trajectory6DoF>)> = Vec::new();
            for (k, p) in &pairs {
                rectified.push((*k, pipeline::rectify_pair(&model, p)?));
            }
            for (k, trajs) in &rectified {
                write(&out.join(format!("rectified_{k:03}.json")), &to_json(trajs)?)?;
            }
            println!("rectified {} clips", rectified.len());
        }
        Command::Eval { pairs, ckpt } => {
            let model = load_checkpoint(&ckpt.unwrap_or_else(|| out.join(RECTIFIER_FILE)))?;
            let (_, set) = pipeline::load_manifest(&pairs_path(pairs))?;
            let val = set.split(Split::Val);
            let res = pipeline::evaluate(&model, &val, &cfg)?;
            emit_report(&res, &out)?;
            println!(
                "l2_6dof {:.4} (baseline {:.4}) over {} clips",
                res.report.l2_6dof, res.report.l2_6dof_baseline, res.report.clip_count
            );
        }
        Command::FlowDemo { pairs, steps } => {
            if let Some(s) = steps {
                cfg.flow.steps = s;
            }
            let (_, set) = pipeline::load_manifest(&pairs_path(pairs))?;
            let train_s = pipeline::flow_samples(&set.split(Split::Train), &cfg.flow)?;
            let val_s = pipeline::flow_samples(&set.split(Split::Val), &cfg.flow)?;
            let (model, log, report, samples) = pipeline::run_flow(&cfg.flow, &train_s, &val_s)?;
            flow_toy::save_checkpoint(&model, &out.join("flow.ckpt"))?;
            let mut csv = String::from("step,train_loss,val_loss\n");
            for r in &log {
                let v = r.val_loss.map(|v| format!("{v:.9e}")).unwrap_or_default();
                csv.push_str(&format!("{},{:.9e},{}\n", r.step, r.train_loss, v));
            }
            write(&out.join("flow_log.csv"), &csv)?;
            write(&out.join("flow_report.json"), &to_json(&report)?)?;
            for (i, z) in samples.iter().take(cfg.n_profiles).enumerate() {
                write(&out.join(format!("flow_sample_{i:03}.csv")), &z.to_csv())?;
                write(&out.join(format!("flow_sample_{i:03}.pgm")), &z.to_pgm())?;
                write(&out.join(format!("flow_layout_{i:03}.pgm")), &val_s[i].cond.layout.to_pgm())?;
            }
            println!(
                "flow val loss {:.4} (zero predictor {:.4})",
                report.val_loss, report.zero_predictor_loss
            );
        }
        Command::Plot { data } => {
            let data = data.unwrap_or_else(|| cfg.data_dir.clone());
            let logs = pipeline::read_logs(&data)?;
            let stats = pipeline::dataset_accel(&logs)?.stats(cfg.accel_bins, cfg.accel_max);
            write(&out.join("accel_hist.csv"), &accel_hist_csv(&stats))?;
            write(&out.join("accel_hist.svg"), &accel_hist_svg(&stats))?;
            write(&out.join("dataset_stats.json"), &to_json(&stats)?)?;
            for p in &stats.pools {
                println!("{}: {} clips, median max accel {:.2}", p.pool, p.clip_count, p.median_max_accel);
            }
        }
    }
    Ok(())
}
