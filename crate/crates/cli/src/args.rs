//! Command-line flags and their JSON-config counterparts.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::failure::Failure;

#[derive(Debug, Parser)]
#[command(
    name = "secure",
    version,
    about = "Robust fine-tuning and evaluation of accident anticipation models"
)]
pub struct Cli {
    /// JSON file supplying default values for any flag. Keys use the long
    /// flag names; an object keyed by the subcommand name overrides the top
    /// level for that subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic train and test splits.
    GenData(GenDataArgs),
    /// Train a baseline model from scratch.
    Train(TrainArgs),
    /// Fine-tune a baseline with the robustness objective.
    FinetuneSecure(FinetuneArgs),
    /// Clean, input-noise and parameter-noise benchmark of one or more checkpoints.
    Bench(BenchArgs),
    /// Empirical robustness certificate against a frozen reference.
    Certify(CertifyArgs),
    /// Finite-difference check of every primitive and loss gradient.
    Gradcheck(GradcheckArgs),
    /// Render trajectories and loss curves of a finished run.
    Report(ReportArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::FinetuneSecure(_) => "finetune-secure",
            Command::Bench(_) => "bench",
            Command::Certify(_) => "certify",
            Command::Gradcheck(_) => "gradcheck",
            Command::Report(_) => "report",
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct OutputArgs {
    /// Directory for this run's artifacts. Defaults to
    /// `$SECURE_OUT_DIR/<command>-<timestamp>-seed<seed>` (or `runs/...`).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[command(allow_negative_numbers = true)]
#[serde(rename_all = "kebab-case", default)]
pub struct GenDataArgs {
    /// Output directory; receives `train/` and `test/`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training videos [default: 200].
    #[arg(long)]
    pub num_videos: Option<usize>,
    /// Test videos [default: half of --num-videos].
    #[arg(long)]
    pub test_videos: Option<usize>,
    #[arg(long)]
    pub positive_frac: Option<f64>,
    /// Frames per video.
    #[arg(long = "T")]
    #[serde(rename = "T")]
    pub t: Option<usize>,
    /// Objects per frame.
    #[arg(long)]
    pub n: Option<usize>,
    /// Feature dimension.
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub fps: Option<u32>,
    /// Strength of the pre-accident risk ramp.
    #[arg(long)]
    pub signal: Option<f64>,
    /// Standard deviation of the feature noise.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub ramp_len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct TrainingFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Global gradient-norm clip; 0 disables it.
    #[arg(long)]
    pub clip_norm: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[command(allow_negative_numbers = true)]
#[serde(rename_all = "kebab-case", default)]
pub struct TrainArgs {
    /// Dataset directory, or a gen-data output containing `train/`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub training: TrainingFlags,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct PgdFlags {
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// `l2` or `linf`.
    #[arg(long)]
    pub norm: Option<String>,
    /// `per-sample` or `shared-batch`.
    #[arg(long)]
    pub pgd_mode: Option<String>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[command(allow_negative_numbers = true)]
#[serde(rename_all = "kebab-case", default)]
pub struct FinetuneArgs {
    /// Baseline checkpoint; also the frozen reference.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub lambda_c_out: Option<f64>,
    #[arg(long)]
    pub lambda_s_out: Option<f64>,
    #[arg(long)]
    pub lambda_c_feat: Option<f64>,
    #[arg(long)]
    pub lambda_s_feat: Option<f64>,
    /// Comma-separated robustness terms to keep (`cps,spd,clm,sld`); `none`
    /// keeps only the task loss.
    #[arg(long)]
    pub ablation: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub training: TrainingFlags,
    #[command(flatten)]
    #[serde(flatten)]
    pub pgd: PgdFlags,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[command(allow_negative_numbers = true)]
#[serde(rename_all = "kebab-case", default)]
pub struct BenchArgs {
    /// Checkpoint to evaluate; repeat for a side-by-side comparison.
    #[arg(long = "checkpoint")]
    pub checkpoint: Vec<PathBuf>,
    /// Dataset directory, or a gen-data output containing `test/`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated input-noise levels; empty for none [default: 0.1,0.2].
    #[arg(long)]
    pub ip_sigmas: Option<String>,
    /// Comma-separated GRU-noise levels; empty for none [default: 0.1,0.2].
    #[arg(long)]
    pub lp_sigmas: Option<String>,
    /// Number of noise seeds per level [default: 3].
    #[arg(long)]
    pub seeds: Option<usize>,
    /// First noise seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[command(allow_negative_numbers = true)]
#[serde(rename_all = "kebab-case", default)]
pub struct CertifyArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Frozen reference checkpoint.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated radii [default: 0.01].
    #[arg(long = "epsilon")]
    #[serde(rename = "epsilon")]
    pub epsilons: Option<String>,
    /// Random probes per video [default: 50].
    #[arg(long)]
    pub probes: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub norm: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[command(allow_negative_numbers = true)]
#[serde(rename_all = "kebab-case", default)]
pub struct GradcheckArgs {
    /// First seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of consecutive seeds [default: 5].
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Coordinates checked per loss and seed [default: 10].
    #[arg(long)]
    pub coords: Option<usize>,
    /// Maximum relative error [default: 1e-4].
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct ReportArgs {
    /// Output directory of a bench, train or finetune-secure run.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// SVG to write [default: <run-dir>/report.svg]; CSV goes next to it.
    #[arg(long)]
    pub out_svg: Option<PathBuf>,
    /// Comma-separated video ids [default: first positive video].
    #[arg(long)]
    pub videos: Option<String>,
}

/// Loads the config file's values for `command`: top-level keys, overridden
/// by an object under the command's name.
pub fn config_values(path: &Path, command: &str) -> Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let root: Value =
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))?;
    let Value::Object(root) = root else {
        return Err(Failure::Usage(format!("config {}: expected a JSON object", path.display())).into());
    };
    let mut out = Map::new();
    let mut section = None;
    for (k, v) in root {
        if k == command {
            section = Some(v);
        } else if !v.is_object() {
            out.insert(k, v);
        }
    }
    match section {
        Some(Value::Object(s)) => out.extend(s),
        Some(_) => return Err(Failure::Usage(format!("config section `{command}` must be an object")).into()),
        None => {}
    }
    Ok(out)
}

/// `flags` with every unset field filled from `config`.
pub fn merge<T: Serialize + DeserializeOwned>(flags: &T, config: Map<String, Value>) -> Result<T> {
    let Value::Object(given) = serde_json::to_value(flags)? else {
        unreachable!("flag structs serialize to objects")
    };
    let mut merged = config;
    for (k, v) in given {
        let unset = v.is_null() || v.as_array().is_some_and(|a| a.is_empty());
        if !unset {
            merged.insert(k, v);
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| Failure::Usage(format!("config: {e}")).into())
}

/// Parses a comma-separated list of floats; an empty string gives an empty list.
pub fn float_list(field: &str, s: &str) -> Result<Vec<f64>, Failure> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Failure::Usage(format!("--{field}: `{t}` is not a number")))
        })
        .collect()
}

pub fn required<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T, Failure> {
    v.as_ref()
        .ok_or_else(|| Failure::Usage(format!("--{flag} is required")))
}
