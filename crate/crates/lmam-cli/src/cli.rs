//! Flag surface. Every randomized command takes and echoes a seed; outputs
//! land under `--out` with a fixed layout (report.json, *.csv, checkpoints/).

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use lmam_core::attention::{LmamMode, ValueSource};
use lmam_core::fusion::FusionMethod;
use lmam_core::model::{EmbedWay, ExperimentConfig, ModalityMask, OptimizerKind};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "lmam", version, about = "Low-rank matching attention fusion harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic multimodal conversation dataset (JSONL splits + manifest)
    GenData(GenDataArgs),
    /// Exact parameter counts per fusion method and the low-rank/self-attention ratio
    ParamCount(ParamCountArgs),
    /// Finite-difference gradient verification; nonzero exit on any failure
    GradCheck(GradCheckArgs),
    /// Wall-clock forward+backward timing comparison across fusion methods
    Bench(BenchArgs),
    /// Train one model per (rank, seed) cell and emit curve data
    RankSweep(RankSweepArgs),
    /// Train every fusion method over several seeds and tabulate the results
    Compare(CompareArgs),
    /// Train a single model and write a checkpoint
    Train(TrainArgs),
    /// Re-evaluate a saved checkpoint on a dataset split
    Eval(EvalArgs),
}

#[derive(Args, Debug, Clone)]
pub struct GenDataArgs {
    /// Output directory for manifest.json and the split files
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub num_classes: Option<usize>,
    /// Per-modality feature widths, e.g. 16,16,16
    #[arg(long)]
    pub dims: Option<String>,
    /// Dialogue counts per split
    #[arg(long, default_value_t = 600)]
    pub train: usize,
    /// Validation dialogues; 0 carves the validation set out of --test 8:2
    #[arg(long, default_value_t = 100)]
    pub val: usize,
    #[arg(long, default_value_t = 100)]
    pub test: usize,
    #[arg(long)]
    pub utterances: Option<usize>,
    /// Pairwise interaction strength
    #[arg(long)]
    pub beta: Option<f64>,
    /// Per-modality informativeness, e.g. 0.55,0.4,0.25
    #[arg(long)]
    pub gamma: Option<String>,
    /// Label stay-probability in [0, 1)
    #[arg(long)]
    pub rho: Option<f64>,
    /// Additive noise level
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct ParamCountArgs {
    /// One width (used for all) or three comma-separated widths
    #[arg(long, default_value = "100")]
    pub dims: String,
    /// Factorization rank
    #[arg(long, default_value_t = 45)]
    pub rank: usize,
    /// Comma-separated fusion methods or "all"
    #[arg(long, default_value = "all")]
    pub fusion: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct GradCheckArgs {
    /// One of lowrank|matching|lmam|selfattn|tfn|lfm|add|encoder|classifier|model|all
    #[arg(long, default_value = "all")]
    pub module: String,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct BenchArgs {
    /// Comma-separated fusion methods to time
    #[arg(long, default_value = "lmam,selfattn")]
    pub fusion: String,
    /// Per-modality feature widths
    #[arg(long, default_value = "99,99,99")]
    pub dims: String,
    #[arg(long, default_value_t = 128)]
    pub seq_len: usize,
    /// Timed repetitions (after 2 warmups); medians over fewer than 5 are noisy
    #[arg(long, default_value_t = 7)]
    pub reps: usize,
    #[arg(long, default_value_t = 45)]
    pub rank: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct RankSweepArgs {
    /// Dataset directory written by gen-data
    #[arg(long)]
    pub dataset: PathBuf,
    /// Comma-separated ranks; numbers plus the keywords "full" and "dense"
    #[arg(long, default_value = "5,15,30,45,full")]
    pub ranks: String,
    #[arg(long, default_value = "1,2,3")]
    pub seeds: String,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigFlags,
}

#[derive(Args, Debug, Clone)]
pub struct CompareArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Comma-separated fusion methods or "all"
    #[arg(long, default_value = "all")]
    pub fusions: String,
    #[arg(long, default_value = "1,2,3")]
    pub seeds: String,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigFlags,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigFlags,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    /// Checkpoint JSON written by train
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// One of train|val|test
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Experiment configuration: either a JSON file via --config or individual
/// overrides; flags win over the file and the file over the defaults.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigFlags {
    /// JSON file mirroring the experiment config
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// add|concat|tfn|lfm|lmam|selfattn
    #[arg(long)]
    pub fusion: Option<String>,
    /// early|early_residual|late
    #[arg(long)]
    pub embed_way: Option<String>,
    /// intra|cross|fused
    #[arg(long)]
    pub mode: Option<String>,
    /// query_rows|matched_features
    #[arg(long)]
    pub value_source: Option<String>,
    /// Factorization rank (a number) or "dense"
    #[arg(long)]
    pub rank: Option<String>,
    /// Modality mask, a subset of "tav"
    #[arg(long)]
    pub modalities: Option<String>,
    /// Disable the constant-1 padding column
    #[arg(long)]
    pub no_pad: bool,
    /// Context encoder window (odd)
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// sgd|adam
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigFlags {
    /// Builds the effective config for a dataset with the given dims.
    pub fn resolve(&self, dims: (usize, usize, usize)) -> Result<ExperimentConfig, CliError> {
        let mut config = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                serde_json::from_str::<ExperimentConfig>(&text)?
            }
            None => ExperimentConfig::default(),
        };
        config.d_t = dims.0;
        config.d_a = dims.1;
        config.d_v = dims.2;
        if let Some(f) = &self.fusion {
            config.fusion = FusionMethod::parse(f)?;
        }
        if let Some(w) = &self.embed_way {
            config.embed_way = EmbedWay::parse(w)?;
        }
        if let Some(m) = &self.mode {
            config.lmam_mode = parse_lmam_mode(m)?;
        }
        if let Some(v) = &self.value_source {
            config.value_source = parse_value_source(v)?;
        }
        if let Some(r) = &self.rank {
            config.rank = parse_rank(r)?;
        }
        if let Some(m) = &self.modalities {
            config.modalities = ModalityMask::parse(m)?;
        }
        if self.no_pad {
            config.pad_with_one = false;
        }
        if let Some(w) = self.window {
            config.window = w;
        }
        if let Some(e) = self.epochs {
            config.epochs = e;
        }
        if let Some(b) = self.batch_size {
            config.batch_size = b;
        }
        if let Some(lr) = self.lr {
            config.learning_rate = lr;
        }
        if let Some(o) = &self.optimizer {
            config.optimizer = OptimizerKind::parse(o)?;
        }
        if let Some(s) = self.seed {
            config.seed = s;
        }
        Ok(config)
    }
}

pub fn parse_lmam_mode(s: &str) -> Result<LmamMode, CliError> {
    match s {
        "intra" => Ok(LmamMode::Intra),
        "cross" => Ok(LmamMode::Cross),
        "fused" => Ok(LmamMode::Fused),
        other => Err(CliError::Usage(format!("unknown lmam mode '{other}' (intra|cross|fused)"))),
    }
}

pub fn parse_value_source(s: &str) -> Result<ValueSource, CliError> {
    match s {
        "query_rows" | "query" => Ok(ValueSource::QueryRows),
        "matched_features" | "matched" => Ok(ValueSource::MatchedFeatures),
        other => Err(CliError::Usage(format!(
            "unknown value source '{other}' (query_rows|matched_features)"
        ))),
    }
}

pub fn parse_rank(s: &str) -> Result<Option<usize>, CliError> {
    if s == "dense" {
        return Ok(None);
    }
    s.parse::<usize>()
        .map(Some)
        .map_err(|_| CliError::Usage(format!("rank must be a positive integer or 'dense', got '{s}'")))
}

/// Parses "d" or "d_t,d_a,d_v".
pub fn parse_dims(s: &str) -> Result<(usize, usize, usize), CliError> {
    let parts: Vec<&str> = s.split(',').collect();
    let parse_one = |t: &str| {
        t.trim()
            .parse::<usize>()
            .map_err(|_| CliError::Usage(format!("invalid dimension '{t}' in '{s}'")))
    };
    match parts.len() {
        1 => {
            let d = parse_one(parts[0])?;
            Ok((d, d, d))
        }
        3 => Ok((parse_one(parts[0])?, parse_one(parts[1])?, parse_one(parts[2])?)),
        _ => Err(CliError::Usage(format!("--dims takes 1 or 3 comma-separated values, got '{s}'"))),
    }
}

pub fn parse_u64_list(s: &str) -> Result<Vec<u64>, CliError> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<u64>()
                .map_err(|_| CliError::Usage(format!("invalid integer '{t}' in list '{s}'")))
        })
        .collect()
}

pub fn parse_f64_triple(s: &str) -> Result<(f64, f64, f64), CliError> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(CliError::Usage(format!("expected three comma-separated values, got '{s}'")));
    }
    let one = |t: &str| {
        t.trim()
            .parse::<f64>()
            .map_err(|_| CliError::Usage(format!("invalid number '{t}' in '{s}'")))
    };
    Ok((one(parts[0])?, one(parts[1])?, one(parts[2])?))
}

pub fn parse_fusion_list(s: &str) -> Result<Vec<FusionMethod>, CliError> {
    if s == "all" {
        return Ok(FusionMethod::ALL.to_vec());
    }
    s.split(',').map(|t| FusionMethod::parse(t.trim()).map_err(CliError::from)).collect()
}
