use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(
    name = "ltau",
    version,
    about = "Uncertainty estimates from training-error trajectories"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Per-sample error PDFs from a trajectory log (.errs -> .pdfb)
    BuildPdfs(BuildPdfsArgs),
    /// Nearest-neighbor index over training descriptors (.desc -> index)
    BuildIndex(BuildIndexArgs),
    /// Fit the first-neighbor distance cutoff for out-of-domain flags
    OodThreshold(OodThresholdArgs),
    /// Per-query uncertainty estimates as CSV
    Predict(PredictArgs),
    /// Calibration report and curve for LTAU or ensemble predictions
    Calibrate(CalibrateArgs),
    /// Loss weights from training difficulty
    Reweight(ReweightArgs),
    /// Train the toy regression model and write its artifacts
    ToyTrain(ToyTrainArgs),
    /// Throughput and latency of uncertainty queries
    Bench(BenchArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpacingArg {
    Linear,
    Log,
}

#[derive(Args, Debug, Serialize)]
pub struct BuildPdfsArgs {
    #[arg(long)]
    pub errs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = ltau::trajlog::DEFAULT_NUM_BINS)]
    pub bins: usize,
    #[arg(long, value_enum, default_value_t = SpacingArg::Log)]
    pub spacing: SpacingArg,
    /// Top bin edge; defaults to the largest training error
    #[arg(long)]
    pub eps_max: Option<f64>,
    /// Epochs dropped from the start of the log
    #[arg(long, default_value_t = 0)]
    pub burn_in: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct BuildIndexArgs {
    #[arg(long)]
    pub desc: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Exact brute-force index
    #[arg(long, conflicts_with = "hnsw")]
    pub flat: bool,
    /// Approximate graph index (default)
    #[arg(long)]
    pub hnsw: bool,
    #[arg(long, default_value_t = 32)]
    pub m: usize,
    #[arg(long, default_value_t = 40)]
    pub ef_construction: usize,
    #[arg(long, default_value_t = 16)]
    pub ef_search: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Serialize)]
pub struct OodThresholdArgs {
    /// Descriptors the index was built from
    #[arg(long)]
    pub desc: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = ltau::uq::DEFAULT_OOD_QUANTILE, conflicts_with = "cutoff")]
    pub quantile: f64,
    /// Fixed cutoff distance instead of a quantile
    #[arg(long)]
    pub cutoff: Option<f64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregate {
    Mean,
    Max,
}

#[derive(Args, Debug, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub pdfs: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    /// Per-query CSV
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = ltau::uq::DEFAULT_K)]
    pub k: usize,
    /// Cutoff JSON written by `ood-threshold`
    #[arg(long, conflicts_with = "ood_cutoff")]
    pub ood: Option<PathBuf>,
    /// Fixed cutoff distance
    #[arg(long)]
    pub ood_cutoff: Option<f64>,
    /// Add each averaged PDF to the CSV as a JSON array
    #[arg(long)]
    pub include_pdf: bool,
    /// Also write the averaged PDFs as a .pdfb for `calibrate`
    #[arg(long)]
    pub pdf_out: Option<PathBuf>,
    /// Combine consecutive groups of queries (e.g. atoms of one structure)
    #[arg(long, value_enum, requires_all = ["group_size", "group_out"])]
    pub aggregate: Option<Aggregate>,
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub group_out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntervalArg {
    HalfNormal,
    OneSided,
}

#[derive(Args, Debug, Serialize)]
pub struct CalibrateArgs {
    /// Per-query PDFs from `predict --pdf-out`
    #[arg(long, conflicts_with = "ensemble", requires = "truths")]
    pub pdfs: Option<PathBuf>,
    /// Observed error per query (1 x Q vectors file)
    #[arg(long)]
    pub truths: Option<PathBuf>,
    /// Ensemble predictions (models x points x components)
    #[arg(long, requires = "targets")]
    pub ensemble: Option<PathBuf>,
    /// Reference values (1 x points*components vectors file)
    #[arg(long)]
    pub targets: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = IntervalArg::HalfNormal)]
    pub interval: IntervalArg,
    #[arg(long, default_value_t = ltau::calib::DEFAULT_LEVELS)]
    pub levels: usize,
    /// Label stored in the report
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub curve: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeArg {
    Hard,
    Easy,
    Uniform,
}

#[derive(Args, Debug, Serialize)]
pub struct ReweightArgs {
    #[arg(long)]
    pub errs: PathBuf,
    #[arg(long, value_enum)]
    pub scheme: SchemeArg,
    /// Defaults to 4.5 for hard and 2.0 for easy
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Reference MAE; defaults to the final-epoch training MAE
    #[arg(long)]
    pub mae: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationArg {
    Silu,
    Tanh,
    Softplus,
}

#[derive(Args, Debug, Serialize)]
pub struct ToyTrainArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Seeds both data generation and training
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub input_dim: usize,
    #[arg(long, default_value_t = 5000)]
    pub n_train: usize,
    #[arg(long, default_value_t = 1000)]
    pub n_val: usize,
    #[arg(long, default_value_t = 5000)]
    pub n_test_id: usize,
    #[arg(long, default_value_t = 1000)]
    pub n_test_ood: usize,
    #[arg(long, default_value_t = 4)]
    pub cells_per_axis: usize,
    #[arg(long, default_value_t = 0.01)]
    pub sigma_min: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma_max: f64,
    #[arg(long, default_value_t = 3.0)]
    pub ood_shift: f64,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.02)]
    pub learning_rate: f64,
    #[arg(long, value_enum, default_value_t = ActivationArg::Silu)]
    pub activation: ActivationArg,
    /// Per-sample loss weights from `reweight`
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct BenchArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub pdfs: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long, default_value_t = ltau::uq::DEFAULT_K)]
    pub k: usize,
    /// Timed passes over the query set; the fastest is reported
    #[arg(long, default_value_t = 3)]
    pub repeat: usize,
    /// Also time exact search over the same descriptors
    #[arg(long)]
    pub compare_flat: bool,
    /// Toy model JSON, to time model evaluation alongside the UQ query
    #[arg(long, requires = "inputs")]
    pub model: Option<PathBuf>,
    /// Model inputs matching the queries (Q x d vectors file)
    #[arg(long)]
    pub inputs: Option<PathBuf>,
    /// Write the JSON here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}
