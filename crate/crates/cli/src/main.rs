use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod inputs;

#[derive(Parser, Debug)]
#[command(name = "diffeat", version, about = "Select, rank and assemble diffusion U-Net features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// List the candidate pool of an architecture.
    Catalog(PoolArgs),
    /// Apply the qualitative filters and report what survives.
    Filter(PoolArgs),
    /// Run the backbone over a dataset and store the captured features.
    Extract(ExtractArgs),
    /// Probe every filtered activation and rank them per resolution.
    Compare(CompareArgs),
    /// Concatenate a recipe's features for every sample of a dataset.
    Assemble(AssembleArgs),
    /// Score a stored feature on a downstream task.
    Evaluate(EvaluateArgs),
    /// Render a stored feature as an RGB image of its principal components.
    Visualize(VisualizeArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Output directory for reports and images.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args, Debug, Clone)]
struct PoolArgs {
    #[arg(long)]
    model: String,
    /// Enumeration policy: universe, published or full.
    #[arg(long, default_value = "universe")]
    policy: String,
    /// Restrict the pool to these levels, e.g. `1,2,3`.
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<u32>>,
    /// Rule file overriding the architecture's default filters.
    #[arg(long)]
    filter_config: Option<PathBuf>,
    /// Also write the listing under this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct ExtractionArgs {
    #[arg(long)]
    timestep: Option<usize>,
    #[arg(long)]
    prompt: Option<String>,
    /// Noise seed for extraction, probe seed for training.
    #[arg(long)]
    seed: Option<u64>,
    /// TOML file with timestep, prompt, noise_seed and input_size keys.
    #[arg(long)]
    extraction_config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct DatasetArgs {
    /// `synthetic:simple`, `synthetic:complex` or `synthetic:correspondence`.
    #[arg(long)]
    dataset: String,
    /// Images (or pairs) generated for a synthetic dataset.
    #[arg(long, default_value_t = 30)]
    images: usize,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long, default_value = "toy")]
    model: String,
    #[command(flatten)]
    data: DatasetArgs,
    #[arg(long)]
    store: PathBuf,
    /// Capture the recipe's features for this model instead of the filtered pool.
    #[arg(long)]
    recipe: Option<String>,
    /// Capture these features instead of the filtered pool.
    #[arg(long = "feature")]
    features: Vec<String>,
    #[arg(long)]
    filter_config: Option<PathBuf>,
    #[command(flatten)]
    extraction: ExtractionArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long, default_value = "toy")]
    model: String,
    /// Segmentation datasets, repeatable.
    #[arg(long = "dataset", required = true)]
    datasets: Vec<String>,
    #[arg(long, default_value_t = 30)]
    images: usize,
    /// Training images per dataset; defaults to a third.
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    filter_config: Option<PathBuf>,
    #[arg(long)]
    probe_config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct AssembleArgs {
    /// Builtin recipe name or recipe file.
    #[arg(long)]
    recipe: String,
    #[command(flatten)]
    data: DatasetArgs,
    #[arg(long)]
    store: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Task {
    Correspondence,
    Segmentation,
    LabelScarce,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    task: Task,
    #[arg(long, default_value = "toy")]
    model: String,
    /// Activation id, `attention-maps` or `recipe:<name>`.
    #[arg(long)]
    feature: String,
    #[command(flatten)]
    data: DatasetArgs,
    #[arg(long)]
    store: PathBuf,
    /// Training images (segmentation, label-scarce) or pairs (refined correspondence).
    #[arg(long)]
    train: Option<usize>,
    #[arg(long, default_value_t = 5)]
    splits: usize,
    /// Train a channel-mixing refiner on the first pairs before matching.
    #[arg(long)]
    refine: bool,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long)]
    probe_config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct VisualizeArgs {
    #[arg(long, default_value = "toy")]
    model: String,
    #[arg(long)]
    feature: String,
    #[arg(long)]
    sample: String,
    #[arg(long)]
    store: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut stdout = std::io::stdout().lock();
    match commands::run(cli.command, &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = stdout.flush();
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
