//! The `rcdm` command line: dataset generation, encoding, training, sampling and the
//! latent-space sweeps, each writing PNG grids with a JSON sidecar of the exact vectors used.
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 unreadable or malformed data,
//! 4 runtime failure (for example a non-finite loss).

mod commands;
mod reference;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rcdm::{AttributeMode, Sampler};

pub use commands::{run, sidecar_path, GridSidecar, SidecarCell};
pub use reference::Reference;

/// Default perturbation strengths for `perturb-sweep`.
pub const DEFAULT_LAMBDAS: &str = "0,0.1,0.2,0.3,0.4,0.6,0.8";
/// Default number of interpolation points for `interp-sweep`.
pub const DEFAULT_INTERP_POINTS: usize = 11;

#[derive(Debug, Parser)]
#[command(name = "rcdm", version, about = "Representation-conditioned diffusion at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic factor dataset: PNGs plus manifest.json.
    Synth {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a built-in encoder on an image folder and write every embedding to an RCDE file.
    Encode {
        #[arg(long, default_value = "pixel_stats")]
        encoder: String,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a conditional denoiser on an image folder.
    Train {
        /// JSON file with `model` (denoiser) and `train` sections.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint for another `train.epochs` epochs.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate from one condition; `--count` > 1 makes a grid of consecutive seeds.
    Sample {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        condition: ConditionArgs,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        count: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid over perturbation strengths `C + lambda * noise`.
    PerturbSweep {
        #[command(flatten)]
        model: ModelArgs,
        /// `image.png`, `matrix.rcde#ROW` or `vector.json`.
        #[arg(long)]
        reference: Reference,
        #[arg(long, default_value = DEFAULT_LAMBDAS, value_delimiter = ',', allow_hyphen_values = true)]
        lambdas: Vec<f64>,
        /// Seed of the noise direction; defaults to `--seed`.
        #[arg(long)]
        noise_seed: Option<u64>,
        /// Draw fresh noise for every lambda instead of reusing one direction.
        #[arg(long)]
        resample_noise: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid along the segment from reference A to reference B.
    InterpSweep {
        #[command(flatten)]
        model: ModelArgs,
        /// Reference at alpha = 1 (left end).
        #[arg(long)]
        a: Reference,
        /// Reference at alpha = 0 (right end).
        #[arg(long)]
        b: Reference,
        /// Number of interpolation points, endpoints included.
        #[arg(long, default_value_t = DEFAULT_INTERP_POINTS, value_parser = at_least_two)]
        points: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Semantic directions: PCA banks and edits along them.
    #[command(subcommand)]
    Directions(DirectionsCommand),
    /// Serve the HTTP API (and optionally the explorer UI bundle).
    Serve {
        /// Checkpoint to load at startup; can also be loaded later over the API.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        /// Generations allowed to run concurrently.
        #[arg(long, default_value_t = 1)]
        slots: usize,
        #[arg(long)]
        ui_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum DirectionsCommand {
    /// Fit the top `K` principal directions of an embedding matrix.
    Pca {
        #[arg(long)]
        rcde: PathBuf,
        #[arg(long = "k", short = 'K', value_parser = clap::value_parser!(u64).range(1..))]
        k: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Edit a reference along component `K` of a bank: grid of the plain sample and each alpha.
    Apply {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        reference: Reference,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long = "k", short = 'K')]
        k: usize,
        #[arg(long, default_value = "-25", value_delimiter = ',', allow_hyphen_values = true)]
        alpha: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised attribute edit using a labeled embedding matrix.
    Attr {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        reference: Reference,
        #[arg(long)]
        rcde: PathBuf,
        #[arg(long)]
        attribute: String,
        #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
        scale: f64,
        #[arg(long, default_value = "mean-add")]
        mode: AttributeMode,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Checkpoint and sampler settings shared by every generating command.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "ddim")]
    pub sampler: Sampler,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Exactly one way of obtaining the conditioning vector for `sample`.
#[derive(Debug, Clone, Args)]
#[group(required = true, multiple = false)]
pub struct ConditionSource {
    /// Encode this PNG with the checkpoint's encoder.
    #[arg(long)]
    pub from_image: Option<PathBuf>,
    /// Take row `--row` of this RCDE file.
    #[arg(long, requires = "row")]
    pub from_rcde: Option<PathBuf>,
    /// JSON array of numbers, or an object with a `values` array.
    #[arg(long)]
    pub vector_file: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ConditionArgs {
    #[command(flatten)]
    pub source: ConditionSource,
    /// Row index for `--from-rcde`.
    #[arg(long, requires = "from_rcde")]
    pub row: Option<usize>,
}

impl ConditionArgs {
    pub fn reference(&self) -> Reference {
        let s = &self.source;
        match (&s.from_image, &s.from_rcde, &s.vector_file) {
            (Some(p), _, _) => Reference::Image(p.clone()),
            (_, Some(p), _) => Reference::Row(p.clone(), self.row.unwrap_or(0)),
            (_, _, Some(p)) => Reference::Vector(p.clone()),
            _ => unreachable!("clap enforces exactly one condition source"),
        }
    }
}

fn at_least_two(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n) if n >= 2 => Ok(n),
        Ok(n) => Err(format!("need at least 2 points, got {n}")),
        Err(e) => Err(e.to_string()),
    }
}

/// A failure with its process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Data(_) => 3,
            Self::Runtime(_) => 4,
        }
    }
}

impl From<rcdm::Error> for CliError {
    fn from(e: rcdm::Error) -> Self {
        use rcdm::Error as E;
        let msg = e.to_string();
        match e {
            E::Format(_) | E::Checkpoint(_) | E::Image(_) | E::Io { .. } => Self::Data(msg),
            E::NonFiniteLoss { .. } | E::BlankImage => Self::Runtime(msg),
            E::Schedule(_)
            | E::Timestep { .. }
            | E::Shape { .. }
            | E::Dimension { .. }
            | E::Config(_)
            | E::InvalidArgument(_)
            | E::DegenerateCovariance { .. }
            | E::UnknownAttribute { .. }
            | E::EmptyClass { .. } => Self::Usage(msg),
        }
    }
}
