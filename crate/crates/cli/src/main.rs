mod commands;
mod manifest;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

pub const EXIT_INVALID: u8 = 2;
pub const EXIT_FORMAT: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;
pub const EXIT_IO: u8 = 5;
pub const EXIT_MISMATCH: u8 = 6;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("replay mismatch: {0}")]
    Mismatch(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => EXIT_INVALID,
            CliError::Format(_) => EXIT_FORMAT,
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Io(_) => EXIT_IO,
            CliError::Mismatch(_) => EXIT_MISMATCH,
        }
    }
}

impl From<patchpost::Error> for CliError {
    fn from(e: patchpost::Error) -> Self {
        match e {
            patchpost::Error::InvalidArgument(m) => CliError::Invalid(m),
            patchpost::Error::Format(m) => CliError::Format(m),
            patchpost::Error::Numerical(m) => CliError::Numerical(m),
            patchpost::Error::Io(e) => CliError::Io(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "patchpost", version, about = "Posterior sampling for image restoration with patch priors")]
pub struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a GMM patch prior to random patches of a directory of images.
    TrainPrior(TrainArgs),
    /// Remove white Gaussian noise.
    Denoise(DenoiseArgs),
    /// Invert a known blur with additive Gaussian noise.
    Deblur(DeblurArgs),
    /// Fill in missing pixels given a mask (0 = missing).
    Inpaint(InpaintArgs),
    /// Print the EPLL energy of an image given an observation.
    Energy(EnergyArgs),
    /// Write patches drawn from a prior as images.
    SamplePrior(SamplePriorArgs),
    /// Print the PSNR between two images (peak 1, i.e. 255 for 8-bit files).
    Psnr { a: PathBuf, b: PathBuf },
    /// Apply blur, masking and noise to an image.
    Degrade(DegradeArgs),
    /// Write a random observation mask.
    MakeMask(MakeMaskArgs),
    /// Re-run the command recorded in a manifest and check its outputs.
    Replay { manifest: PathBuf },
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory of PNG/PGM/PPM training images.
    pub images: PathBuf,
    #[arg(long, short = 'k', default_value_t = 200)]
    pub components: usize,
    #[arg(long, default_value_t = 8)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 100_000)]
    pub patches: usize,
    #[arg(long, default_value_t = 30)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Convert color images to gray and train a one-channel prior.
    #[arg(long)]
    pub gray: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Sample,
    Map,
    Mmse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CouplingArg {
    Chain,
    Average,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DataWeightArg {
    /// Each grid copy carries 1/G of the likelihood.
    Split,
    /// Each grid copy carries the full likelihood.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Auto,
    Pointwise,
    Spectral,
    Iterative,
}

/// Options shared by the restoration commands.
#[derive(Args, Debug)]
pub struct RunArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub prior: PathBuf,
    /// Noise standard deviation on the 0–255 scale.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long, value_enum, default_value_t = ModeArg::Sample)]
    pub mode: ModeArg,
    /// Chains to run: averaged for `mmse` (default 20), written separately
    /// for `sample` (default 1).
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, default_value_t = patchpost::sampler::DEFAULT_ITERATIONS)]
    pub iters: usize,
    #[arg(long, default_value_t = patchpost::sampler::DEFAULT_GRIDS)]
    pub grids: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed for choosing the grid offsets.
    #[arg(long, default_value_t = 0)]
    pub grid_seed: u64,
    #[arg(long)]
    pub beta_tau: Option<f64>,
    #[arg(long)]
    pub beta_power: Option<f64>,
    #[arg(long)]
    pub beta_scale: Option<f64>,
    /// Skip the extra sweep at 100× the last β.
    #[arg(long)]
    pub no_final_smooth: bool,
    #[arg(long, value_enum, default_value_t = CouplingArg::Chain)]
    pub coupling: CouplingArg,
    #[arg(long, value_enum, default_value_t = DataWeightArg::Split)]
    pub data_weight: DataWeightArg,
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct KernelArgs {
    /// Isotropic Gaussian blur with this standard deviation.
    #[arg(long)]
    pub kernel_scale: Option<f64>,
    #[arg(long)]
    pub kernel_sx: Option<f64>,
    #[arg(long)]
    pub kernel_sy: Option<f64>,
    #[arg(long)]
    pub kernel_rho: Option<f64>,
    /// Whitespace-separated kernel rows, one per line.
    #[arg(long)]
    pub kernel_file: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DenoiseArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug)]
pub struct DeblurArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub kernel: KernelArgs,
    #[arg(long)]
    pub gamma_tau: Option<f64>,
    #[arg(long)]
    pub gamma_power: Option<f64>,
    #[arg(long)]
    pub gamma_scale: Option<f64>,
    #[arg(long, value_enum, default_value_t = BackendArg::Auto)]
    pub backend: BackendArg,
}

#[derive(Args, Debug)]
pub struct InpaintArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub mask: PathBuf,
}

#[derive(Args, Debug)]
pub struct EnergyArgs {
    /// Image whose energy is evaluated.
    pub image: PathBuf,
    /// The observation `y`.
    #[arg(long)]
    pub observed: PathBuf,
    #[arg(long)]
    pub prior: PathBuf,
    #[arg(long)]
    pub sigma: f64,
    #[command(flatten)]
    pub kernel: KernelArgs,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long, default_value_t = patchpost::sampler::DEFAULT_GRIDS)]
    pub grids: usize,
    #[arg(long, default_value_t = 0)]
    pub grid_seed: u64,
}

#[derive(Args, Debug)]
pub struct SamplePriorArgs {
    #[arg(long)]
    pub prior: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DegradeArgs {
    pub input: PathBuf,
    /// Noise standard deviation on the 0–255 scale.
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    #[command(flatten)]
    pub kernel: KernelArgs,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MakeMaskArgs {
    /// Image whose size the mask takes.
    pub like: PathBuf,
    /// Fraction of pixels marked missing.
    #[arg(long)]
    pub missing: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

/// Parses `args` (without the program name) and runs the command.
/// `record` controls whether a manifest is written.
pub fn run(args: &[OsString], record: bool) -> Result<(), CliError> {
    let argv = std::iter::once(OsString::from("patchpost")).chain(args.iter().cloned());
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Invalid(e.to_string().trim_end().to_owned())),
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Invalid("--threads must be positive".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError::Invalid(e.to_string()))?;
    let recorded: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let ctx = commands::Context { args: recorded, record, threads: pool.current_num_threads() };
    pool.install(|| match cli.command {
        Command::TrainPrior(a) => commands::train_prior(&ctx, a),
        Command::Denoise(a) => commands::denoise(&ctx, a),
        Command::Deblur(a) => commands::deblur(&ctx, a),
        Command::Inpaint(a) => commands::inpaint(&ctx, a),
        Command::Energy(a) => commands::energy(a),
        Command::SamplePrior(a) => commands::sample_prior(&ctx, a),
        Command::Psnr { a, b } => commands::psnr(&a, &b),
        Command::Degrade(a) => commands::degrade(&ctx, a),
        Command::MakeMask(a) => commands::make_mask(&ctx, a),
        Command::Replay { manifest } => commands::replay(&manifest),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<OsString> = std::env::args_os().skip(1).collect();
    match run(&args, true) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("patchpost: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
