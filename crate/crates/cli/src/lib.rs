//! `kdc`: data generation, training, evaluation and the distillation
//! experiment suite for cascaded MRI reconstruction networks.

mod commands;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use kdc_core::experiments::{Preset, RunConfig};
use kdc_core::Error;

#[derive(Parser)]
#[command(name = "kdc", version, about = "Knowledge distillation for DC-CNN MRI reconstruction")]
struct Cli {
    /// Print failures as a JSON object on stderr.
    #[arg(long, global = true)]
    error_json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Cartesian undersampling mask.
    MaskGen(MaskGenArgs),
    /// Generate a synthetic phantom dataset.
    DataGen(DataGenArgs),
    /// Train one stage: teacher, student, at, kd, fd:<method> or ablate:<combo>.
    Train(TrainArgs),
    /// Validation metrics of one or more checkpoints.
    Eval(EvalArgs),
    /// Compare feature-distillation methods against one teacher.
    CompareFd(CompareFdArgs),
    /// Attention-transfer position sweep.
    PositionSweep(PositionSweepArgs),
    /// Attention-map residues of student and kd-student against the teacher.
    ResidueStudy(ResidueArgs),
    /// Parameter counts and single-image forward times.
    Benchmark(BenchmarkArgs),
    /// Train one super-resolution (VDSR) stage.
    SrTrain(TrainArgs),
    /// Evaluate super-resolution checkpoints.
    SrEval(EvalArgs),
}

#[derive(Args)]
pub struct MaskGenArgs {
    #[arg(long)]
    pub width: usize,
    #[arg(long)]
    pub acc: f64,
    /// Fully sampled center lines (default: 8% of the width).
    #[arg(long)]
    pub center: Option<usize>,
    #[arg(long, default_value_t = kdc_core::kspace::DEFAULT_SIGMA_FRACTION)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct DataGenArgs {
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Run configuration: a JSON file or a preset, then flag overrides.
#[derive(Args, Clone, Default)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `desk` or `paper`; ignored when --config is given.
    #[arg(long)]
    pub preset: Option<String>,
    /// Output directory (overrides KDC_OUT_DIR and the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Dataset directory instead of generated phantoms.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Mask JSON instead of a generated mask.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub teacher_ckpt: Option<PathBuf>,
    #[arg(long)]
    pub init_ckpt: Option<PathBuf>,
}

impl ConfigArgs {
    pub fn resolve(&self, super_resolution: bool) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
                RunConfig::from_json(&text)?
            }
            None => {
                let preset = Preset::parse(self.preset.as_deref().unwrap_or("desk"))?;
                if super_resolution {
                    RunConfig::sr_preset(preset)
                } else {
                    RunConfig::preset(preset)
                }
            }
        };
        if let Ok(root) = std::env::var("KDC_OUT_DIR") {
            if !root.is_empty() {
                cfg.out_dir = PathBuf::from(root);
            }
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        let t = &mut cfg.train;
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.lr {
            t.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.alpha {
            t.alpha = v;
        }
        if let Some(v) = &self.dataset {
            cfg.dataset_dir = Some(v.clone());
        }
        if let Some(v) = &self.mask {
            cfg.mask_file = Some(v.clone());
        }
        if let Some(v) = &self.teacher_ckpt {
            cfg.teacher_checkpoint = Some(v.clone());
        }
        if let Some(v) = &self.init_ckpt {
            cfg.init_checkpoint = Some(v.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub stage: String,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoints to evaluate; the first is the reference for significance tests.
    #[arg(long = "ckpt", required = true)]
    pub ckpts: Vec<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args)]
pub struct CompareFdArgs {
    /// Comma-separated subset of fn,fsp,sp,ah,at.
    #[arg(long, default_value = "fn,fsp,sp,ah,at")]
    pub methods: String,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args)]
pub struct PositionSweepArgs {
    /// Teacher convolution indices (1-based), comma-separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub teacher_layer: Vec<usize>,
    /// Student convolution indices (1-based), comma-separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub student_layer: Vec<usize>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args)]
pub struct ResidueArgs {
    #[arg(long)]
    pub student_ckpt: PathBuf,
    #[arg(long)]
    pub kd_ckpt: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args)]
pub struct BenchmarkArgs {
    /// Checkpoints to time; the paper-size teacher and student when absent.
    #[arg(long = "ckpt")]
    pub ckpts: Vec<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 20)]
    pub repeats: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
    pub exit_code: u8,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { kind: "usage", message: message.into(), exit_code: 2 }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let (kind, exit_code) = match &e {
            Error::InvalidInput(_) | Error::Config(_) => ("usage", 2),
            Error::Training { .. } => ("training", 3),
            Error::Degenerate(_) => ("degenerate", 4),
            Error::Data(_) | Error::Io(_) | Error::Json(_) | Error::Csv(_) | Error::Image(_) => ("data", 4),
        };
        Self { kind, message: e.to_string(), exit_code }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn report(err: &CliError, json: bool) -> u8 {
    if json {
        eprintln!("{}", serde_json::to_string(err).unwrap_or_else(|_| err.message.clone()));
    } else {
        eprintln!("error: {}", err.message);
    }
    err.exit_code
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let json = args.iter().any(|a| a == "--error-json");
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) if json => return report(&CliError::usage(e.to_string().trim().to_string()), true),
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    let result = match cli.command {
        Command::MaskGen(a) => commands::mask_gen(&a),
        Command::DataGen(a) => commands::data_gen(&a),
        Command::Train(a) => commands::train(&a, false),
        Command::SrTrain(a) => commands::train(&a, true),
        Command::Eval(a) => commands::eval(&a, false),
        Command::SrEval(a) => commands::eval(&a, true),
        Command::CompareFd(a) => commands::compare_fd(&a),
        Command::PositionSweep(a) => commands::position_sweep(&a),
        Command::ResidueStudy(a) => commands::residue_study(&a),
        Command::Benchmark(a) => commands::benchmark(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => report(&e, cli.error_json),
    }
}
