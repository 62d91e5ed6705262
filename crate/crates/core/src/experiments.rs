//! Run configuration, presets and the multi-run experiment drivers shared
//! by the command-line tool and the acceptance checks.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{generate_phantoms, make_recon_pairs, make_sr_pairs, Dataset};
use crate::distill::{DistillationPlan, FdMethod};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, MetricsReport};
use crate::kspace::{generate_cartesian_mask, SamplingMask, DEFAULT_SIGMA_FRACTION};
use crate::models::{Architecture, CascadeConfig, VdsrConfig};
use crate::table::write_csv;
use crate::training::{
    finetune_student, finetune_student_kd, pretrain_student_fd, train_ablation, train_student_at, train_student_plain,
    train_teacher, AblationCombo, CheckpointRecord, EpochRecord, TrainConfig, TrainOutcome, TrainingData,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub acceleration: f64,
    pub center_lines: usize,
    #[serde(default = "default_sigma")]
    pub sigma_fraction: f64,
    pub seed: u64,
}

fn default_sigma() -> f64 {
    DEFAULT_SIGMA_FRACTION
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    Reconstruction,
    SuperResolution { factor: usize },
}

/// Everything a run depends on besides the code: data source, mask,
/// architectures, optimisation settings and where artifacts go.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: Task,
    /// Existing dataset directory; phantoms from `phantoms` otherwise.
    #[serde(default)]
    pub dataset_dir: Option<PathBuf>,
    pub phantoms: PhantomSpec,
    /// Existing mask JSON; generated from `mask` otherwise.
    #[serde(default)]
    pub mask_file: Option<PathBuf>,
    pub mask: MaskSpec,
    pub teacher: Architecture,
    pub student: Architecture,
    pub train: TrainConfig,
    #[serde(default)]
    pub teacher_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::config(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }
}

impl RunConfig {
    /// Reconstruction settings. `desk` runs in minutes on one CPU core;
    /// `paper` uses the full architectures and schedule.
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => Self {
                task: Task::Reconstruction,
                dataset_dir: None,
                phantoms: PhantomSpec { count: 200, size: 48, seed: 0 },
                mask_file: None,
                mask: MaskSpec { acceleration: 4.0, center_lines: 4, sigma_fraction: DEFAULT_SIGMA_FRACTION, seed: 0 },
                teacher: Architecture::DcCnn(CascadeConfig::new(3, 5, 16)),
                student: Architecture::DcCnn(CascadeConfig::new(3, 3, 16)),
                train: TrainConfig { epochs: 30, learning_rate: 1e-3, batch_size: 4, ..TrainConfig::default() },
                teacher_checkpoint: None,
                init_checkpoint: None,
                out_dir: PathBuf::from("runs/desk"),
            },
            Preset::Paper => Self {
                task: Task::Reconstruction,
                dataset_dir: None,
                phantoms: PhantomSpec { count: 1000, size: 256, seed: 0 },
                mask_file: None,
                mask: MaskSpec { acceleration: 4.0, center_lines: 20, sigma_fraction: DEFAULT_SIGMA_FRACTION, seed: 0 },
                teacher: Architecture::DcCnn(CascadeConfig::teacher()),
                student: Architecture::DcCnn(CascadeConfig::student()),
                train: TrainConfig { epochs: 150, learning_rate: 1e-4, batch_size: 4, ..TrainConfig::default() },
                teacher_checkpoint: None,
                init_checkpoint: None,
                out_dir: PathBuf::from("runs/paper"),
            },
        }
    }

    /// Super-resolution variant of a preset (VDSR teacher and student).
    pub fn sr_preset(preset: Preset) -> Self {
        let mut cfg = Self::preset(preset);
        cfg.task = Task::SuperResolution { factor: 2 };
        match preset {
            Preset::Desk => {
                cfg.teacher = Architecture::Vdsr(VdsrConfig::new(11, 16));
                cfg.student = Architecture::Vdsr(VdsrConfig::new(7, 16));
                cfg.out_dir = PathBuf::from("runs/desk-sr");
            }
            Preset::Paper => {
                cfg.teacher = Architecture::Vdsr(VdsrConfig::new(11, 64));
                cfg.student = Architecture::Vdsr(VdsrConfig::new(7, 64));
                cfg.out_dir = PathBuf::from("runs/paper-sr");
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        self.student.validate()?;
        self.train.validate()?;
        let dc = matches!(self.teacher, Architecture::DcCnn(_));
        match self.task {
            Task::Reconstruction if !dc => Err(Error::config("reconstruction runs need DC-CNN architectures")),
            Task::SuperResolution { .. } if dc => Err(Error::config("super-resolution runs need VDSR architectures")),
            Task::SuperResolution { factor: 0 } => Err(Error::config("task.factor must be >= 1")),
            _ => Ok(()),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(format!("invalid run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.dataset_dir {
            Some(dir) => Dataset::read(dir),
            None => generate_phantoms(self.phantoms.count, self.phantoms.size, self.phantoms.seed),
        }
    }

    pub fn load_mask(&self, width: usize) -> Result<SamplingMask> {
        let mask = match &self.mask_file {
            Some(path) => SamplingMask::from_json(&fs::read_to_string(path)?)?,
            None => generate_cartesian_mask(
                width,
                self.mask.acceleration,
                self.mask.center_lines,
                self.mask.sigma_fraction,
                self.mask.seed,
            )?,
        };
        if mask.width != width {
            return Err(Error::data(format!("mask width {} does not match slice width {width}", mask.width)));
        }
        Ok(mask)
    }

    /// Dataset, mask (reconstruction only) and training samples.
    pub fn prepare(&self) -> Result<Prepared> {
        let dataset = self.load_dataset()?;
        dataset.manifest.validate_for_training()?;
        match self.task {
            Task::Reconstruction => {
                let mask = self.load_mask(dataset.manifest.width)?;
                let set = make_recon_pairs(&dataset.records, &mask)?;
                Ok(Prepared { data: TrainingData::from_recon(&set)?, mask: Some(mask), dataset })
            }
            Task::SuperResolution { factor } => {
                let pairs = make_sr_pairs(&dataset.records, factor)?;
                Ok(Prepared { data: TrainingData::from_sr(&pairs)?, mask: None, dataset })
            }
        }
    }

    /// Same configuration with a different training seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.train.seed = seed;
        c
    }
}

pub struct Prepared {
    pub dataset: Dataset,
    pub mask: Option<SamplingMask>,
    pub data: TrainingData,
}

/// Teacher, plain student and the three-step KD student of one seed.
pub struct KdComparison {
    pub teacher: TrainOutcome,
    pub plain: TrainOutcome,
    pub at: TrainOutcome,
    pub kd: TrainOutcome,
}

impl KdComparison {
    pub fn run(cfg: &RunConfig, data: &TrainingData) -> Result<Self> {
        let teacher = train_teacher(&cfg.train, &cfg.teacher, data)?;
        Self::with_teacher(cfg, data, teacher)
    }

    pub fn with_teacher(cfg: &RunConfig, data: &TrainingData, teacher: TrainOutcome) -> Result<Self> {
        let plain = train_student_plain(&cfg.train, &cfg.student, data)?;
        let at = train_student_at(&cfg.train, &cfg.student, &teacher.best, data)?;
        let kd = finetune_student_kd(&cfg.train, &cfg.student, &teacher.best, Some(&at.best), data)?;
        Ok(Self { teacher, plain, at, kd })
    }

    /// Validation metrics of teacher, student and kd-student (best epochs).
    pub fn reports(&self, data: &TrainingData) -> Result<Vec<MetricsReport>> {
        Ok(vec![
            evaluate_model("teacher", &self.teacher.best.params, data)?,
            evaluate_model("student", &self.plain.best.params, data)?,
            evaluate_model("kd-student", &self.kd.best.params, data)?,
        ])
    }
}

/// One feature-distillation method: pre-training then reconstruction-only
/// fine-tuning.
pub struct FdRun {
    pub method: FdMethod,
    pub pretrain: TrainOutcome,
    pub finetune: TrainOutcome,
}

impl FdRun {
    pub fn final_val_loss(&self) -> f64 {
        self.finetune.last.final_val_loss().unwrap_or(f64::NAN)
    }
}

/// Runs `methods` against one teacher. An AT pre-training that already
/// exists can be passed in to avoid repeating it.
pub fn compare_fd(
    cfg: &RunConfig,
    data: &TrainingData,
    teacher: &CheckpointRecord,
    methods: &[FdMethod],
    at_pretrain: Option<&TrainOutcome>,
) -> Result<Vec<FdRun>> {
    let mut runs = Vec::new();
    for &method in methods {
        info!("feature distillation: {method}");
        let pretrain = match (method, at_pretrain) {
            (FdMethod::At, Some(at)) => at.clone(),
            _ => pretrain_student_fd(&cfg.train, &cfg.student, teacher, method, data)?,
        };
        let finetune = finetune_student(&cfg.train, &pretrain.best, data)?;
        runs.push(FdRun { method, pretrain, finetune });
    }
    Ok(runs)
}

/// `epoch,<name>...` table of validation losses, one column per history.
pub fn write_loss_curves(path: &Path, curves: &[(String, &[EpochRecord])]) -> Result<()> {
    let epochs = curves.iter().map(|(_, h)| h.len()).max().unwrap_or(0);
    let mut header = vec!["epoch"];
    header.extend(curves.iter().map(|(n, _)| n.as_str()));
    let rows = (0..epochs).map(|e| {
        let mut row = vec![(e + 1).to_string()];
        row.extend(curves.iter().map(|(_, h)| h.get(e).map_or(String::new(), |r| format!("{:e}", r.val_loss))));
        row
    });
    write_csv(path, &header, rows)
}

/// Final validation losses of the four ablation variants.
pub struct Ablation {
    pub runs: Vec<(AblationCombo, Vec<TrainOutcome>)>,
}

impl Ablation {
    pub fn run(cfg: &RunConfig, data: &TrainingData, teacher: &CheckpointRecord) -> Result<Self> {
        let runs = AblationCombo::ALL
            .into_iter()
            .map(|c| Ok((c, train_ablation(&cfg.train, c, &cfg.student, teacher, data)?)))
            .collect::<Result<_>>()?;
        Ok(Self { runs })
    }

    pub fn final_val_loss(&self, combo: AblationCombo) -> Option<f64> {
        self.runs.iter().find(|(c, _)| *c == combo).and_then(|(_, r)| r.last()?.last.final_val_loss())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionResult {
    pub teacher_conv: usize,
    pub student_conv: usize,
    pub val_loss: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Full KD procedure with attention transfer at the given convolution of
/// every cascade, for each `(teacher_conv, student_conv)` pair.
pub fn position_sweep(
    cfg: &RunConfig,
    data: &TrainingData,
    teacher: &CheckpointRecord,
    positions: &[(usize, usize)],
) -> Result<Vec<PositionResult>> {
    positions
        .iter()
        .map(|&(t, s)| {
            let mut train = cfg.train.clone();
            train.plan = Some(DistillationPlan::at_layers(&cfg.teacher, &cfg.student, t, s)?);
            let at = train_student_at(&train, &cfg.student, teacher, data)?;
            let kd = finetune_student_kd(&train, &cfg.student, teacher, Some(&at.best), data)?;
            let report = evaluate_model(&format!("t{t}-s{s}"), &kd.best.params, data)?;
            Ok(PositionResult {
                teacher_conv: t,
                student_conv: s,
                val_loss: kd.last.final_val_loss().unwrap_or(f64::NAN),
                psnr: report.summary.psnr_mean,
                ssim: report.summary.ssim_mean,
            })
        })
        .collect()
}
