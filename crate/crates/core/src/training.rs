//! Teacher/student optimisation: the three-step transfer procedure,
//! feature-distillation pre-training baselines, ablation variants, Adam and
//! checkpoints.
//!
//! Every step starts from a fresh optimizer. Batch order is a pure function
//! of `(seed, epoch)`, so a run resumed from a checkpoint replays the same
//! losses as an uninterrupted one.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info};
use num_complex::Complex;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ReconSet, Split, SrPair};
use crate::distill::{
    at_pair_grad, attention_map, attentive_hint_weights_from_errors, fitnet_loss_grad, fsp_loss_grad, pixel_loss_grad,
    sp_loss_grad, Adapter, DistillationPlan, FdMethod, LossNorm, LossWeights,
};
use crate::error::{Error, Result};
use crate::models::{build, Architecture, FeatureView, NetInput, Network, NetworkParameters, TapGrad, Tape};
use crate::table::write_csv;

/// Adam with the usual defaults (`beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`).
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl Adam {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; len], v: vec![0.0; len] }
    }

    pub fn update(&mut self, params: &mut [f32], grads: &[f32]) {
        debug_assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let lr = (self.learning_rate * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * *m / (v.sqrt() + eps);
        }
    }
}

/// Which procedure produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Stage {
    /// Step 1: teacher on the reconstruction loss.
    Teacher,
    /// Student on the reconstruction loss alone.
    StudentPlain,
    /// Step 2: student on the attention-transfer loss alone.
    StudentAtPretrain,
    /// Step 3: student on `alpha * L_rec + (1 - alpha) * L_imit`.
    StudentKdFinetune,
    /// Student on a baseline feature-distillation loss alone.
    StudentFdPretrain(FdMethod),
    /// Reconstruction-only fine-tuning of a feature-distilled student.
    StudentFinetune(FdMethod),
}

impl Stage {
    pub fn tag(&self) -> String {
        match self {
            Stage::Teacher => "teacher".into(),
            Stage::StudentPlain => "student".into(),
            Stage::StudentAtPretrain => "at".into(),
            Stage::StudentKdFinetune => "kd".into(),
            Stage::StudentFdPretrain(m) => format!("fd-{m}"),
            Stage::StudentFinetune(m) => format!("ft-{m}"),
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        Ok(match tag {
            "teacher" => Stage::Teacher,
            "student" => Stage::StudentPlain,
            "at" => Stage::StudentAtPretrain,
            "kd" => Stage::StudentKdFinetune,
            t if t.starts_with("fd-") => Stage::StudentFdPretrain(FdMethod::parse(&t[3..])?),
            t if t.starts_with("ft-") => Stage::StudentFinetune(FdMethod::parse(&t[3..])?),
            other => return Err(Error::config(format!("unknown stage tag {other:?}"))),
        })
    }

    /// Distillation method a checkpoint carries, for routing fine-tuning.
    pub fn method(&self) -> Option<FdMethod> {
        match self {
            Stage::StudentAtPretrain => Some(FdMethod::At),
            Stage::StudentFdPretrain(m) | Stage::StudentFinetune(m) => Some(*m),
            _ => None,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

impl From<Stage> for String {
    fn from(s: Stage) -> String {
        s.tag()
    }
}

impl TryFrom<String> for Stage {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        Stage::parse(&s).map_err(|e| e.to_string())
    }
}

/// Loss combinations of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationCombo {
    Rec,
    RecImit,
    RecAt,
    RecImitAt,
}

impl AblationCombo {
    pub const ALL: [AblationCombo; 4] =
        [AblationCombo::Rec, AblationCombo::RecImit, AblationCombo::RecAt, AblationCombo::RecImitAt];

    pub fn name(self) -> &'static str {
        match self {
            AblationCombo::Rec => "rec",
            AblationCombo::RecImit => "rec+imit",
            AblationCombo::RecAt => "rec+at",
            AblationCombo::RecImitAt => "rec+imit+at",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        AblationCombo::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| {
            Error::config(format!("unknown ablation combo {s:?} (expected rec, rec+imit, rec+at, rec+imit+at)"))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Weight of the reconstruction term against the imitation term.
    pub alpha: f64,
    pub seed: u64,
    #[serde(default)]
    pub loss_norm: LossNorm,
    /// Tap pairs for attention/feature distillation; the method's default
    /// positions are used when absent.
    #[serde(default)]
    pub plan: Option<DistillationPlan>,
    /// Lets the imitation step start from a fresh student (ablation mode).
    #[serde(default)]
    pub allow_missing_init: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            learning_rate: 1e-4,
            batch_size: 4,
            alpha: 0.5,
            seed: 0,
            loss_norm: LossNorm::Mse,
            plan: None,
            allow_missing_init: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        LossWeights::new(self.alpha)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_seconds: f64,
}

/// Network in engine precision together with per-sample data.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub input: Vec<Complex<f32>>,
    pub measured: Option<Vec<Complex<f32>>>,
    pub target: Vec<Complex<f32>>,
}

/// Train/val samples at one image size, sharing one mask (if any).
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub height: usize,
    pub width: usize,
    pub lines: Option<Vec<bool>>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

fn to_f32(data: &[num_complex::Complex64]) -> Vec<Complex<f32>> {
    data.iter().map(|z| Complex::new(z.re as f32, z.im as f32)).collect()
}

impl TrainingData {
    pub fn from_recon(set: &ReconSet) -> Result<Self> {
        let first = set.pairs.first().ok_or_else(|| Error::data("reconstruction set is empty"))?;
        let (height, width) = (first.target.height, first.target.width);
        let mut data = Self { height, width, lines: Some(set.mask.lines.clone()), train: vec![], val: vec![] };
        for p in &set.pairs {
            if p.target.height != height || p.target.width != width {
                return Err(Error::data("slices differ in size"));
            }
            let s = Sample {
                id: p.id.clone(),
                input: to_f32(&p.zero_filled.data),
                measured: Some(to_f32(&p.measured.data)),
                target: to_f32(&p.target.data),
            };
            match p.split {
                Split::Train => data.train.push(s),
                Split::Val => data.val.push(s),
            }
        }
        data.check()?;
        Ok(data)
    }

    /// Super-resolution pairs; the network sees the real part of the
    /// interpolated input.
    pub fn from_sr(pairs: &[SrPair]) -> Result<Self> {
        let first = pairs.first().ok_or_else(|| Error::data("super-resolution set is empty"))?;
        let (height, width) = (first.target.height, first.target.width);
        let mut data = Self { height, width, lines: None, train: vec![], val: vec![] };
        for p in pairs {
            let s = Sample {
                id: p.id.clone(),
                input: p.interpolated_lr.data.iter().map(|z| Complex::new(z.re as f32, 0.0)).collect(),
                measured: None,
                target: to_f32(&p.target.data),
            };
            match p.split {
                Split::Train => data.train.push(s),
                Split::Val => data.val.push(s),
            }
        }
        data.check()?;
        Ok(data)
    }

    fn check(&self) -> Result<()> {
        if self.train.is_empty() || self.val.is_empty() {
            return Err(Error::data("training needs at least one train and one val slice"));
        }
        Ok(())
    }

    fn input<'a>(&'a self, s: &'a Sample) -> NetInput<'a, f32> {
        NetInput { image: &s.input, measured: s.measured.as_deref(), lines: self.lines.as_deref() }
    }
}

/// Persisted training state.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
    pub params: NetworkParameters<f32>,
    pub optimizer: Option<Adam>,
    pub adapters: Vec<Adapter<f32>>,
    pub adapter_optimizer: Option<Adam>,
    pub best: Option<(usize, Vec<f32>)>,
    pub history: Vec<EpochRecord>,
    pub train_config: Option<TrainConfig>,
}

impl CheckpointRecord {
    pub fn method(&self) -> Option<FdMethod> {
        self.stage.method()
    }

    /// Validation loss of the last recorded epoch.
    pub fn final_val_loss(&self) -> Option<f64> {
        self.history.last().map(|h| h.val_loss)
    }
}

/// Best-validation and last-epoch checkpoints of one run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: CheckpointRecord,
    pub last: CheckpointRecord,
}

impl TrainOutcome {
    pub fn history(&self) -> &[EpochRecord] {
        &self.last.history
    }
}

#[derive(Debug, Clone)]
enum Objective {
    /// `alpha * L_rec + (1 - alpha) * L_imit`.
    Reconstruction {
        alpha: f64,
    },
    Feature(DistillationPlan),
}

struct TeacherView {
    output: Vec<Complex<f32>>,
    /// Raw tapped activations, one per plan pair (empty for AT).
    feats: Vec<Vec<f32>>,
    /// Unit attention maps, one per plan pair (AT only).
    units: Vec<Vec<f64>>,
    /// Teacher reconstruction error against the target.
    error: f64,
}

/// Frozen teacher evaluated once per sample.
struct TeacherCache {
    train: Vec<TeacherView>,
    val: Vec<TeacherView>,
}

fn teacher_view(
    net: &Network<f32>,
    params: &NetworkParameters<f32>,
    data: &TrainingData,
    sample: &Sample,
    plan: Option<&DistillationPlan>,
) -> Result<TeacherView> {
    let tape = net.forward(params, &data.input(sample))?;
    let mut feats = Vec::new();
    let mut units = Vec::new();
    if let Some(plan) = plan {
        for pair in &plan.pairs {
            let view = tape.feature(pair.teacher);
            if plan.method == FdMethod::At {
                units.push(attention_map(view).normalized()?);
            } else {
                feats.push(view.data.to_vec());
            }
        }
    }
    let error = pixel_loss_grad(tape.output(), &sample.target, LossNorm::Mse).0;
    Ok(TeacherView { output: tape.into_output(), feats, units, error })
}

impl TeacherCache {
    fn build(teacher: &NetworkParameters<f32>, data: &TrainingData, plan: Option<&DistillationPlan>) -> Result<Self> {
        let net = Network::new(&teacher.arch, data.height, data.width)?;
        let run = |samples: &[Sample]| -> Result<Vec<TeacherView>> {
            samples.iter().map(|s| teacher_view(&net, teacher, data, s, plan)).collect()
        };
        Ok(Self { train: run(&data.train)?, val: run(&data.val)? })
    }
}

/// One optimisation run. Construct with [`Session::start`] or
/// [`Session::resume`], drive with [`Session::run_epoch`].
pub struct Session<'a> {
    stage: Stage,
    cfg: TrainConfig,
    data: &'a TrainingData,
    net: Network<f32>,
    params: NetworkParameters<f32>,
    adam: Adam,
    adapters: Vec<Adapter<f32>>,
    adapter_adam: Option<Adam>,
    objective: Objective,
    teacher: Option<TeacherCache>,
    epoch: usize,
    history: Vec<EpochRecord>,
    best: Option<(usize, f64, Vec<f32>)>,
}

struct BatchResult {
    loss: f64,
    grads: Vec<f32>,
    adapter_grads: Vec<f32>,
}

impl<'a> Session<'a> {
    fn start(
        stage: Stage,
        cfg: &TrainConfig,
        data: &'a TrainingData,
        params: NetworkParameters<f32>,
        objective: Objective,
        teacher: Option<&NetworkParameters<f32>>,
    ) -> Result<Self> {
        cfg.validate()?;
        let net = Network::new(&params.arch, data.height, data.width)?;
        let needs_teacher = match &objective {
            Objective::Reconstruction { alpha } => *alpha < 1.0,
            Objective::Feature(_) => true,
        };
        let plan = match &objective {
            Objective::Feature(p) => Some(p),
            _ => None,
        };
        let cache = match (needs_teacher, teacher) {
            (true, Some(t)) => Some(TeacherCache::build(t, data, plan)?),
            (true, None) => return Err(Error::config(format!("stage {stage} needs a teacher checkpoint"))),
            (false, _) => None,
        };
        let mut adapters = Vec::new();
        if let (Objective::Feature(plan), Some(t)) = (&objective, teacher) {
            plan.validate(&t.arch, &params.arch)?;
            if matches!(plan.method, FdMethod::Fn | FdMethod::Ah) {
                let channels: Vec<(usize, usize)> = plan
                    .pairs
                    .iter()
                    .map(|p| (params.arch.tap_channels(p.student.conv), t.arch.tap_channels(p.teacher.conv)))
                    .collect();
                // one adapter per pair, or none, so indices line up
                if channels.iter().any(|(s, t)| s != t) {
                    adapters = channels.iter().map(|&(s, t)| Adapter::new(s, t)).collect();
                }
            }
        }
        let adapter_len: usize = adapters.iter().map(|a| a.params.len()).sum();
        let adapter_adam = (adapter_len > 0).then(|| Adam::new(adapter_len, cfg.learning_rate));
        Ok(Self {
            stage,
            cfg: cfg.clone(),
            data,
            net,
            adam: Adam::new(params.len(), cfg.learning_rate),
            params,
            adapters,
            adapter_adam,
            objective,
            teacher: cache,
            epoch: 0,
            history: Vec::new(),
            best: None,
        })
    }

    /// Continue a run from a last-epoch checkpoint.
    pub fn resume(
        record: &CheckpointRecord,
        cfg: &TrainConfig,
        data: &'a TrainingData,
        teacher: Option<&NetworkParameters<f32>>,
    ) -> Result<Self> {
        let objective = objective_for(record.stage, cfg, teacher.map(|t| &t.arch), &record.params.arch)?;
        let mut s = Self::start(record.stage, cfg, data, record.params.clone(), objective, teacher)?;
        if let Some(opt) = &record.optimizer {
            s.adam = opt.clone();
        }
        if !record.adapters.is_empty() {
            s.adapters = record.adapters.clone();
            s.adapter_adam = record.adapter_optimizer.clone();
        }
        s.epoch = record.epoch;
        s.history = record.history.clone();
        s.best = record.best.as_ref().map(|(e, p)| {
            let loss = s.history.iter().find(|h| h.epoch == *e).map_or(f64::INFINITY, |h| h.val_loss);
            (*e, loss, p.clone())
        });
        Ok(s)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn params(&self) -> &NetworkParameters<f32> {
        &self.params
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    fn batch_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.epoch as u64 + 1);
        order.shuffle(&mut rng);
        order
    }

    fn teacher_views(&self, split: Split) -> Option<&[TeacherView]> {
        self.teacher.as_ref().map(|t| match split {
            Split::Train => t.train.as_slice(),
            Split::Val => t.val.as_slice(),
        })
    }

    /// Loss of a batch and, when `with_grads`, its parameter gradient.
    fn evaluate_batch(&self, split: Split, indices: &[usize], with_grads: bool) -> Result<BatchResult> {
        let samples = match split {
            Split::Train => &self.data.train,
            Split::Val => &self.data.val,
        };
        let teacher = self.teacher_views(split);
        let b = indices.len() as f64;
        let tapes: Vec<Tape<f32>> = indices
            .iter()
            .map(|&i| self.net.forward(&self.params, &self.data.input(&samples[i])))
            .collect::<Result<_>>()?;

        // per-sample output gradients and tap gradients
        let mut out_grads: Vec<Option<Vec<Complex<f32>>>> = vec![None; indices.len()];
        let mut tap_grads: Vec<Vec<TapGrad<f32>>> = (0..indices.len()).map(|_| Vec::new()).collect();
        let mut adapter_grads = vec![0.0f32; self.adapters.iter().map(|a| a.params.len()).sum()];
        let mut loss = 0.0;
        let scale = 1.0 / b;

        match &self.objective {
            Objective::Reconstruction { alpha } => {
                let alpha = *alpha;
                for (k, (&i, tape)) in indices.iter().zip(&tapes).enumerate() {
                    let s = &samples[i];
                    let (rec, g_rec) = pixel_loss_grad(tape.output(), &s.target, self.cfg.loss_norm);
                    if split == Split::Val {
                        // validation reports the reconstruction loss alone
                        loss += rec;
                        continue;
                    }
                    let mut g: Vec<Complex<f32>> = g_rec.iter().map(|z| *z * (alpha * scale) as f32).collect();
                    let mut l = alpha * rec;
                    if alpha < 1.0 {
                        let tv = &teacher.expect("teacher cached")[i];
                        let (imit, g_imit) = pixel_loss_grad(tape.output(), &tv.output, self.cfg.loss_norm);
                        l += (1.0 - alpha) * imit;
                        let w = ((1.0 - alpha) * scale) as f32;
                        for (a, z) in g.iter_mut().zip(&g_imit) {
                            *a += *z * w;
                        }
                    }
                    loss += l;
                    out_grads[k] = Some(g);
                }
            }
            Objective::Feature(plan) => {
                let tv = teacher.expect("teacher cached");
                match plan.method {
                    FdMethod::At => {
                        for (k, (&i, tape)) in indices.iter().zip(&tapes).enumerate() {
                            for (j, pair) in plan.pairs.iter().enumerate() {
                                let (l, g) = at_pair_grad(tape.feature(pair.student), &tv[i].units[j])?;
                                loss += l;
                                tap_grads[k].push(TapGrad { tap: pair.student, grad: scaled(g, scale) });
                            }
                        }
                    }
                    FdMethod::Fn | FdMethod::Ah => {
                        let weights = if plan.method == FdMethod::Ah {
                            let errors: Vec<f64> = indices.iter().map(|&i| tv[i].error).collect();
                            attentive_hint_weights_from_errors(&errors, plan.ah_beta)
                        } else {
                            vec![1.0; indices.len()]
                        };
                        for (k, (&i, tape)) in indices.iter().zip(&tapes).enumerate() {
                            let mut a_off = 0;
                            for (j, pair) in plan.pairs.iter().enumerate() {
                                let sv = tape.feature(pair.student);
                                let tf = &tv[i].feats[j];
                                let tview = FeatureView {
                                    channels: tf.len() / sv.plane.len(),
                                    plane: sv.plane,
                                    data: tf.as_slice(),
                                };
                                let adapter = self.adapters.get(j);
                                let (l, gs, ga) = fitnet_loss_grad(sv, tview, adapter)?;
                                let w = weights[k];
                                loss += w * l;
                                tap_grads[k].push(TapGrad { tap: pair.student, grad: scaled(gs, w * scale) });
                                if let Some(a) = adapter {
                                    for (acc, g) in adapter_grads[a_off..a_off + a.params.len()].iter_mut().zip(ga) {
                                        *acc += g * (w * scale) as f32;
                                    }
                                    a_off += a.params.len();
                                }
                            }
                        }
                    }
                    FdMethod::Fsp => {
                        for (k, (&i, tape)) in indices.iter().zip(&tapes).enumerate() {
                            let plane = tape.feature(plan.pairs[0].student).plane;
                            let tviews: Vec<FeatureView<'_, f32>> = tv[i]
                                .feats
                                .iter()
                                .map(|f| FeatureView { channels: f.len() / plane.len(), plane, data: f.as_slice() })
                                .collect();
                            let spairs: Vec<_> = plan
                                .pairs
                                .chunks_exact(2)
                                .map(|c| (tape.feature(c[0].student), tape.feature(c[1].student)))
                                .collect();
                            let tpairs: Vec<_> = tviews.chunks_exact(2).map(|c| (c[0], c[1])).collect();
                            let (l, grads) = fsp_loss_grad(&spairs, &tpairs)?;
                            loss += l;
                            for (c, (ga, gb)) in plan.pairs.chunks_exact(2).zip(grads) {
                                tap_grads[k].push(TapGrad { tap: c[0].student, grad: scaled(ga, scale) });
                                tap_grads[k].push(TapGrad { tap: c[1].student, grad: scaled(gb, scale) });
                            }
                        }
                    }
                    FdMethod::Sp => {
                        if indices.len() < 2 {
                            return Ok(BatchResult { loss: f64::NAN, grads: vec![], adapter_grads: vec![] });
                        }
                        for (j, pair) in plan.pairs.iter().enumerate() {
                            let s_rows: Vec<&[f32]> = tapes.iter().map(|t| t.feature(pair.student).data).collect();
                            let t_rows: Vec<&[f32]> = indices.iter().map(|&i| tv[i].feats[j].as_slice()).collect();
                            let (l, grads) = sp_loss_grad(&s_rows, &t_rows)?;
                            // batch-level loss, reported per sample like the others
                            loss += l * b;
                            for (k, g) in grads.into_iter().enumerate() {
                                tap_grads[k].push(TapGrad { tap: pair.student, grad: g });
                            }
                        }
                    }
                }
            }
        }

        let mut grads = Vec::new();
        if with_grads {
            grads = vec![0.0f32; self.params.len()];
            for (k, (&i, tape)) in indices.iter().zip(&tapes).enumerate() {
                if out_grads[k].is_none() && tap_grads[k].is_empty() {
                    continue;
                }
                self.net.backward(
                    &self.params,
                    tape,
                    &self.data.input(&samples[i]),
                    out_grads[k].as_deref(),
                    &tap_grads[k],
                    &mut grads,
                )?;
            }
        }
        Ok(BatchResult { loss: loss / b, grads, adapter_grads })
    }

    /// One pass over the training split followed by validation.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let started = Instant::now();
        let epoch = self.epoch + 1;
        let order = self.batch_order();
        let (mut total, mut count) = (0.0, 0usize);
        for batch in order.chunks(self.cfg.batch_size) {
            let r = self.evaluate_batch(Split::Train, batch, true)?;
            if r.grads.is_empty() {
                debug!("skipping batch of {} for {}", batch.len(), self.stage);
                continue;
            }
            if !r.loss.is_finite() || r.grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training { epoch, reason: format!("non-finite {} loss", self.stage) });
            }
            total += r.loss * batch.len() as f64;
            count += batch.len();
            self.adam.update(&mut self.params.values, &r.grads);
            if let Some(opt) = &mut self.adapter_adam {
                let mut flat: Vec<f32> = self.adapters.iter().flat_map(|a| a.params.iter().copied()).collect();
                opt.update(&mut flat, &r.adapter_grads);
                let mut off = 0;
                for a in &mut self.adapters {
                    let n = a.params.len();
                    a.params.copy_from_slice(&flat[off..off + n]);
                    off += n;
                }
            }
        }
        let val_loss = self.validation_loss()?;
        if !val_loss.is_finite() {
            return Err(Error::Training { epoch, reason: format!("non-finite {} validation loss", self.stage) });
        }
        let record = EpochRecord {
            epoch,
            train_loss: if count > 0 { total / count as f64 } else { f64::NAN },
            val_loss,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        debug!("{} epoch {epoch}: train {:.6e} val {:.6e}", self.stage, record.train_loss, record.val_loss);
        if self.best.as_ref().is_none_or(|(_, l, _)| val_loss < *l) {
            self.best = Some((epoch, val_loss, self.params.values.clone()));
        }
        self.epoch = epoch;
        self.history.push(record.clone());
        Ok(record)
    }

    fn validation_loss(&self) -> Result<f64> {
        let n = self.data.val.len();
        let idx: Vec<usize> = (0..n).collect();
        let (mut total, mut count) = (0.0, 0usize);
        for batch in idx.chunks(self.cfg.batch_size) {
            let r = self.evaluate_batch(Split::Val, batch, false)?;
            if r.loss.is_nan() && batch.len() < 2 {
                continue;
            }
            total += r.loss * batch.len() as f64;
            count += batch.len();
        }
        if count == 0 {
            return Err(Error::data("validation split too small for this objective"));
        }
        Ok(total / count as f64)
    }

    /// Snapshot of the current state.
    pub fn checkpoint(&self) -> CheckpointRecord {
        CheckpointRecord {
            stage: self.stage,
            epoch: self.epoch,
            step: self.adam.step,
            seed: self.cfg.seed,
            params: self.params.clone(),
            optimizer: Some(self.adam.clone()),
            adapters: self.adapters.clone(),
            adapter_optimizer: self.adapter_adam.clone(),
            best: self.best.as_ref().map(|(e, _, p)| (*e, p.clone())),
            history: self.history.clone(),
            train_config: Some(self.cfg.clone()),
        }
    }

    /// Run the remaining epochs and return best and last checkpoints.
    pub fn finish(mut self) -> Result<TrainOutcome> {
        while self.epoch < self.cfg.epochs {
            self.run_epoch()?;
        }
        let last = self.checkpoint();
        let mut best = last.clone();
        if let Some((epoch, _, values)) = &self.best {
            best.params.values = values.clone();
            best.epoch = *epoch;
        }
        info!(
            "{} done: {} epochs, best epoch {} (val {:.6e})",
            self.stage,
            self.epoch,
            best.epoch,
            self.best.as_ref().map_or(f64::NAN, |b| b.1)
        );
        Ok(TrainOutcome { best, last })
    }
}

fn scaled(g: Vec<f32>, s: f64) -> Vec<f32> {
    let s = s as f32;
    g.into_iter().map(|v| v * s).collect()
}

fn objective_for(
    stage: Stage,
    cfg: &TrainConfig,
    teacher: Option<&Architecture>,
    student: &Architecture,
) -> Result<Objective> {
    let plan_for = |method: FdMethod| -> Result<DistillationPlan> {
        let t = teacher.ok_or_else(|| Error::config(format!("stage {stage} needs a teacher checkpoint")))?;
        match &cfg.plan {
            Some(p) if p.method == method => {
                p.validate(t, student)?;
                Ok(p.clone())
            }
            _ => DistillationPlan::default_for(method, t, student),
        }
    };
    Ok(match stage {
        Stage::Teacher | Stage::StudentPlain | Stage::StudentFinetune(_) => Objective::Reconstruction { alpha: 1.0 },
        Stage::StudentKdFinetune => Objective::Reconstruction { alpha: cfg.alpha },
        Stage::StudentAtPretrain => Objective::Feature(plan_for(FdMethod::At)?),
        Stage::StudentFdPretrain(FdMethod::At) => {
            return Err(Error::config("use the attention-transfer stage for AT pre-training"))
        }
        Stage::StudentFdPretrain(m) => Objective::Feature(plan_for(m)?),
    })
}

fn run(
    stage: Stage,
    cfg: &TrainConfig,
    data: &TrainingData,
    init: NetworkParameters<f32>,
    teacher: Option<&NetworkParameters<f32>>,
) -> Result<TrainOutcome> {
    let objective = objective_for(stage, cfg, teacher.map(|t| &t.arch), &init.arch)?;
    info!("training {stage} for {} epochs ({} params)", cfg.epochs, init.len());
    Session::start(stage, cfg, data, init, objective, teacher)?.finish()
}

/// Step 1: teacher on the reconstruction loss.
pub fn train_teacher(cfg: &TrainConfig, arch: &Architecture, data: &TrainingData) -> Result<TrainOutcome> {
    run(Stage::Teacher, cfg, data, build(arch, cfg.seed)?, None)
}

/// Student without teacher assistance.
pub fn train_student_plain(cfg: &TrainConfig, arch: &Architecture, data: &TrainingData) -> Result<TrainOutcome> {
    run(Stage::StudentPlain, cfg, data, build(arch, cfg.seed)?, None)
}

/// Step 2: student on attention transfer alone, teacher frozen.
pub fn train_student_at(
    cfg: &TrainConfig,
    arch: &Architecture,
    teacher: &CheckpointRecord,
    data: &TrainingData,
) -> Result<TrainOutcome> {
    run(Stage::StudentAtPretrain, cfg, data, build(arch, cfg.seed)?, Some(&teacher.params))
}

/// Step 3: student from the Step-2 weights on `alpha L_rec + (1-alpha) L_imit`.
///
/// Without a Step-2 checkpoint this refuses to run unless
/// `cfg.allow_missing_init` is set, in which case a fresh student of
/// `arch` is used.
pub fn finetune_student_kd(
    cfg: &TrainConfig,
    arch: &Architecture,
    teacher: &CheckpointRecord,
    at_ckpt: Option<&CheckpointRecord>,
    data: &TrainingData,
) -> Result<TrainOutcome> {
    let init = match at_ckpt {
        Some(c) => {
            if c.stage != Stage::StudentAtPretrain && !cfg.allow_missing_init {
                return Err(Error::config(format!(
                    "knowledge-distillation fine-tuning expects an attention-transfer checkpoint, got {}",
                    c.stage
                )));
            }
            c.params.clone()
        }
        None if cfg.allow_missing_init => build(arch, cfg.seed)?,
        None => {
            return Err(Error::config(
                "knowledge-distillation fine-tuning needs the attention-transfer checkpoint (set allow_missing_init to override)",
            ))
        }
    };
    run(Stage::StudentKdFinetune, cfg, data, init, Some(&teacher.params))
}

/// Baseline feature-distillation pre-training (FN, FSP, SP or AH).
pub fn pretrain_student_fd(
    cfg: &TrainConfig,
    arch: &Architecture,
    teacher: &CheckpointRecord,
    method: FdMethod,
    data: &TrainingData,
) -> Result<TrainOutcome> {
    let stage = match method {
        FdMethod::At => Stage::StudentAtPretrain,
        m => Stage::StudentFdPretrain(m),
    };
    run(stage, cfg, data, build(arch, cfg.seed)?, Some(&teacher.params))
}

/// Reconstruction-only fine-tuning (`alpha = 1`) of a distilled student.
pub fn finetune_student(cfg: &TrainConfig, init: &CheckpointRecord, data: &TrainingData) -> Result<TrainOutcome> {
    let method = init
        .method()
        .ok_or_else(|| Error::config(format!("checkpoint stage {} carries no distillation method", init.stage)))?;
    let mut cfg = cfg.clone();
    cfg.alpha = 1.0;
    run(Stage::StudentFinetune(method), &cfg, data, init.params.clone(), None)
}

/// One ablation variant. Returns the runs in execution order; the last is
/// the variant's final student.
pub fn train_ablation(
    cfg: &TrainConfig,
    combo: AblationCombo,
    arch: &Architecture,
    teacher: &CheckpointRecord,
    data: &TrainingData,
) -> Result<Vec<TrainOutcome>> {
    Ok(match combo {
        AblationCombo::Rec => vec![train_student_plain(cfg, arch, data)?],
        AblationCombo::RecImit => {
            let mut c = cfg.clone();
            c.allow_missing_init = true;
            vec![finetune_student_kd(&c, arch, teacher, None, data)?]
        }
        AblationCombo::RecAt => {
            let at = train_student_at(cfg, arch, teacher, data)?;
            let ft = finetune_student(cfg, &at.best, data)?;
            vec![at, ft]
        }
        AblationCombo::RecImitAt => {
            let at = train_student_at(cfg, arch, teacher, data)?;
            let kd = finetune_student_kd(cfg, arch, teacher, Some(&at.best), data)?;
            vec![at, kd]
        }
    })
}

// ---------------------------------------------------------------------------
// checkpoint files

const CKPT_MAGIC: &[u8; 4] = b"KDCK";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Section {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    stage: Stage,
    epoch: usize,
    step: u64,
    seed: u64,
    architecture: Architecture,
    config_hash: String,
    init_seed: u64,
    best_epoch: Option<usize>,
    adam: Option<AdamHeader>,
    adapter_adam: Option<AdamHeader>,
    adapters: Vec<(usize, usize)>,
    history: Vec<EpochRecord>,
    train_config: Option<TrainConfig>,
    sections: Vec<Section>,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

impl From<&Adam> for AdamHeader {
    fn from(a: &Adam) -> Self {
        Self { learning_rate: a.learning_rate, beta1: a.beta1, beta2: a.beta2, eps: a.eps, step: a.step }
    }
}

/// Layout: `"KDCK"`, `u32` version, `u64` header length, JSON header, then
/// the little-endian `f32` sections listed in the header, in order.
pub fn save_checkpoint(path: &Path, record: &CheckpointRecord) -> Result<()> {
    let mut sections: Vec<(&str, &[f32])> = vec![("params", &record.params.values)];
    if let Some(a) = &record.optimizer {
        sections.push(("adam_m", &a.m));
        sections.push(("adam_v", &a.v));
    }
    if let Some((_, p)) = &record.best {
        sections.push(("best_params", p));
    }
    for a in &record.adapters {
        sections.push(("adapter", &a.params));
    }
    if let Some(a) = &record.adapter_optimizer {
        sections.push(("adapter_adam_m", &a.m));
        sections.push(("adapter_adam_v", &a.v));
    }
    let header = CheckpointHeader {
        stage: record.stage,
        epoch: record.epoch,
        step: record.step,
        seed: record.seed,
        architecture: record.params.arch.clone(),
        config_hash: record.params.config_hash(),
        init_seed: record.params.seed,
        best_epoch: record.best.as_ref().map(|b| b.0),
        adam: record.optimizer.as_ref().map(AdamHeader::from),
        adapter_adam: record.adapter_optimizer.as_ref().map(AdamHeader::from),
        adapters: record.adapters.iter().map(|a| (a.shape.in_ch, a.shape.out_ch)).collect(),
        history: record.history.clone(),
        train_config: record.train_config.clone(),
        sections: sections.iter().map(|(n, d)| Section { name: n.to_string(), len: d.len() }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + 4 * sections.iter().map(|s| s.1.len()).sum::<usize>());
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, data) in &sections {
        for v in data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointRecord> {
    let buf = fs::read(path).map_err(|e| Error::data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let bad = || Error::data(format!("{} is not a valid checkpoint", path.display()));
    if buf.len() < 16 || &buf[..4] != CKPT_MAGIC {
        return Err(bad());
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
    if version != CKPT_VERSION {
        return Err(Error::data(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes")) as usize;
    let header: CheckpointHeader = serde_json::from_slice(buf.get(16..16 + hlen).ok_or_else(bad)?)?;
    let mut off = 16 + hlen;
    let mut take = |len: usize| -> Result<Vec<f32>> {
        let bytes = buf.get(off..off + 4 * len).ok_or_else(bad)?;
        off += 4 * len;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    };
    let mut params = None;
    let (mut m, mut v, mut best, mut am, mut av) = (None, None, None, None, None);
    let mut adapter_params = Vec::new();
    for s in &header.sections {
        let data = take(s.len)?;
        match s.name.as_str() {
            "params" => params = Some(data),
            "adam_m" => m = Some(data),
            "adam_v" => v = Some(data),
            "best_params" => best = Some(data),
            "adapter" => adapter_params.push(data),
            "adapter_adam_m" => am = Some(data),
            "adapter_adam_v" => av = Some(data),
            other => return Err(Error::data(format!("unknown checkpoint section {other:?}"))),
        }
    }
    let values = params.ok_or_else(bad)?;
    if values.len() != header.architecture.parameter_count() {
        return Err(Error::data("checkpoint parameter count does not match its architecture"));
    }
    let adam_from = |h: &Option<AdamHeader>, m: Option<Vec<f32>>, v: Option<Vec<f32>>| match (h, m, v) {
        (Some(h), Some(m), Some(v)) => Some(Adam {
            learning_rate: h.learning_rate,
            beta1: h.beta1,
            beta2: h.beta2,
            eps: h.eps,
            step: h.step,
            m,
            v,
        }),
        _ => None,
    };
    let adapters = header
        .adapters
        .iter()
        .zip(adapter_params)
        .map(|(&(i, o), p)| Adapter { shape: crate::nn::ConvShape::new(i, o, 1), params: p })
        .collect();
    Ok(CheckpointRecord {
        stage: header.stage,
        epoch: header.epoch,
        step: header.step,
        seed: header.seed,
        params: NetworkParameters { arch: header.architecture, seed: header.init_seed, values },
        optimizer: adam_from(&header.adam, m, v),
        adapters,
        adapter_optimizer: adam_from(&header.adapter_adam, am, av),
        best: header.best_epoch.zip(best),
        history: header.history,
        train_config: header.train_config,
    })
}

/// Output directory of one `train` invocation.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root.join("checkpoints"))?;
        fs::create_dir_all(root.join("masks"))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn checkpoint_path(&self, stage: Stage, epoch: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("{}_{epoch}.ckpt", stage.tag()))
    }

    pub fn best_checkpoint_path(&self, stage: Stage) -> PathBuf {
        self.root.join("checkpoints").join(format!("{}_best.ckpt", stage.tag()))
    }

    /// Writes `{stage}_{epoch}.ckpt` for the last and best epochs,
    /// `{stage}_best.ckpt`, and the history files.
    pub fn save_outcome(&self, outcome: &TrainOutcome) -> Result<()> {
        let stage = outcome.last.stage;
        save_checkpoint(&self.checkpoint_path(stage, outcome.last.epoch), &outcome.last)?;
        save_checkpoint(&self.checkpoint_path(stage, outcome.best.epoch), &outcome.best)?;
        save_checkpoint(&self.best_checkpoint_path(stage), &outcome.best)?;
        write_history(&self.root, stage, outcome.history())
    }
}

/// `history.csv` (with wall-clock seconds) and `losses.csv` (losses only,
/// byte-stable across identical runs). Stage-prefixed copies are written
/// alongside so multi-stage runs keep every history.
pub fn write_history(dir: &Path, stage: Stage, history: &[EpochRecord]) -> Result<()> {
    let full = |path: &Path| {
        write_csv(
            path,
            &["epoch", "train_loss", "val_loss", "wall_seconds"],
            history.iter().map(|h| {
                vec![
                    h.epoch.to_string(),
                    format!("{:e}", h.train_loss),
                    format!("{:e}", h.val_loss),
                    format!("{:.6}", h.wall_seconds),
                ]
            }),
        )
    };
    let losses = |path: &Path| {
        write_csv(
            path,
            &["epoch", "train_loss", "val_loss"],
            history
                .iter()
                .map(|h| vec![h.epoch.to_string(), format!("{:e}", h.train_loss), format!("{:e}", h.val_loss)]),
        )
    };
    full(&dir.join("history.csv"))?;
    losses(&dir.join("losses.csv"))?;
    full(&dir.join(format!("history_{}.csv", stage.tag())))?;
    losses(&dir.join(format!("losses_{}.csv", stage.tag())))
}
