//! Distillation objectives.
//!
//! Every loss comes in two forms: a scalar function on owned `f64` data and
//! a `*_grad` variant on engine-precision views that also returns the
//! gradient with respect to the student side. Accumulation is always in
//! `f64`.

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kspace::ComplexImage;
use crate::models::{Architecture, FeatureTap, FeatureView};
use crate::nn::{conv_backward, conv_forward, ConvShape};
use crate::real::Real;

/// Channel-wise sum of squared activations.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl AttentionMap {
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Unit-L2 vectorized map.
    pub fn normalized(&self) -> Result<Vec<f64>> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Degenerate("attention map has zero norm".into()));
        }
        Ok(self.data.iter().map(|v| v / n).collect())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { height: self.height, width: self.width, data: self.data.iter().map(|v| v * factor).collect() }
    }
}

pub fn attention_map<T: Real>(features: FeatureView<'_, T>) -> AttentionMap {
    let hw = features.plane.len();
    let mut data = vec![0.0; hw];
    for ch in features.data.chunks_exact(hw) {
        for (q, &a) in data.iter_mut().zip(ch) {
            let a = a.as_f64();
            *q += a * a;
        }
    }
    AttentionMap { height: features.plane.height, width: features.plane.width, data }
}

/// Sum over pairs of the distance between unit-normalized attention maps.
pub fn at_loss(student_maps: &[AttentionMap], teacher_maps: &[AttentionMap]) -> Result<f64> {
    if student_maps.is_empty() || student_maps.len() != teacher_maps.len() {
        return Err(Error::invalid("attention map lists must be non-empty and of equal length"));
    }
    let mut total = 0.0;
    for (s, t) in student_maps.iter().zip(teacher_maps) {
        if s.data.len() != t.data.len() {
            return Err(Error::invalid("paired attention maps differ in size"));
        }
        let (s, t) = (s.normalized()?, t.normalized()?);
        total += s.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    }
    Ok(total)
}

/// One attention-transfer term and its gradient w.r.t. the student
/// activation. `teacher_unit` is the teacher's normalized map.
pub fn at_pair_grad<T: Real>(student: FeatureView<'_, T>, teacher_unit: &[f64]) -> Result<(f64, Vec<T>)> {
    let hw = student.plane.len();
    if teacher_unit.len() != hw {
        return Err(Error::invalid("teacher attention map differs in size from student features"));
    }
    let q = attention_map(student);
    let norm = q.norm();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Degenerate("student attention map has zero norm".into()));
    }
    let u: Vec<f64> = q.data.iter().map(|v| v / norm).collect();
    let diff: Vec<f64> = u.iter().zip(teacher_unit).map(|(a, b)| a - b).collect();
    let loss = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
    let mut grad = vec![T::zero(); student.data.len()];
    if loss <= f64::MIN_POSITIVE {
        return Ok((loss, grad));
    }
    // d/du = diff / loss; project out u and divide by |q|
    let du: Vec<f64> = diff.iter().map(|d| d / loss).collect();
    let udot: f64 = u.iter().zip(&du).map(|(a, b)| a * b).sum();
    let dq: Vec<f64> = du.iter().zip(&u).map(|(g, ui)| (g - ui * udot) / norm).collect();
    for (gch, ach) in grad.chunks_exact_mut(hw).zip(student.data.chunks_exact(hw)) {
        for ((g, &a), &d) in gch.iter_mut().zip(ach).zip(&dq) {
            *g = T::of(2.0 * a.as_f64() * d);
        }
    }
    Ok((loss, grad))
}

/// Pixel loss used for reconstruction and imitation terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossNorm {
    #[default]
    Mse,
    L1,
}

/// Pixel loss between two complex images and its gradient w.r.t. `pred`.
pub fn pixel_loss_grad<T: Real>(pred: &[Complex<T>], target: &[Complex<T>], norm: LossNorm) -> (f64, Vec<Complex<T>>) {
    let n = pred.len() as f64;
    let mut total = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let (dr, di) = ((p.re - t.re).as_f64(), (p.im - t.im).as_f64());
            match norm {
                LossNorm::Mse => {
                    total += dr * dr + di * di;
                    Complex::new(T::of(2.0 * dr / n), T::of(2.0 * di / n))
                }
                LossNorm::L1 => {
                    let m = (dr * dr + di * di).sqrt();
                    total += m;
                    if m > 0.0 {
                        Complex::new(T::of(dr / (m * n)), T::of(di / (m * n)))
                    } else {
                        Complex::default()
                    }
                }
            }
        })
        .collect();
    (total / n, grad)
}

fn check_same(a: &ComplexImage, b: &ComplexImage) -> Result<()> {
    if a.height != b.height || a.width != b.width || a.data.len() != b.data.len() {
        return Err(Error::invalid("images differ in shape"));
    }
    Ok(())
}

pub fn reconstruction_loss(pred: &ComplexImage, target: &ComplexImage, norm: LossNorm) -> Result<f64> {
    check_same(pred, target)?;
    Ok(pixel_loss_grad(&pred.data, &target.data, norm).0)
}

/// Mean squared error between student and teacher reconstructions.
pub fn imitation_loss(student_out: &ComplexImage, teacher_out: &ComplexImage) -> Result<f64> {
    reconstruction_loss(student_out, teacher_out, LossNorm::Mse)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
}

impl LossWeights {
    pub fn new(alpha: f64) -> Result<Self> {
        let w = Self { alpha };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.5 }
    }
}

/// `alpha * L_rec + (1 - alpha) * L_imit`, both MSE.
pub fn total_student_loss(
    student_out: &ComplexImage,
    target: &ComplexImage,
    teacher_out: &ComplexImage,
    weights: LossWeights,
) -> Result<f64> {
    weights.validate()?;
    let rec = reconstruction_loss(student_out, target, LossNorm::Mse)?;
    let imit = imitation_loss(student_out, teacher_out)?;
    Ok(weights.alpha * rec + (1.0 - weights.alpha) * imit)
}

/// Learnable 1x1 convolution mapping student channels onto teacher channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter<T: Real> {
    pub shape: ConvShape,
    pub params: Vec<T>,
}

impl<T: Real> Adapter<T> {
    /// Identity-like initialization: channel `i` maps to channel `i mod in`.
    pub fn new(student_channels: usize, teacher_channels: usize) -> Self {
        let shape = ConvShape::new(student_channels, teacher_channels, 1);
        let mut params = vec![T::zero(); shape.param_len()];
        for o in 0..teacher_channels {
            params[o * student_channels + o % student_channels] = T::one();
        }
        Self { shape, params }
    }

    fn apply(&self, student: FeatureView<'_, T>) -> Vec<T> {
        let mut out = vec![T::zero(); self.shape.out_ch * student.plane.len()];
        let mut cols = Vec::new();
        conv_forward(self.shape, &self.params, student.data, student.plane, &mut out, &mut cols);
        out
    }
}

/// FitNets hint loss and gradients: `(loss, d/d student, d/d adapter)`.
pub fn fitnet_loss_grad<T: Real>(
    student: FeatureView<'_, T>,
    teacher: FeatureView<'_, T>,
    adapter: Option<&Adapter<T>>,
) -> Result<(f64, Vec<T>, Vec<T>)> {
    if student.plane != teacher.plane {
        return Err(Error::invalid("FitNets features differ in spatial size"));
    }
    let adapted;
    let mapped: &[T] = match adapter {
        Some(a) => {
            if a.shape.in_ch != student.channels || a.shape.out_ch != teacher.channels {
                return Err(Error::invalid("adapter channels do not match the features"));
            }
            adapted = a.apply(student);
            &adapted
        }
        None => {
            if student.channels != teacher.channels {
                return Err(Error::invalid("FitNets channels differ and no adapter was given"));
            }
            student.data
        }
    };
    let n = teacher.data.len() as f64;
    let mut loss = 0.0;
    let gmap: Vec<T> = mapped
        .iter()
        .zip(teacher.data)
        .map(|(&s, &t)| {
            let d = (s - t).as_f64();
            loss += d * d;
            T::of(2.0 * d / n)
        })
        .collect();
    match adapter {
        Some(a) => {
            let mut gs = vec![T::zero(); student.data.len()];
            let mut ga = vec![T::zero(); a.params.len()];
            let mut cols = Vec::new();
            conv_backward(a.shape, &a.params, student.data, student.plane, &gmap, &mut ga, Some(&mut gs), &mut cols);
            Ok((loss / n, gs, ga))
        }
        None => Ok((loss / n, gmap, Vec::new())),
    }
}

pub fn fitnet_loss(
    student: FeatureView<'_, f64>,
    teacher: FeatureView<'_, f64>,
    adapter: Option<&Adapter<f64>>,
) -> Result<f64> {
    Ok(fitnet_loss_grad(student, teacher, adapter)?.0)
}

/// Row-major `rows x cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// `G[i, j] = mean over pixels of a[i] * b[j]`.
pub fn fsp_matrix<T: Real>(feat_a: FeatureView<'_, T>, feat_b: FeatureView<'_, T>) -> Result<Matrix> {
    if feat_a.plane != feat_b.plane {
        return Err(Error::invalid("FSP features differ in spatial size"));
    }
    let hw = feat_a.plane.len();
    let mut data = Vec::with_capacity(feat_a.channels * feat_b.channels);
    for a in feat_a.data.chunks_exact(hw) {
        for b in feat_b.data.chunks_exact(hw) {
            let s: f64 = a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
            data.push(s / hw as f64);
        }
    }
    Ok(Matrix { rows: feat_a.channels, cols: feat_b.channels, data })
}

/// A first/second activation pair spanned by one FSP matrix.
pub type FspPair<'a, T> = (FeatureView<'a, T>, FeatureView<'a, T>);

/// FSP loss and gradients w.r.t. each student activation of each pair.
pub fn fsp_loss_grad<T: Real>(
    student: &[FspPair<'_, T>],
    teacher: &[FspPair<'_, T>],
) -> Result<(f64, Vec<(Vec<T>, Vec<T>)>)> {
    if student.is_empty() || student.len() != teacher.len() {
        return Err(Error::invalid("FSP pair sets must be non-empty and of equal length"));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(student.len());
    for ((sa, sb), (ta, tb)) in student.iter().zip(teacher) {
        let gs = fsp_matrix(*sa, *sb)?;
        let gt = fsp_matrix(*ta, *tb)?;
        if gs.rows != gt.rows || gs.cols != gt.cols {
            return Err(Error::invalid("student and teacher FSP matrices differ in shape"));
        }
        let m = gs.data.len() as f64;
        let p: Vec<f64> = gs.data.iter().zip(&gt.data).map(|(s, t)| 2.0 * (s - t) / m).collect();
        total += gs.data.iter().zip(&gt.data).map(|(s, t)| (s - t) * (s - t)).sum::<f64>() / m;

        let hw = sa.plane.len() as f64;
        let n = sa.plane.len();
        let mut ga = vec![T::zero(); sa.data.len()];
        let mut gb = vec![T::zero(); sb.data.len()];
        for i in 0..gs.rows {
            let arow = &sa.data[i * n..(i + 1) * n];
            for j in 0..gs.cols {
                let w = p[i * gs.cols + j] / hw;
                if w == 0.0 {
                    continue;
                }
                let brow = &sb.data[j * n..(j + 1) * n];
                for px in 0..n {
                    ga[i * n + px] = ga[i * n + px] + T::of(w * brow[px].as_f64());
                    gb[j * n + px] = gb[j * n + px] + T::of(w * arow[px].as_f64());
                }
            }
        }
        grads.push((ga, gb));
    }
    Ok((total, grads))
}

pub fn fsp_loss(student: &[FspPair<'_, f64>], teacher: &[FspPair<'_, f64>]) -> Result<f64> {
    Ok(fsp_loss_grad(student, teacher)?.0)
}

fn similarity(batch: &[&[f64]]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let b = batch.len();
    let mut g = vec![0.0; b * b];
    for i in 0..b {
        for j in i..b {
            let v: f64 = batch[i].iter().zip(batch[j]).map(|(x, y)| x * y).sum();
            g[i * b + j] = v;
            g[j * b + i] = v;
        }
    }
    let norms: Vec<f64> = g.chunks_exact(b).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    if norms.iter().any(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::Degenerate("similarity row with zero norm".into()));
    }
    let gn: Vec<f64> = g.iter().enumerate().map(|(k, v)| v / norms[k / b]).collect();
    Ok((g, gn, norms))
}

/// Similarity-preserving loss over a batch; gradient per student sample.
pub fn sp_loss_grad<T: Real>(student: &[&[T]], teacher: &[&[T]]) -> Result<(f64, Vec<Vec<T>>)> {
    let b = student.len();
    if b < 2 {
        return Err(Error::Degenerate("similarity-preserving loss needs a batch of at least 2".into()));
    }
    if teacher.len() != b {
        return Err(Error::invalid("student and teacher batches differ in size"));
    }
    let s64: Vec<Vec<f64>> = student.iter().map(|r| r.iter().map(|v| v.as_f64()).collect()).collect();
    let t64: Vec<Vec<f64>> = teacher.iter().map(|r| r.iter().map(|v| v.as_f64()).collect()).collect();
    let (_, gs, norms) = similarity(&s64.iter().map(Vec::as_slice).collect::<Vec<_>>())?;
    let (_, gt, _) = similarity(&t64.iter().map(Vec::as_slice).collect::<Vec<_>>())?;
    let bb = (b * b) as f64;
    let loss = gs.iter().zip(&gt).map(|(s, t)| (s - t) * (s - t)).sum::<f64>() / bb;

    // through row normalization, then G = F F^T
    let p: Vec<f64> = gs.iter().zip(&gt).map(|(s, t)| 2.0 * (s - t) / bb).collect();
    let mut q = vec![0.0; b * b];
    for i in 0..b {
        let row = &gs[i * b..(i + 1) * b];
        let prow = &p[i * b..(i + 1) * b];
        let dot: f64 = row.iter().zip(prow).map(|(a, c)| a * c).sum();
        for j in 0..b {
            q[i * b + j] = (prow[j] - row[j] * dot) / norms[i];
        }
    }
    let mut grads = Vec::with_capacity(b);
    for i in 0..b {
        let d = s64[i].len();
        let mut g = vec![0.0; d];
        for j in 0..b {
            let w = q[i * b + j] + q[j * b + i];
            for (gk, &f) in g.iter_mut().zip(&s64[j]) {
                *gk += w * f;
            }
        }
        grads.push(g.into_iter().map(T::of).collect());
    }
    Ok((loss, grads))
}

pub fn sp_loss(student: &[&[f64]], teacher: &[&[f64]]) -> Result<f64> {
    Ok(sp_loss_grad(student, teacher)?.0)
}

/// Per-sample weights `exp(-beta * e_i / mean(e))` from teacher errors.
pub fn attentive_hint_weights_from_errors(errors: &[f64], beta: f64) -> Vec<f64> {
    let mean = errors.iter().sum::<f64>() / errors.len().max(1) as f64;
    errors.iter().map(|&e| if mean > 0.0 { (-beta * e / mean).exp() } else { 1.0 }).collect()
}

pub fn attentive_hint_weights(teacher_out: &[ComplexImage], targets: &[ComplexImage], beta: f64) -> Result<Vec<f64>> {
    if teacher_out.len() != targets.len() {
        return Err(Error::invalid("teacher and target batches differ in size"));
    }
    let errors = teacher_out
        .iter()
        .zip(targets)
        .map(|(t, x)| reconstruction_loss(t, x, LossNorm::Mse))
        .collect::<Result<Vec<_>>>()?;
    Ok(attentive_hint_weights_from_errors(&errors, beta))
}

/// Feature-distillation method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FdMethod {
    At,
    Fn,
    Fsp,
    Sp,
    Ah,
}

impl FdMethod {
    pub const ALL: [FdMethod; 5] = [FdMethod::Fn, FdMethod::Fsp, FdMethod::Sp, FdMethod::Ah, FdMethod::At];

    pub fn name(self) -> &'static str {
        match self {
            FdMethod::At => "at",
            FdMethod::Fn => "fn",
            FdMethod::Fsp => "fsp",
            FdMethod::Sp => "sp",
            FdMethod::Ah => "ah",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "at" => Ok(FdMethod::At),
            "fn" => Ok(FdMethod::Fn),
            "fsp" => Ok(FdMethod::Fsp),
            "sp" => Ok(FdMethod::Sp),
            "ah" => Ok(FdMethod::Ah),
            other => Err(Error::config(format!("unknown distillation method {other:?}"))),
        }
    }
}

impl std::fmt::Display for FdMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Teacher tap paired with a student tap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapPair {
    pub teacher: FeatureTap,
    pub student: FeatureTap,
}

/// Which activations are matched, and how.
///
/// For FSP each entry of `pairs` is read two at a time: `pairs[2k]` holds
/// the first activation of the k-th flow and `pairs[2k + 1]` the second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillationPlan {
    pub method: FdMethod,
    pub pairs: Vec<TapPair>,
    #[serde(default = "default_beta")]
    pub ah_beta: f64,
}

fn default_beta() -> f64 {
    1.0
}

impl DistillationPlan {
    /// Default positions: middle convolution of every cascade for AT, FN,
    /// SP and AH; first and penultimate convolution of every cascade for FSP.
    pub fn default_for(method: FdMethod, teacher: &Architecture, student: &Architecture) -> Result<Self> {
        if teacher.blocks() != student.blocks() {
            return Err(Error::config("teacher and student need the same number of cascades"));
        }
        let mut pairs = Vec::new();
        for c in 1..=teacher.blocks() {
            match method {
                FdMethod::Fsp => {
                    pairs.push(TapPair { teacher: FeatureTap::new(c, 1), student: FeatureTap::new(c, 1) });
                    pairs.push(TapPair {
                        teacher: FeatureTap::new(c, teacher.convs_per_block() - 1),
                        student: FeatureTap::new(c, student.convs_per_block() - 1),
                    });
                }
                _ => pairs.push(TapPair {
                    teacher: FeatureTap::new(c, teacher.center_conv()),
                    student: FeatureTap::new(c, student.center_conv()),
                }),
            }
        }
        let plan = Self { method, pairs, ah_beta: 1.0 };
        plan.validate(teacher, student)?;
        Ok(plan)
    }

    /// Explicit layer choice applied to every cascade.
    pub fn at_layers(
        teacher: &Architecture,
        student: &Architecture,
        teacher_conv: usize,
        student_conv: usize,
    ) -> Result<Self> {
        let pairs = (1..=teacher.blocks().min(student.blocks()))
            .map(|c| TapPair { teacher: FeatureTap::new(c, teacher_conv), student: FeatureTap::new(c, student_conv) })
            .collect();
        let plan = Self { method: FdMethod::At, pairs, ah_beta: 1.0 };
        plan.validate(teacher, student)?;
        Ok(plan)
    }

    pub fn validate(&self, teacher: &Architecture, student: &Architecture) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::config("distillation plan has no tap pairs"));
        }
        for p in &self.pairs {
            p.teacher.validate(teacher)?;
            p.student.validate(student)?;
        }
        if self.method == FdMethod::Fsp && self.pairs.len() % 2 != 0 {
            return Err(Error::config("FSP plan needs an even number of tap pairs"));
        }
        if self.method == FdMethod::Fsp
            && self.pairs.iter().any(|p| teacher.tap_channels(p.teacher.conv) != student.tap_channels(p.student.conv))
        {
            return Err(Error::config("FSP pairs need matching channel counts"));
        }
        if !(self.ah_beta.is_finite() && self.ah_beta >= 0.0) {
            return Err(Error::config("ah_beta must be a non-negative number"));
        }
        Ok(())
    }

    pub fn teacher_taps(&self) -> Vec<FeatureTap> {
        self.pairs.iter().map(|p| p.teacher).collect()
    }

    pub fn student_taps(&self) -> Vec<FeatureTap> {
        self.pairs.iter().map(|p| p.student).collect()
    }
}
