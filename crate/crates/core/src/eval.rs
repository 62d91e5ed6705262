//! Reconstruction-quality metrics, significance testing, attention-residue
//! analysis, timing and image dumps.

use std::fs;
use std::path::Path;
use std::time::Instant;

use image::{GrayImage, Luma};
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::distill::{attention_map, DistillationPlan, FdMethod};
use crate::error::{Error, Result};
use crate::kspace::{generate_cartesian_mask, Fft2, DEFAULT_SIGMA_FRACTION};
use crate::models::{NetInput, Network, NetworkParameters};
use crate::table::write_csv;
use crate::training::{Sample, TrainingData};

/// Ceiling reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Real-valued image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RealImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl RealImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid(format!("{} values for a {height}x{width} image", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn magnitude_of(height: usize, width: usize, data: &[Complex<f32>]) -> Result<Self> {
        Self::new(height, width, data.iter().map(|z| (z.norm()) as f64).collect())
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    fn same_shape(&self, other: &RealImage) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::invalid(format!(
                "image shapes differ: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

fn range_or_max(target: &RealImage, data_range: Option<f64>) -> Result<f64> {
    let r = data_range.unwrap_or_else(|| target.max());
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::invalid(format!("data range must be positive, got {r}")));
    }
    Ok(r)
}

/// Peak signal-to-noise ratio in dB. `data_range` defaults to the target
/// maximum.
pub fn psnr(pred: &RealImage, target: &RealImage, data_range: Option<f64>) -> Result<f64> {
    pred.same_shape(target)?;
    let range = range_or_max(target, data_range)?;
    let mse = pred.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (range * range / mse).log10()).min(PSNR_CAP_DB))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03 }
    }
}

impl SsimParams {
    pub fn kernel(&self) -> Vec<f64> {
        let c = (self.window as f64 - 1.0) / 2.0;
        let g: Vec<f64> =
            (0..self.window).map(|i| (-(i as f64 - c).powi(2) / (2.0 * self.sigma * self.sigma)).exp()).collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }
}

/// Separable Gaussian filter over all fully contained windows.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = k.iter().enumerate().map(|(i, &g)| g * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, &g)| g * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity over Gaussian-weighted windows.
pub fn ssim(pred: &RealImage, target: &RealImage, params: &SsimParams, data_range: Option<f64>) -> Result<f64> {
    pred.same_shape(target)?;
    if pred.height < params.window || pred.width < params.window {
        return Err(Error::invalid(format!(
            "{}x{} image is smaller than the {} pixel window",
            pred.height, pred.width, params.window
        )));
    }
    let range = range_or_max(target, data_range)?;
    let c1 = (params.k1 * range).powi(2);
    let c2 = (params.k2 * range).powi(2);
    let k = params.kernel();
    let (h, w) = (pred.height, pred.width);
    let x = &pred.data;
    let y = &target.data;
    let prod = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p * q).collect() };
    let mx = filter_valid(x, h, w, &k);
    let my = filter_valid(y, h, w, &k);
    let mxx = filter_valid(&prod(x, x), h, w, &k);
    let myy = filter_valid(&prod(y, y), h, w, &k);
    let mxy = filter_valid(&prod(x, y), h, w, &k);
    let n = mx.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(W+, W-)`.
    pub statistic: f64,
    pub p_value: f64,
    pub alpha: f64,
    pub significant: bool,
    pub exact: bool,
}

/// Largest sample size tested by exact enumeration.
pub const WILCOXON_EXACT_MAX: usize = 20;

/// Average ranks of `values` (1-based), ties sharing their mean rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Wilcoxon signed-rank test on paired samples. Zero differences
/// are dropped; exact for up to [`WILCOXON_EXACT_MAX`] pairs, otherwise the
/// tie-corrected normal approximation.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64], alpha: f64) -> Result<SignificanceResult> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Err(Error::Degenerate("all paired differences are zero".into()));
    }
    if diffs.len() < 5 {
        return Err(Error::invalid(format!("{} non-zero differences; need at least 5", diffs.len())));
    }
    let n = diffs.len();
    let ranks = average_ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;

    let (p, exact) = if n <= WILCOXON_EXACT_MAX {
        // null distribution of doubled W+ over all 2^n sign patterns
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let max: usize = doubled.iter().sum();
        let mut counts = vec![0.0f64; max + 1];
        counts[0] = 1.0;
        for &r in &doubled {
            for s in (r..=max).rev() {
                counts[s] += counts[s - r];
            }
        }
        let all = 2f64.powi(n as i32);
        let t = (2.0 * w_plus).round() as usize;
        let lower: f64 = counts[..=t].iter().sum::<f64>() / all;
        let upper: f64 = counts[t..].iter().sum::<f64>() / all;
        ((2.0 * lower.min(upper)).min(1.0), true)
    } else {
        let mut ties = 0.0;
        let mut sorted = ranks.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < sorted.len() {
            let j = sorted[i..].iter().take_while(|r| **r == sorted[i]).count();
            let t = j as f64;
            ties += t * t * t - t;
            i += j;
        }
        let nf = n as f64;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
        if var <= 0.0 {
            return Err(Error::Degenerate("zero variance in signed-rank statistic".into()));
        }
        let z = (w_plus - total / 2.0) / var.sqrt();
        (erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0), false)
    };
    Ok(SignificanceResult {
        n,
        w_plus,
        w_minus,
        statistic: w_plus.min(w_minus),
        p_value: p,
        alpha,
        significant: p < alpha,
        exact,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub model: String,
    pub n: usize,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
}

/// Per-slice metrics of one model plus their aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub summary: MetricsSummary,
    pub slices: Vec<SliceMetrics>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    if n == 0.0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MetricsReport {
    pub fn from_slices(model: &str, slices: Vec<SliceMetrics>) -> Self {
        let (psnr_mean, psnr_std) = mean_std(slices.iter().map(|s| s.psnr));
        let (ssim_mean, ssim_std) = mean_std(slices.iter().map(|s| s.ssim));
        let summary =
            MetricsSummary { model: model.to_string(), n: slices.len(), psnr_mean, psnr_std, ssim_mean, ssim_std };
        Self { summary, slices }
    }

    pub fn psnr_values(&self) -> Vec<f64> {
        self.slices.iter().map(|s| s.psnr).collect()
    }

    pub fn write_slices_csv(&self, path: &Path) -> Result<()> {
        write_slices_csv(path, std::slice::from_ref(self))
    }
}

/// Per-slice rows of several models: `model,id,psnr,ssim`.
pub fn write_slices_csv(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    write_csv(
        path,
        &["model", "id", "psnr", "ssim"],
        reports.iter().flat_map(|r| {
            r.slices.iter().map(|s| {
                vec![r.summary.model.clone(), s.id.clone(), format!("{:.6}", s.psnr), format!("{:.6}", s.ssim)]
            })
        }),
    )
}

/// One row per model: `model,n,psnr_mean,psnr_std,ssim_mean,ssim_std`.
pub fn write_summary_csv(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    write_csv(
        path,
        &["model", "n", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std"],
        reports.iter().map(|r| {
            let s = &r.summary;
            vec![
                s.model.clone(),
                s.n.to_string(),
                format!("{:.6}", s.psnr_mean),
                format!("{:.6}", s.psnr_std),
                format!("{:.6}", s.ssim_mean),
                format!("{:.6}", s.ssim_std),
            ]
        }),
    )
}

/// Network outputs for every sample of `samples`.
pub fn reconstruct(
    params: &NetworkParameters<f32>,
    data: &TrainingData,
    samples: &[Sample],
) -> Result<Vec<Vec<Complex<f32>>>> {
    let net = Network::new(&params.arch, data.height, data.width)?;
    samples
        .iter()
        .map(|s| {
            let input = NetInput { image: &s.input, measured: s.measured.as_deref(), lines: data.lines.as_deref() };
            Ok(net.forward(params, &input)?.into_output())
        })
        .collect()
}

/// PSNR/SSIM of magnitude images over `samples`.
pub fn evaluate_outputs(
    model: &str,
    data: &TrainingData,
    samples: &[Sample],
    outputs: &[Vec<Complex<f32>>],
) -> Result<MetricsReport> {
    let params = SsimParams::default();
    let slices = samples
        .iter()
        .zip(outputs)
        .map(|(s, out)| {
            let pred = RealImage::magnitude_of(data.height, data.width, out)?;
            let target = RealImage::magnitude_of(data.height, data.width, &s.target)?;
            Ok(SliceMetrics {
                id: s.id.clone(),
                psnr: psnr(&pred, &target, None)?,
                ssim: ssim(&pred, &target, &params, None)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_slices(model, slices))
}

/// Validation-split metrics of one network.
pub fn evaluate_model(model: &str, params: &NetworkParameters<f32>, data: &TrainingData) -> Result<MetricsReport> {
    let outputs = reconstruct(params, data, &data.val)?;
    evaluate_outputs(model, data, &data.val, &outputs)
}

/// Input-only baseline (zero-filled or interpolated).
pub fn evaluate_input(model: &str, data: &TrainingData) -> Result<MetricsReport> {
    let outputs: Vec<_> = data.val.iter().map(|s| s.input.clone()).collect();
    evaluate_outputs(model, data, &data.val, &outputs)
}

/// `|pred - target|`, elementwise.
pub fn residue_map(pred: &RealImage, target: &RealImage) -> Result<RealImage> {
    pred.same_shape(target)?;
    let data = pred.data.iter().zip(&target.data).map(|(a, b)| (a - b).abs()).collect();
    RealImage::new(pred.height, pred.width, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidueRow {
    pub model: String,
    pub cascade: usize,
    pub id: String,
    pub residue: f64,
}

/// Distance between normalized attention maps of a model and the teacher,
/// per cascade and validation slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidueStudy {
    pub cascades: usize,
    pub rows: Vec<ResidueRow>,
    /// First validation slice: per model and cascade, `|Q_model - Q_T|`.
    #[serde(skip)]
    pub examples: Vec<(String, usize, RealImage)>,
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

impl ResidueStudy {
    pub fn values(&self, model: &str, cascade: usize) -> Vec<f64> {
        self.rows.iter().filter(|r| r.model == model && r.cascade == cascade).map(|r| r.residue).collect()
    }

    pub fn median(&self, model: &str, cascade: usize) -> f64 {
        median(&mut self.values(model, cascade))
    }

    /// Long-format CSV (`model,cascade,id,residue`) for box plots.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(
            path,
            &["model", "cascade", "id", "residue"],
            self.rows
                .iter()
                .map(|r| vec![r.model.clone(), r.cascade.to_string(), r.id.clone(), format!("{:.8e}", r.residue)]),
        )
    }

    /// Per model and cascade: `model,cascade,min,q1,median,q3,max`.
    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let mut models: Vec<&str> = self.rows.iter().map(|r| r.model.as_str()).collect();
        models.dedup();
        let mut rows = Vec::new();
        for m in models {
            for c in 1..=self.cascades {
                let mut v = self.values(m, c);
                if v.is_empty() {
                    continue;
                }
                let med = median(&mut v);
                let q = |p: f64| v[((v.len() - 1) as f64 * p).round() as usize];
                let stats = [v[0], q(0.25), med, q(0.75), v[v.len() - 1]];
                let mut row = vec![m.to_string(), c.to_string()];
                row.extend(stats.iter().map(|x| format!("{x:.8e}")));
                rows.push(row);
            }
        }
        write_csv(path, &["model", "cascade", "min", "q1", "median", "q3", "max"], rows)
    }

    pub fn write_images(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (model, cascade, img) in &self.examples {
            write_png(&dir.join(format!("residue_{model}_cascade{cascade}.png")), img)?;
        }
        Ok(())
    }
}

/// Attention residues of `student` and `kd_student` against `teacher` at
/// the middle convolution of every cascade, over the validation split.
pub fn attention_residue_study(
    teacher: &NetworkParameters<f32>,
    student: &NetworkParameters<f32>,
    kd_student: &NetworkParameters<f32>,
    data: &TrainingData,
) -> Result<ResidueStudy> {
    if teacher.arch.blocks() != student.arch.blocks() || teacher.arch.blocks() != kd_student.arch.blocks() {
        return Err(Error::invalid(format!(
            "cascade counts differ: teacher {}, student {}, kd-student {}",
            teacher.arch.blocks(),
            student.arch.blocks(),
            kd_student.arch.blocks()
        )));
    }
    let plan = DistillationPlan::default_for(FdMethod::At, &teacher.arch, &student.arch)?;
    let tnet = Network::new(&teacher.arch, data.height, data.width)?;
    let snet = Network::new(&student.arch, data.height, data.width)?;
    let mut rows = Vec::new();
    let mut examples = Vec::new();
    for (k, s) in data.val.iter().enumerate() {
        let input = NetInput { image: &s.input, measured: s.measured.as_deref(), lines: data.lines.as_deref() };
        let ttape = tnet.forward(teacher, &input)?;
        let tunits: Vec<Vec<f64>> =
            plan.pairs.iter().map(|p| attention_map(ttape.feature(p.teacher)).normalized()).collect::<Result<_>>()?;
        for (name, params) in [("student", student), ("kd-student", kd_student)] {
            let tape = snet.forward(params, &input)?;
            for (pair, tu) in plan.pairs.iter().zip(&tunits) {
                let map = attention_map(tape.feature(pair.student));
                let su = map.normalized()?;
                let diff: Vec<f64> = su.iter().zip(tu).map(|(a, b)| (a - b).abs()).collect();
                rows.push(ResidueRow {
                    model: name.to_string(),
                    cascade: pair.student.cascade,
                    id: s.id.clone(),
                    residue: diff.iter().map(|d| d * d).sum::<f64>().sqrt(),
                });
                if k == 0 {
                    examples.push((
                        name.to_string(),
                        pair.student.cascade,
                        RealImage::new(map.height, map.width, diff)?,
                    ));
                }
            }
        }
    }
    Ok(ResidueStudy { cascades: teacher.arch.blocks(), rows, examples })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub param_count: usize,
    pub height: usize,
    pub width: usize,
    pub repeats: usize,
    pub median_forward_seconds: f64,
    pub times: Vec<f64>,
}

const WARMUP_RUNS: usize = 2;

/// Median single-image forward time on a fixed synthetic input.
pub fn benchmark(
    params: &NetworkParameters<f32>,
    height: usize,
    width: usize,
    repeats: usize,
) -> Result<BenchmarkReport> {
    if repeats < 5 {
        return Err(Error::invalid(format!("benchmark needs at least 5 repeats, got {repeats}")));
    }
    let net = Network::new(&params.arch, height, width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let image: Vec<Complex<f32>> = (0..height * width).map(|_| Complex::new(rng.random::<f32>(), 0.0)).collect();
    let (measured, lines) = match params.arch.dc() {
        Some(_) => {
            let mask = generate_cartesian_mask(width, 4.0, (width / 12).max(1), DEFAULT_SIGMA_FRACTION, 0)?;
            let mut k = image.clone();
            Fft2::<f32>::new(height, width).forward(&mut k);
            for (i, z) in k.iter_mut().enumerate() {
                if !mask.lines[i % width] {
                    *z = Complex::new(0.0, 0.0);
                }
            }
            (Some(k), Some(mask.lines))
        }
        None => (None, None),
    };
    let input = NetInput { image: &image, measured: measured.as_deref(), lines: lines.as_deref() };
    for _ in 0..WARMUP_RUNS {
        net.forward(params, &input)?;
    }
    let times: Vec<f64> = (0..repeats)
        .map(|_| {
            let t = Instant::now();
            net.forward(params, &input).map(|_| t.elapsed().as_secs_f64())
        })
        .collect::<Result<_>>()?;
    Ok(BenchmarkReport {
        param_count: params.len(),
        height,
        width,
        repeats,
        median_forward_seconds: median(&mut times.clone()),
        times,
    })
}

fn to_gray(img: &RealImage) -> GrayImage {
    let max = img.max();
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    GrayImage::from_fn(img.width as u32, img.height as u32, |x, y| {
        let v = img.data[y as usize * img.width + x as usize].max(0.0) * scale;
        Luma([v.round().min(255.0) as u8])
    })
}

/// 8-bit grayscale PNG, scaled so the image maximum maps to white.
pub fn write_png(path: &Path, img: &RealImage) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    to_gray(img).save(path)?;
    Ok(())
}

/// Panels laid out left to right, top to bottom, each scaled independently.
pub fn write_png_grid(path: &Path, panels: &[RealImage], columns: usize) -> Result<()> {
    let first = panels.first().ok_or_else(|| Error::invalid("no panels to draw"))?;
    if panels.iter().any(|p| p.height != first.height || p.width != first.width) || columns == 0 {
        return Err(Error::invalid("grid panels must share one size"));
    }
    let rows = panels.len().div_ceil(columns);
    let (ph, pw) = (first.height as u32, first.width as u32);
    let mut grid = GrayImage::new(pw * columns as u32, ph * rows as u32);
    for (i, p) in panels.iter().enumerate() {
        let g = to_gray(p);
        let (ox, oy) = ((i % columns) as u32 * pw, (i / columns) as u32 * ph);
        for (x, y, px) in g.enumerate_pixels() {
            grid.put_pixel(ox + x, oy + y, *px);
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    grid.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(v: f64) -> RealImage {
        RealImage::new(16, 16, vec![v; 256]).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        assert_eq!(psnr(&constant(0.3), &constant(0.3), None).unwrap(), PSNR_CAP_DB);
        assert!((psnr(&constant(0.0), &constant(1.0), Some(1.0)).unwrap()).abs() < 1e-12);
        let p = psnr(&constant(0.5), &constant(1.0), Some(1.0)).unwrap();
        assert!((p - 20.0 * 2f64.log10()).abs() < 1e-12);
        assert!(psnr(&constant(0.0), &RealImage::new(4, 4, vec![0.0; 16]).unwrap(), None).is_err());
    }

    #[test]
    fn ssim_closed_forms() {
        let p = SsimParams::default();
        assert!((ssim(&constant(0.4), &constant(0.4), &p, Some(1.0)).unwrap() - 1.0).abs() < 1e-12);
        let c1 = 0.01f64.powi(2);
        let v = ssim(&constant(0.0), &constant(1.0), &p, Some(1.0)).unwrap();
        assert!((v - c1 / (1.0 + c1)).abs() < 1e-12);
        let small = RealImage::new(8, 8, vec![0.0; 64]).unwrap();
        assert!(ssim(&small, &small, &p, Some(1.0)).is_err());
    }

    #[test]
    fn wilcoxon_edge_cases() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert!(matches!(wilcoxon_signed_rank(&a, &a, 0.05), Err(Error::Degenerate(_))));
        assert!(wilcoxon_signed_rank(&a, &a[..5], 0.05).is_err());
        let b: Vec<f64> = a.iter().map(|x| x + 100.0).collect();
        let r = wilcoxon_signed_rank(&a, &b, 0.05).unwrap();
        assert_eq!((r.w_plus, r.w_minus), (0.0, 21.0));
        assert!((r.p_value - 2.0 / 64.0).abs() < 1e-15);
    }

    #[test]
    fn residue_of_identical_images_is_zero() {
        let r = residue_map(&constant(0.7), &constant(0.7)).unwrap();
        assert!(r.data.iter().all(|&v| v == 0.0));
    }
}
