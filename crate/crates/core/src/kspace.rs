//! Fourier-domain simulation of Cartesian MRI acquisition.
//!
//! All transforms are centered (zero frequency at `(H/2, W/2)`) and
//! orthonormal, so Parseval holds exactly and `ifft2c` inverts `fft2c`.
//! Masks select phase-encode lines, i.e. whole columns of k-space.

use std::sync::Arc;

use num_complex::{Complex, Complex64};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::real::Real;

/// Complex image in row-major order (`data[y * width + x]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<Complex64>,
}

/// Complex k-space samples, same layout as [`ComplexImage`].
#[derive(Debug, Clone, PartialEq)]
pub struct KSpaceGrid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<Complex64>,
}

fn check_grid(height: usize, width: usize, data: &[Complex64]) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("grid must be at least 1x1"));
    }
    if data.len() != height * width {
        return Err(Error::invalid(format!("grid data has {} elements, expected {}x{}", data.len(), height, width)));
    }
    if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::invalid("grid contains non-finite values"));
    }
    Ok(())
}

impl ComplexImage {
    pub fn new(height: usize, width: usize, data: Vec<Complex64>) -> Result<Self> {
        check_grid(height, width, &data)?;
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![Complex64::new(0.0, 0.0); height * width] }
    }

    pub fn from_real(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        Self::new(height, width, values.iter().map(|&v| Complex64::new(v, 0.0)).collect())
    }

    pub fn real(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.re).collect()
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.norm()).collect()
    }

    pub fn norm(&self) -> f64 {
        l2(&self.data)
    }
}

impl KSpaceGrid {
    pub fn new(height: usize, width: usize, data: Vec<Complex64>) -> Result<Self> {
        check_grid(height, width, &data)?;
        Ok(Self { height, width, data })
    }

    pub fn norm(&self) -> f64 {
        l2(&self.data)
    }
}

fn l2(data: &[Complex64]) -> f64 {
    data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Planned centered orthonormal 2-D transform for a fixed grid size.
pub struct Fft2<T: Real> {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
    scale: T,
}

impl<T: Real> Fft2<T> {
    pub fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            height,
            width,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
            scale: T::one() / T::of((height * width) as f64).sqrt(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// In-place centered forward transform.
    pub fn forward(&self, data: &mut [Complex<T>]) {
        self.transform(data, true);
    }

    /// In-place centered inverse transform.
    pub fn inverse(&self, data: &mut [Complex<T>]) {
        self.transform(data, false);
    }

    fn transform(&self, data: &mut [Complex<T>], forward: bool) {
        let (h, w) = (self.height, self.width);
        assert_eq!(data.len(), h * w, "fft buffer does not match planned size");
        let mut buf = vec![Complex::<T>::default(); h * w];
        // ifftshift
        roll(data, &mut buf, h, w, h - h / 2, w - w / 2);

        let (row, col) = if forward { (&self.row_fwd, &self.col_fwd) } else { (&self.row_inv, &self.col_inv) };
        let scratch_len = row.get_inplace_scratch_len().max(col.get_inplace_scratch_len());
        let mut scratch = vec![Complex::<T>::default(); scratch_len];
        for r in buf.chunks_exact_mut(w) {
            row.process_with_scratch(r, &mut scratch);
        }
        let mut column = vec![Complex::<T>::default(); h];
        for x in 0..w {
            for y in 0..h {
                column[y] = buf[y * w + x];
            }
            col.process_with_scratch(&mut column, &mut scratch);
            for y in 0..h {
                buf[y * w + x] = column[y];
            }
        }
        // fftshift
        roll(&buf, data, h, w, h / 2, w / 2);
        let s = self.scale;
        for z in data.iter_mut() {
            *z = *z * s;
        }
    }
}

fn roll<C: Copy>(src: &[C], dst: &mut [C], h: usize, w: usize, sy: usize, sx: usize) {
    for y in 0..h {
        let ty = (y + sy) % h;
        for x in 0..w {
            dst[ty * w + (x + sx) % w] = src[y * w + x];
        }
    }
}

/// Centered orthonormal 2-D DFT.
pub fn fft2c(image: &ComplexImage) -> Result<KSpaceGrid> {
    check_grid(image.height, image.width, &image.data)?;
    let mut data = image.data.clone();
    Fft2::<f64>::new(image.height, image.width).forward(&mut data);
    Ok(KSpaceGrid { height: image.height, width: image.width, data })
}

/// Inverse of [`fft2c`].
pub fn ifft2c(kspace: &KSpaceGrid) -> Result<ComplexImage> {
    check_grid(kspace.height, kspace.width, &kspace.data)?;
    let mut data = kspace.data.clone();
    Fft2::<f64>::new(kspace.height, kspace.width).inverse(&mut data);
    Ok(ComplexImage { height: kspace.height, width: kspace.width, data })
}

/// Binary Cartesian line mask. `lines[x]` samples k-space column `x` for
/// every row; column `width / 2` is the zero-frequency line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "MaskRecord", try_from = "MaskRecord")]
pub struct SamplingMask {
    pub width: usize,
    pub acceleration: f64,
    pub center_lines: usize,
    pub sigma_fraction: f64,
    pub seed: u64,
    pub lines: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct MaskRecord {
    width: usize,
    acceleration: f64,
    center_lines: usize,
    sigma_fraction: f64,
    seed: u64,
    lines: String,
}

impl From<SamplingMask> for MaskRecord {
    fn from(m: SamplingMask) -> Self {
        MaskRecord {
            width: m.width,
            acceleration: m.acceleration,
            center_lines: m.center_lines,
            sigma_fraction: m.sigma_fraction,
            seed: m.seed,
            lines: m.bit_string(),
        }
    }
}

impl TryFrom<MaskRecord> for SamplingMask {
    type Error = String;

    fn try_from(r: MaskRecord) -> std::result::Result<Self, String> {
        let lines = r
            .lines
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(format!("invalid mask character {other:?}")),
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if lines.len() != r.width {
            return Err(format!("mask has {} lines but width {}", lines.len(), r.width));
        }
        Ok(SamplingMask {
            width: r.width,
            acceleration: r.acceleration,
            center_lines: r.center_lines,
            sigma_fraction: r.sigma_fraction,
            seed: r.seed,
            lines,
        })
    }
}

/// Default spread of the line-selection density, as a fraction of the width.
pub const DEFAULT_SIGMA_FRACTION: f64 = 0.15;

impl SamplingMask {
    /// Every line sampled.
    pub fn full(width: usize) -> Self {
        Self::from_lines(vec![true; width])
    }

    /// Wrap an explicit line pattern.
    pub fn from_lines(lines: Vec<bool>) -> Self {
        let width = lines.len();
        let sampled = lines.iter().filter(|&&l| l).count();
        Self {
            width,
            acceleration: if sampled == 0 { f64::INFINITY } else { width as f64 / sampled as f64 },
            center_lines: 0,
            sigma_fraction: 0.0,
            seed: 0,
            lines,
        }
    }

    pub fn sampled_lines(&self) -> usize {
        self.lines.iter().filter(|&&l| l).count()
    }

    pub fn sampled_fraction(&self) -> f64 {
        self.sampled_lines() as f64 / self.width as f64
    }

    pub fn bit_string(&self) -> String {
        self.lines.iter().map(|&l| if l { '1' } else { '0' }).collect()
    }

    /// Short content hash of the line pattern.
    pub fn hash_hex(&self) -> String {
        let digest = Sha256::digest(self.bit_string().as_bytes());
        hex::encode(&digest[..8])
    }

    /// Whether k-space column `x` is sampled.
    #[inline]
    pub fn contains(&self, x: usize) -> bool {
        self.lines[x]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Variable-density Cartesian mask.
///
/// `center_lines` columns around zero frequency are always kept; the rest
/// of the `round(width / acceleration)` budget is drawn without replacement
/// with weights from a zero-mean Gaussian over the column offset.
pub fn generate_cartesian_mask(
    width: usize,
    acceleration: f64,
    center_lines: usize,
    sigma_fraction: f64,
    seed: u64,
) -> Result<SamplingMask> {
    if width == 0 {
        return Err(Error::config("mask width must be positive"));
    }
    if !acceleration.is_finite() || acceleration < 1.0 {
        return Err(Error::config(format!("acceleration must be >= 1, got {acceleration}")));
    }
    if center_lines == 0 {
        return Err(Error::config("center_lines must be >= 1"));
    }
    if !sigma_fraction.is_finite() || sigma_fraction <= 0.0 {
        return Err(Error::config(format!("sigma fraction must be positive, got {sigma_fraction}")));
    }
    let budget = (width as f64 / acceleration).round() as usize;
    if budget < center_lines {
        return Err(Error::config(format!("line budget {budget} is smaller than center_lines {center_lines}")));
    }

    let center = width / 2;
    let start = center - (center_lines / 2).min(center);
    let mut lines = vec![false; width];
    for l in lines.iter_mut().skip(start).take(center_lines) {
        *l = true;
    }
    let fixed = lines.iter().filter(|&&l| l).count();
    let remaining = budget.saturating_sub(fixed);

    if remaining > 0 {
        let candidates: Vec<usize> = (0..width).filter(|&x| !lines[x]).collect();
        let sigma = sigma_fraction * width as f64;
        let weight = |i: usize| {
            let offset = candidates[i] as f64 - center as f64;
            (-0.5 * (offset / sigma).powi(2)).exp().max(1e-300)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picked = rand::seq::index::sample_weighted(&mut rng, candidates.len(), weight, remaining)
            .map_err(|e| Error::config(format!("line sampling failed: {e}")))?;
        for i in picked.iter() {
            lines[candidates[i]] = true;
        }
    }

    Ok(SamplingMask { width, acceleration, center_lines, sigma_fraction, seed, lines })
}

/// Retrospective undersampling: `(mask * F x, F^H (mask * F x))`.
pub fn undersample(image: &ComplexImage, mask: &SamplingMask) -> Result<(KSpaceGrid, ComplexImage)> {
    if mask.width != image.width {
        return Err(Error::invalid(format!("mask width {} does not match image width {}", mask.width, image.width)));
    }
    let mut measured = fft2c(image)?;
    apply_mask(&mut measured.data, &mask.lines, image.width);
    let zero_filled = ifft2c(&measured)?;
    Ok((measured, zero_filled))
}

pub(crate) fn apply_mask<T: Real>(data: &mut [Complex<T>], lines: &[bool], width: usize) {
    for row in data.chunks_exact_mut(width) {
        for (z, &keep) in row.iter_mut().zip(lines) {
            if !keep {
                *z = Complex::default();
            }
        }
    }
}

/// Weighting of measured samples in the data-consistency step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DcWeight {
    /// Infinite weight: measured samples replace the prediction.
    Hard,
    /// Finite noise weight lambda > 0.
    Blend(f64),
}

impl DcWeight {
    pub fn validate(self) -> Result<()> {
        match self {
            DcWeight::Hard => Ok(()),
            DcWeight::Blend(l) if l.is_finite() && l > 0.0 => Ok(()),
            DcWeight::Blend(l) if l == f64::INFINITY => Ok(()),
            DcWeight::Blend(l) => Err(Error::config(format!("dc lambda must be positive, got {l}"))),
        }
    }

    fn is_hard(self) -> bool {
        matches!(self, DcWeight::Hard) || matches!(self, DcWeight::Blend(l) if l == f64::INFINITY)
    }
}

/// Data consistency in k-space.
///
/// Off the sampled set the prediction is kept; on it the output is
/// `(pred + lambda * measured) / (1 + lambda)`, or `measured` for a hard
/// weight.
pub fn data_consistency(
    pred: &KSpaceGrid,
    measured: &KSpaceGrid,
    mask: &SamplingMask,
    weight: DcWeight,
) -> Result<KSpaceGrid> {
    weight.validate()?;
    if pred.height != measured.height || pred.width != measured.width {
        return Err(Error::invalid("prediction and measurement shapes differ"));
    }
    if mask.width != pred.width {
        return Err(Error::invalid("mask width does not match k-space width"));
    }
    let mut out = pred.clone();
    apply_dc(&mut out.data, &measured.data, &mask.lines, pred.width, weight);
    Ok(out)
}

pub(crate) fn apply_dc<T: Real>(
    k: &mut [Complex<T>],
    measured: &[Complex<T>],
    lines: &[bool],
    width: usize,
    weight: DcWeight,
) {
    let hard = weight.is_hard();
    let (a, b) = match weight {
        DcWeight::Blend(l) if !hard => (T::of(1.0 / (1.0 + l)), T::of(l / (1.0 + l))),
        _ => (T::zero(), T::one()),
    };
    for (row, mrow) in k.chunks_exact_mut(width).zip(measured.chunks_exact(width)) {
        for x in 0..width {
            if lines[x] {
                row[x] = if hard { mrow[x] } else { row[x] * a + mrow[x] * b };
            }
        }
    }
}

/// Adjoint of the prediction path of [`apply_dc`] (a real diagonal).
pub(crate) fn apply_dc_adjoint<T: Real>(g: &mut [Complex<T>], lines: &[bool], width: usize, weight: DcWeight) {
    let scale = match weight {
        DcWeight::Blend(l) if !weight.is_hard() => T::of(1.0 / (1.0 + l)),
        _ => T::zero(),
    };
    for row in g.chunks_exact_mut(width) {
        for x in 0..width {
            if lines[x] {
                row[x] = row[x] * scale;
            }
        }
    }
}
