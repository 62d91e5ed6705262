//! Synthetic phantoms, the on-disk slice format and training-pair builders.
//!
//! A dataset directory holds `manifest.json` plus one `<id>.kdmr` file per
//! slice. Slice files start with a 16-byte little-endian header
//! (`"KDMR"`, `u16` height, `u16` width, `u32` reserved, 4 zero bytes)
//! followed by `H * W` `f32` values in row-major order.

use std::f64::consts::PI;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kspace::{fft2c, ifft2c, undersample, ComplexImage, KSpaceGrid, SamplingMask};

pub const SLICE_MAGIC: &[u8; 4] = b"KDMR";
pub const SLICE_HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceRecord {
    pub id: String,
    pub split: Split,
    pub height: usize,
    pub width: usize,
    /// Intensities in `[0, 1]`, row-major.
    pub target: Vec<f32>,
}

impl SliceRecord {
    pub fn target_image(&self) -> ComplexImage {
        ComplexImage {
            height: self.height,
            width: self.width,
            data: self.target.iter().map(|&v| Complex64::new(v as f64, 0.0)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceEntry {
    pub id: String,
    pub split: Split,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub counts: SplitCounts,
    pub seed: u64,
    pub provenance: String,
    pub slices: Vec<SliceEntry>,
}

impl DatasetManifest {
    /// Checks needed before a dataset can be used for training.
    pub fn validate_for_training(&self) -> Result<()> {
        if self.counts.train == 0 || self.counts.val == 0 {
            return Err(Error::data(format!(
                "dataset {:?} needs at least one train and one val slice (has {} / {})",
                self.name, self.counts.train, self.counts.val
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<SliceRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SliceRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (rec, entry) in self.records.iter().zip(&self.manifest.slices) {
            write_slice(&dir.join(&entry.file), rec.height, rec.width, &rec.target)?;
        }
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| Error::data(format!("cannot read manifest in {}: {e}", dir.display())))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let mut records = Vec::with_capacity(manifest.slices.len());
        for entry in &manifest.slices {
            let (h, w, target) = read_slice(&dir.join(&entry.file))?;
            if h != manifest.height || w != manifest.width {
                return Err(Error::data(format!(
                    "slice {} is {h}x{w}, manifest says {}x{}",
                    entry.id, manifest.height, manifest.width
                )));
            }
            records.push(SliceRecord { id: entry.id.clone(), split: entry.split, height: h, width: w, target });
        }
        Ok(Self { manifest, records })
    }
}

pub fn write_slice(path: &Path, height: usize, width: usize, values: &[f32]) -> Result<()> {
    if height > u16::MAX as usize || width > u16::MAX as usize {
        return Err(Error::data("slice dimensions exceed 65535"));
    }
    if values.len() != height * width {
        return Err(Error::data("slice value count does not match its dimensions"));
    }
    let mut buf = Vec::with_capacity(SLICE_HEADER_LEN + 4 * values.len());
    buf.extend_from_slice(SLICE_MAGIC);
    buf.extend_from_slice(&(height as u16).to_le_bytes());
    buf.extend_from_slice(&(width as u16).to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    buf.extend_from_slice(&[0u8; 4]);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_slice(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open slice {}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    if buf.len() < SLICE_HEADER_LEN || &buf[..4] != SLICE_MAGIC {
        return Err(Error::data(format!("{} is not a KDMR slice", path.display())));
    }
    let h = u16::from_le_bytes([buf[4], buf[5]]) as usize;
    let w = u16::from_le_bytes([buf[6], buf[7]]) as usize;
    let body = &buf[SLICE_HEADER_LEN..];
    if body.len() != 4 * h * w {
        return Err(Error::data(format!(
            "{} has {} payload bytes, expected {}",
            path.display(),
            body.len(),
            4 * h * w
        )));
    }
    let values = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((h, w, values))
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    value: f64,
}

impl Ellipse {
    fn random(rng: &mut ChaCha8Rng, center_spread: f64, axes: (f64, f64), value: (f64, f64)) -> Self {
        let theta = rng.random_range(0.0..PI);
        Self {
            cx: rng.random_range(-center_spread..=center_spread),
            cy: rng.random_range(-center_spread..=center_spread),
            a: rng.random_range(axes.0..axes.1),
            b: rng.random_range(axes.0..axes.1),
            cos: theta.cos(),
            sin: theta.sin(),
            value: rng.random_range(value.0..value.1),
        }
    }

    fn contains(&self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - self.cx, v - self.cy);
        let p = (du * self.cos + dv * self.sin) / self.a;
        let q = (-du * self.sin + dv * self.cos) / self.b;
        p * p + q * q <= 1.0
    }
}

fn phantom(size: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let body = Ellipse::random(rng, 0.08, (0.6, 0.9), (0.35, 0.6));
    let inner = rng.random_range(2..=7);
    let mut parts = Vec::with_capacity(inner);
    for _ in 0..inner {
        let mut e = Ellipse::random(rng, 0.45, (0.06, 0.35), (-0.3, 0.5));
        e.cx += body.cx;
        e.cy += body.cy;
        parts.push(e);
    }
    let (fx, fy) = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
    let (px, py) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
    let amp = rng.random_range(0.02..0.08);

    let mut img = vec![0.0f64; size * size];
    for y in 0..size {
        let v = 2.0 * (y as f64 + 0.5) / size as f64 - 1.0;
        for x in 0..size {
            let u = 2.0 * (x as f64 + 0.5) / size as f64 - 1.0;
            let mut val = amp * (1.0 + (fx * PI * u + px).sin() * (fy * PI * v + py).cos());
            if body.contains(u, v) {
                val += body.value;
                for e in &parts {
                    if e.contains(u, v) {
                        val += e.value;
                    }
                }
            }
            img[y * size + x] = val;
        }
    }
    let (lo, hi) = img.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = hi - lo;
    img.iter().map(|&v| if span > 0.0 { ((v - lo) / span).clamp(0.0, 1.0) as f32 } else { 0.0 }).collect()
}

/// Deterministic ellipse phantoms. The last fifth of the slices (at least
/// one when `count >= 2`) form the validation split.
pub fn generate_phantoms(count: usize, size: usize, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::invalid("phantom count must be >= 1"));
    }
    if size < 16 {
        return Err(Error::invalid("phantom size must be >= 16"));
    }
    let n_val = if count >= 2 { (count / 5).max(1) } else { 0 };
    let n_train = count - n_val;
    let mut records = Vec::with_capacity(count);
    let mut slices = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let split = if i < n_train { Split::Train } else { Split::Val };
        let id = format!("phantom-{i:05}");
        slices.push(SliceEntry { id: id.clone(), split, file: format!("{id}.kdmr") });
        records.push(SliceRecord { id, split, height: size, width: size, target: phantom(size, &mut rng) });
    }
    let manifest = DatasetManifest {
        name: format!("phantoms-{size}-{seed}"),
        height: size,
        width: size,
        counts: SplitCounts { train: n_train, val: n_val },
        seed,
        provenance: "synthetic ellipse phantoms".into(),
        slices,
    };
    Ok(Dataset { manifest, records })
}

/// Retrospectively undersampled slice.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconPair {
    pub id: String,
    pub split: Split,
    pub zero_filled: ComplexImage,
    pub measured: KSpaceGrid,
    pub target: ComplexImage,
}

/// All slices undersampled with one fixed mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconSet {
    pub mask: SamplingMask,
    pub pairs: Vec<ReconPair>,
}

impl ReconSet {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ReconPair> {
        self.pairs.iter().filter(move |p| p.split == split)
    }
}

pub fn make_recon_pairs(records: &[SliceRecord], mask: &SamplingMask) -> Result<ReconSet> {
    let pairs = records
        .iter()
        .map(|r| {
            if r.width != mask.width {
                return Err(Error::invalid(format!(
                    "slice {} has width {} but the mask has {}",
                    r.id, r.width, mask.width
                )));
            }
            let target = r.target_image();
            let (measured, zero_filled) = undersample(&target, mask)?;
            Ok(ReconPair { id: r.id.clone(), split: r.split, zero_filled, measured, target })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReconSet { mask: mask.clone(), pairs })
}

/// Low-resolution slice interpolated back to the target grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SrPair {
    pub id: String,
    pub split: Split,
    pub interpolated_lr: ComplexImage,
    pub target: ComplexImage,
}

/// Start and length of the central `n / factor` band of a centered axis.
pub fn central_band(n: usize, factor: usize) -> (usize, usize) {
    let len = n / factor;
    (n / 2 - len / 2, len)
}

/// Fourier truncation to the central `(H/f) x (W/f)` block, zero-padded
/// back to `H x W`.
pub fn make_sr_pairs(records: &[SliceRecord], factor: usize) -> Result<Vec<SrPair>> {
    if factor == 0 {
        return Err(Error::invalid("SR factor must be >= 1"));
    }
    records
        .iter()
        .map(|r| {
            if r.height % factor != 0 || r.width % factor != 0 {
                return Err(Error::invalid(format!(
                    "slice {} ({}x{}) is not divisible by factor {factor}",
                    r.id, r.height, r.width
                )));
            }
            let target = r.target_image();
            let mut k = fft2c(&target)?;
            let (y0, hl) = central_band(r.height, factor);
            let (x0, wl) = central_band(r.width, factor);
            for y in 0..r.height {
                for x in 0..r.width {
                    let inside = (y0..y0 + hl).contains(&y) && (x0..x0 + wl).contains(&x);
                    if !inside {
                        k.data[y * r.width + x] = Complex64::new(0.0, 0.0);
                    }
                }
            }
            Ok(SrPair { id: r.id.clone(), split: r.split, interpolated_lr: ifft2c(&k)?, target })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kspace::generate_cartesian_mask;

    #[test]
    fn phantoms_are_deterministic_and_normalized() {
        let a = generate_phantoms(1, 32, 0).unwrap();
        let b = generate_phantoms(1, 32, 0).unwrap();
        assert_eq!(a.records[0].target, b.records[0].target);
        let c = generate_phantoms(1, 32, 1).unwrap();
        assert_ne!(a.records[0].target, c.records[0].target);

        let many = generate_phantoms(100, 24, 3).unwrap();
        for r in &many.records {
            assert!(r.target.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert_eq!(many.manifest.counts, SplitCounts { train: 80, val: 20 });
        many.manifest.validate_for_training().unwrap();
        assert!(a.manifest.validate_for_training().is_err());
    }

    #[test]
    fn rejects_bad_generator_arguments() {
        assert!(generate_phantoms(0, 32, 0).is_err());
        assert!(generate_phantoms(2, 8, 0).is_err());
    }

    #[test]
    fn splits_are_disjoint() {
        let ds = generate_phantoms(10, 16, 0).unwrap();
        let train: Vec<_> = ds.split(Split::Train).map(|r| r.id.clone()).collect();
        assert!(ds.split(Split::Val).all(|r| !train.contains(&r.id)));
    }

    #[test]
    fn slice_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_phantoms(5, 16, 2).unwrap();
        ds.write(dir.path()).unwrap();
        let back = Dataset::read(dir.path()).unwrap();
        assert_eq!(back, ds);
        let bytes = fs::read(dir.path().join("phantom-00000.kdmr")).unwrap();
        assert_eq!(&bytes[..4], b"KDMR");
        assert_eq!(bytes.len(), 16 + 4 * 16 * 16);
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 16);

        fs::write(dir.path().join("bad.kdmr"), b"nope").unwrap();
        assert!(matches!(read_slice(&dir.path().join("bad.kdmr")), Err(Error::Data(_))));
    }

    #[test]
    fn recon_pairs() {
        let ds = generate_phantoms(4, 16, 0).unwrap();
        let set = make_recon_pairs(&ds.records, &SamplingMask::full(16)).unwrap();
        for p in &set.pairs {
            for (a, b) in p.zero_filled.data.iter().zip(&p.target.data) {
                assert!((a - b).norm() < 1e-10);
            }
        }
        let wrong = generate_cartesian_mask(20, 4.0, 2, 0.15, 0).unwrap();
        assert!(make_recon_pairs(&ds.records, &wrong).is_err());
    }

    #[test]
    fn sr_pairs() {
        let ds = generate_phantoms(3, 32, 1).unwrap();
        let same = make_sr_pairs(&ds.records, 1).unwrap();
        for p in &same {
            for (a, b) in p.interpolated_lr.data.iter().zip(&p.target.data) {
                assert!((a - b).norm() < 1e-10);
            }
        }
        let pairs = make_sr_pairs(&ds.records, 4).unwrap();
        let (y0, hl) = central_band(32, 4);
        assert_eq!((y0, hl), (12, 8));
        for p in &pairs {
            let k = fft2c(&p.interpolated_lr).unwrap();
            for y in 0..32 {
                for x in 0..32 {
                    if !((12..20).contains(&y) && (12..20).contains(&x)) {
                        assert!(k.data[y * 32 + x].norm() < 1e-10);
                    }
                }
            }
            assert!(p.interpolated_lr.norm() <= p.target.norm() + 1e-12);
        }
        assert!(make_sr_pairs(&ds.records, 3).is_err());
    }
}
