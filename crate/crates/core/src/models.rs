//! Cascaded reconstruction networks and VDSR.
//!
//! Both architectures are a chain of blocks. A block reads the real part of
//! its complex input, runs `conv -> ReLU -> ... -> conv`, adds the result
//! back onto the input (residual) and, for DC-CNN, re-imposes the measured
//! k-space samples. VDSR is a single block with no data consistency.
//!
//! The reverse pass is written out by hand: convolution and ReLU via
//! [`crate::nn`], the data-consistency step as `F^H D F` with `D` the real
//! diagonal of the prediction weights.

use num_complex::{Complex, Complex64};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kspace::{apply_dc, apply_dc_adjoint, ComplexImage, DcWeight, Fft2, KSpaceGrid, SamplingMask};
use crate::nn::{conv_backward, conv_forward, relu_backward_inplace, relu_inplace, ConvShape, Plane};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    pub n_cascades: usize,
    pub n_convs: usize,
    #[serde(default = "default_dc_channels")]
    pub channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_dc")]
    pub dc: DcWeight,
}

fn default_dc_channels() -> usize {
    32
}

fn default_vdsr_channels() -> usize {
    64
}

fn default_kernel() -> usize {
    3
}

fn default_dc() -> DcWeight {
    DcWeight::Hard
}

impl CascadeConfig {
    pub fn new(n_cascades: usize, n_convs: usize, channels: usize) -> Self {
        Self { n_cascades, n_convs, channels, kernel: 3, dc: DcWeight::Hard }
    }

    /// Five cascades of five convolutions, 32 channels.
    pub fn teacher() -> Self {
        Self::new(5, 5, 32)
    }

    /// Five cascades of three convolutions, 32 channels.
    pub fn student() -> Self {
        Self::new(5, 3, 32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cascades == 0 {
            return Err(Error::config("n_cascades must be >= 1"));
        }
        if self.n_convs < 2 {
            return Err(Error::config("n_convs must be >= 2"));
        }
        if self.channels == 0 {
            return Err(Error::config("channels must be >= 1"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config("kernel must be odd"));
        }
        self.dc.validate()
    }

    /// `n_c * [(C k^2 + C) + (n_d - 2)(C^2 k^2 + C) + (C k^2 + 1)]`.
    pub fn parameter_count(&self) -> usize {
        let (c, k2) = (self.channels, self.kernel * self.kernel);
        self.n_cascades * ((c * k2 + c) + (self.n_convs - 2) * (c * c * k2 + c) + (c * k2 + 1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VdsrConfig {
    pub n_layers: usize,
    #[serde(default = "default_vdsr_channels")]
    pub channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
}

impl VdsrConfig {
    pub fn new(n_layers: usize, channels: usize) -> Self {
        Self { n_layers, channels, kernel: 3 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 {
            return Err(Error::config("n_layers must be >= 2"));
        }
        if self.channels == 0 {
            return Err(Error::config("channels must be >= 1"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config("kernel must be odd"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    DcCnn(CascadeConfig),
    Vdsr(VdsrConfig),
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::DcCnn(c) => c.validate(),
            Architecture::Vdsr(v) => v.validate(),
        }
    }

    pub fn blocks(&self) -> usize {
        match self {
            Architecture::DcCnn(c) => c.n_cascades,
            Architecture::Vdsr(_) => 1,
        }
    }

    pub fn convs_per_block(&self) -> usize {
        match self {
            Architecture::DcCnn(c) => c.n_convs,
            Architecture::Vdsr(v) => v.n_layers,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            Architecture::DcCnn(c) => c.channels,
            Architecture::Vdsr(v) => v.channels,
        }
    }

    fn kernel(&self) -> usize {
        match self {
            Architecture::DcCnn(c) => c.kernel,
            Architecture::Vdsr(v) => v.kernel,
        }
    }

    pub fn dc(&self) -> Option<DcWeight> {
        match self {
            Architecture::DcCnn(c) => Some(c.dc),
            Architecture::Vdsr(_) => None,
        }
    }

    /// Convolution shapes of one block, in order.
    pub fn block_shapes(&self) -> Vec<ConvShape> {
        let (n, c, k) = (self.convs_per_block(), self.channels(), self.kernel());
        (0..n)
            .map(|i| {
                let cin = if i == 0 { 1 } else { c };
                let cout = if i + 1 == n { 1 } else { c };
                ConvShape::new(cin, cout, k)
            })
            .collect()
    }

    /// Channels of the activation exported by tap `conv` (1-based).
    pub fn tap_channels(&self, conv: usize) -> usize {
        if conv == self.convs_per_block() {
            1
        } else {
            self.channels()
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks() * self.block_shapes().iter().map(ConvShape::param_len).sum::<usize>()
    }

    /// 1-based index of the middle convolution of a block.
    pub fn center_conv(&self) -> usize {
        self.convs_per_block().div_ceil(2)
    }

    pub fn hash_hex(&self) -> String {
        let text = serde_json::to_string(self).expect("architecture serializes");
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }
}

/// Flat trainable parameters in declaration order: for each block, for
/// each convolution, weights then biases.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParameters<T: Real = f32> {
    pub arch: Architecture,
    pub seed: u64,
    pub values: Vec<T>,
}

impl<T: Real> NetworkParameters<T> {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let n = arch.parameter_count();
        Ok(Self { arch, seed: 0, values: vec![T::zero(); n] })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn config_hash(&self) -> String {
        self.arch.hash_hex()
    }

    /// Content hash of the parameter values.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for v in &self.values {
            hasher.update(v.as_f64().to_le_bytes());
        }
        hex::encode(&hasher.finalize()[..16])
    }

    pub fn cast<U: Real>(&self) -> NetworkParameters<U> {
        NetworkParameters {
            arch: self.arch.clone(),
            seed: self.seed,
            values: self.values.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

fn block_offsets(arch: &Architecture) -> Vec<usize> {
    let shapes = arch.block_shapes();
    let block_len: usize = shapes.iter().map(ConvShape::param_len).sum();
    let mut offsets = Vec::with_capacity(arch.blocks() * shapes.len());
    for b in 0..arch.blocks() {
        let mut off = b * block_len;
        for s in &shapes {
            offsets.push(off);
            off += s.param_len();
        }
    }
    offsets
}

/// Exact number of trainable scalars.
pub fn count_parameters<T: Real>(params: &NetworkParameters<T>) -> usize {
    params.len()
}

/// Kaiming-normal weights (fan-in), zero biases.
pub fn build(arch: &Architecture, seed: u64) -> Result<NetworkParameters<f32>> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(arch.parameter_count());
    let shapes = arch.block_shapes();
    for _ in 0..arch.blocks() {
        for s in &shapes {
            let std = (2.0 / s.patch_len() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            values.extend((0..s.weight_len()).map(|_| normal.sample(&mut rng) as f32));
            values.extend(std::iter::repeat_n(0.0f32, s.out_ch));
        }
    }
    Ok(NetworkParameters { arch: arch.clone(), seed, values })
}

pub fn build_dccnn(config: &CascadeConfig, seed: u64) -> Result<NetworkParameters<f32>> {
    build(&Architecture::DcCnn(config.clone()), seed)
}

pub fn build_vdsr(config: &VdsrConfig, seed: u64) -> Result<NetworkParameters<f32>> {
    build(&Architecture::Vdsr(config.clone()), seed)
}

/// Post-activation export point: `conv`-th convolution (1-based) of
/// `cascade`-th block (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureTap {
    pub cascade: usize,
    pub conv: usize,
}

impl FeatureTap {
    pub fn new(cascade: usize, conv: usize) -> Self {
        Self { cascade, conv }
    }

    pub fn validate(&self, arch: &Architecture) -> Result<()> {
        if self.cascade == 0 || self.cascade > arch.blocks() {
            return Err(Error::config(format!("tap cascade {} outside 1..={}", self.cascade, arch.blocks())));
        }
        if self.conv == 0 || self.conv > arch.convs_per_block() {
            return Err(Error::config(format!("tap conv {} outside 1..={}", self.conv, arch.convs_per_block())));
        }
        Ok(())
    }
}

/// The middle convolution of every block.
pub fn center_taps(arch: &Architecture) -> Vec<FeatureTap> {
    (1..=arch.blocks()).map(|c| FeatureTap::new(c, arch.center_conv())).collect()
}

/// Borrowed `C x H x W` activation.
#[derive(Debug, Clone, Copy)]
pub struct FeatureView<'a, T> {
    pub channels: usize,
    pub plane: Plane,
    pub data: &'a [T],
}

/// Owned `C x H x W` activation.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn view(&self) -> FeatureView<'_, f64> {
        FeatureView {
            channels: self.channels,
            plane: Plane { height: self.height, width: self.width },
            data: &self.data,
        }
    }
}

/// One network input in engine precision.
#[derive(Debug, Clone, Copy)]
pub struct NetInput<'a, T> {
    pub image: &'a [Complex<T>],
    pub measured: Option<&'a [Complex<T>]>,
    pub lines: Option<&'a [bool]>,
}

struct BlockTape<T> {
    input: Vec<T>,
    acts: Vec<Vec<T>>,
}

/// Activations retained by a forward pass for the reverse pass.
pub struct Tape<T> {
    plane: Plane,
    blocks: Vec<BlockTape<T>>,
    output: Vec<Complex<T>>,
}

impl<T: Real> Tape<T> {
    pub fn output(&self) -> &[Complex<T>] {
        &self.output
    }

    pub fn into_output(self) -> Vec<Complex<T>> {
        self.output
    }

    pub fn feature(&self, tap: FeatureTap) -> FeatureView<'_, T> {
        let data = &self.blocks[tap.cascade - 1].acts[tap.conv - 1];
        FeatureView { channels: data.len() / self.plane.len(), plane: self.plane, data }
    }
}

/// Gradient injected at a tapped activation.
pub struct TapGrad<T> {
    pub tap: FeatureTap,
    pub grad: Vec<T>,
}

/// Forward/reverse evaluator for one architecture at one image size.
pub struct Network<T: Real> {
    arch: Architecture,
    plane: Plane,
    shapes: Vec<ConvShape>,
    offsets: Vec<usize>,
    fft: Option<Fft2<T>>,
}

impl<T: Real> Network<T> {
    pub fn new(arch: &Architecture, height: usize, width: usize) -> Result<Self> {
        arch.validate()?;
        if height == 0 || width == 0 {
            return Err(Error::invalid("image must be at least 1x1"));
        }
        Ok(Self {
            arch: arch.clone(),
            plane: Plane { height, width },
            shapes: arch.block_shapes(),
            offsets: block_offsets(arch),
            fft: arch.dc().map(|_| Fft2::new(height, width)),
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn plane(&self) -> Plane {
        self.plane
    }

    fn check(&self, params: &NetworkParameters<T>, input: &NetInput<'_, T>) -> Result<()> {
        if params.arch != self.arch {
            return Err(Error::config("parameters were built for a different architecture"));
        }
        let n = self.plane.len();
        if input.image.len() != n {
            return Err(Error::invalid("input image does not match network size"));
        }
        if self.arch.dc().is_some() {
            match (input.measured, input.lines) {
                (Some(m), Some(l)) if m.len() == n && l.len() == self.plane.width => {}
                _ => return Err(Error::invalid("data consistency needs measured k-space and a mask of matching size")),
            }
        }
        Ok(())
    }

    fn conv_params<'p>(&self, params: &'p NetworkParameters<T>, block: usize, conv: usize) -> &'p [T] {
        let idx = block * self.shapes.len() + conv;
        let off = self.offsets[idx];
        &params.values[off..off + self.shapes[conv].param_len()]
    }

    /// Forward pass retaining every activation.
    pub fn forward(&self, params: &NetworkParameters<T>, input: &NetInput<'_, T>) -> Result<Tape<T>> {
        self.check(params, input)?;
        let hw = self.plane.len();
        let mut x: Vec<Complex<T>> = input.image.to_vec();
        let mut cols = Vec::new();
        let mut blocks = Vec::with_capacity(self.arch.blocks());
        for b in 0..self.arch.blocks() {
            let block_input: Vec<T> = x.iter().map(|z| z.re).collect();
            let mut acts: Vec<Vec<T>> = Vec::with_capacity(self.shapes.len());
            for (i, shape) in self.shapes.iter().enumerate() {
                let src = if i == 0 { &block_input } else { &acts[i - 1] };
                let mut out = vec![T::zero(); shape.out_ch * hw];
                conv_forward(*shape, self.conv_params(params, b, i), src, self.plane, &mut out, &mut cols);
                if i + 1 < self.shapes.len() {
                    relu_inplace(&mut out);
                }
                acts.push(out);
            }
            for (z, &r) in x.iter_mut().zip(acts.last().expect("at least two convs")) {
                z.re = z.re + r;
            }
            if let (Some(weight), Some(fft)) = (self.arch.dc(), &self.fft) {
                fft.forward(&mut x);
                apply_dc(
                    &mut x,
                    input.measured.expect("checked"),
                    input.lines.expect("checked"),
                    self.plane.width,
                    weight,
                );
                fft.inverse(&mut x);
            }
            blocks.push(BlockTape { input: block_input, acts });
        }
        Ok(Tape { plane: self.plane, blocks, output: x })
    }

    /// Reverse pass. `grad_output` is `dL/dRe + i dL/dIm` of the output;
    /// tap gradients are with respect to the exported activations.
    /// Parameter gradients are accumulated into `grads`.
    pub fn backward(
        &self,
        params: &NetworkParameters<T>,
        tape: &Tape<T>,
        input: &NetInput<'_, T>,
        grad_output: Option<&[Complex<T>]>,
        tap_grads: &[TapGrad<T>],
        grads: &mut [T],
    ) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::invalid("gradient buffer has the wrong length"));
        }
        for tg in tap_grads {
            tg.tap.validate(&self.arch)?;
        }
        let hw = self.plane.len();
        let n_convs = self.shapes.len();
        let mut g: Vec<Complex<T>> = match grad_output {
            Some(go) if go.len() == hw => go.to_vec(),
            Some(_) => return Err(Error::invalid("output gradient has the wrong length")),
            None => vec![Complex::default(); hw],
        };
        let mut g_live = grad_output.is_some();
        let mut cols = Vec::new();

        for b in (0..self.arch.blocks()).rev() {
            let block_taps: Vec<&TapGrad<T>> = tap_grads.iter().filter(|t| t.tap.cascade == b + 1).collect();
            if !g_live && block_taps.is_empty() {
                continue;
            }
            if g_live {
                if let (Some(weight), Some(fft)) = (self.arch.dc(), &self.fft) {
                    fft.forward(&mut g);
                    apply_dc_adjoint(&mut g, input.lines.expect("checked"), self.plane.width, weight);
                    fft.inverse(&mut g);
                }
            }
            let bt = &tape.blocks[b];
            // gradient w.r.t. the residual branch output
            let mut d: Vec<T> = g.iter().map(|z| z.re).collect();
            for i in (0..n_convs).rev() {
                for tg in block_taps.iter().filter(|t| t.tap.conv == i + 1) {
                    if tg.grad.len() != d.len() {
                        return Err(Error::invalid("tap gradient has the wrong length"));
                    }
                    for (a, &v) in d.iter_mut().zip(&tg.grad) {
                        *a = *a + v;
                    }
                }
                if i + 1 < n_convs {
                    relu_backward_inplace(&bt.acts[i], &mut d);
                }
                let shape = self.shapes[i];
                let src = if i == 0 { &bt.input } else { &bt.acts[i - 1] };
                let off = self.offsets[b * n_convs + i];
                let gp = &mut grads[off..off + shape.param_len()];
                let need_input = i > 0 || b > 0;
                let mut d_in = if need_input { vec![T::zero(); shape.in_ch * hw] } else { Vec::new() };
                conv_backward(
                    shape,
                    self.conv_params(params, b, i),
                    src,
                    self.plane,
                    &d,
                    gp,
                    if need_input { Some(&mut d_in) } else { None },
                    &mut cols,
                );
                d = d_in;
            }
            if b > 0 {
                // residual identity plus the conv branch, which saw Re(x)
                for (z, &v) in g.iter_mut().zip(&d) {
                    z.re = z.re + v;
                }
            }
            g_live = true;
        }
        Ok(())
    }
}

fn to_engine<T: Real>(data: &[Complex64]) -> Vec<Complex<T>> {
    data.iter().map(|z| Complex::new(T::of(z.re), T::of(z.im))).collect()
}

fn from_engine<T: Real>(data: &[Complex<T>]) -> Vec<Complex64> {
    data.iter().map(|z| Complex64::new(z.re.as_f64(), z.im.as_f64())).collect()
}

fn export_features<T: Real>(tape: &Tape<T>, taps: &[FeatureTap]) -> Vec<FeatureMap> {
    taps.iter()
        .map(|&tap| {
            let v = tape.feature(tap);
            FeatureMap {
                channels: v.channels,
                height: v.plane.height,
                width: v.plane.width,
                data: v.data.iter().map(|x| x.as_f64()).collect(),
            }
        })
        .collect()
}

/// Reconstruction from a zero-filled image and its measurements.
pub fn forward_dccnn<T: Real>(
    params: &NetworkParameters<T>,
    zero_filled: &ComplexImage,
    measured: &KSpaceGrid,
    mask: &SamplingMask,
    taps: &[FeatureTap],
) -> Result<(ComplexImage, Vec<FeatureMap>)> {
    if !matches!(params.arch, Architecture::DcCnn(_)) {
        return Err(Error::config("forward_dccnn needs DC-CNN parameters"));
    }
    if measured.height != zero_filled.height || measured.width != zero_filled.width {
        return Err(Error::invalid("measured k-space and zero-filled image differ in shape"));
    }
    if mask.width != zero_filled.width {
        return Err(Error::invalid("mask width does not match image width"));
    }
    for t in taps {
        t.validate(&params.arch)?;
    }
    let net = Network::<T>::new(&params.arch, zero_filled.height, zero_filled.width)?;
    let image = to_engine::<T>(&zero_filled.data);
    let meas = to_engine::<T>(&measured.data);
    let input = NetInput { image: &image, measured: Some(&meas), lines: Some(&mask.lines) };
    let tape = net.forward(params, &input)?;
    let features = export_features(&tape, taps);
    let out = ComplexImage { height: zero_filled.height, width: zero_filled.width, data: from_engine(tape.output()) };
    Ok((out, features))
}

/// Super-resolved image from an interpolated low-resolution input.
pub fn forward_vdsr<T: Real>(
    params: &NetworkParameters<T>,
    interpolated_lr: &ComplexImage,
    taps: &[FeatureTap],
) -> Result<(ComplexImage, Vec<FeatureMap>)> {
    if !matches!(params.arch, Architecture::Vdsr(_)) {
        return Err(Error::config("forward_vdsr needs VDSR parameters"));
    }
    for t in taps {
        t.validate(&params.arch)?;
    }
    let net = Network::<T>::new(&params.arch, interpolated_lr.height, interpolated_lr.width)?;
    let image = to_engine::<T>(&interpolated_lr.data);
    let tape = net.forward(params, &NetInput { image: &image, measured: None, lines: None })?;
    let features = export_features(&tape, taps);
    let out =
        ComplexImage { height: interpolated_lr.height, width: interpolated_lr.width, data: from_engine(tape.output()) };
    Ok((out, features))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kspace::{fft2c, generate_cartesian_mask, undersample};
    use rand::Rng;

    fn random_real(h: usize, w: usize, seed: u64) -> ComplexImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        ComplexImage::from_real(h, w, &v).unwrap()
    }

    #[test]
    fn closed_form_counts() {
        assert_eq!(CascadeConfig::teacher().parameter_count(), 141_765);
        assert_eq!(CascadeConfig::student().parameter_count(), 49_285);
        assert_eq!(build_dccnn(&CascadeConfig::teacher(), 0).unwrap().len(), 141_765);
        assert_eq!(build_dccnn(&CascadeConfig::student(), 0).unwrap().len(), 49_285);
        assert_eq!(count_parameters(&build_dccnn(&CascadeConfig::new(1, 2, 1), 0).unwrap()), 20);
        assert_eq!(build_vdsr(&VdsrConfig::new(11, 64), 0).unwrap().len(), 333_569);
        assert_eq!(build_vdsr(&VdsrConfig::new(7, 64), 0).unwrap().len(), 185_857);
    }

    #[test]
    fn invalid_configs() {
        assert!(matches!(CascadeConfig::new(0, 3, 4).validate(), Err(Error::Config(_))));
        assert!(matches!(CascadeConfig::new(1, 1, 4).validate(), Err(Error::Config(_))));
        let mut c = CascadeConfig::new(1, 2, 4);
        c.kernel = 4;
        assert!(build_dccnn(&c, 0).is_err());
        c.kernel = 3;
        c.dc = DcWeight::Blend(-1.0);
        assert!(build_dccnn(&c, 0).is_err());
        assert!(build_vdsr(&VdsrConfig::new(1, 4), 0).is_err());
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = build_dccnn(&CascadeConfig::new(2, 3, 4), 11).unwrap();
        let b = build_dccnn(&CascadeConfig::new(2, 3, 4), 11).unwrap();
        let c = build_dccnn(&CascadeConfig::new(2, 3, 4), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn zero_weights_give_zero_filled() {
        let target = random_real(12, 12, 1);
        let mask = generate_cartesian_mask(12, 3.0, 2, 0.15, 0).unwrap();
        let (meas, zf) = undersample(&target, &mask).unwrap();
        let params = NetworkParameters::<f64>::zeros(Architecture::DcCnn(CascadeConfig::new(3, 3, 4))).unwrap();
        let (rec, _) = forward_dccnn(&params, &zf, &meas, &mask, &[]).unwrap();
        for (a, b) in rec.data.iter().zip(&zf.data) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn full_mask_returns_target() {
        let target = random_real(10, 10, 2);
        let mask = SamplingMask::full(10);
        let (meas, zf) = undersample(&target, &mask).unwrap();
        let params = build_dccnn(&CascadeConfig::new(2, 3, 4), 5).unwrap().cast::<f64>();
        let (rec, _) = forward_dccnn(&params, &zf, &meas, &mask, &[]).unwrap();
        for (a, b) in rec.data.iter().zip(&target.data) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn hard_dc_holds_for_arbitrary_weights() {
        let target = random_real(16, 16, 3);
        let mask = generate_cartesian_mask(16, 4.0, 2, 0.15, 1).unwrap();
        let (meas, zf) = undersample(&target, &mask).unwrap();
        let params = build_dccnn(&CascadeConfig::new(2, 3, 4), 9).unwrap().cast::<f64>();
        let (rec, _) = forward_dccnn(&params, &zf, &meas, &mask, &[]).unwrap();
        let k = fft2c(&rec).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                if mask.lines[x] {
                    assert!((k.data[y * 16 + x] - meas.data[y * 16 + x]).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn taps_are_post_relu_and_validated() {
        let target = random_real(8, 8, 4);
        let mask = SamplingMask::full(8);
        let (meas, zf) = undersample(&target, &mask).unwrap();
        let params = build_dccnn(&CascadeConfig::new(2, 3, 4), 1).unwrap();
        let taps = [FeatureTap::new(1, 1), FeatureTap::new(2, 2)];
        let (_, feats) = forward_dccnn(&params, &zf, &meas, &mask, &taps).unwrap();
        assert_eq!(feats.len(), 2);
        assert_eq!((feats[0].channels, feats[0].height, feats[0].width), (4, 8, 8));
        assert!(feats.iter().all(|f| f.data.iter().all(|&v| v >= 0.0)));
        assert!(forward_dccnn(&params, &zf, &meas, &mask, &[FeatureTap::new(3, 1)]).is_err());
        assert!(forward_dccnn(&params, &zf, &meas, &mask, &[FeatureTap::new(1, 4)]).is_err());
        assert!(forward_dccnn(&params, &zf, &meas, &mask, &[FeatureTap::new(0, 1)]).is_err());
    }

    #[test]
    fn vdsr_zero_weights_is_identity() {
        let img = random_real(9, 7, 5);
        let params = NetworkParameters::<f64>::zeros(Architecture::Vdsr(VdsrConfig::new(4, 3))).unwrap();
        let (hr, feats) = forward_vdsr(&params, &img, &[FeatureTap::new(1, 2)]).unwrap();
        assert_eq!(hr.data, img.data);
        assert_eq!(feats[0].channels, 3);
    }

    #[test]
    fn forward_is_deterministic() {
        let target = random_real(8, 8, 6);
        let mask = generate_cartesian_mask(8, 2.0, 2, 0.15, 0).unwrap();
        let (meas, zf) = undersample(&target, &mask).unwrap();
        let params = build_dccnn(&CascadeConfig::new(2, 3, 4), 2).unwrap();
        let a = forward_dccnn(&params, &zf, &meas, &mask, &[]).unwrap();
        let b = forward_dccnn(&params, &zf, &meas, &mask, &[]).unwrap();
        assert_eq!(a, b);
    }
}
