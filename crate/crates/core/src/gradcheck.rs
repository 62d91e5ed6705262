//! Finite-difference verification of the network's reverse pass.

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distill::{at_pair_grad, pixel_loss_grad, LossNorm};
use crate::error::Result;
use crate::kspace::{generate_cartesian_mask, Fft2};
use crate::models::{Architecture, FeatureTap, NetInput, Network, NetworkParameters, TapGrad};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// `|g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|)`, 2-norms.
    pub rel_error: f64,
    /// Largest per-parameter deviation relative to the largest numeric entry.
    pub max_scaled_error: f64,
    pub parameters: usize,
    /// Parameters whose step flipped a ReLU and was retried smaller.
    pub kink_retries: usize,
}

struct Problem {
    arch: Architecture,
    height: usize,
    width: usize,
    image: Vec<Complex<f64>>,
    measured: Option<Vec<Complex<f64>>>,
    lines: Option<Vec<bool>>,
    target: Vec<Complex<f64>>,
    taps: Vec<(FeatureTap, Vec<f64>)>,
}

impl Problem {
    fn input(&self) -> NetInput<'_, f64> {
        NetInput { image: &self.image, measured: self.measured.as_deref(), lines: self.lines.as_deref() }
    }

    /// `MSE(output, target) + sum over taps of the attention loss`, and
    /// which rectified units are active.
    fn loss(&self, net: &Network<f64>, params: &NetworkParameters<f64>) -> Result<(f64, Vec<bool>)> {
        let tape = net.forward(params, &self.input())?;
        let mut l = pixel_loss_grad(tape.output(), &self.target, LossNorm::Mse).0;
        for (tap, unit) in &self.taps {
            l += at_pair_grad(tape.feature(*tap), unit)?.0;
        }
        let mut active = Vec::new();
        for c in 1..=self.arch.blocks() {
            for conv in 1..self.arch.convs_per_block() {
                active.extend(tape.feature(FeatureTap::new(c, conv)).data.iter().map(|&v| v > 0.0));
            }
        }
        Ok((l, active))
    }

    fn gradient(&self, net: &Network<f64>, params: &NetworkParameters<f64>) -> Result<Vec<f64>> {
        let input = self.input();
        let tape = net.forward(params, &input)?;
        let (_, g_out) = pixel_loss_grad(tape.output(), &self.target, LossNorm::Mse);
        let tap_grads = self
            .taps
            .iter()
            .map(|(tap, unit)| Ok(TapGrad { tap: *tap, grad: at_pair_grad(tape.feature(*tap), unit)?.1 }))
            .collect::<Result<Vec<_>>>()?;
        let mut grads = vec![0.0; params.len()];
        net.backward(params, &tape, &input, Some(&g_out), &tap_grads, &mut grads)?;
        Ok(grads)
    }
}

/// Compares analytic and central-difference gradients of a reconstruction
/// loss plus attention losses at `taps`, on random weights and data.
pub fn check_network_gradient(
    arch: &Architecture,
    height: usize,
    width: usize,
    taps: &[FeatureTap],
    step: f64,
    seed: u64,
) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = NetworkParameters::<f64>::zeros(arch.clone())?;
    for v in &mut params.values {
        *v = rng.random_range(-0.5..0.5);
    }
    let hw = height * width;
    let image: Vec<Complex<f64>> = (0..hw).map(|_| Complex::new(rng.random_range(0.0..1.0), 0.0)).collect();
    let (measured, lines, zero_filled) = match arch.dc() {
        Some(_) => {
            let mask = generate_cartesian_mask(width, 2.0, 2, 0.15, seed)?;
            let fft = Fft2::<f64>::new(height, width);
            let mut k = image.clone();
            fft.forward(&mut k);
            for (i, z) in k.iter_mut().enumerate() {
                if !mask.lines[i % width] {
                    *z = Complex::new(0.0, 0.0);
                }
            }
            let mut zf = k.clone();
            fft.inverse(&mut zf);
            (Some(k), Some(mask.lines), zf)
        }
        None => (None, None, image.clone()),
    };
    let target: Vec<Complex<f64>> = (0..hw).map(|_| Complex::new(rng.random_range(0.0..1.0), 0.0)).collect();
    let taps = taps
        .iter()
        .map(|&tap| {
            tap.validate(arch)?;
            let unit: Vec<f64> = (0..hw).map(|_| rng.random_range(0.0..1.0)).collect();
            let n = unit.iter().map(|v| v * v).sum::<f64>().sqrt();
            Ok((tap, unit.into_iter().map(|v| v / n).collect()))
        })
        .collect::<Result<Vec<_>>>()?;
    let problem = Problem { arch: arch.clone(), height, width, image: zero_filled, measured, lines, target, taps };
    let net = Network::new(&problem.arch, problem.height, problem.width)?;
    let analytic = problem.gradient(&net, &params)?;
    let (_, base) = problem.loss(&net, &params)?;
    let mut numeric = vec![0.0; params.len()];
    let mut kink_retries = 0;
    for i in 0..params.len() {
        let orig = params.values[i];
        let mut h = step;
        // a step that switches a ReLU measures the kink, not the slope
        for attempt in 0..4 {
            params.values[i] = orig + h;
            let (up, pu) = problem.loss(&net, &params)?;
            params.values[i] = orig - h;
            let (down, pd) = problem.loss(&net, &params)?;
            params.values[i] = orig;
            numeric[i] = (up - down) / (2.0 * h);
            if pu == base && pd == base {
                break;
            }
            if attempt == 0 {
                kink_retries += 1;
            }
            h /= 100.0;
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let scale = norm(&analytic).max(norm(&numeric)).max(f64::MIN_POSITIVE);
    let inf = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    Ok(GradCheck {
        rel_error: norm(&diff) / scale,
        max_scaled_error: diff.iter().fold(0.0f64, |m, v| m.max(v.abs())) / inf,
        parameters: params.len(),
        kink_retries,
    })
}
