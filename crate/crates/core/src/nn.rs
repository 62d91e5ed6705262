//! Same-padded 2-D convolution via im2col + GEMM, with its reverse pass.
//!
//! Activations are stored channel-major (`C x H x W`, row-major planes).
//! Convolution weights are `[out][in][ky][kx]` followed by `out` biases.

use crate::real::Real;

/// Geometry of one convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl ConvShape {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self { in_ch, out_ch, kernel }
    }

    /// Rows of the im2col matrix.
    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn weight_len(&self) -> usize {
        self.out_ch * self.patch_len()
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.out_ch
    }
}

/// Spatial extent of an activation plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
}

impl Plane {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn im2col<T: Real>(input: &[T], channels: usize, plane: Plane, kernel: usize, cols: &mut [T]) {
    let (h, w) = (plane.height, plane.width);
    let hw = h * w;
    let pad = (kernel / 2) as isize;
    for c in 0..channels {
        let src = &input[c * hw..(c + 1) * hw];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    out[..x0.min(w)].fill(T::zero());
                    if x1 > x0 {
                        let s0 = (x0 as isize + dx) as usize;
                        out[x0..x1].copy_from_slice(&srow[s0..s0 + (x1 - x0)]);
                    }
                    out[x1.max(x0).min(w)..].fill(T::zero());
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], channels: usize, plane: Plane, kernel: usize, output: &mut [T]) {
    let (h, w) = (plane.height, plane.width);
    let hw = h * w;
    let pad = (kernel / 2) as isize;
    output.fill(T::zero());
    for c in 0..channels {
        let dst = &mut output[c * hw..(c + 1) * hw];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    if x1 <= x0 {
                        continue;
                    }
                    let s0 = (x0 as isize + dx) as usize;
                    let drow = &mut dst[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                    for (d, &v) in drow.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

/// Forward convolution. `params` holds weights then biases for `shape`;
/// `output` must hold `out_ch * plane.len()` values.
pub fn conv_forward<T: Real>(
    shape: ConvShape,
    params: &[T],
    input: &[T],
    plane: Plane,
    output: &mut [T],
    cols: &mut Vec<T>,
) {
    let hw = plane.len();
    let k = shape.patch_len();
    debug_assert_eq!(params.len(), shape.param_len());
    debug_assert_eq!(input.len(), shape.in_ch * hw);
    debug_assert_eq!(output.len(), shape.out_ch * hw);
    cols.resize(k * hw, T::zero());
    im2col(input, shape.in_ch, plane, shape.kernel, cols);
    let (weights, bias) = params.split_at(shape.weight_len());
    for (o, &b) in output.chunks_exact_mut(hw).zip(bias) {
        o.fill(b);
    }
    T::gemm(
        shape.out_ch,
        k,
        hw,
        T::one(),
        (weights, k as isize, 1),
        (cols, hw as isize, 1),
        T::one(),
        (output, hw as isize, 1),
    );
}

/// Reverse pass of [`conv_forward`]. Accumulates into `grad_params`; writes
/// the input gradient into `grad_input` when given.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Real>(
    shape: ConvShape,
    params: &[T],
    input: &[T],
    plane: Plane,
    grad_output: &[T],
    grad_params: &mut [T],
    grad_input: Option<&mut [T]>,
    cols: &mut Vec<T>,
) {
    let hw = plane.len();
    let k = shape.patch_len();
    cols.resize(k * hw, T::zero());
    im2col(input, shape.in_ch, plane, shape.kernel, cols);
    let (gw, gb) = grad_params.split_at_mut(shape.weight_len());
    T::gemm(
        shape.out_ch,
        hw,
        k,
        T::one(),
        (grad_output, hw as isize, 1),
        (cols, 1, hw as isize),
        T::one(),
        (gw, k as isize, 1),
    );
    for (b, g) in gb.iter_mut().zip(grad_output.chunks_exact(hw)) {
        *b = *b + g.iter().fold(T::zero(), |acc, &v| acc + v);
    }
    if let Some(grad_input) = grad_input {
        let weights = &params[..shape.weight_len()];
        T::gemm(
            k,
            shape.out_ch,
            hw,
            T::one(),
            (weights, 1, k as isize),
            (grad_output, hw as isize, 1),
            T::zero(),
            (cols, hw as isize, 1),
        );
        col2im(cols, shape.in_ch, plane, shape.kernel, grad_input);
    }
}

pub fn relu_inplace<T: Real>(values: &mut [T]) {
    for v in values.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zero the gradient wherever the post-ReLU activation is not positive.
pub fn relu_backward_inplace<T: Real>(activation: &[T], grad: &mut [T]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(shape: ConvShape, params: &[f64], input: &[f64], plane: Plane) -> Vec<f64> {
        let (h, w) = (plane.height as isize, plane.width as isize);
        let k = shape.kernel as isize;
        let pad = k / 2;
        let mut out = vec![0.0; shape.out_ch * plane.len()];
        for o in 0..shape.out_ch {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = params[shape.weight_len() + o];
                    for c in 0..shape.in_ch {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (sy, sx) = (y + ky - pad, x + kx - pad);
                                if sy < 0 || sy >= h || sx < 0 || sx >= w {
                                    continue;
                                }
                                let wi =
                                    ((o * shape.in_ch + c) * shape.kernel + ky as usize) * shape.kernel + kx as usize;
                                acc += params[wi] * input[c * plane.len() + (sy * w + sx) as usize];
                            }
                        }
                    }
                    out[o * plane.len() + (y * w + x) as usize] = acc;
                }
            }
        }
        out
    }

    fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn forward_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(cin, cout, k, h, w) in &[(1, 3, 3, 5, 4), (2, 2, 3, 1, 6), (3, 1, 5, 6, 6), (2, 2, 1, 3, 3)] {
            let shape = ConvShape::new(cin, cout, k);
            let plane = Plane { height: h, width: w };
            let params = random(shape.param_len(), &mut rng);
            let input = random(cin * h * w, &mut rng);
            let mut out = vec![0.0; cout * h * w];
            let mut cols = Vec::new();
            conv_forward(shape, &params, &input, plane, &mut out, &mut cols);
            let expected = naive_conv(shape, &params, &input, plane);
            for (a, b) in out.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <g, conv(x)> is bilinear in (params, x); check both gradients by
        // finite differences of that scalar.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shape = ConvShape::new(2, 3, 3);
        let plane = Plane { height: 4, width: 5 };
        let params = random(shape.param_len(), &mut rng);
        let input = random(2 * plane.len(), &mut rng);
        let g = random(3 * plane.len(), &mut rng);
        let objective =
            |p: &[f64], x: &[f64]| -> f64 { naive_conv(shape, p, x, plane).iter().zip(&g).map(|(a, b)| a * b).sum() };
        let mut gp = vec![0.0; shape.param_len()];
        let mut gx = vec![0.0; input.len()];
        let mut cols = Vec::new();
        conv_backward(shape, &params, &input, plane, &g, &mut gp, Some(&mut gx), &mut cols);
        let h = 1e-6;
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] += h;
            let up = objective(&p, &input);
            p[i] -= 2.0 * h;
            let down = objective(&p, &input);
            assert!(((up - down) / (2.0 * h) - gp[i]).abs() < 1e-6);
        }
        for i in 0..input.len() {
            let mut x = input.clone();
            x[i] += h;
            let up = objective(&params, &x);
            x[i] -= 2.0 * h;
            let down = objective(&params, &x);
            assert!(((up - down) / (2.0 * h) - gx[i]).abs() < 1e-6);
        }
    }
}
