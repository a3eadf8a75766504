//! Minimal differentiable layers for the testbed models.
//!
//! Feature maps are `(C, H, W)` f64 arrays. Every layer ships a hand-written
//! backward pass for both parameters and inputs; attacks only need the input
//! path, so parameter gradients are optional. All activations are smooth
//! (SiLU, average pooling), which keeps central finite differences honest.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// sigmoid(x) = 1 / (1 + e^-x)
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// SiLU activation: x * sigmoid(x).
pub fn silu_forward(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v * sigmoid(v))
}

/// d/dx [x * sigmoid(x)] = sigmoid(x) * (1 + x * (1 - sigmoid(x)))
pub fn silu_backward(x: &Array3<f64>, dout: &Array3<f64>) -> Array3<f64> {
    let mut dx = dout.clone();
    dx.zip_mut_with(x, |d, &v| {
        let s = sigmoid(v);
        *d *= s * (1.0 + v * (1.0 - s));
    });
    dx
}

/// 2x2 average pooling, stride 2.
pub fn avgpool2_forward(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    debug_assert!(h % 2 == 0 && w % 2 == 0);
    let (ho, wo) = (h / 2, w / 2);
    Array3::from_shape_fn((c, ho, wo), |(ci, y, xx)| {
        0.25 * (x[[ci, 2 * y, 2 * xx]]
            + x[[ci, 2 * y, 2 * xx + 1]]
            + x[[ci, 2 * y + 1, 2 * xx]]
            + x[[ci, 2 * y + 1, 2 * xx + 1]])
    })
}

pub fn avgpool2_backward(dout: &Array3<f64>, in_h: usize, in_w: usize) -> Array3<f64> {
    let (c, ho, wo) = dout.dim();
    let mut dx = Array3::zeros((c, in_h, in_w));
    for ci in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                let g = 0.25 * dout[[ci, y, xx]];
                dx[[ci, 2 * y, 2 * xx]] = g;
                dx[[ci, 2 * y, 2 * xx + 1]] = g;
                dx[[ci, 2 * y + 1, 2 * xx]] = g;
                dx[[ci, 2 * y + 1, 2 * xx + 1]] = g;
            }
        }
    }
    dx
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2_forward(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ci, y, xx)| x[[ci, y / 2, xx / 2]])
}

pub fn upsample2_backward(dout: &Array3<f64>) -> Array3<f64> {
    let (c, h2, w2) = dout.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h2 {
            for xx in 0..w2 {
                dx[[ci, y / 2, xx / 2]] += dout[[ci, y, xx]];
            }
        }
    }
    dx
}

/// Concatenate two feature maps along the channel axis.
pub fn concat_channels(a: &Array3<f64>, b: &Array3<f64>) -> Array3<f64> {
    let (ca, h, w) = a.dim();
    let (cb, hb, wb) = b.dim();
    debug_assert_eq!((h, w), (hb, wb));
    let mut out = Array3::zeros((ca + cb, h, w));
    out.slice_mut(ndarray::s![..ca, .., ..]).assign(a);
    out.slice_mut(ndarray::s![ca.., .., ..]).assign(b);
    out
}

pub fn split_channels(d: &Array3<f64>, ca: usize) -> (Array3<f64>, Array3<f64>) {
    (
        d.slice(ndarray::s![..ca, .., ..]).to_owned(),
        d.slice(ndarray::s![ca.., .., ..]).to_owned(),
    )
}

/// Square convolution with stride 1 and "same" padding (k odd).
///
/// Weight layout is `(cout, cin * k * k)` so the forward pass is a single
/// GEMM against the im2col matrix.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

#[derive(Debug, Clone)]
pub struct Conv2dGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Conv2d {
    pub fn new_seeded(cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(k % 2 == 1, "only odd kernels supported");
        let fan_in = (cin * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let weight =
            Array2::from_shape_simple_fn((cout, cin * k * k), || rng.gen_range(-bound..bound));
        Self {
            weight,
            bias: Array1::zeros(cout),
            cin,
            cout,
            k,
        }
    }

    pub fn zeros_like(&self) -> Conv2dGrad {
        Conv2dGrad {
            weight: Array2::zeros(self.weight.dim()),
            bias: Array1::zeros(self.bias.dim()),
        }
    }

    /// Returns the output map and the im2col matrix (needed for the weight
    /// gradient in the backward pass).
    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, Array2<f64>) {
        let (cin, h, w) = x.dim();
        debug_assert_eq!(cin, self.cin);
        let col = im2col(x, self.k);
        let mut out = self.weight.dot(&col);
        for (r, mut row) in out.outer_iter_mut().enumerate() {
            row += self.bias[r];
        }
        let out3 = out
            .into_shape_with_order((self.cout, h, w))
            .expect("conv output reshape");
        (out3, col)
    }

    /// Backward pass. `col` is the im2col matrix returned by [`Self::forward`].
    pub fn backward(
        &self,
        col: &Array2<f64>,
        dout: &Array3<f64>,
        in_hw: (usize, usize),
        want_param_grads: bool,
    ) -> (Array3<f64>, Option<Conv2dGrad>) {
        let (cout, h, w) = dout.dim();
        debug_assert_eq!(cout, self.cout);
        let dout_mat = dout
            .to_shape((cout, h * w))
            .expect("conv dout reshape")
            .to_owned();
        let grads = want_param_grads.then(|| Conv2dGrad {
            weight: dout_mat.dot(&col.t()),
            bias: dout_mat.sum_axis(ndarray::Axis(1)),
        });
        let dcol = self.weight.t().dot(&dout_mat);
        let dx = col2im(&dcol, self.cin, in_hw.0, in_hw.1, self.k);
        (dx, grads)
    }
}

/// im2col for stride-1 same-padded convolution.
pub fn im2col(x: &Array3<f64>, k: usize) -> Array2<f64> {
    let (cin, h, w) = x.dim();
    if k == 1 {
        return x
            .to_shape((cin, h * w))
            .expect("1x1 im2col reshape")
            .to_owned();
    }
    let pad = (k - 1) / 2;
    let mut col = Array2::zeros((cin * k * k, h * w));
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = c * k * k + ky * k + kx;
                for y in 0..h {
                    let iy = (y + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let ix = (xx + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[row, y * w + xx]] = x[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`].
pub fn col2im(dcol: &Array2<f64>, cin: usize, h: usize, w: usize, k: usize) -> Array3<f64> {
    if k == 1 {
        return dcol
            .to_shape((cin, h, w))
            .expect("1x1 col2im reshape")
            .to_owned();
    }
    let pad = (k - 1) / 2;
    let mut dx = Array3::zeros((cin, h, w));
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = c * k * k + ky * k + kx;
                for y in 0..h {
                    let iy = (y + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let ix = (xx + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[[c, iy as usize, ix as usize]] += dcol[[row, y * w + xx]];
                    }
                }
            }
        }
    }
    dx
}

/// Dense layer `y = W x + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LinearGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new_seeded(n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / n_in as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((n_out, n_in), || rng.gen_range(-bound..bound));
        Self {
            weight,
            bias: Array1::zeros(n_out),
        }
    }

    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.weight.dot(x) + &self.bias
    }

    pub fn backward(
        &self,
        x: &Array1<f64>,
        dout: &Array1<f64>,
        want_param_grads: bool,
    ) -> (Array1<f64>, Option<LinearGrad>) {
        let grads = want_param_grads.then(|| {
            let mut dw = Array2::zeros(self.weight.dim());
            for (i, &g) in dout.iter().enumerate() {
                for (j, &xv) in x.iter().enumerate() {
                    dw[[i, j]] = g * xv;
                }
            }
            LinearGrad {
                weight: dw,
                bias: dout.clone(),
            }
        });
        (self.weight.t().dot(dout), grads)
    }
}

/// Mean over the spatial axes: `(C, H, W) -> (C,)`.
pub fn global_avgpool_forward(x: &Array3<f64>) -> Array1<f64> {
    let (c, h, w) = x.dim();
    let scale = 1.0 / (h * w) as f64;
    Array1::from_shape_fn(c, |ci| {
        x.index_axis(ndarray::Axis(0), ci).sum() * scale
    })
}

pub fn global_avgpool_backward(dout: &Array1<f64>, h: usize, w: usize) -> Array3<f64> {
    let c = dout.len();
    let scale = 1.0 / (h * w) as f64;
    Array3::from_shape_fn((c, h, w), |(ci, _, _)| dout[ci] * scale)
}

/// Smooth-max spatial pooling per channel:
/// `y_c = (1/beta) * ln(mean_hw exp(beta * x))`.
///
/// Approaches max pooling as beta grows while staying smooth, so a shape's
/// presence registers independently of its area.
pub fn lse_pool_forward(x: &Array3<f64>, beta: f64) -> Array1<f64> {
    let (c, h, w) = x.dim();
    Array1::from_shape_fn(c, |ci| {
        let plane = x.index_axis(ndarray::Axis(0), ci);
        let m = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = plane.iter().map(|&v| ((v - m) * beta).exp()).sum();
        m + (sum / (h * w) as f64).ln() / beta
    })
}

/// Gradient of smooth-max pooling: per channel a softmax over positions.
pub fn lse_pool_backward(x: &Array3<f64>, beta: f64, dout: &Array1<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut dx = Array3::zeros((c, h, w));
    for ci in 0..c {
        let plane = x.index_axis(ndarray::Axis(0), ci);
        let m = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in plane.iter() {
            sum += ((v - m) * beta).exp();
        }
        for y in 0..h {
            for xx in 0..w {
                let weight = ((x[[ci, y, xx]] - m) * beta).exp() / sum;
                dx[[ci, y, xx]] = dout[ci] * weight;
            }
        }
    }
    dx
}

/// SiLU over a vector.
pub fn silu_vec_forward(x: &Array1<f64>) -> Array1<f64> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu_vec_backward(x: &Array1<f64>, dout: &Array1<f64>) -> Array1<f64> {
    let mut dx = dout.clone();
    dx.zip_mut_with(x, |d, &v| {
        let s = sigmoid(v);
        *d *= s * (1.0 + v * (1.0 - s));
    });
    dx
}

/// L2 normalization `y = x / |x|` with its backward pass.
pub fn normalize_forward(x: &Array1<f64>) -> (Array1<f64>, f64) {
    let norm = x.dot(x).sqrt().max(1e-12);
    (x / norm, norm)
}

pub fn normalize_backward(y: &Array1<f64>, norm: f64, dout: &Array1<f64>) -> Array1<f64> {
    let proj = y.dot(dout);
    (dout - &(y * proj)) / norm
}

/// Numerically stable softmax over a slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / sum).collect()
}

/// Stable log-sum-exp.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Adam optimizer over named flat parameter slices.
#[derive(Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    state: std::collections::HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            state: std::collections::HashMap::new(),
        }
    }

    /// Apply one update. `pairs` enumerates `(name, param, grad)`; names key
    /// the optimizer state and must be stable across steps.
    pub fn step(&mut self, pairs: &mut [(String, &mut [f64], Vec<f64>)]) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, param, grad) in pairs.iter_mut() {
            if param.len() != grad.len() {
                return Err(Error::InvalidArgument(format!(
                    "optimizer shape mismatch for {name}"
                )));
            }
            let (m, v) = self
                .state
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; param.len()], vec![0.0; param.len()]));
            for i in 0..param.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;
    use ndarray::{Array1, Array3};

    /// Central finite difference of a scalar function over an Array3.
    fn fd_grad3(f: &mut dyn FnMut(&Array3<f64>) -> f64, x: &Array3<f64>, h: f64) -> Array3<f64> {
        let mut grad = Array3::zeros(x.dim());
        let mut xp = x.clone();
        for idx in ndarray::indices(x.dim()) {
            let orig = xp[idx];
            xp[idx] = orig + h;
            let fp = f(&xp);
            xp[idx] = orig - h;
            let fm = f(&xp);
            xp[idx] = orig;
            grad[idx] = (fp - fm) / (2.0 * h);
        }
        grad
    }

    fn rand3(dim: (usize, usize, usize), seed: u64) -> Array3<f64> {
        let mut rng = rng_from_seed(seed);
        Array3::from_shape_simple_fn(dim, || rng.gen_range(-1.0..1.0))
    }

    fn assert_close3(a: &Array3<f64>, b: &Array3<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            // gradients below ~1e-7 are under the central-difference noise
            // floor (loss ulp / h); only relative agreement above it counts
            if x.abs().max(y.abs()) < 1e-7 {
                continue;
            }
            let scale = x.abs().max(y.abs());
            assert!(
                (x - y).abs() / scale < tol,
                "gradient mismatch: {x} vs {y}"
            );
        }
    }

    #[test]
    fn conv_input_gradient_matches_finite_differences() {
        let mut rng = rng_from_seed(1);
        let conv = Conv2d::new_seeded(2, 3, 3, &mut rng);
        let x = rand3((2, 5, 5), 2);
        let w_out = rand3((3, 5, 5), 3); // fixed projection to a scalar loss
        let mut f = |xv: &Array3<f64>| {
            let (out, _) = conv.forward(xv);
            (&out * &w_out).sum()
        };
        let (_, col) = conv.forward(&x);
        let (dx, _) = conv.backward(&col, &w_out, (5, 5), false);
        let fd = fd_grad3(&mut f, &x, 1e-6);
        assert_close3(&dx, &fd, 1e-6);
    }

    #[test]
    fn conv_weight_gradient_matches_finite_differences() {
        let mut rng = rng_from_seed(4);
        let mut conv = Conv2d::new_seeded(2, 2, 3, &mut rng);
        let x = rand3((2, 4, 4), 5);
        let w_out = rand3((2, 4, 4), 6);
        let (_, col) = conv.forward(&x);
        let (_, grads) = conv.backward(&col, &w_out, (4, 4), true);
        let grads = grads.unwrap();
        let h = 1e-6;
        for idx in [(0, 0), (1, 7), (0, 17)] {
            let orig = conv.weight[idx];
            conv.weight[idx] = orig + h;
            let fp = (&conv.forward(&x).0 * &w_out).sum();
            conv.weight[idx] = orig - h;
            let fm = (&conv.forward(&x).0 * &w_out).sum();
            conv.weight[idx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            assert!((grads.weight[idx] - fd).abs() < 1e-6 * fd.abs().max(1.0));
        }
        // bias gradient: dL/db_r = sum of w_out over row r
        for r in 0..2 {
            let expect = w_out.index_axis(ndarray::Axis(0), r).sum();
            assert!((grads.bias[r] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn one_by_one_conv_gradients() {
        let mut rng = rng_from_seed(7);
        let conv = Conv2d::new_seeded(3, 2, 1, &mut rng);
        let x = rand3((3, 4, 4), 8);
        let w_out = rand3((2, 4, 4), 9);
        let mut f = |xv: &Array3<f64>| {
            let (out, _) = conv.forward(xv);
            (&out * &w_out).sum()
        };
        let (_, col) = conv.forward(&x);
        let (dx, _) = conv.backward(&col, &w_out, (4, 4), false);
        let fd = fd_grad3(&mut f, &x, 1e-6);
        assert_close3(&dx, &fd, 1e-6);
    }

    #[test]
    fn silu_gradient_matches_finite_differences() {
        let x = rand3((2, 3, 3), 10);
        let w_out = rand3((2, 3, 3), 11);
        let mut f = |xv: &Array3<f64>| (&silu_forward(xv) * &w_out).sum();
        let dx = silu_backward(&x, &w_out);
        let fd = fd_grad3(&mut f, &x, 1e-6);
        assert_close3(&dx, &fd, 1e-6);
    }

    #[test]
    fn avgpool_roundtrip_gradient() {
        let x = rand3((2, 4, 4), 12);
        let w_out = rand3((2, 2, 2), 13);
        let mut f = |xv: &Array3<f64>| (&avgpool2_forward(xv) * &w_out).sum();
        let dx = avgpool2_backward(&w_out, 4, 4);
        let fd = fd_grad3(&mut f, &x, 1e-6);
        assert_close3(&dx, &fd, 1e-6);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = rand3((2, 3, 3), 14);
        let w_out = rand3((2, 6, 6), 15);
        let mut f = |xv: &Array3<f64>| (&upsample2_forward(xv) * &w_out).sum();
        let dx = upsample2_backward(&w_out);
        let fd = fd_grad3(&mut f, &x, 1e-6);
        assert_close3(&dx, &fd, 1e-6);
    }

    #[test]
    fn linear_and_normalize_gradients() {
        let mut rng = rng_from_seed(16);
        let lin = Linear::new_seeded(4, 3, &mut rng);
        let x = Array1::from_vec(vec![0.3, -0.2, 0.9, 0.4]);
        let w_out = Array1::from_vec(vec![0.5, -1.0, 0.25]);
        // scalar loss: w_out . normalize(lin(x))
        let f = |xv: &Array1<f64>| {
            let (y, _) = normalize_forward(&lin.forward(xv));
            y.dot(&w_out)
        };
        let (y, norm) = normalize_forward(&lin.forward(&x));
        let d_pre = normalize_backward(&y, norm, &w_out);
        let (dx, _) = lin.backward(&x, &d_pre, false);
        let h = 1e-6;
        for i in 0..4 {
            let mut xp = x.clone();
            xp[i] += h;
            let fp = f(&xp);
            xp[i] -= 2.0 * h;
            let fm = f(&xp);
            let fd = (fp - fm) / (2.0 * h);
            assert!((dx[i] - fd).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn lse_pool_gradient_matches_finite_differences() {
        let x = rand3((3, 4, 4), 20);
        let w_out = Array1::from_vec(vec![1.0, -0.5, 0.25]);
        let beta = 10.0;
        let mut f = |xv: &Array3<f64>| lse_pool_forward(xv, beta).dot(&w_out);
        let dx = lse_pool_backward(&x, beta, &w_out);
        let fd = fd_grad3(&mut f, &x, 1e-6);
        // exp-small softmax weights sit close to the FD noise floor
        assert_close3(&dx, &fd, 1e-3);
    }

    #[test]
    fn lse_pool_lies_between_mean_and_max() {
        let x = rand3((2, 6, 6), 21);
        let lse = lse_pool_forward(&x, 10.0);
        for ci in 0..2 {
            let plane = x.index_axis(ndarray::Axis(0), ci);
            let mean = plane.sum() / 36.0;
            let max = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(lse[ci] >= mean - 1e-12 && lse[ci] <= max + 1e-12);
        }
    }

    #[test]
    fn global_avgpool_gradient() {
        let x = rand3((3, 4, 4), 17);
        let w_out = Array1::from_vec(vec![1.0, -2.0, 0.5]);
        let mut f = |xv: &Array3<f64>| global_avgpool_forward(xv).dot(&w_out);
        let dx = global_avgpool_backward(&w_out, 4, 4);
        let fd = fd_grad3(&mut f, &x, 1e-6);
        assert_close3(&dx, &fd, 1e-6);
    }

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant() {
        let logits = [1.0, 2.0, 3.0];
        let p = softmax(&logits);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = logits.iter().map(|v| v + 100.0).collect();
        let q = softmax(&shifted);
        for (a, b) in p.iter().zip(q.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_reduces_a_quadratic() {
        let mut opt = Adam::new(0.05);
        let mut param = vec![1.0_f64, -2.0, 3.0];
        for _ in 0..200 {
            let grad: Vec<f64> = param.iter().map(|&p| 2.0 * p).collect();
            let mut pairs = vec![("p".to_string(), param.as_mut_slice(), grad)];
            opt.step(&mut pairs).unwrap();
        }
        assert!(param.iter().all(|p| p.abs() < 0.05), "{param:?}");
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = rand3((2, 3, 3), 18);
        let b = rand3((4, 3, 3), 19);
        let cat = concat_channels(&a, &b);
        let (a2, b2) = split_channels(&cat, 2);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }
}
