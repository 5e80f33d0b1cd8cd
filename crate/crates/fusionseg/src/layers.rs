//! Forward and backward passes for every layer the networks use: dilated
//! convolution, 2x2 max pooling, transposed convolution, batch
//! normalization, leaky ReLU, and channel softmax.
//!
//! Convolutions are cross-correlations (no kernel flip) and run through an
//! im2col/col2im pair plus GEMM. A transposed convolution with weights laid
//! out (C_in, K, F, F) is the exact adjoint of the matching strided
//! convolution, so its backward-by-input is literally the conv forward
//! routine: one kernel, two uses.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{conv_out_size, tconv_out_size, ConvGeometry, Tensor};

/// Valid output-column range so that `ox*s + f_off - p` lands in `[0, in_w)`.
#[inline]
fn out_range(p: usize, f_off: usize, s: usize, in_w: usize, out_w: usize) -> (usize, usize) {
    let lo = if p > f_off { (p - f_off).div_ceil(s) } else { 0 };
    if in_w + p <= f_off {
        return (0, 0);
    }
    let hi = ((in_w - 1 + p - f_off) / s + 1).min(out_w);
    (lo, hi.max(lo))
}

/// Unpack one image (c, h, w) into column matrix (c*f*f, ho*wo).
/// Row (ch, fy, fx), column (oy, ox) holds x[ch, oy*s + fy*d - p, ox*s + fx*d - p],
/// zero when out of bounds. `cols` must be zeroed by the caller.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T], c: usize, h: usize, w: usize,
    geom: &ConvGeometry, ho: usize, wo: usize,
    cols: &mut [T],
) {
    let (f, s, p, d) = (geom.filter, geom.stride, geom.padding, geom.dilation);
    let out_plane = ho * wo;
    for ch in 0..c {
        for fy in 0..f {
            let (oy_lo, oy_hi) = out_range(p, fy * d, s, h, ho);
            for fx in 0..f {
                let (ox_lo, ox_hi) = out_range(p, fx * d, s, w, wo);
                if ox_lo >= ox_hi {
                    continue;
                }
                let row = (ch * f + fy) * f + fx;
                let row_base = row * out_plane;
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + fy * d - p;
                    let src_base = (ch * h + iy) * w;
                    let dst_base = row_base + oy * wo;
                    if s == 1 {
                        let ix0 = ox_lo + fx * d - p;
                        let len = ox_hi - ox_lo;
                        cols[dst_base + ox_lo..dst_base + ox_hi]
                            .copy_from_slice(&x[src_base + ix0..src_base + ix0 + len]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            cols[dst_base + ox] = x[src_base + ox * s + fx * d - p];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate column matrix entries back onto the
/// image grid.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T], c: usize, h: usize, w: usize,
    geom: &ConvGeometry, ho: usize, wo: usize,
    x: &mut [T],
) {
    let (f, s, p, d) = (geom.filter, geom.stride, geom.padding, geom.dilation);
    let out_plane = ho * wo;
    for ch in 0..c {
        for fy in 0..f {
            let (oy_lo, oy_hi) = out_range(p, fy * d, s, h, ho);
            for fx in 0..f {
                let (ox_lo, ox_hi) = out_range(p, fx * d, s, w, wo);
                if ox_lo >= ox_hi {
                    continue;
                }
                let row = (ch * f + fy) * f + fx;
                let row_base = row * out_plane;
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + fy * d - p;
                    let src_base = row_base + oy * wo;
                    let dst_base = (ch * h + iy) * w;
                    for ox in ox_lo..ox_hi {
                        x[dst_base + ox * s + fx * d - p] += cols[src_base + ox];
                    }
                }
            }
        }
    }
}

/// Convolutional layer; weights (K, C, F, F). Layers feeding batch norm
/// carry no bias, the classifier head does.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub weights: Tensor<T>,
    /// Bias as a (1, K, 1, 1) tensor so the optimizer sees a uniform
    /// parameter type.
    pub bias: Option<Tensor<T>>,
    pub geom: ConvGeometry,
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub weights: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn out_channels(&self) -> usize {
        self.weights.batch()
    }
    pub fn in_channels(&self) -> usize {
        self.weights.channels()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        let (_, c, h, w) = x.shape();
        if c != self.in_channels() {
            return Err(Error::ShapeMismatch(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels()
            )));
        }
        Ok((conv_out_size(h, &self.geom)?, conv_out_size(w, &self.geom)?))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (ho, wo) = self.check_input(x)?;
        let (n, c, h, w) = x.shape();
        let k = self.out_channels();
        let f = self.geom.filter;
        let ckk = c * f * f;
        let out_plane = ho * wo;

        let mut out = Tensor::zeros(n, k, ho, wo);
        let mut cols = vec![T::zero(); ckk * out_plane];
        for i in 0..n {
            cols.fill(T::zero());
            im2col(x.item(i), c, h, w, &self.geom, ho, wo, &mut cols);
            T::gemm(k, ckk, out_plane, T::one(), self.weights.data(), &cols, T::zero(), out.item_mut(i));
        }
        if let Some(bias) = &self.bias {
            for i in 0..n {
                let item = out.item_mut(i);
                for (kk, &b) in bias.data().iter().enumerate() {
                    for v in &mut item[kk * out_plane..(kk + 1) * out_plane] {
                        *v += b;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Gradients w.r.t. input, weights, and bias, contracted with `grad_out`.
    pub fn backward(&self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, ConvGrads<T>)> {
        let (ho, wo) = self.check_input(x)?;
        let (n, c, h, w) = x.shape();
        let k = self.out_channels();
        if grad_out.shape() != (n, k, ho, wo) {
            return Err(Error::ShapeMismatch(format!(
                "conv grad_out {:?}, expected {:?}",
                grad_out.shape(),
                (n, k, ho, wo)
            )));
        }
        let f = self.geom.filter;
        let ckk = c * f * f;
        let out_plane = ho * wo;

        let mut grad_x = Tensor::zeros(n, c, h, w);
        let mut grad_w = Tensor::zeros(k, c, f, f);
        let mut grad_b = self.bias.as_ref().map(|_| Tensor::zeros(1, k, 1, 1));
        let mut cols = vec![T::zero(); ckk * out_plane];
        let mut dcols = vec![T::zero(); ckk * out_plane];

        for i in 0..n {
            let go = grad_out.item(i);
            // dW += go . cols^T
            cols.fill(T::zero());
            im2col(x.item(i), c, h, w, &self.geom, ho, wo, &mut cols);
            T::gemm_strided(
                k, out_plane, ckk,
                T::one(),
                go, out_plane as isize, 1,
                &cols, 1, out_plane as isize,
                T::one(),
                grad_w.data_mut(),
            );
            // dcols = W^T . go, then scatter back to the image grid.
            T::gemm_strided(
                ckk, k, out_plane,
                T::one(),
                self.weights.data(), 1, ckk as isize,
                go, out_plane as isize, 1,
                T::zero(),
                &mut dcols,
            );
            col2im(&dcols, c, h, w, &self.geom, ho, wo, grad_x.item_mut(i));
            if let Some(gb) = &mut grad_b {
                for kk in 0..k {
                    gb.data_mut()[kk] += go[kk * out_plane..(kk + 1) * out_plane].iter().copied().sum();
                }
            }
        }
        Ok((grad_x, ConvGrads { weights: grad_w, bias: grad_b }))
    }
}

/// Transposed convolution; weights (C_in, K, F, F), stride = upsampling
/// factor, `cropping` trims every border. Numerically equal to inserting
/// S-1 zeros between input elements, full-correlating with the kernel, and
/// cropping p. No bias (always followed by batch norm here).
#[derive(Debug, Clone, PartialEq)]
pub struct TConvLayer<T> {
    pub weights: Tensor<T>,
    pub geom: ConvGeometry,
}

impl<T: Scalar> TConvLayer<T> {
    pub fn in_channels(&self) -> usize {
        self.weights.batch()
    }
    pub fn out_channels(&self) -> usize {
        self.weights.channels()
    }

    /// Geometry of the matching strided convolution (padding = cropping).
    fn adjoint_geom(&self) -> ConvGeometry {
        ConvGeometry::conv(self.geom.filter, self.geom.stride, self.geom.cropping, 1)
    }

    fn out_shape(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        let (_, c, h, w) = x.shape();
        if c != self.in_channels() {
            return Err(Error::ShapeMismatch(format!(
                "tconv expects {} input channels, got {c}",
                self.in_channels()
            )));
        }
        Ok((tconv_out_size(h, &self.geom)?, tconv_out_size(w, &self.geom)?))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (ho, wo) = self.out_shape(x)?;
        let (n, c, h, w) = x.shape();
        let k = self.out_channels();
        let f = self.geom.filter;
        let kff = k * f * f;
        let in_plane = h * w;
        let geom = self.adjoint_geom();

        let mut out = Tensor::zeros(n, k, ho, wo);
        let mut cols = vec![T::zero(); kff * in_plane];
        for i in 0..n {
            // cols = W^T . x, then scatter onto the upsampled grid.
            T::gemm_strided(
                kff, c, in_plane,
                T::one(),
                self.weights.data(), 1, kff as isize,
                x.item(i), in_plane as isize, 1,
                T::zero(),
                &mut cols,
            );
            col2im(&cols, k, ho, wo, &geom, h, w, out.item_mut(i));
        }
        Ok(out)
    }

    /// Backward w.r.t. input is the matching strided convolution of
    /// `grad_out` with the same weights.
    pub fn backward(&self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (ho, wo) = self.out_shape(x)?;
        let (n, c, h, w) = x.shape();
        let k = self.out_channels();
        if grad_out.shape() != (n, k, ho, wo) {
            return Err(Error::ShapeMismatch(format!(
                "tconv grad_out {:?}, expected {:?}",
                grad_out.shape(),
                (n, k, ho, wo)
            )));
        }
        let f = self.geom.filter;
        let kff = k * f * f;
        let in_plane = h * w;
        let geom = self.adjoint_geom();

        let mut grad_x = Tensor::zeros(n, c, h, w);
        let mut grad_w = Tensor::zeros(c, k, f, f);
        let mut cols = vec![T::zero(); kff * in_plane];
        for i in 0..n {
            cols.fill(T::zero());
            im2col(grad_out.item(i), k, ho, wo, &geom, h, w, &mut cols);
            T::gemm(c, kff, in_plane, T::one(), self.weights.data(), &cols, T::zero(), grad_x.item_mut(i));
            // dW += x . cols^T
            T::gemm_strided(
                c, in_plane, kff,
                T::one(),
                x.item(i), in_plane as isize, 1,
                &cols, 1, in_plane as isize,
                T::one(),
                grad_w.data_mut(),
            );
        }
        Ok((grad_x, grad_w))
    }
}

/// 2x2 stride-2 max pooling. Ties break to the first (row-major) window
/// position so backward routing is deterministic.
pub fn maxpool_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddSpatialDim { h, w });
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(n, c, ho, wo);
    let mut argmax = vec![0usize; n * c * ho * wo];
    let data = x.data();
    let mut oi = 0;
    for i in 0..n {
        for ch in 0..c {
            let plane = x.index(i, ch, 0, 0);
            for oy in 0..ho {
                for ox in 0..wo {
                    let base = plane + (2 * oy) * w + 2 * ox;
                    let window = [base, base + 1, base + w, base + w + 1];
                    let mut best = window[0];
                    for &idx in &window[1..] {
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                    out.data_mut()[oi] = data[best];
                    argmax[oi] = best;
                    oi += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Routes each output gradient to its recorded argmax position only, so the
/// total gradient mass is conserved.
pub fn maxpool_backward<T: Scalar>(
    in_shape: (usize, usize, usize, usize),
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::MissingForwardState(format!(
            "maxpool argmax has {} entries, grad_out {}",
            argmax.len(),
            grad_out.len()
        )));
    }
    let (n, c, h, w) = in_shape;
    let mut grad_x = Tensor::zeros(n, c, h, w);
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        grad_x.data_mut()[idx] += g;
    }
    Ok(grad_x)
}

/// Per-channel batch normalization. Train mode normalizes by batch
/// statistics over (batch, height, width) and updates running stats with
/// `momentum_bn`; eval mode uses the running stats. Normalization uses the
/// biased variance, running stats store the unbiased one.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer<T> {
    /// Per-channel scale/shift and running statistics, each (1, C, 1, 1).
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: T,
    pub momentum_bn: T,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl<T: Scalar> BatchNormLayer<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormLayer {
            gamma: Tensor::filled(1, channels, 1, 1, T::one()),
            beta: Tensor::zeros(1, channels, 1, 1),
            running_mean: Tensor::zeros(1, channels, 1, 1),
            running_var: Tensor::filled(1, channels, 1, 1, T::one()),
            eps: T::from_f64(BN_EPS),
            momentum_bn: T::from_f64(BN_MOMENTUM),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.channels()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels() != self.channels() {
            return Err(Error::ShapeMismatch(format!(
                "batch norm expects {} channels, got {}",
                self.channels(),
                x.channels()
            )));
        }
        Ok(())
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, BnCache<T>)> {
        self.check_input(x)?;
        let (n, c, h, w) = x.shape();
        let m = n * h * w;
        if m < 2 {
            return Err(Error::DegenerateBatch(m));
        }
        let m_t = T::from_f64(m as f64);
        let mut out = Tensor::zeros(n, c, h, w);
        let mut xhat = Tensor::zeros(n, c, h, w);
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let mut sum = T::zero();
            for i in 0..n {
                sum += x.plane(i, ch).iter().copied().sum();
            }
            let mean = sum / m_t;
            let mut var = T::zero();
            for i in 0..n {
                for &v in x.plane(i, ch) {
                    let d = v - mean;
                    var += d * d;
                }
            }
            var = var / m_t;
            let istd = (var + self.eps).sqrt().recip();
            inv_std[ch] = istd;
            let (g, b) = (self.gamma.data()[ch], self.beta.data()[ch]);
            for i in 0..n {
                let base = x.index(i, ch, 0, 0);
                for j in base..base + h * w {
                    let xh = (x.data()[j] - mean) * istd;
                    xhat.data_mut()[j] = xh;
                    out.data_mut()[j] = g * xh + b;
                }
            }
            // Unbiased variance for the running estimate.
            let unbiased = var * m_t / T::from_f64((m - 1) as f64);
            let mom = self.momentum_bn;
            let rm = &mut self.running_mean.data_mut()[ch];
            *rm = (T::one() - mom) * *rm + mom * mean;
            let rv = &mut self.running_var.data_mut()[ch];
            *rv = (T::one() - mom) * *rv + mom * unbiased;
        }
        Ok((out, BnCache { xhat, inv_std }))
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let (n, c, h, w) = x.shape();
        let mut out = Tensor::zeros(n, c, h, w);
        for ch in 0..c {
            let istd = (self.running_var.data()[ch] + self.eps).sqrt().recip();
            let (g, b, mean) = (self.gamma.data()[ch], self.beta.data()[ch], self.running_mean.data()[ch]);
            for i in 0..n {
                let base = x.index(i, ch, 0, 0);
                for j in base..base + h * w {
                    out.data_mut()[j] = g * (x.data()[j] - mean) * istd + b;
                }
            }
        }
        Ok(out)
    }

    /// Backward through the train-mode normalization (batch statistics are
    /// functions of the input, so their gradient paths are included).
    pub fn backward(&self, cache: &BnCache<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let (n, c, h, w) = grad_out.shape();
        if cache.xhat.shape() != grad_out.shape() {
            return Err(Error::MissingForwardState(format!(
                "batch norm cache {:?} does not match grad_out {:?}",
                cache.xhat.shape(),
                grad_out.shape()
            )));
        }
        let m = n * h * w;
        let m_t = T::from_f64(m as f64);
        let mut grad_x = Tensor::zeros(n, c, h, w);
        let mut grad_gamma = Tensor::zeros(1, c, 1, 1);
        let mut grad_beta = Tensor::zeros(1, c, 1, 1);
        for ch in 0..c {
            let mut dg = T::zero();
            let mut db = T::zero();
            for i in 0..n {
                let base = grad_out.index(i, ch, 0, 0);
                for j in base..base + h * w {
                    let g = grad_out.data()[j];
                    dg += g * cache.xhat.data()[j];
                    db += g;
                }
            }
            grad_gamma.data_mut()[ch] = dg;
            grad_beta.data_mut()[ch] = db;
            let scale = self.gamma.data()[ch] * cache.inv_std[ch] / m_t;
            for i in 0..n {
                let base = grad_out.index(i, ch, 0, 0);
                for j in base..base + h * w {
                    let g = grad_out.data()[j];
                    grad_x.data_mut()[j] = scale * (m_t * g - db - cache.xhat.data()[j] * dg);
                }
            }
        }
        Ok((grad_x, grad_gamma, grad_beta))
    }
}

/// Train-mode forward state needed by the batch norm backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// y = x for x >= 0, slope*x otherwise. slope = 0 is plain ReLU.
pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v >= T::zero() { v } else { slope * v })
}

pub fn leaky_relu_backward<T: Scalar>(x: &Tensor<T>, slope: T, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != grad_out.shape() {
        return Err(Error::ShapeMismatch("leaky_relu backward shape".into()));
    }
    let mut grad_x = grad_out.clone();
    for (g, &v) in grad_x.data_mut().iter_mut().zip(x.data()) {
        if v < T::zero() {
            *g *= slope;
        }
    }
    Ok(grad_x)
}

/// Per-pixel softmax over the channel axis, computed with max subtraction
/// for stability. Channel sums are 1.
pub fn softmax_channels<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.shape();
    debug_assert!(c >= 2);
    let plane = h * w;
    let mut out = Tensor::zeros(n, c, h, w);
    for i in 0..n {
        let base = x.index(i, 0, 0, 0);
        for px in 0..plane {
            let mut max = x.data()[base + px];
            for ch in 1..c {
                max = max.max(x.data()[base + ch * plane + px]);
            }
            let mut sum = T::zero();
            for ch in 0..c {
                let e = (x.data()[base + ch * plane + px] - max).exp();
                out.data_mut()[base + ch * plane + px] = e;
                sum += e;
            }
            for ch in 0..c {
                out.data_mut()[base + ch * plane + px] /= sum;
            }
        }
    }
    out
}

/// Jacobian-vector product of [`softmax_channels`]:
/// dx_m = y_m * (g_m - sum_j g_j y_j) per pixel.
pub fn softmax_channels_backward<T: Scalar>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if y.shape() != grad_out.shape() {
        return Err(Error::ShapeMismatch("softmax backward shape".into()));
    }
    let (n, c, h, w) = y.shape();
    let plane = h * w;
    let mut grad_x = Tensor::zeros(n, c, h, w);
    for i in 0..n {
        let base = y.index(i, 0, 0, 0);
        for px in 0..plane {
            let mut dot = T::zero();
            for ch in 0..c {
                let j = base + ch * plane + px;
                dot += grad_out.data()[j] * y.data()[j];
            }
            for ch in 0..c {
                let j = base + ch * plane + px;
                grad_x.data_mut()[j] = y.data()[j] * (grad_out.data()[j] - dot);
            }
        }
    }
    Ok(grad_x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn random_tensor(rng: &mut CounterRng, n: usize, c: usize, h: usize, w: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros(n, c, h, w);
        for v in t.data_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
        t
    }

    fn random_conv(rng: &mut CounterRng, k: usize, c: usize, geom: ConvGeometry, bias: bool) -> ConvLayer<f64> {
        let mut weights = Tensor::zeros(k, c, geom.filter, geom.filter);
        for v in weights.data_mut() {
            *v = rng.uniform(-0.5, 0.5);
        }
        let bias = bias.then(|| {
            Tensor::from_vec(1, k, 1, 1, (0..k).map(|_| rng.uniform(-0.5, 0.5)).collect()).unwrap()
        });
        ConvLayer { weights, bias, geom }
    }

    #[test]
    fn identity_1x1_conv() {
        let c = 3;
        let mut weights = Tensor::zeros(c, c, 1, 1);
        for i in 0..c {
            weights.set(i, i, 0, 0, 1.0f64);
        }
        let layer = ConvLayer { weights, bias: Some(Tensor::zeros(1, c, 1, 1)), geom: ConvGeometry::conv(1, 1, 0, 1) };
        let mut rng = CounterRng::new(1);
        let x = random_tensor(&mut rng, 2, c, 5, 5);
        let y = layer.forward(&x).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn ones_kernel_counts_receptive_field() {
        let layer = ConvLayer {
            weights: Tensor::filled(1, 1, 3, 3, 1.0f64),
            bias: None,
            geom: ConvGeometry::conv(3, 1, 1, 1),
        };
        let c = 2.5;
        let x = Tensor::filled(1, 1, 6, 6, c);
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.at(0, 0, 3, 3), 9.0 * c);
        assert_eq!(y.at(0, 0, 0, 0), 4.0 * c);
        assert_eq!(y.at(0, 0, 0, 3), 6.0 * c);
    }

    #[test]
    fn dilated_conv_preserves_size() {
        // The Conv5-2-64 geometry: F'=9, P=4 keeps 50x50.
        let mut rng = CounterRng::new(2);
        let layer = random_conv(&mut rng, 64, 64, ConvGeometry::conv(5, 1, 4, 2), false);
        let x = random_tensor(&mut rng, 1, 64, 50, 50);
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.shape(), (1, 64, 50, 50));
    }

    #[test]
    fn conv_bias_gradient_counts_output_pixels() {
        let mut rng = CounterRng::new(3);
        let layer = random_conv(&mut rng, 2, 3, ConvGeometry::conv(3, 1, 1, 1), true);
        let x = random_tensor(&mut rng, 1, 3, 5, 5);
        let y = layer.forward(&x).unwrap();
        let ones = Tensor::filled(1, 2, y.height(), y.width(), 1.0);
        let (_, grads) = layer.backward(&x, &ones).unwrap();
        for &g in grads.bias.unwrap().data() {
            assert!((g - 25.0).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_examples() {
        let x = Tensor::from_vec(1, 1, 2, 2, vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool_forward(&x).unwrap();
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
        assert_eq!(arg, vec![3]);

        let c = Tensor::filled(2, 3, 8, 8, 7.25f64);
        let (y, _) = maxpool_forward(&c).unwrap();
        assert_eq!(y.shape(), (2, 3, 4, 4));
        assert!(y.data().iter().all(|&v| v == 7.25));

        let odd = Tensor::<f64>::zeros(1, 1, 3, 4);
        assert!(matches!(maxpool_forward(&odd), Err(Error::OddSpatialDim { .. })));
    }

    #[test]
    fn maxpool_halves_vnir_arm_shape() {
        let x = Tensor::<f32>::zeros(1, 8, 200, 200);
        let (y, _) = maxpool_forward(&x).unwrap();
        assert_eq!(y.shape(), (1, 8, 100, 100));
    }

    #[test]
    fn maxpool_backward_conserves_mass_and_routes_to_argmax() {
        let mut rng = CounterRng::new(4);
        let x = random_tensor(&mut rng, 2, 3, 6, 6);
        let (y, arg) = maxpool_forward(&x).unwrap();
        let go = random_tensor(&mut rng, 2, 3, 3, 3);
        let gx = maxpool_backward(x.shape(), &arg, &go).unwrap();
        let mass_in: f64 = gx.data().iter().sum();
        let mass_out: f64 = go.data().iter().sum();
        assert!((mass_in - mass_out).abs() < 1e-12);
        // Gradient lands only where the max was.
        let nonzero = gx.data().iter().filter(|&&v| v != 0.0).count();
        assert!(nonzero <= y.len());
    }

    /// Brute-force transposed convolution: insert S-1 zeros between input
    /// elements, full-correlate with the kernel, crop p on every border.
    fn tconv_bruteforce(layer: &TConvLayer<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let (n, c, h, w) = x.shape();
        let k = layer.out_channels();
        let (f, s, p) = (layer.geom.filter, layer.geom.stride, layer.geom.cropping);
        let (uh, uw) = (s * (h - 1) + 1, s * (w - 1) + 1);
        let (gh, gw) = (uh + f - 1, uw + f - 1); // full correlation size
        let (oh, ow) = (gh - 2 * p, gw - 2 * p);
        let mut out = Tensor::zeros(n, k, oh, ow);
        for i in 0..n {
            for kk in 0..k {
                for oy in 0..oh {
                    for ox in 0..ow {
                        // position in the un-cropped full grid
                        let (fy0, fx0) = (oy + p, ox + p);
                        let mut acc = 0.0;
                        for ch in 0..c {
                            for fy in 0..f {
                                for fx in 0..f {
                                    // upsampled grid coordinate hit by this tap
                                    let uy = fy0 as isize - (f as isize - 1) + fy as isize;
                                    let ux = fx0 as isize - (f as isize - 1) + fx as isize;
                                    if uy < 0 || ux < 0 || uy >= uh as isize || ux >= uw as isize {
                                        continue;
                                    }
                                    let (uy, ux) = (uy as usize, ux as usize);
                                    if uy % s != 0 || ux % s != 0 {
                                        continue;
                                    }
                                    // full correlation flips nothing relative to
                                    // the stamped-kernel construction
                                    acc += layer.weights.at(ch, kk, f - 1 - fy, f - 1 - fx)
                                        * x.at(i, ch, uy / s, ux / s);
                                }
                            }
                        }
                        out.set(i, kk, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn tconv_identity_geometry_scales() {
        let w = 0.75f64;
        let layer = TConvLayer { weights: Tensor::filled(1, 1, 1, 1, w), geom: ConvGeometry::tconv(1, 1, 0) };
        let mut rng = CounterRng::new(5);
        let x = random_tensor(&mut rng, 1, 1, 4, 4);
        let y = layer.forward(&x).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - w * b).abs() < 1e-12);
        }
    }

    #[test]
    fn tconv_single_pixel_stamps_kernel_copy() {
        let mut rng = CounterRng::new(6);
        let mut weights = Tensor::zeros(1, 1, 4, 4);
        for v in weights.data_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
        let layer = TConvLayer { weights: weights.clone(), geom: ConvGeometry::tconv(4, 2, 1) };
        let v = 2.5f64;
        let mut x = Tensor::zeros(1, 1, 1, 1);
        x.set(0, 0, 0, 0, v);
        // M=1: output is S(M-1)+F-2p = 2x2, the kernel's center cropped by 1.
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.shape(), (1, 1, 2, 2));
        for oy in 0..2 {
            for ox in 0..2 {
                assert!((y.at(0, 0, oy, ox) - v * weights.at(0, 0, oy + 1, ox + 1)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tconv_matches_bruteforce_zero_insertion() {
        let mut rng = CounterRng::new(7);
        for (h, w) in [(1, 1), (2, 3), (4, 4), (5, 6), (6, 6)] {
            for (f, s, p) in [(4, 2, 1), (3, 1, 0), (2, 2, 0), (3, 2, 1)] {
                let mut weights = Tensor::zeros(2, 3, f, f);
                for v in weights.data_mut() {
                    *v = rng.uniform(-1.0, 1.0);
                }
                let layer = TConvLayer { weights, geom: ConvGeometry::tconv(f, s, p) };
                let x = random_tensor(&mut rng, 1, 2, h, w);
                let fast = layer.forward(&x).unwrap();
                let brute = tconv_bruteforce(&layer, &x);
                assert_eq!(fast.shape(), brute.shape(), "f={f} s={s} p={p} h={h} w={w}");
                for (a, b) in fast.data().iter().zip(brute.data()) {
                    assert!((a - b).abs() < 1e-10, "f={f} s={s} p={p}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn tconv_table1_doubles_resolution() {
        let mut rng = CounterRng::new(8);
        let mut weights = Tensor::zeros(4, 4, 4, 4);
        for v in weights.data_mut() {
            *v = rng.uniform(-0.3, 0.3);
        }
        let layer = TConvLayer { weights, geom: ConvGeometry::tconv(4, 2, 1) };
        let x = random_tensor(&mut rng, 1, 4, 50, 50);
        assert_eq!(layer.forward(&x).unwrap().shape(), (1, 4, 100, 100));
    }

    #[test]
    fn batchnorm_affine_contract() {
        let mut rng = CounterRng::new(9);
        // Standardized input: gamma=2, beta=3 must give 2x+3.
        let mut x = Tensor::<f64>::zeros(4, 2, 3, 3);
        for v in x.data_mut() {
            *v = rng.normal();
        }
        // standardize per channel exactly
        let (n, c, h, w) = x.shape();
        let m = (n * h * w) as f64;
        for ch in 0..c {
            let mut sum = 0.0;
            for i in 0..n {
                sum += x.plane(i, ch).iter().sum::<f64>();
            }
            let mean = sum / m;
            let mut var = 0.0;
            for i in 0..n {
                for &v in x.plane(i, ch) {
                    var += (v - mean) * (v - mean);
                }
            }
            let std = (var / m).sqrt();
            for i in 0..n {
                let base = x.index(i, ch, 0, 0);
                for j in base..base + h * w {
                    x.data_mut()[j] = (x.data()[j] - mean) / std;
                }
            }
        }
        let mut bn = BatchNormLayer::new(c);
        bn.gamma = Tensor::filled(1, c, 1, 1, 2.0);
        bn.beta = Tensor::filled(1, c, 1, 1, 3.0);
        let (y, _) = bn.forward_train(&x).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - (2.0 * b + 3.0)).abs() < 1e-4);
        }
    }

    #[test]
    fn batchnorm_constant_input_gives_beta() {
        let mut bn = BatchNormLayer::new(1);
        bn.beta = Tensor::filled(1, 1, 1, 1, 0.7f64);
        let x = Tensor::filled(2, 1, 4, 4, 5.0);
        let (y, _) = bn.forward_train(&x).unwrap();
        for &v in y.data() {
            assert!((v - 0.7).abs() < 1e-6);
        }
    }

    #[test]
    fn batchnorm_identity_on_standardized_input() {
        let mut rng = CounterRng::new(10);
        let mut x = Tensor::<f64>::zeros(8, 1, 4, 4);
        for v in x.data_mut() {
            *v = rng.normal();
        }
        let mean = x.data().iter().sum::<f64>() / x.len() as f64;
        let var = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.len() as f64;
        let std = var.sqrt();
        for v in x.data_mut() {
            *v = (*v - mean) / std;
        }
        let mut bn = BatchNormLayer::new(1);
        let (y, _) = bn.forward_train(&x).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn batchnorm_rejects_single_sample() {
        let mut bn = BatchNormLayer::<f64>::new(1);
        let x = Tensor::zeros(1, 1, 1, 1);
        assert!(matches!(bn.forward_train(&x), Err(Error::DegenerateBatch(1))));
    }

    #[test]
    fn leaky_relu_branches() {
        let x = Tensor::from_vec(1, 1, 1, 3, vec![2.0f64, -3.0, 0.0]).unwrap();
        let y = leaky_relu(&x, 0.1);
        assert_eq!(y.at(0, 0, 0, 0), 2.0);
        assert!((y.at(0, 0, 0, 1) - (-0.3)).abs() < 1e-15);
        assert_eq!(y.at(0, 0, 0, 2), 0.0);
        // slope 0 is plain ReLU
        let y0 = leaky_relu(&x, 0.0);
        assert_eq!(y0.data(), &[2.0, 0.0, 0.0]);
        // derivative at x=-1 is the slope
        let xg = Tensor::from_vec(1, 1, 1, 1, vec![-1.0f64]).unwrap();
        let go = Tensor::filled(1, 1, 1, 1, 1.0);
        let gx = leaky_relu_backward(&xg, 0.1, &go).unwrap();
        assert!((gx.at(0, 0, 0, 0) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor::<f64>::zeros(1, 4, 1, 1);
        let y = softmax_channels(&x);
        for ch in 0..4 {
            assert!((y.at(0, ch, 0, 0) - 0.25).abs() < 1e-12);
        }

        // shift invariance
        let mut rng = CounterRng::new(11);
        let a = random_tensor(&mut rng, 1, 4, 2, 2);
        let b = a.map(|v| v + 17.5);
        let (ya, yb) = (softmax_channels(&a), softmax_channels(&b));
        for (u, v) in ya.data().iter().zip(yb.data()) {
            assert!((u - v).abs() < 1e-12);
        }

        // stability on huge logits
        let mut big = Tensor::<f64>::zeros(1, 4, 1, 1);
        big.set(0, 0, 0, 0, 1000.0);
        let yb = softmax_channels(&big);
        assert!(yb.check_finite("softmax").is_ok());
        assert!((yb.at(0, 0, 0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_outputs_probability_vectors() {
        let mut rng = CounterRng::new(12);
        let x = random_tensor(&mut rng, 2, 4, 3, 3);
        let y = softmax_channels(&x);
        for i in 0..2 {
            for py in 0..3 {
                for px in 0..3 {
                    let sum: f64 = (0..4).map(|ch| y.at(i, ch, py, px)).sum();
                    assert!((sum - 1.0).abs() < 1e-6);
                    for ch in 0..4 {
                        assert!(y.at(i, ch, py, px) >= 0.0);
                    }
                }
            }
        }
    }

    // ---- finite-difference gradient checks -----------------------------

    const FD_STEP: f64 = 1e-5;
    const FD_TOL: f64 = 1e-5;

    fn assert_close(analytic: f64, numeric: f64, what: &str) {
        let scale = analytic.abs().max(numeric.abs()).max(1.0);
        assert!(
            (analytic - numeric).abs() <= FD_TOL * scale,
            "{what}: analytic {analytic} vs numeric {numeric}"
        );
    }

    /// Central-difference derivative of `f` w.r.t. entry `i` of `data`.
    fn central_diff(data: &mut [f64], i: usize, f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
        let orig = data[i];
        data[i] = orig + FD_STEP;
        let hi = f(data);
        data[i] = orig - FD_STEP;
        let lo = f(data);
        data[i] = orig;
        (hi - lo) / (2.0 * FD_STEP)
    }

    fn projection(rng: &mut CounterRng, like: &Tensor<f64>) -> Tensor<f64> {
        let (n, c, h, w) = like.shape();
        let mut r = Tensor::zeros(n, c, h, w);
        for v in r.data_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
        r
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = CounterRng::new(100 + seed);
            let layer = random_conv(&mut rng, 2, 3, ConvGeometry::conv(3, 1, 1, 2), true);
            let x = random_tensor(&mut rng, 2, 3, 4, 4);
            let y = layer.forward(&x).unwrap();
            let proj = projection(&mut rng, &y);
            let (gx, grads) = layer.backward(&x, &proj).unwrap();

            // input gradient
            for i in (0..x.len()).step_by(7) {
                let mut xd = x.data().to_vec();
                let num = central_diff(&mut xd, i, &mut |d| {
                    let xt = Tensor::from_vec(2, 3, 4, 4, d.to_vec()).unwrap();
                    dot(&layer.forward(&xt).unwrap(), &proj)
                });
                assert_close(gx.data()[i], num, &format!("conv dx[{i}] seed {seed}"));
            }

            // weight gradient
            let wshape = layer.weights.shape();
            for i in (0..layer.weights.len()).step_by(5) {
                let mut wd = layer.weights.data().to_vec();
                let num = central_diff(&mut wd, i, &mut |d| {
                    let mut l = layer.clone();
                    l.weights = Tensor::from_vec(wshape.0, wshape.1, wshape.2, wshape.3, d.to_vec()).unwrap();
                    dot(&l.forward(&x).unwrap(), &proj)
                });
                assert_close(grads.weights.data()[i], num, &format!("conv dw[{i}] seed {seed}"));
            }

            // bias gradient
            let k = layer.out_channels();
            let mut bd = layer.bias.as_ref().unwrap().data().to_vec();
            for i in 0..bd.len() {
                let num = central_diff(&mut bd, i, &mut |d| {
                    let mut l = layer.clone();
                    l.bias = Some(Tensor::from_vec(1, k, 1, 1, d.to_vec()).unwrap());
                    dot(&l.forward(&x).unwrap(), &proj)
                });
                assert_close(grads.bias.as_ref().unwrap().data()[i], num, &format!("conv db[{i}] seed {seed}"));
            }
        }
    }

    #[test]
    fn tconv_gradients_match_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = CounterRng::new(200 + seed);
            let mut weights = Tensor::zeros(3, 2, 4, 4);
            for v in weights.data_mut() {
                *v = rng.uniform(-0.5, 0.5);
            }
            let layer = TConvLayer { weights, geom: ConvGeometry::tconv(4, 2, 1) };
            let x = random_tensor(&mut rng, 2, 3, 3, 3);
            let y = layer.forward(&x).unwrap();
            let proj = projection(&mut rng, &y);
            let (gx, gw) = layer.backward(&x, &proj).unwrap();

            for i in (0..x.len()).step_by(5) {
                let mut xd = x.data().to_vec();
                let num = central_diff(&mut xd, i, &mut |d| {
                    let xt = Tensor::from_vec(2, 3, 3, 3, d.to_vec()).unwrap();
                    dot(&layer.forward(&xt).unwrap(), &proj)
                });
                assert_close(gx.data()[i], num, &format!("tconv dx[{i}] seed {seed}"));
            }
            for i in (0..layer.weights.len()).step_by(7) {
                let mut wd = layer.weights.data().to_vec();
                let num = central_diff(&mut wd, i, &mut |d| {
                    let mut l = layer.clone();
                    l.weights = Tensor::from_vec(3, 2, 4, 4, d.to_vec()).unwrap();
                    dot(&l.forward(&x).unwrap(), &proj)
                });
                assert_close(gw.data()[i], num, &format!("tconv dw[{i}] seed {seed}"));
            }
        }
    }

    #[test]
    fn maxpool_gradient_matches_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = CounterRng::new(300 + seed);
            let x = random_tensor(&mut rng, 1, 2, 4, 4);
            let (y, arg) = maxpool_forward(&x).unwrap();
            let proj = projection(&mut rng, &y);
            let gx = maxpool_backward(x.shape(), &arg, &proj).unwrap();
            for i in 0..x.len() {
                let mut xd = x.data().to_vec();
                let num = central_diff(&mut xd, i, &mut |d| {
                    let xt = Tensor::from_vec(1, 2, 4, 4, d.to_vec()).unwrap();
                    let (yt, _) = maxpool_forward(&xt).unwrap();
                    dot(&yt, &proj)
                });
                assert_close(gx.data()[i], num, &format!("maxpool dx[{i}] seed {seed}"));
            }
        }
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = CounterRng::new(400 + seed);
            let x = random_tensor(&mut rng, 2, 2, 3, 3);
            let mut bn = BatchNormLayer::<f64>::new(2);
            bn.gamma = Tensor::from_vec(1, 2, 1, 1, vec![rng.uniform(0.5, 1.5), rng.uniform(0.5, 1.5)]).unwrap();
            bn.beta = Tensor::from_vec(1, 2, 1, 1, vec![rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)]).unwrap();
            let (y, cache) = bn.clone().forward_train(&x).unwrap();
            let proj = projection(&mut rng, &y);
            let (gx, gg, gb) = bn.backward(&cache, &proj).unwrap();

            for i in (0..x.len()).step_by(3) {
                let mut xd = x.data().to_vec();
                let num = central_diff(&mut xd, i, &mut |d| {
                    let xt = Tensor::from_vec(2, 2, 3, 3, d.to_vec()).unwrap();
                    let (yt, _) = bn.clone().forward_train(&xt).unwrap();
                    dot(&yt, &proj)
                });
                assert_close(gx.data()[i], num, &format!("bn dx[{i}] seed {seed}"));
            }
            for ch in 0..2 {
                let mut gd = bn.gamma.data().to_vec();
                let num = central_diff(&mut gd, ch, &mut |d| {
                    let mut b = bn.clone();
                    b.gamma = Tensor::from_vec(1, 2, 1, 1, d.to_vec()).unwrap();
                    let (yt, _) = b.forward_train(&x).unwrap();
                    dot(&yt, &proj)
                });
                assert_close(gg.data()[ch], num, &format!("bn dgamma[{ch}] seed {seed}"));

                let mut bd = bn.beta.data().to_vec();
                let num = central_diff(&mut bd, ch, &mut |d| {
                    let mut b = bn.clone();
                    b.beta = Tensor::from_vec(1, 2, 1, 1, d.to_vec()).unwrap();
                    let (yt, _) = b.forward_train(&x).unwrap();
                    dot(&yt, &proj)
                });
                assert_close(gb.data()[ch], num, &format!("bn dbeta[{ch}] seed {seed}"));
            }
        }
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = CounterRng::new(500 + seed);
            let x = random_tensor(&mut rng, 1, 4, 3, 3);

            let y = leaky_relu(&x, 0.1);
            let proj = projection(&mut rng, &y);
            let gx = leaky_relu_backward(&x, 0.1, &proj).unwrap();
            for i in 0..x.len() {
                if x.data()[i].abs() < 10.0 * FD_STEP {
                    continue; // kink at zero
                }
                let mut xd = x.data().to_vec();
                let num = central_diff(&mut xd, i, &mut |d| {
                    let xt = Tensor::from_vec(1, 4, 3, 3, d.to_vec()).unwrap();
                    dot(&leaky_relu(&xt, 0.1), &proj)
                });
                assert_close(gx.data()[i], num, &format!("lrelu dx[{i}] seed {seed}"));
            }

            let sy = softmax_channels(&x);
            let sproj = projection(&mut rng, &sy);
            let sgx = softmax_channels_backward(&sy, &sproj).unwrap();
            for i in 0..x.len() {
                let mut xd = x.data().to_vec();
                let num = central_diff(&mut xd, i, &mut |d| {
                    let xt = Tensor::from_vec(1, 4, 3, 3, d.to_vec()).unwrap();
                    dot(&softmax_channels(&xt), &sproj)
                });
                assert_close(sgx.data()[i], num, &format!("softmax dx[{i}] seed {seed}"));
            }
        }
    }
}
