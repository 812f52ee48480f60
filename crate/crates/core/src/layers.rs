//! Anti-aliasing layers.
//!
//! * Depth-adaptive Gaussian blur (`dab_blur`) with a learnable standard
//!   deviation per depth level, fused with subsampling into `dab_pool`.
//! * The monotone-sigma projection that keeps deeper levels blurring harder.
//! * AA-ReLU: identity up to a learnable `alpha`, a sinusoidal-logarithmic
//!   roll-off on `[alpha, alpha*e^(pi/2)]`, and a plateau at `2*alpha`.
//! * Baselines: clipped ReLU and fixed binomial blur pooling.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{pad_plane, unpad_accumulate, PadMode, Tape, TapeOp, Tensor, Var};

/// Smallest admissible blur standard deviation.
pub const SIGMA_MIN: f64 = 0.1;
/// Strict gap enforced between consecutive depth levels' sigmas.
pub const SIGMA_GAP: f64 = 0.01;
/// Smallest admissible AA-ReLU roll-off point.
pub const ALPHA_MIN: f64 = 0.5;

/// Learnable blur parameters of one depth level.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBlurParam {
    pub sigma: f64,
    pub depth_level: usize,
    pub kernel_size: usize,
}

impl GaussianBlurParam {
    pub fn new(sigma: f64, depth_level: usize, kernel_size: usize) -> Result<Self> {
        if sigma < SIGMA_MIN {
            return Err(Error::invalid(format!("sigma {sigma} below minimum {SIGMA_MIN}")));
        }
        if !matches!(kernel_size, 3 | 5 | 7) {
            return Err(Error::invalid(format!(
                "blur kernel size must be 3, 5 or 7, got {kernel_size}"
            )));
        }
        if depth_level == 0 {
            return Err(Error::invalid("depth level starts at 1".to_string()));
        }
        Ok(GaussianBlurParam {
            sigma,
            depth_level,
            kernel_size,
        })
    }

    /// The paper's initialization: sigma of depth level D is D/2.
    pub fn init_for_depth(depth_level: usize, kernel_size: usize) -> Result<Self> {
        Self::new(depth_level as f64 / 2.0, depth_level, kernel_size)
    }
}

/// Normalized `m x m` Gaussian blur weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    m: usize,
    weights: Vec<f64>,
}

impl GaussianKernel {
    pub fn size(&self) -> usize {
        self.m
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weight at centered offset `(p, q)`, each in `-m/2 ..= m/2`.
    pub fn at(&self, p: isize, q: isize) -> f64 {
        let half = (self.m / 2) as isize;
        debug_assert!(p.abs() <= half && q.abs() <= half);
        self.weights[((p + half) as usize) * self.m + (q + half) as usize]
    }
}

/// Normalized Gaussian over centered integer offsets:
/// `w(p, q) = exp(-(p^2+q^2) / (2 sigma^2)) / sum`.
pub fn gaussian_kernel(sigma: f64, m: usize) -> Result<GaussianKernel> {
    if sigma <= 0.0 {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    if m == 0 || m % 2 == 0 {
        return Err(Error::invalid(format!("kernel size must be odd, got {m}")));
    }
    let half = (m / 2) as isize;
    let mut weights = vec![0.0; m * m];
    let mut sum = 0.0;
    for p in -half..=half {
        for q in -half..=half {
            let r2 = (p * p + q * q) as f64;
            let h = (-r2 / (2.0 * sigma * sigma)).exp();
            weights[((p + half) as usize) * m + (q + half) as usize] = h;
            sum += h;
        }
    }
    for w in weights.iter_mut() {
        *w /= sum;
    }
    Ok(GaussianKernel { m, weights })
}

/// Entrywise derivative of the normalized kernel w.r.t. sigma.
///
/// With `H(p,q) = exp(-(p^2+q^2)/(2 sigma^2))`, `S = sum H` and `G = H/S`:
/// `dH/dsigma = H * (p^2+q^2) / sigma^3` and by the quotient rule
/// `dG/dsigma = (dH - G * dS) / S`.
pub fn gaussian_kernel_dsigma(sigma: f64, m: usize) -> Result<Vec<f64>> {
    if sigma <= 0.0 {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    if m == 0 || m % 2 == 0 {
        return Err(Error::invalid(format!("kernel size must be odd, got {m}")));
    }
    let half = (m / 2) as isize;
    let mut h = vec![0.0; m * m];
    let mut dh = vec![0.0; m * m];
    let (mut s, mut ds) = (0.0, 0.0);
    for p in -half..=half {
        for q in -half..=half {
            let r2 = (p * p + q * q) as f64;
            let idx = ((p + half) as usize) * m + (q + half) as usize;
            let hv = (-r2 / (2.0 * sigma * sigma)).exp();
            let dhv = hv * r2 / (sigma * sigma * sigma);
            h[idx] = hv;
            dh[idx] = dhv;
            s += hv;
            ds += dhv;
        }
    }
    let mut out = vec![0.0; m * m];
    for i in 0..m * m {
        let g = h[i] / s;
        out[i] = (dh[i] - g * ds) / s;
    }
    Ok(out)
}

/// Clamp-then-sweep projection enforcing `sigma_1 < sigma_2 < ... < sigma_M`
/// with at least [`SIGMA_GAP`] between neighbours and every value at least
/// [`SIGMA_MIN`]. Idempotent.
pub fn project_monotone(sigmas: &[f64]) -> Result<Vec<f64>> {
    if sigmas.is_empty() {
        return Err(Error::invalid("project_monotone: empty sigma list".to_string()));
    }
    let mut out = Vec::with_capacity(sigmas.len());
    let mut prev: Option<f64> = None;
    for &s in sigmas {
        let mut v = s.max(SIGMA_MIN);
        if let Some(p) = prev {
            v = v.max(p + SIGMA_GAP);
        }
        out.push(v);
        prev = Some(v);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// AA-ReLU and C-ReLU scalar forms
// ---------------------------------------------------------------------------

/// Upper joint of the roll-off branch.
pub fn aa_relu_plateau_start(alpha: f64) -> f64 {
    alpha * (PI / 2.0).exp()
}

/// AA-ReLU: 0 on (-inf,0], x on (0,alpha),
/// `alpha*sin(ln(x/alpha)) + alpha` on [alpha, alpha*e^(pi/2)],
/// `2*alpha` beyond.
pub fn aa_relu_scalar(x: f64, alpha: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x < alpha {
        x
    } else if x <= aa_relu_plateau_start(alpha) {
        alpha * (x / alpha).ln().sin() + alpha
    } else {
        2.0 * alpha
    }
}

/// dF/dx: 0; 1; `(alpha/x) cos(ln(x/alpha))`; 0 — branch for branch with
/// the forward map. Continuous at both joints (cos 0 = 1, cos pi/2 = 0).
pub fn aa_relu_grad_x_scalar(x: f64, alpha: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x < alpha {
        1.0
    } else if x <= aa_relu_plateau_start(alpha) {
        (alpha / x) * (x / alpha).ln().cos()
    } else {
        0.0
    }
}

/// dF/dalpha, differentiating each branch with the branch structure held
/// fixed: 0 below alpha, `sin(t) - cos(t) + 1` with `t = ln(x/alpha)` on the
/// roll-off, 2 on the plateau.
pub fn aa_relu_grad_alpha_scalar(x: f64, alpha: f64) -> f64 {
    if x < alpha {
        0.0
    } else if x <= aa_relu_plateau_start(alpha) {
        let t = (x / alpha).ln();
        t.sin() - t.cos() + 1.0
    } else {
        2.0
    }
}

/// Clipped ReLU: `min(max(x, 0), cap)`.
pub fn c_relu_scalar(x: f64, cap: f64) -> f64 {
    x.clamp(0.0, cap)
}

/// Subgradient of C-ReLU: 1 strictly inside (0, cap), 0 elsewhere.
pub fn c_relu_grad_scalar(x: f64, cap: f64) -> f64 {
    if x > 0.0 && x < cap {
        1.0
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// Fixed binomial blur kernels (MBP-style baseline)
// ---------------------------------------------------------------------------

/// Non-learnable blur kernels built from binomial rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlurKernel {
    /// `[1,2,1]/4` outer product.
    Bin3,
    /// `[1,4,6,4,1]/16` outer product.
    Bin5,
}

impl BlurKernel {
    pub fn size(&self) -> usize {
        match self {
            BlurKernel::Bin3 => 3,
            BlurKernel::Bin5 => 5,
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        let row: &[f64] = match self {
            BlurKernel::Bin3 => &[0.25, 0.5, 0.25],
            BlurKernel::Bin5 => &[0.0625, 0.25, 0.375, 0.25, 0.0625],
        };
        let m = row.len();
        let mut w = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                w[i * m + j] = row[i] * row[j];
            }
        }
        w
    }
}

// ---------------------------------------------------------------------------
// Fused blur + subsample kernels
// ---------------------------------------------------------------------------

/// Forward of blur-then-subsample, evaluated only at kept positions.
///
/// The blur is depthwise (one shared spatial kernel per channel) at stride 1
/// with reflect padding; `window` is the original pool's kernel size, so the
/// output count `floor((H - window)/stride) + 1` matches the stage being
/// replaced (`window = 1` gives plain index-0,s,2s subsampling).
fn blur_pool_forward(
    x: &Tensor,
    kernel: &[f64],
    m: usize,
    stride: usize,
    window: usize,
) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h < m || w < m {
        return Err(Error::shape(format!("blur: image {h}x{w} smaller than kernel {m}x{m}")));
    }
    if stride < 1 || window < 1 {
        return Err(Error::invalid("blur pool: stride and window must be >= 1".to_string()));
    }
    if h < window || w < window {
        return Err(Error::shape(format!(
            "blur pool: window {window} larger than input {h}x{w}"
        )));
    }
    let half = m / 2;
    let wp = w + 2 * half;
    let h_out = (h - window) / stride + 1;
    let w_out = (w - window) / stride + 1;
    let mut out = Tensor::zeros(&[n, c, h_out, w_out]);
    let mut padded = Vec::new();
    for ni in 0..n {
        for ci in 0..c {
            pad_plane(
                x.plane(ni, ci, c, h * w),
                h,
                w,
                half,
                half,
                half,
                half,
                PadMode::Reflect,
                &mut padded,
            );
            let off = (ni * c + ci) * h_out * w_out;
            for oi in 0..h_out {
                for oj in 0..w_out {
                    let (r, cc) = (oi * stride, oj * stride);
                    let mut acc = 0.0;
                    for dp in 0..m {
                        let row = &padded[(r + dp) * wp + cc..(r + dp) * wp + cc + m];
                        for dq in 0..m {
                            acc += row[dq] * kernel[dp * m + dq];
                        }
                    }
                    out.data_mut()[off + oi * w_out + oj] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Shared backward: gradient w.r.t. the input (adjoint of the reflect-padded
/// blur) and w.r.t. the kernel weights.
fn blur_pool_backward(
    x: &Tensor,
    kernel: &[f64],
    m: usize,
    stride: usize,
    window: usize,
    out_grad: &[f64],
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (n, c, h, w) = x.dims4().expect("checked at record time");
    let half = m / 2;
    let hp = h + 2 * half;
    let wp = w + 2 * half;
    let h_out = (h - window) / stride + 1;
    let w_out = (w - window) / stride + 1;
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dk = want_dk.then(|| vec![0.0; m * m]);
    let mut padded = Vec::new();
    let mut dpadded = vec![0.0; hp * wp];
    for ni in 0..n {
        for ci in 0..c {
            if want_dk {
                pad_plane(
                    x.plane(ni, ci, c, h * w),
                    h,
                    w,
                    half,
                    half,
                    half,
                    half,
                    PadMode::Reflect,
                    &mut padded,
                );
            }
            if want_dx {
                dpadded.iter_mut().for_each(|v| *v = 0.0);
            }
            let off = (ni * c + ci) * h_out * w_out;
            for oi in 0..h_out {
                for oj in 0..w_out {
                    let g = out_grad[off + oi * w_out + oj];
                    let (r, cc) = (oi * stride, oj * stride);
                    for dp in 0..m {
                        for dq in 0..m {
                            let pidx = (r + dp) * wp + cc + dq;
                            if let Some(dk) = dk.as_mut() {
                                dk[dp * m + dq] += padded[pidx] * g;
                            }
                            if want_dx {
                                dpadded[pidx] += kernel[dp * m + dq] * g;
                            }
                        }
                    }
                }
            }
            if let Some(dx) = dx.as_mut() {
                unpad_accumulate(
                    &dpadded,
                    h,
                    w,
                    half,
                    half,
                    half,
                    half,
                    PadMode::Reflect,
                    &mut dx[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w],
                );
            }
        }
    }
    (dx, dk)
}

/// Gradient of a blurred output w.r.t. sigma: contract the kernel-weight
/// gradient (input correlated with the upstream error) against
/// `d weights / d sigma`.
pub fn dab_blur_sigma_grad(x: &Tensor, dy: &Tensor, param: &GaussianBlurParam) -> Result<f64> {
    if x.shape() != dy.shape() {
        return Err(Error::shape(format!(
            "dsigma: dy shape {:?} does not match input {:?}",
            dy.shape(),
            x.shape()
        )));
    }
    let m = param.kernel_size;
    let (_, dk) = blur_pool_backward(x, &[], m, 1, 1, dy.data(), false, true);
    let dgds = gaussian_kernel_dsigma(param.sigma, m)?;
    Ok(dk
        .expect("requested dk")
        .iter()
        .zip(&dgds)
        .map(|(a, b)| a * b)
        .sum())
}

struct DabPool {
    m: usize,
    stride: usize,
    window: usize,
}

impl TapeOp for DabPool {
    fn name(&self) -> &'static str {
        "dab_pool"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        out_grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (x, sigma) = (inputs[0], inputs[1].data()[0]);
        let kernel = gaussian_kernel(sigma, self.m).expect("validated at record time");
        let (dx, dk) = blur_pool_backward(
            x,
            kernel.weights(),
            self.m,
            self.stride,
            self.window,
            out_grad,
            needs[0],
            needs[1],
        );
        let dsigma = dk.map(|dk| {
            let dgds = gaussian_kernel_dsigma(sigma, self.m).expect("validated at record time");
            vec![dk.iter().zip(&dgds).map(|(a, b)| a * b).sum()]
        });
        vec![dx, dsigma]
    }
}

struct FixedBlurPool {
    kernel: BlurKernel,
    stride: usize,
    window: usize,
}

impl TapeOp for FixedBlurPool {
    fn name(&self) -> &'static str {
        "fixed_blur_pool"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        out_grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let weights = self.kernel.weights();
        let (dx, _) = blur_pool_backward(
            inputs[0],
            &weights,
            self.kernel.size(),
            self.stride,
            self.window,
            out_grad,
            needs[0],
            false,
        );
        vec![dx]
    }
}

struct AaRelu;

impl TapeOp for AaRelu {
    fn name(&self) -> &'static str {
        "aa_relu"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        out_grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (x, alpha) = (inputs[0], inputs[1].data()[0]);
        let dx = needs[0].then(|| {
            x.data()
                .iter()
                .zip(out_grad)
                .map(|(&v, &g)| g * aa_relu_grad_x_scalar(v, alpha))
                .collect()
        });
        let dalpha = needs[1].then(|| {
            let s: f64 = x
                .data()
                .iter()
                .zip(out_grad)
                .map(|(&v, &g)| g * aa_relu_grad_alpha_scalar(v, alpha))
                .sum();
            vec![s]
        });
        vec![dx, dalpha]
    }
}

struct CRelu {
    cap: f64,
}

impl TapeOp for CRelu {
    fn name(&self) -> &'static str {
        "c_relu"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        out_grad: &[f64],
        _needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let dx = inputs[0]
            .data()
            .iter()
            .zip(out_grad)
            .map(|(&v, &g)| g * c_relu_grad_scalar(v, self.cap))
            .collect();
        vec![Some(dx)]
    }
}

impl Tape {
    /// Depthwise Gaussian blur at stride 1 with reflect padding; the kernel
    /// is a function of the scalar `sigma` variable, so gradients flow both
    /// to the input and to sigma.
    pub fn dab_blur(&mut self, x: Var, sigma: Var, m: usize) -> Result<Var> {
        self.dab_pool(x, sigma, m, 1, 1)
    }

    /// Blur-then-subsample, fused: blurred values are only computed at the
    /// kept grid positions.
    pub fn dab_pool(&mut self, x: Var, sigma: Var, m: usize, stride: usize, window: usize) -> Result<Var> {
        if self.value(sigma).len() != 1 {
            return Err(Error::shape("dab_pool: sigma must be a scalar".to_string()));
        }
        let s = self.value(sigma).data()[0];
        let kernel = gaussian_kernel(s, m)?;
        let out = blur_pool_forward(self.value(x), kernel.weights(), m, stride, window)?;
        Ok(self.push(vec![x, sigma], Box::new(DabPool { m, stride, window }), out))
    }

    /// Non-learnable binomial blur + subsample (MBP-style baseline).
    pub fn fixed_blur_pool(&mut self, x: Var, kernel: BlurKernel, stride: usize, window: usize) -> Result<Var> {
        let weights = kernel.weights();
        let out = blur_pool_forward(self.value(x), &weights, kernel.size(), stride, window)?;
        Ok(self.push(
            vec![x],
            Box::new(FixedBlurPool { kernel, stride, window }),
            out,
        ))
    }

    /// AA-ReLU with a scalar learnable alpha variable.
    pub fn aa_relu(&mut self, x: Var, alpha: Var) -> Result<Var> {
        if self.value(alpha).len() != 1 {
            return Err(Error::shape("aa_relu: alpha must be a scalar".to_string()));
        }
        let a = self.value(alpha).data()[0];
        if a <= 0.0 {
            return Err(Error::invalid(format!("aa_relu: alpha must be positive, got {a}")));
        }
        let out = Tensor::new(
            self.value(x).shape(),
            self.value(x).data().iter().map(|&v| aa_relu_scalar(v, a)).collect(),
        )?;
        Ok(self.push(vec![x, alpha], Box::new(AaRelu), out))
    }

    /// Clipped ReLU with a fixed cap.
    pub fn c_relu(&mut self, x: Var, cap: f64) -> Result<Var> {
        if cap <= 0.0 {
            return Err(Error::invalid(format!("c_relu: cap must be positive, got {cap}")));
        }
        let out = Tensor::new(
            self.value(x).shape(),
            self.value(x).data().iter().map(|&v| c_relu_scalar(v, cap)).collect(),
        )?;
        Ok(self.push(vec![x], Box::new(CRelu { cap }), out))
    }
}
