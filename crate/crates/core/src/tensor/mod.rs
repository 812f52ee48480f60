//! Dense f64 tensors and a minimal reverse-mode autodiff tape.

mod ops;
mod sgd;
mod tape;

pub use sgd::{sgd_step, OptimizerState};
pub use tape::{Tape, TapeOp, Var};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How convolution-style ops treat pixels outside the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    Zero,
    /// Mirror without repeating the border pixel (`x[-1] == x[1]`).
    Reflect,
}

/// Dense N-dimensional array of f64 values in row-major order.
///
/// Activations use `[N, C, H, W]` layout. A tensor optionally carries a
/// gradient buffer of identical shape; the training loop uses it to hand
/// gradients from the tape to the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} holds {} elements but data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero-sized dimension in {:?}", shape)));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(|i| f(i)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape(format!(
                "gradient length {} does not match tensor length {}",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Reinterpret as `[N, C, H, W]`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(format!(
                "expected 4-D NCHW tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(format!(
                "expected 2-D tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Borrow one `H*W` spatial plane of a 4-D tensor.
    pub fn plane(&self, n: usize, c: usize, channels: usize, hw: usize) -> &[f64] {
        let off = (n * channels + c) * hw;
        &self.data[off..off + hw]
    }
}

/// Mirror index into `0..n` without repeating the edge sample.
///
/// Valid as long as the overshoot is below `n`, which every caller
/// guarantees by checking pad < dim.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    debug_assert!(j >= 0 && j < n);
    j as usize
}

/// Copy an `h x w` plane into an `(h+pt+pb) x (w+pl+pr)` buffer, filling the
/// border per `mode`.
pub(crate) fn pad_plane(
    src: &[f64],
    h: usize,
    w: usize,
    pt: usize,
    pb: usize,
    pl: usize,
    pr: usize,
    mode: PadMode,
    out: &mut Vec<f64>,
) {
    let hp = h + pt + pb;
    let wp = w + pl + pr;
    out.clear();
    out.resize(hp * wp, 0.0);
    match mode {
        PadMode::Zero => {
            for i in 0..h {
                let dst = (i + pt) * wp + pl;
                out[dst..dst + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        PadMode::Reflect => {
            for ip in 0..hp {
                let si = reflect_index(ip as isize - pt as isize, h);
                for jp in 0..wp {
                    let sj = reflect_index(jp as isize - pl as isize, w);
                    out[ip * wp + jp] = src[si * w + sj];
                }
            }
        }
    }
}

/// Adjoint of [`pad_plane`]: fold a padded-plane gradient back onto the
/// `h x w` source. Zero padding drops the border; reflect padding adds each
/// border cell's gradient to its mirrored source pixel.
pub(crate) fn unpad_accumulate(
    padded: &[f64],
    h: usize,
    w: usize,
    pt: usize,
    pb: usize,
    pl: usize,
    pr: usize,
    mode: PadMode,
    out: &mut [f64],
) {
    let wp = w + pl + pr;
    let hp = h + pt + pb;
    match mode {
        PadMode::Zero => {
            for i in 0..h {
                let srow = (i + pt) * wp + pl;
                let drow = i * w;
                for j in 0..w {
                    out[drow + j] += padded[srow + j];
                }
            }
        }
        PadMode::Reflect => {
            for ip in 0..hp {
                let si = reflect_index(ip as isize - pt as isize, h);
                for jp in 0..wp {
                    let sj = reflect_index(jp as isize - pl as isize, w);
                    out[si * w + sj] += padded[ip * wp + jp];
                }
            }
        }
    }
}

/// `y[..] += a * x[..]`, the workhorse of the convolution kernels.
#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
