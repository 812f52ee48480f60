//! Primitive differentiable operations.
//!
//! Each op validates shapes, computes its forward value, and records a
//! backward rule on the tape. Backward rules recompute cheap intermediates
//! (padded planes, argmax positions, softmax probabilities) rather than
//! caching them, which keeps every op a pure function of its inputs.

use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, TapeOp, Var};
use crate::tensor::{axpy, dot, pad_plane, unpad_accumulate, PadMode, Tensor};

/// Build the per-channel padded planes of image `n` into one contiguous
/// `c * hp * wp` buffer.
fn pad_image(x: &Tensor, n: usize, c: usize, h: usize, w: usize, pad: usize, mode: PadMode) -> Vec<f64> {
    let hp = h + 2 * pad;
    let wp = w + 2 * pad;
    let mut planes = vec![0.0; c * hp * wp];
    let mut tmp = Vec::new();
    for ci in 0..c {
        pad_plane(x.plane(n, ci, c, h * w), h, w, pad, pad, pad, pad, mode, &mut tmp);
        planes[ci * hp * wp..(ci + 1) * hp * wp].copy_from_slice(&tmp);
    }
    planes
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

struct Conv2d {
    stride: usize,
    pad: usize,
    mode: PadMode,
}

fn conv2d_shapes(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    mode: PadMode,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, wd) = x.dims4()?;
    let (oc, ic, kh, kw) = w.dims4()?;
    if ic != c {
        return Err(Error::shape(format!(
            "conv2d: input has {c} channels but weights expect {ic}"
        )));
    }
    if kh != kw {
        return Err(Error::shape(format!("conv2d: kernel must be square, got {kh}x{kw}")));
    }
    if stride < 1 {
        return Err(Error::invalid("conv2d: stride must be >= 1".to_string()));
    }
    if mode == PadMode::Reflect && pad > 0 && pad >= h.min(wd) {
        return Err(Error::invalid(format!(
            "conv2d: reflect padding {pad} exceeds image size {h}x{wd}"
        )));
    }
    let hp = h + 2 * pad;
    let wp = wd + 2 * pad;
    if hp < kh || wp < kw {
        return Err(Error::shape(format!(
            "conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}"
        )));
    }
    let h_out = (hp - kh) / stride + 1;
    let w_out = (wp - kw) / stride + 1;
    Ok((n, c, h, wd, oc, kh, h_out, w_out))
}

thread_local! {
    // Large conv workspaces are reused across calls; fresh multi-megabyte
    // allocations per op would be dominated by page faults.
    static CONV_SCRATCH: std::cell::RefCell<ConvScratch> =
        std::cell::RefCell::new(ConvScratch::default());
}

#[derive(Default)]
struct ConvScratch {
    b: Vec<f64>,
    flat: Vec<f64>,
    dy: Vec<f64>,
    db: Vec<f64>,
    wt: Vec<f64>,
}

/// Reset a scratch buffer to `n` zeros, keeping its capacity.
fn reset(buf: &mut Vec<f64>, n: usize) {
    buf.clear();
    buf.resize(n, 0.0);
}

/// `out[m][n] += a[m][k_dim] * b[k_dim][n]`, processing four output rows
/// per pass over a `b` row.
fn matmul_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k_dim: usize, n: usize) {
    let mut i = 0;
    while i + 4 <= m {
        let (o01, o23) = out[i * n..(i + 4) * n].split_at_mut(2 * n);
        let (o0, o1) = o01.split_at_mut(n);
        let (o2, o3) = o23.split_at_mut(n);
        for kk in 0..k_dim {
            let (a0, a1, a2, a3) = (
                a[i * k_dim + kk],
                a[(i + 1) * k_dim + kk],
                a[(i + 2) * k_dim + kk],
                a[(i + 3) * k_dim + kk],
            );
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                let bj = brow[j];
                o0[j] += a0 * bj;
                o1[j] += a1 * bj;
                o2[j] += a2 * bj;
                o3[j] += a3 * bj;
            }
        }
        i += 4;
    }
    while i < m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k_dim {
            axpy(orow, a[i * k_dim + kk], &b[kk * n..(kk + 1) * n]);
        }
        i += 1;
    }
}

/// Gather the padded input into the im2col matrix `B[c*k*k][n*h_out*w_out]`
/// so convolution becomes one matrix product over the whole batch.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &Tensor,
    k: usize,
    stride: usize,
    pad: usize,
    mode: PadMode,
    h_out: usize,
    w_out: usize,
    b: &mut Vec<f64>,
) {
    let (n, c, h, wd) = x.dims4().expect("checked at record time");
    let wp = wd + 2 * pad;
    let cols = n * h_out * w_out;
    let hw_out = h_out * w_out;
    reset(b, c * k * k * cols);
    let mut padded = Vec::new();
    for ni in 0..n {
        for ci in 0..c {
            pad_plane(x.plane(ni, ci, c, h * wd), h, wd, pad, pad, pad, pad, mode, &mut padded);
            for p in 0..k {
                for q in 0..k {
                    let krow = ((ci * k + p) * k + q) * cols + ni * hw_out;
                    if stride == 1 {
                        for i in 0..h_out {
                            let src = (i + p) * wp + q;
                            b[krow + i * w_out..krow + (i + 1) * w_out]
                                .copy_from_slice(&padded[src..src + w_out]);
                        }
                    } else {
                        for i in 0..h_out {
                            let src = (i * stride + p) * wp + q;
                            for j in 0..w_out {
                                b[krow + i * w_out + j] = padded[src + j * stride];
                            }
                        }
                    }
                }
            }
        }
    }
    b
}

/// Adjoint of [`im2col`]: scatter-accumulate `dB` back onto the input,
/// folding padded border gradients per the padding mode.
fn col2im_accumulate(
    db: &[f64],
    x_dims: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    mode: PadMode,
    h_out: usize,
    w_out: usize,
    dx: &mut [f64],
) {
    let (n, c, h, wd) = x_dims;
    let hp = h + 2 * pad;
    let wp = wd + 2 * pad;
    let cols = n * h_out * w_out;
    let hw_out = h_out * w_out;
    let hw = h * wd;
    let mut dpadded = vec![0.0; hp * wp];
    for ni in 0..n {
        for ci in 0..c {
            dpadded.iter_mut().for_each(|v| *v = 0.0);
            for p in 0..k {
                for q in 0..k {
                    let krow = ((ci * k + p) * k + q) * cols + ni * hw_out;
                    if stride == 1 {
                        for i in 0..h_out {
                            let dst = (i + p) * wp + q;
                            for j in 0..w_out {
                                dpadded[dst + j] += db[krow + i * w_out + j];
                            }
                        }
                    } else {
                        for i in 0..h_out {
                            let dst = (i * stride + p) * wp + q;
                            for j in 0..w_out {
                                dpadded[dst + j * stride] += db[krow + i * w_out + j];
                            }
                        }
                    }
                }
            }
            unpad_accumulate(
                &dpadded,
                h,
                wd,
                pad,
                pad,
                pad,
                pad,
                mode,
                &mut dx[(ni * c + ci) * hw..(ni * c + ci + 1) * hw],
            );
        }
    }
}

fn conv2d_forward(x: &Tensor, w: &Tensor, stride: usize, pad: usize, mode: PadMode) -> Result<Tensor> {
    let (n, _, _, _, oc, k, h_out, w_out) = conv2d_shapes(x, w, stride, pad, mode)?;
    let (_, c, _, _) = x.dims4()?;
    let cols = n * h_out * w_out;
    let hw_out = h_out * w_out;
    let b = im2col(x, k, stride, pad, mode, h_out, w_out);
    let mut flat = vec![0.0; oc * cols];
    matmul_acc(&mut flat, w.data(), &b, oc, c * k * k, cols);
    // reorder [oc][n, hw] -> [n, oc, hw]
    let mut out = Tensor::zeros(&[n, oc, h_out, w_out]);
    for ni in 0..n {
        for o in 0..oc {
            let src = o * cols + ni * hw_out;
            let dst = (ni * oc + o) * hw_out;
            out.data_mut()[dst..dst + hw_out].copy_from_slice(&flat[src..src + hw_out]);
        }
    }
    Ok(out)
}

impl TapeOp for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        out_grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (n, c, h, wd) = x.dims4().expect("checked at record time");
        let (oc, _, k, _) = w.dims4().expect("checked at record time");
        let (_, _, h_out, w_out) = output.dims4().expect("conv output is 4-D");
        let (stride, pad, mode) = (self.stride, self.pad, self.mode);
        let cols = n * h_out * w_out;
        let hw_out = h_out * w_out;
        let kk = c * k * k;

        // dY reordered to [oc][n, hw]
        let mut dy_mat = vec![0.0; oc * cols];
        for ni in 0..n {
            for o in 0..oc {
                let src = (ni * oc + o) * hw_out;
                let dst = o * cols + ni * hw_out;
                dy_mat[dst..dst + hw_out].copy_from_slice(&out_grad[src..src + hw_out]);
            }
        }
        let b = im2col(x, k, stride, pad, mode, h_out, w_out);

        let dw = needs[1].then(|| {
            let mut dw = vec![0.0; oc * kk];
            for o in 0..oc {
                let dy_row = &dy_mat[o * cols..(o + 1) * cols];
                for ki in 0..kk {
                    dw[o * kk + ki] = dot(&b[ki * cols..(ki + 1) * cols], dy_row);
                }
            }
            dw
        });

        let dx = needs[0].then(|| {
            // dB = W^T dY, then fold back through the gather
            let mut wt = vec![0.0; kk * oc];
            for o in 0..oc {
                for ki in 0..kk {
                    wt[ki * oc + o] = w.data()[o * kk + ki];
                }
            }
            let mut db = vec![0.0; kk * cols];
            matmul_acc(&mut db, &wt, &dy_mat, kk, oc, cols);
            let mut dx = vec![0.0; x.len()];
            col2im_accumulate(&db, (n, c, h, wd), k, stride, pad, mode, h_out, w_out, &mut dx);
            dx
        });
        vec![dx, dw]
    }
}

// ---------------------------------------------------------------------------
// dense
// ---------------------------------------------------------------------------

struct Dense;

impl TapeOp for Dense {
    fn name(&self) -> &'static str {
        "dense"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        out_grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (n, f) = x.dims2().expect("checked at record time");
        let (_, c) = w.dims2().expect("checked at record time");
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; n * f];
            for ni in 0..n {
                let dy = &out_grad[ni * c..(ni + 1) * c];
                for fi in 0..f {
                    dx[ni * f + fi] = dot(&w.data()[fi * c..(fi + 1) * c], dy);
                }
            }
            dx
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![0.0; f * c];
            for ni in 0..n {
                let dy = &out_grad[ni * c..(ni + 1) * c];
                for fi in 0..f {
                    axpy(&mut dw[fi * c..(fi + 1) * c], x.data()[ni * f + fi], dy);
                }
            }
            dw
        });
        let db = needs[2].then(|| {
            let mut db = vec![0.0; c];
            for ni in 0..n {
                for ci in 0..c {
                    db[ci] += out_grad[ni * c + ci];
                }
            }
            db
        });
        vec![dx, dw, db]
    }
}

// ---------------------------------------------------------------------------
// pooling and subsampling
// ---------------------------------------------------------------------------

/// Stride-1 max pooling with reflect padding, output size preserved.
struct DenseMax {
    k: usize,
}

/// Pads for a size-preserving window of size `k` at stride 1.
fn same_pads(k: usize) -> (usize, usize) {
    ((k - 1) / 2, k / 2)
}

impl TapeOp for DenseMax {
    fn name(&self) -> &'static str {
        "dense_max"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        out_grad: &[f64],
        _needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0];
        let (n, c, h, w) = x.dims4().expect("checked at record time");
        let k = self.k;
        let (pt, pb) = same_pads(k);
        let wp = w + pt + pb;
        let mut dx = vec![0.0; x.len()];
        let mut padded = Vec::new();
        for ni in 0..n {
            for ci in 0..c {
                let plane = x.plane(ni, ci, c, h * w);
                pad_plane(plane, h, w, pt, pb, pt, pb, PadMode::Reflect, &mut padded);
                let goff = (ni * c + ci) * h * w;
                for i in 0..h {
                    for j in 0..w {
                        // First maximal element in row-major window scan.
                        let mut best = f64::NEG_INFINITY;
                        let mut best_pq = (0, 0);
                        for p in 0..k {
                            for q in 0..k {
                                let v = padded[(i + p) * wp + (j + q)];
                                if v > best {
                                    best = v;
                                    best_pq = (p, q);
                                }
                            }
                        }
                        let si = super::reflect_index(i as isize + best_pq.0 as isize - pt as isize, h);
                        let sj = super::reflect_index(j as isize + best_pq.1 as isize - pt as isize, w);
                        dx[(ni * c + ci) * h * w + si * w + sj] += out_grad[goff + i * w + j];
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Valid-padding max pooling.
struct MaxPool {
    k: usize,
    s: usize,
}

impl TapeOp for MaxPool {
    fn name(&self) -> &'static str {
        "max_pool"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        out_grad: &[f64],
        _needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0];
        let (n, c, h, w) = x.dims4().expect("checked at record time");
        let (_, _, h_out, w_out) = output.dims4().expect("pool output is 4-D");
        let (k, s) = (self.k, self.s);
        let mut dx = vec![0.0; x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let plane = x.plane(ni, ci, c, h * w);
                let goff = (ni * c + ci) * h_out * w_out;
                for i in 0..h_out {
                    for j in 0..w_out {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_rc = (0, 0);
                        for p in 0..k {
                            for q in 0..k {
                                let (r, cc) = (i * s + p, j * s + q);
                                let v = plane[r * w + cc];
                                if v > best {
                                    best = v;
                                    best_rc = (r, cc);
                                }
                            }
                        }
                        dx[(ni * c + ci) * h * w + best_rc.0 * w + best_rc.1] +=
                            out_grad[goff + i * w_out + j];
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Valid-padding average pooling.
struct AvgPool {
    k: usize,
    s: usize,
}

impl TapeOp for AvgPool {
    fn name(&self) -> &'static str {
        "avg_pool"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        out_grad: &[f64],
        _needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0];
        let (n, c, h, w) = x.dims4().expect("checked at record time");
        let (_, _, h_out, w_out) = output.dims4().expect("pool output is 4-D");
        let (k, s) = (self.k, self.s);
        let inv = 1.0 / (k * k) as f64;
        let mut dx = vec![0.0; x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let goff = (ni * c + ci) * h_out * w_out;
                let xoff = (ni * c + ci) * h * w;
                for i in 0..h_out {
                    for j in 0..w_out {
                        let g = out_grad[goff + i * w_out + j] * inv;
                        for p in 0..k {
                            for q in 0..k {
                                dx[xoff + (i * s + p) * w + (j * s + q)] += g;
                            }
                        }
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Keep rows/columns at indices 0, s, 2s, ...
struct Subsample {
    s: usize,
}

impl TapeOp for Subsample {
    fn name(&self) -> &'static str {
        "subsample"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        out_grad: &[f64],
        _needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0];
        let (n, c, h, w) = x.dims4().expect("checked at record time");
        let (_, _, h_out, w_out) = output.dims4().expect("subsample output is 4-D");
        let s = self.s;
        let mut dx = vec![0.0; x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let goff = (ni * c + ci) * h_out * w_out;
                let xoff = (ni * c + ci) * h * w;
                for i in 0..h_out {
                    for j in 0..w_out {
                        dx[xoff + (i * s) * w + j * s] += out_grad[goff + i * w_out + j];
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Adds a per-channel constant (used to apply zero-centre normalization
/// inside a differentiable graph).
struct AddChannelConst;

impl TapeOp for AddChannelConst {
    fn name(&self) -> &'static str {
        "add_channel_const"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        out_grad: &[f64],
        _needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        vec![Some(out_grad.to_vec())]
    }
}

struct Flatten {
    in_shape: Vec<usize>,
}

impl TapeOp for Flatten {
    fn name(&self) -> &'static str {
        "flatten"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        out_grad: &[f64],
        _needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        debug_assert_eq!(out_grad.len(), self.in_shape.iter().product::<usize>());
        vec![Some(out_grad.to_vec())]
    }
}

pub(crate) struct ReluOp;

impl TapeOp for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
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
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect();
        vec![Some(dx)]
    }
}

// ---------------------------------------------------------------------------
// softmax cross-entropy
// ---------------------------------------------------------------------------

struct SoftmaxXent {
    labels: Vec<usize>,
}

/// Row-wise softmax with log-sum-exp stabilization.
fn softmax_rows(logits: &Tensor) -> Vec<f64> {
    let (n, c) = logits.dims2().expect("checked at record time");
    let mut probs = vec![0.0; n * c];
    for ni in 0..n {
        let row = &logits.data()[ni * c..(ni + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (j, &l) in row.iter().enumerate() {
            let e = (l - m).exp();
            probs[ni * c + j] = e;
            z += e;
        }
        for j in 0..c {
            probs[ni * c + j] /= z;
        }
    }
    probs
}

impl TapeOp for SoftmaxXent {
    fn name(&self) -> &'static str {
        "softmax_xent"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        out_grad: &[f64],
        _needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let logits = inputs[0];
        let (n, c) = logits.dims2().expect("checked at record time");
        let g = out_grad[0] / n as f64;
        let mut dl = softmax_rows(logits);
        for (ni, &label) in self.labels.iter().enumerate() {
            dl[ni * c + label] -= 1.0;
        }
        for v in dl.iter_mut() {
            *v *= g;
        }
        vec![Some(dl)]
    }
}

// ---------------------------------------------------------------------------
// Tape methods
// ---------------------------------------------------------------------------

impl Tape {
    /// 2-D convolution of NCHW input with OIkk weights.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize, mode: PadMode) -> Result<Var> {
        let out = conv2d_forward(self.value(x), self.value(w), stride, pad, mode)?;
        Ok(self.push(vec![x, w], Box::new(Conv2d { stride, pad, mode }), out))
    }

    /// Affine map `y = x W + b` on a `[n, f]` input.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, f) = self.value(x).dims2().map_err(|_| {
            Error::shape(format!(
                "dense: input must be 2-D [n, features], got {:?} (flatten first)",
                self.value(x).shape()
            ))
        })?;
        let (fw, c) = self.value(w).dims2()?;
        if fw != f {
            return Err(Error::shape(format!(
                "dense: input features {f} do not match weight rows {fw}"
            )));
        }
        if self.value(b).shape() != [c] {
            return Err(Error::shape(format!(
                "dense: bias shape {:?} does not match {c} outputs",
                self.value(b).shape()
            )));
        }
        let mut out = Tensor::zeros(&[n, c]);
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd = self.value(b).data();
            let od = out.data_mut();
            for ni in 0..n {
                let row = &mut od[ni * c..(ni + 1) * c];
                row.copy_from_slice(bd);
                for fi in 0..f {
                    axpy(row, xd[ni * f + fi], &wd[fi * c..(fi + 1) * c]);
                }
            }
        }
        Ok(self.push(vec![x, w, b], Box::new(Dense), out))
    }

    /// Stride-1 max pooling with reflect padding; output matches input size.
    /// Gradient flows to the first maximal element in row-major window scan.
    pub fn dense_max(&mut self, x: Var, k: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if k < 1 {
            return Err(Error::invalid("dense_max: window must be >= 1".to_string()));
        }
        if h < k || w < k {
            return Err(Error::shape(format!(
                "dense_max: window {k} larger than padded input {h}x{w}"
            )));
        }
        let (pt, pb) = same_pads(k);
        let wp = w + pt + pb;
        let mut out = Tensor::zeros(&[n, c, h, w]);
        let mut padded = Vec::new();
        for ni in 0..n {
            for ci in 0..c {
                let plane = self.value(x).plane(ni, ci, c, h * w);
                pad_plane(plane, h, w, pt, pb, pt, pb, PadMode::Reflect, &mut padded);
                let off = (ni * c + ci) * h * w;
                for i in 0..h {
                    for j in 0..w {
                        let mut best = f64::NEG_INFINITY;
                        for p in 0..k {
                            for q in 0..k {
                                let v = padded[(i + p) * wp + (j + q)];
                                if v > best {
                                    best = v;
                                }
                            }
                        }
                        out.data_mut()[off + i * w + j] = best;
                    }
                }
            }
        }
        Ok(self.push(vec![x], Box::new(DenseMax { k }), out))
    }

    /// Valid-padding max pooling with window `k` and stride `s`.
    pub fn max_pool(&mut self, x: Var, k: usize, s: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h < k || w < k {
            return Err(Error::shape(format!("max_pool: window {k} larger than input {h}x{w}")));
        }
        let h_out = (h - k) / s + 1;
        let w_out = (w - k) / s + 1;
        let mut out = Tensor::zeros(&[n, c, h_out, w_out]);
        for ni in 0..n {
            for ci in 0..c {
                let plane = self.value(x).plane(ni, ci, c, h * w);
                let off = (ni * c + ci) * h_out * w_out;
                for i in 0..h_out {
                    for j in 0..w_out {
                        let mut best = f64::NEG_INFINITY;
                        for p in 0..k {
                            for q in 0..k {
                                best = best.max(plane[(i * s + p) * w + (j * s + q)]);
                            }
                        }
                        out.data_mut()[off + i * w_out + j] = best;
                    }
                }
            }
        }
        Ok(self.push(vec![x], Box::new(MaxPool { k, s }), out))
    }

    /// Valid-padding average pooling.
    pub fn avg_pool(&mut self, x: Var, k: usize, s: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h < k || w < k {
            return Err(Error::shape(format!("avg_pool: window {k} larger than input {h}x{w}")));
        }
        let h_out = (h - k) / s + 1;
        let w_out = (w - k) / s + 1;
        let inv = 1.0 / (k * k) as f64;
        let mut out = Tensor::zeros(&[n, c, h_out, w_out]);
        for ni in 0..n {
            for ci in 0..c {
                let plane = self.value(x).plane(ni, ci, c, h * w);
                let off = (ni * c + ci) * h_out * w_out;
                for i in 0..h_out {
                    for j in 0..w_out {
                        let mut acc = 0.0;
                        for p in 0..k {
                            for q in 0..k {
                                acc += plane[(i * s + p) * w + (j * s + q)];
                            }
                        }
                        out.data_mut()[off + i * w_out + j] = acc * inv;
                    }
                }
            }
        }
        Ok(self.push(vec![x], Box::new(AvgPool { k, s }), out))
    }

    /// Keep rows and columns at indices 0, s, 2s, ...
    pub fn subsample(&mut self, x: Var, s: usize) -> Result<Var> {
        if s < 1 {
            return Err(Error::invalid("subsample: stride must be >= 1".to_string()));
        }
        let (n, c, h, w) = self.value(x).dims4()?;
        let h_out = (h + s - 1) / s;
        let w_out = (w + s - 1) / s;
        let mut out = Tensor::zeros(&[n, c, h_out, w_out]);
        for ni in 0..n {
            for ci in 0..c {
                let plane = self.value(x).plane(ni, ci, c, h * w);
                let off = (ni * c + ci) * h_out * w_out;
                for i in 0..h_out {
                    for j in 0..w_out {
                        out.data_mut()[off + i * w_out + j] = plane[(i * s) * w + j * s];
                    }
                }
            }
        }
        Ok(self.push(vec![x], Box::new(Subsample { s }), out))
    }

    /// Add `deltas[c]` to every pixel of channel `c`.
    pub fn add_channel_const(&mut self, x: Var, deltas: &[f64]) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if deltas.len() != c {
            return Err(Error::shape(format!(
                "add_channel_const: {} deltas for {c} channels",
                deltas.len()
            )));
        }
        let hw = h * w;
        let mut out = self.value(x).clone();
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * hw;
                for v in &mut out.data_mut()[off..off + hw] {
                    *v += deltas[ci];
                }
            }
        }
        Ok(self.push(vec![x], Box::new(AddChannelConst), out))
    }

    /// Reshape `[n, c, h, w]` to `[n, c*h*w]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let out = Tensor::new(&[n, c * h * w], self.value(x).data().to_vec())?;
        let in_shape = self.value(x).shape().to_vec();
        Ok(self.push(vec![x], Box::new(Flatten { in_shape }), out))
    }

    /// Elementwise max(x, 0).
    pub fn relu(&mut self, x: Var) -> Var {
        let out = Tensor::new(
            self.value(x).shape(),
            self.value(x).data().iter().map(|&v| v.max(0.0)).collect(),
        )
        .expect("same shape");
        self.push(vec![x], Box::new(ReluOp), out)
    }

    /// Mean cross-entropy over softmax rows, with log-sum-exp stabilization.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.value(logits).dims2()?;
        if labels.len() != n {
            return Err(Error::shape(format!(
                "softmax_xent: {n} logit rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(format!(
                "softmax_xent: label {bad} out of range for {c} classes"
            )));
        }
        let mut loss = 0.0;
        {
            let data = self.value(logits).data();
            for (ni, &label) in labels.iter().enumerate() {
                let row = &data[ni * c..(ni + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|&l| (l - m).exp()).sum();
                loss += -(row[label] - m - z.ln());
            }
            loss /= n as f64;
        }
        Ok(self.push(
            vec![logits],
            Box::new(SoftmaxXent {
                labels: labels.to_vec(),
            }),
            Tensor::scalar(loss),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of a scalar function of one flat buffer.
    fn fd_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            g[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        use rand::Rng;
        let mut rng = crate::rng::stream(seed, crate::rng::Domain::WeightInit, 99);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn conv2d_all_ones_center_is_nine() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 4, 4], 1.0));
        let w = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, w, 1, 1, PadMode::Zero).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), &[1, 1, 4, 4]);
        // interior entries see the full 3x3 window
        assert_eq!(out.data()[1 * 4 + 1], 9.0);
        assert_eq!(out.data()[2 * 4 + 2], 9.0);
        // corner sees a 2x2 window under zero padding
        assert_eq!(out.data()[0], 4.0);
    }

    #[test]
    fn conv2d_identity_kernel_passes_input_through() {
        let xval = Tensor::new(&[1, 1, 4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
        let mut wv = vec![0.0; 9];
        wv[4] = 1.0;
        let mut tape = Tape::new();
        let x = tape.leaf(xval.clone());
        let w = tape.leaf(Tensor::new(&[1, 1, 3, 3], wv).unwrap());
        let y = tape.conv2d(x, w, 1, 1, PadMode::Zero).unwrap();
        assert_eq!(tape.value(y).data(), xval.data());
    }

    /// Direct seven-nested-loop convolution, the independent reference.
    fn conv_oracle(
        x: &Tensor,
        w: &Tensor,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> Vec<f64> {
        let (n, c, h, wd) = x.dims4().unwrap();
        let (oc, _, k, _) = w.dims4().unwrap();
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; n * oc * h_out * w_out];
        let fetch = |ni: usize, ci: usize, r: isize, cc: isize| -> f64 {
            let (r, cc) = match mode {
                PadMode::Zero => {
                    if r < 0 || cc < 0 || r >= h as isize || cc >= wd as isize {
                        return 0.0;
                    }
                    (r as usize, cc as usize)
                }
                PadMode::Reflect => (
                    super::super::reflect_index(r, h),
                    super::super::reflect_index(cc, wd),
                ),
            };
            x.data()[((ni * c + ci) * h + r) * wd + cc]
        };
        for ni in 0..n {
            for o in 0..oc {
                for i in 0..h_out {
                    for j in 0..w_out {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for p in 0..k {
                                for q in 0..k {
                                    let r = (i * stride + p) as isize - pad as isize;
                                    let cc = (j * stride + q) as isize - pad as isize;
                                    acc += fetch(ni, ci, r, cc)
                                        * w.data()[((o * c + ci) * k + p) * k + q];
                                }
                            }
                        }
                        out[((ni * oc + o) * h_out + i) * w_out + j] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_brute_force_oracle() {
        let x = Tensor::new(&[1, 2, 5, 5], rand_vec(50, 1)).unwrap();
        let w = Tensor::new(&[3, 2, 3, 3], rand_vec(54, 2)).unwrap();
        for &(stride, pad, mode) in &[
            (1, 0, PadMode::Zero),
            (1, 1, PadMode::Zero),
            (2, 1, PadMode::Zero),
            (1, 1, PadMode::Reflect),
            (2, 2, PadMode::Reflect),
        ] {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let wv = tape.leaf(w.clone());
            let y = tape.conv2d(xv, wv, stride, pad, mode).unwrap();
            let expect = conv_oracle(&x, &w, stride, pad, mode);
            let got = tape.value(y).data();
            assert_eq!(got.len(), expect.len());
            for (a, b) in got.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "stride={stride} pad={pad} {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let x0 = rand_vec(32, 3);
        let w0 = rand_vec(36, 4);
        let dy = rand_vec(8, 5); // output 1x2x2x2 for 4x4 input, k=3, stride 2, pad 1
        let run = |xd: &[f64], wd: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(&[1, 2, 4, 4], xd.to_vec()).unwrap().with_requires_grad());
            let w = tape.leaf(Tensor::new(&[2, 2, 3, 3], wd.to_vec()).unwrap().with_requires_grad());
            let y = tape.conv2d(x, w, 2, 1, PadMode::Reflect).unwrap();
            let loss: f64 = tape.value(y).data().iter().zip(&dy).map(|(a, b)| a * b).sum();
            tape.backward_seeded(y, &dy).unwrap();
            (loss, tape.grad(x).unwrap().to_vec(), tape.grad(w).unwrap().to_vec())
        };
        let (_, gx, gw) = run(&x0, &w0);
        let fx = fd_grad(&mut |xd| run(xd, &w0).0, &x0, 1e-6);
        let fw = fd_grad(&mut |wd| run(&x0, wd).0, &w0, 1e-6);
        assert!(max_rel_err(&gx, &fx) < 1e-6, "dx err {}", max_rel_err(&gx, &fx));
        assert!(max_rel_err(&gw, &fw) < 1e-6, "dw err {}", max_rel_err(&gw, &fw));
    }

    #[test]
    fn dense_trivial_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let w0 = tape.leaf(Tensor::zeros(&[3, 2]));
        let b = tape.leaf(Tensor::new(&[2], vec![0.5, -0.5]).unwrap());
        let y = tape.dense(x, w0, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -0.5]);

        // identity weights, zero bias
        let mut id = vec![0.0; 9];
        for i in 0..3 {
            id[i * 3 + i] = 1.0;
        }
        let wi = tape.leaf(Tensor::new(&[3, 3], id).unwrap());
        let b0 = tape.leaf(Tensor::zeros(&[3]));
        let y2 = tape.dense(x, wi, b0).unwrap();
        assert_eq!(tape.value(y2).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn dense_matches_triple_loop_oracle() {
        let xd = rand_vec(6, 7);
        let wd = rand_vec(12, 8);
        let bd = rand_vec(4, 9);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2, 3], xd.clone()).unwrap());
        let w = tape.leaf(Tensor::new(&[3, 4], wd.clone()).unwrap());
        let b = tape.leaf(Tensor::new(&[4], bd.clone()).unwrap());
        let y = tape.dense(x, w, b).unwrap();
        let mut expect = vec![0.0; 8];
        for n in 0..2 {
            for c in 0..4 {
                let mut acc = bd[c];
                for f in 0..3 {
                    acc += xd[n * 3 + f] * wd[f * 4 + c];
                }
                expect[n * 4 + c] = acc;
            }
        }
        for (a, b) in tape.value(y).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_max_constant_and_peak() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 5, 5], 3.25));
        let y = tape.dense_max(x, 3).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 3.25));

        let mut img = vec![0.0; 100];
        img[5 * 10 + 5] = 7.0;
        let x2 = tape.leaf(Tensor::new(&[1, 1, 10, 10], img).unwrap());
        let y2 = tape.dense_max(x2, 2).unwrap();
        let out = tape.value(y2).data();
        // k=2 with pads (0,1): windows at (4..=5, 4..=5) contain the peak
        for i in 0..10 {
            for j in 0..10 {
                let expect = if (4..=5).contains(&i) && (4..=5).contains(&j) { 7.0 } else { 0.0 };
                assert_eq!(out[i * 10 + j], expect, "at ({i},{j})");
            }
        }
    }

    #[test]
    fn dense_max_matches_sliding_window_oracle() {
        let xd = rand_vec(36, 11);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 1, 6, 6], xd.clone()).unwrap());
        let y = tape.dense_max(x, 2).unwrap();
        let out = tape.value(y).data();
        for i in 0..6 {
            for j in 0..6 {
                let mut best = f64::NEG_INFINITY;
                for p in 0..2isize {
                    for q in 0..2isize {
                        let r = super::super::reflect_index(i as isize + p, 6);
                        let c = super::super::reflect_index(j as isize + q, 6);
                        best = best.max(xd[r * 6 + c]);
                    }
                }
                assert_eq!(out[i * 6 + j], best);
            }
        }
    }

    #[test]
    fn subsample_basics() {
        let mut tape = Tape::new();
        let xd: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let x = tape.leaf(Tensor::new(&[1, 1, 4, 4], xd.clone()).unwrap());
        let y1 = tape.subsample(x, 1).unwrap();
        assert_eq!(tape.value(y1).data(), &xd[..]);
        let y2 = tape.subsample(x, 2).unwrap();
        assert_eq!(tape.value(y2).data(), &[0.0, 2.0, 8.0, 10.0]);
    }

    #[test]
    fn subsample_gradient_matches_finite_differences() {
        let x0 = rand_vec(16, 13);
        let dy = rand_vec(4, 14);
        let run = |xd: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(&[1, 1, 4, 4], xd.to_vec()).unwrap().with_requires_grad());
            let y = tape.subsample(x, 2).unwrap();
            let loss: f64 = tape.value(y).data().iter().zip(&dy).map(|(a, b)| a * b).sum();
            tape.backward_seeded(y, &dy).unwrap();
            (loss, tape.grad(x).unwrap().to_vec())
        };
        let (_, g) = run(&x0);
        let f = fd_grad(&mut |xd| run(xd).0, &x0, 1e-6);
        assert!(max_rel_err(&g, &f) < 1e-6);
    }

    #[test]
    fn softmax_xent_uniform_logits_is_ln_k() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[3, 10]));
        let loss = tape.softmax_xent(logits, &[0, 5, 9]).unwrap();
        assert!((tape.value(loss).data()[0] - 10.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_xent_margin_limit_goes_to_zero() {
        let mut tape = Tape::new();
        let mut row = vec![0.0; 10];
        row[3] = 60.0; // huge margin for the true class
        let logits = tape.leaf(Tensor::new(&[1, 10], row).unwrap());
        let loss = tape.softmax_xent(logits, &[3]).unwrap();
        assert!(tape.value(loss).data()[0] < 1e-20);
    }

    #[test]
    fn softmax_xent_rejects_out_of_range_label() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[1, 4]));
        assert!(tape.softmax_xent(logits, &[4]).is_err());
    }

    #[test]
    fn softmax_xent_gradient_matches_finite_differences() {
        let l0 = rand_vec(12, 17);
        let labels = [2, 0, 3];
        let run = |ld: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let l = tape.leaf(Tensor::new(&[3, 4], ld.to_vec()).unwrap().with_requires_grad());
            let loss = tape.softmax_xent(l, &labels).unwrap();
            let v = tape.value(loss).data()[0];
            tape.backward(loss).unwrap();
            (v, tape.grad(l).unwrap().to_vec())
        };
        let (_, g) = run(&l0);
        let f = fd_grad(&mut |ld| run(ld).0, &l0, 1e-6);
        assert!(max_rel_err(&g, &f) < 1e-6, "err {}", max_rel_err(&g, &f));
    }

    #[test]
    fn max_pool_matches_expectation_and_grad_routes_to_argmax() {
        let mut tape = Tape::new();
        let xd = vec![
            1.0, 2.0, 3.0, 4.0, //
            5.0, 6.0, 7.0, 8.0, //
            9.0, 1.0, 2.0, 3.0, //
            4.0, 5.0, 6.0, 7.0,
        ];
        let x = tape.leaf(Tensor::new(&[1, 1, 4, 4], xd).unwrap().with_requires_grad());
        let y = tape.max_pool(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0, 8.0, 9.0, 7.0]);
        tape.backward_seeded(y, &[1.0, 1.0, 1.0, 1.0]).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(g[1 * 4 + 1], 1.0);
        assert_eq!(g[1 * 4 + 3], 1.0);
        assert_eq!(g[2 * 4 + 0], 1.0);
        assert_eq!(g[3 * 4 + 3], 1.0);
        assert_eq!(g.iter().sum::<f64>(), 4.0);
    }

    #[test]
    fn avg_pool_means_windows() {
        let mut tape = Tape::new();
        let xd: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let x = tape.leaf(Tensor::new(&[1, 1, 4, 4], xd).unwrap());
        let y = tape.avg_pool(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn composed_graph_backward_matches_jacobian_product() {
        // y = dense(flatten(subsample(x)), W, b); check full Jacobian dy/dx
        // against per-op Jacobians multiplied together (built by seeding
        // one-hot output gradients through single-op tapes).
        let xd = rand_vec(16, 21);
        let wd = rand_vec(8, 22);
        let bd = rand_vec(2, 23);

        // Full tape Jacobian: one backward per output element.
        let mut jac_tape = vec![vec![0.0; 16]; 2];
        for o in 0..2 {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(&[1, 1, 4, 4], xd.clone()).unwrap().with_requires_grad());
            let s = tape.subsample(x, 2).unwrap();
            let f = tape.flatten(s).unwrap();
            let w = tape.leaf(Tensor::new(&[4, 2], wd.clone()).unwrap());
            let b = tape.leaf(Tensor::new(&[2], bd.clone()).unwrap());
            let y = tape.dense(f, w, b).unwrap();
            let mut seed = vec![0.0; 2];
            seed[o] = 1.0;
            tape.backward_seeded(y, &seed).unwrap();
            jac_tape[o] = tape.grad(x).unwrap().to_vec();
        }

        // Per-op Jacobians: subsample J1 (4x16), dense J2 (2x4); product.
        let mut j1 = vec![vec![0.0; 16]; 4];
        for o in 0..4 {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(&[1, 1, 4, 4], xd.clone()).unwrap().with_requires_grad());
            let s = tape.subsample(x, 2).unwrap();
            let mut seed = vec![0.0; 4];
            seed[o] = 1.0;
            tape.backward_seeded(s, &seed).unwrap();
            j1[o] = tape.grad(x).unwrap().to_vec();
        }
        let mut j2 = vec![vec![0.0; 4]; 2];
        for o in 0..2 {
            for i in 0..4 {
                j2[o][i] = wd[i * 2 + o];
            }
        }
        for o in 0..2 {
            for i in 0..16 {
                let prod: f64 = (0..4).map(|m| j2[o][m] * j1[m][i]).sum();
                assert!(
                    (prod - jac_tape[o][i]).abs() < 1e-12,
                    "Jacobian mismatch at ({o},{i})"
                );
            }
        }
    }

    #[test]
    fn conv2d_stride1_reflect_commutes_with_interior_translation() {
        use rand::Rng;
        let mut rng = crate::rng::stream(31, crate::rng::Domain::WeightInit, 0);
        let h = 12;
        let xd: Vec<f64> = (0..h * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k = 3;
        let wd: Vec<f64> = (0..k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (dy, dx) = (2usize, 1usize);

        // shift image content by (dy, dx) with zero fill
        let mut shifted = vec![0.0; h * h];
        for i in 0..h - dy {
            for j in 0..h - dx {
                shifted[(i + dy) * h + (j + dx)] = xd[i * h + j];
            }
        }
        let conv = |data: Vec<f64>| -> Vec<f64> {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(&[1, 1, h, h], data).unwrap());
            let w = tape.leaf(Tensor::new(&[1, 1, k, k], wd.clone()).unwrap());
            let y = tape.conv2d(x, w, 1, 1, PadMode::Reflect).unwrap();
            tape.value(y).data().to_vec()
        };
        let y0 = conv(xd);
        let y1 = conv(shifted);
        // all pixels >= k away from every border agree after the same shift
        for i in k..h - k {
            for j in k..h - k {
                let a = y0[i * h + j];
                let b = y1[(i + dy) * h + (j + dx)];
                assert!((a - b).abs() < 1e-12, "at ({i},{j}): {a} vs {b}");
            }
        }
    }
}
