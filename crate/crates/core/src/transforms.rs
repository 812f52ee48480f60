//! Geometric and photometric input transformations.
//!
//! Integer shifts, align-corners-false bilinear resize, canvas embedding, a
//! differentiable translation warp (gradients w.r.t. the offsets flow
//! through the bilinear weights), perturbation sequences of increasing
//! severity, and the four noise corruption generators. All randomness comes
//! from explicit seeds.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Domain};
use crate::tensor::{Tape, TapeOp, Tensor, Var};

/// Integer translation; vacated pixels take `fill`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftSpec {
    pub dx: isize,
    pub dy: isize,
    pub fill: f64,
}

impl ShiftSpec {
    pub fn diagonal(n: isize) -> Self {
        ShiftSpec { dx: n, dy: n, fill: 0.0 }
    }
}

/// Move content by `(dx, dy)`: `out(y, x) = in(y - dy, x - dx)` or fill.
pub fn integer_shift(img: &Tensor, spec: &ShiftSpec) -> Result<Tensor> {
    let (n, c, h, w) = img.dims4()?;
    if spec.dx.unsigned_abs() > w || spec.dy.unsigned_abs() > h {
        return Err(Error::invalid(format!(
            "shift ({}, {}) exceeds image size {h}x{w}",
            spec.dx, spec.dy
        )));
    }
    let mut out = Tensor::full(&[n, c, h, w], spec.fill);
    let hw = h * w;
    for ni in 0..n {
        for ci in 0..c {
            let src = img.plane(ni, ci, c, hw);
            let off = (ni * c + ci) * hw;
            for y in 0..h as isize {
                let sy = y - spec.dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w as isize {
                    let sx = x - spec.dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    out.data_mut()[off + (y as usize) * w + x as usize] =
                        src[(sy as usize) * w + sx as usize];
                }
            }
        }
    }
    Ok(out)
}

/// Align-corners-false bilinear resize with edge-clamped sampling.
pub fn bilinear_resize(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = img.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target must be at least 1x1".to_string()));
    }
    let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let hw = h * w;
    for ni in 0..n {
        for ci in 0..c {
            let src = img.plane(ni, ci, c, hw);
            let off = (ni * c + ci) * out_h * out_w;
            for oy in 0..out_h {
                let ys = (oy as f64 + 0.5) * sy - 0.5;
                let y0 = ys.floor();
                let fy = ys - y0;
                let (r0, r1) = (
                    (y0 as isize).clamp(0, h as isize - 1) as usize,
                    (y0 as isize + 1).clamp(0, h as isize - 1) as usize,
                );
                for ox in 0..out_w {
                    let xs = (ox as f64 + 0.5) * sx - 0.5;
                    let x0 = xs.floor();
                    let fx = xs - x0;
                    let (c0, c1) = (
                        (x0 as isize).clamp(0, w as isize - 1) as usize,
                        (x0 as isize + 1).clamp(0, w as isize - 1) as usize,
                    );
                    out.data_mut()[off + oy * out_w + ox] = (1.0 - fy)
                        * ((1.0 - fx) * src[r0 * w + c0] + fx * src[r0 * w + c1])
                        + fy * ((1.0 - fx) * src[r1 * w + c0] + fx * src[r1 * w + c1]);
                }
            }
        }
    }
    Ok(out)
}

/// Place `img` on a black canvas at `(off_y, off_x)`.
pub fn embed_canvas(
    img: &Tensor,
    canvas_h: usize,
    canvas_w: usize,
    off_y: usize,
    off_x: usize,
) -> Result<Tensor> {
    let (n, c, h, w) = img.dims4()?;
    if off_y + h > canvas_h || off_x + w > canvas_w {
        return Err(Error::invalid(format!(
            "{h}x{w} image at offset ({off_y}, {off_x}) exceeds {canvas_h}x{canvas_w} canvas"
        )));
    }
    let mut out = Tensor::zeros(&[n, c, canvas_h, canvas_w]);
    let hw = h * w;
    for ni in 0..n {
        for ci in 0..c {
            let src = img.plane(ni, ci, c, hw);
            let off = (ni * c + ci) * canvas_h * canvas_w;
            for y in 0..h {
                let dst = off + (y + off_y) * canvas_w + off_x;
                out.data_mut()[dst..dst + w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Affine bilinear sampling (zero outside)
// ---------------------------------------------------------------------------

/// Sample every output pixel at source coordinates given by `src_of(y, x)`,
/// bilinearly, with zero outside the image.
fn affine_sample(img: &Tensor, src_of: impl Fn(f64, f64) -> (f64, f64)) -> Tensor {
    let (n, c, h, w) = img.dims4().expect("4-D image");
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let hw = h * w;
    let fetch = |src: &[f64], y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            src[(y as usize) * w + x as usize]
        }
    };
    for ni in 0..n {
        for ci in 0..c {
            let src = img.plane(ni, ci, c, hw);
            let off = (ni * c + ci) * hw;
            for y in 0..h {
                for x in 0..w {
                    let (ys, xs) = src_of(y as f64, x as f64);
                    let y0 = ys.floor();
                    let x0 = xs.floor();
                    let (fy, fx) = (ys - y0, xs - x0);
                    let (yi, xi) = (y0 as isize, x0 as isize);
                    let v00 = fetch(src, yi, xi);
                    let v01 = fetch(src, yi, xi + 1);
                    let v10 = fetch(src, yi + 1, xi);
                    let v11 = fetch(src, yi + 1, xi + 1);
                    out.data_mut()[off + y * w + x] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                        + fy * ((1.0 - fx) * v10 + fx * v11);
                }
            }
        }
    }
    out
}

/// Translation by real-valued `(tx, ty)` via bilinear resampling, zero
/// outside. At integer offsets this equals [`integer_shift`] with zero fill.
pub fn warp_translate(img: &Tensor, tx: f64, ty: f64) -> Tensor {
    affine_sample(img, |y, x| (y - ty, x - tx))
}

/// Rotation about the image centre by `degrees`, bilinear, zero outside.
pub fn warp_rotate(img: &Tensor, degrees: f64) -> Tensor {
    let (_, _, h, w) = img.dims4().expect("4-D image");
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let rad = degrees.to_radians();
    let (sin, cos) = rad.sin_cos();
    affine_sample(img, move |y, x| {
        let (dy, dx) = (y - cy, x - cx);
        (cy + dy * cos - dx * sin, cx + dy * sin + dx * cos)
    })
}

/// Horizontal shear: row y samples from `x - sh * (y - cy)`.
pub fn warp_shear_x(img: &Tensor, sh: f64) -> Tensor {
    let (_, _, h, _) = img.dims4().expect("4-D image");
    let cy = (h as f64 - 1.0) / 2.0;
    affine_sample(img, move |y, x| (y, x - sh * (y - cy)))
}

// ---------------------------------------------------------------------------
// Differentiable translation warp
// ---------------------------------------------------------------------------

struct TranslateWarp;

impl TapeOp for TranslateWarp {
    fn name(&self) -> &'static str {
        "translate_warp"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        out_grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let img = inputs[0];
        let tx = inputs[1].data()[0];
        let ty = inputs[2].data()[0];
        let (n, c, h, w) = img.dims4().expect("checked at record time");
        let hw = h * w;
        let fetch = |src: &[f64], y: isize, x: isize| -> f64 {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                0.0
            } else {
                src[(y as usize) * w + x as usize]
            }
        };
        let mut dimg = needs[0].then(|| vec![0.0; img.len()]);
        let mut dtx = 0.0;
        let mut dty = 0.0;
        for ni in 0..n {
            for ci in 0..c {
                let src = img.plane(ni, ci, c, hw);
                let off = (ni * c + ci) * hw;
                for y in 0..h {
                    for x in 0..w {
                        let g = out_grad[off + y * w + x];
                        let ys = y as f64 - ty;
                        let xs = x as f64 - tx;
                        let y0 = ys.floor();
                        let x0 = xs.floor();
                        let (fy, fx) = (ys - y0, xs - x0);
                        let (yi, xi) = (y0 as isize, x0 as isize);
                        let v00 = fetch(src, yi, xi);
                        let v01 = fetch(src, yi, xi + 1);
                        let v10 = fetch(src, yi + 1, xi);
                        let v11 = fetch(src, yi + 1, xi + 1);
                        if needs[1] {
                            // d out / d xs, with xs = x - tx
                            let dxs = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10);
                            dtx += g * -dxs;
                        }
                        if needs[2] {
                            let dys = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01);
                            dty += g * -dys;
                        }
                        if let Some(dimg) = dimg.as_mut() {
                            let mut scatter = |yy: isize, xx: isize, wgt: f64| {
                                if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                                    dimg[off + (yy as usize) * w + xx as usize] += g * wgt;
                                }
                            };
                            scatter(yi, xi, (1.0 - fy) * (1.0 - fx));
                            scatter(yi, xi + 1, (1.0 - fy) * fx);
                            scatter(yi + 1, xi, fy * (1.0 - fx));
                            scatter(yi + 1, xi + 1, fy * fx);
                        }
                    }
                }
            }
        }
        vec![
            dimg,
            needs[1].then(|| vec![dtx]),
            needs[2].then(|| vec![dty]),
        ]
    }
}

impl Tape {
    /// Differentiable translation: output pixel (y, x) bilinearly samples
    /// the input at `(y - ty, x - tx)`, zero outside. Gradients flow to the
    /// image and to the scalar offsets.
    pub fn translate_warp(&mut self, img: Var, tx: Var, ty: Var) -> Result<Var> {
        if self.value(tx).len() != 1 || self.value(ty).len() != 1 {
            return Err(Error::shape("translate_warp: tx and ty must be scalars".to_string()));
        }
        let out = warp_translate(
            self.value(img),
            self.value(tx).data()[0],
            self.value(ty).data()[0],
        );
        Ok(self.push(vec![img, tx, ty], Box::new(TranslateWarp), out))
    }
}

// ---------------------------------------------------------------------------
// Perturbation sequences
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    Translate,
    Rotate,
    Tilt,
    Scale,
}

impl PerturbKind {
    pub const ALL: [PerturbKind; 4] = [
        PerturbKind::Translate,
        PerturbKind::Rotate,
        PerturbKind::Tilt,
        PerturbKind::Scale,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PerturbKind::Translate => "translate",
            PerturbKind::Rotate => "rotate",
            PerturbKind::Tilt => "tilt",
            PerturbKind::Scale => "scale",
        }
    }
}

/// Frames of increasing perturbation severity; frame 0 is the clean image.
#[derive(Debug, Clone)]
pub struct PerturbationSequence {
    pub kind: PerturbKind,
    pub frames: Vec<Tensor>,
}

/// Frame j (1-based) applies severity `(j-1)/(v-1)` of the maximum:
/// 4 px diagonal translation, 16 degrees rotation, 0.15 horizontal shear,
/// or scale down to 0.7. Frame 1 is bit-identical to the input.
pub fn make_sequence(img: &Tensor, kind: PerturbKind, v: usize) -> Result<PerturbationSequence> {
    if v < 2 {
        return Err(Error::invalid(format!("sequence needs at least 2 frames, got {v}")));
    }
    let (_, _, h, w) = img.dims4()?;
    let mut frames = Vec::with_capacity(v);
    for j in 0..v {
        let t = j as f64 / (v - 1) as f64;
        let frame = match kind {
            PerturbKind::Translate => {
                let d = 4.0 * t;
                warp_translate(img, d, d)
            }
            PerturbKind::Rotate => warp_rotate(img, 16.0 * t),
            PerturbKind::Tilt => warp_shear_x(img, 0.15 * t),
            PerturbKind::Scale => {
                let s = 1.0 - 0.3 * t;
                let nh = ((h as f64) * s).round() as usize;
                let nw = ((w as f64) * s).round() as usize;
                let small = bilinear_resize(img, nh.max(1), nw.max(1))?;
                embed_canvas(&small, h, w, (h - nh.max(1)) / 2, (w - nw.max(1)) / 2)?
            }
        };
        frames.push(frame);
    }
    Ok(PerturbationSequence { kind, frames })
}

// ---------------------------------------------------------------------------
// Corruptions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussNoise,
    ShotNoise,
    ImpulseNoise,
    SpeckleNoise,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::GaussNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::SpeckleNoise,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::GaussNoise => "gauss",
            CorruptionKind::ShotNoise => "shot",
            CorruptionKind::ImpulseNoise => "impulse",
            CorruptionKind::SpeckleNoise => "speckle",
        }
    }

    fn id(&self) -> u64 {
        match self {
            CorruptionKind::GaussNoise => 0,
            CorruptionKind::ShotNoise => 1,
            CorruptionKind::ImpulseNoise => 2,
            CorruptionKind::SpeckleNoise => 3,
        }
    }
}

/// Severity tables tuned for 28-32 px images.
const GAUSS_SIGMA: [f64; 5] = [0.04, 0.06, 0.08, 0.09, 0.10];
const SHOT_LAMBDA: [f64; 5] = [500.0, 250.0, 100.0, 75.0, 50.0];
const IMPULSE_P: [f64; 5] = [0.01, 0.02, 0.03, 0.05, 0.07];
const SPECKLE_SIGMA: [f64; 5] = [0.04, 0.06, 0.08, 0.09, 0.10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// 1..=5
    pub severity: usize,
    pub seed: u64,
}

/// Additive Gaussian noise, clipped to `[0, 1]`.
pub fn gauss_noise(img: &Tensor, sigma: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(
        img.shape(),
        img.data()
            .iter()
            .map(|&v| {
                let z: f64 = StandardNormal.sample(rng);
                (v + sigma * z).clamp(0.0, 1.0)
            })
            .collect(),
    )
    .expect("same shape")
}

/// Poisson photon noise: `Poisson(v * lambda) / lambda`, clipped.
pub fn shot_noise(img: &Tensor, lambda: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(
        img.shape(),
        img.data()
            .iter()
            .map(|&v| {
                let rate = (v * lambda).max(0.0);
                let sample = if rate > 0.0 {
                    Poisson::new(rate).expect("positive rate").sample(rng)
                } else {
                    0.0
                };
                (sample / lambda).clamp(0.0, 1.0)
            })
            .collect(),
    )
    .expect("same shape")
}

/// Salt-and-pepper: with probability `p`, a pixel becomes 0 or 1.
pub fn salt_pepper(img: &Tensor, p: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(
        img.shape(),
        img.data()
            .iter()
            .map(|&v| {
                if p > 0.0 && rng.gen::<f64>() < p {
                    if rng.gen::<bool>() {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    v
                }
            })
            .collect(),
    )
    .expect("same shape")
}

/// Multiplicative noise: `v * (1 + N(0, sigma))`, clipped.
pub fn speckle_noise(img: &Tensor, sigma: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(
        img.shape(),
        img.data()
            .iter()
            .map(|&v| {
                let z: f64 = StandardNormal.sample(rng);
                (v * (1.0 + sigma * z)).clamp(0.0, 1.0)
            })
            .collect(),
    )
    .expect("same shape")
}

/// Corrupt one image. `index` keys the RNG substream so a dataset's images
/// corrupt independently but reproducibly.
pub fn corrupt_indexed(img: &Tensor, spec: &CorruptionSpec, index: u64) -> Result<Tensor> {
    if !(1..=5).contains(&spec.severity) {
        return Err(Error::invalid(format!(
            "corruption severity {} outside 1..=5",
            spec.severity
        )));
    }
    let sub = (spec.kind.id() << 56) | ((spec.severity as u64) << 48) | index;
    let mut rng = stream(spec.seed, Domain::Corruption, sub);
    let s = spec.severity - 1;
    Ok(match spec.kind {
        CorruptionKind::GaussNoise => gauss_noise(img, GAUSS_SIGMA[s], &mut rng),
        CorruptionKind::ShotNoise => shot_noise(img, SHOT_LAMBDA[s], &mut rng),
        CorruptionKind::ImpulseNoise => salt_pepper(img, IMPULSE_P[s], &mut rng),
        CorruptionKind::SpeckleNoise => speckle_noise(img, SPECKLE_SIGMA[s], &mut rng),
    })
}

/// Corrupt one image with substream index 0.
pub fn corrupt(img: &Tensor, spec: &CorruptionSpec) -> Result<Tensor> {
    corrupt_indexed(img, spec, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = stream(seed, Domain::SynthData, 0);
        Tensor::from_fn(&[1, 1, 10, 10], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn shift_identity_and_bright_pixel() {
        let img = test_image(1);
        let same = integer_shift(&img, &ShiftSpec { dx: 0, dy: 0, fill: 0.0 }).unwrap();
        assert_eq!(same.data(), img.data());

        let mut single = Tensor::zeros(&[1, 1, 10, 10]);
        single.data_mut()[5 * 10 + 5] = 1.0;
        let moved = integer_shift(&single, &ShiftSpec { dx: 2, dy: 2, fill: 0.0 }).unwrap();
        assert_eq!(moved.data()[7 * 10 + 7], 1.0);
        assert_eq!(moved.data().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn shift_then_unshift_restores_interior() {
        let img = test_image(2);
        let fwd = integer_shift(&img, &ShiftSpec { dx: 1, dy: 1, fill: 0.0 }).unwrap();
        let back = integer_shift(&fwd, &ShiftSpec { dx: -1, dy: -1, fill: 0.0 }).unwrap();
        for y in 0..9 {
            for x in 0..9 {
                assert_eq!(back.data()[y * 10 + x], img.data()[y * 10 + x]);
            }
        }
    }

    #[test]
    fn shift_composition_on_interior() {
        let img = test_image(3);
        let a = integer_shift(&img, &ShiftSpec { dx: 1, dy: 2, fill: 0.0 }).unwrap();
        let ab = integer_shift(&a, &ShiftSpec { dx: 2, dy: 1, fill: 0.0 }).unwrap();
        let direct = integer_shift(&img, &ShiftSpec { dx: 3, dy: 3, fill: 0.0 }).unwrap();
        for y in 3..10 {
            for x in 3..10 {
                assert_eq!(ab.data()[y * 10 + x], direct.data()[y * 10 + x]);
            }
        }
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = test_image(4);
        let same = bilinear_resize(&img, 10, 10).unwrap();
        assert_eq!(same.data(), img.data());
        let c = Tensor::full(&[1, 1, 5, 7], 0.42);
        for &(h, w) in &[(3, 3), (9, 11), (1, 1)] {
            let r = bilinear_resize(&c, h, w).unwrap();
            for &v in r.data() {
                assert!((v - 0.42).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resize_2x2_to_4x4_matches_hand_computed_grid() {
        let (a, b, c, d) = (1.0, 2.0, 3.0, 4.0);
        let img = Tensor::new(&[1, 1, 2, 2], vec![a, b, c, d]).unwrap();
        let out = bilinear_resize(&img, 4, 4).unwrap();
        // align-corners-false: sample points map to source offsets
        // [-0.25, 0.25, 0.75, 1.25] -> edge-clamped weights
        let wr = [(1.0, 0.0), (0.75, 0.25), (0.25, 0.75), (0.0, 1.0)];
        for i in 0..4 {
            for j in 0..4 {
                let expect = wr[i].0 * (wr[j].0 * a + wr[j].1 * b)
                    + wr[i].1 * (wr[j].0 * c + wr[j].1 * d);
                let got = out.data()[i * 4 + j];
                assert!((got - expect).abs() < 1e-12, "({i},{j}): {got} vs {expect}");
            }
        }
    }

    #[test]
    fn embed_identity_border_and_sum() {
        let img = test_image(5);
        let same = embed_canvas(&img, 10, 10, 0, 0).unwrap();
        assert_eq!(same.data(), img.data());

        let small = bilinear_resize(&img, 4, 4).unwrap();
        let emb = embed_canvas(&small, 10, 10, 3, 3).unwrap();
        for x in 0..10 {
            assert_eq!(emb.data()[x], 0.0);
            assert_eq!(emb.data()[9 * 10 + x], 0.0);
        }
        let sum_small: f64 = small.data().iter().sum();
        let sum_emb: f64 = emb.data().iter().sum();
        assert!((sum_small - sum_emb).abs() < 1e-12);

        assert!(embed_canvas(&img, 8, 8, 0, 0).is_err());
    }

    #[test]
    fn warp_zero_is_identity_and_integer_matches_shift() {
        let img = test_image(6);
        let w0 = warp_translate(&img, 0.0, 0.0);
        assert_eq!(w0.data(), img.data());

        for &(tx, ty) in &[(1.0, 0.0), (2.0, 3.0), (-1.0, 2.0), (-3.0, -2.0)] {
            let warped = warp_translate(&img, tx, ty);
            let shifted = integer_shift(
                &img,
                &ShiftSpec { dx: tx as isize, dy: ty as isize, fill: 0.0 },
            )
            .unwrap();
            assert_eq!(warped.data(), shifted.data(), "offset ({tx},{ty})");
        }
    }

    #[test]
    fn warp_gradients_match_finite_differences() {
        let img = test_image(7);
        let dy_seed: Vec<f64> = (0..100).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect();
        let loss_at = |tx: f64, ty: f64| -> f64 {
            warp_translate(&img, tx, ty)
                .data()
                .iter()
                .zip(&dy_seed)
                .map(|(a, b)| a * b)
                .sum()
        };
        let (tx0, ty0) = (0.3, -0.7);
        let mut tape = Tape::new();
        let x = tape.leaf(img.clone());
        let tx = tape.leaf(Tensor::scalar(tx0).with_requires_grad());
        let ty = tape.leaf(Tensor::scalar(ty0).with_requires_grad());
        let out = tape.translate_warp(x, tx, ty).unwrap();
        tape.backward_seeded(out, &dy_seed).unwrap();
        let h = 1e-6;
        let fdx = (loss_at(tx0 + h, ty0) - loss_at(tx0 - h, ty0)) / (2.0 * h);
        let fdy = (loss_at(tx0, ty0 + h) - loss_at(tx0, ty0 - h)) / (2.0 * h);
        let gx = tape.grad(tx).unwrap()[0];
        let gy = tape.grad(ty).unwrap()[0];
        assert!((gx - fdx).abs() / gx.abs().max(fdx.abs()).max(1e-8) < 1e-5, "{gx} vs {fdx}");
        assert!((gy - fdy).abs() / gy.abs().max(fdy.abs()).max(1e-8) < 1e-5, "{gy} vs {fdy}");
    }

    #[test]
    fn warp_image_gradient_matches_finite_differences() {
        let img = test_image(12);
        let dy_seed: Vec<f64> = (0..100).map(|i| ((i * 13 % 11) as f64 - 5.0) / 5.0).collect();
        let (tx0, ty0) = (0.3, 0.4);
        let mut tape = Tape::new();
        let x = tape.leaf(img.clone().with_requires_grad());
        let tx = tape.leaf(Tensor::scalar(tx0));
        let ty = tape.leaf(Tensor::scalar(ty0));
        let out = tape.translate_warp(x, tx, ty).unwrap();
        tape.backward_seeded(out, &dy_seed).unwrap();
        let g = tape.grad(x).unwrap().to_vec();
        let h = 1e-6;
        for &i in &[0usize, 17, 55, 99] {
            let mut plus = img.clone();
            plus.data_mut()[i] += h;
            let mut minus = img.clone();
            minus.data_mut()[i] -= h;
            let lp: f64 = warp_translate(&plus, tx0, ty0).data().iter().zip(&dy_seed).map(|(a, b)| a * b).sum();
            let lm: f64 = warp_translate(&minus, tx0, ty0).data().iter().zip(&dy_seed).map(|(a, b)| a * b).sum();
            let fd = (lp - lm) / (2.0 * h);
            assert!((g[i] - fd).abs() < 1e-6, "pixel {i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn sequences_start_clean_and_hit_endpoints() {
        let img = test_image(8);
        for kind in PerturbKind::ALL {
            let seq = make_sequence(&img, kind, 5).unwrap();
            assert_eq!(seq.frames.len(), 5);
            assert_eq!(seq.frames[0].data(), img.data(), "{} frame 1 not clean", kind.name());
        }
        // v=2 translate: [clean, 4-px diagonal shift]
        let seq = make_sequence(&img, PerturbKind::Translate, 2).unwrap();
        let expect = integer_shift(&img, &ShiftSpec { dx: 4, dy: 4, fill: 0.0 }).unwrap();
        assert_eq!(seq.frames[1].data(), expect.data());
        assert!(make_sequence(&img, PerturbKind::Translate, 1).is_err());
    }

    #[test]
    fn scale_frame_matches_resize_embed_composition() {
        let img = test_image(9);
        let seq = make_sequence(&img, PerturbKind::Scale, 4).unwrap();
        // frame 4: severity 1.0 -> scale 0.7 of a 10 px image -> 7 px
        let small = bilinear_resize(&img, 7, 7).unwrap();
        let expect = embed_canvas(&small, 10, 10, 1, 1).unwrap();
        assert_eq!(seq.frames[3].data(), expect.data());
    }

    #[test]
    fn corruption_is_seeded_clipped_and_monotone_in_severity() {
        let img = test_image(10);
        for kind in CorruptionKind::ALL {
            let spec = CorruptionSpec { kind, severity: 3, seed: 5 };
            let a = corrupt(&img, &spec).unwrap();
            let b = corrupt(&img, &spec).unwrap();
            assert_eq!(a.data(), b.data(), "{} not reproducible", kind.name());
            assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        // severity-5 gauss noisier than severity-1, averaged over 100 images
        let mse = |severity: usize| -> f64 {
            let mut total = 0.0;
            for i in 0..100 {
                let img = test_image(100 + i);
                let spec = CorruptionSpec { kind: CorruptionKind::GaussNoise, severity, seed: 9 };
                let c = corrupt_indexed(&img, &spec, i).unwrap();
                total += img
                    .data()
                    .iter()
                    .zip(c.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
            }
            total / 100.0
        };
        assert!(mse(5) > mse(1));
    }

    #[test]
    fn impulse_probability_zero_is_identity() {
        let img = test_image(11);
        let mut rng = stream(0, Domain::Corruption, 0);
        let out = salt_pepper(&img, 0.0, &mut rng);
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn corruption_rejects_bad_severity() {
        let img = test_image(13);
        for severity in [0usize, 6] {
            let spec = CorruptionSpec { kind: CorruptionKind::GaussNoise, severity, seed: 0 };
            assert!(corrupt(&img, &spec).is_err());
        }
    }
}
