//! Fourier diagnostics of intermediate feature maps.
//!
//! A hand-rolled 2-D DFT (iterative radix-2 for power-of-two extents,
//! direct evaluation otherwise) powers per-depth spectral energy maps and
//! the high-frequency energy ratio that motivates depth-adaptive blurring.
//! Learned blur kernels render to 16-bit PGM galleries.

use std::f64::consts::PI;
use std::fs;
use std::io::Write as IoWrite;
use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layers::{gaussian_kernel, GaussianKernel};
use crate::net::{LayerSpec, Model};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// 1-D / 2-D DFT
// ---------------------------------------------------------------------------

fn dft_direct(input: &[Complex64], inverse: bool) -> Vec<Complex64> {
    let n = input.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    for (k, o) in out.iter_mut().enumerate() {
        let mut acc = Complex64::new(0.0, 0.0);
        for (j, &v) in input.iter().enumerate() {
            let ang = sign * 2.0 * PI * (j * k % n) as f64 / n as f64;
            acc += v * Complex64::new(ang.cos(), ang.sin());
        }
        *o = acc;
    }
    if inverse {
        for v in out.iter_mut() {
            *v /= n as f64;
        }
    }
    out
}

fn fft_radix2(input: &[Complex64], inverse: bool) -> Vec<Complex64> {
    let n = input.len();
    debug_assert!(n.is_power_of_two());
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    // bit-reversal permutation
    let bits = n.trailing_zeros();
    for (i, &v) in input.iter().enumerate() {
        let r = (i as u32).reverse_bits() >> (32 - bits);
        buf[r as usize] = v;
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * PI / len as f64;
        let wlen = Complex64::new(ang.cos(), ang.sin());
        for start in (0..n).step_by(len) {
            let mut w = Complex64::new(1.0, 0.0);
            for j in 0..len / 2 {
                let a = buf[start + j];
                let b = buf[start + j + len / 2] * w;
                buf[start + j] = a + b;
                buf[start + j + len / 2] = a - b;
                w *= wlen;
            }
        }
        len <<= 1;
    }
    if inverse {
        for v in buf.iter_mut() {
            *v /= n as f64;
        }
    }
    buf
}

fn dft_1d(input: &[Complex64], inverse: bool) -> Vec<Complex64> {
    if input.len() > 1 && input.len().is_power_of_two() {
        fft_radix2(input, inverse)
    } else {
        dft_direct(input, inverse)
    }
}

fn transform_2d(data: &[Complex64], h: usize, w: usize, inverse: bool) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    // rows
    for i in 0..h {
        let row = dft_1d(&data[i * w..(i + 1) * w], inverse);
        out[i * w..(i + 1) * w].copy_from_slice(&row);
    }
    // columns
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            col[i] = out[i * w + j];
        }
        let t = dft_1d(&col, inverse);
        for i in 0..h {
            out[i * w + j] = t[i];
        }
    }
    out
}

/// Unnormalized forward 2-D DFT of a real `h x w` matrix.
pub fn dft2(x: &[f64], h: usize, w: usize) -> Result<Vec<Complex64>> {
    if x.len() != h * w {
        return Err(Error::shape(format!(
            "dft2: {h}x{w} needs {} values, got {}",
            h * w,
            x.len()
        )));
    }
    let input: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    Ok(transform_2d(&input, h, w, false))
}

/// Inverse 2-D DFT (scaled by `1/(h*w)`), returning complex values.
pub fn idft2(x: &[Complex64], h: usize, w: usize) -> Result<Vec<Complex64>> {
    if x.len() != h * w {
        return Err(Error::shape(format!(
            "idft2: {h}x{w} needs {} values, got {}",
            h * w,
            x.len()
        )));
    }
    Ok(transform_2d(x, h, w, true))
}

// ---------------------------------------------------------------------------
// Spectrum maps
// ---------------------------------------------------------------------------

/// Centered spectral energy map at one depth level, normalized to unit sum.
#[derive(Debug, Clone)]
pub struct SpectrumMap {
    pub depth_level: usize,
    pub h: usize,
    pub w: usize,
    /// `h*w` nonnegative entries summing to 1, DC at `(h/2, w/2)`.
    pub energy: Vec<f64>,
    pub n_samples: usize,
}

/// Move the DC bin from (0, 0) to the center `(h/2, w/2)`.
fn fft_shift(map: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            out[((i + h / 2) % h) * w + (j + w / 2) % w] = map[i * w + j];
        }
    }
    out
}

/// Average |DFT|^2 of the feature maps entering DS layer `depth_level` over
/// the first `n` images, across channels, centered and normalized.
///
/// `images` must already be normalized model input.
pub fn energy_map(model: &Model, images: &Tensor, depth_level: usize, n: usize) -> Result<SpectrumMap> {
    let (total, c, hi, wi) = images.dims4()?;
    let n = n.min(total);
    if n == 0 {
        return Err(Error::invalid("energy_map needs at least one image".to_string()));
    }
    let chw = c * hi * wi;
    const CHUNK: usize = 16;
    let chunks: Vec<(usize, usize)> = (0..n).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(n))).collect();
    let partials: Vec<Result<(Vec<f64>, usize, usize)>> = chunks
        .par_iter()
        .map(|&(s, e)| {
            let batch = Tensor::new(&[e - s, c, hi, wi], images.data()[s * chw..e * chw].to_vec())?;
            let feats = model.capture_depth_input(&batch, depth_level)?;
            let (bn, fc, fh, fw) = feats.dims4()?;
            let mut acc = vec![0.0; fh * fw];
            for ni in 0..bn {
                for ci in 0..fc {
                    let spec = dft2(feats.plane(ni, ci, fc, fh * fw), fh, fw)?;
                    for (a, v) in acc.iter_mut().zip(&spec) {
                        *a += v.norm_sqr();
                    }
                }
            }
            Ok((acc, fh, fw))
        })
        .collect();
    let mut acc: Option<Vec<f64>> = None;
    let (mut fh, mut fw) = (0, 0);
    for p in partials {
        let (part, h, w) = p?;
        fh = h;
        fw = w;
        match acc.as_mut() {
            Some(a) => {
                for (x, y) in a.iter_mut().zip(&part) {
                    *x += y;
                }
            }
            None => acc = Some(part),
        }
    }
    let acc = acc.expect("at least one chunk");
    let mut energy = fft_shift(&acc, fh, fw);
    let total_energy: f64 = energy.iter().sum();
    if total_energy > 0.0 {
        for v in energy.iter_mut() {
            *v /= total_energy;
        }
    } else {
        // degenerate constant (zero) features: all mass at DC
        energy[(fh / 2) * fw + fw / 2] = 1.0;
    }
    Ok(SpectrumMap {
        depth_level,
        h: fh,
        w: fw,
        energy,
        n_samples: n,
    })
}

/// Fraction of spectral energy outside the centered `h/2 x w/2` block.
pub fn hf_ratio(map: &SpectrumMap) -> f64 {
    let (h, w) = (map.h, map.w);
    let (bh, bw) = (h / 2, w / 2);
    let (sy, sx) = ((h - bh) / 2, (w - bw) / 2);
    let mut inside = 0.0;
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            let v = map.energy[i * w + j];
            total += v;
            if (sy..sy + bh).contains(&i) && (sx..sx + bw).contains(&j) {
                inside += v;
            }
        }
    }
    if total == 0.0 {
        0.0
    } else {
        1.0 - inside / total
    }
}

// ---------------------------------------------------------------------------
// Kernel gallery
// ---------------------------------------------------------------------------

/// The learned blur kernel of every depth level, from the current sigmas.
pub fn kernel_gallery(model: &Model) -> Result<Vec<(usize, GaussianKernel)>> {
    let sigma_idx = model.sigma_param_indices();
    let mut out = Vec::new();
    let mut at = 0usize;
    for l in &model.graph.layers {
        if let LayerSpec::DabPool { m, depth_level, .. } = l {
            let sigma = model.params[sigma_idx[at]].data()[0];
            out.push((*depth_level, gaussian_kernel(sigma, *m)?));
            at += 1;
        }
    }
    Ok(out)
}

/// Binary 16-bit PGM (P5, maxval 65535, big-endian samples) of values
/// already scaled to `[0, 1]`.
pub fn write_pgm16(path: &Path, h: usize, w: usize, values: &[f64]) -> Result<()> {
    if values.len() != h * w {
        return Err(Error::shape(format!(
            "pgm: {h}x{w} needs {} values, got {}",
            h * w,
            values.len()
        )));
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write!(f, "P5\n{w} {h}\n65535\n")?;
    for &v in values {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        f.write_all(&q.to_be_bytes())?;
    }
    f.flush()?;
    Ok(())
}

/// Log-scaled display mapping of a spectrum: `ln(1 + e/max * 1e6)` then
/// normalized to `[0, 1]`.
pub fn log_display(energy: &[f64]) -> Vec<f64> {
    let max = energy.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return vec![0.0; energy.len()];
    }
    let scaled: Vec<f64> = energy.iter().map(|&v| (1.0 + v / max * 1e6).ln()).collect();
    let smax = scaled.iter().cloned().fold(0.0f64, f64::max);
    scaled.iter().map(|&v| v / smax).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_matrix(h: usize, w: usize, seed: u64) -> Vec<f64> {
        let mut rng = crate::rng::stream(seed, crate::rng::Domain::WeightInit, 3);
        (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn constant_matrix_concentrates_at_dc() {
        let c = 0.7;
        let spec = dft2(&vec![c; 64], 8, 8).unwrap();
        assert!((spec[0].re - c * 64.0).abs() < 1e-10);
        assert!(spec[0].im.abs() < 1e-10);
        for v in &spec[1..] {
            assert!(v.norm() < 1e-10);
        }
    }

    #[test]
    fn unit_impulse_has_flat_spectrum() {
        let mut x = vec![0.0; 64];
        x[0] = 1.0;
        let spec = dft2(&x, 8, 8).unwrap();
        for v in &spec {
            assert!((v.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn roundtrip_and_parseval() {
        for &(h, w) in &[(8usize, 8usize), (12, 10), (32, 32), (7, 9)] {
            let x = rand_matrix(h, w, (h * 100 + w) as u64);
            let spec = dft2(&x, h, w).unwrap();
            let back = idft2(&spec, h, w).unwrap();
            for (a, b) in x.iter().zip(&back) {
                assert!((a - b.re).abs() < 1e-10, "{h}x{w} roundtrip");
                assert!(b.im.abs() < 1e-10);
            }
            let spatial: f64 = x.iter().map(|v| v * v).sum();
            let spectral: f64 = spec.iter().map(|v| v.norm_sqr()).sum::<f64>() / (h * w) as f64;
            assert!((spatial - spectral).abs() < 1e-9, "{h}x{w} parseval");
        }
    }

    #[test]
    fn fast_path_matches_direct_oracle() {
        // independent naive double-loop oracle
        let oracle = |x: &[f64], h: usize, w: usize| -> Vec<Complex64> {
            let mut out = vec![Complex64::new(0.0, 0.0); h * w];
            for ku in 0..h {
                for kv in 0..w {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for i in 0..h {
                        for j in 0..w {
                            let ang = -2.0 * PI
                                * (ku as f64 * i as f64 / h as f64
                                    + kv as f64 * j as f64 / w as f64);
                            acc += x[i * w + j] * Complex64::new(ang.cos(), ang.sin());
                        }
                    }
                    out[ku * w + kv] = acc;
                }
            }
            out
        };
        for &(h, w) in &[(16usize, 16usize), (8, 32)] {
            let x = rand_matrix(h, w, 9);
            let fast = dft2(&x, h, w).unwrap();
            let direct = oracle(&x, h, w);
            for (a, b) in fast.iter().zip(&direct) {
                assert!((a - b).norm() < 1e-9, "{h}x{w}");
            }
        }
    }

    #[test]
    fn hf_ratio_dc_and_flat() {
        let (h, w) = (8usize, 8usize);
        let mut dc = vec![0.0; h * w];
        dc[(h / 2) * w + w / 2] = 1.0;
        let m = SpectrumMap { depth_level: 1, h, w, energy: dc, n_samples: 1 };
        assert_eq!(hf_ratio(&m), 0.0);

        let flat = SpectrumMap {
            depth_level: 1,
            h,
            w,
            energy: vec![1.0 / 64.0; 64],
            n_samples: 1,
        };
        assert_eq!(hf_ratio(&flat), 0.75);
    }

    #[test]
    fn energy_map_is_normalized_and_zero_model_is_dc_only() {
        use crate::net::{build_toy_cnn, Model, ToyCnnConfig};
        let graph = build_toy_cnn(&ToyCnnConfig::default()).unwrap();
        let mut model = Model::init(graph, (1, 28, 28), 3).unwrap();
        let images = Tensor::from_fn(&[4, 1, 28, 28], |i| ((i * 37) % 11) as f64 / 11.0);
        let map = energy_map(&model, &images, 1, 4).unwrap();
        assert!((map.energy.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(map.energy.iter().all(|&v| v >= 0.0));

        for p in model.params.iter_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let map0 = energy_map(&model, &images, 1, 4).unwrap();
        assert_eq!(hf_ratio(&map0), 0.0);
    }

    #[test]
    fn kernel_gallery_centers_decrease_with_depth() {
        use crate::net::{build_toy_cnn, rewrite_antialias, Activation, Model, ToyCnnConfig};
        let graph = build_toy_cnn(&ToyCnnConfig::default()).unwrap();
        let graph = rewrite_antialias(&graph, 3, Activation::AaRelu).unwrap();
        let model = Model::init(graph, (1, 28, 28), 5).unwrap();
        let gallery = kernel_gallery(&model).unwrap();
        assert_eq!(gallery.len(), 3);
        let centers: Vec<f64> = gallery.iter().map(|(_, k)| k.at(0, 0)).collect();
        assert!(centers[0] > centers[1] && centers[1] > centers[2]);
        for (d, k) in &gallery {
            assert!(*d >= 1 && *d <= 3);
            assert_eq!(k.size(), 3);
        }
    }

    #[test]
    fn pgm_writes_expected_header_and_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.pgm");
        write_pgm16(&p, 2, 3, &[0.0, 0.5, 1.0, 0.25, 0.75, 1.0]).unwrap();
        let bytes = fs::read(&p).unwrap();
        let header = b"P5\n3 2\n65535\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 12);
        // second sample: 0.5 -> 32768 big-endian
        let v = u16::from_be_bytes([bytes[header.len() + 2], bytes[header.len() + 3]]);
        assert_eq!(v, (0.5f64 * 65535.0).round() as u16);
    }
}
