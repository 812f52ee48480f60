//! Dataset ingestion and batching.
//!
//! Loads MNIST IDX and CIFAR-10 binary files from disk, or generates a
//! deterministic synthetic 10-class digit-like set when no files are
//! available. Images are `[N, C, H, W]` f64 in `[0, 1]` until zero-centre
//! normalization subtracts the training channel means.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{stream, Domain};
use crate::tensor::Tensor;

/// An image classification dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[N, C, H, W]`, values in `[0, 1]` before normalization.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Channel means that have been subtracted, once normalization ran.
    pub applied_means: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let (n, _, _, _) = images.dims4()?;
        if labels.len() != n {
            return Err(Error::shape(format!(
                "{n} images but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            applied_means: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        let (_, c, h, w) = self.images.dims4().expect("dataset images are 4-D");
        (c, h, w)
    }

    /// One image as a `[1, C, H, W]` tensor.
    pub fn image(&self, i: usize) -> Tensor {
        let (_, c, h, w) = self.images.dims4().expect("dataset images are 4-D");
        let chw = c * h * w;
        Tensor::new(&[1, c, h, w], self.images.data()[i * chw..(i + 1) * chw].to_vec())
            .expect("slice length matches")
    }

    /// Gather images and labels at `indices` into one batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let (_, c, h, w) = self.images.dims4().expect("dataset images are 4-D");
        let chw = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * chw);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * chw..(i + 1) * chw]);
        }
        let images = Tensor::new(&[indices.len(), c, h, w], data).expect("consistent");
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (images, labels)
    }

    /// Current per-channel means.
    pub fn channel_means(&self) -> Vec<f64> {
        let (n, c, h, w) = self.images.dims4().expect("dataset images are 4-D");
        let hw = h * w;
        let mut means = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                means[ci] += self.images.plane(ni, ci, c, hw).iter().sum::<f64>();
            }
        }
        for m in means.iter_mut() {
            *m /= (n * hw) as f64;
        }
        means
    }
}

/// Subtract this dataset's own channel means (training split). Stores the
/// means so a second call is a no-op; returns what was subtracted.
pub fn zero_centre(ds: &mut Dataset) -> Vec<f64> {
    if let Some(m) = &ds.applied_means {
        return m.clone();
    }
    let means = ds.channel_means();
    subtract_means(ds, &means);
    ds.applied_means = Some(means.clone());
    means
}

/// Subtract externally supplied means (test split normalized with the
/// training means). No-op if the dataset is already normalized.
pub fn zero_centre_with(ds: &mut Dataset, means: &[f64]) {
    if ds.applied_means.is_some() {
        return;
    }
    subtract_means(ds, means);
    ds.applied_means = Some(means.to_vec());
}

fn subtract_means(ds: &mut Dataset, means: &[f64]) {
    let (n, c, h, w) = ds.images.dims4().expect("dataset images are 4-D");
    assert_eq!(means.len(), c, "one mean per channel");
    let hw = h * w;
    let data = ds.images.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * hw;
            for v in &mut data[off..off + hw] {
                *v -= means[ci];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// MNIST IDX
// ---------------------------------------------------------------------------

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(format!("IDX file truncated reading {what}")))
}

/// Parse one IDX image file + one IDX label file into a dataset.
pub fn load_idx_pair(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let ib = fs::read(images_path)?;
    let lb = fs::read(labels_path)?;

    let magic = read_u32_be(&ib, 0, "image magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::format(format!(
            "bad IDX image magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}"
        )));
    }
    let n = read_u32_be(&ib, 4, "image count")? as usize;
    let h = read_u32_be(&ib, 8, "rows")? as usize;
    let w = read_u32_be(&ib, 12, "cols")? as usize;
    let pixels = ib
        .get(16..16 + n * h * w)
        .ok_or_else(|| Error::format("IDX image file truncated in pixel data".to_string()))?;

    let lmagic = read_u32_be(&lb, 0, "label magic")?;
    if lmagic != IDX_LABEL_MAGIC {
        return Err(Error::format(format!(
            "bad IDX label magic {lmagic:#010x}, expected {IDX_LABEL_MAGIC:#010x}"
        )));
    }
    let ln = read_u32_be(&lb, 4, "label count")? as usize;
    if ln != n {
        return Err(Error::format(format!(
            "IDX count mismatch: {n} images vs {ln} labels"
        )));
    }
    let labels_raw = lb
        .get(8..8 + n)
        .ok_or_else(|| Error::format("IDX label file truncated".to_string()))?;

    let data: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let images = Tensor::new(&[n, 1, h, w], data)?;
    let labels: Vec<usize> = labels_raw.iter().map(|&b| b as usize).collect();
    Dataset::new(images, labels, 10)
}

/// Load the standard MNIST train/test pairs from a directory.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let find = |stem: &str, kind: &str| -> Result<std::path::PathBuf> {
        for name in [format!("{stem}-{kind}"), format!("{stem}.{kind}")] {
            let p = dir.join(&name);
            if p.exists() {
                return Ok(p);
            }
        }
        Err(Error::format(format!(
            "MNIST file {stem}-{kind} not found in {}",
            dir.display()
        )))
    };
    let train = load_idx_pair(
        &find("train-images", "idx3-ubyte")?,
        &find("train-labels", "idx1-ubyte")?,
    )?;
    let test = load_idx_pair(
        &find("t10k-images", "idx3-ubyte")?,
        &find("t10k-labels", "idx1-ubyte")?,
    )?;
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary
// ---------------------------------------------------------------------------

const CIFAR_RECORD: usize = 3073; // 1 label byte + 3 * 32 * 32 pixels

/// Parse one CIFAR-10 binary batch file (3073-byte records, channel-planar
/// R,G,B).
pub fn load_cifar10_file(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::format(format!(
            "CIFAR-10 file length {} is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut data = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for r in 0..n {
        let rec = &bytes[r * CIFAR_RECORD..(r + 1) * CIFAR_RECORD];
        if rec[0] > 9 {
            return Err(Error::format(format!(
                "CIFAR-10 record {r} has label byte {} > 9",
                rec[0]
            )));
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    let images = Tensor::new(&[n, 3, 32, 32], data)?;
    Dataset::new(images, labels, 10)
}

/// Load the five CIFAR-10 training batches plus the test batch.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 1..=5 {
        let ds = load_cifar10_file(&dir.join(format!("data_batch_{i}.bin")))?;
        images.extend_from_slice(ds.images.data());
        labels.extend_from_slice(&ds.labels);
    }
    let n = labels.len();
    let train = Dataset::new(Tensor::new(&[n, 3, 32, 32], images)?, labels, 10)?;
    let test = load_cifar10_file(&dir.join("test_batch.bin"))?;
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// Synthetic digits
// ---------------------------------------------------------------------------

/// Deterministic 10-class synthetic digit-like set at 28x28.
///
/// Classes are distinct glyphs (rings, bars, crosses, stripe textures);
/// each sample gets a small position jitter, intensity scale, and pixel
/// noise. The striped classes carry deliberate high-frequency content so
/// that aliasing under down-sampling is observable. `part` separates e.g.
/// train/test streams drawn from the same seed.
pub fn synth_digits(n: usize, seed: u64, part: u64) -> Dataset {
    let (h, w) = (28usize, 28usize);
    let mut data = vec![0.0; n * h * w];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 10;
        labels.push(class);
        let mut rng = stream(seed, Domain::SynthData, (part << 40) | i as u64);
        let dx = rng.gen_range(-2i32..=2) as f64;
        let dy = rng.gen_range(-2i32..=2) as f64;
        let amp = rng.gen_range(0.75..1.0);
        let size = rng.gen_range(0.85..1.15);
        let canvas = &mut data[i * h * w..(i + 1) * h * w];
        draw_glyph(canvas, h, w, class, 13.5 + dx, 13.5 + dy, size, amp);
        for v in canvas.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = (*v + 0.05 * z).clamp(0.0, 1.0);
        }
    }
    Dataset::new(Tensor::new(&[n, 1, h, w], data).expect("consistent"), labels, 10)
        .expect("valid labels")
}

fn draw_glyph(canvas: &mut [f64], h: usize, w: usize, class: usize, cx: f64, cy: f64, size: f64, amp: f64) {
    let mut put = |x: f64, y: f64, v: f64| {
        let (xi, yi) = (x.round() as isize, y.round() as isize);
        if xi >= 0 && yi >= 0 && (xi as usize) < w && (yi as usize) < h {
            let p = &mut canvas[(yi as usize) * w + xi as usize];
            *p = p.max(v);
        }
    };
    let steps = 160;
    let mut segment = |x0: f64, y0: f64, x1: f64, y1: f64| {
        for t in 0..=steps {
            let t = t as f64 / steps as f64;
            let x = x0 + (x1 - x0) * t;
            let y = y0 + (y1 - y0) * t;
            // 2-pixel-thick stroke
            put(x, y, amp);
            put(x + 0.5, y, amp);
            put(x, y + 0.5, amp);
        }
    };
    let r = 8.0 * size;
    match class {
        0 => {
            // ring
            for t in 0..steps {
                let a = 2.0 * std::f64::consts::PI * t as f64 / steps as f64;
                put(cx + r * a.cos(), cy + r * a.sin(), amp);
                put(cx + (r - 1.0) * a.cos(), cy + (r - 1.0) * a.sin(), amp);
            }
        }
        1 => segment(cx, cy - r, cx, cy + r),
        2 => segment(cx - r, cy, cx + r, cy),
        3 => {
            segment(cx, cy - r, cx, cy + r);
            segment(cx - r, cy, cx + r, cy);
        }
        4 => {
            segment(cx - r, cy - r, cx + r, cy + r);
            segment(cx - r, cy + r, cx + r, cy - r);
        }
        5 => {
            segment(cx - r, cy - r, cx + r, cy - r);
            segment(cx + r, cy - r, cx + r, cy + r);
            segment(cx + r, cy + r, cx - r, cy + r);
            segment(cx - r, cy + r, cx - r, cy - r);
        }
        6 => {
            // filled disk
            let rr = 0.6 * r;
            for yi in 0..h {
                for xi in 0..w {
                    let d2 = (xi as f64 - cx).powi(2) + (yi as f64 - cy).powi(2);
                    if d2 <= rr * rr {
                        canvas[yi * w + xi] = amp;
                    }
                }
            }
        }
        7 => segment(cx - r, cy + r, cx + r, cy - r),
        8 => {
            // vertical stripes, period 2: deliberately alias-prone
            texture(canvas, h, w, cx, cy, r, amp, true);
        }
        9 => {
            // horizontal stripes, period 2
            texture(canvas, h, w, cx, cy, r, amp, false);
        }
        _ => unreachable!("ten classes"),
    }
}

fn texture(canvas: &mut [f64], h: usize, w: usize, cx: f64, cy: f64, r: f64, amp: f64, vertical: bool) {
    for yi in 0..h {
        for xi in 0..w {
            let inside = (xi as f64 - cx).abs() <= r && (yi as f64 - cy).abs() <= r;
            if inside {
                let phase = if vertical { xi } else { yi };
                if phase % 2 == 0 {
                    canvas[yi * w + xi] = amp;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Subsetting and batching
// ---------------------------------------------------------------------------

/// Deterministic class-stratified sample of `n` items; per-class counts
/// differ by at most one unless a class runs out of members. With `n`
/// equal to the dataset size this is a permutation of the full set.
pub fn subset(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > ds.len() {
        return Err(Error::invalid(format!(
            "subset of {n} requested from {} items",
            ds.len()
        )));
    }
    let k = ds.num_classes;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    // fair share, then redistribute what missing classes cannot supply
    let mut want: Vec<usize> = (0..k).map(|c| (n / k) + usize::from(c < n % k)).collect();
    loop {
        let mut deficit = 0;
        for c in 0..k {
            if want[c] > by_class[c].len() {
                deficit += want[c] - by_class[c].len();
                want[c] = by_class[c].len();
            }
        }
        if deficit == 0 {
            break;
        }
        let mut progress = false;
        for c in 0..k {
            if deficit == 0 {
                break;
            }
            if want[c] < by_class[c].len() {
                want[c] += 1;
                deficit -= 1;
                progress = true;
            }
        }
        if !progress {
            return Err(Error::invalid("not enough samples to fill the subset".to_string()));
        }
    }
    let mut picked = Vec::with_capacity(n);
    for (c, members) in by_class.iter().enumerate() {
        let mut members = members.clone();
        let mut rng = stream(seed, Domain::Subset, c as u64);
        members.shuffle(&mut rng);
        picked.extend_from_slice(&members[..want[c]]);
    }
    let mut rng = stream(seed, Domain::Subset, u64::MAX);
    picked.shuffle(&mut rng);
    let (images, labels) = ds.gather(&picked);
    Ok(Dataset {
        images,
        labels,
        num_classes: ds.num_classes,
        applied_means: ds.applied_means.clone(),
    })
}

/// Shuffled mini-batches for one epoch, reproducible from `(seed, epoch)`.
pub fn batches(ds: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Batches<'_> {
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut rng = stream(seed, Domain::Shuffle, epoch);
    order.shuffle(&mut rng);
    Batches {
        ds,
        order,
        batch_size: batch_size.max(1),
        at: 0,
    }
}

pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    at: usize,
}

impl Iterator for Batches<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.at >= self.order.len() {
            return None;
        }
        let end = (self.at + self.batch_size).min(self.order.len());
        let batch = self.ds.gather(&self.order[self.at..end]);
        self.at = end;
        Some(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx_images(path: &Path, n: usize, h: usize, w: usize, pix: &[u8]) {
        let mut f = fs::File::create(path).unwrap();
        f.write_all(&IDX_IMAGE_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(n as u32).to_be_bytes()).unwrap();
        f.write_all(&(h as u32).to_be_bytes()).unwrap();
        f.write_all(&(w as u32).to_be_bytes()).unwrap();
        f.write_all(pix).unwrap();
    }

    fn write_idx_labels(path: &Path, labels: &[u8]) {
        let mut f = fs::File::create(path).unwrap();
        f.write_all(&IDX_LABEL_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(labels.len() as u32).to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
    }

    #[test]
    fn idx_roundtrip_and_double_load_equality() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("imgs");
        let lp = dir.path().join("labels");
        let pix: Vec<u8> = (0..3 * 4 * 4).map(|v| (v * 7 % 256) as u8).collect();
        write_idx_images(&ip, 3, 4, 4, &pix);
        write_idx_labels(&lp, &[1, 0, 9]);
        let a = load_idx_pair(&ip, &lp).unwrap();
        let b = load_idx_pair(&ip, &lp).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a.image_dims(), (1, 4, 4));
        assert_eq!(a.labels, vec![1, 0, 9]);
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.images.data()[0], pix[0] as f64 / 255.0);
        // first-image checksum stable across loads
        let sum = |d: &Dataset| d.image(0).data().iter().map(|v| v.to_bits() as u128).sum::<u128>();
        assert_eq!(sum(&a), sum(&b));
    }

    #[test]
    fn idx_rejects_bad_magic_truncation_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("imgs");
        let lp = dir.path().join("labels");
        write_idx_images(&ip, 2, 4, 4, &[0u8; 32]);
        write_idx_labels(&lp, &[0, 1]);

        let bad = dir.path().join("bad");
        fs::write(&bad, [0u8, 0, 8, 99, 0, 0, 0, 0]).unwrap();
        assert!(matches!(load_idx_pair(&bad, &lp), Err(Error::Format(_))));

        let short = dir.path().join("short");
        fs::write(&short, &fs::read(&ip).unwrap()[..20]).unwrap();
        assert!(matches!(load_idx_pair(&short, &lp), Err(Error::Format(_))));

        let lp3 = dir.path().join("labels3");
        write_idx_labels(&lp3, &[0, 1, 2]);
        assert!(matches!(load_idx_pair(&ip, &lp3), Err(Error::Format(_))));
    }

    #[test]
    fn cifar_parses_records_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("batch.bin");
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[0] = 3; // label of record 0
        bytes[1] = 200; // pixel (0,0) of channel R
        bytes[CIFAR_RECORD] = 9;
        fs::write(&p, &bytes).unwrap();
        let ds = load_cifar10_file(&p).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![3, 9]);
        assert_eq!(ds.image_dims(), (3, 32, 32));
        // record 0's first pixel byte is byte 1 of the file
        assert_eq!(ds.images.data()[0], 200.0 / 255.0);

        fs::write(dir.path().join("odd.bin"), vec![0u8; CIFAR_RECORD + 1]).unwrap();
        assert!(matches!(
            load_cifar10_file(&dir.path().join("odd.bin")),
            Err(Error::Format(_))
        ));

        let mut badlabel = vec![0u8; CIFAR_RECORD];
        badlabel[0] = 10;
        fs::write(dir.path().join("badlabel.bin"), &badlabel).unwrap();
        assert!(matches!(
            load_cifar10_file(&dir.path().join("badlabel.bin")),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn zero_centre_makes_training_means_zero_and_is_idempotent() {
        let mut ds = synth_digits(200, 3, 0);
        let before = ds.channel_means();
        assert!(before[0] > 0.01);
        let means = zero_centre(&mut ds);
        assert_eq!(means, before);
        for m in ds.channel_means() {
            assert!(m.abs() < 1e-10);
        }
        let snapshot = ds.images.data().to_vec();
        let again = zero_centre(&mut ds);
        assert_eq!(again, means);
        assert_eq!(ds.images.data(), &snapshot[..]);
    }

    #[test]
    fn constant_dataset_normalizes_to_zero() {
        let images = Tensor::full(&[4, 1, 3, 3], 0.6);
        let mut ds = Dataset::new(images, vec![0, 1, 2, 3], 10).unwrap();
        zero_centre(&mut ds);
        assert!(ds.images.data().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn test_set_uses_train_means_not_its_own() {
        // train mean A, test mean B: after normalizing with the train means
        // the test set's mean must be B - A, not zero
        let mut train = Dataset::new(Tensor::full(&[4, 1, 2, 2], 0.25), vec![0; 4], 10).unwrap();
        let mut test = Dataset::new(Tensor::full(&[4, 1, 2, 2], 0.75), vec![0; 4], 10).unwrap();
        let means = zero_centre(&mut train);
        zero_centre_with(&mut test, &means);
        let m = test.channel_means()[0];
        assert!((m - 0.5).abs() < 1e-12, "test mean after normalization: {m}");
    }

    #[test]
    fn subset_is_deterministic_and_stratified() {
        let ds = synth_digits(500, 11, 0);
        let a = subset(&ds, 100, 42).unwrap();
        let b = subset(&ds, 100, 42).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.images.data(), b.images.data());
        let mut counts = [0usize; 10];
        for &l in &a.labels {
            counts[l] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "counts {counts:?}");
        assert!(subset(&ds, 501, 42).is_err());
    }

    #[test]
    fn subset_of_everything_is_a_permutation() {
        let ds = synth_digits(50, 5, 0);
        let s = subset(&ds, 50, 9).unwrap();
        let mut a = s.labels.clone();
        let mut b = ds.labels.clone();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn batches_are_reproducible_and_cover_everything() {
        let ds = synth_digits(37, 2, 0);
        let collect = || -> Vec<Vec<usize>> {
            batches(&ds, 10, 7, 0).map(|(_, l)| l).collect()
        };
        let a = collect();
        let b = collect();
        assert_eq!(a, b);
        assert_eq!(a.iter().map(|v| v.len()).sum::<usize>(), 37);
        assert_eq!(a[0].len(), 10);
        assert_eq!(a.last().unwrap().len(), 7);
        // different epoch, different order
        let c: Vec<Vec<usize>> = batches(&ds, 10, 7, 1).map(|(_, l)| l).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn synth_digits_is_deterministic_and_balanced() {
        let a = synth_digits(100, 1, 0);
        let b = synth_digits(100, 1, 0);
        assert_eq!(a.images.data(), b.images.data());
        let c = synth_digits(100, 1, 1);
        assert_ne!(a.images.data(), c.images.data());
        let mut counts = [0usize; 10];
        for &l in &a.labels {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c == 10));
        assert!(a.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
