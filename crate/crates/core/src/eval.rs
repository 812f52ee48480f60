//! Shift-consistency protocols, flip probability, and corruption error.
//!
//! Protocols perturb images in raw `[0, 1]` space (vacated pixels are
//! pre-normalization black), then normalize with the training means before
//! prediction. Evaluation parallelizes over image chunks and reduces in a
//! fixed order.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::Model;
use crate::rng::{stream, Domain};
use crate::tensor::Tensor;
use crate::transforms::{
    bilinear_resize, corrupt_indexed, embed_canvas, integer_shift, make_sequence, CorruptionKind,
    CorruptionSpec, PerturbKind, PerturbationSequence, ShiftSpec,
};

/// Down-scale target of the rescale protocols (the 100/224 fraction of a
/// 28-32 px input).
pub const RESCALE_SIZE: usize = 14;
/// Desk-scale maximum diagonal shift.
pub const MAX_DIAGONAL_SHIFT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Diagonal,
    Rescale,
    DoubleRescale,
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::Diagonal => "diagonal",
            Protocol::Rescale => "rescale",
            Protocol::DoubleRescale => "double_rescale",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConsistencyReport {
    pub protocol: Protocol,
    pub consistency: f64,
    pub clean_accuracy: f64,
    pub n_images: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FPReport {
    pub kind: PerturbKind,
    pub fp: f64,
    pub k: usize,
    pub v: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CECell {
    pub kind: CorruptionKind,
    pub severity: usize,
    pub error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CEReport {
    pub cells: Vec<CECell>,
    pub per_kind_mean: Vec<(CorruptionKind, f64)>,
    pub mce: f64,
}

/// Fraction of index-wise equal predictions.
pub fn consistency(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::invalid(format!(
            "consistency needs equal nonempty lists, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
    Ok(same as f64 / a.len() as f64)
}

/// Subtract the training channel means from a raw batch.
pub fn normalize_batch(images: &Tensor, means: &[f64]) -> Tensor {
    let (n, c, h, w) = images.dims4().expect("4-D batch");
    assert_eq!(means.len(), c);
    let hw = h * w;
    let mut out = images.clone();
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * hw;
            for v in &mut out.data_mut()[off..off + hw] {
                *v -= means[ci];
            }
        }
    }
    out
}

/// Predict a raw batch after normalization, chunked and order-preserving.
pub fn predict_raw(model: &Model, images: &Tensor, means: &[f64]) -> Result<Vec<usize>> {
    const CHUNK: usize = 64;
    let (n, c, h, w) = images.dims4()?;
    let chw = c * h * w;
    let chunks: Vec<(usize, usize)> = (0..n).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(n))).collect();
    let results: Vec<Result<Vec<usize>>> = chunks
        .par_iter()
        .map(|&(s, e)| {
            let batch = Tensor::new(&[e - s, c, h, w], images.data()[s * chw..e * chw].to_vec())?;
            model.predict(&normalize_batch(&batch, means))
        })
        .collect();
    let mut preds = Vec::with_capacity(n);
    for r in results {
        preds.extend(r?);
    }
    Ok(preds)
}

/// Diagonal-shift protocol: per image draw N in `1..=max_n` (with
/// `max_n = 0` every shift is zero, the identity debug mode), compare the
/// prediction of the clean image against its diagonally shifted copy.
pub fn protocol_diagonal_with(
    model: &Model,
    raw: &Dataset,
    means: &[f64],
    seed: u64,
    max_n: usize,
) -> Result<ConsistencyReport> {
    let (_, c, h, w) = raw.images.dims4()?;
    let chw = c * h * w;
    let n = raw.len();
    let mut shifted = Tensor::zeros(&[n, c, h, w]);
    for i in 0..n {
        let amount = if max_n == 0 {
            0
        } else {
            stream(seed, Domain::Protocol, i as u64).gen_range(1..=max_n) as isize
        };
        let img = raw.image(i);
        let moved = integer_shift(&img, &ShiftSpec::diagonal(amount))?;
        shifted.data_mut()[i * chw..(i + 1) * chw].copy_from_slice(moved.data());
    }
    let preds_clean = predict_raw(model, &raw.images, means)?;
    let preds_shifted = predict_raw(model, &shifted, means)?;
    let cons = consistency(&preds_clean, &preds_shifted)?;
    let clean_acc = accuracy(&preds_clean, &raw.labels);
    Ok(ConsistencyReport {
        protocol: Protocol::Diagonal,
        consistency: cons,
        clean_accuracy: clean_acc,
        n_images: n,
        seed,
    })
}

pub fn protocol_diagonal(
    model: &Model,
    raw: &Dataset,
    means: &[f64],
    seed: u64,
) -> Result<ConsistencyReport> {
    protocol_diagonal_with(model, raw, means, seed, MAX_DIAGONAL_SHIFT)
}

/// Rescale-shift protocol: down-scale to 14x14, embed centered in the
/// native canvas, and compare against its 1 px diagonal shift.
pub fn protocol_rescale(model: &Model, raw: &Dataset, means: &[f64]) -> Result<ConsistencyReport> {
    let (_, c, h, w) = raw.images.dims4()?;
    let chw = c * h * w;
    let n = raw.len();
    let mut clean = Tensor::zeros(&[n, c, h, w]);
    let mut moved = Tensor::zeros(&[n, c, h, w]);
    for i in 0..n {
        let small = bilinear_resize(&raw.image(i), RESCALE_SIZE, RESCALE_SIZE)?;
        let embedded = embed_canvas(&small, h, w, (h - RESCALE_SIZE) / 2, (w - RESCALE_SIZE) / 2)?;
        let shifted = integer_shift(&embedded, &ShiftSpec::diagonal(1))?;
        clean.data_mut()[i * chw..(i + 1) * chw].copy_from_slice(embedded.data());
        moved.data_mut()[i * chw..(i + 1) * chw].copy_from_slice(shifted.data());
    }
    let a = predict_raw(model, &clean, means)?;
    let b = predict_raw(model, &moved, means)?;
    Ok(ConsistencyReport {
        protocol: Protocol::Rescale,
        consistency: consistency(&a, &b)?,
        clean_accuracy: accuracy(&a, &raw.labels),
        n_images: n,
        seed: 0,
    })
}

/// Double-rescaling protocol: compare the 14x14 embedding against the
/// 15x15 embedding (the +1 px direction).
pub fn protocol_double_rescale(
    model: &Model,
    raw: &Dataset,
    means: &[f64],
) -> Result<ConsistencyReport> {
    let (_, c, h, w) = raw.images.dims4()?;
    let chw = c * h * w;
    let n = raw.len();
    let sz2 = RESCALE_SIZE + 1;
    let mut a_imgs = Tensor::zeros(&[n, c, h, w]);
    let mut b_imgs = Tensor::zeros(&[n, c, h, w]);
    for i in 0..n {
        let img = raw.image(i);
        let s1 = bilinear_resize(&img, RESCALE_SIZE, RESCALE_SIZE)?;
        let e1 = embed_canvas(&s1, h, w, (h - RESCALE_SIZE) / 2, (w - RESCALE_SIZE) / 2)?;
        let s2 = bilinear_resize(&img, sz2, sz2)?;
        let e2 = embed_canvas(&s2, h, w, (h - sz2) / 2, (w - sz2) / 2)?;
        a_imgs.data_mut()[i * chw..(i + 1) * chw].copy_from_slice(e1.data());
        b_imgs.data_mut()[i * chw..(i + 1) * chw].copy_from_slice(e2.data());
    }
    let a = predict_raw(model, &a_imgs, means)?;
    let b = predict_raw(model, &b_imgs, means)?;
    Ok(ConsistencyReport {
        protocol: Protocol::DoubleRescale,
        consistency: consistency(&a, &b)?,
        clean_accuracy: accuracy(&a, &raw.labels),
        n_images: n,
        seed: 0,
    })
}

fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / preds.len() as f64
}

/// Flip probability from per-sequence prediction lists: total adjacent
/// mismatches over `k * (v - 1)` pairs.
pub fn flip_probability_from_preds(preds: &[Vec<usize>]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::invalid("flip probability needs at least one sequence".to_string()));
    }
    let v = preds[0].len();
    if v < 2 {
        return Err(Error::invalid("sequences must have at least 2 frames".to_string()));
    }
    if preds.iter().any(|p| p.len() != v) {
        return Err(Error::invalid("all sequences must share the frame count".to_string()));
    }
    let mut flips = 0usize;
    for seq in preds {
        flips += seq.windows(2).filter(|w| w[0] != w[1]).count();
    }
    Ok(flips as f64 / (preds.len() * (v - 1)) as f64)
}

/// Flip probability of the model over raw-space perturbation sequences.
pub fn flip_probability(
    model: &Model,
    sequences: &[PerturbationSequence],
    means: &[f64],
) -> Result<FPReport> {
    if sequences.is_empty() {
        return Err(Error::invalid("flip probability needs at least one sequence".to_string()));
    }
    let kind = sequences[0].kind;
    let preds: Vec<Result<Vec<usize>>> = sequences
        .par_iter()
        .map(|seq| {
            let mut out = Vec::with_capacity(seq.frames.len());
            for f in &seq.frames {
                out.push(model.predict(&normalize_batch(f, means))?[0]);
            }
            Ok(out)
        })
        .collect();
    let preds: Result<Vec<Vec<usize>>> = preds.into_iter().collect();
    let preds = preds?;
    let v = preds[0].len();
    let fp = flip_probability_from_preds(&preds)?;
    Ok(FPReport {
        kind,
        fp,
        k: sequences.len(),
        v,
    })
}

/// Build perturbation sequences for the first `k` images of a dataset.
pub fn sequences_for(raw: &Dataset, kind: PerturbKind, k: usize, v: usize) -> Result<Vec<PerturbationSequence>> {
    (0..k.min(raw.len()))
        .map(|i| make_sequence(&raw.image(i), kind, v))
        .collect()
}

/// Per-corruption, per-severity top-1 error plus the unnormalized mean
/// corruption error across kinds.
pub fn corruption_error(
    model: &Model,
    raw: &Dataset,
    means: &[f64],
    kinds: &[CorruptionKind],
    seed: u64,
) -> Result<CEReport> {
    let (_, c, h, w) = raw.images.dims4()?;
    let chw = c * h * w;
    let n = raw.len();
    let mut cells = Vec::new();
    let mut per_kind_mean = Vec::new();
    for &kind in kinds {
        let mut kind_sum = 0.0;
        for severity in 1..=5 {
            let spec = CorruptionSpec { kind, severity, seed };
            let mut corrupted = Tensor::zeros(&[n, c, h, w]);
            for i in 0..n {
                let img = corrupt_indexed(&raw.image(i), &spec, i as u64)?;
                corrupted.data_mut()[i * chw..(i + 1) * chw].copy_from_slice(img.data());
            }
            let preds = predict_raw(model, &corrupted, means)?;
            let error = 1.0 - accuracy(&preds, &raw.labels);
            kind_sum += error;
            cells.push(CECell { kind, severity, error });
        }
        per_kind_mean.push((kind, kind_sum / 5.0));
    }
    let mce = if per_kind_mean.is_empty() {
        0.0
    } else {
        per_kind_mean.iter().map(|(_, e)| e).sum::<f64>() / per_kind_mean.len() as f64
    };
    Ok(CEReport {
        cells,
        per_kind_mean,
        mce,
    })
}

impl ConsistencyReport {
    pub fn csv_header() -> &'static str {
        "protocol,consistency,clean_accuracy,n_images,seed"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.protocol.name(),
            self.consistency,
            self.clean_accuracy,
            self.n_images,
            self.seed
        )
    }
}

impl FPReport {
    pub fn csv_header() -> &'static str {
        "kind,fp,k,v"
    }

    pub fn to_csv_row(&self) -> String {
        format!("{},{},{},{}", self.kind.name(), self.fp, self.k, self.v)
    }
}

impl CEReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,severity,error\n");
        for cell in &self.cells {
            s.push_str(&format!("{},{},{}\n", cell.kind.name(), cell.severity, cell.error));
        }
        for (kind, mean) in &self.per_kind_mean {
            s.push_str(&format!("{},mean,{}\n", kind.name(), mean));
        }
        s.push_str(&format!("mce,,{}\n", self.mce));
        s
    }
}
