//! Spatial adversarial attacks over translation parameters.
//!
//! * First Order: white-box projected gradient ascent on `(tx, ty)` through
//!   the differentiable bilinear warp.
//! * Grid Search: black-box exhaustive scan of integer translations.
//! * Worst-of-k: black-box random translations, worst loss wins; candidate
//!   pools nest in k, so accuracy is exactly nonincreasing in k.
//!
//! Attacks perturb raw `[0, 1]` images; normalization is applied inside the
//! evaluated graph so vacated pixels stay pre-normalization black.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{argmax_rows, Model};
use crate::rng::{stream, Domain};
use crate::tensor::{Tape, Tensor};
use crate::transforms::{integer_shift, ShiftSpec};

/// Budgets for the three attacks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackBudget {
    /// Infinity-ball radius in pixels per axis (desk scale: 4).
    pub max_translation: f64,
    /// First-order steps.
    pub steps: usize,
    /// First-order step size. The reference step of 0.24 px on 224 px
    /// inputs scales proportionally with image width.
    pub step_size: f64,
    /// Worst-of-k candidate count.
    pub k: usize,
    pub seed: u64,
}

impl AttackBudget {
    pub fn desk_default(image_width: usize, seed: u64) -> Self {
        AttackBudget {
            max_translation: 4.0,
            steps: 200,
            step_size: fo_step_size(image_width),
            k: 10,
            seed,
        }
    }
}

/// 0.24 px per step at 224 px width, scaled to the actual width.
pub fn fo_step_size(image_width: usize) -> f64 {
    0.24 * image_width as f64 / 224.0
}

/// Per-image attack outcome.
#[derive(Debug, Clone, Serialize)]
pub struct AttackOutcome {
    pub index: usize,
    pub success: bool,
    pub tx: f64,
    pub ty: f64,
    pub queries: usize,
    pub loss: f64,
}

/// Aggregate over a dataset.
#[derive(Debug, Clone, Serialize)]
pub struct AttackReport {
    pub entries: Vec<AttackOutcome>,
    pub clean_accuracy: f64,
    pub post_accuracy: f64,
}

impl AttackReport {
    pub fn csv_header() -> &'static str {
        "index,success,tx,ty,queries,loss"
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::csv_header());
        for e in &self.entries {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.index, e.success, e.tx, e.ty, e.queries, e.loss
            ));
        }
        s
    }

    fn from_entries(entries: Vec<AttackOutcome>, clean_correct: usize) -> Self {
        let n = entries.len().max(1);
        let post = entries.iter().filter(|e| !e.success).count();
        AttackReport {
            clean_accuracy: clean_correct as f64 / n as f64,
            post_accuracy: post as f64 / n as f64,
            entries,
        }
    }
}

/// Loss and prediction of the model on `warp(image, tx, ty)`; gradients of
/// the loss w.r.t. `(tx, ty)` when requested.
fn warped_loss(
    model: &Model,
    image: &Tensor,
    label: usize,
    means: &[f64],
    tx: f64,
    ty: f64,
    want_grad: bool,
) -> Result<(f64, usize, f64, f64)> {
    let mut tape = Tape::new();
    let img = tape.leaf(image.clone());
    let (txv, tyv) = if want_grad {
        (
            tape.leaf(Tensor::scalar(tx).with_requires_grad()),
            tape.leaf(Tensor::scalar(ty).with_requires_grad()),
        )
    } else {
        (tape.leaf(Tensor::scalar(tx)), tape.leaf(Tensor::scalar(ty)))
    };
    let warped = tape.translate_warp(img, txv, tyv)?;
    let deltas: Vec<f64> = means.iter().map(|m| -m).collect();
    let normed = tape.add_channel_const(warped, &deltas)?;
    let (logits, _, _) = model.forward_on_tape(&mut tape, normed, false, None)?;
    let pred = argmax_rows(tape.value(logits))[0];
    let loss = tape.softmax_xent(logits, &[label])?;
    let loss_val = tape.value(loss).data()[0];
    if want_grad {
        tape.backward(loss)?;
        let gx = tape.grad(txv).map(|g| g[0]).unwrap_or(0.0);
        let gy = tape.grad(tyv).map(|g| g[0]).unwrap_or(0.0);
        Ok((loss_val, pred, gx, gy))
    } else {
        Ok((loss_val, pred, 0.0, 0.0))
    }
}

/// White-box first-order attack: raw-gradient ascent on the correct-class
/// loss over `(tx, ty)`, projected onto the infinity ball after each step.
pub fn attack_first_order(
    model: &Model,
    image: &Tensor,
    label: usize,
    means: &[f64],
    budget: &AttackBudget,
    index: usize,
) -> Result<AttackOutcome> {
    let b = budget.max_translation;
    let (mut tx, mut ty) = (0.0f64, 0.0f64);
    let mut queries = 0usize;
    for _ in 0..budget.steps {
        let (_, _, gx, gy) = warped_loss(model, image, label, means, tx, ty, true)?;
        queries += 1;
        tx = (tx + budget.step_size * gx).clamp(-b, b);
        ty = (ty + budget.step_size * gy).clamp(-b, b);
    }
    let (loss, pred, _, _) = warped_loss(model, image, label, means, tx, ty, false)?;
    queries += 1;
    Ok(AttackOutcome {
        index,
        success: pred != label,
        tx,
        ty,
        queries,
        loss,
    })
}

/// Black-box exhaustive grid over integer translations in
/// `[-max_shift, max_shift]^2`, scanned row-major (dy outer, dx inner).
/// All cells are always evaluated; the first misclassifying one is
/// reported.
pub fn attack_grid_search(
    model: &Model,
    image: &Tensor,
    label: usize,
    means: &[f64],
    max_shift: isize,
    index: usize,
) -> Result<AttackOutcome> {
    let (_, c, h, w) = image.dims4()?;
    let chw = c * h * w;
    let side = (2 * max_shift + 1) as usize;
    let total = side * side;
    let mut batch = Tensor::zeros(&[total, c, h, w]);
    let mut at = 0usize;
    for dy in -max_shift..=max_shift {
        for dx in -max_shift..=max_shift {
            let moved = integer_shift(image, &ShiftSpec { dx, dy, fill: 0.0 })?;
            batch.data_mut()[at * chw..(at + 1) * chw].copy_from_slice(moved.data());
            at += 1;
        }
    }
    let preds = crate::eval::predict_raw(model, &batch, means)?;
    let first_bad = preds.iter().position(|&p| p != label);
    let (success, tx, ty) = match first_bad {
        Some(i) => {
            let dy = (i / side) as isize - max_shift;
            let dx = (i % side) as isize - max_shift;
            (true, dx as f64, dy as f64)
        }
        None => (false, 0.0, 0.0),
    };
    Ok(AttackOutcome {
        index,
        success,
        tx,
        ty,
        queries: total,
        loss: 0.0,
    })
}

/// Black-box worst-of-k: draw k translations uniformly from the infinity
/// ball; the candidate with the largest correct-class loss is the
/// adversary (ties break to the earliest draw). Draw j is the same for
/// every k, so candidate pools nest. With `include_origin` the clean
/// translation is prepended (guaranteeing post-attack <= clean accuracy).
pub fn attack_worst_of_k(
    model: &Model,
    image: &Tensor,
    label: usize,
    means: &[f64],
    budget: &AttackBudget,
    index: usize,
    include_origin: bool,
) -> Result<AttackOutcome> {
    if budget.k < 1 {
        return Err(Error::invalid("worst-of-k requires k >= 1".to_string()));
    }
    let b = budget.max_translation;
    let mut rng = stream(budget.seed, Domain::Attack, index as u64);
    let mut candidates: Vec<(f64, f64)> = Vec::with_capacity(budget.k + 1);
    if include_origin {
        candidates.push((0.0, 0.0));
    }
    for _ in 0..budget.k {
        let tx = rng.gen_range(-b..=b);
        let ty = rng.gen_range(-b..=b);
        candidates.push((tx, ty));
    }
    let mut best: Option<(f64, usize, (f64, f64), usize)> = None;
    for (ci, &(tx, ty)) in candidates.iter().enumerate() {
        let (loss, pred, _, _) = warped_loss(model, image, label, means, tx, ty, false)?;
        let better = match &best {
            None => true,
            Some((bl, _, _, _)) => loss > *bl,
        };
        if better {
            best = Some((loss, pred, (tx, ty), ci));
        }
    }
    let (loss, pred, (tx, ty), _) = best.expect("k >= 1 candidates");
    Ok(AttackOutcome {
        index,
        success: pred != label,
        tx,
        ty,
        queries: candidates.len(),
        loss,
    })
}

fn run_over_dataset<F>(model: &Model, raw: &Dataset, means: &[f64], f: F) -> Result<AttackReport>
where
    F: Fn(usize, &Tensor, usize) -> Result<AttackOutcome> + Sync,
{
    let clean_preds = crate::eval::predict_raw(model, &raw.images, means)?;
    let clean_correct = clean_preds
        .iter()
        .zip(&raw.labels)
        .filter(|(p, l)| p == l)
        .count();
    let results: Vec<Result<AttackOutcome>> = (0..raw.len())
        .into_par_iter()
        .map(|i| f(i, &raw.image(i), raw.labels[i]))
        .collect();
    let entries: Result<Vec<AttackOutcome>> = results.into_iter().collect();
    Ok(AttackReport::from_entries(entries?, clean_correct))
}

/// First-order attack over a dataset.
pub fn fo_attack_all(
    model: &Model,
    raw: &Dataset,
    means: &[f64],
    budget: &AttackBudget,
) -> Result<AttackReport> {
    run_over_dataset(model, raw, means, |i, img, label| {
        attack_first_order(model, img, label, means, budget, i)
    })
}

/// Grid-search attack over a dataset (always 121 queries per image at the
/// default ±5 px grid).
pub fn grid_attack_all(
    model: &Model,
    raw: &Dataset,
    means: &[f64],
    max_shift: isize,
) -> Result<AttackReport> {
    run_over_dataset(model, raw, means, |i, img, label| {
        attack_grid_search(model, img, label, means, max_shift, i)
    })
}

/// Worst-of-k attack over a dataset.
pub fn worst_of_k_all(
    model: &Model,
    raw: &Dataset,
    means: &[f64],
    budget: &AttackBudget,
    include_origin: bool,
) -> Result<AttackReport> {
    run_over_dataset(model, raw, means, |i, img, label| {
        attack_worst_of_k(model, img, label, means, budget, i, include_origin)
    })
}
