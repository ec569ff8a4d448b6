//! Localization and clustering metrics and the end-to-end evaluation driver.

mod matching;
mod report;

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{extract_predictions, Prediction, StampNet};
use crate::numerics::{stream_rng, SeededRng, Stream};
use crate::training::stack_images;

pub use matching::{iou, match_boxes, min_cost_assignment, Assignment, Match};
pub use report::{read_report, MetricsReport};

/// Conventional IoU threshold for a correct localization.
pub const CORLOC_THRESHOLD: f64 = 0.5;

/// Samples per inference batch in [`evaluate`].
const EVAL_BATCH: usize = 64;

/// Fraction of ground truths localized correctly. `ious` holds, for every
/// ground truth, the IoU of its matched prediction or `None` if unmatched.
pub fn corloc(ious: &[Option<f64>], threshold: f64) -> Result<f64> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    if ious.is_empty() {
        return Err(Error::config("corloc of zero ground truths is undefined"));
    }
    let hits = ious
        .iter()
        .filter(|v| v.is_some_and(|v| v >= threshold))
        .count();
    Ok(hits as f64 / ious.len() as f64)
}

/// Clustering purity of `clusters` against `classes`: the share of items
/// that belong to their cluster's majority class.
pub fn purity(clusters: &[usize], classes: &[u32]) -> Result<f64> {
    if clusters.len() != classes.len() {
        return Err(Error::dim(format!(
            "{} cluster ids but {} class labels",
            clusters.len(),
            classes.len()
        )));
    }
    if clusters.is_empty() {
        return Err(Error::config("purity of an empty assignment is undefined"));
    }
    let mut table: BTreeMap<usize, BTreeMap<u32, usize>> = BTreeMap::new();
    for (&k, &c) in clusters.iter().zip(classes) {
        *table.entry(k).or_default().entry(c).or_default() += 1;
    }
    let majority: usize = table
        .values()
        .map(|counts| counts.values().max().copied().unwrap_or(0))
        .sum();
    Ok(majority as f64 / clusters.len() as f64)
}

/// Predictions for every sample at temperature `tau`, with one Gumbel stream
/// per sample index so results do not depend on batching or threads.
pub fn predict(
    model: &StampNet,
    dataset: &Dataset,
    tau: f64,
    seed: u64,
) -> Result<Vec<Vec<Prediction>>> {
    let c = model.config();
    if dataset.canvas_width != c.canvas_width
        || dataset.canvas_height != c.canvas_height
        || dataset.channels() != c.channels
    {
        return Err(Error::dim(format!(
            "dataset is {}x{} with {} channel(s), model expects {}x{} with {}",
            dataset.canvas_width,
            dataset.canvas_height,
            dataset.channels(),
            c.canvas_width,
            c.canvas_height,
            c.channels
        )));
    }
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let chunks: Vec<Vec<Vec<Prediction>>> = indices
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let images = stack_images(&dataset.samples, chunk)?;
            let mut rngs: Vec<SeededRng> = chunk
                .iter()
                .map(|&i| stream_rng(seed, Stream::Eval, i as u64))
                .collect();
            let out = model.infer(&images, tau, &mut rngs)?;
            Ok(out
                .latents
                .iter()
                .map(|l| extract_predictions(l, c.stamp_width, c.stamp_height))
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Scores predictions against the dataset's ground truth.
pub fn score(
    name: &str,
    dataset: &Dataset,
    predictions: &[Vec<Prediction>],
    stamps: usize,
    tau_eval: f64,
) -> Result<MetricsReport> {
    if predictions.len() != dataset.len() {
        return Err(Error::dim("one prediction list per sample is required"));
    }
    let mut gt_ious = Vec::new();
    let mut matched_ious = Vec::new();
    let mut clusters = Vec::new();
    let mut classes = Vec::new();
    for (sample, preds) in dataset.samples.iter().zip(predictions) {
        let pb: Vec<_> = preds.iter().map(|p| p.bbox).collect();
        let gb: Vec<_> = sample.boxes.iter().map(|g| g.bbox).collect();
        let assignment = match_boxes(&pb, &gb);
        for g in 0..gb.len() {
            gt_ious.push(assignment.for_gt(g).map(|m| m.iou));
        }
        for m in &assignment.pairs {
            matched_ious.push(m.iou);
            clusters.push(preds[m.pred].stamp);
            classes.push(sample.boxes[m.gt].class_label);
        }
    }
    let mut per_stamp_counts = vec![0usize; stamps];
    for &k in &clusters {
        if k >= stamps {
            return Err(Error::dim(format!("prediction uses stamp {k} of {stamps}")));
        }
        per_stamp_counts[k] += 1;
    }
    let mean_iou = if matched_ious.is_empty() {
        0.0
    } else {
        matched_ious.iter().sum::<f64>() / matched_ious.len() as f64
    };
    MetricsReport {
        dataset: name.to_string(),
        samples: dataset.len(),
        corloc: corloc(&gt_ious, CORLOC_THRESHOLD)?,
        mean_iou,
        purity: purity(&clusters, &classes)?,
        threshold: CORLOC_THRESHOLD,
        tau_eval,
        per_stamp_counts,
    }
    .validated()
}

/// Runs the model over `dataset` in evaluation mode at `tau_eval` and
/// reports CorLoc, mean IoU over matched pairs, and purity.
pub fn evaluate(
    model: &StampNet,
    dataset: &Dataset,
    name: &str,
    tau_eval: f64,
    seed: u64,
) -> Result<MetricsReport> {
    let predictions = predict(model, dataset, tau_eval, seed)?;
    score(name, dataset, &predictions, model.config().stamps, tau_eval)
}

#[cfg(test)]
mod tests;
