//! Task metrics (Recall@1, mIoU, cell-level mAP) and the attack success
//! rate, plus dataset-level evaluation helpers.

use crate::data::{CellLabel, SyntheticSample, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::image_tensor::ImageTensor;
use crate::model::{ClipModel, DenseModel, HeadKind};
use crate::objective::TextBank;
use ndarray::Array2;
use rayon::prelude::*;

/// Index of the top similarity, ties broken toward the lowest index.
pub fn argmax_lowest_index(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Fraction of images whose top-ranked caption in the bank is the correct
/// one. `images[i]`'s correct caption is `bank` row `i`, so the bank must
/// contain exactly one caption per image, in image order.
pub fn recall_at_1(model: &ClipModel, images: &[&ImageTensor], bank: &TextBank) -> Result<f64> {
    if images.len() != bank.len() {
        return Err(Error::ShapeMismatch {
            context: "recall_at_1 bank",
            expected: vec![images.len()],
            found: vec![bank.len()],
        });
    }
    let pairs: Vec<(&ImageTensor, usize)> = images
        .iter()
        .enumerate()
        .map(|(i, img)| (*img, i))
        .collect();
    recall_at_1_indexed(model, &pairs, bank)
}

/// Recall@1 over explicit (image, correct-caption-index) pairs; used when a
/// run covers a subset of the bank's images.
pub fn recall_at_1_indexed(
    model: &ClipModel,
    pairs: &[(&ImageTensor, usize)],
    bank: &TextBank,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no images to evaluate".into()));
    }
    if pairs.iter().any(|&(_, idx)| idx >= bank.len()) {
        return Err(Error::InvalidArgument(
            "correct-caption index outside the bank".into(),
        ));
    }
    let hits: usize = pairs
        .par_iter()
        .map(|&(image, correct)| {
            let (emb, _) = model.image_embedding(image);
            let sims = bank.similarities(&emb);
            usize::from(argmax_lowest_index(&sims) == correct)
        })
        .sum();
    Ok(hits as f64 / pairs.len() as f64)
}

/// Mean IoU between two class-id masks over the classes present in either
/// mask; classes absent from both are excluded.
pub fn miou(pred: &Array2<u8>, gt: &Array2<u8>, num_classes: usize) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::ShapeMismatch {
            context: "miou masks",
            expected: gt.shape().to_vec(),
            found: pred.shape().to_vec(),
        });
    }
    let mut acc = MiouAccumulator::new(num_classes);
    acc.add(pred, gt)?;
    acc.value()
        .ok_or_else(|| Error::InvalidArgument("empty masks".into()))
}

/// Dataset-level mIoU: per-class intersections and unions accumulated over
/// all samples, then averaged over classes seen in either prediction or
/// ground truth.
#[derive(Debug, Clone)]
pub struct MiouAccumulator {
    intersection: Vec<u64>,
    union: Vec<u64>,
}

impl MiouAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            intersection: vec![0; num_classes],
            union: vec![0; num_classes],
        }
    }

    pub fn add(&mut self, pred: &Array2<u8>, gt: &Array2<u8>) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::ShapeMismatch {
                context: "miou masks",
                expected: gt.shape().to_vec(),
                found: pred.shape().to_vec(),
            });
        }
        let k = self.intersection.len();
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            let (p, g) = (p as usize, g as usize);
            if p >= k || g >= k {
                return Err(Error::InvalidArgument(format!(
                    "class id out of range: pred {p}, gt {g}, num_classes {k}"
                )));
            }
            if p == g {
                self.intersection[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[g] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &MiouAccumulator) {
        for c in 0..self.intersection.len() {
            self.intersection[c] += other.intersection[c];
            self.union[c] += other.union[c];
        }
    }

    /// None when no class appears anywhere.
    pub fn value(&self) -> Option<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for c in 0..self.intersection.len() {
            if self.union[c] > 0 {
                sum += self.intersection[c] as f64 / self.union[c] as f64;
                count += 1;
            }
        }
        (count > 0).then(|| sum / count as f64)
    }
}

/// One cell's prediction: objectness-style confidence and a class id.
#[derive(Debug, Clone, Copy)]
pub struct CellPrediction {
    pub score: f64,
    pub class: u8,
}

/// Cell-level mean average precision with all-points interpolation.
///
/// For each foreground class, cells predicted as that class are ranked by
/// score (ties broken by sample then cell index); a detection is a true
/// positive when its ground-truth cell holds an object of the same class.
/// Classes with no ground-truth positives are excluded from the mean.
pub fn cell_map(
    preds: &[Array2<CellPrediction>],
    gts: &[Array2<CellLabel>],
) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::ShapeMismatch {
            context: "cell_map samples",
            expected: vec![gts.len()],
            found: vec![preds.len()],
        });
    }
    let mut aps = Vec::new();
    for class in 1..NUM_CLASSES as u8 {
        let mut detections: Vec<(f64, usize, usize, bool)> = Vec::new();
        let mut n_pos = 0usize;
        for (si, (pred, gt)) in preds.iter().zip(gts.iter()).enumerate() {
            if pred.dim() != gt.dim() {
                return Err(Error::ShapeMismatch {
                    context: "cell_map grids",
                    expected: gt.shape().to_vec(),
                    found: pred.shape().to_vec(),
                });
            }
            for (ci, (p, g)) in pred.iter().zip(gt.iter()).enumerate() {
                let is_gt = g.objectness == 1 && g.class == class;
                if is_gt {
                    n_pos += 1;
                }
                if p.class == class && p.score > 0.0 {
                    detections.push((p.score, si, ci, is_gt));
                }
            }
        }
        if n_pos == 0 {
            continue;
        }
        detections.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .expect("finite scores")
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        aps.push(average_precision(&detections, n_pos));
    }
    if aps.is_empty() {
        return Ok(0.0);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// All-points interpolated AP over a ranked detection list.
fn average_precision(ranked: &[(f64, usize, usize, bool)], n_pos: usize) -> f64 {
    if ranked.is_empty() {
        return 0.0;
    }
    let mut precisions = Vec::with_capacity(ranked.len());
    let mut recalls = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    for (rank, det) in ranked.iter().enumerate() {
        if det.3 {
            tp += 1;
        }
        precisions.push(tp as f64 / (rank + 1) as f64);
        recalls.push(tp as f64 / n_pos as f64);
    }
    // precision envelope from the right
    for i in (0..precisions.len() - 1).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..precisions.len() {
        if recalls[i] > prev_recall {
            ap += (recalls[i] - prev_recall) * precisions[i];
            prev_recall = recalls[i];
        }
    }
    ap
}

/// Attack success rate in percent: `100 * (before - after) / before`,
/// evaluated as `100 * (1 - after/before)` which avoids the cancellation in
/// `before - after` and keeps short-decimal inputs on the right side of
/// half-way rounding (24.0 -> 5.1 must print 78.8 at one decimal).
pub fn asr(acc_before: f64, acc_after: f64) -> Result<f64> {
    if !(acc_before > 0.0) {
        return Err(Error::UndefinedAsr(acc_before));
    }
    Ok(100.0 * (1.0 - acc_after / acc_before))
}

/// Dense-task metric of a model over paired (image, ground truth) samples:
/// dataset mIoU for segmentation heads, cell mAP for detection heads.
pub fn eval_dense_model(
    model: &DenseModel,
    images: &[&ImageTensor],
    samples: &[SyntheticSample],
) -> Result<f64> {
    if images.len() != samples.len() {
        return Err(Error::ShapeMismatch {
            context: "eval_dense_model",
            expected: vec![samples.len()],
            found: vec![images.len()],
        });
    }
    let predictions: Vec<crate::model::DensePrediction> = images
        .par_iter()
        .map(|image| model.predict(image))
        .collect();
    match model.head_kind {
        HeadKind::Segmentation => {
            let mut acc = MiouAccumulator::new(NUM_CLASSES);
            for (pred, sample) in predictions.iter().zip(samples.iter()) {
                acc.add(&pred.classes, &sample.seg_mask)?;
            }
            acc.value()
                .ok_or_else(|| Error::InvalidArgument("no classes in masks".into()))
        }
        HeadKind::Detection => {
            let preds: Vec<Array2<CellPrediction>> = predictions
                .iter()
                .map(|p| {
                    Array2::from_shape_fn(p.classes.dim(), |idx| CellPrediction {
                        score: p.scores[idx],
                        class: p.classes[idx],
                    })
                })
                .collect();
            let gts: Vec<Array2<CellLabel>> =
                samples.iter().map(|s| s.cell_labels.clone()).collect();
            cell_map(&preds, &gts)
        }
        HeadKind::ClipRetrieval => Err(Error::HeadMismatch {
            head: "clip_retrieval",
        }),
    }
}
