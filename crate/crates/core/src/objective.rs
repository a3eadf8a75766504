//! Differentiable objectives the attacks maximize: task cross-entropy, the
//! KL objective on the contrastive model's caption distribution, and the
//! joint-optimization baseline.

use crate::data::SyntheticSample;
use crate::error::{Error, Result};
use crate::image_tensor::{ImageTensor, PixelField};
use crate::model::{ClipModel, DenseModel, TaskTarget};
use crate::nn::softmax;
use ndarray::{Array1, Array2};
use serde::Serialize;

/// Probability floor applied before renormalization; prevents log(0) without
/// measurably shifting gradients.
pub const SMOOTHING_FLOOR: f64 = 1e-12;

/// The fixed candidate caption set the prediction distribution ranges over.
/// Ordering is stable and persisted with the run.
#[derive(Debug, Clone)]
pub struct TextBank {
    captions: Vec<String>,
    /// N×D matrix of unit-norm caption embeddings.
    embeddings: Array2<f64>,
}

impl TextBank {
    /// Embed `captions` with the model's text encoder.
    pub fn build(model: &ClipModel, captions: Vec<String>) -> Result<Self> {
        if captions.is_empty() {
            return Err(Error::EmptyTextBank);
        }
        let embeddings = model.embed_captions(&captions)?;
        let bank = Self {
            captions,
            embeddings,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        if self.captions.is_empty() {
            return Err(Error::EmptyTextBank);
        }
        for (i, row) in self.embeddings.outer_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "bank embedding {i} has norm {norm}, expected unit"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    pub fn captions(&self) -> &[String] {
        &self.captions
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    /// Cosine similarities of an image embedding against every caption.
    pub fn similarities(&self, image_embedding: &Array1<f64>) -> Vec<f64> {
        self.embeddings
            .outer_iter()
            .map(|row| row.dot(image_embedding))
            .collect()
    }
}

/// A smoothed probability vector over the text bank: entries positive,
/// summing to one.
#[derive(Debug, Clone, Serialize)]
pub struct PredictionDistribution {
    probs: Vec<f64>,
}

impl PredictionDistribution {
    /// Floor-smooth and renormalize raw probabilities.
    pub fn from_raw(mut probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::EmptyTextBank);
        }
        for p in &mut probs {
            if !p.is_finite() || *p < 0.0 {
                return Err(Error::NumericalFailure {
                    context: "prediction distribution".into(),
                });
            }
            *p = p.max(SMOOTHING_FLOOR);
        }
        let sum: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= sum;
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// The model's output distribution over the caption bank:
/// `softmax(cosine similarities / temperature)`, smoothed.
pub fn clip_distribution(
    model: &ClipModel,
    image: &ImageTensor,
    bank: &TextBank,
    temperature: f64,
) -> Result<PredictionDistribution> {
    if bank.is_empty() {
        return Err(Error::EmptyTextBank);
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let (embedding, _) = model.image_embedding(image);
    let sims = bank.similarities(&embedding);
    let logits: Vec<f64> = sims.iter().map(|s| s / temperature).collect();
    PredictionDistribution::from_raw(softmax(&logits))
}

/// `KL(p ‖ q) = Σ p_i log(p_i / q_i)` in nats. Non-negative, zero iff p = q.
pub fn kl_divergence(p: &PredictionDistribution, q: &PredictionDistribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch {
            context: "kl_divergence",
            expected: vec![p.len()],
            found: vec![q.len()],
        });
    }
    Ok(p.probs
        .iter()
        .zip(q.probs.iter())
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum())
}

/// Task loss (mean cross-entropy over positions) and its input gradient.
pub fn task_objective(
    model: &DenseModel,
    image: &ImageTensor,
    target: TaskTarget<'_>,
) -> Result<(f64, PixelField)> {
    let (loss, grad, _) = model.task_loss(image, target, false)?;
    Ok((loss, grad))
}

/// KL of the current image's caption distribution against the cached clean
/// distribution `p`, with the gradient with respect to the current image.
///
/// The value uses the smoothed distributions; the gradient uses the exact
/// softmax identity `dKL/ds_j = q_j - p_j` (the floor only binds where both
/// tails are ~1e-12, shifting gradients far below test tolerance).
pub fn clip_kl_objective(
    model: &ClipModel,
    p: &PredictionDistribution,
    x_current: &ImageTensor,
    bank: &TextBank,
) -> Result<(f64, PixelField)> {
    if p.len() != bank.len() {
        return Err(Error::ShapeMismatch {
            context: "clip_kl_objective",
            expected: vec![bank.len()],
            found: vec![p.len()],
        });
    }
    let temperature = model.temperature();
    let (embedding, trace) = model.image_embedding(x_current);
    let sims = bank.similarities(&embedding);
    let logits: Vec<f64> = sims.iter().map(|s| s / temperature).collect();
    let q_raw = softmax(&logits);
    let q = PredictionDistribution::from_raw(q_raw.clone())?;
    let kl = kl_divergence(p, &q)?;

    // dKL/d(embedding) = sum_j (q_j - p_j) * t_j / T
    let mut d_embedding = Array1::zeros(embedding.len());
    for (j, row) in bank.embeddings().outer_iter().enumerate() {
        let coef = (q_raw[j] - p.probs[j]) / temperature;
        d_embedding.scaled_add(coef, &row);
    }
    let (grad, _) = model.image_embedding_backward(&trace, &d_embedding, false);
    Ok((kl, grad))
}

/// Convenience wrapper that computes the clean distribution on the fly.
pub fn clip_kl_objective_from_clean(
    model: &ClipModel,
    x_clean: &ImageTensor,
    x_current: &ImageTensor,
    bank: &TextBank,
) -> Result<(f64, PixelField)> {
    let p = clip_distribution(model, x_clean, bank, model.temperature())?;
    clip_kl_objective(model, &p, x_current, bank)
}

/// Diagnostics carried along with a joint-objective evaluation.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct JointParts {
    pub task_loss: f64,
    pub kl: f64,
    /// Cosine between the task and KL input gradients (None when either
    /// gradient is numerically zero).
    pub grad_cosine: Option<f64>,
}

/// Weighted joint objective `L_task + w * KL` with summed gradients.
///
/// With `w = 0` the returned loss and gradient are the task objective's own
/// values (bit-identical, not a sum with a zero term).
pub fn joint_objective(
    task_model: &DenseModel,
    clip_model: &ClipModel,
    image: &ImageTensor,
    target: TaskTarget<'_>,
    p_clean: &PredictionDistribution,
    bank: &TextBank,
    weight: f64,
) -> Result<(f64, PixelField, JointParts)> {
    if weight < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "joint weight must be non-negative, got {weight}"
        )));
    }
    let (task_loss, g_task) = task_objective(task_model, image, target)?;
    let (kl, g_kl) = clip_kl_objective(clip_model, p_clean, image, bank)?;
    let grad_cosine = cosine_similarity(&g_task, &g_kl);
    let parts = JointParts {
        task_loss,
        kl,
        grad_cosine,
    };
    if weight == 0.0 {
        return Ok((task_loss, g_task, parts));
    }
    let loss = task_loss + weight * kl;
    let grad = &g_task + &(&g_kl * weight);
    Ok((loss, grad, parts))
}

/// Cosine similarity of two gradient fields; None if either is ~zero.
pub fn cosine_similarity(a: &PixelField, b: &PixelField) -> Option<f64> {
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return None;
    }
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Per-sample gradient-conflict entry.
#[derive(Debug, Clone, Serialize)]
pub struct ConflictEntry {
    pub sample_id: u64,
    /// None marks a flagged (zero-gradient) sample, excluded from aggregates.
    pub cosine: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConflictReport {
    pub entries: Vec<ConflictEntry>,
    pub median_cosine: Option<f64>,
    pub flagged: usize,
}

/// Measure the angle between task and KL input gradients per sample.
///
/// The KL gradient vanishes exactly at the clean image (q = p is the KL
/// minimum), so each sample is probed one task sign-step away from clean,
/// which is where joint optimization actually evaluates both gradients.
pub fn gradient_conflict_report(
    task_model: &DenseModel,
    clip_model: &ClipModel,
    samples: &[SyntheticSample],
    bank: &TextBank,
    probe_step: f64,
) -> Result<ConflictReport> {
    let mut entries = Vec::with_capacity(samples.len());
    for sample in samples {
        let target = target_for(task_model, sample);
        let (_, g0) = task_objective(task_model, &sample.image, target)?;
        let probe = crate::perturb::clamp_valid_field(
            &(sample.image.data() + &g0.mapv(|g| probe_step * crate::perturb::kernel::sign(g))),
        );
        let (_, g_task) = task_objective(task_model, &probe, target)?;
        let (_, g_kl) =
            clip_kl_objective_from_clean(clip_model, &sample.image, &probe, bank)?;
        entries.push(ConflictEntry {
            sample_id: sample.id,
            cosine: cosine_similarity(&g_task, &g_kl),
        });
    }
    let mut present: Vec<f64> = entries.iter().filter_map(|e| e.cosine).collect();
    present.sort_by(|a, b| a.partial_cmp(b).expect("cosines are finite"));
    let median_cosine = if present.is_empty() {
        None
    } else {
        Some(present[present.len() / 2])
    };
    let flagged = entries.iter().filter(|e| e.cosine.is_none()).count();
    Ok(ConflictReport {
        entries,
        median_cosine,
        flagged,
    })
}

/// The ground-truth view of a sample matching the model's head.
pub fn target_for<'a>(model: &DenseModel, sample: &'a SyntheticSample) -> TaskTarget<'a> {
    match model.head_kind {
        crate::model::HeadKind::Segmentation => TaskTarget::Segmentation(&sample.seg_mask),
        _ => TaskTarget::Detection(&sample.cell_labels),
    }
}
