//! Training for the testbed: symmetric contrastive training of the toy
//! image-text model, and supervised fine-tuning of dense-task models on top
//! of its backbone. Both enforce clean-metric gates before the models are
//! released to the attack experiments.

use crate::data::{vocabulary, Dataset, SyntheticSample};
use crate::error::{Error, Result};
use crate::eval::{eval_dense_model, recall_at_1};
use crate::image_tensor::ImageTensor;
use crate::model::{
    ArchConfig, Backbone, BackboneGrads, BackboneOrigin, ClipGrads, ClipModel, DenseGrads,
    DenseModel, HeadKind,
};
use crate::nn::{log_sum_exp, softmax, Adam};
use crate::objective::{target_for, TextBank};
use crate::seed::{child_seed, rng_from_seed};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Clean Recall@1 the contrastive model must reach on the test bank.
pub const CLIP_RECALL_GATE: f64 = 0.70;
/// Clean mIoU / cell-mAP a dense model must reach on the test split.
pub const DENSE_METRIC_GATE: f64 = 0.60;

/// Largest allowed contrastive logit scale (exp of the learned parameter).
const MAX_LOGIT_SCALE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ClipTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 64,
            lr: 3e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenseTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for DenseTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 24,
            lr: 2e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClipTrainReport {
    pub epoch_losses: Vec<f64>,
    pub recall_at_1: f64,
    pub temperature: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DenseTrainReport {
    pub epoch_losses: Vec<f64>,
    /// Clean dataset metric on the test split (mIoU or cell mAP).
    pub clean_metric: f64,
}

impl ClipGrads {
    fn zeros(model: &ClipModel) -> Self {
        Self {
            backbone: BackboneGrads {
                conv1: model.backbone.conv1.zeros_like(),
                conv2: model.backbone.conv2.zeros_like(),
                conv3: model.backbone.conv3.zeros_like(),
            },
            fc1: crate::nn::LinearGrad {
                weight: Array2::zeros(model.fc1.weight.dim()),
                bias: Array1::zeros(model.fc1.bias.dim()),
            },
            fc2: crate::nn::LinearGrad {
                weight: Array2::zeros(model.fc2.weight.dim()),
                bias: Array1::zeros(model.fc2.bias.dim()),
            },
            token_emb: Array2::zeros(model.token_emb.dim()),
            logit_scale: 0.0,
        }
    }
}

fn add_backbone_grads(acc: &mut BackboneGrads, g: &BackboneGrads) {
    acc.conv1.weight += &g.conv1.weight;
    acc.conv1.bias += &g.conv1.bias;
    acc.conv2.weight += &g.conv2.weight;
    acc.conv2.bias += &g.conv2.bias;
    acc.conv3.weight += &g.conv3.weight;
    acc.conv3.bias += &g.conv3.bias;
}

fn scale_backbone_grads(acc: &mut BackboneGrads, s: f64) {
    acc.conv1.weight *= s;
    acc.conv1.bias *= s;
    acc.conv2.weight *= s;
    acc.conv2.bias *= s;
    acc.conv3.weight *= s;
    acc.conv3.bias *= s;
}

fn flat(v: impl IntoIterator<Item = f64>) -> Vec<f64> {
    v.into_iter().collect()
}

fn clip_adam_step(model: &mut ClipModel, grads: &ClipGrads, opt: &mut Adam) -> Result<()> {
    let mut pairs: Vec<(String, &mut [f64], Vec<f64>)> = vec![
        (
            "backbone.conv1.weight".into(),
            model.backbone.conv1.weight.as_slice_mut().expect("standard layout"),
            flat(grads.backbone.conv1.weight.iter().copied()),
        ),
        (
            "backbone.conv1.bias".into(),
            model.backbone.conv1.bias.as_slice_mut().expect("standard layout"),
            flat(grads.backbone.conv1.bias.iter().copied()),
        ),
        (
            "backbone.conv2.weight".into(),
            model.backbone.conv2.weight.as_slice_mut().expect("standard layout"),
            flat(grads.backbone.conv2.weight.iter().copied()),
        ),
        (
            "backbone.conv2.bias".into(),
            model.backbone.conv2.bias.as_slice_mut().expect("standard layout"),
            flat(grads.backbone.conv2.bias.iter().copied()),
        ),
        (
            "backbone.conv3.weight".into(),
            model.backbone.conv3.weight.as_slice_mut().expect("standard layout"),
            flat(grads.backbone.conv3.weight.iter().copied()),
        ),
        (
            "backbone.conv3.bias".into(),
            model.backbone.conv3.bias.as_slice_mut().expect("standard layout"),
            flat(grads.backbone.conv3.bias.iter().copied()),
        ),
        (
            "fc1.weight".into(),
            model.fc1.weight.as_slice_mut().expect("standard layout"),
            flat(grads.fc1.weight.iter().copied()),
        ),
        (
            "fc1.bias".into(),
            model.fc1.bias.as_slice_mut().expect("standard layout"),
            flat(grads.fc1.bias.iter().copied()),
        ),
        (
            "fc2.weight".into(),
            model.fc2.weight.as_slice_mut().expect("standard layout"),
            flat(grads.fc2.weight.iter().copied()),
        ),
        (
            "fc2.bias".into(),
            model.fc2.bias.as_slice_mut().expect("standard layout"),
            flat(grads.fc2.bias.iter().copied()),
        ),
        (
            "token_emb".into(),
            model.token_emb.as_slice_mut().expect("standard layout"),
            flat(grads.token_emb.iter().copied()),
        ),
        (
            "logit_scale".into(),
            std::slice::from_mut(&mut model.logit_scale),
            vec![grads.logit_scale],
        ),
    ];
    opt.step(&mut pairs)
}

fn dense_adam_step(model: &mut DenseModel, grads: &DenseGrads, opt: &mut Adam) -> Result<()> {
    let mut pairs: Vec<(String, &mut [f64], Vec<f64>)> = vec![
        (
            "backbone.conv1.weight".into(),
            model.backbone.conv1.weight.as_slice_mut().expect("standard layout"),
            flat(grads.backbone.conv1.weight.iter().copied()),
        ),
        (
            "backbone.conv1.bias".into(),
            model.backbone.conv1.bias.as_slice_mut().expect("standard layout"),
            flat(grads.backbone.conv1.bias.iter().copied()),
        ),
        (
            "backbone.conv2.weight".into(),
            model.backbone.conv2.weight.as_slice_mut().expect("standard layout"),
            flat(grads.backbone.conv2.weight.iter().copied()),
        ),
        (
            "backbone.conv2.bias".into(),
            model.backbone.conv2.bias.as_slice_mut().expect("standard layout"),
            flat(grads.backbone.conv2.bias.iter().copied()),
        ),
        (
            "backbone.conv3.weight".into(),
            model.backbone.conv3.weight.as_slice_mut().expect("standard layout"),
            flat(grads.backbone.conv3.weight.iter().copied()),
        ),
        (
            "backbone.conv3.bias".into(),
            model.backbone.conv3.bias.as_slice_mut().expect("standard layout"),
            flat(grads.backbone.conv3.bias.iter().copied()),
        ),
        (
            "head.weight".into(),
            model.head.weight.as_slice_mut().expect("standard layout"),
            flat(grads.head.weight.iter().copied()),
        ),
        (
            "head.bias".into(),
            model.head.bias.as_slice_mut().expect("standard layout"),
            flat(grads.head.bias.iter().copied()),
        ),
    ];
    opt.step(&mut pairs)
}

/// Train the toy contrastive model and enforce the Recall@1 gate on the
/// test bank.
pub fn train_toy_clip(
    dataset: &Dataset,
    arch: &ArchConfig,
    cfg: &ClipTrainConfig,
    seed: u64,
) -> Result<(ClipModel, ClipTrainReport)> {
    let mut model = ClipModel::new_seeded(arch, vocabulary(), child_seed(seed, "init"));
    let mut opt = Adam::new(cfg.lr);
    let n = dataset.train.len();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    let test_captions: Vec<String> = dataset.test.iter().map(|s| s.caption.clone()).collect();
    let test_images: Vec<&ImageTensor> = dataset.test.iter().map(|s| &s.image).collect();

    for epoch in 0..cfg.epochs {
        // cosine decay to a tenth of the base rate
        let progress = epoch as f64 / cfg.epochs.max(1) as f64;
        opt.lr = cfg.lr * (0.55 + 0.45 * (std::f64::consts::PI * progress).cos());

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_from_seed(child_seed(
            seed,
            &format!("epoch:{epoch}"),
        )));
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            epoch_loss += clip_batch_step(&mut model, &mut opt, dataset, batch)?;
            batches += 1;
        }
        let mean = epoch_loss / batches.max(1) as f64;
        epoch_losses.push(mean);
        if log::log_enabled!(log::Level::Info) {
            let bank = TextBank::build(&model, test_captions.clone())?;
            let recall = recall_at_1(&model, &test_images, &bank)?;
            log::info!(
                "clip epoch {epoch}: loss {mean:.4}, test R@1 {recall:.3}, temp {:.4}",
                model.temperature()
            );
        }
    }

    let captions: Vec<String> = dataset.test.iter().map(|s| s.caption.clone()).collect();
    let bank = TextBank::build(&model, captions)?;
    let images: Vec<&ImageTensor> = dataset.test.iter().map(|s| &s.image).collect();
    let recall = recall_at_1(&model, &images, &bank)?;
    log::info!(
        "clip training done: test Recall@1 {recall:.3}, temperature {:.4}",
        model.temperature()
    );
    if recall < CLIP_RECALL_GATE {
        return Err(Error::GateFailure {
            model: "toy-clip".into(),
            metric: "recall_at_1",
            value: recall,
            threshold: CLIP_RECALL_GATE,
        });
    }
    let report = ClipTrainReport {
        epoch_losses,
        recall_at_1: recall,
        temperature: model.temperature(),
    };
    Ok((model, report))
}

/// One symmetric InfoNCE step over a batch of (image, caption) pairs.
fn clip_batch_step(
    model: &mut ClipModel,
    opt: &mut Adam,
    dataset: &Dataset,
    batch: &[usize],
) -> Result<f64> {
    let b = batch.len();
    let d = model.arch.embed_dim;

    let image_passes: Vec<_> = batch
        .par_iter()
        .map(|&i| model.image_embedding(&dataset.train[i].image))
        .collect();
    let text_passes: Vec<_> = batch
        .iter()
        .map(|&i| model.text_embedding(&dataset.train[i].caption))
        .collect::<Result<Vec<_>>>()?;

    let mut img_emb = Array2::zeros((b, d));
    let mut txt_emb = Array2::zeros((b, d));
    for (r, (e, _)) in image_passes.iter().enumerate() {
        img_emb.row_mut(r).assign(e);
    }
    for (r, (e, _)) in text_passes.iter().enumerate() {
        txt_emb.row_mut(r).assign(e);
    }

    let raw_scale = model.logit_scale.exp();
    let clamped = raw_scale > MAX_LOGIT_SCALE;
    let scale = raw_scale.min(MAX_LOGIT_SCALE);
    let cos = img_emb.dot(&txt_emb.t());
    let logits = &cos * scale;

    // Symmetric cross-entropy with the matched pair on the diagonal.
    // Identical captions inside a batch are genuine positives for each
    // other's images (their text embeddings coincide), so the target mass
    // is spread over the duplicate group instead of forcing an impossible
    // one-hot split.
    let captions: Vec<&str> = batch
        .iter()
        .map(|&i| dataset.train[i].caption.as_str())
        .collect();
    let positives: Vec<Vec<usize>> = (0..b)
        .map(|i| {
            (0..b)
                .filter(|&j| captions[j] == captions[i])
                .collect::<Vec<_>>()
        })
        .collect();

    let mut loss = 0.0;
    let mut d_logits = Array2::<f64>::zeros((b, b));
    let half = 1.0 / (2.0 * b as f64);
    for i in 0..b {
        let row: Vec<f64> = logits.row(i).to_vec();
        let lse = log_sum_exp(&row);
        let pos = &positives[i];
        let w = 1.0 / pos.len() as f64;
        for &j in pos {
            loss += (lse - row[j]) * half * w;
        }
        let p = softmax(&row);
        for j in 0..b {
            let target = if pos.contains(&j) { w } else { 0.0 };
            d_logits[[i, j]] += (p[j] - target) * half;
        }
    }
    for j in 0..b {
        let col: Vec<f64> = logits.column(j).to_vec();
        let lse = log_sum_exp(&col);
        let pos = &positives[j];
        let w = 1.0 / pos.len() as f64;
        for &i in pos {
            loss += (lse - col[i]) * half * w;
        }
        let p = softmax(&col);
        for i in 0..b {
            let target = if pos.contains(&i) { w } else { 0.0 };
            d_logits[[i, j]] += (p[i] - target) * half;
        }
    }

    let d_img = d_logits.dot(&txt_emb) * scale;
    let d_txt = d_logits.t().dot(&img_emb) * scale;
    let d_logit_scale = if clamped {
        0.0
    } else {
        (&d_logits * &cos).sum() * scale
    };

    // Per-sample image backward, parallel, reduced in batch order.
    let per_sample: Vec<_> = image_passes
        .par_iter()
        .enumerate()
        .map(|(r, (_, trace))| {
            let d_e = d_img.row(r).to_owned();
            let (_, grads) = model.image_embedding_backward(trace, &d_e, true);
            grads.expect("param grads requested")
        })
        .collect();

    let mut acc = ClipGrads::zeros(model);
    for (bb, fc1, fc2) in &per_sample {
        add_backbone_grads(&mut acc.backbone, bb);
        acc.fc1.weight += &fc1.weight;
        acc.fc1.bias += &fc1.bias;
        acc.fc2.weight += &fc2.weight;
        acc.fc2.bias += &fc2.bias;
    }
    for (r, (_, trace)) in text_passes.iter().enumerate() {
        let d_e = d_txt.row(r).to_owned();
        model.text_embedding_backward(trace, &d_e, &mut acc.token_emb);
    }
    acc.logit_scale = d_logit_scale;

    clip_adam_step(model, &acc, opt)?;
    Ok(loss)
}

/// Fine-tune a dense model (backbone initialized from the contrastive model,
/// or from scratch for the control run) and enforce the clean-metric gate.
pub fn derive_dense_model(
    clip_model: &ClipModel,
    head_kind: HeadKind,
    origin: BackboneOrigin,
    dataset: &Dataset,
    cfg: &DenseTrainConfig,
    seed: u64,
) -> Result<(DenseModel, DenseTrainReport)> {
    let arch = clip_model.arch;
    let backbone = match origin {
        BackboneOrigin::DerivedFromClip => clip_model.backbone.clone(),
        BackboneOrigin::Scratch => Backbone::new_seeded(&arch, child_seed(seed, "scratch")),
    };
    let mut model = DenseModel::from_backbone(
        backbone,
        head_kind,
        origin,
        &arch,
        child_seed(seed, "head"),
    )?;
    let mut opt = Adam::new(cfg.lr);
    let n = dataset.train.len();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_from_seed(child_seed(
            seed,
            &format!("epoch:{epoch}"),
        )));
        let mut epoch_loss = 0.0;
        let mut count = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let evals: Vec<(f64, DenseGrads)> = batch
                .par_iter()
                .map(|&i| {
                    let sample = &dataset.train[i];
                    let target = target_for(&model, sample);
                    let (loss, _, grads) = model.task_loss(&sample.image, target, true)?;
                    Ok((loss, grads.expect("param grads requested")))
                })
                .collect::<Result<Vec<_>>>()?;

            let inv = 1.0 / batch.len() as f64;
            let mut acc: Option<DenseGrads> = None;
            for (loss, g) in evals {
                epoch_loss += loss;
                count += 1;
                match &mut acc {
                    None => acc = Some(g),
                    Some(a) => {
                        add_backbone_grads(&mut a.backbone, &g.backbone);
                        a.head.weight += &g.head.weight;
                        a.head.bias += &g.head.bias;
                    }
                }
            }
            let mut acc = acc.expect("non-empty batch");
            scale_backbone_grads(&mut acc.backbone, inv);
            acc.head.weight *= inv;
            acc.head.bias *= inv;
            dense_adam_step(&mut model, &acc, &mut opt)?;
        }
        let mean = epoch_loss / count.max(1) as f64;
        epoch_losses.push(mean);
        log::info!("{} epoch {epoch}: loss {mean:.4}", head_kind.name());
    }

    let images: Vec<&ImageTensor> = dataset.test.iter().map(|s| &s.image).collect();
    let metric = eval_dense_model(&model, &images, &dataset.test)?;
    let metric_name = match head_kind {
        HeadKind::Segmentation => "miou",
        _ => "cell_map",
    };
    log::info!(
        "{} training done: clean {metric_name} {metric:.3}",
        head_kind.name()
    );
    if metric < DENSE_METRIC_GATE {
        return Err(Error::GateFailure {
            model: format!("dense-{}", head_kind.name()),
            metric: metric_name,
            value: metric,
            threshold: DENSE_METRIC_GATE,
        });
    }
    Ok((
        model,
        DenseTrainReport {
            epoch_losses,
            clean_metric: metric,
        },
    ))
}

/// Untrained-model retrieval baseline (chance level) used in tests.
pub fn untrained_recall(dataset: &Dataset, arch: &ArchConfig, seed: u64) -> Result<f64> {
    let model = ClipModel::new_seeded(arch, vocabulary(), seed);
    let captions: Vec<String> = dataset.test.iter().map(|s| s.caption.clone()).collect();
    let bank = TextBank::build(&model, captions)?;
    let images: Vec<&ImageTensor> = dataset.test.iter().map(|s| &s.image).collect();
    recall_at_1(&model, &images, &bank)
}

/// Reference a sample's image; keeps call sites terse.
pub fn image_refs(samples: &[SyntheticSample]) -> Vec<&ImageTensor> {
    samples.iter().map(|s| &s.image).collect()
}
