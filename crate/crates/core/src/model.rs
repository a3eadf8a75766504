//! Testbed models: a small convolutional backbone shared by the contrastive
//! image-text model and the dense-task models derived from it.
//!
//! All models consume `[0,1]` pixels directly (identity preprocessing, shared
//! by every model so one delta is meaningful to all of them) and expose
//! deterministic forward and input-gradient evaluation.

use crate::data::CellLabel;
use crate::error::{Error, Result};
use crate::image_tensor::{ImageTensor, PixelField};
use crate::nn::{
    avgpool2_backward, avgpool2_forward, concat_channels, lse_pool_backward, lse_pool_forward,
    normalize_backward, normalize_forward, silu_backward, silu_forward, silu_vec_backward,
    silu_vec_forward, softmax, split_channels, upsample2_backward, upsample2_forward, Conv2d,
    Conv2dGrad, Linear, LinearGrad,
};
use crate::seed::rng_from_seed;
use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const SEG_CLASSES: usize = crate::data::NUM_CLASSES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    ClipRetrieval,
    Segmentation,
    Detection,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::ClipRetrieval => "clip_retrieval",
            HeadKind::Segmentation => "segmentation",
            HeadKind::Detection => "detection",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneOrigin {
    Scratch,
    DerivedFromClip,
}

/// Channel widths, head sizes and the smooth-max pooling sharpness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub c1: usize,
    pub c2: usize,
    pub c3: usize,
    pub embed_dim: usize,
    pub head_hidden: usize,
    pub lse_beta: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            c1: 8,
            c2: 16,
            c3: 32,
            embed_dim: 32,
            head_hidden: 64,
            lse_beta: 10.0,
        }
    }
}

/// Convert an (H, W, C) image into the (C, H, W) layout the layers use.
pub fn hwc_to_chw(image: &ImageTensor) -> Array3<f64> {
    let (h, w, c) = image.dim();
    Array3::from_shape_fn((c, h, w), |(ci, y, x)| image.data()[[y, x, ci]])
}

/// Convert a (C, H, W) gradient back into image layout (H, W, C).
pub fn chw_to_hwc(field: &Array3<f64>) -> PixelField {
    let (c, h, w) = field.dim();
    Array3::from_shape_fn((h, w, c), |(y, x, ci)| field[[ci, y, x]])
}

// ---------------------------------------------------------------------------
// Backbone
// ---------------------------------------------------------------------------

/// Three stride-1 conv + SiLU + 2x2 average-pool stages: spatial resolution
/// shrinks 8x, so a 48px image yields 24/12/6 px feature maps.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub conv3: Conv2d,
}

#[derive(Debug, Clone)]
pub struct BackboneGrads {
    pub conv1: Conv2dGrad,
    pub conv2: Conv2dGrad,
    pub conv3: Conv2dGrad,
}

/// Intermediate activations needed by the backward pass.
pub struct BackboneTrace {
    pub z1: Array3<f64>,
    pub col1: Array2<f64>,
    pub f1: Array3<f64>,
    pub z2: Array3<f64>,
    pub col2: Array2<f64>,
    pub f2: Array3<f64>,
    pub z3: Array3<f64>,
    pub col3: Array2<f64>,
    pub f3: Array3<f64>,
}

impl Backbone {
    pub fn new_seeded(arch: &ArchConfig, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        Self {
            conv1: Conv2d::new_seeded(3, arch.c1, 3, &mut rng),
            conv2: Conv2d::new_seeded(arch.c1, arch.c2, 3, &mut rng),
            conv3: Conv2d::new_seeded(arch.c2, arch.c3, 3, &mut rng),
        }
    }

    pub fn forward(&self, x_chw: &Array3<f64>) -> BackboneTrace {
        let (z1, col1) = self.conv1.forward(x_chw);
        let f1 = avgpool2_forward(&silu_forward(&z1));
        let (z2, col2) = self.conv2.forward(&f1);
        let f2 = avgpool2_forward(&silu_forward(&z2));
        let (z3, col3) = self.conv3.forward(&f2);
        let f3 = avgpool2_forward(&silu_forward(&z3));
        BackboneTrace {
            z1,
            col1,
            f1,
            z2,
            col2,
            f2,
            z3,
            col3,
            f3,
        }
    }

    /// Backpropagate from the last feature map (plus optional gradient
    /// contributions injected at f1/f2 by skip connections) to the input.
    pub fn backward(
        &self,
        trace: &BackboneTrace,
        d_f3: &Array3<f64>,
        d_f2_extra: Option<&Array3<f64>>,
        d_f1_extra: Option<&Array3<f64>>,
        want_param_grads: bool,
    ) -> (Array3<f64>, Option<BackboneGrads>) {
        let (_, h3, w3) = trace.z3.dim();
        let ds3 = avgpool2_backward(d_f3, h3, w3);
        let dz3 = silu_backward(&trace.z3, &ds3);
        let (mut d_f2, g3) = self.conv3.backward(&trace.col3, &dz3, (h3, w3), want_param_grads);
        if let Some(extra) = d_f2_extra {
            d_f2 += extra;
        }

        let (_, h2, w2) = trace.z2.dim();
        let ds2 = avgpool2_backward(&d_f2, h2, w2);
        let dz2 = silu_backward(&trace.z2, &ds2);
        let (mut d_f1, g2) = self.conv2.backward(&trace.col2, &dz2, (h2, w2), want_param_grads);
        if let Some(extra) = d_f1_extra {
            d_f1 += extra;
        }

        let (_, h1, w1) = trace.z1.dim();
        let ds1 = avgpool2_backward(&d_f1, h1, w1);
        let dz1 = silu_backward(&trace.z1, &ds1);
        let (dx, g1) = self.conv1.backward(&trace.col1, &dz1, (h1, w1), want_param_grads);

        let grads = want_param_grads.then(|| BackboneGrads {
            conv1: g1.unwrap(),
            conv2: g2.unwrap(),
            conv3: g3.unwrap(),
        });
        (dx, grads)
    }

    fn named_tensors(&self) -> Vec<(String, TensorView<'_>)> {
        vec![
            ("backbone.conv1.weight".into(), TensorView::A2(&self.conv1.weight)),
            ("backbone.conv1.bias".into(), TensorView::A1(&self.conv1.bias)),
            ("backbone.conv2.weight".into(), TensorView::A2(&self.conv2.weight)),
            ("backbone.conv2.bias".into(), TensorView::A1(&self.conv2.bias)),
            ("backbone.conv3.weight".into(), TensorView::A2(&self.conv3.weight)),
            ("backbone.conv3.bias".into(), TensorView::A1(&self.conv3.bias)),
        ]
    }
}

/// SHA-256 over the backbone tensors in name order; identifies which weights
/// a derived model was initialized from and whether fine-tuning moved them.
pub fn backbone_checksum(backbone: &Backbone) -> String {
    let mut hasher = Sha256::new();
    for (name, view) in backbone.named_tensors() {
        hasher.update(name.as_bytes());
        for v in view.iter() {
            hasher.update(v.to_le_bytes());
        }
    }
    hex_digest(&hasher.finalize())
}

fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Contrastive image-text model
// ---------------------------------------------------------------------------

/// Dual-encoder toy: convolutional image encoder with smooth-max pooling
/// and a two-layer projection, embedding-average text encoder over the
/// closed caption vocabulary, learned logit scale.
#[derive(Debug, Clone)]
pub struct ClipModel {
    pub backbone: Backbone,
    pub fc1: Linear,
    pub fc2: Linear,
    pub token_emb: Array2<f64>,
    pub logit_scale: f64,
    pub vocab: Vec<String>,
    pub arch: ArchConfig,
}

pub struct ImageEmbedTrace {
    pub backbone: BackboneTrace,
    pub pooled: Array1<f64>,
    pub hidden_pre: Array1<f64>,
    pub hidden: Array1<f64>,
    pub embedding: Array1<f64>,
    pub norm: f64,
}

pub struct TextEmbedTrace {
    pub tokens: Vec<usize>,
    pub embedding: Array1<f64>,
    pub norm: f64,
}

#[derive(Debug, Clone)]
pub struct ClipGrads {
    pub backbone: BackboneGrads,
    pub fc1: LinearGrad,
    pub fc2: LinearGrad,
    pub token_emb: Array2<f64>,
    pub logit_scale: f64,
}

impl ClipModel {
    pub fn new_seeded(arch: &ArchConfig, vocab: Vec<String>, seed: u64) -> Self {
        let backbone = Backbone::new_seeded(arch, seed);
        let mut rng = rng_from_seed(crate::seed::child_seed(seed, "clip-head"));
        let fc1 = Linear::new_seeded(arch.c3, arch.head_hidden, &mut rng);
        let fc2 = Linear::new_seeded(arch.head_hidden, arch.embed_dim, &mut rng);
        let bound = (1.0 / arch.embed_dim as f64).sqrt();
        let token_emb = Array2::from_shape_simple_fn((vocab.len(), arch.embed_dim), || {
            use rand::Rng;
            rng.gen_range(-bound..bound)
        });
        Self {
            backbone,
            fc1,
            fc2,
            token_emb,
            // exp(2.659) ~ 1/0.07, the usual contrastive scale init
            logit_scale: 2.659,
            vocab,
            arch: *arch,
        }
    }

    /// Softmax temperature learned during training: probs = softmax(cos / T).
    pub fn temperature(&self) -> f64 {
        (-self.logit_scale).exp()
    }

    /// Unit-norm image embedding.
    pub fn image_embedding(&self, image: &ImageTensor) -> (Array1<f64>, ImageEmbedTrace) {
        let x = hwc_to_chw(image);
        let backbone = self.backbone.forward(&x);
        let pooled = lse_pool_forward(&backbone.f3, self.arch.lse_beta);
        let hidden_pre = self.fc1.forward(&pooled);
        let hidden = silu_vec_forward(&hidden_pre);
        let pre = self.fc2.forward(&hidden);
        let (embedding, norm) = normalize_forward(&pre);
        (
            embedding.clone(),
            ImageEmbedTrace {
                backbone,
                pooled,
                hidden_pre,
                hidden,
                embedding,
                norm,
            },
        )
    }

    /// Backpropagate a gradient on the unit-norm embedding to the input
    /// image (HWC layout) and optionally to the parameters.
    pub fn image_embedding_backward(
        &self,
        trace: &ImageEmbedTrace,
        d_embedding: &Array1<f64>,
        want_param_grads: bool,
    ) -> (PixelField, Option<(BackboneGrads, LinearGrad, LinearGrad)>) {
        let d_pre = normalize_backward(&trace.embedding, trace.norm, d_embedding);
        let (d_hidden, fc2_grads) = self.fc2.backward(&trace.hidden, &d_pre, want_param_grads);
        let d_hidden_pre = silu_vec_backward(&trace.hidden_pre, &d_hidden);
        let (d_pooled, fc1_grads) =
            self.fc1.backward(&trace.pooled, &d_hidden_pre, want_param_grads);
        let d_f3 = lse_pool_backward(&trace.backbone.f3, self.arch.lse_beta, &d_pooled);
        let (dx, bb_grads) =
            self.backbone
                .backward(&trace.backbone, &d_f3, None, None, want_param_grads);
        let grads =
            want_param_grads.then(|| (bb_grads.unwrap(), fc1_grads.unwrap(), fc2_grads.unwrap()));
        (chw_to_hwc(&dx), grads)
    }

    /// Unit-norm caption embedding: mean of token embeddings, normalized.
    pub fn text_embedding(&self, caption: &str) -> Result<(Array1<f64>, TextEmbedTrace)> {
        let tokens = crate::data::tokenize(caption, &self.vocab)?;
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty caption".into()));
        }
        let mut mean = Array1::zeros(self.arch.embed_dim);
        for &t in &tokens {
            mean += &self.token_emb.row(t);
        }
        mean /= tokens.len() as f64;
        let (embedding, norm) = normalize_forward(&mean);
        Ok((
            embedding.clone(),
            TextEmbedTrace {
                tokens,
                embedding,
                norm,
            },
        ))
    }

    /// Accumulate the gradient of a caption embedding into `d_token_emb`.
    pub fn text_embedding_backward(
        &self,
        trace: &TextEmbedTrace,
        d_embedding: &Array1<f64>,
        d_token_emb: &mut Array2<f64>,
    ) {
        let d_mean = normalize_backward(&trace.embedding, trace.norm, d_embedding);
        let scale = 1.0 / trace.tokens.len() as f64;
        for &t in &trace.tokens {
            let mut row = d_token_emb.row_mut(t);
            row += &(&d_mean * scale);
        }
    }

    /// Embeddings for a list of captions, row per caption.
    pub fn embed_captions(&self, captions: &[String]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((captions.len(), self.arch.embed_dim));
        for (i, caption) in captions.iter().enumerate() {
            let (emb, _) = self.text_embedding(caption)?;
            out.row_mut(i).assign(&emb);
        }
        Ok(out)
    }

    pub fn named_tensors(&self) -> Vec<(String, TensorView<'_>)> {
        let mut v = self.backbone.named_tensors();
        v.push(("fc1.weight".into(), TensorView::A2(&self.fc1.weight)));
        v.push(("fc1.bias".into(), TensorView::A1(&self.fc1.bias)));
        v.push(("fc2.weight".into(), TensorView::A2(&self.fc2.weight)));
        v.push(("fc2.bias".into(), TensorView::A1(&self.fc2.bias)));
        v.push(("token_emb".into(), TensorView::A2(&self.token_emb)));
        v.push(("logit_scale".into(), TensorView::Scalar(self.logit_scale)));
        v
    }
}

// ---------------------------------------------------------------------------
// Dense-task models
// ---------------------------------------------------------------------------

/// Head over the shared backbone: per-cell classification for detection
/// (1x1 conv on the 6x6 map) or per-pixel classification for segmentation
/// (1x1 conv on [f1 ⊕ up(f2)] at half resolution, upsampled to full).
#[derive(Debug, Clone)]
pub struct DenseModel {
    pub backbone: Backbone,
    pub head: Conv2d,
    pub head_kind: HeadKind,
    pub origin: BackboneOrigin,
    pub init_backbone_checksum: String,
    pub arch: ArchConfig,
}

#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub backbone: BackboneGrads,
    pub head: Conv2dGrad,
}

pub struct DenseTrace {
    pub backbone: BackboneTrace,
    pub head_col: Array2<f64>,
    pub head_in_dim: (usize, usize, usize),
    pub logits: Array3<f64>,
}

/// Ground truth for a dense head.
#[derive(Debug, Clone, Copy)]
pub enum TaskTarget<'a> {
    Segmentation(&'a ndarray::Array2<u8>),
    Detection(&'a ndarray::Array2<CellLabel>),
}

impl DenseModel {
    pub fn from_backbone(
        backbone: Backbone,
        head_kind: HeadKind,
        origin: BackboneOrigin,
        arch: &ArchConfig,
        head_seed: u64,
    ) -> Result<Self> {
        let mut rng = rng_from_seed(head_seed);
        let head = match head_kind {
            HeadKind::Detection => Conv2d::new_seeded(arch.c3, SEG_CLASSES, 1, &mut rng),
            HeadKind::Segmentation => {
                Conv2d::new_seeded(arch.c1 + arch.c2, SEG_CLASSES, 1, &mut rng)
            }
            HeadKind::ClipRetrieval => {
                return Err(Error::HeadMismatch {
                    head: "clip_retrieval is not a dense head",
                })
            }
        };
        let init_backbone_checksum = backbone_checksum(&backbone);
        Ok(Self {
            backbone,
            head,
            head_kind,
            origin,
            init_backbone_checksum,
            arch: *arch,
        })
    }

    /// Class logits: (10, grid, grid) for detection, (10, H, W) for
    /// segmentation.
    pub fn forward_logits(&self, image: &ImageTensor) -> DenseTrace {
        let x = hwc_to_chw(image);
        let backbone = self.backbone.forward(&x);
        match self.head_kind {
            HeadKind::Detection => {
                let (logits, col) = self.head.forward(&backbone.f3);
                let dim = backbone.f3.dim();
                DenseTrace {
                    backbone,
                    head_col: col,
                    head_in_dim: dim,
                    logits,
                }
            }
            _ => {
                let up = upsample2_forward(&backbone.f2);
                let cat = concat_channels(&backbone.f1, &up);
                let (logits_half, col) = self.head.forward(&cat);
                let logits = upsample2_forward(&logits_half);
                let dim = cat.dim();
                DenseTrace {
                    backbone,
                    head_col: col,
                    head_in_dim: dim,
                    logits,
                }
            }
        }
    }

    /// Backpropagate a gradient on the logits to the input image and
    /// optionally the parameters.
    pub fn backward_logits(
        &self,
        trace: &DenseTrace,
        d_logits: &Array3<f64>,
        want_param_grads: bool,
    ) -> (PixelField, Option<DenseGrads>) {
        let (dx, bb, head) = match self.head_kind {
            HeadKind::Detection => {
                let (d_f3, head_grads) = self.head.backward(
                    &trace.head_col,
                    d_logits,
                    (trace.head_in_dim.1, trace.head_in_dim.2),
                    want_param_grads,
                );
                let (dx, bb_grads) = self.backbone.backward(
                    &trace.backbone,
                    &d_f3,
                    None,
                    None,
                    want_param_grads,
                );
                (dx, bb_grads, head_grads)
            }
            _ => {
                let d_half = upsample2_backward(d_logits);
                let (d_cat, head_grads) = self.head.backward(
                    &trace.head_col,
                    &d_half,
                    (trace.head_in_dim.1, trace.head_in_dim.2),
                    want_param_grads,
                );
                let (d_f1, d_up) = split_channels(&d_cat, self.arch.c1);
                let d_f2 = upsample2_backward(&d_up);
                let zero_f3 = Array3::zeros(trace.backbone.f3.dim());
                let (dx, bb_grads) = self.backbone.backward(
                    &trace.backbone,
                    &zero_f3,
                    Some(&d_f2),
                    Some(&d_f1),
                    want_param_grads,
                );
                (dx, bb_grads, head_grads)
            }
        };
        let grads = want_param_grads.then(|| DenseGrads {
            backbone: bb.unwrap(),
            head: head.unwrap(),
        });
        (chw_to_hwc(&dx), grads)
    }

    /// Mean cross-entropy over positions plus its gradients.
    pub fn task_loss(
        &self,
        image: &ImageTensor,
        target: TaskTarget<'_>,
        want_param_grads: bool,
    ) -> Result<(f64, PixelField, Option<DenseGrads>)> {
        let target_ids = self.target_class_grid(image, target)?;
        let trace = self.forward_logits(image);
        let (loss, d_logits) = cross_entropy_grid(&trace.logits, &target_ids);
        let (dx, grads) = self.backward_logits(&trace, &d_logits, want_param_grads);
        Ok((loss, dx, grads))
    }

    /// Class predictions: argmax over logits per position, plus the
    /// objectness score `1 - P(background)` for detection.
    pub fn predict(&self, image: &ImageTensor) -> DensePrediction {
        let trace = self.forward_logits(image);
        let (k, h, w) = trace.logits.dim();
        let mut classes = ndarray::Array2::<u8>::zeros((h, w));
        let mut scores = ndarray::Array2::<f64>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let logits: Vec<f64> = (0..k).map(|c| trace.logits[[c, y, x]]).collect();
                let probs = softmax(&logits);
                let mut best = 0usize;
                for c in 1..k {
                    if probs[c] > probs[best] {
                        best = c;
                    }
                }
                classes[[y, x]] = best as u8;
                scores[[y, x]] = 1.0 - probs[0];
            }
        }
        DensePrediction { classes, scores }
    }

    fn target_class_grid(
        &self,
        image: &ImageTensor,
        target: TaskTarget<'_>,
    ) -> Result<ndarray::Array2<u8>> {
        match (self.head_kind, target) {
            (HeadKind::Segmentation, TaskTarget::Segmentation(mask)) => {
                if mask.dim() != (image.height(), image.width()) {
                    return Err(Error::ShapeMismatch {
                        context: "segmentation target",
                        expected: vec![image.height(), image.width()],
                        found: mask.shape().to_vec(),
                    });
                }
                Ok(mask.to_owned())
            }
            (HeadKind::Detection, TaskTarget::Detection(cells)) => {
                Ok(cells.mapv(|l| if l.objectness == 1 { l.class } else { 0 }))
            }
            (head, _) => Err(Error::HeadMismatch { head: head.name() }),
        }
    }
}

/// Per-position class predictions with objectness scores.
#[derive(Debug, Clone)]
pub struct DensePrediction {
    pub classes: ndarray::Array2<u8>,
    /// `1 - P(background)` per position.
    pub scores: ndarray::Array2<f64>,
}

/// Mean cross-entropy over all positions of a class-id grid; returns the
/// loss and its gradient with respect to the logits.
pub fn cross_entropy_grid(
    logits: &Array3<f64>,
    target: &ndarray::Array2<u8>,
) -> (f64, Array3<f64>) {
    let (k, h, w) = logits.dim();
    debug_assert_eq!((h, w), target.dim());
    let scale = 1.0 / (h * w) as f64;
    let mut loss = 0.0;
    let mut d_logits = Array3::zeros((k, h, w));
    for y in 0..h {
        for x in 0..w {
            let row: Vec<f64> = (0..k).map(|c| logits[[c, y, x]]).collect();
            let lse = crate::nn::log_sum_exp(&row);
            let t = target[[y, x]] as usize;
            loss += (lse - row[t]) * scale;
            let probs = softmax(&row);
            for c in 0..k {
                d_logits[[c, y, x]] = (probs[c] - if c == t { 1.0 } else { 0.0 }) * scale;
            }
        }
    }
    (loss, d_logits)
}

// ---------------------------------------------------------------------------
// The spec-level input-gradient entry point
// ---------------------------------------------------------------------------

/// A model handle for gradient evaluation.
#[derive(Clone, Copy)]
pub enum ModelRef<'a> {
    Clip(&'a ClipModel),
    Dense(&'a DenseModel),
}

/// What to differentiate against.
pub enum GradientTarget<'a> {
    Task(TaskTarget<'a>),
    /// KL objective against the cached clean-image distribution.
    ClipKl {
        clean: &'a ImageTensor,
        bank: &'a crate::objective::TextBank,
    },
}

/// Deterministic (loss, input-gradient) evaluation used by all attacks.
pub fn input_gradient(
    model: ModelRef<'_>,
    image: &ImageTensor,
    target: &GradientTarget<'_>,
) -> Result<(f64, PixelField)> {
    match (model, target) {
        (ModelRef::Dense(m), GradientTarget::Task(t)) => {
            let (loss, grad, _) = m.task_loss(image, *t, false)?;
            Ok((loss, grad))
        }
        (ModelRef::Clip(m), GradientTarget::ClipKl { clean, bank }) => {
            let p = crate::objective::clip_distribution(m, clean, bank, m.temperature())?;
            let (kl, grad) = crate::objective::clip_kl_objective(m, &p, image, bank)?;
            Ok((kl, grad))
        }
        (ModelRef::Dense(_), GradientTarget::ClipKl { .. }) => Err(Error::HeadMismatch {
            head: "dense model cannot evaluate the KL objective",
        }),
        (ModelRef::Clip(_), GradientTarget::Task(_)) => Err(Error::HeadMismatch {
            head: "clip_retrieval",
        }),
    }
}

// ---------------------------------------------------------------------------
// Checkpoint serialization: flat binary of named f64 arrays + JSON manifest
// ---------------------------------------------------------------------------

pub enum TensorView<'a> {
    A1(&'a Array1<f64>),
    A2(&'a Array2<f64>),
    Scalar(f64),
}

impl TensorView<'_> {
    fn dims(&self) -> Vec<u32> {
        match self {
            TensorView::A1(a) => vec![a.len() as u32],
            TensorView::A2(a) => vec![a.dim().0 as u32, a.dim().1 as u32],
            TensorView::Scalar(_) => vec![],
        }
    }

    fn iter(&self) -> Box<dyn Iterator<Item = f64> + '_> {
        match self {
            TensorView::A1(a) => Box::new(a.iter().copied()),
            TensorView::A2(a) => Box::new(a.iter().copied()),
            TensorView::Scalar(v) => Box::new(std::iter::once(*v)),
        }
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"MTCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Write named tensors as `MTCK | version | count | entries...` where each
/// entry is `name_len:u16 | name | ndim:u8 | dims:u32* | data:f64-le*`.
pub fn write_checkpoint(path: &Path, tensors: &[(String, TensorView<'_>)]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, view) in tensors {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let dims = view.dims();
        buf.push(dims.len() as u8);
        for d in &dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in view.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    atomic_write(path, &buf)
}

/// Write-to-temp-then-rename so partially written artifacts never appear.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub struct RawTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, RawTensor)>> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name not utf8".into()))?;
        let ndim = take(&mut pos, 1)?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let len: usize = dims.iter().product::<usize>().max(1);
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
        }
        out.push((name, RawTensor { dims, data }));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    pub kind: String,
    pub head_kind: HeadKind,
    pub backbone_origin: BackboneOrigin,
    /// Checksum of the backbone this model was initialized from (derived
    /// models record their parent; scratch models record their own init).
    pub init_backbone_checksum: String,
    /// Checksum of the backbone as stored.
    pub backbone_checksum: String,
    pub arch: ArchConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vec<String>>,
    pub hyperparams: serde_json::Value,
    pub metrics: serde_json::Value,
}

pub fn save_clip_model(
    model: &ClipModel,
    hyperparams: serde_json::Value,
    metrics: serde_json::Value,
    prefix: &Path,
) -> Result<()> {
    let manifest = ModelManifest {
        format_version: CHECKPOINT_VERSION,
        kind: "clip".into(),
        head_kind: HeadKind::ClipRetrieval,
        backbone_origin: BackboneOrigin::Scratch,
        init_backbone_checksum: backbone_checksum(&model.backbone),
        backbone_checksum: backbone_checksum(&model.backbone),
        arch: model.arch,
        vocab: Some(model.vocab.clone()),
        hyperparams,
        metrics,
    };
    write_checkpoint(&prefix.with_extension("bin"), &model.named_tensors())?;
    atomic_write(
        &prefix.with_extension("json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )
}

pub fn save_dense_model(
    model: &DenseModel,
    hyperparams: serde_json::Value,
    metrics: serde_json::Value,
    prefix: &Path,
) -> Result<()> {
    let mut tensors = model.backbone.named_tensors();
    tensors.push(("head.weight".into(), TensorView::A2(&model.head.weight)));
    tensors.push(("head.bias".into(), TensorView::A1(&model.head.bias)));
    let manifest = ModelManifest {
        format_version: CHECKPOINT_VERSION,
        kind: "dense".into(),
        head_kind: model.head_kind,
        backbone_origin: model.origin,
        init_backbone_checksum: model.init_backbone_checksum.clone(),
        backbone_checksum: backbone_checksum(&model.backbone),
        arch: model.arch,
        vocab: None,
        hyperparams,
        metrics,
    };
    write_checkpoint(&prefix.with_extension("bin"), &tensors)?;
    atomic_write(
        &prefix.with_extension("json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )
}

fn take_tensor(
    map: &mut std::collections::BTreeMap<String, RawTensor>,
    name: &str,
) -> Result<RawTensor> {
    map.remove(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
}

fn fill_a2(dst: &mut Array2<f64>, raw: RawTensor, name: &str) -> Result<()> {
    let expect = vec![dst.dim().0, dst.dim().1];
    if raw.dims != expect {
        return Err(Error::Checkpoint(format!(
            "tensor `{name}` has dims {:?}, expected {:?}",
            raw.dims, expect
        )));
    }
    *dst = Array2::from_shape_vec(dst.dim(), raw.data).expect("validated dims");
    Ok(())
}

fn fill_a1(dst: &mut Array1<f64>, raw: RawTensor, name: &str) -> Result<()> {
    if raw.dims != vec![dst.len()] {
        return Err(Error::Checkpoint(format!(
            "tensor `{name}` has dims {:?}, expected [{}]",
            raw.dims,
            dst.len()
        )));
    }
    *dst = Array1::from_vec(raw.data);
    Ok(())
}

fn load_backbone_into(
    backbone: &mut Backbone,
    map: &mut std::collections::BTreeMap<String, RawTensor>,
) -> Result<()> {
    fill_a2(&mut backbone.conv1.weight, take_tensor(map, "backbone.conv1.weight")?, "backbone.conv1.weight")?;
    fill_a1(&mut backbone.conv1.bias, take_tensor(map, "backbone.conv1.bias")?, "backbone.conv1.bias")?;
    fill_a2(&mut backbone.conv2.weight, take_tensor(map, "backbone.conv2.weight")?, "backbone.conv2.weight")?;
    fill_a1(&mut backbone.conv2.bias, take_tensor(map, "backbone.conv2.bias")?, "backbone.conv2.bias")?;
    fill_a2(&mut backbone.conv3.weight, take_tensor(map, "backbone.conv3.weight")?, "backbone.conv3.weight")?;
    fill_a1(&mut backbone.conv3.bias, take_tensor(map, "backbone.conv3.bias")?, "backbone.conv3.bias")?;
    Ok(())
}

pub fn load_clip_model(prefix: &Path) -> Result<(ClipModel, ModelManifest)> {
    let manifest: ModelManifest =
        serde_json::from_str(&std::fs::read_to_string(prefix.with_extension("json"))?)?;
    let vocab = manifest
        .vocab
        .clone()
        .ok_or_else(|| Error::Checkpoint("clip manifest lacks vocab".into()))?;
    let mut model = ClipModel::new_seeded(&manifest.arch, vocab, 0);
    let mut map: std::collections::BTreeMap<String, RawTensor> =
        read_checkpoint(&prefix.with_extension("bin"))?
            .into_iter()
            .collect();
    load_backbone_into(&mut model.backbone, &mut map)?;
    fill_a2(&mut model.fc1.weight, take_tensor(&mut map, "fc1.weight")?, "fc1.weight")?;
    fill_a1(&mut model.fc1.bias, take_tensor(&mut map, "fc1.bias")?, "fc1.bias")?;
    fill_a2(&mut model.fc2.weight, take_tensor(&mut map, "fc2.weight")?, "fc2.weight")?;
    fill_a1(&mut model.fc2.bias, take_tensor(&mut map, "fc2.bias")?, "fc2.bias")?;
    fill_a2(&mut model.token_emb, take_tensor(&mut map, "token_emb")?, "token_emb")?;
    model.logit_scale = take_tensor(&mut map, "logit_scale")?
        .data
        .first()
        .copied()
        .ok_or_else(|| Error::Checkpoint("logit_scale empty".into()))?;
    if !map.is_empty() {
        return Err(Error::Checkpoint(format!(
            "unexpected tensors: {:?}",
            map.keys().collect::<Vec<_>>()
        )));
    }
    if backbone_checksum(&model.backbone) != manifest.backbone_checksum {
        return Err(Error::Checkpoint("backbone checksum mismatch".into()));
    }
    Ok((model, manifest))
}

pub fn load_dense_model(prefix: &Path) -> Result<(DenseModel, ModelManifest)> {
    let manifest: ModelManifest =
        serde_json::from_str(&std::fs::read_to_string(prefix.with_extension("json"))?)?;
    let backbone = Backbone::new_seeded(&manifest.arch, 0);
    let mut model = DenseModel::from_backbone(
        backbone,
        manifest.head_kind,
        manifest.backbone_origin,
        &manifest.arch,
        0,
    )?;
    let mut map: std::collections::BTreeMap<String, RawTensor> =
        read_checkpoint(&prefix.with_extension("bin"))?
            .into_iter()
            .collect();
    load_backbone_into(&mut model.backbone, &mut map)?;
    fill_a2(&mut model.head.weight, take_tensor(&mut map, "head.weight")?, "head.weight")?;
    fill_a1(&mut model.head.bias, take_tensor(&mut map, "head.bias")?, "head.bias")?;
    if !map.is_empty() {
        return Err(Error::Checkpoint(format!(
            "unexpected tensors: {:?}",
            map.keys().collect::<Vec<_>>()
        )));
    }
    model.init_backbone_checksum = manifest.init_backbone_checksum.clone();
    if backbone_checksum(&model.backbone) != manifest.backbone_checksum {
        return Err(Error::Checkpoint("backbone checksum mismatch".into()));
    }
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{vocabulary, CellLabel};
    use ndarray::Array2;

    fn test_image(seed: u64) -> ImageTensor {
        let mut rng = rng_from_seed(seed);
        let data = Array3::from_shape_simple_fn((48, 48, 3), || {
            use rand::Rng;
            f64::from(rng.gen_range(0..=255u8)) / 255.0
        });
        ImageTensor::new(data).unwrap()
    }

    #[test]
    fn image_embedding_is_unit_norm_and_deterministic() {
        let model = ClipModel::new_seeded(&ArchConfig::default(), vocabulary(), 1);
        let img = test_image(2);
        let (e1, _) = model.image_embedding(&img);
        let (e2, _) = model.image_embedding(&img);
        assert_eq!(e1, e2);
        assert!((e1.dot(&e1).sqrt() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn text_embedding_is_unit_norm() {
        let model = ClipModel::new_seeded(&ArchConfig::default(), vocabulary(), 1);
        let (e, _) = model.text_embedding("a red circle and a blue square").unwrap();
        assert!((e.dot(&e).sqrt() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn dense_forward_shapes() {
        let arch = ArchConfig::default();
        let det = DenseModel::from_backbone(
            Backbone::new_seeded(&arch, 3),
            HeadKind::Detection,
            BackboneOrigin::Scratch,
            &arch,
            4,
        )
        .unwrap();
        let img = test_image(5);
        assert_eq!(det.forward_logits(&img).logits.dim(), (10, 6, 6));

        let seg = DenseModel::from_backbone(
            Backbone::new_seeded(&arch, 3),
            HeadKind::Segmentation,
            BackboneOrigin::Scratch,
            &arch,
            4,
        )
        .unwrap();
        assert_eq!(seg.forward_logits(&img).logits.dim(), (10, 48, 48));
    }

    #[test]
    fn task_loss_rejects_mismatched_target() {
        let arch = ArchConfig::default();
        let det = DenseModel::from_backbone(
            Backbone::new_seeded(&arch, 3),
            HeadKind::Detection,
            BackboneOrigin::Scratch,
            &arch,
            4,
        )
        .unwrap();
        let img = test_image(6);
        let mask = Array2::<u8>::zeros((48, 48));
        assert!(matches!(
            det.task_loss(&img, TaskTarget::Segmentation(&mask), false),
            Err(Error::HeadMismatch { .. })
        ));
    }

    #[test]
    fn uniform_logits_give_log_k_loss() {
        let logits = Array3::zeros((10, 6, 6));
        let target = Array2::<u8>::zeros((6, 6));
        let (loss, _) = cross_entropy_grid(&logits, &target);
        assert!((loss - (10.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn input_gradient_shape_and_determinism() {
        let arch = ArchConfig::default();
        let det = DenseModel::from_backbone(
            Backbone::new_seeded(&arch, 3),
            HeadKind::Detection,
            BackboneOrigin::Scratch,
            &arch,
            4,
        )
        .unwrap();
        let img = test_image(7);
        let cells = Array2::from_elem((6, 6), CellLabel { objectness: 0, class: 0 });
        let target = GradientTarget::Task(TaskTarget::Detection(&cells));
        let (l1, g1) = input_gradient(ModelRef::Dense(&det), &img, &target).unwrap();
        let (l2, g2) = input_gradient(ModelRef::Dense(&det), &img, &target).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
        assert_eq!(g1.dim(), img.dim());
    }

    #[test]
    fn clip_checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("clip");
        let model = ClipModel::new_seeded(&ArchConfig::default(), vocabulary(), 9);
        save_clip_model(&model, serde_json::json!({}), serde_json::json!({}), &prefix).unwrap();
        let (loaded, manifest) = load_clip_model(&prefix).unwrap();
        assert_eq!(manifest.kind, "clip");
        let img = test_image(10);
        let (e1, _) = model.image_embedding(&img);
        let (e2, _) = loaded.image_embedding(&img);
        assert_eq!(e1, e2);
        assert_eq!(model.logit_scale, loaded.logit_scale);
    }

    #[test]
    fn dense_checkpoint_roundtrip_and_checksums() {
        let dir = tempfile::tempdir().unwrap();
        let arch = ArchConfig::default();
        let model = DenseModel::from_backbone(
            Backbone::new_seeded(&arch, 11),
            HeadKind::Segmentation,
            BackboneOrigin::DerivedFromClip,
            &arch,
            12,
        )
        .unwrap();
        let prefix = dir.path().join("seg");
        save_dense_model(&model, serde_json::json!({}), serde_json::json!({}), &prefix).unwrap();
        let (loaded, manifest) = load_dense_model(&prefix).unwrap();
        assert_eq!(manifest.head_kind, HeadKind::Segmentation);
        assert_eq!(
            backbone_checksum(&loaded.backbone),
            backbone_checksum(&model.backbone)
        );
        let img = test_image(13);
        let a = model.forward_logits(&img).logits;
        let b = loaded.forward_logits(&img).logits;
        assert_eq!(a, b);
    }
}
