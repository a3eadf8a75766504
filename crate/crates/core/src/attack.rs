//! The four attack procedures: single-task PGD, joint optimization, the
//! staged task→CLIP attack (fine-grained first, KL refinement second), and
//! the order-reversed ablation.

use crate::data::SyntheticSample;
use crate::error::{Error, Result};
use crate::image_tensor::ImageTensor;
use crate::model::{ClipModel, DenseModel, HeadKind};
use crate::objective::{
    clip_distribution, clip_kl_objective, joint_objective, target_for, task_objective, TextBank,
};
use crate::perturb::{
    compose_perturbations, pgd_ascent, BudgetSplit, Perturbation, PgdConfig, StageTag, BUDGET_TOL,
};
use crate::seed::child_seed;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// PGD against one model only: task loss for dense heads, the KL
    /// objective for the retrieval head.
    SingleTask,
    /// PGD on `L_task + w * KL` under one ball.
    Joint,
    /// Stage I on the task loss, stage II refining with the KL objective.
    MtAdvClip,
    /// Stage I on the KL objective, stage II on the task loss.
    OrderReversed,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::SingleTask => "single_task",
            Strategy::Joint => "joint",
            Strategy::MtAdvClip => "mt_advclip",
            Strategy::OrderReversed => "order_reversed",
        }
    }
}

/// L∞ budget for an attack: one ball, or a per-stage split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetSpec {
    Single { eps: f64 },
    Split { eps_task: f64, eps_clip: f64 },
}

impl BudgetSpec {
    pub fn eps_total(&self) -> f64 {
        match self {
            BudgetSpec::Single { eps } => *eps,
            BudgetSpec::Split { eps_task, eps_clip } => eps_task + eps_clip,
        }
    }

    pub fn split(&self) -> Result<BudgetSplit> {
        match self {
            BudgetSpec::Single { .. } => Err(Error::InvalidArgument(
                "staged strategies need a split budget".into(),
            )),
            BudgetSpec::Split { eps_task, eps_clip } => {
                BudgetSplit::from_parts(*eps_task, *eps_clip)
            }
        }
    }
}

/// Full description of one attack run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub strategy: Strategy,
    /// The model the task-loss component targets; `clip_retrieval` selects
    /// the KL objective and is only valid for `single_task`.
    pub task_head: HeadKind,
    pub budget: BudgetSpec,
    pub stage1: PgdConfig,
    pub stage2: PgdConfig,
    pub joint_weight: f64,
}

impl AttackSpec {
    pub fn validate(&self) -> Result<()> {
        self.stage1.validate()?;
        match self.strategy {
            Strategy::SingleTask | Strategy::Joint => {
                if !matches!(self.budget, BudgetSpec::Single { .. }) {
                    return Err(Error::InvalidArgument(format!(
                        "{} takes a single budget",
                        self.strategy.name()
                    )));
                }
            }
            Strategy::MtAdvClip | Strategy::OrderReversed => {
                self.stage2.validate()?;
                let split = self.budget.split()?;
                if self.strategy == Strategy::MtAdvClip && !split.is_canonical() {
                    log::warn!(
                        "mt_advclip with lambda = {:.3} <= 1 (legal ablation; the canonical \
                         configuration weights the task stage more)",
                        split.lambda
                    );
                }
            }
        }
        if self.task_head == HeadKind::ClipRetrieval && self.strategy != Strategy::SingleTask {
            return Err(Error::InvalidArgument(format!(
                "{} requires a dense task head",
                self.strategy.name()
            )));
        }
        if self.strategy == Strategy::Joint && self.joint_weight < 0.0 {
            return Err(Error::InvalidArgument(
                "joint weight must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Stable identifier used for artifact paths and report rows.
    pub fn combo_id(&self) -> String {
        let budget = match self.budget {
            BudgetSpec::Single { eps } => format!("eps{:.0}", eps * 255.0),
            BudgetSpec::Split { eps_task, eps_clip } => {
                format!("t{:.0}c{:.0}", eps_task * 255.0, eps_clip * 255.0)
            }
        };
        let head = match self.task_head {
            HeadKind::ClipRetrieval => "clip",
            HeadKind::Segmentation => "seg",
            HeadKind::Detection => "det",
        };
        format!(
            "{}_{}_{}_it{}",
            self.strategy.name(),
            head,
            budget,
            self.stage1.iterations
        )
    }
}

/// Per-sample attack record. Deltas are stored per stage; the composed delta
/// folds the final clamp residual so `clean + delta_composed` quantizes to
/// the stored adversarial image exactly.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub sample_id: u64,
    pub delta_task: Perturbation,
    pub delta_clip: Perturbation,
    pub delta_composed: Perturbation,
    pub adversarial: ImageTensor,
    pub stage1_losses: Vec<f64>,
    pub stage2_losses: Vec<f64>,
    /// Gradient-conflict diagnostic per joint-objective evaluation.
    pub grad_cosines: Vec<Option<f64>>,
    /// Stage II failed numerically; this is the stage-I-only result.
    pub partial: bool,
}

impl AttackResult {
    /// Re-check the budget invariants from the stored arrays.
    pub fn verify_budgets(&self, clean: &ImageTensor, eps_total: f64) -> Result<()> {
        let diff = self.adversarial.max_abs_diff(clean);
        if diff > eps_total + BUDGET_TOL {
            return Err(Error::InvalidArgument(format!(
                "budget violated: |adv - clean| = {diff} > {eps_total}"
            )));
        }
        if self
            .adversarial
            .data()
            .iter()
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::InvalidArgument("adversarial image out of range".into()));
        }
        for (delta, label) in [
            (&self.delta_task, "task"),
            (&self.delta_clip, "clip"),
            (&self.delta_composed, "composed"),
        ] {
            let norm = delta.linf_norm();
            if norm > delta.budget() + BUDGET_TOL {
                return Err(Error::InvalidArgument(format!(
                    "{label} delta exceeds its budget: {norm} > {}",
                    delta.budget()
                )));
            }
        }
        Ok(())
    }
}

fn wrap_sample_err(sample_id: u64) -> impl Fn(Error) -> Error {
    move |e| match e {
        e @ Error::OracleFailure { .. } => e,
        other => Error::OracleFailure {
            sample_id,
            source: Box::new(other),
        },
    }
}

/// PGD against a dense model's task loss under the full budget.
pub fn attack_single_task_dense(
    model: &DenseModel,
    sample: &SyntheticSample,
    eps: f64,
    cfg: &PgdConfig,
) -> Result<AttackResult> {
    let target = target_for(model, sample);
    let mut oracle =
        |img: &ImageTensor| task_objective(model, img, target).map_err(wrap_sample_err(sample.id));
    let out = pgd_ascent(&mut oracle, &sample.image, eps, cfg, StageTag::Task)
        .map_err(wrap_sample_err(sample.id))?;
    let zero_clip = Perturbation::zeros_like(&sample.image, 0.0, StageTag::Clip);
    let composed = compose_perturbations(&out.delta, &zero_clip, &sample.image)?;
    Ok(AttackResult {
        sample_id: sample.id,
        delta_task: out.delta,
        delta_clip: zero_clip,
        delta_composed: composed.delta,
        adversarial: composed.adversarial,
        stage1_losses: out.losses,
        stage2_losses: Vec::new(),
        grad_cosines: Vec::new(),
        partial: false,
    })
}

/// PGD maximizing the KL objective against the retrieval model under the
/// full budget.
pub fn attack_single_task_clip(
    model: &ClipModel,
    bank: &TextBank,
    sample: &SyntheticSample,
    eps: f64,
    cfg: &PgdConfig,
) -> Result<AttackResult> {
    let p = clip_distribution(model, &sample.image, bank, model.temperature())
        .map_err(wrap_sample_err(sample.id))?;
    let mut oracle = |img: &ImageTensor| {
        clip_kl_objective(model, &p, img, bank).map_err(wrap_sample_err(sample.id))
    };
    let out = pgd_ascent(&mut oracle, &sample.image, eps, cfg, StageTag::Clip)
        .map_err(wrap_sample_err(sample.id))?;
    let zero_task = Perturbation::zeros_like(&sample.image, 0.0, StageTag::Task);
    let composed = compose_perturbations(&zero_task, &out.delta, &sample.image)?;
    Ok(AttackResult {
        sample_id: sample.id,
        delta_task: zero_task,
        delta_clip: out.delta,
        delta_composed: composed.delta,
        adversarial: composed.adversarial,
        stage1_losses: out.losses,
        stage2_losses: Vec::new(),
        grad_cosines: Vec::new(),
        partial: false,
    })
}

/// PGD on the weighted joint objective under one ball. The per-evaluation
/// gradient cosine between the two components is recorded.
pub fn attack_joint(
    task_model: &DenseModel,
    clip_model: &ClipModel,
    bank: &TextBank,
    sample: &SyntheticSample,
    eps: f64,
    weight: f64,
    cfg: &PgdConfig,
) -> Result<AttackResult> {
    let target = target_for(task_model, sample);
    let p = clip_distribution(clip_model, &sample.image, bank, clip_model.temperature())
        .map_err(wrap_sample_err(sample.id))?;
    let mut cosines: Vec<Option<f64>> = Vec::new();
    let mut oracle = |img: &ImageTensor| {
        let (loss, grad, parts) =
            joint_objective(task_model, clip_model, img, target, &p, bank, weight)
                .map_err(wrap_sample_err(sample.id))?;
        cosines.push(parts.grad_cosine);
        Ok((loss, grad))
    };
    let out = pgd_ascent(&mut oracle, &sample.image, eps, cfg, StageTag::Task)
        .map_err(wrap_sample_err(sample.id))?;
    let zero_clip = Perturbation::zeros_like(&sample.image, 0.0, StageTag::Clip);
    let composed = compose_perturbations(&out.delta, &zero_clip, &sample.image)?;
    Ok(AttackResult {
        sample_id: sample.id,
        delta_task: out.delta,
        delta_clip: zero_clip,
        delta_composed: composed.delta,
        adversarial: composed.adversarial,
        stage1_losses: out.losses,
        stage2_losses: Vec::new(),
        grad_cosines: cosines,
        partial: false,
    })
}

/// Stage I: PGD on the task loss within `eps_task` around the clean image.
/// Stage II: starting from the stage-I output, PGD maximizing
/// `KL(p_clean ‖ q)` within `eps_clip`; the two deltas are then composed.
///
/// A numerical failure in stage II returns the stage-I-only result flagged
/// as partial rather than aborting the sample.
pub fn attack_mt_advclip(
    task_model: &DenseModel,
    clip_model: &ClipModel,
    bank: &TextBank,
    sample: &SyntheticSample,
    split: &BudgetSplit,
    stage1_cfg: &PgdConfig,
    stage2_cfg: &PgdConfig,
) -> Result<AttackResult> {
    let target = target_for(task_model, sample);
    let mut task_oracle =
        |img: &ImageTensor| task_objective(task_model, img, target).map_err(wrap_sample_err(sample.id));
    let stage1 = pgd_ascent(
        &mut task_oracle,
        &sample.image,
        split.eps_task,
        stage1_cfg,
        StageTag::Task,
    )
    .map_err(wrap_sample_err(sample.id))?;

    let stage1_image =
        crate::perturb::clamp_valid_field(&(sample.image.data() + stage1.delta.delta()));
    let p = clip_distribution(clip_model, &sample.image, bank, clip_model.temperature())
        .map_err(wrap_sample_err(sample.id))?;
    let mut kl_oracle = |img: &ImageTensor| {
        clip_kl_objective(clip_model, &p, img, bank).map_err(wrap_sample_err(sample.id))
    };
    let stage2 = pgd_ascent(
        &mut kl_oracle,
        &stage1_image,
        split.eps_clip,
        stage2_cfg,
        StageTag::Clip,
    );
    let (delta_clip, stage2_losses, partial) = resolve_stage_two(
        stage2,
        Perturbation::zeros_like(&sample.image, split.eps_clip, StageTag::Clip),
        sample.id,
    )?;

    let composed = compose_perturbations(&stage1.delta, &delta_clip, &sample.image)?;
    Ok(AttackResult {
        sample_id: sample.id,
        delta_task: stage1.delta,
        delta_clip,
        delta_composed: composed.delta,
        adversarial: composed.adversarial,
        stage1_losses: stage1.losses,
        stage2_losses,
        grad_cosines: Vec::new(),
        partial,
    })
}

/// The order ablation: stage I maximizes KL within `eps_clip`, stage II the
/// task loss within `eps_task` around the stage-I output.
pub fn attack_order_reversed(
    task_model: &DenseModel,
    clip_model: &ClipModel,
    bank: &TextBank,
    sample: &SyntheticSample,
    split: &BudgetSplit,
    stage1_cfg: &PgdConfig,
    stage2_cfg: &PgdConfig,
) -> Result<AttackResult> {
    let p = clip_distribution(clip_model, &sample.image, bank, clip_model.temperature())
        .map_err(wrap_sample_err(sample.id))?;
    let mut kl_oracle = |img: &ImageTensor| {
        clip_kl_objective(clip_model, &p, img, bank).map_err(wrap_sample_err(sample.id))
    };
    let stage1 = pgd_ascent(
        &mut kl_oracle,
        &sample.image,
        split.eps_clip,
        stage1_cfg,
        StageTag::Clip,
    )
    .map_err(wrap_sample_err(sample.id))?;

    let stage1_image =
        crate::perturb::clamp_valid_field(&(sample.image.data() + stage1.delta.delta()));
    let target = target_for(task_model, sample);
    let mut task_oracle =
        |img: &ImageTensor| task_objective(task_model, img, target).map_err(wrap_sample_err(sample.id));
    let stage2 = pgd_ascent(
        &mut task_oracle,
        &stage1_image,
        split.eps_task,
        stage2_cfg,
        StageTag::Task,
    );
    let (delta_task, stage2_losses, partial) = resolve_stage_two(
        stage2,
        Perturbation::zeros_like(&sample.image, split.eps_task, StageTag::Task),
        sample.id,
    )?;

    let composed = compose_perturbations(&delta_task, &stage1.delta, &sample.image)?;
    Ok(AttackResult {
        sample_id: sample.id,
        delta_task,
        delta_clip: stage1.delta,
        delta_composed: composed.delta,
        adversarial: composed.adversarial,
        stage1_losses: stage1.losses,
        stage2_losses,
        grad_cosines: Vec::new(),
        partial,
    })
}

fn is_numerical(e: &Error) -> bool {
    match e {
        Error::NumericalFailure { .. } => true,
        Error::OracleFailure { source, .. } => is_numerical(source),
        _ => false,
    }
}

/// Partial-failure policy: a numerical failure in stage II keeps the
/// stage-I-only result (zero stage-II delta, flagged partial); other errors
/// abort the sample.
fn resolve_stage_two(
    outcome: Result<crate::perturb::PgdOutcome>,
    fallback: Perturbation,
    sample_id: u64,
) -> Result<(Perturbation, Vec<f64>, bool)> {
    match outcome {
        Ok(out) => Ok((out.delta, out.losses, false)),
        Err(e) if is_numerical(&e) => {
            log::warn!("stage II failed for sample {sample_id}: {e}; keeping stage-I-only result");
            Ok((fallback, Vec::new(), true))
        }
        Err(e) => Err(e),
    }
}

/// Dispatch one attack according to the spec, deriving per-stage PGD seeds
/// from `sample_stream` (strategy-independent, so strategies that degenerate
/// into one another stay bit-identical under a shared seed).
pub fn run_attack(
    spec: &AttackSpec,
    task_model: Option<&DenseModel>,
    clip_model: &ClipModel,
    bank: &TextBank,
    sample: &SyntheticSample,
    sample_stream: u64,
) -> Result<AttackResult> {
    spec.validate()?;
    let stage1 = PgdConfig {
        seed: child_seed(sample_stream, "stage1"),
        ..spec.stage1
    };
    let stage2 = PgdConfig {
        seed: child_seed(sample_stream, "stage2"),
        ..spec.stage2
    };
    let task = task_model.ok_or_else(|| {
        Error::InvalidArgument("strategy requires a dense task model".into())
    });
    match (spec.strategy, spec.task_head) {
        (Strategy::SingleTask, HeadKind::ClipRetrieval) => {
            attack_single_task_clip(clip_model, bank, sample, spec.budget.eps_total(), &stage1)
        }
        (Strategy::SingleTask, _) => {
            attack_single_task_dense(task?, sample, spec.budget.eps_total(), &stage1)
        }
        (Strategy::Joint, _) => attack_joint(
            task?,
            clip_model,
            bank,
            sample,
            spec.budget.eps_total(),
            spec.joint_weight,
            &stage1,
        ),
        (Strategy::MtAdvClip, _) => attack_mt_advclip(
            task?,
            clip_model,
            bank,
            sample,
            &spec.budget.split()?,
            &stage1,
            &stage2,
        ),
        (Strategy::OrderReversed, _) => attack_order_reversed(
            task?,
            clip_model,
            bank,
            sample,
            &spec.budget.split()?,
            &stage1,
            &stage2,
        ),
    }
}

/// Attack every sample in parallel. Per-sample randomness comes from the
/// sample's own stream, so results are independent of worker count and
/// merge order.
pub fn attack_samples(
    spec: &AttackSpec,
    task_model: Option<&DenseModel>,
    clip_model: &ClipModel,
    bank: &TextBank,
    samples: &[SyntheticSample],
    attack_seed: u64,
) -> Vec<(u64, Result<AttackResult>)> {
    samples
        .par_iter()
        .map(|sample| {
            let stream = child_seed(attack_seed, &sample.id.to_string());
            (
                sample.id,
                run_attack(spec, task_model, clip_model, bank, sample, stream),
            )
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Artifact persistence: adversarial PNG, 16-bit signed delta dumps, metadata
// ---------------------------------------------------------------------------

/// Scale of the i16 delta encoding: `stored = round(delta * 255 * 256)`.
/// Deltas on the 1/255 grid (clean-start attacks with grid-aligned step and
/// budget) encode exactly; random-start deltas quantize to 1/(255*256).
pub const DELTA_I16_SCALE: f64 = 255.0 * 256.0;

const DELTA_MAGIC: &[u8; 4] = b"MTDL";

/// Raw i16 delta dump: `MTDL | version:u32 | h:u32 | w:u32 | c:u32 | i16-le*`.
pub fn write_delta_i16(path: &Path, delta: &Perturbation) -> Result<()> {
    let (h, w, c) = delta.delta().dim();
    let mut buf = Vec::with_capacity(16 + 2 * h * w * c);
    buf.extend_from_slice(DELTA_MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    for d in [h, w, c] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in delta.delta() {
        let q = (v * DELTA_I16_SCALE).round();
        if !(f64::from(i16::MIN)..=f64::from(i16::MAX)).contains(&q) {
            return Err(Error::InvalidArgument(format!(
                "delta value {v} outside the i16 dump range"
            )));
        }
        buf.extend_from_slice(&(q as i16).to_le_bytes());
    }
    crate::model::atomic_write(path, &buf)
}

pub fn read_delta_i16(path: &Path) -> Result<ndarray::Array3<f64>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 20 || &bytes[..4] != DELTA_MAGIC {
        return Err(Error::Checkpoint("bad delta dump header".into()));
    }
    let dim = |off: usize| {
        u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as usize
    };
    let (h, w, c) = (dim(8), dim(12), dim(16));
    let expected = 20 + 2 * h * w * c;
    if bytes.len() != expected {
        return Err(Error::Checkpoint("truncated delta dump".into()));
    }
    let data: Vec<f64> = bytes[20..]
        .chunks_exact(2)
        .map(|b| f64::from(i16::from_le_bytes([b[0], b[1]])) / DELTA_I16_SCALE)
        .collect();
    ndarray::Array3::from_shape_vec((h, w, c), data)
        .map_err(|_| Error::Checkpoint("delta dump shape corrupt".into()))
}

/// Per-sample attack metadata persisted next to the image artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackResultMeta {
    pub sample_id: u64,
    pub combo_id: String,
    pub spec: AttackSpec,
    pub stage1_losses: Vec<f64>,
    pub stage2_losses: Vec<f64>,
    pub grad_cosines: Vec<Option<f64>>,
    pub partial: bool,
    pub eps_task: f64,
    pub eps_clip: f64,
}

/// Write one sample's artifacts into `dir`:
/// `adv_<id>.png`, `delta_{task,clip,composed}_<id>.bin`, `meta_<id>.json`.
pub fn persist_attack_result(
    dir: &Path,
    spec: &AttackSpec,
    result: &AttackResult,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let id = result.sample_id;
    result.adversarial.save_png(&dir.join(format!("adv_{id:05}.png")))?;
    write_delta_i16(&dir.join(format!("delta_task_{id:05}.bin")), &result.delta_task)?;
    write_delta_i16(&dir.join(format!("delta_clip_{id:05}.bin")), &result.delta_clip)?;
    write_delta_i16(
        &dir.join(format!("delta_composed_{id:05}.bin")),
        &result.delta_composed,
    )?;
    let meta = AttackResultMeta {
        sample_id: id,
        combo_id: spec.combo_id(),
        spec: spec.clone(),
        stage1_losses: result.stage1_losses.clone(),
        stage2_losses: result.stage2_losses.clone(),
        grad_cosines: result.grad_cosines.clone(),
        partial: result.partial,
        eps_task: result.delta_task.budget(),
        eps_clip: result.delta_clip.budget(),
    };
    crate::model::atomic_write(
        &dir.join(format!("meta_{id:05}.json")),
        serde_json::to_string_pretty(&meta)?.as_bytes(),
    )
}

/// True when all artifacts of a sample exist in `dir`.
pub fn attack_result_exists(dir: &Path, sample_id: u64) -> bool {
    dir.join(format!("meta_{sample_id:05}.json")).exists()
        && dir.join(format!("adv_{sample_id:05}.png")).exists()
        && dir.join(format!("delta_composed_{sample_id:05}.bin")).exists()
}

/// Reload a persisted attack result. The i16 dumps are exact for
/// grid-aligned (clean-start) runs; for random-start runs the decoded
/// deltas carry 1/(255*256) quantization and are re-projected onto their
/// stage budgets.
pub fn load_attack_result(dir: &Path, sample_id: u64) -> Result<(AttackResult, AttackResultMeta)> {
    let meta: AttackResultMeta = serde_json::from_str(&std::fs::read_to_string(
        dir.join(format!("meta_{sample_id:05}.json")),
    )?)?;
    let adversarial =
        crate::image_tensor::ImageTensor::load_png(&dir.join(format!("adv_{sample_id:05}.png")))?;
    let load_delta = |name: &str, budget: f64, stage: StageTag| -> Result<Perturbation> {
        let field = read_delta_i16(&dir.join(format!("delta_{name}_{sample_id:05}.bin")))?;
        let projected = crate::perturb::project_linf_field(&field, budget)?;
        Perturbation::new(projected, budget, stage)
    };
    let delta_task = load_delta("task", meta.eps_task, StageTag::Task)?;
    let delta_clip = load_delta("clip", meta.eps_clip, StageTag::Clip)?;
    let delta_composed = load_delta(
        "composed",
        meta.eps_task + meta.eps_clip,
        StageTag::Composed,
    )?;
    Ok((
        AttackResult {
            sample_id,
            delta_task,
            delta_clip,
            delta_composed,
            adversarial,
            stage1_losses: meta.stage1_losses.clone(),
            stage2_losses: meta.stage2_losses.clone(),
            grad_cosines: meta.grad_cosines.clone(),
            partial: meta.partial,
        },
        meta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, vocabulary, DatasetSpec};
    use crate::model::{ArchConfig, Backbone, BackboneOrigin};
    use crate::perturb::InitMode;

    const EPS_8: f64 = 8.0 / 255.0;
    const STEP: f64 = 2.0 / 255.0;

    struct Fixture {
        dataset: crate::data::Dataset,
        clip: ClipModel,
        det: DenseModel,
        bank: TextBank,
    }

    fn fixture() -> Fixture {
        let dataset = generate_dataset(&DatasetSpec {
            train: 4,
            val: 1,
            test: 6,
            seed: 31,
            ..DatasetSpec::default()
        })
        .unwrap();
        let arch = ArchConfig::default();
        let clip = ClipModel::new_seeded(&arch, vocabulary(), 32);
        let det = DenseModel::from_backbone(
            Backbone::new_seeded(&arch, 33),
            HeadKind::Detection,
            BackboneOrigin::Scratch,
            &arch,
            34,
        )
        .unwrap();
        let captions: Vec<String> = dataset.test.iter().map(|s| s.caption.clone()).collect();
        let bank = TextBank::build(&clip, captions).unwrap();
        Fixture {
            dataset,
            clip,
            det,
            bank,
        }
    }

    fn cfg(iterations: usize) -> PgdConfig {
        PgdConfig::new(STEP, iterations)
    }

    #[test]
    fn zero_budget_attack_leaves_image_unchanged() {
        let fx = fixture();
        let sample = &fx.dataset.test[0];
        let result = attack_single_task_dense(&fx.det, sample, 0.0, &cfg(10)).unwrap();
        assert_eq!(result.adversarial.max_abs_diff(&sample.image), 0.0);
        assert_eq!(result.delta_composed.linf_norm(), 0.0);
    }

    #[test]
    fn single_task_dense_respects_budget_and_raises_loss() {
        let fx = fixture();
        let sample = &fx.dataset.test[1];
        let result = attack_single_task_dense(&fx.det, sample, EPS_8, &cfg(10)).unwrap();
        result.verify_budgets(&sample.image, EPS_8).unwrap();
        assert!(result.stage1_losses.last().unwrap() >= result.stage1_losses.first().unwrap());
    }

    #[test]
    fn joint_weight_zero_is_bit_identical_to_dense_single_task() {
        let fx = fixture();
        for sample in fx.dataset.test.iter().take(2) {
            let single = attack_single_task_dense(&fx.det, sample, EPS_8, &cfg(10)).unwrap();
            let joint =
                attack_joint(&fx.det, &fx.clip, &fx.bank, sample, EPS_8, 0.0, &cfg(10)).unwrap();
            assert!(single
                .delta_composed
                .delta()
                .iter()
                .zip(joint.delta_composed.delta().iter())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
            assert_eq!(single.adversarial, joint.adversarial);
        }
    }

    #[test]
    fn mt_advclip_with_zero_clip_budget_degenerates_to_single_task() {
        let fx = fixture();
        let sample = &fx.dataset.test[0];
        let split = BudgetSplit::from_parts(EPS_8, 0.0).unwrap();
        let staged =
            attack_mt_advclip(&fx.det, &fx.clip, &fx.bank, sample, &split, &cfg(10), &cfg(10))
                .unwrap();
        let single = attack_single_task_dense(&fx.det, sample, EPS_8, &cfg(10)).unwrap();
        assert!(staged
            .delta_composed
            .delta()
            .iter()
            .zip(single.delta_composed.delta().iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(staged.adversarial, single.adversarial);
        assert!(!staged.partial);
    }

    #[test]
    fn both_stage_orders_respect_the_total_budget() {
        let fx = fixture();
        let sample = &fx.dataset.test[2];
        let split = BudgetSplit::from_parts(6.0 / 255.0, 2.0 / 255.0).unwrap();
        let fwd =
            attack_mt_advclip(&fx.det, &fx.clip, &fx.bank, sample, &split, &cfg(10), &cfg(10))
                .unwrap();
        fwd.verify_budgets(&sample.image, EPS_8).unwrap();
        assert!(fwd.delta_task.linf_norm() <= split.eps_task + BUDGET_TOL);
        assert!(fwd.delta_clip.linf_norm() <= split.eps_clip + BUDGET_TOL);

        let rev = attack_order_reversed(
            &fx.det, &fx.clip, &fx.bank, sample, &split, &cfg(10), &cfg(10),
        )
        .unwrap();
        rev.verify_budgets(&sample.image, EPS_8).unwrap();
        assert!(rev.delta_task.linf_norm() <= split.eps_task + BUDGET_TOL);
        assert!(rev.delta_clip.linf_norm() <= split.eps_clip + BUDGET_TOL);
    }

    #[test]
    fn oracle_failures_carry_sample_identity() {
        let fx = fixture();
        let sample = &fx.dataset.test[0];
        let mut broken = fx.clip.clone();
        broken.fc1.weight[[0, 0]] = f64::NAN;
        let split = BudgetSplit::from_parts(6.0 / 255.0, 2.0 / 255.0).unwrap();
        let err = attack_mt_advclip(
            &fx.det, &broken, &fx.bank, sample, &split, &cfg(2), &cfg(2),
        )
        .unwrap_err();
        assert!(matches!(err, Error::OracleFailure { sample_id, .. } if sample_id == sample.id));
    }

    #[test]
    fn stage_two_numerical_failure_yields_partial_result() {
        let fallback = Perturbation::zeros_like(
            &ImageTensor::zeros(4, 4, 3),
            2.0 / 255.0,
            StageTag::Clip,
        );
        let failure: Result<crate::perturb::PgdOutcome> = Err(Error::NumericalFailure {
            context: "oracle loss".into(),
        });
        let (delta, losses, partial) = resolve_stage_two(failure, fallback, 7).unwrap();
        assert!(partial);
        assert!(losses.is_empty());
        assert_eq!(delta.linf_norm(), 0.0);

        // non-numerical errors abort the sample
        let fallback = Perturbation::zeros_like(
            &ImageTensor::zeros(4, 4, 3),
            2.0 / 255.0,
            StageTag::Clip,
        );
        let hard: Result<crate::perturb::PgdOutcome> =
            Err(Error::InvalidArgument("bad config".into()));
        assert!(resolve_stage_two(hard, fallback, 7).is_err());
    }

    #[test]
    fn random_init_attacks_are_reproducible_per_seed() {
        let fx = fixture();
        let sample = &fx.dataset.test[3];
        let spec = AttackSpec {
            strategy: Strategy::MtAdvClip,
            task_head: HeadKind::Detection,
            budget: BudgetSpec::Split {
                eps_task: 6.0 / 255.0,
                eps_clip: 2.0 / 255.0,
            },
            stage1: cfg(4).with_init(InitMode::RandomUniform),
            stage2: cfg(4).with_init(InitMode::RandomUniform),
            joint_weight: 1.0,
        };
        let a = run_attack(&spec, Some(&fx.det), &fx.clip, &fx.bank, sample, 99).unwrap();
        let b = run_attack(&spec, Some(&fx.det), &fx.clip, &fx.bank, sample, 99).unwrap();
        assert_eq!(a.adversarial, b.adversarial);
        let c = run_attack(&spec, Some(&fx.det), &fx.clip, &fx.bank, sample, 100).unwrap();
        assert_ne!(c.adversarial, a.adversarial);
    }

    #[test]
    fn grid_aligned_artifacts_roundtrip_exactly() {
        let fx = fixture();
        let sample = &fx.dataset.test[1];
        let spec = AttackSpec {
            strategy: Strategy::MtAdvClip,
            task_head: HeadKind::Detection,
            budget: BudgetSpec::Split {
                eps_task: 6.0 / 255.0,
                eps_clip: 2.0 / 255.0,
            },
            stage1: cfg(6),
            stage2: cfg(6),
            joint_weight: 1.0,
        };
        let result = run_attack(&spec, Some(&fx.det), &fx.clip, &fx.bank, sample, 55).unwrap();
        let dir = tempfile::tempdir().unwrap();
        persist_attack_result(dir.path(), &spec, &result).unwrap();

        // clean-start grid-aligned attack: i16 dump decodes to the exact
        // quantized delta, and clean + delta reproduces the adversarial PNG
        let composed = read_delta_i16(
            &dir.path().join(format!("delta_composed_{:05}.bin", sample.id)),
        )
        .unwrap();
        let adv = ImageTensor::load_png(
            &dir.path().join(format!("adv_{:05}.png", sample.id)),
        )
        .unwrap();
        let reconstructed: Vec<u8> = sample
            .image
            .data()
            .iter()
            .zip(composed.iter())
            .map(|(&x, &d)| crate::image_tensor::quantize_u8(x + d))
            .collect();
        assert_eq!(reconstructed, adv.to_rgb8().unwrap());
        let meta: AttackResultMeta = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join(format!("meta_{:05}.json", sample.id)))
                .unwrap(),
        )
        .unwrap();
        assert_eq!(meta.sample_id, sample.id);
        assert_eq!(meta.stage1_losses.len(), 7);
    }

    #[test]
    fn attack_spec_validation_catches_mismatches() {
        let base = AttackSpec {
            strategy: Strategy::MtAdvClip,
            task_head: HeadKind::Detection,
            budget: BudgetSpec::Single { eps: EPS_8 },
            stage1: cfg(10),
            stage2: cfg(10),
            joint_weight: 1.0,
        };
        assert!(base.validate().is_err()); // staged strategy with single budget

        let clip_joint = AttackSpec {
            strategy: Strategy::Joint,
            task_head: HeadKind::ClipRetrieval,
            budget: BudgetSpec::Single { eps: EPS_8 },
            ..base.clone()
        };
        assert!(clip_joint.validate().is_err());
    }
}
