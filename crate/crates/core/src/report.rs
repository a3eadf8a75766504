//! Comparison-table assembly and report emission.
//!
//! A run produces one consolidated JSON report plus one CSV per table tag.
//! CSV schema (format_version 1), one row per strategy × budget × model:
//!
//! ```text
//! combo_id,strategy,attacked,eval_dense,iterations,eps_total_255,
//! eps_task_255,eps_clip_255,clean_task,adv_task,asr_task,clean_r1,adv_r1,
//! asr_r1,partial,failed
//! ```
//!
//! ASR columns are printed to one decimal place in CSV; the JSON carries
//! full precision. Every ASR cell recomputes from its clean/adversarial
//! metric cells.

use crate::attack::{AttackResult, AttackSpec, BudgetSpec, Strategy};
use crate::error::{Error, Result};
use crate::eval::{asr, eval_dense_model, recall_at_1_indexed};
use crate::image_tensor::ImageTensor;
use crate::model::{atomic_write, ClipModel, DenseModel, HeadKind};
use crate::objective::{ConflictReport, TextBank};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// One attack combo with its per-sample outcomes, ready for evaluation.
pub struct ComboOutcome {
    pub spec: AttackSpec,
    /// Which dense model the task-metric column uses (the attacked model
    /// for dense-targeting combos; detection for retrieval-only combos).
    pub eval_dense: HeadKind,
    /// Table tags this combo contributes to (e.g. "table1").
    pub tables: Vec<String>,
    pub results: Vec<AttackResult>,
    /// Hard per-sample failures (id, error text).
    pub failures: Vec<(u64, String)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CleanMetrics {
    pub detection_map: f64,
    pub segmentation_miou: f64,
    pub recall_at_1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub combo_id: String,
    pub strategy: String,
    /// The model the attack optimized against.
    pub attacked: String,
    /// The dense model the task metric was computed on.
    pub eval_dense: String,
    pub iterations: usize,
    pub eps_total_255: f64,
    pub eps_task_255: Option<f64>,
    pub eps_clip_255: Option<f64>,
    pub clean_task: f64,
    pub adv_task: f64,
    pub asr_task: f64,
    pub clean_r1: f64,
    pub adv_r1: f64,
    pub asr_r1: f64,
    pub partial: usize,
    pub failed: usize,
    pub tables: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConflictSummary {
    /// Median cosine from the standalone probe diagnostic.
    pub probe_median: Option<f64>,
    /// Median per-iteration cosine logged during joint attacks.
    pub joint_median: Option<f64>,
    pub flagged_samples: usize,
}

/// The consolidated evaluation record. Timestamps and wall-clock live in the
/// run record, not here: report bytes are a pure function of (config, seed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub format_version: u32,
    pub seed: u64,
    pub config_echo: serde_json::Value,
    pub clean: CleanMetrics,
    pub rows: Vec<MetricRow>,
    /// Missing cells (per-sample failures), never silently zeroed.
    pub gaps: Vec<String>,
    pub conflict: Option<ConflictSummary>,
}

impl MetricRow {
    /// Eq. 8 self-consistency: the stored ASR cells recompute exactly from
    /// the stored metric cells.
    pub fn asr_recomputes(&self) -> bool {
        let task_ok = asr(self.clean_task, self.adv_task)
            .map(|v| v.to_bits() == self.asr_task.to_bits())
            .unwrap_or(false);
        let r1_ok = asr(self.clean_r1, self.adv_r1)
            .map(|v| v.to_bits() == self.asr_r1.to_bits())
            .unwrap_or(false);
        task_ok && r1_ok
    }
}

/// Evaluate every combo against the models and assemble the report.
pub fn run_evaluation_suite(
    det_model: &DenseModel,
    seg_model: &DenseModel,
    clip_model: &ClipModel,
    bank: &TextBank,
    test_samples: &[crate::data::SyntheticSample],
    combos: &[ComboOutcome],
    config_echo: serde_json::Value,
    seed: u64,
    conflict: Option<&ConflictReport>,
    joint_cosines: &[f64],
) -> Result<MetricReport> {
    let clean_images: Vec<&ImageTensor> = test_samples.iter().map(|s| &s.image).collect();
    let clean = CleanMetrics {
        detection_map: eval_dense_model(det_model, &clean_images, test_samples)?,
        segmentation_miou: eval_dense_model(seg_model, &clean_images, test_samples)?,
        recall_at_1: {
            let pairs: Vec<(&ImageTensor, usize)> = clean_images
                .iter()
                .enumerate()
                .map(|(i, img)| (*img, i))
                .collect();
            recall_at_1_indexed(clip_model, &pairs, bank)?
        },
    };

    let mut rows = Vec::with_capacity(combos.len());
    let mut gaps = Vec::new();
    for combo in combos {
        let row = evaluate_combo(
            combo,
            det_model,
            seg_model,
            clip_model,
            bank,
            test_samples,
            &clean,
            &mut gaps,
        )?;
        rows.push(row);
    }

    let conflict_summary = conflict.map(|report| ConflictSummary {
        probe_median: report.median_cosine,
        joint_median: median(joint_cosines),
        flagged_samples: report.flagged,
    });

    Ok(MetricReport {
        format_version: REPORT_FORMAT_VERSION,
        seed,
        config_echo,
        clean,
        rows,
        gaps,
        conflict: conflict_summary,
    })
}

fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    Some(sorted[sorted.len() / 2])
}

#[allow(clippy::too_many_arguments)]
fn evaluate_combo(
    combo: &ComboOutcome,
    det_model: &DenseModel,
    seg_model: &DenseModel,
    clip_model: &ClipModel,
    bank: &TextBank,
    test_samples: &[crate::data::SyntheticSample],
    clean: &CleanMetrics,
    gaps: &mut Vec<String>,
) -> Result<MetricRow> {
    let combo_id = combo.spec.combo_id();
    for (id, msg) in &combo.failures {
        gaps.push(format!("{combo_id}: sample {id} failed: {msg}"));
    }

    // Pair each surviving result with its sample by id.
    let by_id: std::collections::BTreeMap<u64, &AttackResult> =
        combo.results.iter().map(|r| (r.sample_id, r)).collect();
    let mut adv_images: Vec<&ImageTensor> = Vec::new();
    let mut adv_samples: Vec<crate::data::SyntheticSample> = Vec::new();
    let mut retrieval_pairs: Vec<(&ImageTensor, usize)> = Vec::new();
    for (idx, sample) in test_samples.iter().enumerate() {
        if let Some(result) = by_id.get(&sample.id) {
            adv_images.push(&result.adversarial);
            adv_samples.push(sample.clone());
            retrieval_pairs.push((&result.adversarial, idx));
        }
    }
    if adv_images.is_empty() {
        return Err(Error::MissingArtifact(format!(
            "combo {combo_id} has no successful samples"
        )));
    }

    let (eval_model, clean_task) = match combo.eval_dense {
        HeadKind::Segmentation => (seg_model, clean.segmentation_miou),
        _ => (det_model, clean.detection_map),
    };
    let adv_task = eval_dense_model(eval_model, &adv_images, &adv_samples)?;
    let adv_r1 = recall_at_1_indexed(clip_model, &retrieval_pairs, bank)?;

    let (eps_task, eps_clip) = match combo.spec.budget {
        BudgetSpec::Single { .. } => (None, None),
        BudgetSpec::Split { eps_task, eps_clip } => {
            (Some(eps_task * 255.0), Some(eps_clip * 255.0))
        }
    };
    let attacked = match (combo.spec.strategy, combo.spec.task_head) {
        (Strategy::SingleTask, HeadKind::ClipRetrieval) => "clip".to_string(),
        (_, head) => match head {
            HeadKind::Detection => "det".into(),
            HeadKind::Segmentation => "seg".into(),
            HeadKind::ClipRetrieval => "clip".into(),
        },
    };

    Ok(MetricRow {
        combo_id,
        strategy: combo.spec.strategy.name().to_string(),
        attacked,
        eval_dense: match combo.eval_dense {
            HeadKind::Segmentation => "seg".into(),
            _ => "det".into(),
        },
        iterations: combo.spec.stage1.iterations,
        eps_total_255: combo.spec.budget.eps_total() * 255.0,
        eps_task_255: eps_task,
        eps_clip_255: eps_clip,
        clean_task,
        adv_task,
        asr_task: asr(clean_task, adv_task)?,
        clean_r1: clean.recall_at_1,
        adv_r1,
        asr_r1: asr(clean.recall_at_1, adv_r1)?,
        partial: combo.results.iter().filter(|r| r.partial).count(),
        failed: combo.failures.len(),
        tables: combo.tables.clone(),
    })
}

/// Write `report.json` plus one `<tag>.csv` per table tag. Returns the
/// written paths. Output bytes are deterministic for a fixed report.
pub fn write_report(report: &MetricReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let json_path = dir.join("report.json");
    atomic_write(&json_path, serde_json::to_string_pretty(report)?.as_bytes())?;
    written.push(json_path);

    let tags: BTreeSet<&String> = report.rows.iter().flat_map(|r| r.tables.iter()).collect();
    for tag in tags {
        let path = dir.join(format!("{tag}.csv"));
        let mut csv = String::from(
            "combo_id,strategy,attacked,eval_dense,iterations,eps_total_255,eps_task_255,\
             eps_clip_255,clean_task,adv_task,asr_task,clean_r1,adv_r1,asr_r1,partial,failed\n",
        );
        for row in report.rows.iter().filter(|r| r.tables.contains(tag)) {
            let opt = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_default();
            csv.push_str(&format!(
                "{},{},{},{},{},{:.2},{},{},{:.4},{:.4},{:.1},{:.4},{:.4},{:.1},{},{}\n",
                row.combo_id,
                row.strategy,
                row.attacked,
                row.eval_dense,
                row.iterations,
                row.eps_total_255,
                opt(row.eps_task_255),
                opt(row.eps_clip_255),
                row.clean_task,
                row.adv_task,
                row.asr_task,
                row.clean_r1,
                row.adv_r1,
                row.asr_r1,
                row.partial,
                row.failed,
            ));
        }
        atomic_write(&path, csv.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(asr_task: f64) -> MetricRow {
        MetricRow {
            combo_id: "x".into(),
            strategy: "single_task".into(),
            attacked: "det".into(),
            eval_dense: "det".into(),
            iterations: 10,
            eps_total_255: 8.0,
            eps_task_255: None,
            eps_clip_255: None,
            clean_task: 0.9,
            adv_task: 0.09,
            asr_task,
            clean_r1: 0.8,
            adv_r1: 0.4,
            asr_r1: asr(0.8, 0.4).unwrap(),
            partial: 0,
            failed: 0,
            tables: vec!["table1".into()],
        }
    }

    #[test]
    fn asr_self_consistency_detects_tampering() {
        let good = row(asr(0.9, 0.09).unwrap());
        assert!(good.asr_recomputes());
        let bad = row(12.0);
        assert!(!bad.asr_recomputes());
    }

    #[test]
    fn report_bytes_are_deterministic() {
        let report = MetricReport {
            format_version: REPORT_FORMAT_VERSION,
            seed: 7,
            config_echo: serde_json::json!({"x": 1}),
            clean: CleanMetrics {
                detection_map: 0.9,
                segmentation_miou: 0.8,
                recall_at_1: 0.85,
            },
            rows: vec![row(asr(0.9, 0.09).unwrap())],
            gaps: vec![],
            conflict: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let a = write_report(&report, &dir.path().join("a")).unwrap();
        let b = write_report(&report, &dir.path().join("b")).unwrap();
        for (pa, pb) in a.iter().zip(b.iter()) {
            assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
        }
    }
}
