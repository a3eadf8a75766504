//! Run configuration: one TOML file drives the whole pipeline. Unknown keys
//! are errors. Budgets and step sizes are given in 1/255 units so the
//! canonical grid-aligned protocol reads naturally.

use mtadv::attack::{AttackSpec, BudgetSpec, Strategy};
use mtadv::data::DatasetSpec;
use mtadv::error::{Error, Result};
use mtadv::model::{ArchConfig, HeadKind};
use mtadv::perturb::{InitMode, PgdConfig};
use mtadv::train::{ClipTrainConfig, DenseTrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Dataset shape without a seed: the generation seed is always derived from
/// the run's master seed.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub image_size: usize,
    pub grid_size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let spec = DatasetSpec::default();
        Self {
            image_size: spec.image_size,
            grid_size: spec.grid_size,
            min_shapes: spec.min_shapes,
            max_shapes: spec.max_shapes,
            train: spec.train,
            val: spec.val,
            test: spec.test,
        }
    }
}

impl DatasetConfig {
    pub fn to_spec(self, seed: u64) -> DatasetSpec {
        DatasetSpec {
            image_size: self.image_size,
            grid_size: self.grid_size,
            min_shapes: self.min_shapes,
            max_shapes: self.max_shapes,
            train: self.train,
            val: self.val,
            test: self.test,
            seed,
        }
    }
}

/// Shared PGD defaults for the sweep (entries may override iterations).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackDefaults {
    /// Step size in 1/255 units.
    pub alpha_255: f64,
    /// Iterations per stage.
    pub iterations: usize,
    pub init: InitMode,
    /// Joint-optimization loss weight.
    pub joint_weight: f64,
}

impl Default for AttackDefaults {
    fn default() -> Self {
        Self {
            alpha_255: 2.0,
            iterations: 10,
            init: InitMode::Clean,
            joint_weight: 1.0,
        }
    }
}

/// One strategy × budget combination in the sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEntry {
    pub strategy: Strategy,
    /// det | seg | clip (clip only with single_task).
    pub task_head: HeadKind,
    /// Single-ball budget in 1/255 units (single_task, joint).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_255: Option<f64>,
    /// Stage budgets in 1/255 units (mt_advclip, order_reversed).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_task_255: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_clip_255: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_weight: Option<f64>,
    /// Report tables this combo contributes to.
    #[serde(default)]
    pub tables: Vec<String>,
}

impl SweepEntry {
    pub fn to_attack_spec(&self, defaults: &AttackDefaults) -> Result<AttackSpec> {
        let budget = match (self.eps_255, self.eps_task_255, self.eps_clip_255) {
            (Some(eps), None, None) => BudgetSpec::Single { eps: eps / 255.0 },
            (None, Some(t), Some(c)) => BudgetSpec::Split {
                eps_task: t / 255.0,
                eps_clip: c / 255.0,
            },
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "sweep entry {}: give either eps_255 or both eps_task_255 and eps_clip_255",
                    self.strategy.name()
                )))
            }
        };
        let iterations = self.iterations.unwrap_or(defaults.iterations);
        let pgd = PgdConfig {
            alpha: defaults.alpha_255 / 255.0,
            iterations,
            init_mode: defaults.init,
            seed: 0,
        };
        let spec = AttackSpec {
            strategy: self.strategy,
            task_head: self.task_head,
            budget,
            stage1: pgd,
            stage2: pgd,
            joint_weight: self.joint_weight.unwrap_or(defaults.joint_weight),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Which dense model the task metric is computed on: the attacked model
    /// for dense-targeting combos, the detection model for retrieval-only
    /// combos (the main comparison table is detection-based).
    pub fn eval_dense(&self) -> HeadKind {
        match self.task_head {
            HeadKind::Segmentation => HeadKind::Segmentation,
            _ => HeadKind::Detection,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    /// Also train a scratch-backbone control model for the
    /// transfer-asymmetry diagnostic.
    pub train_scratch_control: bool,
    /// Re-run single-ball baselines with doubled iterations so the staged
    /// attack's 2x model-evaluation budget has a compute-matched comparison.
    pub compute_matched_baselines: bool,
    /// Clean/adversarial/delta image triples emitted by `report`.
    pub triptychs: usize,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            train_scratch_control: false,
            compute_matched_baselines: true,
            triptychs: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub arch: ArchConfig,
    pub train_clip: ClipTrainConfig,
    pub train_dense: DenseTrainConfig,
    pub attack_defaults: AttackDefaults,
    pub harness: HarnessConfig,
    /// Absent -> the default sweep (the canonical run plus every ablation
    /// table row). Present but empty -> attack stage is a no-op.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Vec<SweepEntry>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out_dir: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            arch: ArchConfig::default(),
            train_clip: ClipTrainConfig::default(),
            train_dense: DenseTrainConfig::default(),
            attack_defaults: AttackDefaults::default(),
            harness: HarnessConfig::default(),
            sweep: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::InvalidArgument(format!("config parse error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.to_spec(0).validate()?;
        if let Some(entries) = &self.sweep {
            for entry in entries {
                entry.to_attack_spec(&self.attack_defaults)?;
            }
        }
        Ok(())
    }

    /// The sweep to run: explicit entries, or the built-in default covering
    /// the canonical configuration and every comparison-table row.
    pub fn effective_sweep(&self) -> Vec<SweepEntry> {
        match &self.sweep {
            Some(entries) => entries.clone(),
            None => default_sweep(self.harness.compute_matched_baselines),
        }
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn entry(
    strategy: Strategy,
    task_head: HeadKind,
    eps: Option<f64>,
    split: Option<(f64, f64)>,
    tables: &[&str],
) -> SweepEntry {
    SweepEntry {
        strategy,
        task_head,
        eps_255: eps,
        eps_task_255: split.map(|s| s.0),
        eps_clip_255: split.map(|s| s.1),
        iterations: None,
        joint_weight: None,
        tables: tables.iter().map(|s| s.to_string()).collect(),
    }
}

/// The default sweep:
/// - the main comparison (single-task PGD on each model, joint
///   optimization, and the staged attack) at the canonical 8/255 budget
///   with a 3:1 split;
/// - the perturbation-order ablation at both split assignments;
/// - the budget-split sweep for both dense heads.
pub fn default_sweep(compute_matched: bool) -> Vec<SweepEntry> {
    use HeadKind::{ClipRetrieval, Detection, Segmentation};
    use Strategy::{Joint, MtAdvClip, OrderReversed, SingleTask};

    let mut sweep = vec![
        // main table
        entry(SingleTask, Detection, Some(8.0), None, &["table1"]),
        entry(SingleTask, ClipRetrieval, Some(8.0), None, &["table1"]),
        entry(Joint, Detection, Some(8.0), None, &["table1", "table2"]),
        entry(
            MtAdvClip,
            Detection,
            None,
            Some((6.0, 2.0)),
            &["table1", "table2", "table3_detection"],
        ),
        // order ablation
        entry(OrderReversed, Detection, None, Some((6.0, 2.0)), &["table2"]),
        entry(OrderReversed, Detection, None, Some((2.0, 6.0)), &["table2"]),
        entry(
            MtAdvClip,
            Detection,
            None,
            Some((2.0, 6.0)),
            &["table2", "table3_detection"],
        ),
        // split sweep, detection
        entry(MtAdvClip, Detection, None, Some((2.0, 2.0)), &["table3_detection"]),
        entry(MtAdvClip, Detection, None, Some((2.0, 4.0)), &["table3_detection"]),
        entry(MtAdvClip, Detection, None, Some((4.0, 2.0)), &["table3_detection"]),
        entry(MtAdvClip, Detection, None, Some((4.0, 4.0)), &["table3_detection"]),
        // split sweep, segmentation
        entry(MtAdvClip, Segmentation, None, Some((2.0, 2.0)), &["table3_segmentation"]),
        entry(MtAdvClip, Segmentation, None, Some((2.0, 4.0)), &["table3_segmentation"]),
        entry(MtAdvClip, Segmentation, None, Some((4.0, 2.0)), &["table3_segmentation"]),
        entry(MtAdvClip, Segmentation, None, Some((2.0, 6.0)), &["table3_segmentation"]),
        entry(MtAdvClip, Segmentation, None, Some((4.0, 4.0)), &["table3_segmentation"]),
        entry(MtAdvClip, Segmentation, None, Some((6.0, 2.0)), &["table3_segmentation"]),
    ];

    if compute_matched {
        // staged attacks evaluate two models over 10+10 iterations; these
        // rows give the single-ball baselines the same evaluation budget
        for (strategy, head) in [
            (SingleTask, Detection),
            (SingleTask, ClipRetrieval),
            (Joint, Detection),
        ] {
            let mut e = entry(strategy, head, Some(8.0), None, &["table1"]);
            e.iterations = Some(20);
            sweep.push(e);
        }
    }
    sweep
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn default_sweep_covers_all_tables() {
        let sweep = default_sweep(true);
        for table in [
            "table1",
            "table2",
            "table3_detection",
            "table3_segmentation",
        ] {
            assert!(
                sweep.iter().any(|e| e.tables.iter().any(|t| t == table)),
                "missing {table}"
            );
        }
        // canonical row present: staged attack, detection, 6+2 split
        assert!(sweep.iter().any(|e| e.strategy == Strategy::MtAdvClip
            && e.task_head == HeadKind::Detection
            && e.eps_task_255 == Some(6.0)
            && e.eps_clip_255 == Some(2.0)));
        // all entries convert to valid attack specs
        let defaults = AttackDefaults::default();
        for e in &sweep {
            e.to_attack_spec(&defaults).unwrap();
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "seed = 1\nnot_a_key = true\n";
        let parsed: std::result::Result<RunConfig, _> = toml::from_str(text);
        assert!(parsed.is_err());
    }

    #[test]
    fn sweep_entry_requires_exactly_one_budget_form() {
        let defaults = AttackDefaults::default();
        let mut e = entry(
            Strategy::SingleTask,
            HeadKind::Detection,
            Some(8.0),
            Some((6.0, 2.0)),
            &[],
        );
        assert!(e.to_attack_spec(&defaults).is_err());
        e.eps_255 = None;
        e.eps_task_255 = None;
        e.eps_clip_255 = None;
        assert!(e.to_attack_spec(&defaults).is_err());
    }
}
