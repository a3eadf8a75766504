//! Pipeline stages behind the CLI subcommands. Every stage reads its inputs
//! from the run directory and writes its outputs with
//! write-temp-then-rename, so re-running a stage is safe and a crashed run
//! never leaves half-written artifacts behind.

use crate::config::RunConfig;
use mtadv::attack::{
    attack_result_exists, attack_samples, load_attack_result, persist_attack_result, AttackResult,
};
use mtadv::data::{generate_dataset, load_dataset, save_dataset, Dataset};
use mtadv::error::{Error, Result};
use mtadv::image_tensor::ImageTensor;
use mtadv::model::{
    atomic_write, load_clip_model, load_dense_model, save_clip_model, save_dense_model,
    BackboneOrigin, ClipModel, DenseModel, HeadKind,
};
use mtadv::objective::{gradient_conflict_report, TextBank};
use mtadv::report::{run_evaluation_suite, write_report, ComboOutcome, MetricReport};
use mtadv::seed::child_seed;
use mtadv::train::{derive_dense_model, train_toy_clip};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub struct Paths {
    out: PathBuf,
}

impl Paths {
    pub fn new(out: &Path) -> Self {
        Self { out: out.to_path_buf() }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.out.join("dataset")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.out.join("models")
    }

    pub fn model_prefix(&self, name: &str) -> PathBuf {
        self.models_dir().join(name)
    }

    pub fn bank_path(&self) -> PathBuf {
        self.models_dir().join("bank.json")
    }

    pub fn attacks_dir(&self) -> PathBuf {
        self.out.join("attacks")
    }

    pub fn combo_dir(&self, combo_id: &str) -> PathBuf {
        self.attacks_dir().join(combo_id)
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.out.join("reports")
    }

    pub fn triptychs_dir(&self) -> PathBuf {
        self.out.join("triptychs")
    }

    pub fn run_record_path(&self) -> PathBuf {
        self.out.join("run_record.json")
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PersistedBank {
    captions: Vec<String>,
    embeddings: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ComboManifest {
    combo_id: String,
    spec: mtadv::attack::AttackSpec,
    eval_dense: HeadKind,
    tables: Vec<String>,
    sample_ids: Vec<u64>,
    failures: Vec<(u64, String)>,
    partial_count: usize,
}

#[derive(Debug, Serialize)]
struct EnvFingerprint {
    os: &'static str,
    arch: &'static str,
    precision: &'static str,
    version: &'static str,
}

/// Wall-clock, artifact inventory and environment; the deterministic report
/// lives separately under `reports/`.
#[derive(Debug, Serialize)]
pub struct RunRecord {
    format_version: u32,
    command: String,
    seed: u64,
    config: serde_json::Value,
    artifacts: Vec<String>,
    wall_clock_ms: u128,
    timestamp_unix_ms: u128,
    environment: EnvFingerprint,
}

pub fn write_run_record(
    config: &RunConfig,
    command: &str,
    artifacts: &[PathBuf],
    started: Instant,
) -> Result<()> {
    for path in artifacts {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
    }
    let record = RunRecord {
        format_version: 1,
        command: command.to_string(),
        seed: config.seed,
        config: config.echo(),
        artifacts: artifacts.iter().map(|p| p.display().to_string()).collect(),
        wall_clock_ms: started.elapsed().as_millis(),
        timestamp_unix_ms: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0),
        environment: EnvFingerprint {
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
            precision: "f64",
            version: env!("CARGO_PKG_VERSION"),
        },
    };
    let paths = Paths::new(&config.out_dir);
    std::fs::create_dir_all(&config.out_dir)?;
    atomic_write(
        &paths.run_record_path(),
        serde_json::to_string_pretty(&record)?.as_bytes(),
    )
}

pub fn cmd_generate(config: &RunConfig, overwrite: bool) -> Result<Vec<PathBuf>> {
    let paths = Paths::new(&config.out_dir);
    let dir = paths.dataset_dir();
    if dir.join("dataset.json").exists() && !overwrite {
        return Err(Error::InvalidArgument(format!(
            "dataset already exists at {}; pass --overwrite to regenerate",
            dir.display()
        )));
    }
    let spec = config.dataset.to_spec(child_seed(config.seed, "dataset"));
    let dataset = generate_dataset(&spec)?;
    save_dataset(&dataset, &dir)?;
    log::info!(
        "generated dataset: {} train / {} val / {} test at {}",
        dataset.train.len(),
        dataset.val.len(),
        dataset.test.len(),
        dir.display()
    );
    Ok(vec![dir])
}

fn load_run_dataset(paths: &Paths) -> Result<Dataset> {
    let dir = paths.dataset_dir();
    if !dir.join("dataset.json").exists() {
        return Err(Error::MissingArtifact(format!(
            "dataset not found at {}; run `generate` first",
            dir.display()
        )));
    }
    load_dataset(&dir)
}

pub fn cmd_train(config: &RunConfig, overwrite: bool) -> Result<Vec<PathBuf>> {
    let paths = Paths::new(&config.out_dir);
    if paths.model_prefix("clip").with_extension("json").exists() && !overwrite {
        return Err(Error::InvalidArgument(format!(
            "checkpoints already exist under {}; pass --overwrite to retrain",
            paths.models_dir().display()
        )));
    }
    let dataset = load_run_dataset(&paths)?;
    std::fs::create_dir_all(paths.models_dir())?;
    let mut artifacts = Vec::new();

    let (clip, clip_report) = train_toy_clip(
        &dataset,
        &config.arch,
        &config.train_clip,
        child_seed(config.seed, "train-clip"),
    )?;
    let prefix = paths.model_prefix("clip");
    save_clip_model(
        &clip,
        serde_json::to_value(config.train_clip)?,
        serde_json::to_value(&clip_report)?,
        &prefix,
    )?;
    artifacts.push(prefix.with_extension("bin"));
    println!(
        "trained toy clip: test Recall@1 {:.3} (gate {:.2})",
        clip_report.recall_at_1,
        mtadv::train::CLIP_RECALL_GATE
    );

    for (name, head) in [("det", HeadKind::Detection), ("seg", HeadKind::Segmentation)] {
        let (model, report) = derive_dense_model(
            &clip,
            head,
            BackboneOrigin::DerivedFromClip,
            &dataset,
            &config.train_dense,
            child_seed(config.seed, &format!("train-dense:{}", head.name())),
        )?;
        let prefix = paths.model_prefix(name);
        save_dense_model(
            &model,
            serde_json::to_value(config.train_dense)?,
            serde_json::to_value(&report)?,
            &prefix,
        )?;
        artifacts.push(prefix.with_extension("bin"));
        println!(
            "trained {} model: clean metric {:.3} (gate {:.2})",
            head.name(),
            report.clean_metric,
            mtadv::train::DENSE_METRIC_GATE
        );
    }

    if config.harness.train_scratch_control {
        let (model, report) = derive_dense_model(
            &clip,
            HeadKind::Detection,
            BackboneOrigin::Scratch,
            &dataset,
            &config.train_dense,
            child_seed(config.seed, "train-dense:scratch-control"),
        )?;
        let prefix = paths.model_prefix("scratch_det");
        save_dense_model(
            &model,
            serde_json::to_value(config.train_dense)?,
            serde_json::to_value(&report)?,
            &prefix,
        )?;
        artifacts.push(prefix.with_extension("bin"));
        println!(
            "trained scratch-control detection model: clean metric {:.3}",
            report.clean_metric
        );
    }

    // Persist the caption bank with the run (stable ordering: test order).
    let captions: Vec<String> = dataset.test.iter().map(|s| s.caption.clone()).collect();
    let bank = TextBank::build(&clip, captions)?;
    let persisted = PersistedBank {
        captions: bank.captions().to_vec(),
        embeddings: bank
            .embeddings()
            .outer_iter()
            .map(|row| row.to_vec())
            .collect(),
    };
    atomic_write(
        &paths.bank_path(),
        serde_json::to_string_pretty(&persisted)?.as_bytes(),
    )?;
    artifacts.push(paths.bank_path());
    Ok(artifacts)
}

struct LoadedModels {
    clip: ClipModel,
    det: DenseModel,
    seg: DenseModel,
}

fn load_models(paths: &Paths) -> Result<LoadedModels> {
    let clip_prefix = paths.model_prefix("clip");
    if !clip_prefix.with_extension("json").exists() {
        return Err(Error::MissingArtifact(format!(
            "checkpoints not found under {}; run `train` first",
            paths.models_dir().display()
        )));
    }
    let (clip, _) = load_clip_model(&clip_prefix)?;
    let (det, det_manifest) = load_dense_model(&paths.model_prefix("det"))?;
    let (seg, seg_manifest) = load_dense_model(&paths.model_prefix("seg"))?;
    if det_manifest.head_kind != HeadKind::Detection
        || seg_manifest.head_kind != HeadKind::Segmentation
    {
        return Err(Error::Checkpoint("model heads do not match their names".into()));
    }
    Ok(LoadedModels { clip, det, seg })
}

fn rebuild_bank(models: &LoadedModels, dataset: &Dataset, paths: &Paths) -> Result<TextBank> {
    let captions: Vec<String> = dataset.test.iter().map(|s| s.caption.clone()).collect();
    let bank = TextBank::build(&models.clip, captions)?;
    // cross-check against the bank persisted at train time, if present
    if paths.bank_path().exists() {
        let persisted: PersistedBank =
            serde_json::from_str(&std::fs::read_to_string(paths.bank_path())?)?;
        if persisted.captions != bank.captions() {
            return Err(Error::InvalidArgument(
                "persisted bank captions do not match the dataset test split".into(),
            ));
        }
    }
    Ok(bank)
}

pub struct AttackStageStatus {
    pub hard_failures: usize,
    pub partial: usize,
}

pub fn cmd_attack(
    config: &RunConfig,
    overwrite: bool,
    resume: bool,
) -> Result<(Vec<PathBuf>, AttackStageStatus)> {
    let paths = Paths::new(&config.out_dir);
    let dataset = load_run_dataset(&paths)?;
    let models = load_models(&paths)?;
    let bank = rebuild_bank(&models, &dataset, &paths)?;

    let sweep = config.effective_sweep();
    if sweep.is_empty() {
        log::warn!("sweep is empty: attack stage is a no-op");
        return Ok((
            vec![],
            AttackStageStatus {
                hard_failures: 0,
                partial: 0,
            },
        ));
    }

    let attack_root_seed = child_seed(config.seed, "attack");
    let mut artifacts = Vec::new();
    let mut hard_failures = 0usize;
    let mut partial_total = 0usize;

    for entry in &sweep {
        let spec = entry.to_attack_spec(&config.attack_defaults)?;
        let combo_id = spec.combo_id();
        let dir = paths.combo_dir(&combo_id);
        let manifest_path = dir.join("combo.json");

        if dir.exists() && !overwrite && !resume && manifest_path.exists() {
            return Err(Error::InvalidArgument(format!(
                "attack artifacts already exist at {}; pass --overwrite or --resume",
                dir.display()
            )));
        }
        if overwrite && dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::create_dir_all(&dir)?;

        let pending: Vec<mtadv::data::SyntheticSample> = dataset
            .test
            .iter()
            .filter(|s| !(resume && attack_result_exists(&dir, s.id)))
            .cloned()
            .collect();
        let skipped = dataset.test.len() - pending.len();
        if skipped > 0 {
            log::info!("{combo_id}: resuming, {skipped} samples already done");
        }

        let task_model = match spec.task_head {
            HeadKind::Detection => Some(&models.det),
            HeadKind::Segmentation => Some(&models.seg),
            HeadKind::ClipRetrieval => None,
        };
        let combo_seed = child_seed(attack_root_seed, &combo_id);
        let outcomes = attack_samples(&spec, task_model, &models.clip, &bank, &pending, combo_seed);

        let mut failures: Vec<(u64, String)> = Vec::new();
        let mut partial_count = 0usize;
        for (id, outcome) in outcomes {
            match outcome {
                Ok(result) => {
                    if result.partial {
                        partial_count += 1;
                    }
                    persist_attack_result(&dir, &spec, &result)?;
                }
                Err(e) => {
                    log::warn!("{combo_id}: sample {id} failed: {e}");
                    failures.push((id, e.to_string()));
                }
            }
        }
        hard_failures += failures.len();
        partial_total += partial_count;

        let manifest = ComboManifest {
            combo_id: combo_id.clone(),
            spec,
            eval_dense: entry.eval_dense(),
            tables: entry.tables.clone(),
            sample_ids: dataset.test.iter().map(|s| s.id).collect(),
            failures,
            partial_count,
        };
        atomic_write(
            &manifest_path,
            serde_json::to_string_pretty(&manifest)?.as_bytes(),
        )?;
        artifacts.push(dir);
        log::info!("{combo_id}: done ({} samples)", dataset.test.len());
    }

    Ok((
        artifacts,
        AttackStageStatus {
            hard_failures,
            partial: partial_total,
        },
    ))
}

pub fn cmd_report(config: &RunConfig) -> Result<(Vec<PathBuf>, MetricReport)> {
    let paths = Paths::new(&config.out_dir);
    let dataset = load_run_dataset(&paths)?;
    let models = load_models(&paths)?;
    let bank = rebuild_bank(&models, &dataset, &paths)?;

    // Collect persisted combos in sweep order.
    let mut combos: Vec<ComboOutcome> = Vec::new();
    let mut joint_cosines: Vec<f64> = Vec::new();
    for entry in config.effective_sweep() {
        let spec = entry.to_attack_spec(&config.attack_defaults)?;
        let combo_id = spec.combo_id();
        let dir = paths.combo_dir(&combo_id);
        let manifest_path = dir.join("combo.json");
        if !manifest_path.exists() {
            return Err(Error::MissingArtifact(format!(
                "no attack artifacts for {combo_id}; run `attack` first"
            )));
        }
        let manifest: ComboManifest =
            serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
        let mut results: Vec<AttackResult> = Vec::new();
        let mut failures = manifest.failures.clone();
        for sample in &dataset.test {
            if attack_result_exists(&dir, sample.id) {
                let (result, meta) = load_attack_result(&dir, sample.id)?;
                joint_cosines.extend(meta.grad_cosines.iter().flatten());
                results.push(result);
            } else if !failures.iter().any(|(id, _)| *id == sample.id) {
                failures.push((sample.id, "artifacts missing".into()));
            }
        }
        combos.push(ComboOutcome {
            spec,
            eval_dense: manifest.eval_dense,
            tables: manifest.tables,
            results,
            failures,
        });
    }

    let conflict = gradient_conflict_report(
        &models.det,
        &models.clip,
        &dataset.test,
        &bank,
        config.attack_defaults.alpha_255 / 255.0,
    )?;

    let report = run_evaluation_suite(
        &models.det,
        &models.seg,
        &models.clip,
        &bank,
        &dataset.test,
        &combos,
        config.echo(),
        config.seed,
        Some(&conflict),
        &joint_cosines,
    )?;
    let mut artifacts = write_report(&report, &paths.reports_dir())?;
    artifacts.extend(emit_triptychs(config, &paths, &dataset, &combos)?);

    for row in &report.rows {
        println!(
            "{:<38} asr_task {:>6.1}%  asr_r1 {:>6.1}%",
            row.combo_id, row.asr_task, row.asr_r1
        );
    }
    if !report.gaps.is_empty() {
        println!("gaps: {}", report.gaps.len());
    }
    Ok((artifacts, report))
}

/// Raw clean/adversarial/delta image triples for visual inspection. The
/// delta view maps [-eps, eps] onto the full gray range.
fn emit_triptychs(
    config: &RunConfig,
    paths: &Paths,
    dataset: &Dataset,
    combos: &[ComboOutcome],
) -> Result<Vec<PathBuf>> {
    let n = config.harness.triptychs;
    if n == 0 || combos.is_empty() {
        return Ok(vec![]);
    }
    // prefer the canonical staged combo; fall back to the first
    let combo = combos
        .iter()
        .filter(|c| c.spec.strategy == mtadv::attack::Strategy::MtAdvClip)
        .find(|c| {
            matches!(c.spec.budget, mtadv::attack::BudgetSpec::Split { eps_task, eps_clip }
                if (eps_task * 255.0 - 6.0).abs() < 1e-9 && (eps_clip * 255.0 - 2.0).abs() < 1e-9)
        })
        .or_else(|| combos.first())
        .expect("non-empty combos");
    let dir = paths.triptychs_dir().join(combo.spec.combo_id());
    std::fs::create_dir_all(&dir)?;
    let eps = combo.spec.budget.eps_total();
    let mut written = Vec::new();
    for result in combo.results.iter().take(n) {
        let sample = dataset
            .test
            .iter()
            .find(|s| s.id == result.sample_id)
            .ok_or_else(|| Error::MissingArtifact(format!("sample {}", result.sample_id)))?;
        let clean_path = dir.join(format!("{:05}_clean.png", sample.id));
        let adv_path = dir.join(format!("{:05}_adv.png", sample.id));
        let delta_path = dir.join(format!("{:05}_delta.png", sample.id));
        sample.image.save_png(&clean_path)?;
        result.adversarial.save_png(&adv_path)?;
        let view: Array3<f64> = result
            .delta_composed
            .delta()
            .mapv(|d| (0.5 + d * (0.5 / eps)).clamp(0.0, 1.0));
        ImageTensor::new(view)?.save_png(&delta_path)?;
        written.extend([clean_path, adv_path, delta_path]);
    }
    Ok(written)
}

pub struct AllOutcome {
    pub artifacts: Vec<PathBuf>,
    pub attack_status: AttackStageStatus,
}

pub fn cmd_all(config: &RunConfig, overwrite: bool, resume: bool) -> Result<AllOutcome> {
    let mut artifacts = cmd_generate(config, overwrite)?;
    artifacts.extend(cmd_train(config, overwrite)?);
    let (attack_artifacts, attack_status) = cmd_attack(config, overwrite, resume)?;
    artifacts.extend(attack_artifacts);
    let (report_artifacts, _) = cmd_report(config)?;
    artifacts.extend(report_artifacts);
    Ok(AllOutcome {
        artifacts,
        attack_status,
    })
}
