//! End-to-end orchestration: scene generation, noise injection, refinement,
//! training, evaluation, and sweeps, with every artifact written under a
//! per-run directory.
//!
//! A run directory always contains a frozen copy of the resolved config, so
//! any result can be replayed exactly. Reruns with the same config and seed
//! overwrite with identical bytes in single-threaded mode. A run that fails
//! after its directory was created leaves a `FAILED` marker describing the
//! error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{ExperimentConfig, NoiseConfig};
use crate::learner::{
    history_to_csv, train, SceneSample, TrainDataset, TrainOutcome,
};
use crate::learner::{write_checkpoint_file, EvalSample};
use crate::metrics::{
    confusion_counts, emit_report_file, iou_scores, parse_report_csv, ConfusionCounts,
    ReportFormat, ReportRow,
};
use crate::noise::{
    build_trailing_level, inject_asymmetric, noise_statistics, refine_ground_truth,
    AsymNoiseSpec, NoiseReport,
};
use crate::rng::stage_seed;
use crate::scene::{generate_scene, FeatureModel, SceneSequence};
use crate::voxel::VoxelGrid;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Scene(#[from] crate::scene::SceneError),
    #[error(transparent)]
    Noise(#[from] crate::noise::NoiseError),
    #[error(transparent)]
    Train(#[from] crate::learner::TrainError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] crate::learner::CheckpointError),
    #[error("artifact validation failed: {0}")]
    Validation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Paths of everything a completed run wrote.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub run_dir: PathBuf,
    pub config_copy: PathBuf,
    pub history_csv: PathBuf,
    pub metrics_csv: PathBuf,
    pub metrics_json: PathBuf,
    pub checkpoint: PathBuf,
    pub report_row: ReportRow,
    pub final_miou: f64,
    pub final_iou: f64,
}

/// The generated dataset plus the sequences behind it.
pub struct BuiltDataset {
    pub dataset: TrainDataset,
    pub train_sequences: Vec<SceneSequence>,
    pub eval_sequences: Vec<SceneSequence>,
    pub noise_reports: Vec<NoiseReport>,
}

fn noisy_training_grid(
    cfg: &ExperimentConfig,
    seq: &SceneSequence,
    scene_index: usize,
) -> Result<VoxelGrid, PipelineError> {
    match &cfg.noise {
        NoiseConfig::Asymmetric { eta } => {
            let spec = AsymNoiseSpec::new(
                *eta,
                stage_seed(cfg.seed, &format!("noise.train.{scene_index}")),
            )?;
            Ok(inject_asymmetric(&seq.clean_gt, &spec, &seq.space)?)
        }
        NoiseConfig::Trailing { level, .. } => {
            Ok(build_trailing_level(seq, *level, &cfg.trailing_window())?)
        }
    }
}

/// Generates the train and eval splits for a config. Training scenes carry
/// noisy labels; evaluation targets are refined from the raw (possibly
/// trailing-corrupted) grids.
pub fn build_dataset(cfg: &ExperimentConfig) -> Result<BuiltDataset, PipelineError> {
    let scene_spec = cfg.scene_spec()?;
    let space = scene_spec.space.clone();
    let feature_model =
        FeatureModel::new(&space, &cfg.feature_spec(), stage_seed(cfg.seed, "features"))?;

    let mut train_scenes = Vec::with_capacity(cfg.dataset.train_scenes);
    let mut train_sequences = Vec::with_capacity(cfg.dataset.train_scenes);
    let mut noise_reports = Vec::with_capacity(cfg.dataset.train_scenes);
    for i in 0..cfg.dataset.train_scenes {
        let seq = generate_scene(&scene_spec, stage_seed(cfg.seed, &format!("scene.train.{i}")))?;
        let noisy = noisy_training_grid(cfg, &seq, i)?;
        noise_reports.push(noise_statistics(&seq.clean_gt, &noisy, &space)?);
        let features =
            feature_model.features_for(&seq.clean_gt, stage_seed(cfg.seed, &format!("features.train.{i}")));
        train_scenes.push(SceneSample {
            features,
            noisy_labels: noisy,
            latent_clean: Some(seq.clean_gt.clone()),
        });
        train_sequences.push(seq);
    }

    let mut eval_scenes = Vec::with_capacity(cfg.dataset.eval_scenes);
    let mut eval_sequences = Vec::with_capacity(cfg.dataset.eval_scenes);
    for j in 0..cfg.dataset.eval_scenes {
        let seq = generate_scene(&scene_spec, stage_seed(cfg.seed, &format!("scene.eval.{j}")))?;
        // The raw evaluation grid carries the same structural artifacts the
        // dataset would ship with; refinement strips them before scoring.
        let raw = match &cfg.noise {
            NoiseConfig::Asymmetric { .. } => seq.clean_gt.clone(),
            NoiseConfig::Trailing { level, .. } => {
                build_trailing_level(&seq, *level, &cfg.trailing_window())?
            }
        };
        let refined =
            refine_ground_truth(&raw, &seq.instance_masks[seq.reference_frame], &space)?;
        let features = feature_model
            .features_for(&seq.clean_gt, stage_seed(cfg.seed, &format!("features.eval.{j}")));
        eval_scenes.push(EvalSample { features, refined_gt: refined });
        eval_sequences.push(seq);
    }

    Ok(BuiltDataset {
        dataset: TrainDataset { space, train: train_scenes, eval: eval_scenes },
        train_sequences,
        eval_sequences,
        noise_reports,
    })
}

fn write_sequence(dir: &Path, seq: &SceneSequence) -> Result<(), PipelineError> {
    fs::create_dir_all(dir)?;
    for (t, frame) in seq.frames.iter().enumerate() {
        crate::ocv1::write_grid_file(frame, dir.join(format!("frame_{t:03}.ocv1")))?;
        crate::ocv1::write_mask_file(
            &seq.instance_masks[t],
            dir.join(format!("mask_{t:03}.ocv1")),
        )?;
    }
    crate::ocv1::write_grid_file(&seq.clean_gt, dir.join("clean_gt.ocv1"))?;
    Ok(())
}

fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<(), PipelineError> {
    let mut file = fs::File::create(path)?;
    for row in rows {
        serde_json::to_writer(&mut file, row)
            .map_err(|e| PipelineError::Validation(format!("serialize {}: {e}", path.display())))?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

/// Runs the complete workflow for one config into `out_root/<run_id>` and
/// validates the written artifacts before reporting success.
pub fn run_pipeline(cfg: &ExperimentConfig, out_root: &Path) -> Result<RunArtifacts, PipelineError> {
    cfg.validate()?;
    let run_id = cfg.resolved_run_id();
    let run_dir = out_root.join(&run_id);
    fs::create_dir_all(&run_dir)?;
    let marker = run_dir.join("FAILED");

    match run_pipeline_inner(cfg, &run_dir, &run_id) {
        Ok(artifacts) => {
            // A stale marker from an earlier failed attempt must not survive
            // a successful rerun.
            if marker.exists() {
                fs::remove_file(&marker)?;
            }
            Ok(artifacts)
        }
        Err(e) => {
            let _ = fs::write(&marker, format!("{e}\n"));
            Err(e)
        }
    }
}

fn run_pipeline_inner(
    cfg: &ExperimentConfig,
    run_dir: &Path,
    run_id: &str,
) -> Result<RunArtifacts, PipelineError> {
    let config_copy = run_dir.join("config.toml");
    fs::write(&config_copy, crate::config::to_toml_string(cfg))?;

    let built = build_dataset(cfg)?;
    let space = built.dataset.space.clone();

    for (i, seq) in built.train_sequences.iter().enumerate() {
        write_sequence(&run_dir.join(format!("scenes/train_{i}")), seq)?;
    }
    for (j, seq) in built.eval_sequences.iter().enumerate() {
        write_sequence(&run_dir.join(format!("scenes/eval_{j}")), seq)?;
    }
    let noisy_dir = run_dir.join("noisy");
    fs::create_dir_all(&noisy_dir)?;
    for (i, scene) in built.dataset.train.iter().enumerate() {
        crate::ocv1::write_grid_file(&scene.noisy_labels, noisy_dir.join(format!("train_{i}.ocv1")))?;
    }
    let refined_dir = run_dir.join("refined");
    fs::create_dir_all(&refined_dir)?;
    for (j, scene) in built.dataset.eval.iter().enumerate() {
        crate::ocv1::write_grid_file(&scene.refined_gt, refined_dir.join(format!("eval_{j}.ocv1")))?;
    }
    let noise_report_path = run_dir.join("noise_report.json");
    fs::write(
        &noise_report_path,
        serde_json::to_string_pretty(&built.noise_reports)
            .map_err(|e| PipelineError::Validation(e.to_string()))?,
    )?;

    let train_cfg = cfg.train_config()?;
    let outcome: TrainOutcome = train(&built.dataset, &train_cfg)?;

    let history_csv = run_dir.join("history.csv");
    fs::write(&history_csv, history_to_csv(&outcome.history))?;
    write_jsonl(&run_dir.join("losses.jsonl"), &outcome.steps)?;
    let robust_records: Vec<_> =
        outcome.history.iter().filter(|r| r.k.is_some()).cloned().collect();
    write_jsonl(&run_dir.join("diagnostics.jsonl"), &robust_records)?;

    let checkpoint = run_dir.join("checkpoint.dprc");
    write_checkpoint_file(&outcome.student, &outcome.teacher, &outcome.prototypes, &checkpoint)?;

    // Final refined evaluation with the configured convention.
    let mut counts: Option<ConfusionCounts> = None;
    for eval in &built.dataset.eval {
        let pred =
            crate::learner::predict(&outcome.student, &eval.features, eval.refined_gt.dims())?;
        let c = confusion_counts(&pred, &eval.refined_gt, &space)?;
        match &mut counts {
            Some(total) => total.merge(&c),
            None => counts = Some(c),
        }
    }
    let counts = counts.ok_or_else(|| PipelineError::Validation("no evaluation scenes".into()))?;
    let scores = iou_scores(&counts, cfg.eval.convention);
    let row = ReportRow::from_scores(run_id, cfg.noise.kind(), cfg.noise.level(), &scores);

    let metrics_csv = run_dir.join("metrics.csv");
    let metrics_json = run_dir.join("metrics.json");
    emit_report_file(
        std::slice::from_ref(&row),
        space.num_semantic() as usize,
        ReportFormat::Csv,
        &metrics_csv,
    )?;
    emit_report_file(
        std::slice::from_ref(&row),
        space.num_semantic() as usize,
        ReportFormat::Json,
        &metrics_json,
    )?;

    // Validate what was written before declaring success.
    let parsed = parse_report_csv(fs::File::open(&metrics_csv)?)?;
    if parsed.len() != 1 || (parsed[0].miou - scores.miou).abs() > 1e-5 {
        return Err(PipelineError::Validation("metrics.csv does not match results".into()));
    }
    let reread = crate::learner::read_checkpoint_file(&checkpoint)?;
    if reread.student != outcome.student {
        return Err(PipelineError::Validation("checkpoint does not round-trip".into()));
    }

    Ok(RunArtifacts {
        run_dir: run_dir.to_path_buf(),
        config_copy,
        history_csv,
        metrics_csv,
        metrics_json,
        checkpoint,
        report_row: row,
        final_miou: scores.miou,
        final_iou: scores.geometric_iou,
    })
}

/// One sweep cell: the derived config and its run label.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub run_id: String,
    pub config: ExperimentConfig,
}

/// Expands the sweep section into concrete cells. Noise axes (etas and
/// trailing levels) concatenate; K strategies, candidate sources, and loss
/// sets multiply.
pub fn expand_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepCell>, PipelineError> {
    let sweep = cfg.sweep.clone().unwrap_or_default();
    let base_id = cfg
        .run_id
        .clone()
        .unwrap_or_else(|| format!("sweep_seed{}", cfg.seed));

    let mut noise_axis: Vec<NoiseConfig> = Vec::new();
    for &eta in &sweep.etas {
        noise_axis.push(NoiseConfig::Asymmetric { eta });
    }
    for &level in &sweep.trailing_levels {
        let window = cfg.trailing_window();
        noise_axis.push(NoiseConfig::Trailing {
            level,
            future: window.future,
            historical: window.historical,
            dilation_iterations: window.dilation_iterations,
        });
    }
    if noise_axis.is_empty() {
        noise_axis.push(cfg.noise.clone());
    }

    let strategies: Vec<Option<crate::config::KStrategyConfig>> = if sweep.k_strategies.is_empty()
    {
        vec![None]
    } else {
        sweep.k_strategies.iter().copied().map(Some).collect()
    };
    let sources: Vec<Option<crate::config::SourcesConfig>> =
        if sweep.candidate_sources.is_empty() {
            vec![None]
        } else {
            sweep.candidate_sources.iter().copied().map(Some).collect()
        };
    let loss_sets: Vec<Option<crate::config::LossSetConfig>> = if sweep.loss_sets.is_empty() {
        vec![None]
    } else {
        sweep.loss_sets.iter().copied().map(Some).collect()
    };

    let mut cells = Vec::new();
    for noise in &noise_axis {
        for strategy in &strategies {
            for source in &sources {
                for loss_set in &loss_sets {
                    let mut cell = cfg.clone();
                    cell.sweep = None;
                    cell.noise = noise.clone();
                    let mut label = format!("{base_id}_{}", noise.level());
                    if let Some(s) = strategy {
                        cell.train.k_strategy = *s;
                        label.push('_');
                        label.push_str(&s.label());
                    }
                    if let Some(s) = source {
                        cell.train.candidate_sources = *s;
                        label.push('_');
                        label.push_str(s.as_str());
                    }
                    if let Some(l) = loss_set {
                        cell.train.loss_pll = l.pll;
                        cell.train.loss_nl = l.nl;
                        cell.train.loss_sntd = l.sntd;
                        label.push('_');
                        label.push_str(&l.label());
                    }
                    cell.run_id = Some(label.clone());
                    cell.validate()?;
                    cells.push(SweepCell { run_id: label, config: cell });
                }
            }
        }
    }
    Ok(cells)
}

/// Runs every sweep cell and writes the combined `metrics.csv` (one row per
/// cell) at the sweep root.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    out_root: &Path,
) -> Result<Vec<RunArtifacts>, PipelineError> {
    let cells = expand_sweep(cfg)?;
    let mut artifacts = Vec::with_capacity(cells.len());
    let mut rows = Vec::with_capacity(cells.len());
    let mut num_semantic = 0usize;
    for cell in &cells {
        let result = run_pipeline(&cell.config, out_root)?;
        num_semantic = result.report_row.per_class.len();
        rows.push(result.report_row.clone());
        artifacts.push(result);
    }
    emit_report_file(&rows, num_semantic, ReportFormat::Csv, out_root.join("metrics.csv"))?;
    emit_report_file(&rows, num_semantic, ReportFormat::Json, out_root.join("metrics.json"))?;
    Ok(artifacts)
}
