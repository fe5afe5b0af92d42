//! The two-stage training loop.
//!
//! Warm-up epochs optimize plain cross-entropy on the noisy labels while the
//! EMA teacher and prototypes track the student. Robust epochs additionally
//! build dual-source candidate sets under the scheduled K and add the
//! partial-label, negative-learning, and distillation terms. The loop is
//! deterministic given the seed.

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::Serialize;

use super::model::{ema_update, Architecture, StudentModel, TeacherState};
use super::prototypes::{update_prototypes, PrototypeBank};
use super::TrainError;
use crate::candidate::{
    build_candidates_from_sources, candidate_diagnostics, schedule_k, CandidateSources, KSchedule,
    SimilarityMatrix,
};
use crate::loss::{
    cross_entropy_loss, nl_loss, pll_loss, sntd_loss, total_loss, LogitField, LossEvaluation,
    SNTDConfig,
};
use crate::metrics::{confusion_counts, iou_scores, AbsentClassConvention, ConfusionCounts};
use crate::rng::{seeded_rng, stage_seed};
use crate::voxel::{ClassId, Dims, LabelSpace, VoxelGrid};

/// Step-decay learning rate: `initial` until `decay_epoch`, then
/// `initial * decay_factor` from that epoch on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay_epoch: usize,
    pub decay_factor: f64,
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch {
            self.initial * self.decay_factor
        } else {
            self.initial
        }
    }
}

/// Candidate-size policy for the robust stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KStrategy {
    /// The linear decay defined by the schedule.
    Linear,
    Fixed(usize),
    /// Uniform per-epoch draw between the schedule's end and start sizes.
    Random,
}

/// Which robust terms participate in the joint objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossComponents {
    pub pll: bool,
    pub nl: bool,
    pub sntd: bool,
}

impl Default for LossComponents {
    fn default() -> Self {
        LossComponents { pll: true, nl: true, sntd: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: LrSchedule,
    pub architecture: Architecture,
    /// Scenes per gradient step.
    pub batch_scenes: usize,
    pub schedule: KSchedule,
    pub k_strategy: KStrategy,
    pub sntd: SNTDConfig,
    pub ema_momentum: f64,
    pub prototype_momentum: f64,
    pub prototype_fusion_weight: f64,
    pub candidate_sources: CandidateSources,
    pub include_noisy_label: bool,
    pub loss_components: LossComponents,
    pub eval_convention: AbsentClassConvention,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale defaults: 20 epochs with a 12-epoch warm-up, the reference
    /// K decay 9 -> 2 (step 2), temperature 3.0, and an EMA momentum small
    /// enough that the teacher tracks within tens of steps.
    pub fn desk_default(seed: u64) -> Self {
        TrainConfig {
            epochs: 20,
            warmup_epochs: 12,
            lr: LrSchedule { initial: 2.0, decay_epoch: 18, decay_factor: 0.1 },
            architecture: Architecture::Linear,
            batch_scenes: 1,
            schedule: KSchedule::reference(),
            k_strategy: KStrategy::Linear,
            sntd: SNTDConfig::default(),
            ema_momentum: 0.95,
            prototype_momentum: 0.99,
            prototype_fusion_weight: 0.5,
            candidate_sources: CandidateSources::Union,
            include_noisy_label: false,
            loss_components: LossComponents::default(),
            eval_convention: AbsentClassConvention::Exclude,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(TrainError::InvalidConfig(format!(
                "warm-up of {} epochs exceeds the {}-epoch budget",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.schedule.warmup_epochs != self.warmup_epochs {
            return Err(TrainError::InvalidConfig(
                "K schedule and training disagree on the warm-up length".into(),
            ));
        }
        if self.schedule.k_end < 1 || self.schedule.k_end > self.schedule.k_start {
            return Err(TrainError::InvalidConfig(format!(
                "K schedule needs 1 <= K_end <= K_start, got {}..{}",
                self.schedule.k_end, self.schedule.k_start
            )));
        }
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.lr.initial) || !positive(self.lr.decay_factor) {
            return Err(TrainError::InvalidConfig("learning rates must be positive".into()));
        }
        if self.batch_scenes == 0 {
            return Err(TrainError::InvalidConfig("batch_scenes must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(TrainError::InvalidConfig(format!(
                "EMA momentum {} outside [0, 1]",
                self.ema_momentum
            )));
        }
        self.sntd.validate()?;
        if let KStrategy::Fixed(k) = self.k_strategy {
            if k == 0 {
                return Err(TrainError::InvalidConfig("fixed K must be at least 1".into()));
            }
        }
        Ok(())
    }
}

/// One training scene: per-voxel features, the noisy supervision, and (for
/// synthetic data) the latent clean labels used only for diagnostics.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub features: Array2<f64>,
    pub noisy_labels: VoxelGrid,
    pub latent_clean: Option<VoxelGrid>,
}

/// One evaluation scene with refined ground truth.
#[derive(Debug, Clone)]
pub struct EvalSample {
    pub features: Array2<f64>,
    pub refined_gt: VoxelGrid,
}

#[derive(Debug, Clone)]
pub struct TrainDataset {
    pub space: LabelSpace,
    pub train: Vec<SceneSample>,
    pub eval: Vec<EvalSample>,
}

impl TrainDataset {
    pub fn validate(&self) -> Result<usize, TrainError> {
        if self.train.is_empty() {
            return Err(TrainError::InvalidDataset("no training scenes".into()));
        }
        let dim = self.train[0].features.ncols();
        for (i, scene) in self.train.iter().enumerate() {
            if scene.features.ncols() != dim {
                return Err(TrainError::InvalidDataset(format!(
                    "scene {i} has feature dim {}, expected {dim}",
                    scene.features.ncols()
                )));
            }
            if scene.features.nrows() != scene.noisy_labels.labels().len() {
                return Err(TrainError::InvalidDataset(format!(
                    "scene {i}: {} feature rows vs {} labels",
                    scene.features.nrows(),
                    scene.noisy_labels.labels().len()
                )));
            }
            if let Some(clean) = &scene.latent_clean {
                if clean.labels().len() != scene.noisy_labels.labels().len() {
                    return Err(TrainError::InvalidDataset(format!(
                        "scene {i}: latent labels have a different length"
                    )));
                }
            }
        }
        for (i, scene) in self.eval.iter().enumerate() {
            if scene.features.ncols() != dim {
                return Err(TrainError::InvalidDataset(format!(
                    "eval scene {i} has feature dim {}, expected {dim}",
                    scene.features.ncols()
                )));
            }
            if scene.features.nrows() != scene.refined_gt.labels().len() {
                return Err(TrainError::InvalidDataset(format!(
                    "eval scene {i}: feature rows vs labels mismatch"
                )));
            }
        }
        Ok(dim)
    }
}

/// Per-epoch history entry. Robust-stage fields are `None` during warm-up.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub base: f64,
    pub pll: Option<f64>,
    pub nl: Option<f64>,
    pub sntd: Option<f64>,
    pub total: f64,
    pub hit_rate: Option<f64>,
    pub purity: Option<f64>,
    pub mean_candidate_size: Option<f64>,
    /// Side-by-side hit rates of the individual evidence sources, measured
    /// on the same state as `hit_rate`.
    pub hit_rate_teacher: Option<f64>,
    pub hit_rate_prototype: Option<f64>,
    pub hit_rate_union: Option<f64>,
    pub nl_saturation: u64,
    pub iou: f64,
    pub miou: f64,
}

/// Per-step loss breakdown, one JSON line per gradient step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub base: f64,
    pub pll: f64,
    pub nl: f64,
    pub sntd: f64,
    pub total: f64,
    pub nl_saturation_count: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub student: StudentModel,
    pub teacher: TeacherState,
    pub prototypes: PrototypeBank,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Cosine similarities against the fused prototypes, with absent classes
/// pinned to the minimum score so they rank last deterministically.
fn similarity_against_bank(
    features: &Array2<f64>,
    bank: &PrototypeBank,
) -> Result<SimilarityMatrix, TrainError> {
    let (fused, present) = bank.fused();
    let n = features.nrows();
    let categories = bank.num_categories();
    let mut scores = Array2::from_elem((n, categories), -1.0);
    let feature_norms: Vec<f64> = features
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    for c in 0..categories {
        if !present[c] {
            continue;
        }
        let proto = fused.row(c);
        let proto_norm = proto.iter().map(|x| x * x).sum::<f64>().sqrt();
        if proto_norm == 0.0 {
            continue;
        }
        for v in 0..n {
            if feature_norms[v] == 0.0 {
                return Err(TrainError::InvalidDataset(format!(
                    "voxel {v} has a zero-norm feature vector"
                )));
            }
            let dot: f64 = features.row(v).iter().zip(proto.iter()).map(|(a, b)| a * b).sum();
            scores[(v, c)] = (dot / (feature_norms[v] * proto_norm)).clamp(-1.0, 1.0);
        }
    }
    SimilarityMatrix::from_scores(scores).map_err(TrainError::Candidate)
}

struct Batch {
    features: Array2<f64>,
    noisy: VoxelGrid,
    latent: Option<VoxelGrid>,
}

fn assemble_batches(dataset: &TrainDataset, batch_scenes: usize) -> Vec<Batch> {
    dataset
        .train
        .chunks(batch_scenes)
        .map(|scenes| {
            let views: Vec<_> = scenes.iter().map(|s| s.features.view()).collect();
            let features = ndarray::concatenate(Axis(0), &views).expect("dims validated");
            let mut noisy = Vec::new();
            for s in scenes {
                noisy.extend_from_slice(s.noisy_labels.labels());
            }
            let latent = if scenes.iter().all(|s| s.latent_clean.is_some()) {
                let mut labels = Vec::new();
                for s in scenes {
                    labels.extend_from_slice(s.latent_clean.as_ref().unwrap().labels());
                }
                Some(
                    VoxelGrid::from_labels(Dims::new(labels.len(), 1, 1), labels)
                        .expect("length matches"),
                )
            } else {
                None
            };
            let len = noisy.len();
            Batch {
                features,
                noisy: VoxelGrid::from_labels(Dims::new(len, 1, 1), noisy)
                    .expect("length matches"),
                latent,
            }
        })
        .collect()
}

fn epoch_k(
    epoch: usize,
    cfg: &TrainConfig,
    categories: usize,
    k_rng: &mut impl Rng,
) -> Result<usize, TrainError> {
    match cfg.k_strategy {
        KStrategy::Linear => Ok(schedule_k(epoch, &cfg.schedule, categories)?),
        KStrategy::Fixed(k) => Ok(k.min(categories)),
        KStrategy::Random => {
            let lo = cfg.schedule.k_end.min(categories);
            let hi = cfg.schedule.k_start.min(categories);
            Ok(k_rng.random_range(lo..=hi))
        }
    }
}

/// Runs the full two-stage algorithm and returns the trained student, the
/// EMA teacher, the prototype bank, and the per-epoch history.
pub fn train(dataset: &TrainDataset, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let feature_dim = dataset.validate()?;
    let categories = dataset.space.num_categories();

    let mut student = StudentModel::new(
        cfg.architecture,
        feature_dim,
        categories,
        stage_seed(cfg.seed, "train.init"),
    );
    let mut teacher = TeacherState::from_student(&student, cfg.ema_momentum);
    let mut bank = PrototypeBank::new(
        categories,
        feature_dim,
        cfg.prototype_momentum,
        cfg.prototype_fusion_weight,
    )?;
    let mut k_rng = seeded_rng(stage_seed(cfg.seed, "train.k"));

    let batches = assemble_batches(dataset, cfg.batch_scenes);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();

    for epoch in 1..=cfg.epochs {
        let robust = epoch > cfg.warmup_epochs;
        let lr = cfg.lr.at(epoch);
        let k = if robust { Some(epoch_k(epoch, cfg, categories, &mut k_rng)?) } else { None };

        let mut base_sum = 0.0;
        let mut pll_sum = 0.0;
        let mut nl_sum = 0.0;
        let mut sntd_sum = 0.0;
        let mut total_sum = 0.0;
        let mut saturation = 0u64;
        let mut hit_sum = 0.0;
        let mut purity_sum = 0.0;
        let mut size_sum = 0.0;
        let mut hit_teacher_sum = 0.0;
        let mut hit_proto_sum = 0.0;
        let mut hit_union_sum = 0.0;
        let mut diag_steps = 0usize;

        for (step, batch) in batches.iter().enumerate() {
            let (logits, cache) = student.forward_cached(&batch.features)?;
            let student_field = LogitField::student(logits)?;
            let base = cross_entropy_loss(&student_field, &batch.noisy)?;

            let zero =
                || LossEvaluation::zero(student_field.num_voxels(), categories);
            let (pll, nl, sntd) = if robust {
                let k = k.expect("robust epochs always schedule K");
                let teacher_logits = teacher.model.forward(&batch.features)?;
                let teacher_probs = softmax_rows(&teacher_logits);
                let sims = similarity_against_bank(&batch.features, &bank)?;
                let include = cfg.include_noisy_label.then_some(&batch.noisy);
                let cands = build_candidates_from_sources(
                    &teacher_probs,
                    &sims,
                    k,
                    cfg.candidate_sources,
                    include,
                )?;

                if let Some(latent) = &batch.latent {
                    let diag = candidate_diagnostics(&cands, latent)?;
                    // The single-source sets are rebuilt on the same state so
                    // the union-dominance comparison is exact.
                    let teacher_only = build_candidates_from_sources(
                        &teacher_probs,
                        &sims,
                        k,
                        CandidateSources::TeacherOnly,
                        None,
                    )?;
                    let proto_only = build_candidates_from_sources(
                        &teacher_probs,
                        &sims,
                        k,
                        CandidateSources::PrototypeOnly,
                        None,
                    )?;
                    let union = build_candidates_from_sources(
                        &teacher_probs,
                        &sims,
                        k,
                        CandidateSources::Union,
                        None,
                    )?;
                    hit_sum += diag.hit_rate;
                    purity_sum += diag.mean_purity;
                    size_sum += cands.mean_candidate_size();
                    hit_teacher_sum += candidate_diagnostics(&teacher_only, latent)?.hit_rate;
                    hit_proto_sum += candidate_diagnostics(&proto_only, latent)?.hit_rate;
                    // The union hit rate is recorded under its own name even
                    // when an ablation trains on a single source.
                    hit_union_sum += candidate_diagnostics(&union, latent)?.hit_rate;
                    diag_steps += 1;
                }

                let pll = if cfg.loss_components.pll {
                    pll_loss(&student_field, &cands)?
                } else {
                    zero()
                };
                let nl = if cfg.loss_components.nl {
                    nl_loss(&student_field, &cands)?
                } else {
                    zero()
                };
                let sntd = if cfg.loss_components.sntd {
                    let teacher_field = LogitField::teacher(teacher_logits)?;
                    sntd_loss(&student_field, &teacher_field, &batch.noisy, &cfg.sntd)?
                } else {
                    zero()
                };
                (pll, nl, sntd)
            } else {
                (zero(), zero(), zero())
            };

            let total = total_loss(&base, &pll, &nl, &sntd, epoch, cfg.warmup_epochs);
            if !total.value.is_finite() {
                return Err(TrainError::Diverged { epoch, step, value: total.value });
            }

            let grads = student.backward(&batch.features, &cache, &total.grad)?;
            student.apply_step(&grads, lr)?;
            ema_update(&student, &mut teacher)?;

            // Prototype pooling: noisy labels during warm-up, teacher argmax
            // in the robust stage.
            let assignments: Vec<ClassId> = if robust {
                let teacher_logits = teacher.model.forward(&batch.features)?;
                argmax_rows(&teacher_logits)
            } else {
                batch.noisy.labels().to_vec()
            };
            update_prototypes(&batch.features, &assignments, &mut bank)?;

            base_sum += base.value;
            pll_sum += pll.value;
            nl_sum += nl.value;
            sntd_sum += sntd.value;
            total_sum += total.value;
            saturation += total.saturation_count;
            steps.push(StepRecord {
                epoch,
                step,
                base: base.value,
                pll: pll.value,
                nl: nl.value,
                sntd: sntd.value,
                total: total.value,
                nl_saturation_count: total.saturation_count,
            });
        }

        let num_steps = batches.len() as f64;
        let mut counts: Option<ConfusionCounts> = None;
        for eval in &dataset.eval {
            let pred = predict(&student, &eval.features, eval.refined_gt.dims())?;
            let c = confusion_counts(&pred, &eval.refined_gt, &dataset.space)?;
            match &mut counts {
                Some(total) => total.merge(&c),
                None => counts = Some(c),
            }
        }
        let (iou, miou) = match counts {
            Some(counts) => {
                let scores = iou_scores(&counts, cfg.eval_convention);
                (scores.geometric_iou, scores.miou)
            }
            None => (f64::NAN, f64::NAN),
        };

        let diag = diag_steps as f64;
        history.push(EpochRecord {
            epoch,
            k,
            base: base_sum / num_steps,
            pll: robust.then(|| pll_sum / num_steps),
            nl: robust.then(|| nl_sum / num_steps),
            sntd: robust.then(|| sntd_sum / num_steps),
            total: total_sum / num_steps,
            hit_rate: (diag_steps > 0).then(|| hit_sum / diag),
            purity: (diag_steps > 0).then(|| purity_sum / diag),
            mean_candidate_size: (diag_steps > 0).then(|| size_sum / diag),
            hit_rate_teacher: (diag_steps > 0).then(|| hit_teacher_sum / diag),
            hit_rate_prototype: (diag_steps > 0).then(|| hit_proto_sum / diag),
            hit_rate_union: (diag_steps > 0).then(|| hit_union_sum / diag),
            nl_saturation: saturation,
            iou,
            miou,
        });
    }

    Ok(TrainOutcome { student, teacher, prototypes: bank, history, steps })
}

fn argmax_rows(logits: &Array2<f64>) -> Vec<ClassId> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            let mut best_value = f64::NEG_INFINITY;
            for (c, &v) in row.iter().enumerate() {
                if v > best_value {
                    best_value = v;
                    best = c;
                }
            }
            best as ClassId
        })
        .collect()
}

/// Per-voxel argmax prediction; ties resolve to the smaller class id.
pub fn predict(
    model: &StudentModel,
    features: &Array2<f64>,
    dims: Dims,
) -> Result<VoxelGrid, TrainError> {
    if features.nrows() != dims.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} feature rows for a {} grid",
            features.nrows(),
            dims
        )));
    }
    let logits = model.forward(features)?;
    let labels = argmax_rows(&logits);
    Ok(VoxelGrid::from_labels(dims, labels)?)
}

/// Renders history as CSV with the fixed column set. Warm-up epochs leave
/// robust-stage cells empty.
pub fn history_to_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,K,base,pll,nl,sntd,total,hit_rate,purity,iou,miou\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in history {
        out.push_str(&format!(
            "{},{},{:.6},{},{},{},{:.6},{},{},{:.6},{:.6}\n",
            r.epoch,
            r.k.map(|k| k.to_string()).unwrap_or_default(),
            r.base,
            opt(r.pll),
            opt(r.nl),
            opt(r.sntd),
            r.total,
            opt(r.hit_rate),
            opt(r.purity),
            r.iou,
            r.miou,
        ));
    }
    out
}
