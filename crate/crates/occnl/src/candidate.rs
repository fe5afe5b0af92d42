//! Dual-source partial-label candidate sets.
//!
//! Per voxel, the candidate set is the union of the top-K categories under
//! the teacher's predicted distribution and the top-K under feature-prototype
//! cosine similarity; the complement set is everything else. K follows a
//! linear decay across robust-stage epochs.

use ndarray::Array2;
use thiserror::Error;

use crate::voxel::{ClassId, VoxelGrid};

/// Candidate sets are stored as per-voxel bitmasks.
pub const MAX_CATEGORIES: usize = 64;

#[derive(Debug, Error)]
pub enum CandidateError {
    #[error("feature dim {features} does not match prototype dim {prototypes}")]
    DimMismatch { features: usize, prototypes: usize },
    #[error("zero-norm {kind} vector at row {index}")]
    ZeroNorm { kind: &'static str, index: usize },
    #[error("schedule invalid: {0}")]
    InvalidSchedule(String),
    #[error("epoch {epoch} is in the warm-up stage (warm-up ends after epoch {warmup})")]
    WarmupEpoch { epoch: usize, warmup: usize },
    #[error("teacher probability row {row} sums to {sum}, expected 1 within 1e-6")]
    ProbRowSum { row: usize, sum: f64 },
    #[error("K must be at least 1")]
    ZeroK,
    #[error("inputs disagree on voxel count: {left} vs {right}")]
    VoxelCountMismatch { left: usize, right: usize },
    #[error("inputs disagree on category count: {left} vs {right}")]
    CategoryCountMismatch { left: usize, right: usize },
    #[error("{0} categories exceed the supported maximum of {MAX_CATEGORIES}")]
    TooManyCategories(usize),
}

/// Per-(voxel, class) cosine similarities, each in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    scores: Array2<f64>,
}

impl SimilarityMatrix {
    /// Wraps precomputed scores. Out-of-range entries are rejected.
    pub fn from_scores(scores: Array2<f64>) -> Result<Self, CandidateError> {
        for (i, &s) in scores.iter().enumerate() {
            if !(-1.0 - 1e-12..=1.0 + 1e-12).contains(&s) {
                return Err(CandidateError::ZeroNorm {
                    kind: "similarity (score outside [-1, 1]) for",
                    index: i,
                });
            }
        }
        Ok(SimilarityMatrix { scores })
    }

    pub fn scores(&self) -> &Array2<f64> {
        &self.scores
    }

    pub fn num_voxels(&self) -> usize {
        self.scores.nrows()
    }

    pub fn num_categories(&self) -> usize {
        self.scores.ncols()
    }
}

/// Cosine similarity between every voxel feature and every class prototype.
/// Zero-norm rows are a numeric-domain error, not silently clamped.
pub fn prototype_similarity(
    features: &Array2<f64>,
    prototypes: &Array2<f64>,
) -> Result<SimilarityMatrix, CandidateError> {
    if features.ncols() != prototypes.ncols() {
        return Err(CandidateError::DimMismatch {
            features: features.ncols(),
            prototypes: prototypes.ncols(),
        });
    }
    let feature_norms: Vec<f64> = features
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    if let Some(i) = feature_norms.iter().position(|&n| n == 0.0) {
        return Err(CandidateError::ZeroNorm { kind: "feature", index: i });
    }
    let proto_norms: Vec<f64> = prototypes
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    if let Some(c) = proto_norms.iter().position(|&n| n == 0.0) {
        return Err(CandidateError::ZeroNorm { kind: "prototype", index: c });
    }

    let mut scores = features.dot(&prototypes.t());
    for ((v, c), s) in scores.indexed_iter_mut() {
        *s /= feature_norms[v] * proto_norms[c];
        // Dot products can leak a hair past 1 in floating point.
        *s = s.clamp(-1.0, 1.0);
    }
    Ok(SimilarityMatrix { scores })
}

/// Linear candidate-size decay over the robust stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KSchedule {
    pub k_start: usize,
    pub k_end: usize,
    pub gamma: usize,
    pub warmup_epochs: usize,
}

impl KSchedule {
    /// The reference configuration: start 9, end 2, step 2, warm-up 12.
    pub fn reference() -> Self {
        KSchedule { k_start: 9, k_end: 2, gamma: 2, warmup_epochs: 12 }
    }

    pub fn validate(&self, num_categories: usize) -> Result<(), CandidateError> {
        if self.k_end < 1 {
            return Err(CandidateError::InvalidSchedule("K_end must be at least 1".into()));
        }
        if self.k_end > self.k_start {
            return Err(CandidateError::InvalidSchedule(format!(
                "K_end {} exceeds K_start {}",
                self.k_end, self.k_start
            )));
        }
        if self.k_start > num_categories {
            return Err(CandidateError::InvalidSchedule(format!(
                "K_start {} exceeds the {} categories",
                self.k_start, num_categories
            )));
        }
        Ok(())
    }
}

/// Candidate-set size for a robust-stage epoch:
/// `max(K_end, K_start - gamma * (e - E_w - 1))`, clamped to the category
/// count. Warm-up epochs have no candidate sets.
pub fn schedule_k(
    epoch: usize,
    schedule: &KSchedule,
    num_categories: usize,
) -> Result<usize, CandidateError> {
    if epoch <= schedule.warmup_epochs {
        return Err(CandidateError::WarmupEpoch { epoch, warmup: schedule.warmup_epochs });
    }
    let steps = (epoch - schedule.warmup_epochs - 1) as i64;
    let decayed = schedule.k_start as i64 - schedule.gamma as i64 * steps;
    let k = decayed.max(schedule.k_end as i64) as usize;
    if k > num_categories {
        log::warn!("K_e = {k} exceeds the {num_categories} categories; clamping");
        return Ok(num_categories);
    }
    Ok(k)
}

/// Per-voxel partial-label sets and their complements. The two always
/// partition the full label space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    masks: Vec<u64>,
    num_categories: usize,
}

impl CandidateSet {
    pub fn num_voxels(&self) -> usize {
        self.masks.len()
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    pub fn contains(&self, voxel: usize, class: ClassId) -> bool {
        self.masks[voxel] >> class & 1 == 1
    }

    /// |PL_v|
    pub fn candidate_count(&self, voxel: usize) -> usize {
        self.masks[voxel].count_ones() as usize
    }

    /// |NL_v|
    pub fn complement_count(&self, voxel: usize) -> usize {
        self.num_categories - self.candidate_count(voxel)
    }

    pub fn candidates(&self, voxel: usize) -> impl Iterator<Item = ClassId> + '_ {
        let mask = self.masks[voxel];
        (0..self.num_categories as ClassId).filter(move |&c| mask >> c & 1 == 1)
    }

    pub fn complement(&self, voxel: usize) -> impl Iterator<Item = ClassId> + '_ {
        let mask = self.masks[voxel];
        (0..self.num_categories as ClassId).filter(move |&c| mask >> c & 1 == 0)
    }

    pub fn mean_candidate_size(&self) -> f64 {
        if self.masks.is_empty() {
            return 0.0;
        }
        let total: usize = (0..self.masks.len()).map(|v| self.candidate_count(v)).sum();
        total as f64 / self.masks.len() as f64
    }
}

/// Which evidence sources feed the candidate union. `Union` is the standard
/// dual-source construction; the single-source variants exist for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CandidateSources {
    Union,
    TeacherOnly,
    PrototypeOnly,
}

/// Indices of the top-`k` entries of `row`, ties broken toward the smaller
/// class id.
fn top_k_mask(row: &[f64], k: usize) -> u64 {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut mask = 0u64;
    for &c in order.iter().take(k) {
        mask |= 1 << c;
    }
    mask
}

fn validate_probs(teacher_probs: &Array2<f64>) -> Result<(), CandidateError> {
    for (row, r) in teacher_probs.rows().into_iter().enumerate() {
        let sum: f64 = r.sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(CandidateError::ProbRowSum { row, sum });
        }
    }
    Ok(())
}

/// Standard dual-source construction: per voxel, the union of the teacher's
/// top-K classes and the prototype-similarity top-K classes.
pub fn build_candidates(
    teacher_probs: &Array2<f64>,
    sims: &SimilarityMatrix,
    k: usize,
) -> Result<CandidateSet, CandidateError> {
    build_candidates_from_sources(teacher_probs, sims, k, CandidateSources::Union, None)
}

/// Candidate construction with a selectable evidence source and an optional
/// force-include of the observed noisy label (an ablation flag, off in the
/// standard construction).
pub fn build_candidates_from_sources(
    teacher_probs: &Array2<f64>,
    sims: &SimilarityMatrix,
    k: usize,
    sources: CandidateSources,
    include_noisy: Option<&VoxelGrid>,
) -> Result<CandidateSet, CandidateError> {
    if k == 0 {
        return Err(CandidateError::ZeroK);
    }
    let n = teacher_probs.nrows();
    let categories = teacher_probs.ncols();
    if sims.num_voxels() != n {
        return Err(CandidateError::VoxelCountMismatch { left: n, right: sims.num_voxels() });
    }
    if sims.num_categories() != categories {
        return Err(CandidateError::CategoryCountMismatch {
            left: categories,
            right: sims.num_categories(),
        });
    }
    if categories > MAX_CATEGORIES {
        return Err(CandidateError::TooManyCategories(categories));
    }
    if let Some(noisy) = include_noisy {
        if noisy.labels().len() != n {
            return Err(CandidateError::VoxelCountMismatch {
                left: n,
                right: noisy.labels().len(),
            });
        }
    }
    validate_probs(teacher_probs)?;
    let k = if k > categories {
        log::warn!("top-K of {k} clamped to the {categories} categories");
        categories
    } else {
        k
    };

    let mut masks = vec![0u64; n];
    for (v, slot) in masks.iter_mut().enumerate() {
        let teacher_row = teacher_probs.row(v);
        let sim_row = sims.scores().row(v);
        let mut mask = match sources {
            CandidateSources::Union => {
                top_k_mask(teacher_row.as_slice().unwrap(), k)
                    | top_k_mask(sim_row.as_slice().unwrap(), k)
            }
            CandidateSources::TeacherOnly => top_k_mask(teacher_row.as_slice().unwrap(), k),
            CandidateSources::PrototypeOnly => top_k_mask(sim_row.as_slice().unwrap(), k),
        };
        if let Some(noisy) = include_noisy {
            mask |= 1 << noisy.labels()[v];
        }
        *slot = mask;
    }
    Ok(CandidateSet { masks, num_categories: categories })
}

/// Hit rate and purity against the latent clean labels: hit rate is the
/// fraction of voxels whose true label lies in the candidate set; purity is
/// the mean of `1/|PL_v|` over hit voxels (0 if nothing hits).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateDiagnostics {
    pub hit_rate: f64,
    pub mean_purity: f64,
}

pub fn candidate_diagnostics(
    cands: &CandidateSet,
    latent_gt: &VoxelGrid,
) -> Result<CandidateDiagnostics, CandidateError> {
    let n = cands.num_voxels();
    if latent_gt.labels().len() != n {
        return Err(CandidateError::VoxelCountMismatch {
            left: n,
            right: latent_gt.labels().len(),
        });
    }
    if n == 0 {
        return Ok(CandidateDiagnostics { hit_rate: 0.0, mean_purity: 0.0 });
    }
    let mut hits = 0usize;
    let mut purity_sum = 0.0;
    for (v, &label) in latent_gt.labels().iter().enumerate() {
        if cands.contains(v, label) {
            hits += 1;
            purity_sum += 1.0 / cands.candidate_count(v) as f64;
        }
    }
    let mean_purity = if hits == 0 { 0.0 } else { purity_sum / hits as f64 };
    Ok(CandidateDiagnostics { hit_rate: hits as f64 / n as f64, mean_purity })
}
