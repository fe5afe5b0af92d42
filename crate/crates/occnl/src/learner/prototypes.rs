//! Class prototype maintenance.
//!
//! Each class keeps a scene-adaptive prototype (the mean feature of the
//! voxels currently assigned to it) and a scene-agnostic prototype (a
//! momentum accumulation of scene-adaptive prototypes across updates). The
//! fused prototype used for similarity scoring blends the two. Classes that
//! have never been assigned are flagged absent rather than given a fake
//! vector.

use ndarray::Array2;

use super::TrainError;
use crate::voxel::ClassId;

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    momentum: f64,
    fusion_weight: f64,
    scene_adaptive: Array2<f64>,
    scene_agnostic: Array2<f64>,
    seen: Vec<bool>,
}

impl PrototypeBank {
    /// `momentum` drives the scene-agnostic accumulation; `fusion_weight` is
    /// the share of the scene-adaptive prototype in the fused blend.
    pub fn new(
        num_categories: usize,
        dim: usize,
        momentum: f64,
        fusion_weight: f64,
    ) -> Result<Self, TrainError> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(TrainError::InvalidConfig(format!(
                "prototype momentum {momentum} outside [0, 1]"
            )));
        }
        if !(0.0..=1.0).contains(&fusion_weight) {
            return Err(TrainError::InvalidConfig(format!(
                "prototype fusion weight {fusion_weight} outside [0, 1]"
            )));
        }
        Ok(PrototypeBank {
            momentum,
            fusion_weight,
            scene_adaptive: Array2::zeros((num_categories, dim)),
            scene_agnostic: Array2::zeros((num_categories, dim)),
            seen: vec![false; num_categories],
        })
    }

    pub fn num_categories(&self) -> usize {
        self.seen.len()
    }

    pub fn dim(&self) -> usize {
        self.scene_adaptive.ncols()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn fusion_weight(&self) -> f64 {
        self.fusion_weight
    }

    pub fn scene_adaptive(&self) -> &Array2<f64> {
        &self.scene_adaptive
    }

    pub fn scene_agnostic(&self) -> &Array2<f64> {
        &self.scene_agnostic
    }

    /// Whether class `c` has ever received an assignment.
    pub fn is_present(&self, c: ClassId) -> bool {
        self.seen[c as usize]
    }

    pub fn seen(&self) -> &[bool] {
        &self.seen
    }

    /// Fused prototypes `fw * adaptive + (1 - fw) * agnostic`. Rows of absent
    /// classes are zero and flagged in the returned mask.
    pub fn fused(&self) -> (Array2<f64>, Vec<bool>) {
        let mut fused = Array2::zeros(self.scene_adaptive.dim());
        for c in 0..self.num_categories() {
            if self.seen[c] {
                for d in 0..self.dim() {
                    fused[(c, d)] = self.fusion_weight * self.scene_adaptive[(c, d)]
                        + (1.0 - self.fusion_weight) * self.scene_agnostic[(c, d)];
                }
            }
        }
        (fused, self.seen.clone())
    }

    /// Restores a bank from checkpoint tensors.
    pub(crate) fn from_parts(
        momentum: f64,
        fusion_weight: f64,
        scene_adaptive: Array2<f64>,
        scene_agnostic: Array2<f64>,
        seen: Vec<bool>,
    ) -> Result<Self, TrainError> {
        if scene_adaptive.dim() != scene_agnostic.dim() || seen.len() != scene_adaptive.nrows() {
            return Err(TrainError::ShapeMismatch("prototype bank parts disagree".into()));
        }
        Ok(PrototypeBank { momentum, fusion_weight, scene_adaptive, scene_agnostic, seen })
    }
}

/// Folds one batch of `(feature, assignment)` pairs into the bank. For each
/// class present in the batch, the scene-adaptive prototype becomes the class
/// mean; the scene-agnostic prototype takes a momentum step toward it (or is
/// initialized to it on first sight). Absent classes are untouched.
pub fn update_prototypes(
    features: &Array2<f64>,
    assignments: &[ClassId],
    bank: &mut PrototypeBank,
) -> Result<(), TrainError> {
    if features.nrows() != assignments.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} feature rows but {} assignments",
            features.nrows(),
            assignments.len()
        )));
    }
    if features.ncols() != bank.dim() {
        return Err(TrainError::ShapeMismatch(format!(
            "feature dim {} but bank dim {}",
            features.ncols(),
            bank.dim()
        )));
    }
    let categories = bank.num_categories();
    let dim = bank.dim();
    let mut sums = Array2::<f64>::zeros((categories, dim));
    let mut counts = vec![0u64; categories];
    for (row, &assignment) in assignments.iter().enumerate() {
        let c = assignment as usize;
        if c >= categories {
            return Err(TrainError::InvalidDataset(format!(
                "assignment {assignment} outside the {categories}-category space"
            )));
        }
        counts[c] += 1;
        for d in 0..dim {
            sums[(c, d)] += features[(row, d)];
        }
    }
    for c in 0..categories {
        if counts[c] == 0 {
            continue;
        }
        let inv = 1.0 / counts[c] as f64;
        for d in 0..dim {
            bank.scene_adaptive[(c, d)] = sums[(c, d)] * inv;
        }
        if bank.seen[c] {
            let m = bank.momentum;
            for d in 0..dim {
                bank.scene_agnostic[(c, d)] =
                    m * bank.scene_agnostic[(c, d)] + (1.0 - m) * bank.scene_adaptive[(c, d)];
            }
        } else {
            for d in 0..dim {
                bank.scene_agnostic[(c, d)] = bank.scene_adaptive[(c, d)];
            }
            bank.seen[c] = true;
        }
    }
    Ok(())
}
