//! Ground-truth refinement, occupancy-asymmetric label noise, trailing-noise
//! severity levels, and noise diagnostics.
//!
//! Occupied voxels flip with probability `eta` to a uniform draw over the
//! other categories (empty included); empty voxels flip with probability
//! `1e-3 * eta` to a uniform semantic class. Per-voxel draws are keyed by
//! `(seed, voxel index)` so results are independent of traversal order.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::indexed_rng;
use crate::scene::{aggregate_frames, dilate_dynamic, SceneError, SceneSequence};
use crate::voxel::{class_histogram, ClassId, LabelSpace, VoxelGrid, VoxelMask, EMPTY};

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("noise rate eta must lie in [0, 1], got {0}")]
    InvalidEta(f64),
    #[error("grid is {grid} but mask is {mask}")]
    MaskDimsMismatch { grid: crate::voxel::Dims, mask: crate::voxel::Dims },
    #[error("grids have different dims: {left} vs {right}")]
    GridDimsMismatch { left: crate::voxel::Dims, right: crate::voxel::Dims },
    #[error("trailing window needs frames {needed} but the sequence has 0..{available}")]
    InsufficientFrames { needed: String, available: usize },
    #[error(transparent)]
    Voxel(#[from] crate::voxel::VoxelError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// Occupancy-asymmetric noise parameters. The empty-voxel flip rate is fixed
/// to `1e-3 * eta` by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsymNoiseSpec {
    eta: f64,
    seed: u64,
}

impl AsymNoiseSpec {
    pub fn new(eta: f64, seed: u64) -> Result<Self, NoiseError> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(NoiseError::InvalidEta(eta));
        }
        Ok(AsymNoiseSpec { eta, seed })
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn empty_rate(&self) -> f64 {
        1e-3 * self.eta
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Trailing-noise severity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrailingLevel {
    Mild,
    Moderate,
    Severe,
}

impl TrailingLevel {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrailingLevel::Mild => "mild",
            TrailingLevel::Moderate => "moderate",
            TrailingLevel::Severe => "severe",
        }
    }
}

impl std::str::FromStr for TrailingLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mild" => Ok(TrailingLevel::Mild),
            "moderate" => Ok(TrailingLevel::Moderate),
            "severe" => Ok(TrailingLevel::Severe),
            other => Err(format!("unknown trailing level `{other}`")),
        }
    }
}

/// Frame windows used to assemble trailing noise around the reference frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrailingWindow {
    /// Frames after the reference included in every level.
    pub future: usize,
    /// Frames before the reference added at Moderate and Severe.
    pub historical: usize,
    /// Dilation iterations applied at Severe.
    pub dilation_iterations: usize,
}

impl Default for TrailingWindow {
    fn default() -> Self {
        TrailingWindow { future: 7, historical: 7, dilation_iterations: 1 }
    }
}

/// Diagnostics comparing a noisy grid against its clean source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub realized_occupied_flip: f64,
    pub realized_empty_flip: f64,
    /// `noisy_count - clean_count` per class id.
    pub per_class_drift: Vec<i64>,
    /// Entropy of the noisy semantic histogram normalized by `ln C`.
    pub normalized_entropy: f64,
}

/// Removes trailing artifacts: a dynamic-class voxel outside the instance
/// mask becomes empty; everything else is untouched.
pub fn refine_ground_truth(
    grid: &VoxelGrid,
    mask: &VoxelMask,
    space: &LabelSpace,
) -> Result<VoxelGrid, NoiseError> {
    if grid.dims() != mask.dims() {
        return Err(NoiseError::MaskDimsMismatch { grid: grid.dims(), mask: mask.dims() });
    }
    let mut out = grid.clone();
    for (i, label) in out.labels_mut().iter_mut().enumerate() {
        if space.is_dynamic(*label) && !mask.contains(i) {
            *label = EMPTY;
        }
    }
    Ok(out)
}

/// Applies occupancy-asymmetric noise. Flipped labels never equal the
/// original; the replacement is uniform over the alternatives thanks to
/// rejection-free index arithmetic (draw `k` in `[0, C)` and skip the
/// original label).
pub fn inject_asymmetric(
    grid: &VoxelGrid,
    spec: &AsymNoiseSpec,
    space: &LabelSpace,
) -> Result<VoxelGrid, NoiseError> {
    if let crate::voxel::GridValidation::LabelViolation { index, label, max } =
        crate::voxel::validate_grid(grid, space)
    {
        return Err(NoiseError::Voxel(crate::voxel::VoxelError::InvalidLabel {
            index,
            label,
            max,
        }));
    }
    let num_semantic = space.num_semantic() as u32;
    let eta = spec.eta();
    let empty_rate = spec.empty_rate();
    let seed = spec.seed();

    let mut out = grid.clone();
    out.labels_mut().par_iter_mut().enumerate().for_each(|(v, label)| {
        let mut rng = indexed_rng(seed, v as u64);
        let u: f64 = rng.random();
        if *label == EMPTY {
            if u < empty_rate {
                // Uniform over semantic classes 1..=C.
                let k = rng.random_range(0..num_semantic);
                *label = (k + 1) as ClassId;
            }
        } else if u < eta {
            // Uniform over the other C categories, empty included.
            let k = rng.random_range(0..num_semantic);
            let candidate = k as ClassId;
            *label = if candidate < *label { candidate } else { candidate + 1 };
        }
    });
    Ok(out)
}

/// Assembles one trailing-noise severity level around the sequence's
/// reference frame. Mild fuses the future window; Moderate adds the
/// historical window; Severe additionally dilates dynamic voxels.
pub fn build_trailing_level(
    seq: &SceneSequence,
    level: TrailingLevel,
    window: &TrailingWindow,
) -> Result<VoxelGrid, NoiseError> {
    let t = seq.reference_frame;
    let frames = seq.num_frames();
    if t + window.future >= frames {
        return Err(NoiseError::InsufficientFrames {
            needed: format!("{}..={}", t, t + window.future),
            available: frames,
        });
    }
    let future: Vec<usize> = (t..=t + window.future).collect();
    let grid = match level {
        TrailingLevel::Mild => aggregate_frames(seq, &future)?,
        TrailingLevel::Moderate | TrailingLevel::Severe => {
            if window.historical > t {
                return Err(NoiseError::InsufficientFrames {
                    needed: format!("{}..={}", t as i64 - window.historical as i64, t),
                    available: frames,
                });
            }
            let full: Vec<usize> = (t - window.historical..=t + window.future).collect();
            let moderate = aggregate_frames(seq, &full)?;
            if level == TrailingLevel::Severe {
                dilate_dynamic(&moderate, &seq.space, window.dilation_iterations.max(1))?
            } else {
                moderate
            }
        }
    };
    Ok(grid)
}

/// Measures realized flip fractions, per-class count drift, and the
/// normalized entropy of the noisy semantic histogram.
pub fn noise_statistics(
    clean: &VoxelGrid,
    noisy: &VoxelGrid,
    space: &LabelSpace,
) -> Result<NoiseReport, NoiseError> {
    if clean.dims() != noisy.dims() {
        return Err(NoiseError::GridDimsMismatch { left: clean.dims(), right: noisy.dims() });
    }
    let mut occupied = 0u64;
    let mut occupied_flipped = 0u64;
    let mut empty = 0u64;
    let mut empty_flipped = 0u64;
    for (&c, &n) in clean.labels().iter().zip(noisy.labels()) {
        if c == EMPTY {
            empty += 1;
            if n != c {
                empty_flipped += 1;
            }
        } else {
            occupied += 1;
            if n != c {
                occupied_flipped += 1;
            }
        }
    }
    let clean_hist = class_histogram(clean, space)?;
    let noisy_hist = class_histogram(noisy, space)?;
    let per_class_drift = noisy_hist
        .counts()
        .iter()
        .zip(clean_hist.counts())
        .map(|(&n, &c)| n as i64 - c as i64)
        .collect();

    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok(NoiseReport {
        realized_occupied_flip: ratio(occupied_flipped, occupied),
        realized_empty_flip: ratio(empty_flipped, empty),
        per_class_drift,
        normalized_entropy: noisy_hist.normalized_semantic_entropy(),
    })
}
