//! Procedural desk-scale scene sequences: a static background with a
//! long-tailed class profile plus moving box objects, the per-frame instance
//! masks, and class-conditional Gaussian voxel features.
//!
//! Sequences carry their latent clean ground truth so downstream noise
//! construction and candidate diagnostics can measure against it.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::rng::{indexed_rng, seeded_rng, stage_seed};
use crate::voxel::{ClassId, Dims, LabelSpace, VoxelGrid, VoxelMask, EMPTY};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("scene spec invalid: {0}")]
    InvalidSpec(String),
    #[error("aggregation window is empty")]
    EmptyWindow,
    #[error("frame {frame} out of range (sequence has {frames} frames)")]
    FrameOutOfRange { frame: usize, frames: usize },
    #[error("dilation requires at least one iteration")]
    ZeroIterations,
    #[error(transparent)]
    Voxel(#[from] crate::voxel::VoxelError),
}

/// A moving box object. Its minimum corner sits at `spawn` on `spawn_frame`
/// and translates by `velocity` voxels per frame, clipped to the grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectTemplate {
    pub class: ClassId,
    pub extents: (usize, usize, usize),
    pub velocity: (i64, i64, i64),
    pub spawn: (i64, i64, i64),
    pub spawn_frame: usize,
}

impl ObjectTemplate {
    /// Minimum corner at the given frame, before clipping.
    fn corner_at(&self, frame: usize) -> (i64, i64, i64) {
        let dt = frame as i64 - self.spawn_frame as i64;
        (
            self.spawn.0 + self.velocity.0 * dt,
            self.spawn.1 + self.velocity.1 * dt,
            self.spawn.2 + self.velocity.2 * dt,
        )
    }
}

/// Full recipe for a generated sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub dims: Dims,
    pub num_frames: usize,
    pub reference_frame: usize,
    pub space: LabelSpace,
    /// z-layers `0..ground_height` are filled with `ground_class`.
    pub ground_height: usize,
    pub ground_class: ClassId,
    /// Patch budget for the static background; per-class counts follow a
    /// geometric long-tailed profile with ratio `patch_decay`.
    pub patch_budget: usize,
    pub patch_decay: f64,
    pub max_patch_extent: usize,
    pub objects: Vec<ObjectTemplate>,
    /// Optional residual per-frame misalignment of object poses, in voxels.
    /// Off by default.
    pub jitter: Option<u32>,
}

impl SceneSpec {
    /// Desk-scale default: 48x48x8 grid, 15 frames, the 19-class outdoor
    /// vocabulary, and four moving objects tuned to keep the dynamic voxel
    /// fraction in the low single digits of percent.
    pub fn default_desk() -> Self {
        let space = LabelSpace::outdoor19();
        SceneSpec {
            dims: Dims::new(48, 48, 8),
            num_frames: 15,
            reference_frame: 7,
            space,
            ground_height: 2,
            ground_class: 1,
            patch_budget: 60,
            patch_decay: 0.65,
            max_patch_extent: 5,
            objects: vec![
                ObjectTemplate {
                    class: 6,
                    extents: (4, 3, 2),
                    velocity: (1, 0, 0),
                    spawn: (2, 8, 2),
                    spawn_frame: 0,
                },
                ObjectTemplate {
                    class: 7,
                    extents: (5, 3, 3),
                    velocity: (1, 1, 0),
                    spawn: (4, 28, 2),
                    spawn_frame: 0,
                },
                ObjectTemplate {
                    class: 14,
                    extents: (2, 2, 3),
                    velocity: (0, 1, 0),
                    spawn: (30, 3, 2),
                    spawn_frame: 0,
                },
                ObjectTemplate {
                    class: 6,
                    extents: (4, 3, 2),
                    velocity: (-1, 0, 0),
                    spawn: (40, 38, 2),
                    spawn_frame: 0,
                },
            ],
            jitter: None,
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.num_frames == 0 {
            return Err(SceneError::InvalidSpec("num_frames must be at least 1".into()));
        }
        if self.reference_frame >= self.num_frames {
            return Err(SceneError::InvalidSpec(format!(
                "reference_frame {} outside 0..{}",
                self.reference_frame, self.num_frames
            )));
        }
        if self.dims.is_empty() {
            return Err(SceneError::InvalidSpec("grid has zero voxels".into()));
        }
        if self.ground_height > self.dims.nz {
            return Err(SceneError::InvalidSpec("ground plane taller than the grid".into()));
        }
        if self.ground_class == EMPTY
            || !self.space.is_valid_label(self.ground_class)
            || self.space.is_dynamic(self.ground_class)
        {
            return Err(SceneError::InvalidSpec("ground_class must be a static semantic class".into()));
        }
        if self.max_patch_extent == 0 {
            return Err(SceneError::InvalidSpec("max_patch_extent must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.patch_decay) {
            return Err(SceneError::InvalidSpec("patch_decay must lie in [0, 1]".into()));
        }
        for (i, obj) in self.objects.iter().enumerate() {
            if !self.space.is_dynamic(obj.class) {
                return Err(SceneError::InvalidSpec(format!(
                    "object {i} uses class {} which is not dynamic",
                    obj.class
                )));
            }
            let (ex, ey, ez) = obj.extents;
            if ex == 0 || ey == 0 || ez == 0 {
                return Err(SceneError::InvalidSpec(format!("object {i} has a zero extent")));
            }
            if ex > self.dims.nx || ey > self.dims.ny || ez > self.dims.nz {
                return Err(SceneError::InvalidSpec(format!(
                    "object {i} ({ex}x{ey}x{ez}) is larger than the grid {}",
                    self.dims
                )));
            }
            if obj.spawn_frame >= self.num_frames {
                return Err(SceneError::InvalidSpec(format!(
                    "object {i} spawns at frame {} outside the sequence",
                    obj.spawn_frame
                )));
            }
        }
        Ok(())
    }
}

/// A generated sequence: per-frame grids, per-frame dynamic instance masks,
/// the static background, and the latent clean reference grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSequence {
    pub space: LabelSpace,
    pub background: VoxelGrid,
    pub frames: Vec<VoxelGrid>,
    pub instance_masks: Vec<VoxelMask>,
    pub clean_gt: VoxelGrid,
    pub reference_frame: usize,
    /// Fraction of reference-frame voxels carrying a dynamic class.
    pub dynamic_fraction: f64,
}

impl SceneSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn dims(&self) -> Dims {
        self.background.dims()
    }
}

/// Generates a sequence. Identical `(spec, seed)` pairs produce identical
/// sequences byte for byte.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SceneSequence, SceneError> {
    spec.validate()?;
    let dims = spec.dims;
    let space = spec.space.clone();

    let mut background = VoxelGrid::filled(dims, EMPTY);
    for z in 0..spec.ground_height {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let i = dims.linear_index(x, y, z)?;
                background.labels_mut()[i] = spec.ground_class;
            }
        }
    }

    // Static patches: semantic, non-dynamic, non-ground classes in id order,
    // with a geometric frequency profile so the clean histogram is
    // long-tailed.
    let patch_classes: Vec<ClassId> = (1..=space.num_semantic())
        .filter(|&c| !space.is_dynamic(c) && c != spec.ground_class)
        .collect();
    let mut rng = seeded_rng(stage_seed(seed, "scene.background"));
    if !patch_classes.is_empty() && spec.patch_budget > 0 {
        let weights: Vec<f64> =
            (0..patch_classes.len()).map(|r| spec.patch_decay.powi(r as i32)).collect();
        let weight_sum: f64 = weights.iter().sum();
        for (rank, &class) in patch_classes.iter().enumerate() {
            let count =
                ((spec.patch_budget as f64) * weights[rank] / weight_sum).round() as usize;
            for _ in 0..count.max(1) {
                let ex = rng.random_range(1..=spec.max_patch_extent.min(dims.nx));
                let ey = rng.random_range(1..=spec.max_patch_extent.min(dims.ny));
                let ez = rng.random_range(1..=spec.max_patch_extent.min(dims.nz));
                let x0 = rng.random_range(0..=dims.nx - ex);
                let y0 = rng.random_range(0..=dims.ny - ey);
                let z0 = rng.random_range(0..=dims.nz - ez);
                for z in z0..z0 + ez {
                    for y in y0..y0 + ey {
                        for x in x0..x0 + ex {
                            let i = dims.linear_index(x, y, z)?;
                            // Patches only claim empty space.
                            if background.labels()[i] == EMPTY {
                                background.labels_mut()[i] = class;
                            }
                        }
                    }
                }
            }
        }
    }

    let jitter_seed = stage_seed(seed, "scene.jitter");
    let mut frames = Vec::with_capacity(spec.num_frames);
    let mut instance_masks = Vec::with_capacity(spec.num_frames);
    for t in 0..spec.num_frames {
        let mut frame = background.clone();
        let mut mask = VoxelMask::empty(dims);
        for (obj_index, obj) in spec.objects.iter().enumerate() {
            let mut corner = obj.corner_at(t);
            if let Some(j) = spec.jitter {
                let j = j as i64;
                let mut jr = indexed_rng(jitter_seed, (t * spec.objects.len() + obj_index) as u64);
                corner.0 += jr.random_range(-j..=j);
                corner.1 += jr.random_range(-j..=j);
                corner.2 += jr.random_range(-j..=j);
            }
            paint_box(&mut frame, &mut mask, &background, corner, obj.extents, obj.class);
        }
        frames.push(frame);
        instance_masks.push(mask);
    }

    let clean_gt = frames[spec.reference_frame].clone();
    let dynamic_count =
        clean_gt.labels().iter().filter(|&&c| space.is_dynamic(c)).count();
    let dynamic_fraction = dynamic_count as f64 / dims.len() as f64;

    Ok(SceneSequence {
        space,
        background,
        frames,
        instance_masks,
        clean_gt,
        reference_frame: spec.reference_frame,
        dynamic_fraction,
    })
}

/// Paints the clipped object box onto empty-background voxels. Objects never
/// overwrite static structure; where objects overlap, the later painter wins.
fn paint_box(
    frame: &mut VoxelGrid,
    mask: &mut VoxelMask,
    background: &VoxelGrid,
    corner: (i64, i64, i64),
    extents: (usize, usize, usize),
    class: ClassId,
) {
    let dims = frame.dims();
    let x0 = corner.0.max(0) as usize;
    let y0 = corner.1.max(0) as usize;
    let z0 = corner.2.max(0) as usize;
    let x1 = (corner.0 + extents.0 as i64).clamp(0, dims.nx as i64) as usize;
    let y1 = (corner.1 + extents.1 as i64).clamp(0, dims.ny as i64) as usize;
    let z1 = (corner.2 + extents.2 as i64).clamp(0, dims.nz as i64) as usize;
    for z in z0..z1 {
        for y in y0..y1 {
            for x in x0..x1 {
                let i = x + dims.nx * (y + dims.ny * z);
                if background.labels()[i] == EMPTY {
                    frame.labels_mut()[i] = class;
                    mask.set(i);
                }
            }
        }
    }
}

/// Fuses the frames in `window` into one grid: static background wins, and an
/// empty-background voxel takes the dynamic class of the latest window frame
/// whose object covers it. This is the uncompensated trailing union.
pub fn aggregate_frames(seq: &SceneSequence, window: &[usize]) -> Result<VoxelGrid, SceneError> {
    if window.is_empty() {
        return Err(SceneError::EmptyWindow);
    }
    for &t in window {
        if t >= seq.num_frames() {
            return Err(SceneError::FrameOutOfRange { frame: t, frames: seq.num_frames() });
        }
    }
    let mut sorted: Vec<usize> = window.to_vec();
    sorted.sort_unstable();
    sorted.dedup();

    let mut out = seq.background.clone();
    for &t in &sorted {
        let frame = &seq.frames[t];
        for i in seq.instance_masks[t].indices() {
            out.labels_mut()[i] = frame.labels()[i];
        }
    }
    Ok(out)
}

/// Grows dynamic regions: each empty voxel face-adjacent (6-neighborhood) to
/// a dynamic voxel takes the class of the dynamic neighbor with the smallest
/// linear index. Updates within one iteration are simultaneous; non-empty
/// voxels are never overwritten.
pub fn dilate_dynamic(
    grid: &VoxelGrid,
    space: &LabelSpace,
    iterations: usize,
) -> Result<VoxelGrid, SceneError> {
    if iterations == 0 {
        return Err(SceneError::ZeroIterations);
    }
    let dims = grid.dims();
    let mut current = grid.clone();
    for _ in 0..iterations {
        let mut next = current.clone();
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    let i = x + dims.nx * (y + dims.ny * z);
                    if current.labels()[i] != EMPTY {
                        continue;
                    }
                    let mut acquired: Option<(usize, ClassId)> = None;
                    let mut consider = |nx_: i64, ny_: i64, nz_: i64| {
                        if nx_ < 0
                            || ny_ < 0
                            || nz_ < 0
                            || nx_ >= dims.nx as i64
                            || ny_ >= dims.ny as i64
                            || nz_ >= dims.nz as i64
                        {
                            return;
                        }
                        let ni =
                            nx_ as usize + dims.nx * (ny_ as usize + dims.ny * nz_ as usize);
                        let label = current.labels()[ni];
                        if space.is_dynamic(label)
                            && acquired.is_none_or(|(best, _)| ni < best)
                        {
                            acquired = Some((ni, label));
                        }
                    };
                    consider(x as i64 - 1, y as i64, z as i64);
                    consider(x as i64 + 1, y as i64, z as i64);
                    consider(x as i64, y as i64 - 1, z as i64);
                    consider(x as i64, y as i64 + 1, z as i64);
                    consider(x as i64, y as i64, z as i64 - 1);
                    consider(x as i64, y as i64, z as i64 + 1);
                    if let Some((_, label)) = acquired {
                        next.labels_mut()[i] = label;
                    }
                }
            }
        }
        current = next;
    }
    Ok(current)
}

/// Class-conditional Gaussian feature synthesizer. Class means are drawn once
/// from the dataset seed so train and eval scenes share the same feature
/// geometry; per-voxel noise is keyed by `(noise_seed, voxel index)`.
#[derive(Debug, Clone)]
pub struct FeatureModel {
    means: Array2<f64>,
    noise_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureSpec {
    pub dim: usize,
    /// Distance scale of class means from the origin.
    pub separation: f64,
    pub noise_sigma: f64,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec { dim: 16, separation: 3.0, noise_sigma: 1.0 }
    }
}

impl FeatureModel {
    pub fn new(space: &LabelSpace, spec: &FeatureSpec, seed: u64) -> Result<Self, SceneError> {
        if spec.dim == 0 {
            return Err(SceneError::InvalidSpec("feature dim must be at least 1".into()));
        }
        if spec.separation < 0.0 || spec.noise_sigma < 0.0 {
            return Err(SceneError::InvalidSpec(
                "separation and noise_sigma must be non-negative".into(),
            ));
        }
        let categories = space.num_categories();
        let mut rng = seeded_rng(stage_seed(seed, "features.means"));
        let mut means = Array2::zeros((categories, spec.dim));
        for c in 0..categories {
            let mut v = Array1::zeros(spec.dim);
            let mut norm = 0.0f64;
            for d in 0..spec.dim {
                let g: f64 = StandardNormal.sample(&mut rng);
                v[d] = g;
                norm += g * g;
            }
            let norm = norm.sqrt().max(1e-12);
            for d in 0..spec.dim {
                means[(c, d)] = v[d] / norm * spec.separation;
            }
        }
        Ok(FeatureModel { means, noise_sigma: spec.noise_sigma })
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    /// Features for one grid: `f_v = mean(label_v) + sigma * N(0, I)` with the
    /// noise stream keyed per voxel.
    pub fn features_for(&self, labels: &VoxelGrid, noise_seed: u64) -> Array2<f64> {
        let n = labels.labels().len();
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        for (v, &label) in labels.labels().iter().enumerate() {
            let mut rng = indexed_rng(noise_seed, v as u64);
            for j in 0..d {
                let g: f64 = StandardNormal.sample(&mut rng);
                out[(v, j)] = self.means[(label as usize, j)] + self.noise_sigma * g;
            }
        }
        out
    }
}
