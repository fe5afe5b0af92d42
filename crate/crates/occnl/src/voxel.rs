//! Label space, dense voxel grids, indexing, and class-distribution utilities.
//!
//! Every other module trades in these types. Grids are immutable values after
//! construction; labels are stored densely in row-major order with x fastest,
//! then y, then z. All file I/O and seeded random draws follow this order.

use std::collections::BTreeSet;

use thiserror::Error;

/// A voxel's class id. Id 0 is always the empty class.
pub type ClassId = u16;

/// The empty (unoccupied) class id.
pub const EMPTY: ClassId = 0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VoxelError {
    #[error("coordinate ({x}, {y}, {z}) out of bounds for {dims}")]
    OutOfBounds { x: usize, y: usize, z: usize, dims: Dims },
    #[error("label buffer holds {actual} entries, {dims} requires {expected}")]
    ShapeMismatch { dims: Dims, expected: usize, actual: usize },
    #[error("label {label} at voxel {index} exceeds the maximum class id {max}")]
    InvalidLabel { index: usize, label: ClassId, max: ClassId },
    #[error("label space is invalid: {0}")]
    InvalidSpace(String),
    #[error("grids have mismatched dims: {left} vs {right}")]
    DimsMismatch { left: Dims, right: Dims },
}

/// Grid extents in voxels along x, y, z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims { nx, ny, nz }
    }

    /// Total voxel count.
    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        x < self.nx && y < self.ny && z < self.nz
    }

    /// Flattens a coordinate to its linear index: `x + nx * (y + ny * z)`.
    pub fn linear_index(&self, x: usize, y: usize, z: usize) -> Result<usize, VoxelError> {
        if !self.contains(x, y, z) {
            return Err(VoxelError::OutOfBounds { x, y, z, dims: *self });
        }
        Ok(x + self.nx * (y + self.ny * z))
    }

    /// Inverse of [`Dims::linear_index`]. The index must be in range.
    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        debug_assert!(index < self.len());
        let x = index % self.nx;
        let y = (index / self.nx) % self.ny;
        let z = index / (self.nx * self.ny);
        (x, y, z)
    }

    /// Iterates all coordinates in memory order (x fastest).
    pub fn iter_coords(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let dims = *self;
        (0..dims.len()).map(move |i| dims.coords(i))
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

/// Flattens a coordinate to its linear index for the given dims.
pub fn linear_index(coord: (usize, usize, usize), dims: Dims) -> Result<usize, VoxelError> {
    dims.linear_index(coord.0, coord.1, coord.2)
}

/// The label vocabulary: `C` semantic classes plus the fixed empty class 0,
/// with a designated subset of dynamic (moving-object) classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    num_semantic: ClassId,
    dynamic_classes: BTreeSet<ClassId>,
    names: Vec<String>,
}

impl LabelSpace {
    /// Builds a label space with `num_semantic` semantic classes (ids `1..=C`)
    /// and the given dynamic subset. Names default to `empty`, `class_1`, ...
    pub fn new(
        num_semantic: ClassId,
        dynamic_classes: impl IntoIterator<Item = ClassId>,
    ) -> Result<Self, VoxelError> {
        let names = std::iter::once("empty".to_string())
            .chain((1..=num_semantic).map(|c| format!("class_{c}")))
            .collect();
        Self::with_names(num_semantic, dynamic_classes, names)
    }

    pub fn with_names(
        num_semantic: ClassId,
        dynamic_classes: impl IntoIterator<Item = ClassId>,
        names: Vec<String>,
    ) -> Result<Self, VoxelError> {
        if num_semantic == 0 {
            return Err(VoxelError::InvalidSpace(
                "at least one semantic class is required".into(),
            ));
        }
        let dynamic_classes: BTreeSet<ClassId> = dynamic_classes.into_iter().collect();
        if dynamic_classes.contains(&EMPTY) {
            return Err(VoxelError::InvalidSpace(
                "the empty class cannot be dynamic".into(),
            ));
        }
        if let Some(&c) = dynamic_classes.iter().find(|&&c| c > num_semantic) {
            return Err(VoxelError::InvalidSpace(format!(
                "dynamic class {c} exceeds the semantic range 1..={num_semantic}"
            )));
        }
        if names.len() != num_semantic as usize + 1 {
            return Err(VoxelError::InvalidSpace(format!(
                "expected {} names, got {}",
                num_semantic as usize + 1,
                names.len()
            )));
        }
        Ok(LabelSpace { num_semantic, dynamic_classes, names })
    }

    /// The 19-class outdoor driving vocabulary with its usual moving classes.
    pub fn outdoor19() -> Self {
        let names = [
            "empty",
            "road",
            "sidewalk",
            "parking",
            "other-ground",
            "building",
            "car",
            "truck",
            "bicycle",
            "motorcycle",
            "other-vehicle",
            "vegetation",
            "trunk",
            "terrain",
            "person",
            "bicyclist",
            "motorcyclist",
            "fence",
            "pole",
            "traffic-sign",
        ];
        Self::with_names(
            19,
            [6, 7, 8, 9, 10, 14, 15, 16],
            names.iter().map(|s| s.to_string()).collect(),
        )
        .expect("builtin space is valid")
    }

    /// Number of semantic classes `C` (excluding empty).
    pub fn num_semantic(&self) -> ClassId {
        self.num_semantic
    }

    /// Total category count `C + 1`.
    pub fn num_categories(&self) -> usize {
        self.num_semantic as usize + 1
    }

    pub fn is_valid_label(&self, c: ClassId) -> bool {
        c <= self.num_semantic
    }

    pub fn is_dynamic(&self, c: ClassId) -> bool {
        self.dynamic_classes.contains(&c)
    }

    pub fn dynamic_classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.dynamic_classes.iter().copied()
    }

    pub fn name(&self, c: ClassId) -> &str {
        &self.names[c as usize]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Dense 3D grid of class labels. `resolution_m` is carried as metadata only;
/// no operation depends on metric scale.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    dims: Dims,
    labels: Vec<ClassId>,
    resolution_m: f64,
}

pub const DEFAULT_RESOLUTION_M: f64 = 0.2;

impl VoxelGrid {
    /// A grid filled with one label.
    pub fn filled(dims: Dims, label: ClassId) -> Self {
        VoxelGrid { dims, labels: vec![label; dims.len()], resolution_m: DEFAULT_RESOLUTION_M }
    }

    /// Wraps a label buffer laid out in memory order. Fails on a length
    /// mismatch; label-range validity is checked by [`validate_grid`].
    pub fn from_labels(dims: Dims, labels: Vec<ClassId>) -> Result<Self, VoxelError> {
        if labels.len() != dims.len() {
            return Err(VoxelError::ShapeMismatch {
                dims,
                expected: dims.len(),
                actual: labels.len(),
            });
        }
        Ok(VoxelGrid { dims, labels, resolution_m: DEFAULT_RESOLUTION_M })
    }

    pub fn with_resolution(mut self, resolution_m: f64) -> Self {
        self.resolution_m = resolution_m;
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn resolution_m(&self) -> f64 {
        self.resolution_m
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> ClassId {
        self.labels[index]
    }

    pub fn label_at(&self, x: usize, y: usize, z: usize) -> Result<ClassId, VoxelError> {
        Ok(self.labels[self.dims.linear_index(x, y, z)?])
    }

    pub(crate) fn labels_mut(&mut self) -> &mut [ClassId] {
        &mut self.labels
    }

    /// Count of non-empty voxels.
    pub fn occupied_count(&self) -> usize {
        self.labels.iter().filter(|&&c| c != EMPTY).count()
    }
}

/// Boolean voxel set with the same memory layout as a grid. Used for dynamic
/// instance masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoxelMask {
    dims: Dims,
    inside: Vec<bool>,
}

impl VoxelMask {
    pub fn empty(dims: Dims) -> Self {
        VoxelMask { dims, inside: vec![false; dims.len()] }
    }

    pub fn from_bits(dims: Dims, inside: Vec<bool>) -> Result<Self, VoxelError> {
        if inside.len() != dims.len() {
            return Err(VoxelError::ShapeMismatch {
                dims,
                expected: dims.len(),
                actual: inside.len(),
            });
        }
        Ok(VoxelMask { dims, inside })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn contains(&self, index: usize) -> bool {
        self.inside[index]
    }

    pub fn bits(&self) -> &[bool] {
        &self.inside
    }

    pub(crate) fn set(&mut self, index: usize) {
        self.inside[index] = true;
    }

    pub fn count(&self) -> usize {
        self.inside.iter().filter(|&&b| b).count()
    }

    /// Indices of set voxels in memory order.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.inside.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }
}

/// Per-class voxel counts over a grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassHistogram {
    counts: Vec<u64>,
    total: u64,
}

impl ClassHistogram {
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn count(&self, c: ClassId) -> u64 {
        self.counts[c as usize]
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Entropy of the semantic (non-empty) class distribution, normalized by
    /// `ln C` so a uniform distribution scores exactly 1. An all-empty grid
    /// scores 0.
    pub fn normalized_semantic_entropy(&self) -> f64 {
        let semantic = &self.counts[1..];
        let total: u64 = semantic.iter().sum();
        if total == 0 || semantic.len() < 2 {
            return 0.0;
        }
        let total = total as f64;
        let mut entropy = 0.0;
        for &n in semantic {
            if n > 0 {
                let q = n as f64 / total;
                entropy -= q * q.ln();
            }
        }
        entropy / (semantic.len() as f64).ln()
    }
}

/// Tallies per-class voxel counts. Fails on any label outside the space.
pub fn class_histogram(grid: &VoxelGrid, space: &LabelSpace) -> Result<ClassHistogram, VoxelError> {
    let mut counts = vec![0u64; space.num_categories()];
    for (index, &label) in grid.labels().iter().enumerate() {
        if !space.is_valid_label(label) {
            return Err(VoxelError::InvalidLabel { index, label, max: space.num_semantic() });
        }
        counts[label as usize] += 1;
    }
    Ok(ClassHistogram { counts, total: grid.labels().len() as u64 })
}

/// Outcome of [`validate_grid`]: either well-formed or the first violation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GridValidation {
    Ok,
    ShapeViolation { expected: usize, actual: usize },
    LabelViolation { index: usize, label: ClassId, max: ClassId },
}

impl GridValidation {
    pub fn is_ok(&self) -> bool {
        matches!(self, GridValidation::Ok)
    }
}

/// Checks a grid against a label space, reporting the first offending voxel.
pub fn validate_grid(grid: &VoxelGrid, space: &LabelSpace) -> GridValidation {
    let expected = grid.dims().len();
    if grid.labels().len() != expected {
        return GridValidation::ShapeViolation { expected, actual: grid.labels().len() };
    }
    for (index, &label) in grid.labels().iter().enumerate() {
        if !space.is_valid_label(label) {
            return GridValidation::LabelViolation { index, label, max: space.num_semantic() };
        }
    }
    GridValidation::Ok
}
