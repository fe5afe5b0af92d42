//! Geometric and per-class IoU against refined ground truth, plus the
//! machine-readable report formats.
//!
//! Geometric IoU treats every occupied voxel as one class; per-class IoU is
//! `TP / (TP + FP + FN)`; mIoU averages per-class IoU over semantic classes,
//! with classes absent from both prediction and ground truth either excluded
//! from the mean (default) or counted as zero.

use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::voxel::{ClassId, LabelSpace, VoxelGrid, EMPTY};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("grids have different dims: {left} vs {right}")]
    DimsMismatch { left: crate::voxel::Dims, right: crate::voxel::Dims },
    #[error(transparent)]
    Voxel(#[from] crate::voxel::VoxelError),
    #[error("report parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OccupancyCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

/// Per-class and binary-occupancy confusion tallies for one or more grids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    per_class: Vec<ClassCounts>,
    pub occupancy: OccupancyCounts,
    pub total_voxels: u64,
}

impl ConfusionCounts {
    pub fn empty(num_semantic: ClassId) -> Self {
        ConfusionCounts {
            per_class: vec![ClassCounts::default(); num_semantic as usize],
            occupancy: OccupancyCounts::default(),
            total_voxels: 0,
        }
    }

    pub fn num_semantic(&self) -> usize {
        self.per_class.len()
    }

    /// Counts for semantic class `c` in `1..=C`.
    pub fn class(&self, c: ClassId) -> &ClassCounts {
        &self.per_class[c as usize - 1]
    }

    /// Integer merge; counting is additive over disjoint grid partitions.
    pub fn merge(&mut self, other: &ConfusionCounts) {
        assert_eq!(self.per_class.len(), other.per_class.len());
        for (a, b) in self.per_class.iter_mut().zip(&other.per_class) {
            a.true_pos += b.true_pos;
            a.false_pos += b.false_pos;
            a.false_neg += b.false_neg;
        }
        self.occupancy.true_pos += other.occupancy.true_pos;
        self.occupancy.false_pos += other.occupancy.false_pos;
        self.occupancy.false_neg += other.occupancy.false_neg;
        self.occupancy.true_neg += other.occupancy.true_neg;
        self.total_voxels += other.total_voxels;
    }
}

/// Tallies confusion counts between a prediction and its ground truth.
pub fn confusion_counts(
    pred: &VoxelGrid,
    gt: &VoxelGrid,
    space: &LabelSpace,
) -> Result<ConfusionCounts, MetricsError> {
    if pred.dims() != gt.dims() {
        return Err(MetricsError::DimsMismatch { left: pred.dims(), right: gt.dims() });
    }
    // Validates labels on both sides.
    crate::voxel::class_histogram(pred, space)?;
    crate::voxel::class_histogram(gt, space)?;

    let mut counts = ConfusionCounts::empty(space.num_semantic());
    counts.total_voxels = pred.labels().len() as u64;
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        if p != EMPTY || g != EMPTY {
            if p == g {
                counts.per_class[p as usize - 1].true_pos += 1;
            } else {
                if p != EMPTY {
                    counts.per_class[p as usize - 1].false_pos += 1;
                }
                if g != EMPTY {
                    counts.per_class[g as usize - 1].false_neg += 1;
                }
            }
        }
        match (p != EMPTY, g != EMPTY) {
            (true, true) => counts.occupancy.true_pos += 1,
            (true, false) => counts.occupancy.false_pos += 1,
            (false, true) => counts.occupancy.false_neg += 1,
            (false, false) => counts.occupancy.true_neg += 1,
        }
    }
    Ok(counts)
}

/// How a class absent from both prediction and ground truth enters the mIoU
/// mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsentClassConvention {
    Exclude,
    CountAsZero,
}

/// IoU results as percentages in [0, 100]. Undefined per-class entries are
/// reported as 0 with `per_class_defined` cleared.
#[derive(Debug, Clone, PartialEq)]
pub struct IouScores {
    pub geometric_iou: f64,
    pub miou: f64,
    pub per_class: Vec<f64>,
    pub per_class_defined: Vec<bool>,
}

/// Computes geometric IoU, per-class IoU, and mIoU from confusion counts.
pub fn iou_scores(counts: &ConfusionCounts, convention: AbsentClassConvention) -> IouScores {
    let occ = &counts.occupancy;
    let occ_denominator = occ.true_pos + occ.false_pos + occ.false_neg;
    let geometric_iou = if occ_denominator == 0 {
        // Both sides entirely empty: the prediction is exact.
        100.0
    } else {
        100.0 * occ.true_pos as f64 / occ_denominator as f64
    };

    let mut per_class = Vec::with_capacity(counts.num_semantic());
    let mut per_class_defined = Vec::with_capacity(counts.num_semantic());
    let mut sum = 0.0;
    let mut included = 0usize;
    for c in 0..counts.num_semantic() {
        let cc = &counts.per_class[c];
        let denominator = cc.true_pos + cc.false_pos + cc.false_neg;
        if denominator == 0 {
            per_class.push(0.0);
            per_class_defined.push(false);
            if convention == AbsentClassConvention::CountAsZero {
                included += 1;
            }
        } else {
            let iou = 100.0 * cc.true_pos as f64 / denominator as f64;
            per_class.push(iou);
            per_class_defined.push(true);
            sum += iou;
            included += 1;
        }
    }
    let miou = if included == 0 { 0.0 } else { sum / included as f64 };
    IouScores { geometric_iou, miou, per_class, per_class_defined }
}

/// One evaluated run in a report table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub run_id: String,
    pub noise_kind: String,
    pub noise_level: String,
    pub iou: f64,
    pub miou: f64,
    pub per_class: Vec<f64>,
}

impl ReportRow {
    pub fn from_scores(
        run_id: impl Into<String>,
        noise_kind: impl Into<String>,
        noise_level: impl Into<String>,
        scores: &IouScores,
    ) -> Self {
        ReportRow {
            run_id: run_id.into(),
            noise_kind: noise_kind.into(),
            noise_level: noise_level.into(),
            iou: scores.geometric_iou,
            miou: scores.miou,
            per_class: scores.per_class.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

fn csv_header(num_semantic: usize) -> String {
    let mut header = String::from("run_id,noise_kind,noise_level,iou,miou");
    for c in 1..=num_semantic {
        header.push_str(&format!(",iou_class_{c}"));
    }
    header
}

/// Writes report rows with a deterministic field order: IoU, mIoU, then
/// per-class IoUs in class-id order.
pub fn emit_report<W: Write>(
    rows: &[ReportRow],
    num_semantic: usize,
    format: ReportFormat,
    mut w: W,
) -> Result<(), MetricsError> {
    match format {
        ReportFormat::Csv => {
            writeln!(w, "{}", csv_header(num_semantic))?;
            for row in rows {
                write!(
                    w,
                    "{},{},{},{:.6},{:.6}",
                    row.run_id, row.noise_kind, row.noise_level, row.iou, row.miou
                )?;
                for c in 0..num_semantic {
                    let v = row.per_class.get(c).copied().unwrap_or(0.0);
                    write!(w, ",{v:.6}")?;
                }
                writeln!(w)?;
            }
        }
        ReportFormat::Json => {
            let mut objects = Vec::with_capacity(rows.len());
            for row in rows {
                let mut map = serde_json::Map::new();
                map.insert("run_id".into(), row.run_id.clone().into());
                map.insert("noise_kind".into(), row.noise_kind.clone().into());
                map.insert("noise_level".into(), row.noise_level.clone().into());
                map.insert("iou".into(), row.iou.into());
                map.insert("miou".into(), row.miou.into());
                for c in 0..num_semantic {
                    let v = row.per_class.get(c).copied().unwrap_or(0.0);
                    map.insert(format!("iou_class_{}", c + 1), v.into());
                }
                objects.push(serde_json::Value::Object(map));
            }
            serde_json::to_writer_pretty(&mut w, &objects)
                .map_err(io::Error::other)?;
            writeln!(w)?;
        }
    }
    Ok(())
}

pub fn emit_report_file<P: AsRef<Path>>(
    rows: &[ReportRow],
    num_semantic: usize,
    format: ReportFormat,
    path: P,
) -> Result<(), MetricsError> {
    let mut file = std::fs::File::create(path)?;
    emit_report(rows, num_semantic, format, &mut file)?;
    file.flush()?;
    Ok(())
}

/// Parses a CSV report back into rows; the inverse of the CSV emitter.
pub fn parse_report_csv<R: Read>(mut r: R) -> Result<Vec<ReportRow>, MetricsError> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    parse_report_csv_str(&text)
}

pub fn parse_report_csv_str(text: &str) -> Result<Vec<ReportRow>, MetricsError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or(MetricsError::Parse { line: 1, message: "missing header".into() })?;
    let columns: Vec<&str> = header.split(',').collect();
    if columns.len() < 5
        || columns[..5] != ["run_id", "noise_kind", "noise_level", "iou", "miou"]
    {
        return Err(MetricsError::Parse { line: 1, message: "unexpected header".into() });
    }
    for (c, column) in columns[5..].iter().enumerate() {
        if *column != format!("iou_class_{}", c + 1) {
            return Err(MetricsError::Parse {
                line: 1,
                message: format!("unexpected column `{column}`"),
            });
        }
    }
    let num_semantic = columns.len() - 5;
    let mut rows = Vec::new();
    for (index, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(MetricsError::Parse {
                line: index + 1,
                message: format!("expected {} fields, got {}", columns.len(), fields.len()),
            });
        }
        let number = |i: usize| -> Result<f64, MetricsError> {
            fields[i].parse::<f64>().map_err(|e| MetricsError::Parse {
                line: index + 1,
                message: format!("field {}: {e}", i + 1),
            })
        };
        let mut per_class = Vec::with_capacity(num_semantic);
        for c in 0..num_semantic {
            per_class.push(number(5 + c)?);
        }
        rows.push(ReportRow {
            run_id: fields[0].to_string(),
            noise_kind: fields[1].to_string(),
            noise_level: fields[2].to_string(),
            iou: number(3)?,
            miou: number(4)?,
            per_class,
        });
    }
    Ok(rows)
}

/// Byte-slice front end for fuzzing.
pub fn parse_report_csv_from_slice(bytes: &[u8]) -> Result<Vec<ReportRow>, MetricsError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| MetricsError::Parse { line: 0, message: e.to_string() })?;
    parse_report_csv_str(text)
}
