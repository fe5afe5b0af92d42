//! Robust objectives over student logits: partial-label learning, negative
//! learning on the complement set, self-not-true distillation against the
//! teacher, and the staged joint objective.
//!
//! Every loss returns the scalar value together with the exact analytic
//! gradient with respect to the student logits, computed in double precision
//! through log-sum-exp so no literal `log(softmax)` is ever taken. Per-voxel
//! terms are reduced in fixed chunk order, so values are bit-stable across
//! thread counts.

use ndarray::Array2;
use rayon::prelude::*;
use thiserror::Error;

use crate::candidate::CandidateSet;
use crate::voxel::{ClassId, VoxelGrid};

/// Voxels per reduction chunk. Chunk boundaries, not thread count, define
/// the summation order.
const CHUNK: usize = 1024;

/// Probabilities above `1 - NL_CLAMP` saturate the negative-learning log
/// term; the term is clamped at `ln(NL_CLAMP)` and counted.
pub const NL_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("non-finite logit at voxel {voxel}, class {class}")]
    NonFinite { voxel: usize, class: usize },
    #[error("expected a {expected:?} logit field")]
    RoleMismatch { expected: LogitRole },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {label} at voxel {voxel} outside the {categories}-category space")]
    LabelOutOfRange { voxel: usize, label: ClassId, categories: usize },
    #[error("voxel {voxel} has an empty candidate set")]
    EmptyCandidates { voxel: usize },
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitRole {
    Student,
    Teacher,
}

/// Per-voxel logit vectors plus the role they play in distillation.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitField {
    logits: Array2<f64>,
    role: LogitRole,
}

impl LogitField {
    pub fn new(logits: Array2<f64>, role: LogitRole) -> Result<Self, LossError> {
        for ((v, c), &z) in logits.indexed_iter() {
            if !z.is_finite() {
                return Err(LossError::NonFinite { voxel: v, class: c });
            }
        }
        Ok(LogitField { logits, role })
    }

    pub fn student(logits: Array2<f64>) -> Result<Self, LossError> {
        Self::new(logits, LogitRole::Student)
    }

    pub fn teacher(logits: Array2<f64>) -> Result<Self, LossError> {
        Self::new(logits, LogitRole::Teacher)
    }

    pub fn role(&self) -> LogitRole {
        self.role
    }

    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    pub fn num_voxels(&self) -> usize {
        self.logits.nrows()
    }

    pub fn num_categories(&self) -> usize {
        self.logits.ncols()
    }
}

/// Scalar loss plus the gradient with respect to every student logit.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEvaluation {
    pub value: f64,
    pub grad: Array2<f64>,
    /// Number of clamped negative-learning terms (0 for other losses).
    pub saturation_count: u64,
}

impl LossEvaluation {
    /// A zero contribution with the given gradient shape.
    pub fn zero(num_voxels: usize, num_categories: usize) -> Self {
        LossEvaluation {
            value: 0.0,
            grad: Array2::zeros((num_voxels, num_categories)),
            saturation_count: 0,
        }
    }
}

/// How the per-voxel distillation terms combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Mean,
    Sum,
}

/// Self-not-true distillation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SNTDConfig {
    pub tau_s: f64,
    pub reduction: Reduction,
}

impl Default for SNTDConfig {
    fn default() -> Self {
        SNTDConfig { tau_s: 3.0, reduction: Reduction::Mean }
    }
}

impl SNTDConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !self.tau_s.is_finite() || self.tau_s <= 0.0 {
            return Err(LossError::InvalidTemperature(self.tau_s));
        }
        Ok(())
    }
}

fn require_role(field: &LogitField, expected: LogitRole) -> Result<(), LossError> {
    if field.role() != expected {
        return Err(LossError::RoleMismatch { expected });
    }
    Ok(())
}

fn require_labels(labels: &VoxelGrid, field: &LogitField) -> Result<(), LossError> {
    if labels.labels().len() != field.num_voxels() {
        return Err(LossError::ShapeMismatch(format!(
            "{} labels for {} logit rows",
            labels.labels().len(),
            field.num_voxels()
        )));
    }
    let categories = field.num_categories();
    for (voxel, &label) in labels.labels().iter().enumerate() {
        if label as usize >= categories {
            return Err(LossError::LabelOutOfRange { voxel, label, categories });
        }
    }
    Ok(())
}

/// `out[c] = log softmax(z)[c]` via log-sum-exp.
fn log_softmax_row(z: &[f64], out: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &v in z {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(z) {
        *o = v - lse;
    }
}

/// Softmax restricted to `j != masked`, with temperature. `out[masked] = 0`.
fn masked_softmax_row(z: &[f64], masked: usize, tau: f64, out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (c, &v) in z.iter().enumerate() {
        if c != masked {
            max = max.max(v / tau);
        }
    }
    let mut sum = 0.0;
    for (c, &v) in z.iter().enumerate() {
        if c != masked {
            let e = (v / tau - max).exp();
            out[c] = e;
            sum += e;
        } else {
            out[c] = 0.0;
        }
    }
    for (c, o) in out.iter_mut().enumerate() {
        if c != masked {
            *o /= sum;
        }
    }
}

/// Runs `f` once per voxel, writing that voxel's gradient row, and reduces
/// the returned `(value, saturation)` pairs in fixed chunk order.
fn evaluate_per_voxel<F>(
    num_voxels: usize,
    num_categories: usize,
    f: F,
) -> (f64, Array2<f64>, u64)
where
    F: Fn(usize, &mut [f64]) -> (f64, u64) + Sync,
{
    let mut grad_flat = vec![0.0f64; num_voxels * num_categories];
    let partials: Vec<(f64, u64)> = grad_flat
        .par_chunks_mut(CHUNK * num_categories)
        .enumerate()
        .map(|(chunk_index, rows)| {
            let base = chunk_index * CHUNK;
            let mut value = 0.0;
            let mut saturated = 0u64;
            for (offset, row) in rows.chunks_mut(num_categories).enumerate() {
                let (v, s) = f(base + offset, row);
                value += v;
                saturated += s;
            }
            (value, saturated)
        })
        .collect();
    let mut value = 0.0;
    let mut saturated = 0;
    for (v, s) in partials {
        value += v;
        saturated += s;
    }
    let grad = Array2::from_shape_vec((num_voxels, num_categories), grad_flat)
        .expect("chunk arithmetic preserves the length");
    (value, grad, saturated)
}

/// Partial-label loss: the mean over voxels of the average negative
/// log-probability across the candidate set.
pub fn pll_loss(student: &LogitField, cands: &CandidateSet) -> Result<LossEvaluation, LossError> {
    require_role(student, LogitRole::Student)?;
    let n = student.num_voxels();
    let categories = student.num_categories();
    if cands.num_voxels() != n || cands.num_categories() != categories {
        return Err(LossError::ShapeMismatch(format!(
            "candidate set is {}x{}, logits are {}x{}",
            cands.num_voxels(),
            cands.num_categories(),
            n,
            categories
        )));
    }
    for v in 0..n {
        if cands.candidate_count(v) == 0 {
            return Err(LossError::EmptyCandidates { voxel: v });
        }
    }
    let logits = student.logits();
    let scale = 1.0 / n as f64;
    let (value, grad, _) = evaluate_per_voxel(n, categories, |v, grad_row| {
        let z = logits.row(v);
        let z = z.as_slice().expect("row-major layout");
        let mut logp = vec![0.0; categories];
        log_softmax_row(z, &mut logp);
        let count = cands.candidate_count(v) as f64;
        let mut value = 0.0;
        for c in cands.candidates(v) {
            value -= logp[c as usize] / count;
        }
        // d/dz_k = p_k - 1[k in PL]/|PL|, scaled by 1/N.
        for (k, g) in grad_row.iter_mut().enumerate() {
            let indicator =
                if cands.contains(v, k as ClassId) { 1.0 / count } else { 0.0 };
            *g = scale * (logp[k].exp() - indicator);
        }
        (value, 0)
    });
    Ok(LossEvaluation { value: value * scale, grad, saturation_count: 0 })
}

/// Negative-learning loss: the mean over voxels of the average
/// `-log(1 - p)` across the complement set. Voxels with an empty complement
/// contribute zero; near-1 probabilities are clamped and counted.
pub fn nl_loss(student: &LogitField, cands: &CandidateSet) -> Result<LossEvaluation, LossError> {
    require_role(student, LogitRole::Student)?;
    let n = student.num_voxels();
    let categories = student.num_categories();
    if cands.num_voxels() != n || cands.num_categories() != categories {
        return Err(LossError::ShapeMismatch(format!(
            "candidate set is {}x{}, logits are {}x{}",
            cands.num_voxels(),
            cands.num_categories(),
            n,
            categories
        )));
    }
    let logits = student.logits();
    let scale = 1.0 / n as f64;
    let (value, grad, saturation_count) = evaluate_per_voxel(n, categories, |v, grad_row| {
        let complement_count = cands.complement_count(v);
        if complement_count == 0 {
            return (0.0, 0);
        }
        let z = logits.row(v);
        let z = z.as_slice().expect("row-major layout");
        let mut logp = vec![0.0; categories];
        log_softmax_row(z, &mut logp);
        let p: Vec<f64> = logp.iter().map(|&lp| lp.exp()).collect();
        let count = complement_count as f64;
        let mut value = 0.0;
        let mut saturated = 0u64;
        // w_c = p_c / (1 - p_c); the per-voxel gradient is
        // (w_k 1[k in NL] - p_k * sum_{c in NL} w_c) / (N |NL|).
        let mut weight_sum = 0.0;
        let mut weights = vec![0.0; categories];
        for c in cands.complement(v) {
            let c = c as usize;
            let rest = 1.0 - p[c];
            if rest < NL_CLAMP {
                value -= NL_CLAMP.ln() / count;
                weights[c] = p[c] / NL_CLAMP;
                saturated += 1;
            } else {
                value -= (-p[c]).ln_1p() / count;
                weights[c] = p[c] / rest;
            }
            weight_sum += weights[c];
        }
        let voxel_scale = scale / count;
        for (k, g) in grad_row.iter_mut().enumerate() {
            let own = if cands.contains(v, k as ClassId) { 0.0 } else { weights[k] };
            *g = voxel_scale * (own - p[k] * weight_sum);
        }
        (value, saturated)
    });
    Ok(LossEvaluation { value: value * scale, grad, saturation_count })
}

/// The not-true distribution: softmax over the logits with the observed
/// label's class masked out, at temperature `tau_s`. The masked class carries
/// exactly zero mass.
pub fn not_true_distribution(
    logits: &LogitField,
    noisy_labels: &VoxelGrid,
    cfg: &SNTDConfig,
) -> Result<Array2<f64>, LossError> {
    cfg.validate()?;
    require_labels(noisy_labels, logits)?;
    if logits.num_categories() < 2 {
        return Err(LossError::ShapeMismatch(
            "masking needs at least two categories".into(),
        ));
    }
    let n = logits.num_voxels();
    let categories = logits.num_categories();
    let z = logits.logits();
    let mut out = Array2::zeros((n, categories));
    for v in 0..n {
        let row = z.row(v);
        let row = row.as_slice().expect("row-major layout");
        let masked = noisy_labels.labels()[v] as usize;
        let mut dist = vec![0.0; categories];
        masked_softmax_row(row, masked, cfg.tau_s, &mut dist);
        for (c, &p) in dist.iter().enumerate() {
            out[(v, c)] = p;
        }
    }
    Ok(out)
}

/// Self-not-true distillation: temperature-scaled KL from the teacher's
/// not-true distribution to the student's, reduced over voxels. The teacher
/// is a constant; the gradient flows only through the student logits.
pub fn sntd_loss(
    student: &LogitField,
    teacher: &LogitField,
    noisy_labels: &VoxelGrid,
    cfg: &SNTDConfig,
) -> Result<LossEvaluation, LossError> {
    cfg.validate()?;
    require_role(student, LogitRole::Student)?;
    require_role(teacher, LogitRole::Teacher)?;
    if student.logits().dim() != teacher.logits().dim() {
        return Err(LossError::ShapeMismatch(format!(
            "student logits are {:?}, teacher logits are {:?}",
            student.logits().dim(),
            teacher.logits().dim()
        )));
    }
    require_labels(noisy_labels, student)?;
    if student.num_categories() < 2 {
        return Err(LossError::ShapeMismatch(
            "masking needs at least two categories".into(),
        ));
    }
    let n = student.num_voxels();
    let categories = student.num_categories();
    let tau = cfg.tau_s;
    let reduction_scale = match cfg.reduction {
        Reduction::Mean => 1.0 / n as f64,
        Reduction::Sum => 1.0,
    };
    let student_logits = student.logits();
    let teacher_logits = teacher.logits();
    let labels = noisy_labels.labels();
    let (value, grad, _) = evaluate_per_voxel(n, categories, |v, grad_row| {
        let masked = labels[v] as usize;
        let zs = student_logits.row(v);
        let zs = zs.as_slice().expect("row-major layout");
        let zt = teacher_logits.row(v);
        let zt = zt.as_slice().expect("row-major layout");
        let mut ps = vec![0.0; categories];
        let mut pt = vec![0.0; categories];
        masked_softmax_row(zs, masked, tau, &mut ps);
        masked_softmax_row(zt, masked, tau, &mut pt);
        let mut kl = 0.0;
        for c in 0..categories {
            if c != masked && pt[c] > 0.0 {
                kl += pt[c] * (pt[c].ln() - ps[c].ln());
            }
        }
        // d/dz_k [tau^2 KL] = tau * (ps_k - pt_k) for k != masked.
        let g_scale = reduction_scale * tau;
        for (k, g) in grad_row.iter_mut().enumerate() {
            *g = if k == masked { 0.0 } else { g_scale * (ps[k] - pt[k]) };
        }
        (kl, 0)
    });
    Ok(LossEvaluation {
        value: tau * tau * reduction_scale * value,
        grad,
        saturation_count: 0,
    })
}

/// Plain per-voxel cross-entropy against the given (typically noisy) labels;
/// the base objective of the warm-up stage.
pub fn cross_entropy_loss(
    student: &LogitField,
    targets: &VoxelGrid,
) -> Result<LossEvaluation, LossError> {
    require_role(student, LogitRole::Student)?;
    require_labels(targets, student)?;
    let n = student.num_voxels();
    let categories = student.num_categories();
    let logits = student.logits();
    let labels = targets.labels();
    let scale = 1.0 / n as f64;
    let (value, grad, _) = evaluate_per_voxel(n, categories, |v, grad_row| {
        let z = logits.row(v);
        let z = z.as_slice().expect("row-major layout");
        let mut logp = vec![0.0; categories];
        log_softmax_row(z, &mut logp);
        let target = labels[v] as usize;
        for (k, g) in grad_row.iter_mut().enumerate() {
            let indicator = if k == target { 1.0 } else { 0.0 };
            *g = scale * (logp[k].exp() - indicator);
        }
        (-logp[target], 0)
    });
    Ok(LossEvaluation { value: value * scale, grad, saturation_count: 0 })
}

/// Staged joint objective: the base loss always, plus the robust terms once
/// the epoch is past the warm-up boundary.
pub fn total_loss(
    base: &LossEvaluation,
    pll: &LossEvaluation,
    nl: &LossEvaluation,
    sntd: &LossEvaluation,
    epoch: usize,
    warmup_epochs: usize,
) -> LossEvaluation {
    if epoch <= warmup_epochs {
        return base.clone();
    }
    let value = base.value + pll.value + nl.value + sntd.value;
    let grad = &base.grad + &pll.grad + &nl.grad + &sntd.grad;
    let saturation_count = base.saturation_count
        + pll.saturation_count
        + nl.saturation_count
        + sntd.saturation_count;
    LossEvaluation { value, grad, saturation_count }
}

/// A pluggable voxel-wise training objective. Third-party robust losses can
/// implement this to slot into the training loop in place of the built-ins.
pub trait VoxelLoss {
    fn name(&self) -> &str;
    fn evaluate(
        &self,
        student: &LogitField,
        ctx: &LossContext<'_>,
    ) -> Result<LossEvaluation, LossError>;
}

/// Everything an objective may consult besides the student logits.
pub struct LossContext<'a> {
    pub noisy_labels: &'a VoxelGrid,
    pub candidates: Option<&'a CandidateSet>,
    pub teacher: Option<&'a LogitField>,
}

/// The built-in base objective as a [`VoxelLoss`].
pub struct CrossEntropy;

impl VoxelLoss for CrossEntropy {
    fn name(&self) -> &str {
        "cross_entropy"
    }

    fn evaluate(
        &self,
        student: &LogitField,
        ctx: &LossContext<'_>,
    ) -> Result<LossEvaluation, LossError> {
        cross_entropy_loss(student, ctx.noisy_labels)
    }
}
