//! The student classifier and its EMA teacher.
//!
//! The student maps a per-voxel feature vector to logits over the C+1
//! categories, either linearly or through one tanh hidden layer. Gradients
//! are exact and hand-derived; there is no autograd underneath.

use ndarray::{Array1, Array2, Axis};
use rand_distr::{Distribution, StandardNormal};

use super::TrainError;
use crate::rng::seeded_rng;

/// Classifier shape. Both variants output `C + 1` logits per voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    Linear,
    Mlp { hidden: usize },
}

/// The trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams {
    Linear { w: Array2<f64>, b: Array1<f64> },
    Mlp { w1: Array2<f64>, b1: Array1<f64>, w2: Array2<f64>, b2: Array1<f64> },
}

impl ModelParams {
    /// Applies `f(target, source)` over every aligned parameter pair.
    fn zip_mut(&mut self, other: &ModelParams, f: impl Fn(&mut f64, f64)) -> Result<(), TrainError> {
        match (self, other) {
            (ModelParams::Linear { w, b }, ModelParams::Linear { w: sw, b: sb }) => {
                if w.dim() != sw.dim() || b.dim() != sb.dim() {
                    return Err(TrainError::ShapeMismatch("linear parameter dims".into()));
                }
                w.iter_mut().zip(sw.iter()).for_each(|(t, &s)| f(t, s));
                b.iter_mut().zip(sb.iter()).for_each(|(t, &s)| f(t, s));
                Ok(())
            }
            (
                ModelParams::Mlp { w1, b1, w2, b2 },
                ModelParams::Mlp { w1: sw1, b1: sb1, w2: sw2, b2: sb2 },
            ) => {
                if w1.dim() != sw1.dim()
                    || b1.dim() != sb1.dim()
                    || w2.dim() != sw2.dim()
                    || b2.dim() != sb2.dim()
                {
                    return Err(TrainError::ShapeMismatch("mlp parameter dims".into()));
                }
                w1.iter_mut().zip(sw1.iter()).for_each(|(t, &s)| f(t, s));
                b1.iter_mut().zip(sb1.iter()).for_each(|(t, &s)| f(t, s));
                w2.iter_mut().zip(sw2.iter()).for_each(|(t, &s)| f(t, s));
                b2.iter_mut().zip(sb2.iter()).for_each(|(t, &s)| f(t, s));
                Ok(())
            }
            _ => Err(TrainError::ShapeMismatch("architecture mismatch".into())),
        }
    }

    /// Flat view of every parameter in a fixed order.
    pub fn flatten(&self) -> Vec<f64> {
        match self {
            ModelParams::Linear { w, b } => w.iter().chain(b.iter()).copied().collect(),
            ModelParams::Mlp { w1, b1, w2, b2 } => w1
                .iter()
                .chain(b1.iter())
                .chain(w2.iter())
                .chain(b2.iter())
                .copied()
                .collect(),
        }
    }
}

/// Per-voxel classifier with explicit parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    arch: Architecture,
    feature_dim: usize,
    num_categories: usize,
    params: ModelParams,
}

/// Hidden activations cached by the forward pass, consumed by backward.
pub struct ForwardCache {
    hidden: Option<Array2<f64>>,
}

/// Parameter gradients with the same shape as the model.
pub struct ParamGrads {
    params: ModelParams,
}

impl StudentModel {
    /// Seeded Gaussian init with a small scale.
    pub fn new(arch: Architecture, feature_dim: usize, num_categories: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let mut gauss = |rows: usize, cols: usize, scale: f64| {
            Array2::from_shape_fn((rows, cols), |_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g * scale
            })
        };
        let params = match arch {
            Architecture::Linear => ModelParams::Linear {
                w: gauss(feature_dim, num_categories, 0.01),
                b: Array1::zeros(num_categories),
            },
            Architecture::Mlp { hidden } => {
                let s1 = (1.0 / feature_dim as f64).sqrt();
                let s2 = (1.0 / hidden as f64).sqrt();
                ModelParams::Mlp {
                    w1: gauss(feature_dim, hidden, s1),
                    b1: Array1::zeros(hidden),
                    w2: gauss(hidden, num_categories, s2),
                    b2: Array1::zeros(num_categories),
                }
            }
        };
        StudentModel { arch, feature_dim, num_categories, params }
    }

    pub fn from_params(
        arch: Architecture,
        feature_dim: usize,
        num_categories: usize,
        params: ModelParams,
    ) -> Result<Self, TrainError> {
        let ok = match (&arch, &params) {
            (Architecture::Linear, ModelParams::Linear { w, b }) => {
                w.dim() == (feature_dim, num_categories) && b.len() == num_categories
            }
            (Architecture::Mlp { hidden }, ModelParams::Mlp { w1, b1, w2, b2 }) => {
                w1.dim() == (feature_dim, *hidden)
                    && b1.len() == *hidden
                    && w2.dim() == (*hidden, num_categories)
                    && b2.len() == num_categories
            }
            _ => false,
        };
        if !ok {
            return Err(TrainError::ShapeMismatch("parameters do not fit the architecture".into()));
        }
        Ok(StudentModel { arch, feature_dim, num_categories, params })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    fn check_features(&self, features: &Array2<f64>) -> Result<(), TrainError> {
        if features.ncols() != self.feature_dim {
            return Err(TrainError::ShapeMismatch(format!(
                "features have dim {}, model expects {}",
                features.ncols(),
                self.feature_dim
            )));
        }
        Ok(())
    }

    /// Logits for each feature row.
    pub fn forward(&self, features: &Array2<f64>) -> Result<Array2<f64>, TrainError> {
        Ok(self.forward_cached(features)?.0)
    }

    /// Forward pass that also returns the state backward needs.
    pub fn forward_cached(
        &self,
        features: &Array2<f64>,
    ) -> Result<(Array2<f64>, ForwardCache), TrainError> {
        self.check_features(features)?;
        match &self.params {
            ModelParams::Linear { w, b } => {
                let logits = features.dot(w) + b;
                Ok((logits, ForwardCache { hidden: None }))
            }
            ModelParams::Mlp { w1, b1, w2, b2 } => {
                let mut hidden = features.dot(w1) + b1;
                hidden.mapv_inplace(f64::tanh);
                let logits = hidden.dot(w2) + b2;
                Ok((logits, ForwardCache { hidden: Some(hidden) }))
            }
        }
    }

    /// Exact parameter gradients given `dL/dlogits`.
    pub fn backward(
        &self,
        features: &Array2<f64>,
        cache: &ForwardCache,
        grad_logits: &Array2<f64>,
    ) -> Result<ParamGrads, TrainError> {
        self.check_features(features)?;
        let params = match &self.params {
            ModelParams::Linear { .. } => ModelParams::Linear {
                w: features.t().dot(grad_logits),
                b: grad_logits.sum_axis(Axis(0)),
            },
            ModelParams::Mlp { w2, .. } => {
                let hidden = cache
                    .hidden
                    .as_ref()
                    .ok_or_else(|| TrainError::ShapeMismatch("missing hidden cache".into()))?;
                let grad_hidden = grad_logits.dot(&w2.t());
                // tanh'(x) = 1 - tanh(x)^2, and `hidden` stores tanh(x).
                let grad_pre = &grad_hidden * &hidden.mapv(|h| 1.0 - h * h);
                ModelParams::Mlp {
                    w1: features.t().dot(&grad_pre),
                    b1: grad_pre.sum_axis(Axis(0)),
                    w2: hidden.t().dot(grad_logits),
                    b2: grad_logits.sum_axis(Axis(0)),
                }
            }
        };
        Ok(ParamGrads { params })
    }

    /// One plain gradient-descent step.
    pub fn apply_step(&mut self, grads: &ParamGrads, lr: f64) -> Result<(), TrainError> {
        self.params.zip_mut(&grads.params, |t, g| *t -= lr * g)
    }
}

/// The EMA shadow of the student, used as the stable teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState {
    pub model: StudentModel,
    pub momentum: f64,
}

impl TeacherState {
    /// Initializes the teacher as an exact copy of the student.
    pub fn from_student(student: &StudentModel, momentum: f64) -> Self {
        TeacherState { model: student.clone(), momentum }
    }
}

/// One EMA step: every teacher parameter becomes
/// `d * teacher + (1 - d) * student`.
pub fn ema_update(student: &StudentModel, teacher: &mut TeacherState) -> Result<(), TrainError> {
    let d = teacher.momentum;
    teacher.model.params.zip_mut(student.params(), |t, s| *t = d * *t + (1.0 - d) * s)
}
