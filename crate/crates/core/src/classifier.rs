//! Cosine (normalized) and plain linear classification heads with
//! softmax cross-entropy and hand-derived backward passes.

use serde::{Deserialize, Serialize};

use crate::embedding::{check_len, dot, norm, normalize, Embedding, Matrix, EPS_NORM};
use crate::error::{Result, TdgError};
use crate::rng::RngStream;

/// Default multiplier applied to cosine logits before the softmax.
pub const DEFAULT_LOGIT_SCALE: f64 = 10.0;

/// Logits and their softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl Prediction {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let probabilities = softmax(&logits);
        Self {
            logits,
            probabilities,
        }
    }

    /// Index of the largest logit; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.logits.iter().enumerate() {
            if v > self.logits[best] {
                best = i;
            }
        }
        best
    }

    /// `ln p[class]`, computed from the logits so it stays finite when the
    /// probability underflows.
    pub fn log_probability(&self, class: usize) -> f64 {
        self.logits[class] - log_sum_exp(&self.logits)
    }

    pub fn num_classes(&self) -> usize {
        self.logits.len()
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Heads and input are both unit-normalized; logits are scaled cosines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedClassifier {
    /// One head per row.
    pub heads: Matrix,
    pub logit_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub heads: Matrix,
    pub biases: Vec<f64>,
}

/// Per-sample cross-entropy gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierGrads {
    pub loss: f64,
    /// `∂L/∂logits = p − onehot(label)`
    pub logits: Vec<f64>,
    pub heads: Matrix,
    /// Present for the linear variant only.
    pub biases: Option<Vec<f64>>,
    pub feature: Embedding,
}

fn check_label(label: usize, n: usize) -> Result<()> {
    if label < n {
        Ok(())
    } else {
        Err(TdgError::Index { index: label, len: n })
    }
}

fn logit_grad(pred: &Prediction, label: usize) -> Vec<f64> {
    let mut delta = pred.probabilities.clone();
    delta[label] -= 1.0;
    delta
}

impl NormalizedClassifier {
    pub fn new(heads: Matrix, logit_scale: f64) -> Result<Self> {
        if !(logit_scale > 0.0 && logit_scale.is_finite()) {
            return Err(TdgError::Config(format!(
                "logit scale must be positive, got {logit_scale}"
            )));
        }
        for i in 0..heads.rows() {
            if !(norm(heads.row(i)) > EPS_NORM) {
                return Err(TdgError::DegenerateInput(format!("classifier head {i} is zero")));
            }
        }
        Ok(Self { heads, logit_scale })
    }

    /// Heads i.i.d. Gaussian(0, 1/d).
    pub fn random(
        num_classes: usize,
        embed_dim: usize,
        logit_scale: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let heads = Matrix::gaussian(num_classes, embed_dim, (1.0 / embed_dim as f64).sqrt(), rng);
        Self::new(heads, logit_scale)
    }

    pub fn num_classes(&self) -> usize {
        self.heads.rows()
    }

    /// Cosine between each normalized head and the normalized feature.
    pub fn cosine_logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_len(self.heads.cols(), z.len())?;
        let zh = normalize(z)?;
        (0..self.num_classes())
            .map(|i| Ok(dot(&normalize(self.heads.row(i))?, &zh)))
            .collect()
    }

    pub fn predict(&self, z: &[f64]) -> Result<Prediction> {
        let logits = self
            .cosine_logits(z)?
            .into_iter()
            .map(|c| self.logit_scale * c)
            .collect();
        Ok(Prediction::from_logits(logits))
    }

    pub fn backward(&self, z: &[f64], label: usize) -> Result<ClassifierGrads> {
        check_label(label, self.num_classes())?;
        let pred = self.predict(z)?;
        let delta = logit_grad(&pred, label);
        let s = self.logit_scale;
        let z_norm = norm(z);
        let zh = normalize(z)?;
        let d = z.len();
        let mut heads = Matrix::zeros(self.num_classes(), d);
        let mut feature = vec![0.0; d];
        for (i, &di) in delta.iter().enumerate() {
            let g = self.heads.row(i);
            let g_norm = norm(g);
            let gh = normalize(g)?;
            let c = dot(&gh, &zh);
            for k in 0..d {
                heads.set(i, k, s * di * (zh[k] - c * gh[k]) / g_norm);
                feature[k] += s * di * (gh[k] - c * zh[k]) / z_norm;
            }
        }
        Ok(ClassifierGrads {
            loss: -pred.log_probability(label),
            logits: delta,
            heads,
            biases: None,
            feature: Embedding::from_raw(feature),
        })
    }
}

impl LinearClassifier {
    pub fn new(heads: Matrix, biases: Vec<f64>) -> Result<Self> {
        check_len(heads.rows(), biases.len())?;
        if !heads.data().iter().chain(&biases).all(|v| v.is_finite()) {
            return Err(TdgError::Numeric("linear classifier parameters must be finite".into()));
        }
        Ok(Self { heads, biases })
    }

    /// Heads i.i.d. Gaussian(0, 1/d), zero biases.
    pub fn random(num_classes: usize, embed_dim: usize, rng: &mut RngStream) -> Result<Self> {
        let heads = Matrix::gaussian(num_classes, embed_dim, (1.0 / embed_dim as f64).sqrt(), rng);
        Self::new(heads, vec![0.0; num_classes])
    }

    pub fn num_classes(&self) -> usize {
        self.heads.rows()
    }

    pub fn predict(&self, z: &[f64]) -> Result<Prediction> {
        let mut logits = self.heads.matvec(z)?;
        for (l, b) in logits.iter_mut().zip(&self.biases) {
            *l += b;
        }
        Ok(Prediction::from_logits(logits))
    }

    pub fn backward(&self, z: &[f64], label: usize) -> Result<ClassifierGrads> {
        check_label(label, self.num_classes())?;
        let pred = self.predict(z)?;
        let delta = logit_grad(&pred, label);
        let heads = Matrix::outer(&delta, z);
        let feature = self.heads.matvec_transpose(&delta)?;
        Ok(ClassifierGrads {
            loss: -pred.log_probability(label),
            biases: Some(delta.clone()),
            logits: delta,
            heads,
            feature: Embedding::from_raw(feature),
        })
    }
}

/// Either head type, as used by the training arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Classifier {
    Normalized(NormalizedClassifier),
    Linear(LinearClassifier),
}

impl Classifier {
    pub fn predict(&self, z: &[f64]) -> Result<Prediction> {
        match self {
            Classifier::Normalized(c) => c.predict(z),
            Classifier::Linear(c) => c.predict(z),
        }
    }

    pub fn backward(&self, z: &[f64], label: usize) -> Result<ClassifierGrads> {
        match self {
            Classifier::Normalized(c) => c.backward(z, label),
            Classifier::Linear(c) => c.backward(z, label),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Classifier::Normalized(c) => c.num_classes(),
            Classifier::Linear(c) => c.num_classes(),
        }
    }

    pub fn heads(&self) -> &Matrix {
        match self {
            Classifier::Normalized(c) => &c.heads,
            Classifier::Linear(c) => &c.heads,
        }
    }

    pub fn heads_mut(&mut self) -> &mut Matrix {
        match self {
            Classifier::Normalized(c) => &mut c.heads,
            Classifier::Linear(c) => &mut c.heads,
        }
    }

    pub fn biases_mut(&mut self) -> Option<&mut Vec<f64>> {
        match self {
            Classifier::Normalized(_) => None,
            Classifier::Linear(c) => Some(&mut c.biases),
        }
    }

    pub fn biases(&self) -> Option<&[f64]> {
        match self {
            Classifier::Normalized(_) => None,
            Classifier::Linear(c) => Some(&c.biases),
        }
    }
}

/// Mean negative log-likelihood of the true labels.
pub fn cross_entropy_image(preds: &[Prediction], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() {
        return Err(TdgError::DegenerateInput("no predictions".into()));
    }
    check_len(preds.len(), labels.len())?;
    let mut total = 0.0;
    for (p, &y) in preds.iter().zip(labels) {
        check_label(y, p.num_classes())?;
        total -= p.log_probability(y);
    }
    Ok(total / preds.len() as f64)
}

/// Text cross-entropy over a grid of predictions; row `i` holds the
/// predictions for texts built from category `i`, whose label is `i`.
pub fn cross_entropy_text(grid_preds: &[Vec<Prediction>]) -> Result<f64> {
    if grid_preds.is_empty() || grid_preds.iter().any(|row| row.is_empty()) {
        return Err(TdgError::DegenerateInput("incomplete text prediction grid".into()));
    }
    let n_words = grid_preds[0].len();
    let mut total = 0.0;
    for (i, row) in grid_preds.iter().enumerate() {
        check_len(n_words, row.len())?;
        for p in row {
            check_label(i, p.num_classes())?;
            total -= p.log_probability(i);
        }
    }
    Ok(total / (grid_preds.len() * n_words) as f64)
}

/// `L_ce = L_img + L_txt`.
pub fn cross_entropy_total(
    image_preds: &[Prediction],
    labels: &[usize],
    grid_preds: &[Vec<Prediction>],
) -> Result<f64> {
    Ok(cross_entropy_image(image_preds, labels)? + cross_entropy_text(grid_preds)?)
}
