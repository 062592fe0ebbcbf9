//! The classification probe and its temporal aggregation.
//!
//! The forward pass for one clip is
//!
//! ```text
//! tensor (layers x T x m)
//!   -> layer_combine      last layer, or softmax(alpha)-weighted sum of layers
//!   -> step_predictions   per-step sigmoid (multilabel) or softmax (multiclass)
//!   -> aggregate          mean over steps, or per-class softmax-over-time attention
//!   -> y_hat in [0,1]^L
//! ```
//!
//! All arithmetic is `f64`; embeddings are widened from `f32` on entry.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{EmbeddingTensor, Task};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProbeError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid probe configuration: {0}")]
    Config(String),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Attention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerMode {
    Last,
    Weighted,
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Aggregation::Mean => "mean",
            Aggregation::Attention => "attention",
        })
    }
}

impl std::fmt::Display for LayerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LayerMode::Last => "last",
            LayerMode::Weighted => "weighted",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub task: Task,
    pub n_classes: usize,
    pub dim: usize,
    pub n_layers: usize,
    pub aggregation: Aggregation,
    pub layer_mode: LayerMode,
}

impl ProbeConfig {
    /// Checks the configuration invariants. The forward pass itself only needs
    /// consistent shapes, so a single-layer weighted probe still evaluates.
    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.n_classes == 0 || self.dim == 0 || self.n_layers == 0 {
            return Err(ProbeError::Config("n_classes, dim and n_layers must be >= 1".into()));
        }
        if self.layer_mode == LayerMode::Weighted && self.n_layers < 2 {
            return Err(ProbeError::Config(format!(
                "weighted layer mode needs at least 2 layers, got {}",
                self.n_layers
            )));
        }
        Ok(())
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self { rows: rows.len(), cols, data: rows.concat() }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Everything the probe learns. `alpha` is empty unless the layer mode is
/// weighted; `w_att`/`b_att` are empty unless aggregation is attention.
/// Weight matrices are row-major `n_classes x dim`.
///
/// The same shape doubles as the gradient and Adam-moment container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeParams {
    pub alpha: Vec<f64>,
    pub w_cls: Vec<f64>,
    pub b_cls: Vec<f64>,
    pub w_att: Vec<f64>,
    pub b_att: Vec<f64>,
}

pub type Gradients = ProbeParams;

impl ProbeParams {
    pub fn zeros(config: &ProbeConfig) -> Self {
        let (l, m) = (config.n_classes, config.dim);
        let attention = config.aggregation == Aggregation::Attention;
        Self {
            alpha: match config.layer_mode {
                LayerMode::Weighted => vec![0.0; config.n_layers],
                LayerMode::Last => Vec::new(),
            },
            w_cls: vec![0.0; l * m],
            b_cls: vec![0.0; l],
            w_att: if attention { vec![0.0; l * m] } else { Vec::new() },
            b_att: if attention { vec![0.0; l] } else { Vec::new() },
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            alpha: vec![0.0; self.alpha.len()],
            w_cls: vec![0.0; self.w_cls.len()],
            b_cls: vec![0.0; self.b_cls.len()],
            w_att: vec![0.0; self.w_att.len()],
            b_att: vec![0.0; self.b_att.len()],
        }
    }

    pub fn check_shapes(&self, config: &ProbeConfig) -> Result<(), ProbeError> {
        let expected = Self::zeros(config);
        let fields = ["alpha", "w_cls", "b_cls", "w_att", "b_att"];
        for ((name, have), want) in fields.iter().zip(self.slices()).zip(expected.slices()) {
            if have.len() != want.len() {
                return Err(ProbeError::Shape(format!(
                    "{name} has {} entries, config requires {}",
                    have.len(),
                    want.len()
                )));
            }
        }
        Ok(())
    }

    /// Parameter groups in canonical order: alpha, w_cls, b_cls, w_att, b_att.
    pub fn slices(&self) -> [&[f64]; 5] {
        [&self.alpha, &self.w_cls, &self.b_cls, &self.w_att, &self.b_att]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 5] {
        [&mut self.alpha, &mut self.w_cls, &mut self.b_cls, &mut self.w_att, &mut self.b_att]
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.slices().into_iter().flatten()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.slices_mut().into_iter().flatten()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += scale * b;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipPrediction {
    pub y_hat: Vec<f64>,
    pub per_step: Option<Matrix>,
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// In-place numerically stable softmax.
pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let mut out = xs.to_vec();
    softmax_in_place(&mut out);
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `T x m` probe input: the last layer, or the softmax(alpha)-weighted sum of all layers.
pub fn layer_combine(
    tensor: &EmbeddingTensor,
    params: &ProbeParams,
    config: &ProbeConfig,
) -> Result<Matrix, ProbeError> {
    if tensor.n_layers() != config.n_layers || tensor.dim() != config.dim {
        return Err(ProbeError::Shape(format!(
            "tensor is {} layers x {} dim, probe expects {} x {}",
            tensor.n_layers(),
            tensor.dim(),
            config.n_layers,
            config.dim
        )));
    }
    let (t, m) = (tensor.n_steps(), tensor.dim());
    match config.layer_mode {
        LayerMode::Last => {
            Ok(Matrix { rows: t, cols: m, data: tensor.layer(config.n_layers - 1).iter().map(|&v| v as f64).collect() })
        }
        LayerMode::Weighted => {
            if params.alpha.len() != config.n_layers {
                return Err(ProbeError::Shape(format!(
                    "alpha has {} entries for {} layers",
                    params.alpha.len(),
                    config.n_layers
                )));
            }
            let weights = softmax(&params.alpha);
            let mut out = Matrix::zeros(t, m);
            for (layer, &w) in weights.iter().enumerate() {
                for (o, &v) in out.data.iter_mut().zip(tensor.layer(layer)) {
                    *o += w * v as f64;
                }
            }
            Ok(out)
        }
    }
}

/// `T x L` per-step class probabilities.
pub fn step_predictions(sequence: &Matrix, params: &ProbeParams, config: &ProbeConfig) -> Result<Matrix, ProbeError> {
    let (l, m) = (config.n_classes, config.dim);
    if sequence.cols != m {
        return Err(ProbeError::Shape(format!("sequence width {} != probe dim {m}", sequence.cols)));
    }
    if params.w_cls.len() != l * m || params.b_cls.len() != l {
        return Err(ProbeError::Shape("classifier weights do not match config".into()));
    }
    let mut out = Matrix::zeros(sequence.rows, l);
    for t in 0..sequence.rows {
        let e = sequence.row(t);
        let row = out.row_mut(t);
        for (c, z) in row.iter_mut().enumerate() {
            *z = dot(&params.w_cls[c * m..(c + 1) * m], e) + params.b_cls[c];
        }
        if row.iter().any(|z| !z.is_finite()) {
            return Err(ProbeError::NonFinite("classifier logits"));
        }
        match config.task {
            Task::Multilabel => row.iter_mut().for_each(|z| *z = sigmoid(*z)),
            Task::Multiclass => softmax_in_place(row),
        }
    }
    Ok(out)
}

/// Mean temporal integration.
pub fn aggregate_mean(step_preds: &Matrix) -> Result<ClipPrediction, ProbeError> {
    if step_preds.rows == 0 {
        return Err(ProbeError::Shape("cannot aggregate zero steps".into()));
    }
    let mut y_hat = vec![0.0; step_preds.cols];
    for t in 0..step_preds.rows {
        for (y, p) in y_hat.iter_mut().zip(step_preds.row(t)) {
            *y += p;
        }
    }
    let inv = 1.0 / step_preds.rows as f64;
    y_hat.iter_mut().for_each(|y| *y *= inv);
    Ok(ClipPrediction { y_hat, per_step: Some(step_preds.clone()) })
}

/// Per-class attention weights `w[t, l]`, softmax over time of `W_att e_t + b_att`.
pub fn attention_weights(sequence: &Matrix, params: &ProbeParams) -> Result<Matrix, ProbeError> {
    let l = params.b_att.len();
    let m = sequence.cols;
    if l == 0 || params.w_att.len() != l * m {
        return Err(ProbeError::Shape("attention head missing or mis-shaped".into()));
    }
    let mut logits = Matrix::zeros(sequence.rows, l);
    for t in 0..sequence.rows {
        let e = sequence.row(t);
        for c in 0..l {
            logits.data[t * l + c] = dot(&params.w_att[c * m..(c + 1) * m], e) + params.b_att[c];
        }
    }
    if logits.data.iter().any(|v| !v.is_finite()) {
        return Err(ProbeError::NonFinite("attention logits"));
    }
    let mut column = vec![0.0; sequence.rows];
    for c in 0..l {
        for (t, x) in column.iter_mut().enumerate() {
            *x = logits.data[t * l + c];
        }
        softmax_in_place(&mut column);
        for (t, &x) in column.iter().enumerate() {
            logits.data[t * l + c] = x;
        }
    }
    Ok(logits)
}

/// Attention aggregation, also returning the weights for reuse by the backward pass.
pub fn aggregate_attention_with_weights(
    sequence: &Matrix,
    step_preds: &Matrix,
    params: &ProbeParams,
) -> Result<(ClipPrediction, Matrix), ProbeError> {
    if sequence.rows != step_preds.rows || step_preds.cols != params.b_att.len() {
        return Err(ProbeError::Shape(format!(
            "sequence has {} steps, predictions {}x{}, attention head {} classes",
            sequence.rows,
            step_preds.rows,
            step_preds.cols,
            params.b_att.len()
        )));
    }
    if step_preds.rows == 0 {
        return Err(ProbeError::Shape("cannot aggregate zero steps".into()));
    }
    let weights = attention_weights(sequence, params)?;
    let mut y_hat = vec![0.0; step_preds.cols];
    for t in 0..step_preds.rows {
        for (c, y) in y_hat.iter_mut().enumerate() {
            *y += weights.get(t, c) * step_preds.get(t, c);
        }
    }
    Ok((ClipPrediction { y_hat, per_step: Some(step_preds.clone()) }, weights))
}

pub fn aggregate_attention(
    sequence: &Matrix,
    step_preds: &Matrix,
    params: &ProbeParams,
) -> Result<ClipPrediction, ProbeError> {
    aggregate_attention_with_weights(sequence, step_preds, params).map(|(p, _)| p)
}

/// Full clip-level prediction.
pub fn forward(
    tensor: &EmbeddingTensor,
    params: &ProbeParams,
    config: &ProbeConfig,
) -> Result<ClipPrediction, ProbeError> {
    params.check_shapes(config)?;
    let sequence = layer_combine(tensor, params, config)?;
    let step_preds = step_predictions(&sequence, params, config)?;
    match config.aggregation {
        Aggregation::Mean => aggregate_mean(&step_preds),
        Aggregation::Attention => aggregate_attention(&sequence, &step_preds, params),
    }
}

/// Xavier-uniform weights in `[-s, s]`, `s = sqrt(6 / (dim + n_classes))`; zero
/// biases and zero layer logits.
pub fn init_params(config: &ProbeConfig, seed: u64) -> ProbeParams {
    let mut params = ProbeParams::zeros(config);
    let bound = init_bound(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for w in params.w_cls.iter_mut().chain(params.w_att.iter_mut()) {
        *w = rng.random_range(-bound..=bound);
    }
    params
}

pub fn init_bound(config: &ProbeConfig) -> f64 {
    (6.0 / (config.dim + config.n_classes) as f64).sqrt()
}
