//! Losses with missing-label masking and exact gradients of the probe graph.
//!
//! The backward pass is hand-derived for the fixed graph
//! `layer softmax -> linear -> sigmoid|softmax -> mean|attention -> loss`.
//! [`finite_diff_grad`] is the independent oracle it is tested against.

use thiserror::Error;

use crate::exec::Exec;
use crate::probe::{
    aggregate_attention_with_weights, aggregate_mean, layer_combine, softmax, step_predictions, Aggregation,
    ClipPrediction, Gradients, LayerMode, Matrix, ProbeConfig, ProbeError, ProbeParams,
};
use crate::store::{EmbeddingTensor, Task};

/// Probability clamp applied before every logarithm.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("clip {index}: {source}")]
    Clip {
        index: usize,
        #[source]
        source: ProbeError,
    },
}

/// Binary cross-entropy averaged over the observed labels only; 0 when nothing is observed.
pub fn masked_bce(y_hat: &[f64], labels: &[u8], mask: &[u8]) -> f64 {
    let mut sum = 0.0;
    let mut observed = 0usize;
    for ((&p, &y), &m) in y_hat.iter().zip(labels).zip(mask) {
        if m == 0 {
            continue;
        }
        observed += 1;
        let q = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        sum += if y == 1 { q.ln() } else { (1.0 - q).ln() };
    }
    if observed == 0 {
        0.0
    } else {
        -sum / observed as f64
    }
}

/// `-ln(y_hat[c])` for the true class `c`.
pub fn cross_entropy(y_hat: &[f64], labels: &[u8]) -> f64 {
    let c = labels.iter().position(|&v| v == 1).expect("one-hot label");
    -y_hat[c].clamp(PROB_EPS, 1.0).ln()
}

/// One clip paired with its targets.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub tensor: &'a EmbeddingTensor,
    pub labels: &'a [u8],
    pub mask: &'a [u8],
}

#[derive(Debug, Clone, Default)]
pub struct Batch<'a> {
    pub examples: Vec<Example<'a>>,
}

impl<'a> Batch<'a> {
    pub fn new(examples: Vec<Example<'a>>) -> Self {
        Self { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

fn task_loss(pred: &ClipPrediction, ex: &Example, config: &ProbeConfig) -> f64 {
    match config.task {
        Task::Multilabel => masked_bce(&pred.y_hat, ex.labels, ex.mask),
        Task::Multiclass => cross_entropy(&pred.y_hat, ex.labels),
    }
}

fn check_targets(ex: &Example, config: &ProbeConfig) -> Result<(), ProbeError> {
    if ex.labels.len() != config.n_classes || ex.mask.len() != config.n_classes {
        return Err(ProbeError::Shape(format!(
            "targets have {}/{} entries for {} classes",
            ex.labels.len(),
            ex.mask.len(),
            config.n_classes
        )));
    }
    if config.task == Task::Multiclass && ex.labels.iter().filter(|&&v| v == 1).count() != 1 {
        return Err(ProbeError::Shape("multiclass target must be one-hot".into()));
    }
    Ok(())
}

struct Trace {
    sequence: Matrix,
    step_preds: Matrix,
    attention: Option<Matrix>,
    prediction: ClipPrediction,
}

fn trace(tensor: &EmbeddingTensor, params: &ProbeParams, config: &ProbeConfig) -> Result<Trace, ProbeError> {
    let sequence = layer_combine(tensor, params, config)?;
    let step_preds = step_predictions(&sequence, params, config)?;
    let (prediction, attention) = match config.aggregation {
        Aggregation::Mean => (aggregate_mean(&step_preds)?, None),
        Aggregation::Attention => {
            let (p, w) = aggregate_attention_with_weights(&sequence, &step_preds, params)?;
            (p, Some(w))
        }
    };
    Ok(Trace { sequence, step_preds, attention, prediction })
}

/// Loss of a single clip.
pub fn clip_loss(ex: &Example, params: &ProbeParams, config: &ProbeConfig) -> Result<f64, ProbeError> {
    check_targets(ex, config)?;
    let t = trace(ex.tensor, params, config)?;
    let loss = task_loss(&t.prediction, ex, config);
    if !loss.is_finite() {
        return Err(ProbeError::NonFinite("loss"));
    }
    Ok(loss)
}

/// Mean loss over the batch, reduced in clip order.
pub fn batch_loss(batch: &Batch, params: &ProbeParams, config: &ProbeConfig) -> Result<f64, LossError> {
    batch_loss_with(Exec::default(), batch, params, config)
}

pub fn batch_loss_with(
    exec: Exec,
    batch: &Batch,
    params: &ProbeParams,
    config: &ProbeConfig,
) -> Result<f64, LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    params.check_shapes(config).map_err(|source| LossError::Clip { index: 0, source })?;
    let losses = exec.map(&batch.examples, |ex| clip_loss(ex, params, config));
    let mut sum = 0.0;
    for (index, loss) in losses.into_iter().enumerate() {
        sum += loss.map_err(|source| LossError::Clip { index, source })?;
    }
    Ok(sum / batch.len() as f64)
}

/// `dL/d y_hat` for one clip.
fn loss_grad_wrt_prediction(y_hat: &[f64], ex: &Example, config: &ProbeConfig) -> Vec<f64> {
    let mut g = vec![0.0; y_hat.len()];
    match config.task {
        Task::Multilabel => {
            let observed = ex.mask.iter().filter(|&&m| m != 0).count();
            if observed == 0 {
                return g;
            }
            let scale = 1.0 / observed as f64;
            for (c, gc) in g.iter_mut().enumerate() {
                if ex.mask[c] == 0 {
                    continue;
                }
                let p = y_hat[c];
                let q = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                if q != p {
                    continue;
                }
                *gc = if ex.labels[c] == 1 { -scale / q } else { scale / (1.0 - q) };
            }
        }
        Task::Multiclass => {
            let c = ex.labels.iter().position(|&v| v == 1).expect("one-hot label");
            let p = y_hat[c];
            if p >= PROB_EPS {
                g[c] = -1.0 / p;
            }
        }
    }
    g
}

/// Loss and exact parameter gradients for one clip.
pub fn clip_backward(ex: &Example, params: &ProbeParams, config: &ProbeConfig) -> Result<(f64, Gradients), ProbeError> {
    check_targets(ex, config)?;
    let tr = trace(ex.tensor, params, config)?;
    let loss = task_loss(&tr.prediction, ex, config);
    if !loss.is_finite() {
        return Err(ProbeError::NonFinite("loss"));
    }
    let (l, m) = (config.n_classes, config.dim);
    let steps = tr.sequence.rows;
    let y_hat = &tr.prediction.y_hat;
    let g_y = loss_grad_wrt_prediction(y_hat, ex, config);

    // Through the temporal aggregation.
    let mut d_pred = Matrix::zeros(steps, l);
    let mut d_att = tr.attention.as_ref().map(|_| Matrix::zeros(steps, l));
    match (&tr.attention, d_att.as_mut()) {
        (Some(w), Some(d_att)) => {
            for t in 0..steps {
                for c in 0..l {
                    let wg = g_y[c] * w.get(t, c);
                    d_pred.data[t * l + c] = wg;
                    d_att.data[t * l + c] = wg * (tr.step_preds.get(t, c) - y_hat[c]);
                }
            }
        }
        _ => {
            let inv = 1.0 / steps as f64;
            for t in 0..steps {
                for (d, g) in d_pred.row_mut(t).iter_mut().zip(&g_y) {
                    *d = g * inv;
                }
            }
        }
    }

    // Through the per-step sigmoid or softmax.
    let mut d_logit = Matrix::zeros(steps, l);
    for t in 0..steps {
        let p = tr.step_preds.row(t);
        let dp = d_pred.row(t);
        let dz = d_logit.row_mut(t);
        match config.task {
            Task::Multilabel => {
                for c in 0..l {
                    dz[c] = dp[c] * p[c] * (1.0 - p[c]);
                }
            }
            Task::Multiclass => {
                let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
                for c in 0..l {
                    dz[c] = p[c] * (dp[c] - inner);
                }
            }
        }
    }

    // Through the two linear heads.
    let mut grads = params.zeros_like();
    let mut d_seq = Matrix::zeros(steps, m);
    let weighted = config.layer_mode == LayerMode::Weighted;
    accumulate_linear(
        &d_logit,
        &tr.sequence,
        &params.w_cls,
        &mut grads.w_cls,
        &mut grads.b_cls,
        weighted.then_some(&mut d_seq),
    );
    if let Some(da) = &d_att {
        accumulate_linear(
            da,
            &tr.sequence,
            &params.w_att,
            &mut grads.w_att,
            &mut grads.b_att,
            weighted.then_some(&mut d_seq),
        );
    }

    // Through the layer softmax.
    if weighted {
        let beta = softmax(&params.alpha);
        let d_beta: Vec<f64> = (0..config.n_layers)
            .map(|layer| ex.tensor.layer(layer).iter().zip(&d_seq.data).map(|(&x, &g)| x as f64 * g).sum())
            .collect();
        let inner: f64 = beta.iter().zip(&d_beta).map(|(b, d)| b * d).sum();
        for (k, da) in grads.alpha.iter_mut().enumerate() {
            *da = beta[k] * (d_beta[k] - inner);
        }
    }

    if !grads.is_finite() {
        return Err(ProbeError::NonFinite("gradient"));
    }
    Ok((loss, grads))
}

/// Gradients of `z[t, c] = w[c] . s_t + b[c]` given `dL/dz`.
fn accumulate_linear(
    d_out: &Matrix,
    sequence: &Matrix,
    weights: &[f64],
    d_weights: &mut [f64],
    d_bias: &mut [f64],
    d_input: Option<&mut Matrix>,
) {
    let (l, m) = (d_out.cols, sequence.cols);
    for t in 0..d_out.rows {
        let s = sequence.row(t);
        for c in 0..l {
            let g = d_out.get(t, c);
            d_bias[c] += g;
            for (dw, &x) in d_weights[c * m..(c + 1) * m].iter_mut().zip(s) {
                *dw += g * x;
            }
        }
    }
    if let Some(d_input) = d_input {
        for t in 0..d_out.rows {
            let ds = d_input.row_mut(t);
            for c in 0..l {
                let g = d_out.get(t, c);
                for (d, &w) in ds.iter_mut().zip(&weights[c * m..(c + 1) * m]) {
                    *d += g * w;
                }
            }
        }
    }
}

/// Mean loss over the batch and its exact gradient.
pub fn backward(batch: &Batch, params: &ProbeParams, config: &ProbeConfig) -> Result<(f64, Gradients), LossError> {
    backward_with(Exec::default(), batch, params, config)
}

/// [`backward`] with an explicit execution strategy. Per-clip terms may run
/// concurrently; the reduction is always sequential in clip order.
pub fn backward_with(
    exec: Exec,
    batch: &Batch,
    params: &ProbeParams,
    config: &ProbeConfig,
) -> Result<(f64, Gradients), LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    params.check_shapes(config).map_err(|source| LossError::Clip { index: 0, source })?;
    let terms = exec.map(&batch.examples, |ex| clip_backward(ex, params, config));
    let mut loss = 0.0;
    let mut grads = params.zeros_like();
    for (index, term) in terms.into_iter().enumerate() {
        let (l, g) = term.map_err(|source| LossError::Clip { index, source })?;
        loss += l;
        grads.add_scaled(&g, 1.0);
    }
    let n = batch.len() as f64;
    grads.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grads))
}

/// Central finite differences `(L(theta + h) - L(theta - h)) / 2h` for every scalar parameter.
pub fn finite_diff_grad(
    batch: &Batch,
    params: &ProbeParams,
    config: &ProbeConfig,
    h: f64,
) -> Result<Gradients, LossError> {
    finite_diff_grad_with(Exec::default(), batch, params, config, h)
}

/// [`finite_diff_grad`] with the parameters spread over `exec`.
pub fn finite_diff_grad_with(
    exec: Exec,
    batch: &Batch,
    params: &ProbeParams,
    config: &ProbeConfig,
    h: f64,
) -> Result<Gradients, LossError> {
    assert!(h > 0.0, "step must be positive");
    let evaluations = exec.map_range(params.len(), |i| {
        let mut shifted = params.clone();
        let mut bump = |delta: f64| {
            *shifted.iter_mut().nth(i).unwrap() = params.iter().nth(i).unwrap() + delta;
            batch_loss_with(Exec::Sequential, batch, &shifted, config)
        };
        let plus = bump(h)?;
        let minus = bump(-h)?;
        Ok((plus - minus) / (2.0 * h))
    });
    let mut grads = params.zeros_like();
    for (g, e) in grads.iter_mut().zip(evaluations) {
        *g = e?;
    }
    Ok(grads)
}
