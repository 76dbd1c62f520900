//! Feedforward MISO NARX network written from scratch: flattened parameter
//! layout, forward pass, backpropagation, Adam training and free-run
//! simulation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::structure::{Embedding, NarxDataset, Normalization};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NarxError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("loss became non-finite at epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("{0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Linear => z,
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn slope_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Linear => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Linear => "linear",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_width: usize,
    /// Hidden layers followed by the width-1 output layer.
    pub layers: Vec<LayerSpec>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub adam: AdamSettings,
    pub seed: u64,
}

impl NetworkSpec {
    /// Hidden layers plus a linear scalar output.
    pub fn miso(input_width: usize, hidden: &[LayerSpec], learning_rate: f64, seed: u64) -> Self {
        let mut layers = hidden.to_vec();
        layers.push(LayerSpec {
            width: 1,
            activation: Activation::Linear,
        });
        Self {
            input_width,
            layers,
            learning_rate,
            batch_size: 32,
            epochs: 100,
            patience: 20,
            adam: AdamSettings::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), NarxError> {
        if self.input_width == 0 {
            return Err(NarxError::InvalidSpec("input width is zero".into()));
        }
        match self.layers.last() {
            Some(l) if l.width == 1 => {}
            _ => return Err(NarxError::InvalidSpec("output layer must have width 1".into())),
        }
        if self.layers.iter().any(|l| l.width == 0) {
            return Err(NarxError::InvalidSpec("layer of width zero".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || self.batch_size == 0 {
            return Err(NarxError::InvalidSpec(
                "learning rate and batch size must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Parameter count per layer, (in + 1) * out.
    pub fn layer_param_counts(&self) -> Vec<usize> {
        let mut fan_in = self.input_width;
        self.layers
            .iter()
            .map(|l| {
                let n = (fan_in + 1) * l.width;
                fan_in = l.width;
                n
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_param_counts().iter().sum()
    }

    /// Structural part of a network spec, used to compare architectures.
    pub fn describe(&self) -> String {
        let layers: Vec<String> = self
            .layers
            .iter()
            .map(|l| format!("{}{}", l.width, l.activation.name()))
            .collect();
        format!("{}|lr={}", layers.join("-"), self.learning_rate)
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerLayout {
    fan_in: usize,
    fan_out: usize,
    w_off: usize,
    b_off: usize,
    activation: Activation,
}

/// Offsets of each layer inside θ: weights `[out][in]` row-major, then biases.
#[derive(Debug, Clone)]
pub struct Layout {
    layers: Vec<LayerLayout>,
    len: usize,
    input_width: usize,
}

impl Layout {
    pub fn new(spec: &NetworkSpec) -> Self {
        let mut off = 0;
        let mut fan_in = spec.input_width;
        let layers = spec
            .layers
            .iter()
            .map(|l| {
                let ll = LayerLayout {
                    fan_in,
                    fan_out: l.width,
                    w_off: off,
                    b_off: off + fan_in * l.width,
                    activation: l.activation,
                };
                off += (fan_in + 1) * l.width;
                fan_in = l.width;
                ll
            })
            .collect();
        Self {
            layers,
            len: off,
            input_width: spec.input_width,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkWeights {
    pub theta: Vec<f64>,
}

impl NetworkWeights {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        Self {
            theta: vec![0.0; spec.param_count()],
        }
    }

    /// Uniform He-style initialisation, zero biases.
    pub fn init(spec: &NetworkSpec) -> Self {
        let layout = Layout::new(spec);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut theta = vec![0.0; layout.len];
        for l in &layout.layers {
            let limit = (6.0 / l.fan_in as f64).sqrt();
            for w in &mut theta[l.w_off..l.b_off] {
                *w = rng.random_range(-limit..limit);
            }
        }
        Self { theta }
    }
}

/// Rewrites θ in place so that the network evaluated on `x'` returns
/// `out_scale * f(in_scale ⊙ x' + in_shift) + out_shift`, where `f` is the
/// original network.
pub fn reparametrize(
    spec: &NetworkSpec,
    theta: &mut [f64],
    in_scale: &[f64],
    in_shift: &[f64],
    out_scale: f64,
    out_shift: f64,
) -> Result<(), NarxError> {
    let layout = Layout::new(spec);
    if theta.len() != layout.len {
        return Err(NarxError::ShapeMismatch {
            expected: layout.len,
            got: theta.len(),
        });
    }
    if in_scale.len() != spec.input_width || in_shift.len() != spec.input_width {
        return Err(NarxError::ShapeMismatch {
            expected: spec.input_width,
            got: in_scale.len().min(in_shift.len()),
        });
    }
    let first = layout.layers[0];
    for o in 0..first.fan_out {
        let row = first.w_off + o * first.fan_in;
        let mut shift = 0.0;
        for i in 0..first.fan_in {
            shift += theta[row + i] * in_shift[i];
            theta[row + i] *= in_scale[i];
        }
        theta[first.b_off + o] += shift;
    }
    let last = layout.layers[layout.layers.len() - 1];
    for w in &mut theta[last.w_off..last.b_off + last.fan_out] {
        *w *= out_scale;
    }
    theta[last.b_off] += out_shift;
    Ok(())
}

/// Scratch buffers for one forward/backward pass.
#[derive(Debug, Clone)]
pub struct Workspace {
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Workspace {
    pub fn new(spec: &NetworkSpec) -> Self {
        let acts: Vec<Vec<f64>> = spec.layers.iter().map(|l| vec![0.0; l.width]).collect();
        Self {
            deltas: acts.clone(),
            acts,
        }
    }
}

/// Evaluates a network quickly on many rows without re-validating its network spec.
#[derive(Debug, Clone)]
pub struct Evaluator {
    layout: Layout,
    ws: Workspace,
}

impl Evaluator {
    pub fn new(spec: &NetworkSpec) -> Self {
        Self {
            layout: Layout::new(spec),
            ws: Workspace::new(spec),
        }
    }

    #[inline]
    pub fn predict(&mut self, theta: &[f64], x: &[f64]) -> f64 {
        forward_with(&self.layout, theta, x, &mut self.ws)
    }

    pub fn input_width(&self) -> usize {
        self.layout.input_width
    }
}

fn forward_with(layout: &Layout, theta: &[f64], x: &[f64], ws: &mut Workspace) -> f64 {
    for (li, l) in layout.layers.iter().enumerate() {
        let (before, after) = ws.acts.split_at_mut(li);
        let input: &[f64] = if li == 0 { x } else { &before[li - 1] };
        let out = &mut after[0];
        let w = &theta[l.w_off..l.b_off];
        let b = &theta[l.b_off..l.b_off + l.fan_out];
        for (o, a) in out.iter_mut().enumerate() {
            let row = &w[o * l.fan_in..(o + 1) * l.fan_in];
            let z = row.iter().zip(input).map(|(wi, xi)| wi * xi).sum::<f64>() + b[o];
            *a = l.activation.apply(z);
        }
    }
    ws.acts[layout.layers.len() - 1][0]
}

/// Backpropagates `g = dL/dŷ` for the row whose activations are in `ws`,
/// accumulating into `grad`.
fn backward_with(layout: &Layout, theta: &[f64], x: &[f64], g: f64, ws: &mut Workspace, grad: &mut [f64]) {
    let n = layout.layers.len();
    {
        let last = &layout.layers[n - 1];
        ws.deltas[n - 1][0] = g * last.activation.slope_from_output(ws.acts[n - 1][0]);
    }
    for li in (0..n).rev() {
        let l = layout.layers[li];
        let (d_before, d_after) = ws.deltas.split_at_mut(li);
        let delta = &d_after[0];
        let input: &[f64] = if li == 0 { x } else { &ws.acts[li - 1] };
        for (o, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let gw = &mut grad[l.w_off + o * l.fan_in..l.w_off + (o + 1) * l.fan_in];
            for (gi, xi) in gw.iter_mut().zip(input) {
                *gi += d * xi;
            }
            grad[l.b_off + o] += d;
        }
        if li > 0 {
            let prev = &mut d_before[li - 1];
            let prev_act = layout.layers[li - 1].activation;
            let w = &theta[l.w_off..l.b_off];
            prev.iter_mut().for_each(|v| *v = 0.0);
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &w[o * l.fan_in..(o + 1) * l.fan_in];
                for (p, wi) in prev.iter_mut().zip(row) {
                    *p += wi * d;
                }
            }
            for (p, a) in prev.iter_mut().zip(&ws.acts[li - 1]) {
                *p *= prev_act.slope_from_output(*a);
            }
        }
    }
}

fn check_theta(spec: &NetworkSpec, weights: &NetworkWeights) -> Result<(), NarxError> {
    let expected = spec.param_count();
    if weights.theta.len() != expected {
        return Err(NarxError::ShapeMismatch {
            expected,
            got: weights.theta.len(),
        });
    }
    Ok(())
}

/// One-step-ahead prediction in normalized units.
pub fn forward(weights: &NetworkWeights, spec: &NetworkSpec, row: &[f64]) -> Result<f64, NarxError> {
    check_theta(spec, weights)?;
    if row.len() != spec.input_width {
        return Err(NarxError::ShapeMismatch {
            expected: spec.input_width,
            got: row.len(),
        });
    }
    let layout = Layout::new(spec);
    let mut ws = Workspace::new(spec);
    Ok(forward_with(&layout, &weights.theta, row, &mut ws))
}

/// A batch of regressor rows with targets.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
}

/// Mean squared error over the batch and its exact gradient.
pub fn gradient(weights: &NetworkWeights, spec: &NetworkSpec, batch: Batch<'_>) -> Result<(f64, Vec<f64>), NarxError> {
    check_theta(spec, weights)?;
    let w = spec.input_width;
    if batch.y.is_empty() {
        return Err(NarxError::InvalidArgument("empty batch".into()));
    }
    if batch.x.len() != batch.y.len() * w {
        return Err(NarxError::ShapeMismatch {
            expected: batch.y.len() * w,
            got: batch.x.len(),
        });
    }
    let layout = Layout::new(spec);
    let mut ws = Workspace::new(spec);
    let mut grad = vec![0.0; layout.len];
    let n = batch.y.len() as f64;
    let mut loss = 0.0;
    for (i, &t) in batch.y.iter().enumerate() {
        let x = &batch.x[i * w..(i + 1) * w];
        let yhat = forward_with(&layout, &weights.theta, x, &mut ws);
        let r = yhat - t;
        loss += r * r;
        backward_with(&layout, &weights.theta, x, 2.0 * r / n, &mut ws, &mut grad);
    }
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

/// Metrics over selected dataset rows; `denormalized` rescales by the output
/// range.
pub fn evaluate(
    weights: &NetworkWeights,
    spec: &NetworkSpec,
    dataset: &NarxDataset,
    rows: &[usize],
    denormalized: bool,
) -> Result<Metrics, NarxError> {
    check_theta(spec, weights)?;
    if spec.input_width != dataset.width() {
        return Err(NarxError::ShapeMismatch {
            expected: spec.input_width,
            got: dataset.width(),
        });
    }
    if rows.is_empty() {
        return Err(NarxError::InvalidArgument("no rows to evaluate".into()));
    }
    let mut ev = Evaluator::new(spec);
    let residuals: Vec<f64> = rows
        .iter()
        .map(|&i| ev.predict(&weights.theta, dataset.row(i)) - dataset.y[i])
        .collect();
    let mut m = metrics_from_residuals(&residuals);
    if denormalized {
        let span = dataset.normalization.output.denormalize(1.0) - dataset.normalization.output.denormalize(0.0);
        m.mse *= span * span;
        m.mae *= span.abs();
    }
    Ok(m)
}

pub fn metrics_from_residuals(residuals: &[f64]) -> Metrics {
    let n = residuals.len().max(1) as f64;
    Metrics {
        mse: residuals.iter().map(|r| r * r).sum::<f64>() / n,
        mae: residuals.iter().map(|r| r.abs()).sum::<f64>() / n,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Resumable training state: continuing for k more epochs is bitwise
/// identical to having asked for the larger budget up front.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub weights: NetworkWeights,
    pub best: NetworkWeights,
    pub best_val: f64,
    pub history: Vec<EpochRecord>,
    pub epochs_done: usize,
    pub since_best: usize,
    pub stopped: bool,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
    adam_t: u64,
}

impl TrainState {
    pub fn new(spec: &NetworkSpec) -> Self {
        Self::from_weights(NetworkWeights::init(spec))
    }

    pub fn from_weights(weights: NetworkWeights) -> Self {
        let n = weights.theta.len();
        Self {
            best: weights.clone(),
            weights,
            best_val: f64::INFINITY,
            history: Vec::new(),
            epochs_done: 0,
            since_best: 0,
            stopped: false,
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            adam_t: 0,
        }
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn mean_loss(ev: &mut Evaluator, theta: &[f64], ds: &NarxDataset, rows: &[usize]) -> f64 {
    if rows.is_empty() {
        return f64::NAN;
    }
    rows.iter()
        .map(|&i| {
            let r = ev.predict(theta, ds.row(i)) - ds.y[i];
            r * r
        })
        .sum::<f64>()
        / rows.len() as f64
}

/// Rows used for training and validation; fine-tuning may substitute its own.
#[derive(Debug, Clone, Copy)]
pub struct TrainRows<'a> {
    pub train: &'a [usize],
    pub val: &'a [usize],
}

impl<'a> TrainRows<'a> {
    pub fn of(ds: &'a NarxDataset) -> Self {
        Self {
            train: &ds.train,
            val: &ds.val,
        }
    }
}

/// Runs up to `epochs` further epochs of mini-batch Adam with early stopping
/// on the validation loss.
pub fn train_epochs(
    state: &mut TrainState,
    spec: &NetworkSpec,
    dataset: &NarxDataset,
    rows: TrainRows<'_>,
    epochs: usize,
) -> Result<(), NarxError> {
    spec.validate()?;
    check_theta(spec, &state.weights)?;
    if spec.input_width != dataset.width() {
        return Err(NarxError::ShapeMismatch {
            expected: spec.input_width,
            got: dataset.width(),
        });
    }
    if rows.train.is_empty() {
        return Err(NarxError::InvalidArgument("no training rows".into()));
    }
    let layout = Layout::new(spec);
    let mut ws = Workspace::new(spec);
    let mut ev = Evaluator::new(spec);
    let mut grad = vec![0.0; layout.len];
    let mut order = rows.train.to_vec();
    let AdamSettings { beta1, beta2, epsilon } = spec.adam;
    let val_rows = if rows.val.is_empty() { rows.train } else { rows.val };
    for _ in 0..epochs {
        if state.stopped {
            break;
        }
        let epoch = state.epochs_done;
        order.copy_from_slice(rows.train);
        order.shuffle(&mut epoch_rng(spec.seed, epoch));
        let mut train_loss = 0.0;
        for chunk in order.chunks(spec.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let n = chunk.len() as f64;
            for &i in chunk {
                let x = dataset.row(i);
                let r = forward_with(&layout, &state.weights.theta, x, &mut ws) - dataset.y[i];
                train_loss += r * r;
                backward_with(&layout, &state.weights.theta, x, 2.0 * r / n, &mut ws, &mut grad);
            }
            state.adam_t += 1;
            let t = state.adam_t as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            for (((th, g), m), v) in state
                .weights
                .theta
                .iter_mut()
                .zip(&grad)
                .zip(state.adam_m.iter_mut())
                .zip(state.adam_v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *th -= spec.learning_rate * (*m / c1) / ((*v / c2).sqrt() + epsilon);
            }
        }
        train_loss /= order.len() as f64;
        let val_loss = mean_loss(&mut ev, &state.weights.theta, dataset, val_rows);
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(NarxError::DivergedLoss { epoch });
        }
        state.history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        state.epochs_done += 1;
        if val_loss < state.best_val {
            state.best_val = val_loss;
            state.best = state.weights.clone();
            state.since_best = 0;
        } else {
            state.since_best += 1;
            if spec.patience > 0 && state.since_best >= spec.patience {
                state.stopped = true;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub weights: NetworkWeights,
    pub history: Vec<EpochRecord>,
    pub best_val: f64,
}

/// Trains from the network initialisation for `spec.epochs` epochs and returns
/// the best-on-validation weights.
pub fn train(dataset: &NarxDataset, spec: &NetworkSpec) -> Result<TrainedModel, NarxError> {
    let mut state = TrainState::new(spec);
    train_epochs(&mut state, spec, dataset, TrainRows::of(dataset), spec.epochs)?;
    Ok(TrainedModel {
        weights: state.best,
        history: state.history,
        best_val: state.best_val,
    })
}

/// As [`train`], but each time early stopping fires the run resumes from the
/// best weights with the learning rate scaled by `decay`, until the epoch
/// budget is spent.
pub fn train_with_decay(dataset: &NarxDataset, spec: &NetworkSpec, decay: f64) -> Result<TrainedModel, NarxError> {
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(NarxError::InvalidArgument(format!("decay must lie in (0, 1], got {decay}")));
    }
    let mut state = TrainState::new(spec);
    let rows = TrainRows::of(dataset);
    let mut stage = spec.clone();
    train_epochs(&mut state, &stage, dataset, rows, spec.epochs)?;
    while state.stopped && state.epochs_done < spec.epochs && decay < 1.0 {
        stage.learning_rate *= decay;
        state.weights = state.best.clone();
        state.adam_m.iter_mut().for_each(|m| *m = 0.0);
        state.adam_v.iter_mut().for_each(|v| *v = 0.0);
        state.adam_t = 0;
        state.since_best = 0;
        state.stopped = false;
        let remaining = spec.epochs - state.epochs_done;
        train_epochs(&mut state, &stage, dataset, rows, remaining)?;
    }
    Ok(TrainedModel {
        weights: state.best,
        history: state.history,
        best_val: state.best_val,
    })
}

/// Free-run simulation: predictions are fed back as output lags. `initial`
/// holds the measured outputs for the first `initial.len()` samples and
/// `exogenous` covers the whole horizon; returns raw-unit predictions for
/// samples `initial.len()..exogenous.len()`.
pub fn simulate_closed_loop(
    theta: &[f64],
    ev: &mut Evaluator,
    embedding: &Embedding,
    norm: &Normalization,
    initial: &[f64],
    exogenous: &[Vec<f64>],
) -> Result<Vec<f64>, NarxError> {
    simulate_closed_loop_with(theta, ev, embedding, norm, initial, exogenous, |_| 0.0)
}

/// Free run of the stochastic model: `residual(k)` (normalized units) is
/// added to the k-th prediction before it is fed back.
pub fn simulate_closed_loop_with(
    theta: &[f64],
    ev: &mut Evaluator,
    embedding: &Embedding,
    norm: &Normalization,
    initial: &[f64],
    exogenous: &[Vec<f64>],
    mut residual: impl FnMut(usize) -> f64,
) -> Result<Vec<f64>, NarxError> {
    if ev.input_width() != embedding.width() {
        return Err(NarxError::ShapeMismatch {
            expected: ev.input_width(),
            got: embedding.width(),
        });
    }
    let k = initial.len();
    if k < embedding.max_lag() {
        return Err(NarxError::ShapeMismatch {
            expected: embedding.max_lag(),
            got: k,
        });
    }
    let mut y = initial.to_vec();
    y.reserve(exogenous.len().saturating_sub(k));
    let mut row = Vec::with_capacity(embedding.width());
    for t in k..exogenous.len() {
        embedding.regressor(&y, &exogenous[..t], norm, &mut row);
        let p = ev.predict(theta, &row) + residual(t - k);
        y.push(norm.output.denormalize(p));
    }
    Ok(y.split_off(k))
}
