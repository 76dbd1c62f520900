//! Online side of the twin: warm start from the offline models, coverage
//! violation counting over a moving horizon, drift handling and online
//! fine-tuning of the ensemble.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::fingerprint;
use crate::bayes::{region_of, ModelEnsemble, Region};
use crate::channels::{samples_segment, Channel};
use crate::doe::{build_input_sequence, lhs_sample, run_schedule, Dimension, DoeError};
use crate::narx::{reparametrize, train_epochs, Evaluator, NarxError, NetworkSpec, NetworkWeights, TrainRows, TrainState};
use crate::plant::{IntegratorConfig, PlantInputs, PlantParams, PlantState, TrajectorySample};
use crate::structure::{assemble_narx_dataset_with, Embedding, Normalization, Segment, SplitRatios, StructureError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CognitiveError {
    #[error("invalid cognitive config: {0}")]
    InvalidConfig(String),
    #[error("invalid coverage region: inf {inf} > sup {sup}")]
    InvalidRegion { inf: f64, sup: f64 },
    #[error("artifact fingerprint mismatch: recorded {recorded}, computed {computed}")]
    ArtifactMismatch { recorded: String, computed: String },
    #[error("no offline plant instance available to generate retraining data")]
    OfflineInstanceUnavailable,
    #[error("retraining needs {needed} samples, {available} buffered")]
    NotEnoughData { needed: usize, available: usize },
    #[error(transparent)]
    Network(#[from] NarxError),
    #[error(transparent)]
    Structure(#[from] StructureError),
    #[error(transparent)]
    Doe(#[from] DoeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CognitiveConfig {
    /// Moving-horizon length MH, in steps.
    pub horizon: usize,
    /// Window start offset a: stream steps before it are not counted.
    pub offset: usize,
    /// Cognitive threshold CT, violations per window.
    pub threshold: usize,
    pub confidence: f64,
    /// Live samples collected before retraining when the drift source is unknown.
    pub wait_buffer: usize,
}

impl Default for CognitiveConfig {
    fn default() -> Self {
        Self {
            horizon: 100,
            offset: 1,
            threshold: 5,
            confidence: 0.95,
            wait_buffer: 5000,
        }
    }
}

impl CognitiveConfig {
    pub fn validate(&self) -> Result<(), CognitiveError> {
        if self.horizon == 0 {
            return Err(CognitiveError::InvalidConfig("MH must be >= 1".into()));
        }
        if self.threshold == 0 || self.threshold > self.horizon {
            return Err(CognitiveError::InvalidConfig(format!(
                "CT must lie in [1, {}], got {}",
                self.horizon, self.threshold
            )));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(CognitiveError::InvalidConfig(format!(
                "confidence must lie in (0, 1), got {}",
                self.confidence
            )));
        }
        Ok(())
    }
}

/// 0 when the measurement lies inside the closed region, 1 otherwise.
pub fn violation_indicator(measured: f64, inf: f64, sup: f64) -> Result<u8, CognitiveError> {
    if inf > sup || inf.is_nan() || sup.is_nan() {
        return Err(CognitiveError::InvalidRegion { inf, sup });
    }
    Ok(u8::from(!(inf <= measured && measured <= sup)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CognitiveUpdate {
    pub z: usize,
    pub trigger: bool,
}

/// Moving-horizon violation counter of one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct CognitiveState {
    config: CognitiveConfig,
    window: VecDeque<u8>,
    z: usize,
    k: usize,
    triggered: bool,
}

impl CognitiveState {
    pub fn new(config: CognitiveConfig) -> Result<Self, CognitiveError> {
        config.validate()?;
        Ok(Self {
            window: VecDeque::with_capacity(config.horizon),
            config,
            z: 0,
            k: 0,
            triggered: false,
        })
    }

    pub fn z(&self) -> usize {
        self.z
    }

    pub fn step(&self) -> usize {
        self.k
    }

    pub fn triggered(&self) -> bool {
        self.triggered
    }

    pub fn window(&self) -> impl Iterator<Item = u8> + '_ {
        self.window.iter().copied()
    }

    /// Pushes the indicator of stream step k and advances k.
    pub fn update(&mut self, indicator: u8) -> CognitiveUpdate {
        let counted = if self.k < self.config.offset { 0 } else { indicator.min(1) };
        if self.window.len() == self.config.horizon {
            self.z -= self.window.pop_front().map_or(0, usize::from);
        }
        self.window.push_back(counted);
        self.z += usize::from(counted);
        self.k += 1;
        debug_assert_eq!(self.z, self.window.iter().map(|&v| usize::from(v)).sum::<usize>());
        let trigger = self.z >= self.config.threshold;
        self.triggered |= trigger;
        CognitiveUpdate { z: self.z, trigger }
    }

    /// Clears the window after the monitored model has been replaced.
    pub fn reset_window(&mut self) {
        self.window.clear();
        self.z = 0;
        self.triggered = false;
    }
}

/// Offline-identified model of one channel, as handed to the online twin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    pub channel: Channel,
    pub spec: NetworkSpec,
    pub embedding: Embedding,
    pub normalization: Normalization,
    pub map: NetworkWeights,
    pub ensemble: ModelEnsemble,
    /// Residual standard deviation of the MAP fit, normalized units.
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineArtifact {
    pub models: Vec<ChannelModel>,
    pub fingerprint: String,
}

impl OfflineArtifact {
    pub fn new(models: Vec<ChannelModel>) -> Self {
        let fingerprint = fingerprint(&models);
        Self { models, fingerprint }
    }

    pub fn verify(&self) -> Result<(), CognitiveError> {
        let computed = fingerprint(&self.models);
        if computed == self.fingerprint {
            Ok(())
        } else {
            Err(CognitiveError::ArtifactMismatch {
                recorded: self.fingerprint.clone(),
                computed,
            })
        }
    }
}

/// Live twin: online copies of the channel models plus the noise streams
/// used to form one-step coverage regions.
#[derive(Debug, Clone)]
pub struct OnlineTwin {
    pub models: Vec<ChannelModel>,
    evaluators: Vec<Evaluator>,
    noise: Vec<Vec<ChaCha8Rng>>,
    buf: Vec<f64>,
    row: Vec<f64>,
}

/// Point prediction and coverage region for one channel and step, raw units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneStep {
    pub point: f64,
    pub region: Region,
}

fn noise_streams(seed: u64, channel: usize, members: usize) -> Vec<ChaCha8Rng> {
    (0..members)
        .map(|m| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((channel as u64 + 1) << 32));
            rng.set_stream(m as u64 + 1);
            rng
        })
        .collect()
}

/// Copies the offline structure, MAP weights and reduced ensemble verbatim.
pub fn transfer_warm_start(artifact: &OfflineArtifact, noise_seed: u64) -> Result<OnlineTwin, CognitiveError> {
    artifact.verify()?;
    let models = artifact.models.clone();
    let evaluators = models.iter().map(|m| Evaluator::new(&m.spec)).collect();
    let noise = models
        .iter()
        .enumerate()
        .map(|(c, m)| noise_streams(noise_seed, c, m.ensemble.len()))
        .collect();
    Ok(OnlineTwin {
        models,
        evaluators,
        noise,
        buf: Vec::new(),
        row: Vec::new(),
    })
}

pub const REGION_SAMPLES: usize = 1000;

impl OnlineTwin {
    /// One-step-ahead prediction for the sample following the histories.
    /// Each member's prediction carries enough draws of the residual noise
    /// that the region rests on at least `REGION_SAMPLES` values.
    pub fn one_step(
        &mut self,
        channel: usize,
        y_hist: &[f64],
        u_hist: &[Vec<f64>],
        confidence: f64,
    ) -> OneStep {
        let m = &self.models[channel];
        let ev = &mut self.evaluators[channel];
        m.embedding.regressor(y_hist, u_hist, &m.normalization, &mut self.row);
        let out = m.normalization.output;
        let point = out.denormalize(ev.predict(&m.map.theta, &self.row));
        self.buf.clear();
        let draws = REGION_SAMPLES.div_ceil(m.ensemble.members.len().max(1));
        for (theta, rng) in m.ensemble.members.iter().zip(self.noise[channel].iter_mut()) {
            let base = ev.predict(theta, &self.row);
            for _ in 0..draws {
                let e: f64 = rng.sample(StandardNormal);
                self.buf.push(out.denormalize(base + m.noise_sigma * e));
            }
        }
        OneStep {
            point,
            region: region_of(&mut self.buf, confidence),
        }
    }

    /// One-step prediction of a frozen network, raw units.
    pub fn map_prediction(&mut self, channel: usize, y_hist: &[f64], u_hist: &[Vec<f64>]) -> f64 {
        let m = &self.models[channel];
        m.embedding.regressor(y_hist, u_hist, &m.normalization, &mut self.row);
        m.normalization.output.denormalize(self.evaluators[channel].predict(&m.map.theta, &self.row))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftCause {
    SourceIdentified,
    SourceUnknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftAction {
    RequestOfflineData,
    WaitAndCollect,
}

impl DriftCause {
    pub fn action(self) -> DriftAction {
        match self {
            DriftCause::SourceIdentified => DriftAction::RequestOfflineData,
            DriftCause::SourceUnknown => DriftAction::WaitAndCollect,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftEvent {
    pub detection_step: usize,
    pub cause: DriftCause,
    pub action: DriftAction,
    /// Channels at or above the threshold at detection.
    pub channels: Vec<String>,
    pub retrain_step: Option<usize>,
    /// Largest window count over the retrained channels MH steps after the
    /// swap (or at end of run).
    pub post_retrain_z: Option<usize>,
    /// Set when the run ended before retraining completed.
    pub truncated: bool,
}

/// Plant-side knowledge available when the drift source is identified:
/// the current state and the valve condition, including its rate of change.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftCondition {
    pub state: PlantState,
    pub inputs: PlantInputs,
    /// Valve opening change per second.
    pub valve_rate: [f64; 3],
}

/// Virtual plant plus DoE settings used to generate retraining data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineInstance {
    pub params: PlantParams,
    pub integrator: IntegratorConfig,
    pub bounds: Vec<Dimension>,
    pub n_experiments: usize,
    pub hold: usize,
    /// Horizon (s) over which a drifting valve is extrapolated.
    pub lookahead: f64,
    pub seed: u64,
}

/// Logged samples grouped into contiguous plateaus.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrainData {
    pub samples: Vec<TrajectorySample>,
    pub plateau_len: usize,
}

impl RetrainData {
    pub fn segments(&self, channel: Channel) -> Vec<Segment> {
        self.samples
            .chunks(self.plateau_len)
            .filter(|c| c.len() == self.plateau_len)
            .map(|c| samples_segment(c, channel))
            .collect()
    }

    /// Valve openings seen in the data, per plateau.
    pub fn valve_conditions(&self) -> Vec<[f64; 3]> {
        self.samples
            .chunks(self.plateau_len)
            .map(|c| c[0].inputs.valve)
            .collect()
    }
}

pub fn handle_drift(
    cause: DriftCause,
    offline: Option<&OfflineInstance>,
    condition: &DriftCondition,
    live_buffer: &[TrajectorySample],
    config: &CognitiveConfig,
    segment_len: usize,
) -> Result<RetrainData, CognitiveError> {
    match cause {
        DriftCause::SourceUnknown => {
            if live_buffer.len() < config.wait_buffer {
                return Err(CognitiveError::NotEnoughData {
                    needed: config.wait_buffer,
                    available: live_buffer.len(),
                });
            }
            Ok(RetrainData {
                samples: live_buffer[live_buffer.len() - config.wait_buffer..].to_vec(),
                plateau_len: segment_len.max(1),
            })
        }
        DriftCause::SourceIdentified => {
            let inst = offline.ok_or(CognitiveError::OfflineInstanceUnavailable)?;
            let plan = lhs_sample(inst.n_experiments, &inst.bounds, inst.seed)?;
            let mut sched = build_input_sequence(&plan, inst.hold as f64, &condition.inputs)?;
            let n = sched.plateaus.len();
            for (e, u) in sched.plateaus.iter_mut().enumerate() {
                let frac = if n > 1 { e as f64 / (n - 1) as f64 } else { 0.0 };
                for w in 0..3 {
                    let v = condition.inputs.valve[w] + condition.valve_rate[w] * inst.lookahead * frac;
                    u.valve[w] = v.clamp(0.05, 1.0);
                }
            }
            let corpus = run_schedule(&sched, &inst.params, &condition.state, &inst.integrator)?;
            Ok(RetrainData {
                samples: corpus.samples,
                plateau_len: corpus.plateau_len,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrainBudget {
    pub epochs: usize,
    pub learning_rate_factor: f64,
    pub patience: usize,
    /// Cap on training rows per member, taken at an even stride.
    pub max_rows: usize,
    pub seed: u64,
}

impl Default for RetrainBudget {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate_factor: 0.1,
            patience: 10,
            max_rows: 400,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainReport {
    pub channel: Channel,
    pub rows: usize,
    pub normalization_widened: bool,
    pub map_val_loss: f64,
    /// Normalized noise level after the retrain, never below the one it replaced.
    pub noise_sigma: f64,
    pub reset_members: Vec<usize>,
}

fn strided(rows: &[usize], cap: usize) -> Vec<usize> {
    if rows.len() <= cap || cap == 0 {
        return rows.to_vec();
    }
    let step = rows.len().div_ceil(cap);
    rows.iter().step_by(step).copied().collect()
}

/// Maps θ trained under `old` scaling onto the equivalent network under `new`.
fn rescale_to(spec: &NetworkSpec, emb: &Embedding, old: &Normalization, new: &Normalization, theta: &mut [f64]) -> Result<(), NarxError> {
    let affine = |o: &crate::structure::Range, n: &crate::structure::Range| {
        let so = o.denormalize(1.0) - o.denormalize(0.0);
        let sn = n.denormalize(1.0) - n.denormalize(0.0);
        (sn / so, (n.min - o.min) / so)
    };
    let mut scale = Vec::with_capacity(emb.width());
    let mut shift = Vec::with_capacity(emb.width());
    let (a, b) = affine(&old.output, &new.output);
    for _ in 0..emb.n_b {
        scale.push(a);
        shift.push(b);
    }
    for _ in 0..emb.n_a {
        for (o, n) in old.inputs.iter().zip(&new.inputs) {
            let (a, b) = affine(o, n);
            scale.push(a);
            shift.push(b);
        }
    }
    let so = old.output.denormalize(1.0) - old.output.denormalize(0.0);
    let sn = new.output.denormalize(1.0) - new.output.denormalize(0.0);
    reparametrize(spec, theta, &scale, &shift, so / sn, (old.output.min - new.output.min) / sn)
}

/// Fine-tunes the MAP network and every ensemble member on new data,
/// warm-started from their current weights.
pub fn online_retrain(
    model: &mut ChannelModel,
    data: &RetrainData,
    budget: &RetrainBudget,
) -> Result<RetrainReport, CognitiveError> {
    let segments = data.segments(model.channel);
    let all: Vec<usize> = (0..segments.len()).collect();
    let mut norm = model.normalization.clone();
    let widened = !segments.is_empty() && norm.widen(&Normalization::fit(&segments, &all));
    if widened {
        let old = model.normalization.clone();
        rescale_to(&model.spec, &model.embedding, &old, &norm, &mut model.map.theta)?;
        for theta in &mut model.ensemble.members {
            rescale_to(&model.spec, &model.embedding, &old, &norm, theta)?;
        }
        let so = old.output.denormalize(1.0) - old.output.denormalize(0.0);
        let sn = norm.output.denormalize(1.0) - norm.output.denormalize(0.0);
        model.noise_sigma *= so / sn;
        model.normalization = norm.clone();
    }
    let ds = assemble_narx_dataset_with(
        &segments,
        model.embedding.n_a,
        model.embedding.n_b,
        SplitRatios { train: 0.8, val: 0.2 },
        budget.seed,
        Some(&norm),
    )?;
    let train = strided(&ds.train, budget.max_rows);
    let val = strided(&ds.val, budget.max_rows);
    if train.len() < model.spec.batch_size {
        return Err(CognitiveError::NotEnoughData {
            needed: model.spec.batch_size,
            available: train.len(),
        });
    }
    let rows = TrainRows {
        train: &train,
        val: &val,
    };
    let mut spec = model.spec.clone();
    spec.learning_rate *= budget.learning_rate_factor;
    spec.patience = budget.patience;
    spec.seed = budget.seed;

    let mut state = TrainState::from_weights(model.map.clone());
    train_epochs(&mut state, &spec, &ds, rows, budget.epochs)?;
    model.map = state.best;
    let map_val_loss = state.best_val;
    if map_val_loss.is_finite() {
        model.noise_sigma = model.noise_sigma.max(map_val_loss.sqrt());
    }

    let mut reset_members = Vec::new();
    for (i, theta) in model.ensemble.members.iter_mut().enumerate() {
        let mut st = TrainState::from_weights(NetworkWeights { theta: theta.clone() });
        match train_epochs(&mut st, &spec, &ds, rows, budget.epochs) {
            Ok(()) => *theta = st.best.theta,
            Err(e) => {
                log::warn!("member {i} of {} failed to fine-tune: {e}", model.channel.name());
                *theta = model.map.theta.clone();
                reset_members.push(i);
            }
        }
    }
    Ok(RetrainReport {
        channel: model.channel,
        rows: train.len(),
        normalization_widened: widened,
        map_val_loss,
        noise_sigma: model.noise_sigma,
        reset_members,
    })
}
