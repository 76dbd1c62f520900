//! Hyperband search over MISO network architectures with successive halving
//! and checkpoint reuse between rungs.

use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::narx::{train_epochs, Activation, LayerSpec, NetworkSpec, TrainRows, TrainState};
use crate::structure::NarxDataset;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HyperbandError {
    #[error("invalid hyperband config: R={max_resource}, eta={eta} (need R >= eta >= 2)")]
    InvalidConfig { max_resource: usize, eta: usize },
    #[error("empty search space: {0}")]
    EmptySpace(&'static str),
    #[error("dataset has no validation rows")]
    NoValidation,
    #[error("every trial failed")]
    AllTrialsFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub learning_rates: Vec<f64>,
    pub min_layers: usize,
    pub max_layers: usize,
    pub activations: Vec<Activation>,
    pub widths: Vec<usize>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            learning_rates: vec![1e-3, 1e-2, 1e-1],
            min_layers: 1,
            max_layers: 4,
            activations: vec![Activation::Relu, Activation::Tanh],
            widths: (20..=100).step_by(10).collect(),
        }
    }
}

impl SearchSpace {
    fn validate(&self) -> Result<(), HyperbandError> {
        if self.learning_rates.is_empty() {
            return Err(HyperbandError::EmptySpace("learning_rates"));
        }
        if self.activations.is_empty() {
            return Err(HyperbandError::EmptySpace("activations"));
        }
        if self.widths.is_empty() {
            return Err(HyperbandError::EmptySpace("widths"));
        }
        if self.min_layers == 0 || self.min_layers > self.max_layers {
            return Err(HyperbandError::EmptySpace("layer count"));
        }
        Ok(())
    }

    pub fn contains(&self, spec: &NetworkSpec) -> bool {
        let (hidden, out) = spec.layers.split_at(spec.layers.len().saturating_sub(1));
        let out_ok = out.len() == 1 && out[0].width == 1 && out[0].activation == Activation::Linear;
        out_ok
            && (self.min_layers..=self.max_layers).contains(&hidden.len())
            && self.learning_rates.contains(&spec.learning_rate)
            && hidden
                .iter()
                .all(|l| self.widths.contains(&l.width) && self.activations.contains(&l.activation))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperbandConfig {
    /// Maximum epochs granted to a single configuration.
    pub max_resource: usize,
    pub eta: usize,
    pub seed: u64,
}

impl Default for HyperbandConfig {
    fn default() -> Self {
        Self {
            max_resource: 27,
            eta: 3,
            seed: 0,
        }
    }
}

impl HyperbandConfig {
    pub fn validate(&self) -> Result<(), HyperbandError> {
        if self.eta < 2 || self.max_resource < self.eta {
            return Err(HyperbandError::InvalidConfig {
                max_resource: self.max_resource,
                eta: self.eta,
            });
        }
        Ok(())
    }

    /// Largest s with eta^s <= R.
    pub fn s_max(&self) -> usize {
        let mut s = 0;
        let mut p = self.eta;
        while p <= self.max_resource {
            s += 1;
            p *= self.eta;
        }
        s
    }

    pub fn schedule(&self) -> Result<Vec<BracketPlan>, HyperbandError> {
        self.validate()?;
        let s_max = self.s_max();
        Ok((0..=s_max)
            .rev()
            .map(|s| {
                let eta_s = self.eta.pow(s as u32);
                let n = ((s_max + 1) * eta_s).div_ceil(s + 1);
                let mut rungs = Vec::with_capacity(s + 1);
                let mut count = n;
                for i in 0..=s {
                    let epochs = (self.max_resource * self.eta.pow(i as u32) / eta_s).max(1);
                    rungs.push(RungPlan { configs: count, epochs });
                    count /= self.eta;
                }
                BracketPlan { s, n_configs: n, rungs }
            })
            .collect())
    }

    /// Upper bound on the epochs a full search may consume.
    pub fn budget(&self) -> usize {
        let k = self.s_max() + 1;
        k * k * self.max_resource
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RungPlan {
    pub configs: usize,
    /// Cumulative epochs each configuration has received after this rung.
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BracketPlan {
    pub s: usize,
    pub n_configs: usize,
    pub rungs: Vec<RungPlan>,
}

/// Training settings shared by every sampled configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialTemplate {
    pub input_width: usize,
    pub batch_size: usize,
    pub patience: usize,
}

pub fn sample_config(
    space: &SearchSpace,
    template: &TrialTemplate,
    seed: u64,
    rng: &mut impl Rng,
) -> Result<NetworkSpec, HyperbandError> {
    space.validate()?;
    let lr = *space.learning_rates.choose(rng).expect("validated");
    let depth = rng.random_range(space.min_layers..=space.max_layers);
    let hidden: Vec<LayerSpec> = (0..depth)
        .map(|_| LayerSpec {
            width: *space.widths.choose(rng).expect("validated"),
            activation: *space.activations.choose(rng).expect("validated"),
        })
        .collect();
    let mut spec = NetworkSpec::miso(template.input_width, &hidden, lr, seed);
    spec.batch_size = template.batch_size;
    spec.patience = template.patience;
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub bracket: usize,
    pub rung: usize,
    pub spec: NetworkSpec,
    pub epochs: usize,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperbandOutcome {
    pub best: NetworkSpec,
    pub best_val_loss: f64,
    pub best_trial: usize,
    pub trials: Vec<TrialRecord>,
    pub schedule: Vec<BracketPlan>,
    pub epochs_consumed: usize,
}

impl HyperbandOutcome {
    pub fn ledger_csv(&self) -> String {
        let mut s = String::from("bracket,rung,trial,layers,learning_rate,epochs,val_loss\n");
        for t in &self.trials {
            let layers: Vec<String> = t.spec.layers[..t.spec.layers.len() - 1]
                .iter()
                .map(|l| format!("{}{}", l.width, l.activation.name()))
                .collect();
            let _ = writeln!(
                s,
                "{},{},{},{},{:?},{},{:?}",
                t.bracket,
                t.rung,
                t.trial,
                layers.join("-"),
                t.spec.learning_rate,
                t.epochs,
                t.val_loss
            );
        }
        s
    }
}

fn trial_seed(seed: u64, trial: usize) -> u64 {
    let mut z = seed ^ (trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Live {
    trial: usize,
    spec: NetworkSpec,
    state: Option<TrainState>,
    loss: f64,
}

/// Keeps the `keep` lowest-loss trials, ties broken by trial id.
pub fn survivors(losses: &[(usize, f64)], keep: usize) -> Vec<usize> {
    let mut order: Vec<(usize, f64)> = losses.to_vec();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    order.into_iter().take(keep).map(|(t, _)| t).collect()
}

pub fn hyperband(
    dataset: &NarxDataset,
    rows: TrainRows<'_>,
    space: &SearchSpace,
    template: &TrialTemplate,
    config: &HyperbandConfig,
) -> Result<HyperbandOutcome, HyperbandError> {
    space.validate()?;
    if rows.val.is_empty() {
        return Err(HyperbandError::NoValidation);
    }
    let schedule = config.schedule()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trials = Vec::new();
    let mut next_id = 0;
    let mut consumed = 0;
    for bracket in &schedule {
        let mut live: Vec<Live> = Vec::with_capacity(bracket.n_configs);
        for _ in 0..bracket.n_configs {
            let spec = sample_config(space, template, trial_seed(config.seed, next_id), &mut rng)?;
            live.push(Live {
                trial: next_id,
                state: Some(TrainState::new(&spec)),
                spec,
                loss: f64::INFINITY,
            });
            next_id += 1;
        }
        for (rung, plan) in bracket.rungs.iter().enumerate() {
            for t in live.iter_mut() {
                if let Some(state) = t.state.as_mut() {
                    let before = state.epochs_done;
                    let more = plan.epochs.saturating_sub(before);
                    match train_epochs(state, &t.spec, dataset, rows, more) {
                        Ok(()) => t.loss = state.best_val,
                        Err(e) => {
                            log::warn!("trial {} failed: {e}", t.trial);
                            t.loss = f64::INFINITY;
                        }
                    }
                    consumed += state.epochs_done - before;
                    if !t.loss.is_finite() {
                        t.state = None;
                    }
                }
                trials.push(TrialRecord {
                    trial: t.trial,
                    bracket: bracket.s,
                    rung,
                    spec: t.spec.clone(),
                    epochs: plan.epochs,
                    val_loss: t.loss,
                });
            }
            if rung + 1 < bracket.rungs.len() {
                let keep = live.len() / config.eta;
                let losses: Vec<(usize, f64)> = live.iter().map(|t| (t.trial, t.loss)).collect();
                let kept = survivors(&losses, keep);
                live.retain(|t| kept.contains(&t.trial));
                live.sort_by_key(|t| kept.iter().position(|&k| k == t.trial));
            }
        }
    }
    let best = trials
        .iter()
        .filter(|t| t.val_loss.is_finite())
        .min_by(|a, b| a.val_loss.total_cmp(&b.val_loss).then(a.trial.cmp(&b.trial)))
        .ok_or(HyperbandError::AllTrialsFailed)?;
    Ok(HyperbandOutcome {
        best: best.spec.clone(),
        best_val_loss: best.val_loss,
        best_trial: best.trial,
        trials: trials.clone(),
        schedule,
        epochs_consumed: consumed,
    })
}

/// Single-hidden-layer relu architecture with learning rate 1e-3, the
/// baseline the search result is compared against.
pub fn reference_spec(hidden_width: usize, template: &TrialTemplate, seed: u64) -> NetworkSpec {
    let mut spec = NetworkSpec::miso(
        template.input_width,
        &[LayerSpec {
            width: hidden_width,
            activation: Activation::Relu,
        }],
        1e-3,
        seed,
    );
    spec.batch_size = template.batch_size;
    spec.patience = template.patience;
    spec
}

/// Hidden width of the baseline architecture for each output channel, in
/// channel order (well1 mg, well1 ml, ..., well3 ml).
pub const REFERENCE_WIDTHS: [usize; 6] = [60, 60, 40, 70, 60, 60];
