//! Bayesian treatment of network weights: random-walk Metropolis sampling,
//! posterior moments, Monte Carlo propagation to coverage regions and
//! ensemble reduction.

use nalgebra::DMatrix;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::narx::{simulate_closed_loop_with, Evaluator, NarxError, NetworkSpec};
use crate::structure::{Embedding, NarxDataset, Normalization};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BayesError {
    #[error("initial point has a non-finite log posterior")]
    NonFiniteStart,
    #[error("burn-in {n_burn} is not shorter than the chain ({len})")]
    BurnInExceedsChain { n_burn: usize, len: usize },
    #[error("need at least {needed} samples, have {available}")]
    InsufficientSamples { needed: usize, available: usize },
    #[error("every ensemble member failed to simulate")]
    AllMembersFailed,
    #[error("covariance is not positive semi-definite (min eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("{0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Network(#[from] NarxError),
}

pub trait LogDensity {
    fn log_density(&mut self, theta: &[f64]) -> f64;
}

impl<F: FnMut(&[f64]) -> f64> LogDensity for F {
    fn log_density(&mut self, theta: &[f64]) -> f64 {
        self(theta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Prior {
    /// Improper flat prior over all of parameter space.
    Flat,
    /// Flat inside `center ± half_width` in every coordinate.
    Box { center: Vec<f64>, half_width: f64 },
}

impl Prior {
    pub fn log_density(&self, theta: &[f64]) -> f64 {
        match self {
            Prior::Flat => 0.0,
            Prior::Box { center, half_width } => {
                let inside = theta
                    .iter()
                    .zip(center)
                    .all(|(t, c)| (t - c).abs() <= *half_width);
                if inside {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }
}

/// Rows entering the likelihood, normalized units, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodData {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub width: usize,
}

impl LikelihoodData {
    /// Up to `max_rows` rows drawn without replacement from `rows`, kept in
    /// their original order.
    pub fn from_dataset(ds: &NarxDataset, rows: &[usize], max_rows: usize, seed: u64) -> Self {
        let picked: Vec<usize> = if rows.len() > max_rows {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample_indices(&mut rng, rows.len(), max_rows).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| rows[i]).collect()
        } else {
            rows.to_vec()
        };
        let mut x = Vec::with_capacity(picked.len() * ds.width());
        for &i in &picked {
            x.extend_from_slice(ds.row(i));
        }
        Self {
            x,
            y: picked.iter().map(|&i| ds.y[i]).collect(),
            width: ds.width(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn mse(&self, ev: &mut Evaluator, theta: &[f64]) -> f64 {
        let w = self.width;
        self.y
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let r = ev.predict(theta, &self.x[i * w..(i + 1) * w]) - t;
                r * r
            })
            .sum::<f64>()
            / self.len() as f64
    }

    pub fn residual_std(&self, ev: &mut Evaluator, theta: &[f64]) -> f64 {
        let w = self.width;
        let r: Vec<f64> = self
            .y
            .iter()
            .enumerate()
            .map(|(i, t)| ev.predict(theta, &self.x[i * w..(i + 1) * w]) - t)
            .collect();
        let n = r.len() as f64;
        let mean = r.iter().sum::<f64>() / n;
        (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt()
    }
}

/// Gaussian reading of the MSE likelihood plus the prior.
pub struct NetworkPosterior<'a> {
    pub evaluator: Evaluator,
    pub data: &'a LikelihoodData,
    pub prior: Prior,
    pub sigma: f64,
}

impl NetworkPosterior<'_> {
    pub fn new<'a>(spec: &NetworkSpec, data: &'a LikelihoodData, prior: Prior, sigma: f64) -> NetworkPosterior<'a> {
        NetworkPosterior {
            evaluator: Evaluator::new(spec),
            data,
            prior,
            sigma,
        }
    }
}

impl LogDensity for NetworkPosterior<'_> {
    fn log_density(&mut self, theta: &[f64]) -> f64 {
        let lp = self.prior.log_density(theta);
        if lp == f64::NEG_INFINITY {
            return lp;
        }
        log_posterior(self.data.mse(&mut self.evaluator, theta), self.data.len(), self.sigma) + lp
    }
}

/// −n·MSE/(2σ²); non-finite MSE maps to −∞.
pub fn log_posterior(mse: f64, n: usize, sigma: f64) -> f64 {
    if !mse.is_finite() {
        return f64::NEG_INFINITY;
    }
    -(n as f64) * mse / (2.0 * sigma * sigma)
}

/// Burn-in adaptation of the proposal scale toward an acceptance band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleTuning {
    pub n_burn: usize,
    pub batch: usize,
    pub target_low: f64,
    pub target_high: f64,
}

impl ScaleTuning {
    pub fn new(n_burn: usize) -> Self {
        Self {
            n_burn,
            batch: 50,
            target_low: 0.2,
            target_high: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    pub dim: usize,
    /// Row-major samples, one row per iteration.
    pub samples: Vec<f64>,
    pub log_posterior: Vec<f64>,
    pub accepted: Vec<bool>,
    /// Scale after burn-in tuning (the one used from then on).
    pub proposal_scale: f64,
    pub seed: u64,
    pub burn_in: usize,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.accepted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accepted.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.samples[i * self.dim..(i + 1) * self.dim]
    }

    pub fn acceptance_rate(&self, from: usize) -> f64 {
        let tail = &self.accepted[from.min(self.len())..];
        if tail.is_empty() {
            return 0.0;
        }
        tail.iter().filter(|a| **a).count() as f64 / tail.len() as f64
    }
}

/// Metropolis acceptance: a pure function of the two log densities and the
/// uniform draw.
#[inline]
pub fn metropolis_accept(current: f64, proposal: f64, uniform: f64) -> bool {
    if proposal.is_nan() {
        return false;
    }
    proposal >= current || uniform.ln() < proposal - current
}

/// Random-walk Metropolis with isotropic Gaussian proposals.
pub fn mcmc_sample<T: LogDensity>(
    init: &[f64],
    target: &mut T,
    n_samples: usize,
    proposal_scale: f64,
    tuning: Option<ScaleTuning>,
    seed: u64,
) -> Result<Chain, BayesError> {
    if n_samples == 0 {
        return Err(BayesError::InvalidArgument("n_samples must be >= 1".into()));
    }
    if !(proposal_scale >= 0.0) {
        return Err(BayesError::InvalidArgument("proposal scale must be >= 0".into()));
    }
    let dim = init.len();
    let mut current = init.to_vec();
    let mut lp = target.log_density(&current);
    if !lp.is_finite() {
        return Err(BayesError::NonFiniteStart);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scale = proposal_scale;
    let mut samples = Vec::with_capacity(n_samples * dim);
    let mut log_post = Vec::with_capacity(n_samples);
    let mut accepted = Vec::with_capacity(n_samples);
    let mut proposal = vec![0.0; dim];
    let mut batch_acc = 0usize;
    for it in 0..n_samples {
        for (p, c) in proposal.iter_mut().zip(&current) {
            let z: f64 = rng.sample(StandardNormal);
            *p = c + scale * z;
        }
        let lp_new = target.log_density(&proposal);
        let u: f64 = rng.random();
        let acc = metropolis_accept(lp, lp_new, u);
        if acc {
            std::mem::swap(&mut current, &mut proposal);
            lp = lp_new;
            batch_acc += 1;
        }
        samples.extend_from_slice(&current);
        log_post.push(lp);
        accepted.push(acc);
        if let Some(t) = tuning {
            if it < t.n_burn && (it + 1) % t.batch == 0 {
                let rate = batch_acc as f64 / t.batch as f64;
                let mid = 0.5 * (t.target_low + t.target_high);
                if rate < t.target_low || rate > t.target_high {
                    // multiplicative correction proportional to the miss
                    scale *= ((rate - mid) * 2.0).exp().clamp(0.5, 2.0);
                }
            }
            if (it + 1) % t.batch == 0 {
                batch_acc = 0;
            }
        }
    }
    Ok(Chain {
        dim,
        samples,
        log_posterior: log_post,
        accepted,
        proposal_scale: scale,
        seed,
        burn_in: tuning.map_or(0, |t| t.n_burn),
    })
}

/// Post-burn-in samples, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub dim: usize,
    pub data: Vec<f64>,
    /// Chain index of each retained sample.
    pub chain_index: Vec<usize>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.chain_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chain_index.is_empty()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        Self {
            dim,
            data: rows.iter().flatten().copied().collect(),
            chain_index: (0..rows.len()).collect(),
        }
    }
}

pub fn burn_in_trim(chain: &Chain, n_burn: usize) -> Result<SampleSet, BayesError> {
    if n_burn >= chain.len() {
        return Err(BayesError::BurnInExceedsChain {
            n_burn,
            len: chain.len(),
        });
    }
    Ok(SampleSet {
        dim: chain.dim,
        data: chain.samples[n_burn * chain.dim..].to_vec(),
        chain_index: (n_burn..chain.len()).collect(),
    })
}

/// Keeps `n` samples evenly spaced through the set (the last one included).
pub fn thin(set: &SampleSet, n: usize) -> SampleSet {
    if n >= set.len() || n == 0 {
        return set.clone();
    }
    let step = set.len() as f64 / n as f64;
    let picks: Vec<usize> = (0..n)
        .map(|k| (set.len() - 1) - ((n - 1 - k) as f64 * step).floor() as usize)
        .collect();
    SampleSet {
        dim: set.dim,
        data: picks.iter().flat_map(|&i| set.get(i).iter().copied()).collect(),
        chain_index: picks.iter().map(|&i| set.chain_index[i]).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub theta_hat: Vec<f64>,
    /// Row-major covariance.
    pub covariance: Vec<f64>,
    pub dim: usize,
}

impl PosteriorSummary {
    pub fn cov(&self, i: usize, j: usize) -> f64 {
        self.covariance[i * self.dim + j]
    }

    pub fn max_asymmetry(&self) -> f64 {
        let d = self.dim;
        let mut worst: f64 = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                worst = worst.max((self.cov(i, j) - self.cov(j, i)).abs());
            }
        }
        worst
    }

    /// Smallest eigenvalue of the covariance.
    pub fn min_eigenvalue(&self) -> f64 {
        if self.dim == 0 {
            return 0.0;
        }
        let m = DMatrix::from_row_slice(self.dim, self.dim, &self.covariance);
        m.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Symmetry and PSD check with the numerical floor.
    pub fn check(&self) -> Result<(), BayesError> {
        if self.max_asymmetry() > 0.0 {
            return Err(BayesError::InvalidArgument("covariance is not symmetric".into()));
        }
        let scale = (0..self.dim).map(|i| self.cov(i, i)).fold(0.0, f64::max).max(1.0);
        let min = self.min_eigenvalue();
        if min < -1e-10 * scale {
            return Err(BayesError::NotPsd(min));
        }
        Ok(())
    }
}

/// Sample mean and unbiased sample covariance.
pub fn posterior_stats(samples: &SampleSet) -> Result<PosteriorSummary, BayesError> {
    let n = samples.len();
    if n < 2 {
        return Err(BayesError::InsufficientSamples {
            needed: 2,
            available: n,
        });
    }
    let d = samples.dim;
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(samples.get(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred = DMatrix::from_fn(n, d, |i, j| samples.get(i)[j] - mean[j]);
    let cov = (centred.transpose() * &centred) / (n as f64 - 1.0);
    let mut covariance = vec![0.0; d * d];
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)];
            covariance[i * d + j] = v;
            covariance[j * d + i] = v;
        }
    }
    Ok(PosteriorSummary {
        theta_hat: mean,
        covariance,
        dim: d,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEnsemble {
    pub members: Vec<Vec<f64>>,
    /// Chain index of each member.
    pub chain_index: Vec<usize>,
    pub chain_fingerprint: String,
}

impl ModelEnsemble {
    pub fn from_samples(set: &SampleSet, fingerprint: &str) -> Self {
        Self {
            members: (0..set.len()).map(|i| set.get(i).to_vec()).collect(),
            chain_index: set.chain_index.clone(),
            chain_fingerprint: fingerprint.to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn subset(&self, picks: &[usize]) -> Self {
        Self {
            members: picks.iter().map(|&i| self.members[i].clone()).collect(),
            chain_index: picks.iter().map(|&i| self.chain_index[i]).collect(),
            chain_fingerprint: self.chain_fingerprint.clone(),
        }
    }
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub lower: f64,
    pub upper: f64,
    pub median: f64,
    pub spread: f64,
}

impl Region {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

/// Quantile region of a set of member predictions.
pub fn region_of(values: &mut [f64], confidence: f64) -> Region {
    values.sort_unstable_by(f64::total_cmp);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let lower = quantile_sorted(values, (1.0 - confidence) / 2.0);
    let upper = quantile_sorted(values, (1.0 + confidence) / 2.0);
    Region {
        lower,
        upper: upper.max(lower),
        median: quantile_sorted(values, 0.5),
        spread: var.sqrt(),
    }
}

fn check_confidence(c: f64) -> Result<(), BayesError> {
    if c > 0.0 && c < 1.0 {
        Ok(())
    } else {
        Err(BayesError::InvalidArgument(format!(
            "confidence must lie in (0, 1), got {c}"
        )))
    }
}

/// Additive residual e(t) of the stochastic NARX model, drawn per member.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualNoise {
    /// Standard deviation in normalized output units; zero disables it.
    pub sigma: f64,
    pub seed: u64,
}

impl ResidualNoise {
    pub fn none() -> Self {
        Self { sigma: 0.0, seed: 0 }
    }

    /// Independent stream for one member.
    pub fn stream(&self, member: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(member as u64 + 1);
        rng
    }
}

/// Free-run trajectories of every member, raw units. Members whose
/// simulation fails are dropped with a warning.
pub fn member_trajectories(
    ensemble: &ModelEnsemble,
    spec: &NetworkSpec,
    embedding: &Embedding,
    norm: &Normalization,
    initial: &[f64],
    exogenous: &[Vec<f64>],
    noise: ResidualNoise,
) -> Result<Vec<Vec<f64>>, BayesError> {
    if ensemble.is_empty() {
        return Err(BayesError::InvalidArgument("empty ensemble".into()));
    }
    let mut ev = Evaluator::new(spec);
    let mut out = Vec::with_capacity(ensemble.len());
    for (m, theta) in ensemble.members.iter().enumerate() {
        let mut rng = noise.stream(m);
        let draw = |_| {
            if noise.sigma > 0.0 {
                noise.sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            }
        };
        match simulate_closed_loop_with(theta, &mut ev, embedding, norm, initial, exogenous, draw) {
            Ok(tr) if tr.iter().all(|v| v.is_finite()) => out.push(tr),
            Ok(_) => log::warn!("ensemble member {m} diverged in free run; dropped"),
            Err(e @ NarxError::ShapeMismatch { .. }) => return Err(e.into()),
            Err(e) => log::warn!("ensemble member {m} failed: {e}; dropped"),
        }
    }
    if out.is_empty() {
        return Err(BayesError::AllMembersFailed);
    }
    Ok(out)
}

/// Per-step regions across member trajectories.
pub fn regions_from_trajectories(trajectories: &[Vec<f64>], confidence: f64) -> Vec<Region> {
    let len = trajectories.first().map_or(0, Vec::len);
    let mut buf = vec![0.0; trajectories.len()];
    (0..len)
        .map(|t| {
            for (b, tr) in buf.iter_mut().zip(trajectories) {
                *b = tr[t];
            }
            region_of(&mut buf, confidence)
        })
        .collect()
}

/// Monte Carlo propagation of the ensemble through a free run.
pub fn propagate_uncertainty(
    ensemble: &ModelEnsemble,
    spec: &NetworkSpec,
    embedding: &Embedding,
    norm: &Normalization,
    initial: &[f64],
    exogenous: &[Vec<f64>],
    confidence: f64,
    noise: ResidualNoise,
) -> Result<Vec<Region>, BayesError> {
    check_confidence(confidence)?;
    let tr = member_trajectories(ensemble, spec, embedding, norm, initial, exogenous, noise)?;
    Ok(regions_from_trajectories(&tr, confidence))
}

/// A free-run validation or test sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub initial: Vec<f64>,
    pub exogenous: Vec<Vec<f64>>,
    /// Measured outputs for the predicted samples.
    pub measured: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionReport {
    pub full_size: usize,
    pub tested_sizes: Vec<usize>,
    pub width_ratio: Vec<f64>,
    pub inflection_size: Option<usize>,
    pub chosen_size: usize,
    pub chosen_width_ratio: f64,
    pub degeneration_tol: f64,
    pub safety_factor: f64,
}

fn mean_width(
    ensemble: &ModelEnsemble,
    spec: &NetworkSpec,
    sequences: &[(Sequence, Embedding, Normalization)],
    confidence: f64,
    noise: ResidualNoise,
) -> Result<f64, BayesError> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (s, emb, norm) in sequences {
        let regions = propagate_uncertainty(ensemble, spec, emb, norm, &s.initial, &s.exogenous, confidence, noise)?;
        total += regions.iter().map(Region::width).sum::<f64>();
        n += regions.len();
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

fn ratio(w: f64, full: f64) -> f64 {
    if full > 0.0 {
        w / full
    } else {
        1.0
    }
}

fn random_subset(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx = sample_indices(rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReductionSettings {
    pub degeneration_tol: f64,
    pub safety_factor: f64,
    pub confidence: f64,
    pub noise: ResidualNoise,
    pub seed: u64,
}

impl Default for ReductionSettings {
    fn default() -> Self {
        Self {
            degeneration_tol: 0.1,
            safety_factor: 1.25,
            confidence: 0.95,
            noise: ResidualNoise::none(),
            seed: 0,
        }
    }
}

/// Sensitivity sweep over sub-ensemble sizes. The inflection size is the
/// smallest tested size whose mean region width stays within
/// `degeneration_tol` of the full ensemble; the returned ensemble has
/// `ceil(safety_factor * inflection)` members.
pub fn reduce_ensemble(
    full: &ModelEnsemble,
    spec: &NetworkSpec,
    sequences: &[(Sequence, Embedding, Normalization)],
    sizes: &[usize],
    settings: ReductionSettings,
) -> Result<(ModelEnsemble, ReductionReport), BayesError> {
    check_confidence(settings.confidence)?;
    if sizes.is_empty() || sizes.windows(2).any(|w| w[0] <= w[1]) {
        return Err(BayesError::InvalidArgument(
            "sizes must be non-empty and strictly descending".into(),
        ));
    }
    if sizes[0] > full.len() || *sizes.last().unwrap() == 0 {
        return Err(BayesError::InvalidArgument(format!(
            "sizes must lie in 1..={}",
            full.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let w_full = mean_width(full, spec, sequences, settings.confidence, settings.noise)?;
    let mut width_ratio = Vec::with_capacity(sizes.len());
    for &k in sizes {
        let sub = if k == full.len() {
            full.clone()
        } else {
            full.subset(&random_subset(full.len(), k, &mut rng))
        };
        width_ratio.push(ratio(mean_width(&sub, spec, sequences, settings.confidence, settings.noise)?, w_full));
    }
    let threshold = 1.0 - settings.degeneration_tol;
    let inflection = sizes
        .iter()
        .zip(&width_ratio)
        .filter(|(_, r)| **r >= threshold)
        .map(|(k, _)| *k)
        .min();
    let (chosen, chosen_ratio) = match inflection {
        Some(k) => {
            let chosen = ((settings.safety_factor * k as f64).ceil() as usize).min(full.len());
            let sub = if chosen == full.len() {
                full.clone()
            } else {
                full.subset(&random_subset(full.len(), chosen, &mut rng))
            };
            let r = ratio(mean_width(&sub, spec, sequences, settings.confidence, settings.noise)?, w_full);
            (sub, r)
        }
        None => {
            log::warn!("no tested ensemble size keeps the region width; keeping the full ensemble");
            (full.clone(), 1.0)
        }
    };
    let report = ReductionReport {
        full_size: full.len(),
        tested_sizes: sizes.to_vec(),
        width_ratio,
        inflection_size: inflection,
        chosen_size: chosen.len(),
        chosen_width_ratio: chosen_ratio,
        degeneration_tol: settings.degeneration_tol,
        safety_factor: settings.safety_factor,
    };
    Ok((chosen, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_fit_has_zero_log_posterior() {
        assert_eq!(log_posterior(0.0, 100, 0.1), 0.0);
        assert_eq!(log_posterior(f64::NAN, 100, 0.1), f64::NEG_INFINITY);
    }

    #[test]
    fn doubling_residuals_quadruples_misfit() {
        let a = log_posterior(0.01, 50, 0.2);
        let b = log_posterior(0.04, 50, 0.2);
        assert!((b - 4.0 * a).abs() < 1e-12);
    }

    #[test]
    fn zero_scale_chain_is_constant() {
        let mut target = |t: &[f64]| -t[0] * t[0];
        let chain = mcmc_sample(&[0.3, 1.0], &mut target, 200, 0.0, None, 4).unwrap();
        for i in 0..chain.len() {
            assert_eq!(chain.sample(i), &[0.3, 1.0]);
        }
    }

    #[test]
    fn flat_target_accepts_everything() {
        let mut target = |_: &[f64]| 0.0;
        let chain = mcmc_sample(&[0.0; 3], &mut target, 500, 1.0, None, 1).unwrap();
        assert_eq!(chain.acceptance_rate(0), 1.0);
    }

    #[test]
    fn infinite_start_rejected() {
        let mut target = |_: &[f64]| f64::NEG_INFINITY;
        assert_eq!(
            mcmc_sample(&[0.0], &mut target, 10, 1.0, None, 1).unwrap_err(),
            BayesError::NonFiniteStart
        );
    }

    fn chain_of(n: usize) -> Chain {
        let mut target = |t: &[f64]| -0.5 * t[0] * t[0];
        mcmc_sample(&[0.0], &mut target, n, 1.0, None, 9).unwrap()
    }

    #[test]
    fn burn_in_lengths() {
        let chain = chain_of(50);
        assert_eq!(burn_in_trim(&chain, 0).unwrap().len(), 50);
        assert_eq!(burn_in_trim(&chain, 49).unwrap().len(), 1);
        assert_eq!(
            burn_in_trim(&chain, 50).unwrap_err(),
            BayesError::BurnInExceedsChain { n_burn: 50, len: 50 }
        );
    }

    #[test]
    fn hand_moments() {
        let set = SampleSet::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]);
        let s = posterior_stats(&set).unwrap();
        assert_eq!(s.theta_hat, vec![2.0]);
        assert_eq!(s.covariance, vec![1.0]);
        let same = SampleSet::from_rows(&vec![vec![1.5, -2.0]; 4]);
        let s = posterior_stats(&same).unwrap();
        assert!(s.covariance.iter().all(|v| *v == 0.0));
        assert!(matches!(
            posterior_stats(&SampleSet::from_rows(&[vec![1.0]])),
            Err(BayesError::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn thinning_keeps_last_sample() {
        let set = SampleSet::from_rows(&(0..10).map(|i| vec![i as f64]).collect::<Vec<_>>());
        let t = thin(&set, 4);
        assert_eq!(t.len(), 4);
        assert_eq!(*t.chain_index.last().unwrap(), 9);
        assert!(t.chain_index.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn quantile_interpolation() {
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.5), 2.0);
        assert_eq!(quantile_sorted(&v, 0.125), 0.5);
        assert_eq!(quantile_sorted(&[7.0], 0.9), 7.0);
    }

    #[test]
    fn degenerate_region_has_zero_width() {
        let mut v = vec![1.25; 10];
        let r = region_of(&mut v, 0.95);
        assert_eq!((r.lower, r.upper, r.median, r.spread), (1.25, 1.25, 1.25, 0.0));
    }
}
