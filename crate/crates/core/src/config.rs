//! Run configuration: a flat `key = value` file with `#` comments. Every key
//! has a documented default; unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::digest;

/// Environment variable naming the default configuration file.
pub const CONFIG_ENV: &str = "GASLIFT_CONFIG";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { key: String, line: usize },
    #[error("line {line}: `{key}` expects {expected}, got `{value}`")]
    TypeMismatch {
        key: String,
        expected: &'static str,
        value: String,
        line: usize,
    },
    #[error("`{key}` out of range: {reason}")]
    RangeViolation { key: String, reason: String },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("cannot read config {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub data_dir: PathBuf,
    pub artifact_dir: PathBuf,
    pub report_dir: PathBuf,

    pub theta_res: f64,
    pub theta_top: f64,
    pub measurement_noise: f64,
    pub initial_fill: f64,

    pub doe_n: usize,
    pub doe_hold: usize,
    pub doe_seed: u64,

    pub structure_n_max: usize,
    pub structure_plateau_tol: f64,
    pub structure_max_rows: usize,
    pub structure_p_fraction: f64,
    pub structure_seed: u64,

    pub split_train: f64,
    pub split_val: f64,
    pub split_seed: u64,

    pub train_epochs: usize,
    pub train_patience: usize,
    pub train_batch_size: usize,
    pub train_lr_decay: f64,
    pub train_seed: u64,

    pub tune_max_resource: usize,
    pub tune_eta: usize,
    pub tune_patience: usize,
    pub tune_seed: u64,

    pub mcmc_samples: usize,
    pub mcmc_burn_in: usize,
    pub mcmc_proposal: f64,
    pub mcmc_likelihood_rows: usize,
    pub mcmc_prior_half_width: f64,
    pub mcmc_ensemble: usize,
    pub mcmc_seed: u64,

    pub reduce_sizes: Vec<usize>,
    pub reduce_degeneration_tol: f64,
    pub reduce_safety_factor: f64,
    pub reduce_confidence: f64,
    pub reduce_seed: u64,

    pub cognitive_mh: usize,
    pub cognitive_a: usize,
    pub cognitive_ct: usize,
    pub cognitive_confidence: f64,
    pub cognitive_wait_buffer: usize,

    pub online_epochs: usize,
    pub online_lr_factor: f64,
    pub online_patience: usize,
    pub online_max_rows: usize,
    pub online_experiments: usize,
    pub online_hold: usize,
    pub online_lookahead: f64,
    pub online_seed: u64,

    pub sil_scenarios: Vec<usize>,
    pub sil_settle: usize,
    pub sil_segment_len: usize,
    pub sil_seed: u64,
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            profile: Profile::Desk,
            data_dir: "data".into(),
            artifact_dir: "artifacts".into(),
            report_dir: "reports".into(),
            theta_res: 6.0e-6,
            theta_top: 4.0e-5,
            measurement_noise: 0.0,
            initial_fill: 0.8,
            doe_n: 200,
            doe_hold: 100,
            doe_seed: 1,
            structure_n_max: 8,
            structure_plateau_tol: 0.05,
            structure_max_rows: 2000,
            structure_p_fraction: 0.015,
            structure_seed: 5,
            split_train: 0.70,
            split_val: 0.15,
            split_seed: 7,
            train_epochs: 200,
            train_patience: 20,
            train_batch_size: 32,
            train_lr_decay: 0.1,
            train_seed: 3,
            tune_max_resource: 27,
            tune_eta: 3,
            tune_patience: 10,
            tune_seed: 11,
            mcmc_samples: 5000,
            mcmc_burn_in: 1000,
            mcmc_proposal: 1.0e-3,
            mcmc_likelihood_rows: 2000,
            mcmc_prior_half_width: 10.0,
            mcmc_ensemble: 1000,
            mcmc_seed: 13,
            reduce_sizes: vec![1000, 500, 250, 125, 64, 32, 16, 8, 4, 2],
            reduce_degeneration_tol: 0.1,
            reduce_safety_factor: 1.25,
            reduce_confidence: 0.95,
            reduce_seed: 17,
            cognitive_mh: 100,
            cognitive_a: 1,
            cognitive_ct: 5,
            cognitive_confidence: 0.95,
            cognitive_wait_buffer: 5000,
            online_epochs: 50,
            online_lr_factor: 0.1,
            online_patience: 10,
            online_max_rows: 400,
            online_experiments: 30,
            online_hold: 100,
            online_lookahead: 100.0,
            online_seed: 19,
            sil_scenarios: vec![1, 2, 3],
            sil_settle: 600,
            sil_segment_len: 100,
            sil_seed: 23,
        }
    }

    pub fn full() -> Self {
        Self {
            profile: Profile::Full,
            doe_n: 4000,
            mcmc_samples: 50_000,
            mcmc_burn_in: 10_000,
            ..Self::desk()
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Full => Self::full(),
        }
    }

    /// Parses a configuration text. `profile` may appear anywhere; it
    /// selects the defaults the other keys override.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            entries.push((k.trim().to_string(), v.trim().to_string(), i + 1));
        }
        let mut cfg = Self::desk();
        if let Some((_, v, line)) = entries.iter().rev().find(|(k, _, _)| k == "profile") {
            cfg = Self::for_profile(parse_profile(v, *line)?);
        }
        for (k, v, line) in &entries {
            cfg.set(k, v, *line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str, line: usize) -> Result<(), ConfigError> {
        match key {
            "profile" => self.profile = parse_profile(v, line)?,
            "paths.data_dir" => self.data_dir = v.into(),
            "paths.artifact_dir" => self.artifact_dir = v.into(),
            "paths.report_dir" => self.report_dir = v.into(),
            "plant.theta_res" => self.theta_res = num(key, v, line)?,
            "plant.theta_top" => self.theta_top = num(key, v, line)?,
            "plant.measurement_noise" => self.measurement_noise = num(key, v, line)?,
            "plant.initial_fill" => self.initial_fill = num(key, v, line)?,
            "doe.n" => self.doe_n = num(key, v, line)?,
            "doe.hold" => self.doe_hold = num(key, v, line)?,
            "doe.seed" => self.doe_seed = num(key, v, line)?,
            "structure.n_max" => self.structure_n_max = num(key, v, line)?,
            "structure.plateau_tol" => self.structure_plateau_tol = num(key, v, line)?,
            "structure.max_rows" => self.structure_max_rows = num(key, v, line)?,
            "structure.p_fraction" => self.structure_p_fraction = num(key, v, line)?,
            "structure.seed" => self.structure_seed = num(key, v, line)?,
            "split.train" => self.split_train = num(key, v, line)?,
            "split.val" => self.split_val = num(key, v, line)?,
            "split.seed" => self.split_seed = num(key, v, line)?,
            "train.epochs" => self.train_epochs = num(key, v, line)?,
            "train.patience" => self.train_patience = num(key, v, line)?,
            "train.batch_size" => self.train_batch_size = num(key, v, line)?,
            "train.lr_decay" => self.train_lr_decay = num(key, v, line)?,
            "train.seed" => self.train_seed = num(key, v, line)?,
            "tune.R" => self.tune_max_resource = num(key, v, line)?,
            "tune.eta" => self.tune_eta = num(key, v, line)?,
            "tune.patience" => self.tune_patience = num(key, v, line)?,
            "tune.seed" => self.tune_seed = num(key, v, line)?,
            "mcmc.samples" => self.mcmc_samples = num(key, v, line)?,
            "mcmc.burn_in" => self.mcmc_burn_in = num(key, v, line)?,
            "mcmc.proposal" => self.mcmc_proposal = num(key, v, line)?,
            "mcmc.likelihood_rows" => self.mcmc_likelihood_rows = num(key, v, line)?,
            "mcmc.prior_half_width" => self.mcmc_prior_half_width = num(key, v, line)?,
            "mcmc.ensemble" => self.mcmc_ensemble = num(key, v, line)?,
            "mcmc.seed" => self.mcmc_seed = num(key, v, line)?,
            "reduce.sizes" => self.reduce_sizes = list(key, v, line)?,
            "reduce.degeneration_tol" => self.reduce_degeneration_tol = num(key, v, line)?,
            "reduce.safety_factor" => self.reduce_safety_factor = num(key, v, line)?,
            "reduce.confidence" => self.reduce_confidence = num(key, v, line)?,
            "reduce.seed" => self.reduce_seed = num(key, v, line)?,
            "cognitive.MH" => self.cognitive_mh = num(key, v, line)?,
            "cognitive.a" => self.cognitive_a = num(key, v, line)?,
            "cognitive.CT" => self.cognitive_ct = num(key, v, line)?,
            "cognitive.confidence" => self.cognitive_confidence = num(key, v, line)?,
            "cognitive.wait_buffer" => self.cognitive_wait_buffer = num(key, v, line)?,
            "online.epochs" => self.online_epochs = num(key, v, line)?,
            "online.lr_factor" => self.online_lr_factor = num(key, v, line)?,
            "online.patience" => self.online_patience = num(key, v, line)?,
            "online.max_rows" => self.online_max_rows = num(key, v, line)?,
            "online.experiments" => self.online_experiments = num(key, v, line)?,
            "online.hold" => self.online_hold = num(key, v, line)?,
            "online.lookahead" => self.online_lookahead = num(key, v, line)?,
            "online.seed" => self.online_seed = num(key, v, line)?,
            "sil.scenarios" => self.sil_scenarios = list(key, v, line)?,
            "sil.settle" => self.sil_settle = num(key, v, line)?,
            "sil.segment_len" => self.sil_segment_len = num(key, v, line)?,
            "sil.seed" => self.sil_seed = num(key, v, line)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    key: key.to_string(),
                    line,
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("plant.theta_res", self.theta_res),
            ("plant.theta_top", self.theta_top),
            ("mcmc.proposal", self.mcmc_proposal),
            ("mcmc.prior_half_width", self.mcmc_prior_half_width),
            ("online.lr_factor", self.online_lr_factor),
        ];
        for (k, v) in positive {
            check(k, v.is_finite() && v > 0.0, || format!("must be positive, got {v}"))?;
        }
        let at_least_one = [
            ("doe.n", self.doe_n),
            ("doe.hold", self.doe_hold),
            ("structure.n_max", self.structure_n_max),
            ("structure.max_rows", self.structure_max_rows),
            ("train.epochs", self.train_epochs),
            ("train.batch_size", self.train_batch_size),
            ("mcmc.samples", self.mcmc_samples),
            ("mcmc.likelihood_rows", self.mcmc_likelihood_rows),
            ("mcmc.ensemble", self.mcmc_ensemble),
            ("cognitive.MH", self.cognitive_mh),
            ("cognitive.CT", self.cognitive_ct),
            ("online.epochs", self.online_epochs),
            ("online.max_rows", self.online_max_rows),
            ("online.experiments", self.online_experiments),
            ("online.hold", self.online_hold),
            ("sil.segment_len", self.sil_segment_len),
        ];
        for (k, v) in at_least_one {
            check(k, v >= 1, || format!("must be >= 1, got {v}"))?;
        }
        check("plant.measurement_noise", self.measurement_noise >= 0.0, || {
            format!("must be >= 0, got {}", self.measurement_noise)
        })?;
        check("plant.initial_fill", self.initial_fill > 0.0 && self.initial_fill < 1.0, || {
            format!("must lie in (0, 1), got {}", self.initial_fill)
        })?;
        check("doe.hold", self.doe_hold >= 2 * self.structure_n_max.max(1), || {
            format!("hold {} is too short for lags up to {}", self.doe_hold, self.structure_n_max)
        })?;
        for (k, v) in [
            ("structure.plateau_tol", self.structure_plateau_tol),
            ("structure.p_fraction", self.structure_p_fraction),
            ("reduce.degeneration_tol", self.reduce_degeneration_tol),
        ] {
            check(k, v > 0.0 && v < 1.0, || format!("must lie in (0, 1), got {v}"))?;
        }
        for (k, v) in [
            ("reduce.confidence", self.reduce_confidence),
            ("cognitive.confidence", self.cognitive_confidence),
        ] {
            check(k, v > 0.0 && v < 1.0, || format!("must lie in (0, 1), got {v}"))?;
        }
        check("train.lr_decay", self.train_lr_decay > 0.0 && self.train_lr_decay <= 1.0, || {
            format!("must lie in (0, 1], got {}", self.train_lr_decay)
        })?;
        check("split.train", self.split_train > 0.0 && self.split_train < 1.0, || {
            format!("must lie in (0, 1), got {}", self.split_train)
        })?;
        check(
            "split.val",
            self.split_val > 0.0 && self.split_train + self.split_val < 1.0,
            || format!("needs 0 < val and train + val < 1, got {}", self.split_val),
        )?;
        check("tune.eta", self.tune_eta >= 2, || format!("must be >= 2, got {}", self.tune_eta))?;
        check("tune.R", self.tune_max_resource >= self.tune_eta, || {
            format!("must be >= eta ({}), got {}", self.tune_eta, self.tune_max_resource)
        })?;
        check("mcmc.burn_in", self.mcmc_burn_in < self.mcmc_samples, || {
            format!("must be below mcmc.samples ({}), got {}", self.mcmc_samples, self.mcmc_burn_in)
        })?;
        check("mcmc.ensemble", self.mcmc_ensemble <= self.mcmc_samples - self.mcmc_burn_in, || {
            format!("exceeds the {} post-burn-in samples", self.mcmc_samples - self.mcmc_burn_in)
        })?;
        check(
            "reduce.sizes",
            !self.reduce_sizes.is_empty()
                && self.reduce_sizes.windows(2).all(|w| w[0] > w[1])
                && self.reduce_sizes.last() > Some(&0)
                && self.reduce_sizes[0] <= self.mcmc_ensemble,
            || format!("must be strictly descending, positive and <= mcmc.ensemble, got {:?}", self.reduce_sizes),
        )?;
        check("reduce.safety_factor", self.reduce_safety_factor >= 1.0, || {
            format!("must be >= 1, got {}", self.reduce_safety_factor)
        })?;
        check("cognitive.CT", self.cognitive_ct <= self.cognitive_mh, || {
            format!("must lie in [1, MH={}], got {}", self.cognitive_mh, self.cognitive_ct)
        })?;
        check("online.lookahead", self.online_lookahead >= 0.0, || {
            format!("must be >= 0, got {}", self.online_lookahead)
        })?;
        check(
            "sil.scenarios",
            self.sil_scenarios.iter().all(|s| (1..=3).contains(s)),
            || format!("scenario ids are 1, 2 and 3, got {:?}", self.sil_scenarios),
        )?;
        Ok(())
    }

    /// Canonical `key = value` rendering of every setting.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let profile = match self.profile {
            Profile::Desk => "desk",
            Profile::Full => "full",
        };
        let _ = writeln!(s, "profile = {profile}");
        let _ = writeln!(s, "paths.data_dir = {}", self.data_dir.display());
        let _ = writeln!(s, "paths.artifact_dir = {}", self.artifact_dir.display());
        let _ = writeln!(s, "paths.report_dir = {}", self.report_dir.display());
        s.push_str(&self.render_settings());
        s
    }

    fn render_settings(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let rows: Vec<(&str, String)> = vec![
            ("plant.theta_res", format!("{:?}", self.theta_res)),
            ("plant.theta_top", format!("{:?}", self.theta_top)),
            ("plant.measurement_noise", format!("{:?}", self.measurement_noise)),
            ("plant.initial_fill", format!("{:?}", self.initial_fill)),
            ("doe.n", self.doe_n.to_string()),
            ("doe.hold", self.doe_hold.to_string()),
            ("doe.seed", self.doe_seed.to_string()),
            ("structure.n_max", self.structure_n_max.to_string()),
            ("structure.plateau_tol", format!("{:?}", self.structure_plateau_tol)),
            ("structure.max_rows", self.structure_max_rows.to_string()),
            ("structure.p_fraction", format!("{:?}", self.structure_p_fraction)),
            ("structure.seed", self.structure_seed.to_string()),
            ("split.train", format!("{:?}", self.split_train)),
            ("split.val", format!("{:?}", self.split_val)),
            ("split.seed", self.split_seed.to_string()),
            ("train.epochs", self.train_epochs.to_string()),
            ("train.patience", self.train_patience.to_string()),
            ("train.batch_size", self.train_batch_size.to_string()),
            ("train.lr_decay", self.train_lr_decay.to_string()),
            ("train.seed", self.train_seed.to_string()),
            ("tune.R", self.tune_max_resource.to_string()),
            ("tune.eta", self.tune_eta.to_string()),
            ("tune.patience", self.tune_patience.to_string()),
            ("tune.seed", self.tune_seed.to_string()),
            ("mcmc.samples", self.mcmc_samples.to_string()),
            ("mcmc.burn_in", self.mcmc_burn_in.to_string()),
            ("mcmc.proposal", format!("{:?}", self.mcmc_proposal)),
            ("mcmc.likelihood_rows", self.mcmc_likelihood_rows.to_string()),
            ("mcmc.prior_half_width", format!("{:?}", self.mcmc_prior_half_width)),
            ("mcmc.ensemble", self.mcmc_ensemble.to_string()),
            ("mcmc.seed", self.mcmc_seed.to_string()),
            ("reduce.sizes", join(&self.reduce_sizes)),
            ("reduce.degeneration_tol", format!("{:?}", self.reduce_degeneration_tol)),
            ("reduce.safety_factor", format!("{:?}", self.reduce_safety_factor)),
            ("reduce.confidence", format!("{:?}", self.reduce_confidence)),
            ("reduce.seed", self.reduce_seed.to_string()),
            ("cognitive.MH", self.cognitive_mh.to_string()),
            ("cognitive.a", self.cognitive_a.to_string()),
            ("cognitive.CT", self.cognitive_ct.to_string()),
            ("cognitive.confidence", format!("{:?}", self.cognitive_confidence)),
            ("cognitive.wait_buffer", self.cognitive_wait_buffer.to_string()),
            ("online.epochs", self.online_epochs.to_string()),
            ("online.lr_factor", format!("{:?}", self.online_lr_factor)),
            ("online.patience", self.online_patience.to_string()),
            ("online.max_rows", self.online_max_rows.to_string()),
            ("online.experiments", self.online_experiments.to_string()),
            ("online.hold", self.online_hold.to_string()),
            ("online.lookahead", format!("{:?}", self.online_lookahead)),
            ("online.seed", self.online_seed.to_string()),
            ("sil.scenarios", join(&self.sil_scenarios)),
            ("sil.settle", self.sil_settle.to_string()),
            ("sil.segment_len", self.sil_segment_len.to_string()),
            ("sil.seed", self.sil_seed.to_string()),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Hash of every setting that influences results; paths are excluded so
    /// runs in different directories agree.
    pub fn hash(&self) -> String {
        digest(self.render_settings().as_bytes())
    }
}

fn check(key: &str, ok: bool, reason: impl FnOnce() -> String) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::RangeViolation {
            key: key.to_string(),
            reason: reason(),
        })
    }
}

trait Expected {
    const NAME: &'static str;
}
impl Expected for f64 {
    const NAME: &'static str = "a number";
}
impl Expected for usize {
    const NAME: &'static str = "a non-negative integer";
}
impl Expected for u64 {
    const NAME: &'static str = "a non-negative integer";
}

fn num<T: FromStr + Expected>(key: &str, v: &str, line: usize) -> Result<T, ConfigError> {
    v.parse().map_err(|_| ConfigError::TypeMismatch {
        key: key.to_string(),
        expected: T::NAME,
        value: v.to_string(),
        line,
    })
}

fn list(key: &str, v: &str, line: usize) -> Result<Vec<usize>, ConfigError> {
    v.split(',')
        .map(|p| {
            p.trim().parse().map_err(|_| ConfigError::TypeMismatch {
                key: key.to_string(),
                expected: "a comma-separated list of integers",
                value: v.to_string(),
                line,
            })
        })
        .collect()
}

fn parse_profile(v: &str, line: usize) -> Result<Profile, ConfigError> {
    match v {
        "desk" => Ok(Profile::Desk),
        "full" => Ok(Profile::Full),
        _ => Err(ConfigError::TypeMismatch {
            key: "profile".into(),
            expected: "`desk` or `full`",
            value: v.to_string(),
            line,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::desk());
        assert_eq!(RunConfig::parse("# only a comment\n\n").unwrap(), RunConfig::desk());
    }

    #[test]
    fn long_chain_accepted() {
        let c = RunConfig::parse("mcmc.samples=50000\nmcmc.burn_in=10000\n").unwrap();
        assert_eq!((c.mcmc_samples, c.mcmc_burn_in), (50_000, 10_000));
    }

    #[test]
    fn errors_name_the_key() {
        assert!(matches!(
            RunConfig::parse("cognitive.MH=0"),
            Err(ConfigError::RangeViolation { key, .. }) if key == "cognitive.MH"
        ));
        assert!(matches!(
            RunConfig::parse("doe.n = lots"),
            Err(ConfigError::TypeMismatch { key, .. }) if key == "doe.n"
        ));
        assert!(matches!(
            RunConfig::parse("\nmcmc.sample = 3"),
            Err(ConfigError::UnknownKey { key, line: 2 }) if key == "mcmc.sample"
        ));
        assert!(matches!(RunConfig::parse("doe.n"), Err(ConfigError::Syntax { line: 1 })));
    }

    #[test]
    fn render_round_trips() {
        let mut c = RunConfig::full();
        c.reduce_sizes = vec![900, 30, 3];
        c.cognitive_ct = 7;
        assert_eq!(RunConfig::parse(&c.render()).unwrap(), c);
    }

    #[test]
    fn hash_ignores_paths() {
        let a = RunConfig::desk();
        let mut b = RunConfig::desk();
        b.artifact_dir = "/elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.doe_seed = 2;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn profile_selects_defaults() {
        let c = RunConfig::parse("doe.seed = 4\nprofile = full").unwrap();
        assert_eq!((c.doe_n, c.doe_seed, c.mcmc_samples), (4000, 4, 50_000));
    }
}
