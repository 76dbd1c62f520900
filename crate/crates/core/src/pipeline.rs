//! Stage-by-stage offline pipeline and live replays. Every stage reads the
//! artifacts of its upstream stages, checks them against their manifests,
//! and writes its own artifacts plus a manifest with the config hash and
//! content digests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::digest;
use crate::bayes::{
    burn_in_trim, mcmc_sample, posterior_stats, propagate_uncertainty, reduce_ensemble, thin, BayesError,
    LikelihoodData, ModelEnsemble, NetworkPosterior, Prior, ReductionReport, ReductionSettings, ResidualNoise,
    SampleSet, ScaleTuning, Sequence,
};
use crate::channels::{corpus_segments, exogenous_of, Channel, EXOGENOUS_NAMES};
use crate::cognitive::{ChannelModel, CognitiveConfig, OfflineArtifact, OfflineInstance, RetrainBudget};
use crate::config::RunConfig;
use crate::doe::{
    build_input_sequence, correlation_audit, gas_lift_bounds, gram_schmidt_rank_multi, lhs_sample, run_schedule,
    Corpus, DoeError,
};
use crate::hyperband::{hyperband, reference_spec, HyperbandConfig, HyperbandError, SearchSpace, TrialTemplate, REFERENCE_WIDTHS};
use crate::narx::{evaluate, train_epochs, train_with_decay, Evaluator, Metrics, NarxError, NetworkSpec, NetworkWeights, TrainRows, TrainState};
use crate::plant::{add_measurement_noise, parse_trajectory_csv, trajectory_csv, IntegratorConfig, PlantError, PlantInputs, PlantParams, PlantState};
use crate::sil::{compare_static_vs_dt, emit_report, run_scenario, scenario_library, DriftMetrics, SilError, SilLog, SilSettings};
use crate::structure::{
    assemble_narx_dataset, select_embedding, EmbeddingConfig, LipschitzAnalysis, NarxDataset, SplitRatios,
    StructureError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("missing artifact {path}")]
    MissingArtifact { path: String },
    #[error("fingerprint mismatch for {path}: recorded {recorded}, found {found}")]
    FingerprintMismatch {
        path: String,
        recorded: String,
        found: String,
    },
    #[error("malformed artifact {path}: {reason}")]
    Malformed { path: String, reason: String },
    #[error("I/O error on {path}: {reason}")]
    Io { path: String, reason: String },
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Doe(#[from] DoeError),
    #[error(transparent)]
    Structure(#[from] StructureError),
    #[error(transparent)]
    Network(#[from] NarxError),
    #[error(transparent)]
    Hyperband(#[from] HyperbandError),
    #[error(transparent)]
    Bayes(#[from] BayesError),
    #[error(transparent)]
    Sil(#[from] SilError),
}

impl PipelineError {
    /// Stable machine-readable error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::MissingArtifact { .. } => "MissingArtifact",
            PipelineError::FingerprintMismatch { .. } => "FingerprintMismatch",
            PipelineError::Malformed { .. } => "MalformedArtifact",
            PipelineError::Io { .. } => "IoFailure",
            PipelineError::Plant(_) => "PlantError",
            PipelineError::Doe(_) => "DoeError",
            PipelineError::Structure(_) => "StructureError",
            PipelineError::Network(_) => "NetworkError",
            PipelineError::Hyperband(_) => "HyperbandError",
            PipelineError::Bayes(_) => "BayesError",
            PipelineError::Sil(_) => "SilError",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    RankInputs,
    SelectStructure,
    Tune,
    Fit,
    Mcmc,
    Reduce,
    Report,
    Sil,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::GenData,
        Stage::RankInputs,
        Stage::SelectStructure,
        Stage::Tune,
        Stage::Fit,
        Stage::Mcmc,
        Stage::Reduce,
        Stage::Report,
        Stage::Sil,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::RankInputs => "rank-inputs",
            Stage::SelectStructure => "select-structure",
            Stage::Tune => "tune",
            Stage::Fit => "fit",
            Stage::Mcmc => "mcmc",
            Stage::Reduce => "reduce",
            Stage::Report => "report",
            Stage::Sil => "sil",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }

    /// Stages whose artifacts this stage reads.
    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::GenData => &[],
            Stage::RankInputs | Stage::SelectStructure => &[Stage::GenData],
            Stage::Tune => &[Stage::GenData, Stage::SelectStructure],
            Stage::Fit => &[Stage::GenData, Stage::SelectStructure, Stage::Tune],
            Stage::Mcmc => &[Stage::GenData, Stage::SelectStructure, Stage::Fit],
            Stage::Reduce => &[Stage::GenData, Stage::SelectStructure, Stage::Fit, Stage::Mcmc],
            Stage::Report | Stage::Sil => &[Stage::GenData, Stage::SelectStructure, Stage::Reduce],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    /// Upstream artifact digests this stage consumed.
    pub inputs: BTreeMap<String, String>,
    /// Artifacts written, keyed `artifacts/<path>` or `reports/<path>`.
    pub outputs: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
}

/// Resolved artifact and report roots of one run.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: RunConfig,
    artifacts: PathBuf,
    reports: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("artifact types serialize infallibly");
    s.push(b'\n');
    s
}

struct Outputs {
    files: BTreeMap<String, String>,
}

impl Outputs {
    fn new() -> Self {
        Self { files: BTreeMap::new() }
    }
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Self {
        Self {
            artifacts: config.artifact_dir.clone(),
            reports: config.report_dir.clone(),
            config,
        }
    }

    pub fn artifact_path(&self, rel: &str) -> PathBuf {
        self.artifacts.join(rel)
    }

    pub fn report_path(&self, rel: &str) -> PathBuf {
        self.reports.join(rel)
    }

    fn resolve(&self, key: &str) -> PathBuf {
        match key.split_once('/') {
            Some(("reports", rest)) => self.reports.join(rest),
            Some(("artifacts", rest)) => self.artifacts.join(rest),
            _ => self.artifacts.join(key),
        }
    }

    fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.artifacts.join("manifests").join(format!("{}.json", stage.name()))
    }

    pub fn read_manifest(&self, stage: Stage) -> Result<Manifest, PipelineError> {
        self.read_json_at(&self.manifest_path(stage))
    }

    fn read_bytes_at(&self, path: &Path) -> Result<Vec<u8>, PipelineError> {
        match fs::read(path) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(PipelineError::MissingArtifact {
                path: path.display().to_string(),
            }),
            Err(e) => Err(io_err(path)(e)),
        }
    }

    fn read_json_at<T: DeserializeOwned>(&self, path: &Path) -> Result<T, PipelineError> {
        let bytes = self.read_bytes_at(path)?;
        serde_json::from_slice(&bytes).map_err(|e| PipelineError::Malformed {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    fn read_json<T: DeserializeOwned>(&self, rel: &str) -> Result<T, PipelineError> {
        self.read_json_at(&self.artifact_path(rel))
    }

    /// Checks every upstream manifest against the current config and the
    /// files on disk; returns the consumed digests.
    pub fn verify_upstream(&self, stage: Stage) -> Result<BTreeMap<String, String>, PipelineError> {
        let hash = self.config.hash();
        let mut inputs = BTreeMap::new();
        for &up in stage.upstream() {
            let path = self.manifest_path(up);
            let m = self.read_manifest(up)?;
            if m.config_hash != hash {
                return Err(PipelineError::FingerprintMismatch {
                    path: path.display().to_string(),
                    recorded: m.config_hash,
                    found: hash,
                });
            }
            for (key, recorded) in &m.outputs {
                let p = self.resolve(key);
                let found = digest(&self.read_bytes_at(&p)?);
                if &found != recorded {
                    return Err(PipelineError::FingerprintMismatch {
                        path: p.display().to_string(),
                        recorded: recorded.clone(),
                        found,
                    });
                }
                inputs.insert(key.clone(), found);
            }
        }
        Ok(inputs)
    }

    fn put(&self, out: &mut Outputs, rel: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        self.put_at(out, "artifacts", &self.artifacts, rel, bytes)
    }

    fn put_report(&self, out: &mut Outputs, rel: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        self.put_at(out, "reports", &self.reports, rel, bytes)
    }

    fn put_at(&self, out: &mut Outputs, prefix: &str, root: &Path, rel: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let path = root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        fs::write(&path, bytes).map_err(io_err(&path))?;
        out.files.insert(format!("{prefix}/{rel}"), digest(bytes));
        Ok(())
    }

    fn finish(
        &self,
        stage: Stage,
        inputs: BTreeMap<String, String>,
        out: Outputs,
        seeds: &[(&str, u64)],
    ) -> Result<Manifest, PipelineError> {
        let m = Manifest {
            stage: stage.name().to_string(),
            config_hash: self.config.hash(),
            inputs,
            outputs: out.files,
            seeds: seeds.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        };
        let path = self.manifest_path(stage);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        fs::write(&path, to_json(&m)).map_err(io_err(&path))?;
        Ok(m)
    }

    pub fn plant_params(&self) -> PlantParams {
        PlantParams {
            theta_res: [self.config.theta_res; 3],
            theta_top: [self.config.theta_top; 3],
            ..PlantParams::default()
        }
    }

    pub fn run(&self, stage: Stage) -> Result<Manifest, PipelineError> {
        log::info!("stage {}", stage.name());
        match stage {
            Stage::GenData => self.gen_data(),
            Stage::RankInputs => self.rank_inputs(),
            Stage::SelectStructure => self.select_structure(),
            Stage::Tune => self.tune(),
            Stage::Fit => self.fit(),
            Stage::Mcmc => self.mcmc(),
            Stage::Reduce => self.reduce(),
            Stage::Report => self.report(),
            Stage::Sil => self.sil(),
        }
    }

    pub fn run_all(&self) -> Result<Vec<Manifest>, PipelineError> {
        Stage::ALL.iter().map(|&s| self.run(s)).collect()
    }

    fn gen_data(&self) -> Result<Manifest, PipelineError> {
        let c = &self.config;
        let inputs = self.verify_upstream(Stage::GenData)?;
        let params = self.plant_params();
        params.validate()?;
        let plan = lhs_sample(c.doe_n, &gas_lift_bounds(), c.doe_seed)?;
        let audit = correlation_audit(&plan)?;
        let schedule = build_input_sequence(&plan, c.doe_hold as f64, &PlantInputs::nominal())?;
        let mut corpus = run_schedule(
            &schedule,
            &params,
            &PlantState::initial(&params, c.initial_fill),
            &IntegratorConfig::default(),
        )?;
        add_measurement_noise(&mut corpus.samples, c.measurement_noise, c.doe_seed.wrapping_add(1))?;
        let mut out = Outputs::new();
        self.put(&mut out, "data/plan.csv", plan.to_csv().as_bytes())?;
        self.put(
            &mut out,
            "data/plan.json",
            &to_json(&serde_json::json!({ "plan": plan.metadata_json(), "audit": audit })),
        )?;
        self.put(&mut out, "data/corpus.csv", trajectory_csv(&corpus.samples).as_bytes())?;
        self.put(
            &mut out,
            "data/corpus.json",
            &to_json(&CorpusMeta {
                plateau_len: corpus.plateau_len,
                steady: corpus.steady.clone(),
            }),
        )?;
        self.finish(Stage::GenData, inputs, out, &[("doe.seed", c.doe_seed)])
    }

    pub fn load_corpus(&self) -> Result<Corpus, PipelineError> {
        let meta: CorpusMeta = self.read_json("data/corpus.json")?;
        let path = self.artifact_path("data/corpus.csv");
        let text = String::from_utf8(self.read_bytes_at(&path)?).map_err(|e| PipelineError::Malformed {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let samples = parse_trajectory_csv(&text)?;
        let final_state = samples.last().map(|s| s.state).ok_or(PipelineError::Malformed {
            path: path.display().to_string(),
            reason: "empty corpus".into(),
        })?;
        Ok(Corpus {
            samples,
            plateau_len: meta.plateau_len,
            steady: meta.steady,
            final_state,
        })
    }

    fn rank_inputs(&self) -> Result<Manifest, PipelineError> {
        let inputs = self.verify_upstream(Stage::RankInputs)?;
        let corpus = self.load_corpus()?;
        let ends: Vec<_> = (0..corpus.n_plateaus())
            .map(|e| corpus.plateau(e).last().expect("plateaus are non-empty"))
            .collect();
        let names: Vec<String> = EXOGENOUS_NAMES.iter().map(|s| s.to_string()).collect();
        let candidates: Vec<Vec<f64>> = (0..4)
            .map(|j| ends.iter().map(|s| exogenous_of(s)[j]).collect())
            .collect();
        let outputs: Vec<Vec<f64>> = Channel::all()
            .iter()
            .map(|ch| ends.iter().map(|s| ch.value(s)).collect())
            .collect();
        let joint = gram_schmidt_rank_multi(&names, &candidates, &outputs)?;
        let mut per_channel = BTreeMap::new();
        for (ch, y) in Channel::all().iter().zip(&outputs) {
            per_channel.insert(ch.name(), gram_schmidt_rank_multi(&names, &candidates, std::slice::from_ref(y))?);
        }
        let mut out = Outputs::new();
        self.put(
            &mut out,
            "ranking.json",
            &to_json(&serde_json::json!({ "joint": joint, "per_channel": per_channel })),
        )?;
        self.finish(Stage::RankInputs, inputs, out, &[])
    }

    fn embedding_config(&self) -> EmbeddingConfig {
        let c = &self.config;
        EmbeddingConfig {
            n_max: c.structure_n_max,
            plateau_rel_tol: c.structure_plateau_tol,
            max_rows: c.structure_max_rows,
            p_fraction: c.structure_p_fraction,
            seed: c.structure_seed,
        }
    }

    fn select_structure(&self) -> Result<Manifest, PipelineError> {
        let inputs = self.verify_upstream(Stage::SelectStructure)?;
        let corpus = self.load_corpus()?;
        let u: Vec<Vec<f64>> = corpus.samples.iter().map(exogenous_of).collect();
        let cfg = self.embedding_config();
        let mut channels = Vec::new();
        for ch in Channel::all() {
            let y: Vec<f64> = corpus.samples.iter().map(|s| ch.value(s)).collect();
            let analysis = select_embedding(&u, &y, &cfg)?;
            log::info!("{}: N_a={} N_b={}", ch.name(), analysis.n_a, analysis.n_b);
            channels.push(ChannelStructure {
                channel: ch,
                n_a: analysis.n_a,
                n_b: analysis.n_b,
                analysis,
            });
        }
        let mut out = Outputs::new();
        self.put(&mut out, "structure.json", &to_json(&channels))?;
        self.finish(Stage::SelectStructure, inputs, out, &[("structure.seed", cfg.seed)])
    }

    pub fn load_structure(&self) -> Result<Vec<ChannelStructure>, PipelineError> {
        self.read_json("structure.json")
    }

    /// MISO datasets of every channel, rebuilt from the corpus.
    pub fn datasets(&self, corpus: &Corpus, structure: &[ChannelStructure]) -> Result<Vec<NarxDataset>, PipelineError> {
        let ratios = SplitRatios {
            train: self.config.split_train,
            val: self.config.split_val,
        };
        structure
            .iter()
            .map(|s| {
                let segs = corpus_segments(corpus, s.channel);
                Ok(assemble_narx_dataset(&segs, s.n_a, s.n_b, ratios, self.config.split_seed)?)
            })
            .collect()
    }

    fn template(&self, ds: &NarxDataset) -> TrialTemplate {
        TrialTemplate {
            input_width: ds.width(),
            batch_size: self.config.train_batch_size,
            patience: self.config.tune_patience,
        }
    }

    fn tune(&self) -> Result<Manifest, PipelineError> {
        let c = &self.config;
        let inputs = self.verify_upstream(Stage::Tune)?;
        let corpus = self.load_corpus()?;
        let structure = self.load_structure()?;
        let datasets = self.datasets(&corpus, &structure)?;
        let mut out = Outputs::new();
        let mut results = Vec::new();
        for (i, (s, ds)) in structure.iter().zip(&datasets).enumerate() {
            let hb = HyperbandConfig {
                max_resource: c.tune_max_resource,
                eta: c.tune_eta,
                seed: c.tune_seed.wrapping_add(i as u64),
            };
            let tpl = self.template(ds);
            let outcome = hyperband(ds, TrainRows::of(ds), &SearchSpace::default(), &tpl, &hb)?;
            let reference = reference_spec(REFERENCE_WIDTHS[s.channel.index()], &tpl, hb.seed);
            let mut st = TrainState::new(&reference);
            train_epochs(&mut st, &reference, ds, TrainRows::of(ds), c.tune_max_resource)?;
            log::info!(
                "{}: best {} (val {:.3e}), reference val {:.3e}",
                s.channel.name(),
                outcome.best.describe(),
                outcome.best_val_loss,
                st.best_val
            );
            self.put(&mut out, &format!("tune/{}.csv", s.channel.name()), outcome.ledger_csv().as_bytes())?;
            results.push(TuneResult {
                channel: s.channel,
                best: outcome.best.clone(),
                best_val_loss: outcome.best_val_loss,
                best_trial: outcome.best_trial,
                trials: outcome.trials.len(),
                epochs_consumed: outcome.epochs_consumed,
                epoch_budget: hb.budget(),
                schedule: outcome.schedule.clone(),
                reference,
                reference_val_loss: st.best_val,
            });
        }
        self.put(&mut out, "tune.json", &to_json(&results))?;
        self.finish(Stage::Tune, inputs, out, &[("tune.seed", c.tune_seed)])
    }

    pub fn load_tune(&self) -> Result<Vec<TuneResult>, PipelineError> {
        self.read_json("tune.json")
    }

    fn fit(&self) -> Result<Manifest, PipelineError> {
        let c = &self.config;
        let inputs = self.verify_upstream(Stage::Fit)?;
        let corpus = self.load_corpus()?;
        let structure = self.load_structure()?;
        let tune = self.load_tune()?;
        let datasets = self.datasets(&corpus, &structure)?;
        let mut out = Outputs::new();
        let mut summary = Vec::new();
        for ((s, t), ds) in structure.iter().zip(&tune).zip(&datasets) {
            let mut spec = t.best.clone();
            spec.epochs = c.train_epochs;
            spec.patience = c.train_patience;
            spec.batch_size = c.train_batch_size;
            spec.seed = c.train_seed;
            let model = train_with_decay(ds, &spec, c.train_lr_decay)?;
            let test = evaluate(&model.weights, &spec, ds, &ds.test, false)?;
            let test_raw = evaluate(&model.weights, &spec, ds, &ds.test, true)?;
            let val = evaluate(&model.weights, &spec, ds, &ds.val, false)?;
            log::info!("{}: test mse {:.3e}", s.channel.name(), test.mse);
            let fitted = FittedModel {
                channel: s.channel,
                spec,
                embedding: ds.embedding,
                normalization: ds.normalization.clone(),
                weights: model.weights,
                history: model.history,
                best_val: model.best_val,
                test,
                test_raw,
                val,
            };
            self.put(&mut out, &format!("models/{}.json", s.channel.name()), &to_json(&fitted))?;
            summary.push(serde_json::json!({
                "channel": s.channel.name(),
                "architecture": fitted.spec.describe(),
                "epochs": fitted.history.len(),
                "test_mse": test.mse,
                "test_mae": test.mae,
                "val_mse": val.mse,
            }));
        }
        self.put(&mut out, "fit.json", &to_json(&summary))?;
        self.finish(Stage::Fit, inputs, out, &[("train.seed", c.train_seed), ("split.seed", c.split_seed)])
    }

    pub fn load_model(&self, ch: Channel) -> Result<FittedModel, PipelineError> {
        self.read_json(&format!("models/{}.json", ch.name()))
    }

    fn mcmc(&self) -> Result<Manifest, PipelineError> {
        let c = &self.config;
        let inputs = self.verify_upstream(Stage::Mcmc)?;
        let corpus = self.load_corpus()?;
        let structure = self.load_structure()?;
        let datasets = self.datasets(&corpus, &structure)?;
        let mut out = Outputs::new();
        for (i, (s, ds)) in structure.iter().zip(&datasets).enumerate() {
            let model = self.load_model(s.channel)?;
            let seed = c.mcmc_seed.wrapping_add(i as u64);
            let data = LikelihoodData::from_dataset(ds, &ds.train, c.mcmc_likelihood_rows, seed);
            let mut ev = Evaluator::new(&model.spec);
            let sigma = data.residual_std(&mut ev, &model.weights.theta);
            let prior = Prior::Box {
                center: model.weights.theta.clone(),
                half_width: c.mcmc_prior_half_width,
            };
            let mut target = NetworkPosterior::new(&model.spec, &data, prior, sigma);
            let chain = mcmc_sample(
                &model.weights.theta,
                &mut target,
                c.mcmc_samples,
                c.mcmc_proposal,
                Some(ScaleTuning::new(c.mcmc_burn_in)),
                seed,
            )?;
            let kept = burn_in_trim(&chain, c.mcmc_burn_in)?;
            let check = covariance_check(&kept)?;
            let ensemble = thin(&kept, c.mcmc_ensemble);
            let acceptance = chain.acceptance_rate(c.mcmc_burn_in);
            log::info!("{}: acceptance {:.3} after burn-in, sigma {:.3e}", s.channel.name(), acceptance, sigma);
            let mut lines = String::new();
            let mut next = 0;
            for k in 0..chain.len() {
                let retained = ensemble.chain_index.get(next) == Some(&k);
                let rec = ChainRecord {
                    index: k,
                    log_posterior: chain.log_posterior[k],
                    accepted: chain.accepted[k],
                    theta: retained.then(|| chain.sample(k).to_vec()),
                };
                if retained {
                    next += 1;
                }
                lines.push_str(&serde_json::to_string(&rec).expect("chain records serialize"));
                lines.push('\n');
            }
            self.put(&mut out, &format!("chains/{}.jsonl", s.channel.name()), lines.as_bytes())?;
            let summary = PosteriorRecord {
                channel: s.channel,
                sigma,
                likelihood_rows: data.len(),
                samples: chain.len(),
                burn_in: chain.burn_in,
                seed,
                proposal_scale: chain.proposal_scale,
                acceptance_after_burn_in: acceptance,
                acceptance_during_burn_in: chain.accepted[..c.mcmc_burn_in.min(chain.len())]
                    .iter()
                    .filter(|&&x| x)
                    .count() as f64
                    / c.mcmc_burn_in.max(1) as f64,
                ensemble_size: ensemble.len(),
                check,
            };
            self.put(&mut out, &format!("posterior/{}.json", s.channel.name()), &to_json(&summary))?;
        }
        self.finish(Stage::Mcmc, inputs, out, &[("mcmc.seed", c.mcmc_seed)])
    }

    pub fn load_posterior(&self, ch: Channel) -> Result<PosteriorRecord, PipelineError> {
        self.read_json(&format!("posterior/{}.json", ch.name()))
    }

    /// Retained chain samples and the digest of the chain file.
    pub fn load_full_ensemble(&self, ch: Channel) -> Result<ModelEnsemble, PipelineError> {
        let path = self.artifact_path(&format!("chains/{}.jsonl", ch.name()));
        let bytes = self.read_bytes_at(&path)?;
        let mut members = Vec::new();
        let mut chain_index = Vec::new();
        for line in bytes.split(|b| *b == b'\n').filter(|l| !l.is_empty()) {
            let rec: ChainRecord = serde_json::from_slice(line).map_err(|e| PipelineError::Malformed {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
            if let Some(theta) = rec.theta {
                members.push(theta);
                chain_index.push(rec.index);
            }
        }
        Ok(ModelEnsemble {
            members,
            chain_index,
            chain_fingerprint: digest(&bytes),
        })
    }

    fn sequences(&self, corpus: &Corpus, s: &ChannelStructure, ds: &NarxDataset, ids: &[usize]) -> Vec<Sequence> {
        let segs = corpus_segments(corpus, s.channel);
        let k = ds.embedding.max_lag();
        ids.iter()
            .map(|&i| {
                let seg = &segs[i];
                Sequence {
                    initial: seg.output[..k].to_vec(),
                    exogenous: seg.inputs.clone(),
                    measured: seg.output[k..].to_vec(),
                }
            })
            .collect()
    }

    fn reduce(&self) -> Result<Manifest, PipelineError> {
        let c = &self.config;
        let inputs = self.verify_upstream(Stage::Reduce)?;
        let corpus = self.load_corpus()?;
        let structure = self.load_structure()?;
        let datasets = self.datasets(&corpus, &structure)?;
        let mut out = Outputs::new();
        let mut models = Vec::new();
        let mut reports = Vec::new();
        for (i, (s, ds)) in structure.iter().zip(&datasets).enumerate() {
            let model = self.load_model(s.channel)?;
            let post = self.load_posterior(s.channel)?;
            let full = self.load_full_ensemble(s.channel)?;
            let predictive_sigma = post.sigma.max(model.best_val.sqrt());
            let sequences: Vec<_> = self
                .sequences(&corpus, s, ds, &ds.val_segments)
                .into_iter()
                .map(|q| (q, ds.embedding, ds.normalization.clone()))
                .collect();
            let mut sizes: Vec<usize> = c.reduce_sizes.iter().copied().filter(|&k| k <= full.len()).collect();
            if sizes.first() != Some(&full.len()) {
                sizes.insert(0, full.len());
            }
            let settings = ReductionSettings {
                degeneration_tol: c.reduce_degeneration_tol,
                safety_factor: c.reduce_safety_factor,
                confidence: c.reduce_confidence,
                noise: ResidualNoise {
                    sigma: predictive_sigma,
                    seed: c.reduce_seed.wrapping_add(i as u64),
                },
                seed: c.reduce_seed.wrapping_add(i as u64),
            };
            let (reduced, report) = reduce_ensemble(&full, &model.spec, &sequences, &sizes, settings)?;
            log::info!(
                "{}: inflection {:?}, chosen {} of {}",
                s.channel.name(),
                report.inflection_size,
                report.chosen_size,
                report.full_size
            );
            self.put(&mut out, &format!("ensemble/{}.json", s.channel.name()), &to_json(&reduced))?;
            reports.push(ChannelReduction {
                channel: s.channel,
                report,
            });
            models.push(ChannelModel {
                channel: s.channel,
                spec: model.spec,
                embedding: model.embedding,
                normalization: model.normalization,
                map: model.weights,
                ensemble: reduced,
                noise_sigma: predictive_sigma,
            });
        }
        self.put(&mut out, "reduction.json", &to_json(&reports))?;
        self.put(&mut out, "twin.json", &to_json(&OfflineArtifact::new(models)))?;
        self.finish(Stage::Reduce, inputs, out, &[("reduce.seed", c.reduce_seed)])
    }

    pub fn load_twin(&self) -> Result<OfflineArtifact, PipelineError> {
        let twin: OfflineArtifact = self.read_json("twin.json")?;
        twin.verify().map_err(|_| PipelineError::FingerprintMismatch {
            path: self.artifact_path("twin.json").display().to_string(),
            recorded: twin.fingerprint.clone(),
            found: crate::artifact::fingerprint(&twin.models),
        })?;
        Ok(twin)
    }

    /// Free-run coverage of the reduced ensembles on the held-out segments.
    pub fn coverage(&self) -> Result<Vec<CoverageRecord>, PipelineError> {
        let c = &self.config;
        let corpus = self.load_corpus()?;
        let structure = self.load_structure()?;
        let datasets = self.datasets(&corpus, &structure)?;
        let twin = self.load_twin()?;
        let mut records = Vec::new();
        for (i, ((s, ds), m)) in structure.iter().zip(&datasets).zip(&twin.models).enumerate() {
            let noise = ResidualNoise {
                sigma: m.noise_sigma,
                seed: c.reduce_seed.wrapping_add(1000 + i as u64),
            };
            let (mut inside, mut total, mut width, mut sq) = (0usize, 0usize, 0.0, 0.0);
            let mut ev = Evaluator::new(&m.spec);
            for q in self.sequences(&corpus, s, ds, &ds.test_segments) {
                let regions = propagate_uncertainty(
                    &m.ensemble,
                    &m.spec,
                    &m.embedding,
                    &m.normalization,
                    &q.initial,
                    &q.exogenous,
                    c.reduce_confidence,
                    noise,
                )?;
                let map = crate::narx::simulate_closed_loop(&m.map.theta, &mut ev, &m.embedding, &m.normalization, &q.initial, &q.exogenous)?;
                for ((r, y), p) in regions.iter().zip(&q.measured).zip(&map) {
                    inside += usize::from(r.contains(*y));
                    total += 1;
                    width += m.normalization.output.normalize(r.upper) - m.normalization.output.normalize(r.lower);
                    sq += (m.normalization.output.normalize(*p) - m.normalization.output.normalize(*y)).powi(2);
                }
            }
            records.push(CoverageRecord {
                channel: s.channel.name(),
                points: total,
                covered: inside,
                coverage: inside as f64 / total.max(1) as f64,
                mean_width_normalized: width / total.max(1) as f64,
                map_free_run_rmse_normalized: (sq / total.max(1) as f64).sqrt(),
                ensemble_size: m.ensemble.len(),
                confidence: c.reduce_confidence,
            });
        }
        Ok(records)
    }

    fn report(&self) -> Result<Manifest, PipelineError> {
        let inputs = self.verify_upstream(Stage::Report)?;
        let coverage = self.coverage()?;
        let structure = self.load_structure()?;
        let reduction: Vec<ChannelReduction> = self.read_json("reduction.json")?;
        let mut out = Outputs::new();
        self.put_report(&mut out, "offline/coverage.json", &to_json(&coverage))?;
        let summary = serde_json::json!({
            "config_hash": self.config.hash(),
            "structure": structure.iter().map(|s| serde_json::json!({
                "channel": s.channel.name(), "n_a": s.n_a, "n_b": s.n_b,
            })).collect::<Vec<_>>(),
            "reduction": reduction.iter().map(|r| serde_json::json!({
                "channel": r.channel.name(),
                "inflection": r.report.inflection_size,
                "chosen": r.report.chosen_size,
                "full": r.report.full_size,
                "width_ratio": r.report.chosen_width_ratio,
            })).collect::<Vec<_>>(),
            "coverage": coverage,
        });
        self.put_report(&mut out, "offline/summary.json", &to_json(&summary))?;
        self.finish(Stage::Report, inputs, out, &[])
    }

    pub fn sil_settings(&self) -> SilSettings {
        let c = &self.config;
        SilSettings {
            params: self.plant_params(),
            integrator: IntegratorConfig::default(),
            cognitive: CognitiveConfig {
                horizon: c.cognitive_mh,
                offset: c.cognitive_a,
                threshold: c.cognitive_ct,
                confidence: c.cognitive_confidence,
                wait_buffer: c.cognitive_wait_buffer,
            },
            retrain: RetrainBudget {
                epochs: c.online_epochs,
                learning_rate_factor: c.online_lr_factor,
                patience: c.online_patience,
                max_rows: c.online_max_rows,
                seed: c.online_seed,
            },
            offline: OfflineInstance {
                params: self.plant_params(),
                integrator: IntegratorConfig::default(),
                bounds: gas_lift_bounds(),
                n_experiments: c.online_experiments,
                hold: c.online_hold,
                lookahead: c.online_lookahead,
                seed: c.online_seed,
            },
            settle: c.sil_settle,
            segment_len: c.sil_segment_len,
            noise_seed: c.sil_seed,
        }
    }

    /// Replays one scenario and writes its report under `scenario<id>/`.
    pub fn replay(&self, twin: &OfflineArtifact, id: usize) -> Result<(SilLog, DriftMetrics), PipelineError> {
        let script = scenario_library()
            .into_iter()
            .find(|s| usize::from(s.id) == id)
            .ok_or_else(|| PipelineError::Sil(SilError::InvalidScenario(format!("no scenario {id}"))))?;
        let log = run_scenario(&script, twin, &self.sil_settings())?;
        let metrics = compare_static_vs_dt(&log, self.config.cognitive_mh);
        emit_report(&log, &metrics, &self.reports.join(format!("scenario{id}")))?;
        Ok((log, metrics))
    }

    fn sil(&self) -> Result<Manifest, PipelineError> {
        self.sil_with(&self.config.sil_scenarios.clone(), |_, _| {})
    }

    /// The sil stage over `ids`, handing each finished replay to `visit`.
    pub fn sil_with<F: FnMut(&SilLog, &DriftMetrics)>(&self, ids: &[usize], mut visit: F) -> Result<Manifest, PipelineError> {
        let inputs = self.verify_upstream(Stage::Sil)?;
        let twin = self.load_twin()?;
        let mut out = Outputs::new();
        let mut all = Vec::new();
        for &id in ids {
            let (log, metrics) = self.replay(&twin, id)?;
            let dir = self.reports.join(format!("scenario{id}"));
            for entry in walk(&dir).map_err(io_err(&dir))? {
                let bytes = fs::read(&entry).map_err(io_err(&entry))?;
                let key = entry.strip_prefix(&self.reports).unwrap_or(&entry).display().to_string();
                out.files.insert(format!("reports/{key}"), digest(&bytes));
            }
            visit(&log, &metrics);
            all.push(metrics);
        }
        self.put(&mut out, "sil.json", &to_json(&all))?;
        self.finish(Stage::Sil, inputs, out, &[("sil.seed", self.config.sil_seed), ("online.seed", self.config.online_seed)])
    }
}

fn walk(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    Ok(files)
}

/// Largest parameter count for which the full covariance is formed.
pub const MAX_COVARIANCE_DIM: usize = 4000;

fn covariance_check(kept: &SampleSet) -> Result<CovarianceCheck, PipelineError> {
    if kept.dim > MAX_COVARIANCE_DIM {
        log::warn!("covariance of {} parameters not formed", kept.dim);
        return Ok(CovarianceCheck::default());
    }
    let summary = posterior_stats(kept)?;
    summary.check()?;
    Ok(CovarianceCheck {
        formed: true,
        theta_hat: summary.theta_hat.clone(),
        variance: (0..summary.dim).map(|i| summary.cov(i, i)).collect(),
        min_eigenvalue: summary.min_eigenvalue(),
        max_asymmetry: summary.max_asymmetry(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub plateau_len: usize,
    pub steady: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStructure {
    pub channel: Channel,
    pub n_a: usize,
    pub n_b: usize,
    pub analysis: LipschitzAnalysis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub channel: Channel,
    pub best: NetworkSpec,
    pub best_val_loss: f64,
    pub best_trial: usize,
    pub trials: usize,
    pub epochs_consumed: usize,
    pub epoch_budget: usize,
    pub schedule: Vec<crate::hyperband::BracketPlan>,
    pub reference: NetworkSpec,
    pub reference_val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub channel: Channel,
    pub spec: NetworkSpec,
    pub embedding: crate::structure::Embedding,
    pub normalization: crate::structure::Normalization,
    pub weights: NetworkWeights,
    pub history: Vec<crate::narx::EpochRecord>,
    pub best_val: f64,
    pub test: Metrics,
    pub test_raw: Metrics,
    pub val: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub index: usize,
    pub log_posterior: f64,
    pub accepted: bool,
    /// Present only for samples retained in the ensemble.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CovarianceCheck {
    pub formed: bool,
    pub theta_hat: Vec<f64>,
    pub variance: Vec<f64>,
    pub min_eigenvalue: f64,
    pub max_asymmetry: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorRecord {
    pub channel: Channel,
    pub sigma: f64,
    pub likelihood_rows: usize,
    pub samples: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub proposal_scale: f64,
    pub acceptance_after_burn_in: f64,
    pub acceptance_during_burn_in: f64,
    pub ensemble_size: usize,
    pub check: CovarianceCheck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelReduction {
    pub channel: Channel,
    pub report: ReductionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRecord {
    pub channel: String,
    pub points: usize,
    pub covered: usize,
    pub coverage: f64,
    pub mean_width_normalized: f64,
    pub map_free_run_rmse_normalized: f64,
    pub ensemble_size: usize,
    pub confidence: f64,
}
