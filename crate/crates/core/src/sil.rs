//! Software-in-the-loop replays: the virtual plant runs at 1 Hz against the
//! online twin while scripted valve disturbances are applied, and a frozen
//! copy of the offline model is logged alongside for contrast.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channels::{exogenous_of, Channel};
use crate::cognitive::{
    handle_drift, online_retrain, transfer_warm_start, violation_indicator, CognitiveConfig, CognitiveError,
    CognitiveState, DriftCause, DriftCondition, DriftEvent, OfflineArtifact, OfflineInstance, RetrainBudget,
    RetrainReport,
};
use crate::plant::{advance_period, IntegratorConfig, PlantError, PlantInputs, PlantParams, PlantState, SqrtPolicy, TrajectorySample};

#[derive(Debug, Error)]
pub enum SilError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("plant failed at t={t}: {source}")]
    Plant { t: usize, source: PlantError },
    #[error("twin failed at t={t}: {source}")]
    Twin { t: usize, source: CognitiveError },
    #[error("artifact does not cover all six channels")]
    IncompleteArtifact,
    #[error("report I/O failed: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DisturbanceKind {
    Step,
    Ramp,
}

/// Valve disturbance. A step multiplies the opening by `magnitude`; a ramp
/// decreases it at `slope` (fraction of the baseline per second) until it
/// reaches `magnitude` times the baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disturbance {
    pub time: f64,
    /// Zero-based well whose reservoir valve is affected.
    pub valve: usize,
    pub kind: DisturbanceKind,
    pub magnitude: f64,
    pub slope: f64,
}

impl Disturbance {
    fn factor_at(&self, t: f64) -> f64 {
        if t < self.time {
            return 1.0;
        }
        match self.kind {
            DisturbanceKind::Step => self.magnitude,
            DisturbanceKind::Ramp => (1.0 - self.slope * (t - self.time)).max(self.magnitude),
        }
    }

    fn rate_at(&self, t: f64) -> f64 {
        match self.kind {
            DisturbanceKind::Ramp if t >= self.time && self.factor_at(t) > self.magnitude => -self.slope,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScript {
    pub id: u8,
    pub name: String,
    /// Run length, s.
    pub duration: usize,
    pub baseline: PlantInputs,
    pub disturbances: Vec<Disturbance>,
    pub drift_source_identified: bool,
}

impl ScenarioScript {
    pub fn validate(&self) -> Result<(), SilError> {
        for d in &self.disturbances {
            if !(d.time >= 0.0 && d.time < self.duration as f64) {
                return Err(SilError::InvalidScenario(format!("disturbance at {} s outside run", d.time)));
            }
            if d.valve >= 3 {
                return Err(SilError::InvalidScenario(format!("no valve {}", d.valve)));
            }
            let lo = self.baseline.valve[d.valve] * d.magnitude;
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&self.baseline.valve[d.valve]) || d.slope < 0.0 {
                return Err(SilError::InvalidScenario(format!(
                    "disturbance on valve {} leaves [0, 1]",
                    d.valve
                )));
            }
        }
        Ok(())
    }

    pub fn inputs_at(&self, t: f64) -> PlantInputs {
        let mut u = self.baseline;
        for d in &self.disturbances {
            u.valve[d.valve] = self.baseline.valve[d.valve] * d.factor_at(t);
        }
        u
    }

    /// Valve opening change per second at time t.
    pub fn valve_rate_at(&self, t: f64) -> [f64; 3] {
        let mut r = [0.0; 3];
        for d in &self.disturbances {
            r[d.valve] = self.baseline.valve[d.valve] * d.rate_at(t);
        }
        r
    }

    pub fn onset(&self) -> Option<usize> {
        self.disturbances
            .iter()
            .map(|d| d.time.ceil() as usize)
            .min()
    }

    /// Wells whose valve is disturbed.
    pub fn disturbed_wells(&self) -> Vec<usize> {
        let mut w: Vec<usize> = self.disturbances.iter().map(|d| d.valve).collect();
        w.sort_unstable();
        w.dedup();
        w
    }

    /// Baseline run without disturbances.
    pub fn quiet(duration: usize) -> Self {
        Self {
            id: 0,
            name: "no disturbance".into(),
            duration,
            baseline: PlantInputs::nominal(),
            disturbances: Vec::new(),
            drift_source_identified: true,
        }
    }
}

pub fn scenario_library() -> Vec<ScenarioScript> {
    let baseline = PlantInputs::nominal();
    vec![
        ScenarioScript {
            id: 1,
            name: "CV101 step degradation, source identified".into(),
            duration: 10_000,
            baseline,
            disturbances: vec![Disturbance {
                time: 2700.0,
                valve: 0,
                kind: DisturbanceKind::Step,
                magnitude: 0.5,
                slope: 0.0,
            }],
            drift_source_identified: true,
        },
        ScenarioScript {
            id: 2,
            name: "CV102 step reduction, source unknown".into(),
            duration: 12_000,
            baseline,
            disturbances: vec![Disturbance {
                time: 2700.0,
                valve: 1,
                kind: DisturbanceKind::Step,
                magnitude: 0.25,
                slope: 0.0,
            }],
            drift_source_identified: false,
        },
        ScenarioScript {
            id: 3,
            name: "CV103 continuous degeneration, source identified".into(),
            duration: 10_000,
            baseline,
            disturbances: vec![Disturbance {
                time: 2700.0,
                valve: 2,
                kind: DisturbanceKind::Ramp,
                magnitude: 0.4,
                slope: 0.6 / 5000.0,
            }],
            drift_source_identified: true,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SilSettings {
    pub params: PlantParams,
    pub integrator: IntegratorConfig,
    pub cognitive: CognitiveConfig,
    pub retrain: RetrainBudget,
    pub offline: OfflineInstance,
    /// Seconds the plant settles at the baseline before t = 0.
    pub settle: usize,
    /// Samples per segment when live data is used for retraining.
    pub segment_len: usize,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelTrace {
    pub channel: Channel,
    pub measured: Vec<f64>,
    pub twin: Vec<f64>,
    pub inf: Vec<f64>,
    pub sup: Vec<f64>,
    pub indicator: Vec<u8>,
    pub z: Vec<usize>,
    pub triggered: Vec<bool>,
    pub static_model: Vec<f64>,
}

impl ChannelTrace {
    fn new(channel: Channel, n: usize) -> Self {
        Self {
            channel,
            measured: Vec::with_capacity(n),
            twin: Vec::with_capacity(n),
            inf: Vec::with_capacity(n),
            sup: Vec::with_capacity(n),
            indicator: Vec::with_capacity(n),
            z: Vec::with_capacity(n),
            triggered: Vec::with_capacity(n),
            static_model: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.measured.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measured.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SilLog {
    pub scenario: ScenarioScript,
    pub t: Vec<usize>,
    pub valves: Vec<[f64; 3]>,
    pub channels: Vec<ChannelTrace>,
    pub events: Vec<DriftEvent>,
    pub retrains: Vec<RetrainReport>,
    pub clamped_flows: usize,
    pub noise_seed: u64,
    pub artifact_fingerprint: String,
}

impl SilLog {
    pub fn empty(scenario: ScenarioScript) -> Self {
        Self {
            scenario,
            t: Vec::new(),
            valves: Vec::new(),
            channels: Channel::all().into_iter().map(|c| ChannelTrace::new(c, 0)).collect(),
            events: Vec::new(),
            retrains: Vec::new(),
            clamped_flows: 0,
            noise_seed: 0,
            artifact_fingerprint: String::new(),
        }
    }
}

enum Mode {
    Monitoring,
    Collecting { event: usize, buffer: Vec<TrajectorySample> },
}

struct PendingZ {
    event: usize,
    at: usize,
    channels: Vec<usize>,
}

fn retrain_channels(
    twin: &mut crate::cognitive::OnlineTwin,
    channels: &[usize],
    data: &crate::cognitive::RetrainData,
    budget: &RetrainBudget,
    t: usize,
) -> Result<Vec<RetrainReport>, SilError> {
    channels
        .iter()
        .map(|&c| {
            let b = RetrainBudget {
                seed: budget.seed ^ ((t as u64) << 8) ^ c as u64,
                ..*budget
            };
            online_retrain(&mut twin.models[c], data, &b).map_err(|source| SilError::Twin { t, source })
        })
        .collect()
}

pub fn run_scenario(
    script: &ScenarioScript,
    artifact: &OfflineArtifact,
    settings: &SilSettings,
) -> Result<SilLog, SilError> {
    script.validate()?;
    settings.cognitive.validate().map_err(|source| SilError::Twin { t: 0, source })?;
    if artifact.models.len() != 6 {
        return Err(SilError::IncompleteArtifact);
    }
    let mut twin = transfer_warm_start(artifact, settings.noise_seed).map_err(|source| SilError::Twin { t: 0, source })?;
    let mut frozen = twin.clone();
    let cfg = settings.cognitive;
    let n_ch = twin.models.len();
    let max_lag = twin.models.iter().map(|m| m.embedding.max_lag()).max().unwrap_or(1);
    let channels: Vec<Channel> = twin.models.iter().map(|m| m.channel).collect();

    let plant_err = |t: usize| move |source| SilError::Plant { t, source };
    let mut state = PlantState::initial(&settings.params, 0.8);
    let mut clamped = 0;
    let mut history: Vec<TrajectorySample> = Vec::new();
    for k in 0..settings.settle.max(max_lag) {
        history.push(TrajectorySample {
            t: state.t,
            inputs: script.baseline,
            state,
        });
        let (next, c) = advance_period(&state, &script.baseline, &settings.params, &settings.integrator, SqrtPolicy::ClampToZero)
            .map_err(plant_err(k))?;
        state = next;
        clamped += c;
    }
    history.drain(..history.len() - max_lag);
    state.t = 0.0;
    let mut y_hist: Vec<Vec<f64>> = channels
        .iter()
        .map(|c| history.iter().map(|s| c.value(s)).collect())
        .collect();
    let mut u_hist: Vec<Vec<f64>> = history.iter().map(exogenous_of).collect();

    let mut monitors: Vec<CognitiveState> = (0..n_ch)
        .map(|_| CognitiveState::new(cfg))
        .collect::<Result<_, _>>()
        .map_err(|source| SilError::Twin { t: 0, source })?;
    let mut log = SilLog::empty(script.clone());
    log.channels = channels.iter().map(|&c| ChannelTrace::new(c, script.duration)).collect();
    log.noise_seed = settings.noise_seed;
    log.artifact_fingerprint = artifact.fingerprint.clone();
    let mut mode = Mode::Monitoring;
    let mut flagged = vec![false; n_ch];
    let mut pending: Vec<PendingZ> = Vec::new();
    let cause = if script.drift_source_identified {
        DriftCause::SourceIdentified
    } else {
        DriftCause::SourceUnknown
    };

    for t in 0..script.duration {
        let inputs = script.inputs_at(t as f64);
        let sample = TrajectorySample {
            t: t as f64,
            inputs,
            state,
        };
        log.t.push(t);
        log.valves.push(inputs.valve);
        let mut any_trigger = false;
        for c in 0..n_ch {
            let measured = channels[c].value(&sample);
            let pred = twin.one_step(c, &y_hist[c], &u_hist, cfg.confidence);
            let stat = frozen.map_prediction(c, &y_hist[c], &u_hist);
            let ind = violation_indicator(measured, pred.region.lower, pred.region.upper)
                .map_err(|source| SilError::Twin { t, source })?;
            let up = monitors[c].update(ind);
            if up.trigger {
                flagged[c] = true;
                any_trigger = true;
            }
            let tr = &mut log.channels[c];
            tr.measured.push(measured);
            tr.twin.push(pred.point);
            tr.inf.push(pred.region.lower);
            tr.sup.push(pred.region.upper);
            tr.indicator.push(ind);
            tr.z.push(up.z);
            tr.triggered.push(up.trigger);
            tr.static_model.push(stat);
            y_hist[c].push(measured);
        }
        u_hist.push(exogenous_of(&sample));

        pending.retain(|p| {
            if t >= p.at {
                let z = p.channels.iter().map(|&c| monitors[c].z()).max().unwrap_or(0);
                log.events[p.event].post_retrain_z = Some(z);
                false
            } else {
                true
            }
        });

        let mut swap: Option<(usize, crate::cognitive::RetrainData)> = None;
        match &mut mode {
            Mode::Monitoring if any_trigger => {
                let names = (0..n_ch).filter(|&c| flagged[c]).map(|c| channels[c].name()).collect();
                log.events.push(DriftEvent {
                    detection_step: t,
                    cause,
                    action: cause.action(),
                    channels: names,
                    retrain_step: None,
                    post_retrain_z: None,
                    truncated: false,
                });
                let event = log.events.len() - 1;
                log::info!("scenario {}: drift detected at t={t}", script.id);
                match cause {
                    DriftCause::SourceIdentified => {
                        let condition = DriftCondition {
                            state,
                            inputs,
                            valve_rate: script.valve_rate_at(t as f64),
                        };
                        let data = handle_drift(cause, Some(&settings.offline), &condition, &[], &cfg, settings.segment_len)
                            .map_err(|source| SilError::Twin { t, source })?;
                        swap = Some((event, data));
                    }
                    DriftCause::SourceUnknown => {
                        mode = Mode::Collecting {
                            event,
                            buffer: Vec::with_capacity(cfg.wait_buffer),
                        };
                    }
                }
            }
            Mode::Collecting { event, buffer } => {
                buffer.push(sample);
                if buffer.len() >= cfg.wait_buffer {
                    let condition = DriftCondition {
                        state,
                        inputs,
                        valve_rate: [0.0; 3],
                    };
                    let data = handle_drift(cause, None, &condition, buffer, &cfg, settings.segment_len)
                        .map_err(|source| SilError::Twin { t, source })?;
                    swap = Some((*event, data));
                }
            }
            Mode::Monitoring => {}
        }
        if let Some((event, data)) = swap {
            let retrained: Vec<usize> = (0..n_ch).filter(|&c| flagged[c]).collect();
            let reports = retrain_channels(&mut twin, &retrained, &data, &settings.retrain, t)?;
            log.retrains.extend(reports);
            log.events[event].retrain_step = Some(t);
            for m in monitors.iter_mut() {
                m.reset_window();
            }
            pending.push(PendingZ {
                event,
                at: t + cfg.horizon,
                channels: retrained,
            });
            flagged.iter_mut().for_each(|f| *f = false);
            mode = Mode::Monitoring;
        }

        let (next, c) = advance_period(&state, &inputs, &settings.params, &settings.integrator, SqrtPolicy::ClampToZero)
            .map_err(plant_err(t))?;
        if c > 0 {
            log::warn!("t={t}: {c} reversed-pressure flows clamped to zero");
        }
        clamped += c;
        state = next;
    }
    for p in pending {
        let z = p.channels.iter().map(|&c| monitors[c].z()).max().unwrap_or(0);
        log.events[p.event].post_retrain_z = Some(z);
    }
    if let Mode::Collecting { event, .. } = mode {
        log.events[event].truncated = true;
    }
    log.clamped_flows = clamped;
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMetrics {
    pub channel: String,
    pub static_mse_post: f64,
    pub twin_mse_post: f64,
    pub static_mse_pre: f64,
    pub twin_mse_pre: f64,
    /// static / twin post-disturbance MSE.
    pub improvement: f64,
    /// Around the first retrain of this channel, or the first retrain of any channel if it never had one.
    pub violation_fraction_pre_retrain: Option<f64>,
    pub violation_fraction_post_retrain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftMetrics {
    pub scenario: u8,
    pub onset: Option<usize>,
    pub first_trigger: Option<usize>,
    pub time_to_trigger: Option<usize>,
    pub first_retrain: Option<usize>,
    pub time_to_recovery: Option<usize>,
    pub triggers: usize,
    pub retrain_events: usize,
    pub channels: Vec<ChannelMetrics>,
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return f64::NAN;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

fn fraction(ind: &[u8]) -> Option<f64> {
    (!ind.is_empty()).then(|| ind.iter().map(|&v| f64::from(v)).sum::<f64>() / ind.len() as f64)
}

/// Per-channel contrast of the adaptive twin against the frozen model.
pub fn compare_static_vs_dt(log: &SilLog, horizon: usize) -> DriftMetrics {
    let n = log.t.len();
    let onset = log.scenario.onset().map(|o| o.min(n));
    let split = onset.unwrap_or(n);
    let first_trigger = log.events.first().map(|e| e.detection_step);
    let first_retrain = log.events.iter().find_map(|e| e.retrain_step);
    let channels = log
        .channels
        .iter()
        .map(|tr| {
            let static_post = mse(&tr.static_model[split..], &tr.measured[split..]);
            let twin_post = mse(&tr.twin[split..], &tr.measured[split..]);
            let own = log
                .events
                .iter()
                .filter(|e| e.channels.contains(&tr.channel.name()))
                .find_map(|e| e.retrain_step);
            let (pre, post) = match own.or(first_retrain) {
                Some(r) => {
                    let lo = r.saturating_sub(horizon);
                    let hi = (r + 1 + horizon).min(n);
                    (fraction(&tr.indicator[lo..r]), fraction(&tr.indicator[(r + 1).min(n)..hi]))
                }
                None => (None, None),
            };
            ChannelMetrics {
                channel: tr.channel.name(),
                static_mse_post: static_post,
                twin_mse_post: twin_post,
                static_mse_pre: mse(&tr.static_model[..split], &tr.measured[..split]),
                twin_mse_pre: mse(&tr.twin[..split], &tr.measured[..split]),
                improvement: static_post / twin_post,
                violation_fraction_pre_retrain: pre,
                violation_fraction_post_retrain: post,
            }
        })
        .collect();
    DriftMetrics {
        scenario: log.scenario.id,
        onset,
        first_trigger,
        time_to_trigger: match (first_trigger, onset) {
            (Some(t), Some(o)) => Some(t.saturating_sub(o)),
            _ => None,
        },
        first_retrain,
        time_to_recovery: match (first_retrain, onset) {
            (Some(r), Some(o)) => Some(r.saturating_sub(o)),
            _ => None,
        },
        triggers: log.events.len(),
        retrain_events: log.events.iter().filter(|e| e.retrain_step.is_some()).count(),
        channels,
    }
}

pub const CHANNEL_CSV_HEADER: &str = "t,channel,measured,inf,sup,indicator,Z,triggered,twin,static";

pub fn channel_csv(log: &SilLog, c: usize) -> String {
    let tr = &log.channels[c];
    let name = tr.channel.name();
    let mut s = String::with_capacity(64 * tr.len() + 64);
    s.push_str(CHANNEL_CSV_HEADER);
    s.push('\n');
    for i in 0..tr.len() {
        s.push_str(&format!(
            "{},{},{:?},{:?},{:?},{},{},{},{:?},{:?}\n",
            log.t[i],
            name,
            tr.measured[i],
            tr.inf[i],
            tr.sup[i],
            tr.indicator[i],
            tr.z[i],
            u8::from(tr.triggered[i]),
            tr.twin[i],
            tr.static_model[i]
        ));
    }
    s
}

/// Writes `channels/<well>_<var>.csv`, `events.jsonl` and `summary.json`.
pub fn emit_report(log: &SilLog, metrics: &DriftMetrics, dir: &Path) -> Result<(), SilError> {
    let ch_dir = dir.join("channels");
    fs::create_dir_all(&ch_dir)?;
    for (c, tr) in log.channels.iter().enumerate() {
        fs::write(ch_dir.join(format!("{}.csv", tr.channel.name())), channel_csv(log, c))?;
    }
    let mut events = fs::File::create(dir.join("events.jsonl"))?;
    for e in &log.events {
        serde_json::to_writer(&mut events, e).map_err(std::io::Error::other)?;
        events.write_all(b"\n")?;
    }
    let summary = serde_json::json!({
        "scenario": log.scenario,
        "noise_seed": log.noise_seed,
        "artifact_fingerprint": log.artifact_fingerprint,
        "clamped_flows": log.clamped_flows,
        "retrains": log.retrains,
        "metrics": metrics,
    });
    let mut text = serde_json::to_string_pretty(&summary).map_err(std::io::Error::other)?;
    text.push('\n');
    fs::write(dir.join("summary.json"), text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn library_matches_scripted_parameters() {
        let lib = scenario_library();
        assert_eq!(lib.len(), 3);
        let s2 = &lib[1];
        assert_eq!(s2.disturbances[0].time, 2700.0);
        assert_eq!(s2.disturbances[0].magnitude, 0.25);
        assert!(!s2.drift_source_identified);
        assert!(lib[0].drift_source_identified && lib[2].drift_source_identified);
        assert_eq!((lib[0].duration, s2.duration, lib[2].duration), (10_000, 12_000, 10_000));
        for s in &lib {
            s.validate().unwrap();
        }
    }

    #[test]
    fn disturbances_apply_exactly() {
        let lib = scenario_library();
        assert_eq!(lib[1].inputs_at(2699.0).valve[1], 1.0);
        assert_eq!(lib[1].inputs_at(2700.0).valve[1], 0.25);
        let ramp = &lib[2];
        assert_eq!(ramp.inputs_at(2700.0).valve[2], 1.0);
        assert!((ramp.inputs_at(5200.0).valve[2] - 0.7).abs() < 1e-12);
        assert!((ramp.inputs_at(7700.0).valve[2] - 0.4).abs() < 1e-12);
        assert_eq!(ramp.inputs_at(9000.0).valve[2], 0.4);
        assert_eq!(ramp.valve_rate_at(9000.0)[2], 0.0);
        assert!((ramp.valve_rate_at(3000.0)[2] + 1.2e-4).abs() < 1e-15);
    }

    #[test]
    fn empty_log_emits_headers_only() {
        let dir = tempfile::tempdir().unwrap();
        let log = SilLog::empty(ScenarioScript::quiet(0));
        let m = compare_static_vs_dt(&log, 100);
        emit_report(&log, &m, dir.path()).unwrap();
        let csv = fs::read_to_string(dir.path().join("channels/well1_mg.csv")).unwrap();
        assert_eq!(csv, format!("{CHANNEL_CSV_HEADER}\n"));
        assert_eq!(fs::read_to_string(dir.path().join("events.jsonl")).unwrap(), "");
        let first = fs::read(dir.path().join("summary.json")).unwrap();
        emit_report(&log, &m, dir.path()).unwrap();
        assert_eq!(first, fs::read(dir.path().join("summary.json")).unwrap());
    }
}
