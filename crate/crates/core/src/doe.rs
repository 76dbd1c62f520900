//! Design of experiments: Latin hypercube plans, input schedules, correlation
//! audit and Gram-Schmidt input ranking.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plant::{
    advance_period, max_relative_derivative, IntegratorConfig, PlantError, PlantInputs,
    PlantParams, PlantState, SqrtPolicy, TrajectorySample,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DoeError {
    #[error("invalid bounds for `{name}`: [{min}, {max}]")]
    InvalidBounds { name: String, min: f64, max: f64 },
    #[error("column `{0}` has zero variance")]
    DegenerateColumn(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("plant failure in experiment {experiment}: {source}")]
    Plant {
        experiment: usize,
        #[source]
        source: PlantError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

impl Dimension {
    pub fn new(name: &str, min: f64, max: f64) -> Self {
        Self {
            name: name.to_string(),
            min,
            max,
        }
    }
}

/// Operating box of the four manipulated inputs.
pub fn gas_lift_bounds() -> Vec<Dimension> {
    vec![
        Dimension::new("Qg1", 1.0, 5.0),
        Dimension::new("Qg2", 1.0, 5.0),
        Dimension::new("Qg3", 1.0, 5.0),
        Dimension::new("Ppump", 1.3, 4.0),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub bounds: Vec<Dimension>,
    /// Row-major, one row per experiment.
    pub matrix: Vec<Vec<f64>>,
    pub seed: u64,
}

impl ExperimentPlan {
    pub fn n_experiments(&self) -> usize {
        self.matrix.len()
    }

    pub fn dims(&self) -> usize {
        self.bounds.len()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.matrix.iter().map(|r| r[j]).collect()
    }

    /// Stratum index of every entry of column `j`.
    pub fn strata(&self, j: usize) -> Vec<usize> {
        let n = self.n_experiments();
        let d = &self.bounds[j];
        self.matrix
            .iter()
            .map(|r| {
                let u = (r[j] - d.min) / (d.max - d.min);
                ((u * n as f64).floor() as usize).min(n - 1)
            })
            .collect()
    }

    /// Restricts the plan to a subset of its columns.
    pub fn project(&self, cols: &[usize]) -> ExperimentPlan {
        ExperimentPlan {
            bounds: cols.iter().map(|&j| self.bounds[j].clone()).collect(),
            matrix: self
                .matrix
                .iter()
                .map(|r| cols.iter().map(|&j| r[j]).collect())
                .collect(),
            seed: self.seed,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = self
            .bounds
            .iter()
            .map(|d| d.name.as_str())
            .collect::<Vec<_>>()
            .join(",");
        out.push('\n');
        for row in &self.matrix {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn metadata_json(&self) -> serde_json::Value {
        serde_json::json!({
            "seed": self.seed,
            "n_experiments": self.n_experiments(),
            "bounds": self.bounds,
        })
    }
}

/// Latin hypercube sample with uniform jitter inside each stratum.
pub fn lhs_sample(n: usize, bounds: &[Dimension], seed: u64) -> Result<ExperimentPlan, DoeError> {
    if n == 0 {
        return Err(DoeError::InvalidArgument("lhs_sample needs n >= 1".into()));
    }
    for d in bounds {
        if !(d.min < d.max) || !d.min.is_finite() || !d.max.is_finite() {
            return Err(DoeError::InvalidBounds {
                name: d.name.clone(),
                min: d.min,
                max: d.max,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut matrix = vec![vec![0.0; bounds.len()]; n];
    let mut strata: Vec<usize> = (0..n).collect();
    for (j, d) in bounds.iter().enumerate() {
        strata.shuffle(&mut rng);
        for (i, &k) in strata.iter().enumerate() {
            let u = (k as f64 + rng.random::<f64>()) / n as f64;
            // u < 1 by construction; guard against rounding onto the upper edge
            let v = d.min + u * (d.max - d.min);
            matrix[i][j] = if v >= d.max { d.max - (d.max - d.min) * 1e-12 } else { v };
        }
    }
    Ok(ExperimentPlan {
        bounds: bounds.to_vec(),
        matrix,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationAudit {
    pub names: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    pub max_offdiag_abs: f64,
}

pub fn pearson_matrix(columns: &[Vec<f64>], names: &[String]) -> Result<Vec<Vec<f64>>, DoeError> {
    let d = columns.len();
    let centred: Vec<(Vec<f64>, f64)> = columns
        .iter()
        .zip(names)
        .map(|(c, name)| {
            let mean = c.iter().sum::<f64>() / c.len() as f64;
            let v: Vec<f64> = c.iter().map(|x| x - mean).collect();
            let ss = v.iter().map(|x| x * x).sum::<f64>();
            if ss <= 0.0 {
                Err(DoeError::DegenerateColumn(name.clone()))
            } else {
                Ok((v, ss.sqrt()))
            }
        })
        .collect::<Result<_, _>>()?;
    let mut m = vec![vec![0.0; d]; d];
    for i in 0..d {
        m[i][i] = 1.0;
        for j in (i + 1)..d {
            let dot: f64 = centred[i].0.iter().zip(&centred[j].0).map(|(a, b)| a * b).sum();
            let r = (dot / (centred[i].1 * centred[j].1)).clamp(-1.0, 1.0);
            m[i][j] = r;
            m[j][i] = r;
        }
    }
    Ok(m)
}

pub fn correlation_audit(plan: &ExperimentPlan) -> Result<CorrelationAudit, DoeError> {
    if plan.n_experiments() < 3 {
        return Err(DoeError::InvalidArgument(
            "correlation audit needs at least 3 experiments".into(),
        ));
    }
    let names: Vec<String> = plan.bounds.iter().map(|d| d.name.clone()).collect();
    let cols: Vec<Vec<f64>> = (0..plan.dims()).map(|j| plan.column(j)).collect();
    let matrix = pearson_matrix(&cols, &names)?;
    let mut max_offdiag_abs: f64 = 0.0;
    for (i, row) in matrix.iter().enumerate() {
        for (j, r) in row.iter().enumerate() {
            if i != j {
                max_offdiag_abs = max_offdiag_abs.max(r.abs());
            }
        }
    }
    Ok(CorrelationAudit {
        names,
        matrix,
        max_offdiag_abs,
    })
}

/// Piecewise-constant input signal: one plateau per plan row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSchedule {
    /// Samples per plateau (1 s sampling).
    pub hold: usize,
    pub plateaus: Vec<PlantInputs>,
}

impl InputSchedule {
    pub fn len(&self) -> usize {
        self.hold * self.plateaus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn at(&self, k: usize) -> &PlantInputs {
        &self.plateaus[k / self.hold]
    }

    pub fn iter(&self) -> impl Iterator<Item = &PlantInputs> + '_ {
        self.plateaus
            .iter()
            .flat_map(move |p| std::iter::repeat_n(p, self.hold))
    }
}

/// Writes a named plan value into the matching input field.
pub fn set_named_input(inputs: &mut PlantInputs, name: &str, value: f64) -> Result<(), DoeError> {
    match name {
        "Qg1" => inputs.q_g[0] = value,
        "Qg2" => inputs.q_g[1] = value,
        "Qg3" => inputs.q_g[2] = value,
        "Ppump" => inputs.p_pump = value,
        "CV101" => inputs.valve[0] = value,
        "CV102" => inputs.valve[1] = value,
        "CV103" => inputs.valve[2] = value,
        other => {
            return Err(DoeError::InvalidArgument(format!(
                "plan column `{other}` does not name a plant input"
            )))
        }
    }
    Ok(())
}

pub fn build_input_sequence(
    plan: &ExperimentPlan,
    hold_duration: f64,
    baseline: &PlantInputs,
) -> Result<InputSchedule, DoeError> {
    if !(hold_duration >= 1.0) {
        return Err(DoeError::InvalidArgument(format!(
            "hold duration must be at least 1 s, got {hold_duration}"
        )));
    }
    let plateaus = plan
        .matrix
        .iter()
        .map(|row| {
            let mut u = *baseline;
            for (d, v) in plan.bounds.iter().zip(row) {
                set_named_input(&mut u, &d.name, *v)?;
            }
            Ok(u)
        })
        .collect::<Result<_, DoeError>>()?;
    Ok(InputSchedule {
        hold: hold_duration.round() as usize,
        plateaus,
    })
}

/// Logged response of the plant to a whole schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub samples: Vec<TrajectorySample>,
    pub plateau_len: usize,
    /// Steady-state flag at the end of each plateau.
    pub steady: Vec<bool>,
    pub final_state: PlantState,
}

impl Corpus {
    pub fn n_plateaus(&self) -> usize {
        self.samples.len().checked_div(self.plateau_len).unwrap_or(0)
    }

    pub fn plateau(&self, e: usize) -> &[TrajectorySample] {
        &self.samples[e * self.plateau_len..(e + 1) * self.plateau_len]
    }
}

/// Runs the plant through the schedule, logging once per sample period.
pub fn run_schedule(
    schedule: &InputSchedule,
    params: &PlantParams,
    initial: &PlantState,
    cfg: &IntegratorConfig,
) -> Result<Corpus, DoeError> {
    let mut samples = Vec::with_capacity(schedule.len());
    let mut steady = Vec::with_capacity(schedule.plateaus.len());
    let mut s = *initial;
    for (e, u) in schedule.plateaus.iter().enumerate() {
        let fail = |source| DoeError::Plant {
            experiment: e,
            source,
        };
        for _ in 0..schedule.hold {
            samples.push(TrajectorySample {
                t: s.t,
                inputs: *u,
                state: s,
            });
            s = advance_period(&s, u, params, cfg, SqrtPolicy::Strict)
                .map_err(fail)?
                .0;
        }
        steady.push(max_relative_derivative(&s, u, params).map_err(fail)? < cfg.steady_tol);
    }
    Ok(Corpus {
        samples,
        plateau_len: schedule.hold,
        steady,
        final_state: s,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedVariable {
    pub name: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableRanking {
    pub ranking: Vec<RankedVariable>,
}

impl VariableRanking {
    pub fn names(&self) -> Vec<&str> {
        self.ranking.iter().map(|r| r.name.as_str()).collect()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.ranking.iter().position(|r| r.name == name)
    }
}

fn centred(v: &[f64]) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - mean).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Greedy forward selection by Gram-Schmidt orthogonalisation against a
/// single output.
pub fn gram_schmidt_rank(
    names: &[String],
    candidates: &[Vec<f64>],
    output: &[f64],
) -> Result<VariableRanking, DoeError> {
    gram_schmidt_rank_multi(names, candidates, &[output.to_vec()])
}

/// Multi-output variant: a candidate's score is its incremental explained
/// variance averaged over the outputs.
pub fn gram_schmidt_rank_multi(
    names: &[String],
    candidates: &[Vec<f64>],
    outputs: &[Vec<f64>],
) -> Result<VariableRanking, DoeError> {
    if candidates.len() < 2 || names.len() != candidates.len() {
        return Err(DoeError::InvalidArgument(
            "ranking needs at least two named candidates".into(),
        ));
    }
    let n = outputs.first().map_or(0, Vec::len);
    if n < 2 || candidates.iter().chain(outputs).any(|c| c.len() != n) {
        return Err(DoeError::InvalidArgument(
            "candidate and output columns must share a length of at least 2".into(),
        ));
    }
    let ys: Vec<(Vec<f64>, f64)> = outputs
        .iter()
        .enumerate()
        .map(|(k, y)| {
            let c = centred(y);
            let ss = dot(&c, &c);
            if ss <= 0.0 {
                Err(DoeError::DegenerateColumn(format!("output {k}")))
            } else {
                Ok((c, ss))
            }
        })
        .collect::<Result<_, _>>()?;
    let mut pool: Vec<(String, Vec<f64>, f64)> = names
        .iter()
        .zip(candidates)
        .map(|(name, c)| {
            let v = centred(c);
            let ss = dot(&v, &v);
            if ss <= 0.0 {
                Err(DoeError::DegenerateColumn(name.clone()))
            } else {
                Ok((name.clone(), v, ss))
            }
        })
        .collect::<Result<_, _>>()?;

    let mut ranking = Vec::with_capacity(pool.len());
    while !pool.is_empty() {
        let scores: Vec<f64> = pool
            .iter()
            .map(|(_, v, ss0)| {
                let vv = dot(v, v);
                // numerically collinear with what is already selected
                if vv <= ss0 * 1e-12 {
                    return 0.0;
                }
                ys.iter().map(|(y, yy)| dot(v, y).powi(2) / (vv * yy)).sum::<f64>()
                    / ys.len() as f64
            })
            .collect();
        let best = (0..pool.len())
            .max_by(|&a, &b| {
                scores[a]
                    .partial_cmp(&scores[b])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| pool[b].0.cmp(&pool[a].0))
            })
            .expect("pool is non-empty");
        let (name, basis, _) = pool.swap_remove(best);
        let score = scores[best].clamp(0.0, 1.0);
        let bb = dot(&basis, &basis);
        if bb > 0.0 {
            for (_, v, _) in pool.iter_mut() {
                let coef = dot(v, &basis) / bb;
                for (x, b) in v.iter_mut().zip(&basis) {
                    *x -= coef * b;
                }
            }
        }
        ranking.push(RankedVariable { name, score });
    }
    Ok(VariableRanking { ranking })
}
