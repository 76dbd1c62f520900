//! NARX structure identification: Lipschitz coefficients and index, embedding
//! selection, and MISO regressor datasets.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StructureError {
    #[error("every sample pair has zero input distance")]
    AllPairsDegenerate,
    #[error("need {needed} finite coefficients, have {available}")]
    InsufficientPairs { needed: usize, available: usize },
    #[error("Lipschitz index never flattens up to n = {n_max} ({stage})")]
    NoPlateau { n_max: usize, stage: &'static str },
    #[error("plateau {segment} has {len} samples, needs at least {needed}")]
    TooShortPlateau {
        segment: usize,
        len: usize,
        needed: usize,
    },
    #[error("{0}")]
    InvalidArgument(String),
}

/// Pairwise quotients |y_i - y_j| / ||x_i - x_j|| over every pair of rows.
/// Pairs with zero input distance are skipped.
pub fn lipschitz_coefficients(x: &[Vec<f64>], y: &[f64]) -> Result<Vec<f64>, StructureError> {
    if x.len() < 2 || x.len() != y.len() {
        return Err(StructureError::InvalidArgument(
            "need at least two aligned samples".into(),
        ));
    }
    let m = x[0].len();
    if m == 0 || x.iter().any(|r| r.len() != m) {
        return Err(StructureError::InvalidArgument(
            "input rows must share a non-zero width".into(),
        ));
    }
    let n = x.len();
    let mut q = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let d2: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 > 0.0 {
                q.push((y[i] - y[j]).abs() / d2.sqrt());
            }
        }
    }
    if q.is_empty() {
        return Err(StructureError::AllPairsDegenerate);
    }
    Ok(q)
}

/// Geometric mean of the `p` largest coefficients, each scaled by sqrt(n).
pub fn lipschitz_index(coefficients: &[f64], n: usize, p: usize) -> Result<f64, StructureError> {
    if p == 0 || n == 0 {
        return Err(StructureError::InvalidArgument("p and n must be >= 1".into()));
    }
    let mut finite: Vec<f64> = coefficients.iter().copied().filter(|q| q.is_finite()).collect();
    if finite.len() < p {
        return Err(StructureError::InsufficientPairs {
            needed: p,
            available: finite.len(),
        });
    }
    finite.sort_unstable_by(|a, b| b.total_cmp(a));
    let scale = (n as f64).sqrt();
    let log_sum: f64 = finite[..p].iter().map(|q| (scale * q).ln()).sum();
    Ok((log_sum / p as f64).exp())
}

/// Lagged regressor rows `[y(t-1..t-nb), u(t-1)..u(t-na)]` over a contiguous
/// series; each `u(t-k)` contributes all input channels.
pub fn lagged_rows(u: &[Vec<f64>], y: &[f64], na: usize, nb: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let k = na.max(nb);
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for t in k..y.len() {
        let mut r = Vec::with_capacity(nb + na * u.first().map_or(0, Vec::len));
        r.extend((1..=nb).map(|l| y[t - l]));
        for l in 1..=na {
            r.extend_from_slice(&u[t - l]);
        }
        rows.push(r);
        targets.push(y[t]);
    }
    (rows, targets)
}

fn standardize_columns(rows: &mut [Vec<f64>]) {
    let Some(width) = rows.first().map(Vec::len) else {
        return;
    };
    let n = rows.len() as f64;
    for j in 0..width {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for r in rows.iter_mut() {
            r[j] = (r[j] - mean) / sd;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub n_max: usize,
    pub plateau_rel_tol: f64,
    /// Rows kept for the all-pairs evaluation.
    pub max_rows: usize,
    /// p as a fraction of the rows used.
    pub p_fraction: f64,
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            n_max: 8,
            plateau_rel_tol: 0.05,
            max_rows: 2000,
            p_fraction: 0.015,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzAnalysis {
    pub tested: Vec<usize>,
    /// Index with the same lag count on inputs and outputs.
    pub q_index: Vec<f64>,
    pub p: usize,
    pub chosen_n: usize,
    /// Index over output lags with the input lags fixed at `chosen_n`.
    pub output_curve: Vec<f64>,
    /// Index over input lags with the output lags fixed at `n_b`.
    pub input_curve: Vec<f64>,
    pub n_a: usize,
    pub n_b: usize,
}

/// Lipschitz index of the embedding `(na, nb)` on a contiguous series.
pub fn embedding_index(
    u: &[Vec<f64>],
    y: &[f64],
    na: usize,
    nb: usize,
    cfg: &EmbeddingConfig,
) -> Result<(f64, usize), StructureError> {
    let (mut rows, mut targets) = lagged_rows(u, y, na, nb);
    if rows.len() > cfg.max_rows {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut keep = rand::seq::index::sample(&mut rng, rows.len(), cfg.max_rows).into_vec();
        keep.sort_unstable();
        rows = keep.iter().map(|&i| std::mem::take(&mut rows[i])).collect();
        targets = keep.iter().map(|&i| targets[i]).collect();
    }
    standardize_columns(&mut rows);
    let width = rows.first().map_or(0, Vec::len);
    let p = ((cfg.p_fraction * rows.len() as f64).ceil() as usize).max(1);
    let q = lipschitz_coefficients(&rows, &targets)?;
    Ok((lipschitz_index(&q, width, p)?, p))
}

/// Smallest n (1-based) after which the curve stops falling by more than
/// `tol` relative to its current value.
pub fn plateau_point(curve: &[f64], tol: f64) -> Option<usize> {
    curve
        .windows(2)
        .position(|w| w[0] > 0.0 && (w[0] - w[1]) / w[0] < tol)
        .map(|i| i + 1)
}

/// Joint lag count first, then output lags at that input order, then input
/// lags at the chosen output order.
pub fn select_embedding(
    u: &[Vec<f64>],
    y: &[f64],
    cfg: &EmbeddingConfig,
) -> Result<LipschitzAnalysis, StructureError> {
    if cfg.n_max < 2 {
        return Err(StructureError::InvalidArgument("n_max must be >= 2".into()));
    }
    if u.len() != y.len() || y.len() <= cfg.n_max + 2 {
        return Err(StructureError::InvalidArgument(
            "series too short for the tested lag range".into(),
        ));
    }
    let tested: Vec<usize> = (1..=cfg.n_max).collect();
    let curve = |f: &dyn Fn(usize) -> (usize, usize)| -> Result<(Vec<f64>, usize), StructureError> {
        let mut p = 0;
        let q = tested
            .iter()
            .map(|&n| {
                let (na, nb) = f(n);
                let (q, pp) = embedding_index(u, y, na, nb, cfg)?;
                p = pp;
                Ok(q)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok((q, p))
    };
    let (q_index, p) = curve(&|n| (n, n))?;
    let chosen_n = plateau_point(&q_index, cfg.plateau_rel_tol).ok_or(StructureError::NoPlateau {
        n_max: cfg.n_max,
        stage: "joint",
    })?;
    let (output_curve, _) = curve(&|n| (chosen_n, n))?;
    let n_b = plateau_point(&output_curve, cfg.plateau_rel_tol).ok_or(
        StructureError::NoPlateau {
            n_max: cfg.n_max,
            stage: "output lags",
        },
    )?;
    let (input_curve, _) = curve(&|n| (n, n_b))?;
    let n_a = plateau_point(&input_curve, cfg.plateau_rel_tol).ok_or(
        StructureError::NoPlateau {
            n_max: cfg.n_max,
            stage: "input lags",
        },
    )?;
    Ok(LipschitzAnalysis {
        tested,
        q_index,
        p,
        chosen_n,
        output_curve,
        input_curve,
        n_a,
        n_b,
    })
}

/// One contiguous logged experiment: inputs per sample and one output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub inputs: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    fn span(&self) -> f64 {
        let s = self.max - self.min;
        if s > 0.0 {
            s
        } else {
            1.0
        }
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.min) / self.span()
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.span() + self.min
    }

    fn fit<'a>(values: impl Iterator<Item = &'a f64>) -> Self {
        let (min, max) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        Self { min, max }
    }

    fn widen(&mut self, other: &Range) {
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
    }
}

/// Per-channel min-max scaling of one MISO dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub output: Range,
    pub inputs: Vec<Range>,
}

impl Normalization {
    /// Min-max ranges over the chosen segments.
    pub fn fit(segments: &[Segment], ids: &[usize]) -> Self {
        let n_inputs = segments.first().and_then(|s| s.inputs.first()).map_or(0, Vec::len);
        let output = Range::fit(ids.iter().flat_map(|&s| segments[s].output.iter()));
        let inputs = (0..n_inputs)
            .map(|c| Range::fit(ids.iter().flat_map(|&s| segments[s].inputs.iter().map(move |u| &u[c]))))
            .collect();
        Self { output, inputs }
    }

    /// Widens the ranges to also cover `other`; returns whether anything changed.
    pub fn widen(&mut self, other: &Normalization) -> bool {
        let before = self.clone();
        self.output.widen(&other.output);
        for (a, b) in self.inputs.iter_mut().zip(&other.inputs) {
            a.widen(b);
        }
        before != *self
    }
}

/// Regressor layout shared by datasets and networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Embedding {
    pub n_a: usize,
    pub n_b: usize,
    pub n_inputs: usize,
}

impl Embedding {
    pub fn width(&self) -> usize {
        self.n_b + self.n_a * self.n_inputs
    }

    pub fn max_lag(&self) -> usize {
        self.n_a.max(self.n_b)
    }

    /// Builds the normalized regressor for predicting the sample right after
    /// the given histories (most recent value last).
    pub fn regressor(
        &self,
        y_hist: &[f64],
        u_hist: &[Vec<f64>],
        norm: &Normalization,
        out: &mut Vec<f64>,
    ) {
        out.clear();
        out.extend((1..=self.n_b).map(|l| norm.output.normalize(y_hist[y_hist.len() - l])));
        for l in 1..=self.n_a {
            let u = &u_hist[u_hist.len() - l];
            out.extend(u.iter().zip(&norm.inputs).map(|(v, r)| r.normalize(*v)));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NarxDataset {
    pub embedding: Embedding,
    pub normalization: Normalization,
    /// Normalized regressors, row-major.
    pub x: Vec<f64>,
    /// Normalized targets.
    pub y: Vec<f64>,
    pub segment_of_row: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Segment ids of each split, in segment order.
    pub train_segments: Vec<usize>,
    pub val_segments: Vec<usize>,
    pub test_segments: Vec<usize>,
    pub seed: u64,
    /// Additive residual y - y_hat, filled in after fitting.
    pub residuals: Option<Vec<f64>>,
}

impl NarxDataset {
    pub fn width(&self) -> usize {
        self.embedding.width()
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.x[i * w..(i + 1) * w]
    }

    pub fn to_csv(&self) -> String {
        let w = self.width();
        let mut out: Vec<String> = (1..=self.embedding.n_b).map(|l| format!("y_lag{l}")).collect();
        for l in 1..=self.embedding.n_a {
            out.extend((1..=self.embedding.n_inputs).map(|c| format!("u{c}_lag{l}")));
        }
        out.push("target".into());
        let mut s = out.join(",");
        s.push('\n');
        for i in 0..self.len() {
            for v in &self.x[i * w..(i + 1) * w] {
                s.push_str(&v.to_string());
                s.push(',');
            }
            s.push_str(&self.y[i].to_string());
            s.push('\n');
        }
        s
    }

    pub fn metadata_json(&self) -> serde_json::Value {
        serde_json::json!({
            "n_a": self.embedding.n_a,
            "n_b": self.embedding.n_b,
            "n_inputs": self.embedding.n_inputs,
            "normalization": self.normalization,
            "train_segments": self.train_segments,
            "val_segments": self.val_segments,
            "test_segments": self.test_segments,
            "seed": self.seed,
        })
    }
}

/// Splits segment ids into train/val/test after a seeded shuffle.
pub fn split_segments(n: usize, ratios: SplitRatios, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (ratios.train * n as f64).round() as usize;
    let n_val = ((ratios.val * n as f64).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let mut train = ids[..n_train].to_vec();
    let mut val = ids[n_train..n_train + n_val].to_vec();
    let mut test = ids[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    (train, val, test)
}

/// Builds lagged rows inside each segment only; scaling is fitted on the
/// training segments.
pub fn assemble_narx_dataset(
    segments: &[Segment],
    n_a: usize,
    n_b: usize,
    ratios: SplitRatios,
    seed: u64,
) -> Result<NarxDataset, StructureError> {
    assemble_narx_dataset_with(segments, n_a, n_b, ratios, seed, None)
}

/// As [`assemble_narx_dataset`], but scales with `fixed` when given.
pub fn assemble_narx_dataset_with(
    segments: &[Segment],
    n_a: usize,
    n_b: usize,
    ratios: SplitRatios,
    seed: u64,
    fixed: Option<&Normalization>,
) -> Result<NarxDataset, StructureError> {
    if n_a == 0 || n_b == 0 {
        return Err(StructureError::InvalidArgument("N_a and N_b must be >= 1".into()));
    }
    if segments.is_empty() {
        return Err(StructureError::InvalidArgument("no segments".into()));
    }
    if !(ratios.train > 0.0 && ratios.val >= 0.0 && ratios.train + ratios.val <= 1.0) {
        return Err(StructureError::InvalidArgument(format!(
            "invalid split ratios {ratios:?}"
        )));
    }
    let n_inputs = segments[0].inputs.first().map_or(0, Vec::len);
    let embedding = Embedding {
        n_a,
        n_b,
        n_inputs,
    };
    let needed = embedding.max_lag() + 1;
    for (i, s) in segments.iter().enumerate() {
        if s.output.len() < needed || s.inputs.len() != s.output.len() {
            return Err(StructureError::TooShortPlateau {
                segment: i,
                len: s.output.len(),
                needed,
            });
        }
        if s.inputs.iter().any(|u| u.len() != n_inputs) {
            return Err(StructureError::InvalidArgument(format!(
                "segment {i} has inconsistent input width"
            )));
        }
    }
    let (train_segments, val_segments, test_segments) = split_segments(segments.len(), ratios, seed);
    let normalization = match fixed {
        Some(n) if n.inputs.len() == n_inputs => n.clone(),
        Some(n) => {
            return Err(StructureError::InvalidArgument(format!(
                "normalization covers {} inputs, segments have {n_inputs}",
                n.inputs.len()
            )))
        }
        None => Normalization::fit(segments, &train_segments),
    };

    let rows_per: Vec<usize> = segments.iter().map(|s| s.output.len() - embedding.max_lag()).collect();
    let total: usize = rows_per.iter().sum();
    let mut x = Vec::with_capacity(total * embedding.width());
    let mut y = Vec::with_capacity(total);
    let mut segment_of_row = Vec::with_capacity(total);
    let mut first_row = Vec::with_capacity(segments.len());
    let mut buf = Vec::new();
    for (sid, s) in segments.iter().enumerate() {
        first_row.push(y.len());
        for t in embedding.max_lag()..s.output.len() {
            embedding.regressor(&s.output[..t], &s.inputs[..t], &normalization, &mut buf);
            x.extend_from_slice(&buf);
            y.push(normalization.output.normalize(s.output[t]));
            segment_of_row.push(sid);
        }
    }
    let rows_of = |ids: &[usize]| -> Vec<usize> {
        ids.iter()
            .flat_map(|&s| first_row[s]..first_row[s] + rows_per[s])
            .collect()
    };
    Ok(NarxDataset {
        embedding,
        normalization,
        train: rows_of(&train_segments),
        val: rows_of(&val_segments),
        test: rows_of(&test_segments),
        x,
        y,
        segment_of_row,
        train_segments,
        val_segments,
        test_segments,
        seed,
        residuals: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_output_gives_zero_coefficients() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let q = lipschitz_coefficients(&x, &[2.0; 10]).unwrap();
        assert!(q.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_slope_is_recovered() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 * 0.7]).collect();
        let y: Vec<f64> = x.iter().map(|r| 3.0 * r[0]).collect();
        let q = lipschitz_coefficients(&x, &y).unwrap();
        assert_eq!(q.len(), 45);
        assert!(q.iter().all(|v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn coincident_inputs_are_degenerate() {
        let x = vec![vec![1.0, 2.0]; 4];
        assert_eq!(
            lipschitz_coefficients(&x, &[0.0, 1.0, 2.0, 3.0]).unwrap_err(),
            StructureError::AllPairsDegenerate
        );
    }

    #[test]
    fn single_term_index() {
        let q = [0.5, 2.0, 1.0];
        let idx = lipschitz_index(&q, 4, 1).unwrap();
        assert!((idx - 4.0).abs() < 1e-12);
    }

    #[test]
    fn equal_coefficients_index() {
        let q = [1.5; 20];
        let idx = lipschitz_index(&q, 3, 7).unwrap();
        assert!((idx - 3f64.sqrt() * 1.5).abs() < 1e-12);
    }

    #[test]
    fn too_few_coefficients() {
        assert_eq!(
            lipschitz_index(&[1.0, f64::NAN], 1, 2).unwrap_err(),
            StructureError::InsufficientPairs {
                needed: 2,
                available: 1
            }
        );
    }

    #[test]
    fn plateau_rule_is_one_sided() {
        assert_eq!(plateau_point(&[10.0, 5.0, 4.9, 5.5], 0.05), Some(2));
        assert_eq!(plateau_point(&[10.0, 5.0, 2.0, 1.0], 0.05), None);
        assert_eq!(plateau_point(&[1.0, 1.2, 1.3], 0.05), Some(1));
    }

    fn seg(len: usize, off: f64) -> Segment {
        Segment {
            inputs: (0..len).map(|t| vec![off + t as f64, 2.0 * off]).collect(),
            output: (0..len).map(|t| off * 10.0 + t as f64).collect(),
        }
    }

    #[test]
    fn three_sample_plateau_gives_two_rows() {
        let ds = assemble_narx_dataset(&[seg(3, 0.0)], 1, 1, SplitRatios { train: 1.0, val: 0.0 }, 0).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.width(), 3);
    }

    #[test]
    fn short_plateau_rejected() {
        let err = assemble_narx_dataset(&[seg(5, 0.0), seg(2, 1.0)], 2, 1, SplitRatios::default(), 0)
            .unwrap_err();
        assert_eq!(
            err,
            StructureError::TooShortPlateau {
                segment: 1,
                len: 2,
                needed: 3
            }
        );
    }

    #[test]
    fn rows_stay_inside_their_plateau() {
        let segs: Vec<Segment> = (0..10).map(|i| seg(8, i as f64)).collect();
        let ds = assemble_narx_dataset(&segs, 2, 3, SplitRatios::default(), 4).unwrap();
        for i in 0..ds.len() {
            let s = ds.segment_of_row[i];
            // target and its first output lag come from the same segment: the
            // raw series advances by exactly one per step inside a segment
            let y = ds.normalization.output.denormalize(ds.y[i]);
            let lag1 = ds.normalization.output.denormalize(ds.row(i)[0]);
            assert!((y - lag1 - 1.0).abs() < 1e-9);
            assert!((y - s as f64 * 10.0) >= 3.0 - 1e-9);
        }
    }

    #[test]
    fn full_scale_split_counts() {
        let (tr, va, te) = split_segments(4000, SplitRatios::default(), 1);
        assert_eq!((tr.len(), va.len(), te.len()), (2800, 600, 600));
        let mut all: Vec<usize> = tr.into_iter().chain(va).chain(te).collect();
        all.sort_unstable();
        assert_eq!(all, (0..4000).collect::<Vec<_>>());
    }

    #[test]
    fn train_rows_normalize_into_unit_interval_and_round_trip() {
        let segs: Vec<Segment> = (0..20).map(|i| seg(6, i as f64 * 0.3)).collect();
        let ds = assemble_narx_dataset(&segs, 1, 2, SplitRatios::default(), 2).unwrap();
        for &i in &ds.train {
            for v in ds.row(i).iter().chain(std::iter::once(&ds.y[i])) {
                assert!((-1e-12..=1.0 + 1e-12).contains(v));
            }
            let s = ds.segment_of_row[i];
            let raw = ds.normalization.output.denormalize(ds.y[i]);
            assert!(segs[s].output.iter().any(|v| (v - raw).abs() < 1e-9));
        }
    }
}
