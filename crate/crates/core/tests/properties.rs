use gaslift_twin::bayes::{mcmc_sample, region_of, ModelEnsemble};
use gaslift_twin::channels::Channel;
use gaslift_twin::cognitive::{transfer_warm_start, ChannelModel, CognitiveConfig, CognitiveState, OfflineArtifact};
use gaslift_twin::doe::{gram_schmidt_rank_multi, lhs_sample, Dimension};
use gaslift_twin::hyperband::{survivors, HyperbandConfig};
use gaslift_twin::narx::{
    gradient, metrics_from_residuals, train, Activation, Batch, LayerSpec, NetworkSpec, NetworkWeights,
};
use gaslift_twin::structure::{
    assemble_narx_dataset, lipschitz_coefficients, lipschitz_index, select_embedding, EmbeddingConfig, Segment,
    SplitRatios,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bounds(d: usize) -> Vec<Dimension> {
    (0..d).map(|j| Dimension::new(&format!("x{j}"), -1.0 - j as f64, 2.0 + j as f64)).collect()
}

fn uniform_rows(n: usize, w: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..w).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn synthetic_segments(n_seg: usize, len: usize, seed: u64) -> Vec<Segment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_seg)
        .map(|_| {
            let u0: f64 = rng.random_range(-1.0..1.0);
            let u1: f64 = rng.random_range(0.0..2.0);
            let inputs = vec![vec![u0, u1]; len];
            let mut output = vec![rng.random_range(-0.5..0.5)];
            for t in 1..len {
                let prev = output[t - 1];
                output.push(0.7 * prev + 0.3 * (u0 + 0.5 * u1).tanh());
            }
            Segment { inputs, output }
        })
        .collect()
}

fn random_spec(rng: &mut ChaCha8Rng) -> NetworkSpec {
    let acts = [Activation::Tanh, Activation::Relu, Activation::Linear];
    let depth = rng.random_range(1..=3);
    let hidden: Vec<LayerSpec> = (0..depth)
        .map(|_| LayerSpec {
            width: rng.random_range(1..=6),
            activation: acts[rng.random_range(0..acts.len())],
        })
        .collect();
    NetworkSpec::miso(rng.random_range(1..=5), &hidden, 1e-3, rng.random())
}

fn random_weights(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> NetworkWeights {
    NetworkWeights {
        theta: (0..spec.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

/// Central-difference gradient of the batch MSE.
fn fd_gradient(w: &NetworkWeights, spec: &NetworkSpec, batch: Batch<'_>, h: f64) -> Vec<f64> {
    let mut probe = w.clone();
    (0..w.theta.len())
        .map(|i| {
            let t = w.theta[i];
            probe.theta[i] = t + h;
            let up = gradient(&probe, spec, batch).unwrap().0;
            probe.theta[i] = t - h;
            let down = gradient(&probe, spec, batch).unwrap().0;
            probe.theta[i] = t;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn lhs_fills_every_stratum_once(n in 1usize..120, d in 1usize..6, seed in any::<u64>()) {
        let plan = lhs_sample(n, &bounds(d), seed).unwrap();
        for j in 0..d {
            let mut s = plan.strata(j);
            s.sort_unstable();
            prop_assert_eq!(s, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn lhs_projection_keeps_stratification(n in 2usize..80, seed in any::<u64>(), keep in 1usize..4) {
        let plan = lhs_sample(n, &bounds(4), seed).unwrap();
        let cols: Vec<usize> = (0..keep).collect();
        let sub = plan.project(&cols);
        for j in 0..keep {
            prop_assert_eq!(sub.column(j), plan.column(j));
            let mut s = sub.strata(j);
            s.sort_unstable();
            prop_assert_eq!(s, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn ranking_is_permutation_equivariant(seed in any::<u64>(), shift in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 40;
        let cand: Vec<Vec<f64>> = (0..4).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let y: Vec<f64> = (0..n).map(|i| 3.0 * cand[0][i] - 1.5 * cand[2][i] + 0.4 * cand[1][i] * cand[3][i]).collect();
        let names: Vec<String> = (0..4).map(|j| format!("c{j}")).collect();
        let base = gram_schmidt_rank_multi(&names, &cand, &[y.clone()]).unwrap();
        let perm: Vec<usize> = (0..4).map(|j| (j + shift) % 4).collect();
        let pn: Vec<String> = perm.iter().map(|&j| names[j].clone()).collect();
        let pc: Vec<Vec<f64>> = perm.iter().map(|&j| cand[j].clone()).collect();
        let permuted = gram_schmidt_rank_multi(&pn, &pc, &[y]).unwrap();
        prop_assert_eq!(base.names(), permuted.names());
    }

    #[test]
    fn lipschitz_quotients_scale_with_output(seed in any::<u64>(), c in 0.1f64..50.0) {
        let x = uniform_rows(30, 3, seed);
        let y: Vec<f64> = x.iter().map(|r| r[0].sin() + r[1] * r[2]).collect();
        let ys: Vec<f64> = y.iter().map(|v| c * v).collect();
        let q = lipschitz_coefficients(&x, &y).unwrap();
        let qs = lipschitz_coefficients(&x, &ys).unwrap();
        for (a, b) in q.iter().zip(&qs) {
            prop_assert!((c * a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
        let i1 = lipschitz_index(&q, 3, 5).unwrap();
        let i2 = lipschitz_index(&qs, 3, 5).unwrap();
        prop_assert!((c * i1 - i2).abs() <= 1e-9 * i2);
    }

    #[test]
    fn looser_tolerance_never_picks_more_lags(seed in 0u64..1000, tight in 0.01f64..0.08, extra in 0.0f64..0.2) {
        let u = uniform_rows(400, 1, seed);
        let mut y = vec![0.0; 400];
        for t in 2..400 {
            y[t] = 0.6 * y[t - 1] - 0.2 * y[t - 2] + u[t - 1][0];
        }
        let base = EmbeddingConfig { n_max: 5, max_rows: 300, seed, ..EmbeddingConfig::default() };
        let strict = select_embedding(&u, &y, &EmbeddingConfig { plateau_rel_tol: tight, ..base.clone() });
        let loose = select_embedding(&u, &y, &EmbeddingConfig { plateau_rel_tol: tight + extra, ..base });
        if let (Ok(s), Ok(l)) = (strict, loose) {
            prop_assert!(l.chosen_n <= s.chosen_n);
        }
    }

    #[test]
    fn rows_never_span_two_segments(seed in any::<u64>(), na in 1usize..4, nb in 1usize..4) {
        let segs = synthetic_segments(12, 9, seed);
        let ds = assemble_narx_dataset(&segs, na, nb, SplitRatios::default(), seed).unwrap();
        let k = na.max(nb);
        prop_assert_eq!(ds.len(), 12 * (9 - k));
        for i in 0..ds.len() {
            let s = ds.segment_of_row[i];
            let row = ds.row(i);
            let u = ds.normalization.inputs[0].normalize(segs[s].inputs[0][0]);
            for l in 0..na {
                prop_assert!((row[nb + 2 * l] - u).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mean_absolute_error_bounded_by_rms(res in prop::collection::vec(-1e3f64..1e3, 1..60)) {
        let m = metrics_from_residuals(&res);
        prop_assert!(m.mae * m.mae <= m.mse * (1.0 + 1e-12));
    }

    #[test]
    fn analytic_gradient_matches_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_spec(&mut rng);
        let w = random_weights(&spec, &mut rng);
        let rows = 5;
        let x: Vec<f64> = (0..rows * spec.input_width).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
        let batch = Batch { x: &x, y: &y };
        let (_, g) = gradient(&w, &spec, batch).unwrap();
        let fd = fd_gradient(&w, &spec, batch, 1e-6);
        prop_assert!(relative_error(&g, &fd) < 1e-5, "{}", relative_error(&g, &fd));
    }

    #[test]
    fn window_count_matches_recount(seed in any::<u64>(), horizon in 1usize..30, offset in 0usize..10) {
        let cfg = CognitiveConfig { horizon, offset, threshold: horizon, ..CognitiveConfig::default() };
        let mut st = CognitiveState::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stream: Vec<u8> = (0..120).map(|_| u8::from(rng.random_bool(0.3))).collect();
        for (k, &v) in stream.iter().enumerate() {
            let z = st.update(v).z;
            let lo = (k + 1).saturating_sub(horizon).max(offset);
            let expected = if lo > k { 0 } else { stream[lo..=k].iter().map(|&b| usize::from(b)).sum() };
            prop_assert_eq!(z, expected);
        }
    }

    #[test]
    fn lower_threshold_triggers_no_later(seed in any::<u64>(), ct in 2usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stream: Vec<u8> = (0..300).map(|_| u8::from(rng.random_bool(0.1))).collect();
        let first = |threshold| {
            let mut st = CognitiveState::new(CognitiveConfig { threshold, ..CognitiveConfig::default() }).unwrap();
            stream.iter().position(|&v| st.update(v).trigger)
        };
        match (first(ct - 1), first(ct)) {
            (Some(a), Some(b)) => prop_assert!(a <= b),
            (None, Some(_)) => prop_assert!(false, "higher threshold fired alone"),
            _ => {}
        }
    }

    #[test]
    fn wider_confidence_nests_regions(values in prop::collection::vec(-10f64..10.0, 2..80), lo in 0.05f64..0.6, extra in 0.0f64..0.35) {
        let mut a = values.clone();
        let mut b = values;
        let narrow = region_of(&mut a, lo);
        let wide = region_of(&mut b, lo + extra);
        prop_assert!(wide.lower <= narrow.lower && narrow.upper <= wide.upper);
    }

    #[test]
    fn survivors_are_the_lowest_losses(losses in prop::collection::vec(0u8..10, 1..40), keep in 0usize..45) {
        let trials: Vec<(usize, f64)> = losses.iter().enumerate().map(|(i, &l)| (i, f64::from(l))).collect();
        let kept = survivors(&trials, keep);
        prop_assert_eq!(kept.len(), keep.min(trials.len()));
        let worst_kept = kept.iter().map(|&t| (trials[t].1, t)).fold((f64::NEG_INFINITY, 0), |a, b| if (b.0, b.1) > a { b } else { a });
        for (t, l) in &trials {
            if !kept.contains(t) {
                prop_assert!((*l, *t) > worst_kept);
            }
        }
    }

    #[test]
    fn halving_schedule_is_consistent(extra in 0usize..100, eta in 2usize..5) {
        let r = eta + extra;
        let cfg = HyperbandConfig { max_resource: r, eta, seed: 0 };
        for b in cfg.schedule().unwrap() {
            prop_assert_eq!(b.rungs.len(), b.s + 1);
            prop_assert_eq!(b.rungs[0].configs, b.n_configs);
            prop_assert_eq!(b.rungs.last().unwrap().epochs, r);
            for w in b.rungs.windows(2) {
                prop_assert!(w[1].configs <= w[0].configs);
                prop_assert!(w[1].epochs >= w[0].epochs);
                prop_assert_eq!(w[1].configs, w[0].configs / eta);
            }
        }
    }

    #[test]
    fn metropolis_replays_bitwise(seed in any::<u64>()) {
        let mut target = |t: &[f64]| -0.5 * t.iter().map(|v| v * v).sum::<f64>();
        let a = mcmc_sample(&[0.3, -0.2], &mut target, 200, 0.8, None, seed).unwrap();
        let b = mcmc_sample(&[0.3, -0.2], &mut target, 200, 0.8, None, seed).unwrap();
        prop_assert_eq!(a.samples, b.samples);
        prop_assert_eq!(a.accepted, b.accepted);
    }
}

#[test]
fn gradient_check_over_hundred_networks() {
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_spec(&mut rng);
        let w = random_weights(&spec, &mut rng);
        let x: Vec<f64> = (0..4 * spec.input_width).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let batch = Batch { x: &x, y: &y };
        let g = gradient(&w, &spec, batch).unwrap().1;
        worst = worst.max(relative_error(&g, &fd_gradient(&w, &spec, batch, 1e-6)));
    }
    assert!(worst < 1e-5, "worst relative error {worst}");
}

fn small_dataset() -> gaslift_twin::structure::NarxDataset {
    assemble_narx_dataset(&synthetic_segments(30, 20, 7), 1, 2, SplitRatios::default(), 3).unwrap()
}

fn small_spec(width: usize) -> NetworkSpec {
    let mut spec = NetworkSpec::miso(width, &[LayerSpec { width: 8, activation: Activation::Tanh }], 1e-2, 11);
    spec.epochs = 15;
    spec.patience = 100;
    spec.batch_size = 16;
    spec
}

#[test]
fn training_is_deterministic() {
    let ds = small_dataset();
    let spec = small_spec(ds.width());
    let a = train(&ds, &spec).unwrap();
    let b = train(&ds, &spec).unwrap();
    assert_eq!(a.weights, b.weights);
    assert_eq!(a.history, b.history);
}

#[test]
fn kept_weights_have_the_lowest_validation_loss() {
    let ds = small_dataset();
    let spec = small_spec(ds.width());
    let model = train(&ds, &spec).unwrap();
    let min = model.history.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(model.best_val, min);
    assert!(model.history.first().unwrap().train_loss > model.history.last().unwrap().train_loss);
}

#[test]
fn warm_start_reproduces_offline_predictions() {
    let ds = small_dataset();
    let spec = small_spec(ds.width());
    let model = train(&ds, &spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let members: Vec<Vec<f64>> = (0..4)
        .map(|_| model.weights.theta.iter().map(|t| t + rng.random_range(-1e-3..1e-3)).collect())
        .collect();
    let artifact = OfflineArtifact::new(vec![ChannelModel {
        channel: Channel::all()[0],
        spec: spec.clone(),
        embedding: ds.embedding,
        normalization: ds.normalization.clone(),
        map: model.weights.clone(),
        ensemble: ModelEnsemble {
            members,
            chain_index: vec![0, 1, 2, 3],
            chain_fingerprint: String::new(),
        },
        noise_sigma: 0.0,
    }]);
    let mut twin = transfer_warm_start(&artifact, 1).unwrap();
    assert_eq!(twin.models, artifact.models);
    let y_hist = [0.1, 0.2];
    let u_hist = vec![vec![0.3, 1.0]];
    let mut ev = gaslift_twin::narx::Evaluator::new(&spec);
    let mut row = Vec::new();
    ds.embedding.regressor(&y_hist, &u_hist, &ds.normalization, &mut row);
    let offline = ds.normalization.output.denormalize(ev.predict(&model.weights.theta, &row));
    assert_eq!(twin.map_prediction(0, &y_hist, &u_hist), offline);
    let step = twin.one_step(0, &y_hist, &u_hist, 0.95);
    assert_eq!(step.point, offline);
}
