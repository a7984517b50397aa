//! Structural invariants of flows, prior sampling, the variational posterior,
//! the constrained objective, data generation and evaluation.

mod common;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tgpssm::autodiff::{finite_difference, Matrix, Tape};
use tgpssm::config::RunConfig;
use tgpssm::data::{gen_kink, gen_kink_step, gen_lorenz, lorenz_transition, Sequence, KINK_OBS_VAR, KINK_PROCESS_VAR, LORENZ_DT, LORENZ_OBS_VAR, LORENZ_PROCESS_VAR};
use tgpssm::experiment::{evaluate, prepare_data, DataSplit};
use tgpssm::flows::{FlowKind, FlowLayerConfig, FlowStack, FlowValues, LayerSpec, LayerValues};
use tgpssm::gp::{GaussianDist, GpInit};
use tgpssm::inference::elbo_terms;
use tgpssm::model::{log_normal, ModelSpec, ModelValues, Trajectory};
use tgpssm::params::ParamStore;
use tgpssm::training::{Learner, TrainData};

use common::{dataset, gradient_instance, normal};

fn random_elementary(kind: FlowKind, rng: &mut ChaCha8Rng) -> FlowValues {
    let terms = match kind {
        FlowKind::SumOfTanh | FlowKind::SumOfLogExp => 3,
        _ => 0,
    };
    let n = kind.num_params(terms);
    let p = Matrix::from_fn(n, 1, |k, _| if kind.is_positive(k, terms) { rng.gen_range(0.3..2.0) } else { rng.gen_range(-1.0..1.0) });
    FlowValues { d: 1, layers: vec![LayerValues::Elementary { kind, terms, p }] }
}

fn random_input(kind: FlowKind, rng: &mut ChaCha8Rng) -> f64 {
    match kind {
        FlowKind::Log => rng.gen_range(0.1..4.0),
        FlowKind::BoxCox => rng.gen_range(0.2..2.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
        _ => rng.gen_range(-2.0..2.0),
    }
}

/// `ln |dG⁻¹/dy|` at `y` from a fourth-order central difference of the inverse.
fn inverse_log_slope(flow: &FlowValues, y: f64, h: f64) -> f64 {
    let inv = |v: f64| flow.inverse(&[v]).unwrap()[0];
    let d = (-inv(y + 2.0 * h) + 8.0 * inv(y + h) - 8.0 * inv(y - h) + inv(y - 2.0 * h)) / (12.0 * h);
    d.abs().ln()
}

#[test]
fn log_det_is_antisymmetric_under_inversion() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for kind in FlowKind::ALL {
        for _ in 0..200 {
            let flow = random_elementary(kind, &mut rng);
            let f = random_input(kind, &mut rng);
            let (y, ld) = flow.forward_with_log_det(&[f]).unwrap();
            // Step scaled to the local slope so the stencil spans ~1e-3 in f.
            let h = 1e-3 * ld.exp();
            let back = inverse_log_slope(&flow, y[0], h);
            assert!((ld + back).abs() < 1e-8, "{kind:?} f={f} ld={ld} inverse={back}");
        }
    }
}

#[test]
fn elementary_flows_are_strictly_increasing() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for kind in FlowKind::ALL {
        for _ in 0..50 {
            let flow = random_elementary(kind, &mut rng);
            let grid: Vec<f64> = match kind {
                FlowKind::Log => (1..=80).map(|i| 0.05 * i as f64).collect(),
                FlowKind::BoxCox => (1..=40).map(|i| 0.05 * i as f64).collect(),
                _ => (0..=80).map(|i| -4.0 + 0.1 * i as f64).collect(),
            };
            let mut prev = f64::NEG_INFINITY;
            for f in grid {
                let (y, ld) = flow.forward_with_log_det(&[f]).unwrap();
                assert!(ld.is_finite(), "{kind:?} log-derivative at {f}");
                assert!(y[0] > prev, "{kind:?} not increasing at {f}");
                prev = y[0];
            }
        }
    }
}

fn perturbed_stack(configs: &[FlowLayerConfig], d: usize, seed: u64, scale: f64) -> FlowValues {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let stack = FlowStack::new(&mut store, "flow", d, configs, &mut rng).unwrap();
    for v in store.values_mut() {
        v.apply(|e| *e += scale * rng.gen_range(-1.0..1.0));
    }
    stack.values(&store)
}

#[test]
fn complementary_couplings_update_every_coordinate() {
    let one: Vec<FlowLayerConfig> = vec![LayerSpec::Coupling { split: 2, flip: false, hidden: 8 }.into()];
    let two: Vec<FlowLayerConfig> = vec![
        LayerSpec::Coupling { split: 2, flip: false, hidden: 8 }.into(),
        LayerSpec::Coupling { split: 2, flip: true, hidden: 8 }.into(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for seed in 0..20 {
        let single = perturbed_stack(&one, 4, seed, 0.5);
        let pair = perturbed_stack(&two, 4, seed, 0.5);
        let f: Vec<f64> = (0..4).map(|_| normal(&mut rng)).collect();
        let a = single.forward(&f).unwrap();
        let b = pair.forward(&f).unwrap();
        let changed_single = (0..4).filter(|&i| (a[i] - f[i]).abs() > 1e-12).count();
        assert_eq!(changed_single, 2, "one coupling layer updates one half");
        assert!((0..4).all(|i| (b[i] - f[i]).abs() > 1e-12), "alternating pair leaves a coordinate fixed: {f:?} -> {b:?}");
        assert!((pair.inverse(&b).unwrap().iter().zip(&f).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)) < 1e-10);
    }
}

fn spec(d_x: usize, flow: Vec<FlowLayerConfig>) -> ModelSpec {
    ModelSpec { d_x, d_y: d_x, d_c: 0, num_inducing: 5, gp: GpInit::default(), flow, q_init: 0.05, r_init: 0.1, emission: None }
}

fn model(d_x: usize, flow: Vec<FlowLayerConfig>, seed: u64, scale: f64) -> ModelValues {
    let mut learner = Learner::new(&spec(d_x, flow), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(99));
    for v in learner.store.values_mut() {
        v.apply(|e| *e += scale * rng.gen_range(-1.0..1.0));
    }
    learner.model.values(&learner.store)
}

fn moments(xs: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    // Standard error of the second central moment, from the fourth moment.
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    (m, v, ((m4 - v * v) / n).sqrt())
}

/// The marginal law of `x_{0:t}` does not depend on how far past `t` the
/// exact sampler continues.
#[test]
fn exact_sampling_is_kolmogorov_consistent() {
    let model = model(1, tgpssm::flows::default_flow(), 4, 0.2);
    let n = 10_000u64;
    let long: Vec<_> = (0..n).map(|s| model.sample_prior_exact(5, s).unwrap()).collect();
    let short: Vec<_> = (n..2 * n).map(|s| model.sample_prior_exact(2, s).unwrap()).collect();
    for t in 0..=2 {
        let a: Vec<f64> = long.iter().map(|tr| tr.x[(t, 0)]).collect();
        let b: Vec<f64> = short.iter().map(|tr| tr.x[(t, 0)]).collect();
        let (ma, va, sva) = moments(&a);
        let (mb, vb, svb) = moments(&b);
        let se_mean = ((va + vb) / n as f64).sqrt();
        assert!((ma - mb).abs() < 5.0 * se_mean, "step {t}: means {ma} vs {mb}");
        assert!((va - vb).abs() < 5.0 * (sva * sva + svb * svb).sqrt(), "step {t}: variances {va} vs {vb}");
    }
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Independent GP outputs become dependent after a coupling layer.
#[test]
fn coupling_layer_induces_output_dependence() {
    let flow: Vec<FlowLayerConfig> = vec![LayerSpec::Coupling { split: 1, flip: false, hidden: 8 }.into()];
    let mut learner = Learner::new(&spec(2, flow), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // Scale net stays at zero and the shift net is randomized, so f̃₂ = f₂ + r(f₁).
    let ids: Vec<_> = learner.store.iter().filter(|(_, p)| p.name.contains(".r.")).map(|(id, _)| id).collect();
    for id in ids {
        learner.store.get_mut(id).apply(|e| *e += rng.gen_range(-1.0..1.0));
    }
    let model = learner.model.values(&learner.store);
    let n = 10_000u64;
    let draws: Vec<_> = (0..n).map(|s| model.sample_prior_exact(1, s).unwrap()).collect();
    let col = |pick: fn(&Trajectory) -> &Matrix, j: usize| draws.iter().map(|tr| pick(tr)[(0, j)]).collect::<Vec<f64>>();
    let f: fn(&Trajectory) -> &Matrix = |tr| tr.f.as_ref().unwrap();
    let ft: fn(&Trajectory) -> &Matrix = |tr| tr.f_tilde.as_ref().unwrap();
    let sigma = 1.0 / (n as f64).sqrt();
    let raw = correlation(&col(f, 0), &col(f, 1));
    let transformed = correlation(&col(ft, 0), &col(ft, 1));
    assert!(raw.abs() < 5.0 * sigma, "GP outputs correlated: {raw}");
    assert!(transformed.abs() > 5.0 * sigma, "flow outputs uncorrelated: {transformed}");
}

/// `log q(x_{0:T})` as a sum of Markov conditionals equals the density
/// implied by the reparametrized sampler, and earlier conditionals do not
/// depend on later draws.
#[test]
fn variational_posterior_is_markov() {
    for seed in 0..10 {
        let inst = gradient_instance(seed);
        let store = &inst.learner.store;
        let vs = &inst.learner.vs;
        let path = vs.sample_q_trajectory(store, &inst.batch, &inst.noise);
        let m0 = DVector::from_vec(vs.m0_value(store));
        let l0 = vs.l0_value(store);
        let q0 = GaussianDist::new(m0, &l0 * l0.transpose());
        let batch = inst.noise.x0.nrows();
        let d = inst.noise.x0.ncols();
        let steps = inst.noise.x.len();

        let mut by_conditionals = 0.0;
        let mut by_noise = 0.0;
        let std_normal = GaussianDist::standard(d);
        for b in 0..batch {
            by_conditionals += q0.log_pdf(&path.x[0].row(b).transpose()).unwrap();
            by_noise += std_normal.log_pdf(&inst.noise.x0.row(b).transpose()).unwrap();
            by_noise -= l0.diagonal().iter().map(|v| v.ln()).sum::<f64>();
            for t in 0..steps {
                for j in 0..d {
                    let (x, m, v) = (path.x[t + 1][(b, j)], path.mean[t][(b, j)], path.var[t][(b, j)]);
                    let eps = inst.noise.x[t][(b, j)];
                    assert!((x - (m + v.sqrt() * eps)).abs() < 1e-12);
                    by_conditionals += log_normal(x, m, v);
                    by_noise += log_normal(eps, 0.0, 1.0) - 0.5 * v.ln();
                }
            }
        }
        assert!((by_conditionals - by_noise).abs() < 1e-10 * (1.0 + by_noise.abs()), "{by_conditionals} vs {by_noise}");

        let mut later = inst.noise.clone();
        for t in 2..steps {
            later.x[t] = later.x[t].map(|e| e + 1.0);
        }
        let other = vs.sample_q_trajectory(store, &inst.batch, &later);
        for t in 0..=2 {
            assert_eq!(other.mean[t], path.mean[t]);
            assert_eq!(other.var[t], path.var[t]);
        }
        assert_ne!(other.mean[3], path.mean[3]);
    }
}

/// Reverse-mode gradient of `−ELBO − β·𝓡` against central differences.
#[test]
fn constrained_loss_gradient_matches_finite_differences() {
    let beta = 2.5;
    for seed in 0..5 {
        let inst = gradient_instance(seed);
        let loss_at = |values: &[Matrix]| {
            let tape = Tape::new();
            let b = inst.learner.store.bind_with(&tape, values);
            let ssm = inst.learner.model.prepare(&b);
            let post = inst.learner.vs.prepare(&b, &inst.batch);
            let terms = elbo_terms(&ssm, &post, &inst.batch, &inst.noise);
            (-terms.total(1.0, 1.0) - terms.data_recon.scale(beta)).scalar()
        };
        let tape = Tape::new();
        let b = inst.learner.store.bind(&tape);
        let ssm = inst.learner.model.prepare(&b);
        let post = inst.learner.vs.prepare(&b, &inst.batch);
        let terms = elbo_terms(&ssm, &post, &inst.batch, &inst.noise);
        let loss = -terms.total(1.0, 1.0) - terms.data_recon.scale(beta);
        let grads = tape.gradients(loss);
        let values = inst.learner.store.values();
        let fd = finite_difference(loss_at, &values, 1e-5);
        for (v, f) in b.vars().iter().zip(&fd) {
            let a = grads.wrt(*v);
            let rel = (&a - f).norm() / a.norm().max(f.norm()).max(1e-12);
            assert!(rel < 1e-4, "seed {seed}: relative error {rel}");
        }
    }
}

#[test]
fn training_is_bit_reproducible() {
    let mut cfg = RunConfig::preset("kink_step_co_tgpssm").unwrap();
    cfg.train.epochs = 40;
    let split = prepare_data(&cfg).unwrap();
    let run = || tgpssm::experiment::train(&cfg, &split, |_| Ok(())).unwrap();
    let (a, log_a) = run();
    let (b, log_b) = run();
    assert_eq!(a.store.values(), b.store.values());
    assert_eq!(log_a, log_b);
    assert!(log_a.iter().all(|r| r.beta > 0.0));
}

/// Sample variance of `residuals` within three standard errors of `var`.
fn assert_variance(label: &str, residuals: &[f64], var: f64) {
    let (_, v, se) = moments(residuals);
    assert!((v - var).abs() < 3.0 * se, "{label}: sample variance {v}, specified {var}, se {se}");
}

#[test]
fn generator_noise_matches_specified_variances() {
    for (name, ds, f) in [
        ("kink", gen_kink(200, 100, 31).unwrap(), tgpssm::data::kink_fn as fn(f64) -> f64),
        ("kink-step", gen_kink_step(200, 100, 31).unwrap(), tgpssm::data::kink_step_fn),
    ] {
        let mut process = Vec::new();
        let mut obs = Vec::new();
        for s in &ds.sequences {
            let x = s.x.as_ref().unwrap();
            for t in 1..x.nrows() {
                process.push(x[(t, 0)] - f(x[(t - 1, 0)]));
                obs.push(s.y[(t - 1, 0)] - x[(t, 0)]);
            }
        }
        assert_variance(&format!("{name} process"), &process, KINK_PROCESS_VAR);
        assert_variance(&format!("{name} observation"), &obs, KINK_OBS_VAR);
    }

    let ds = gen_lorenz(20_000, LORENZ_DT, 31).unwrap();
    let s = &ds.sequences[0];
    let x = s.x.as_ref().unwrap();
    let mut process = Vec::new();
    let mut obs = Vec::new();
    for t in 1..x.nrows() {
        let prev = nalgebra::Vector3::new(x[(t - 1, 0)], x[(t - 1, 1)], x[(t - 1, 2)]);
        let mean = lorenz_transition(&prev, LORENZ_DT);
        for d in 0..3 {
            process.push(x[(t, d)] - mean[d]);
            obs.push(s.y[(t - 1, d)] - x[(t, d)]);
        }
    }
    assert_variance("lorenz process", &process, LORENZ_PROCESS_VAR);
    assert_variance("lorenz observation", &obs, LORENZ_OBS_VAR);
}

#[test]
fn metrics_are_deterministic() {
    let mut cfg = RunConfig::preset("kink_co_tgpssm").unwrap();
    cfg.dataset.holdout = 5;
    let split = prepare_data(&cfg).unwrap();
    let learner = Learner::new(&cfg.model, 2).unwrap();
    let a = evaluate(&cfg, &learner, &split).unwrap();
    let b = evaluate(&cfg, &learner, &split).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert!(a.forecast_rmse.is_some());
}

/// Forecasts are scored in standardized units, so an affine change of the raw
/// observations leaves the metric unchanged.
#[test]
fn forecast_rmse_is_invariant_to_affine_rescaling() {
    let mut cfg = RunConfig::preset("kink_co_tgpssm").unwrap();
    cfg.dataset.standardize = true;
    cfg.dataset.holdout = 5;
    let base = prepare_data(&cfg).unwrap();
    let rescale = |ds: &tgpssm::data::Dataset| {
        dataset(ds.sequences.iter().map(|s| Sequence { y: s.y.map(|v| 3.0 * v - 7.0), u: s.u.clone(), x: s.x.clone() }).collect())
    };
    let (train, test, stats) = tgpssm::data::standardize(&rescale(&base.raw_train), base.raw_test.as_ref().map(rescale).as_ref()).unwrap();
    let scaled = DataSplit { train, test, raw_train: rescale(&base.raw_train), raw_test: base.raw_test.as_ref().map(rescale), stats: Some(stats) };

    let mut learner = Learner::new(&cfg.model, 0).unwrap();
    let data = TrainData::new(&base.train).unwrap();
    learner.train(&data, &tgpssm::training::TrainConfig { epochs: 20, ..cfg.train.clone() }, |_| Ok(())).unwrap();
    let a = evaluate(&cfg, &learner, &base).unwrap().forecast_rmse.unwrap();
    let b = evaluate(&cfg, &learner, &scaled).unwrap().forecast_rmse.unwrap();
    assert!((a - b).abs() < 1e-10 * (1.0 + a), "{a} vs {b}");
}
