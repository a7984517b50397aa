//! Randomized invariants of the numerical building blocks.

mod common;

use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tgpssm::autodiff::Matrix;
use tgpssm::data::{ingest_csv_reader, standardize, write_observations_csv, ChannelStats, CsvSchema, Sequence};
use tgpssm::flows::{default_flow, FlowLayerConfig, FlowStack, LayerSpec};
use tgpssm::gp::{gp_conditional, kernel_matrix, kl_gaussian, GaussianDist, GpInit, Kernel, JITTER};
use tgpssm::model::{log_normal, ModelSpec};
use tgpssm::params::ParamStore;
use tgpssm::training::{moving_average, update_beta, LagrangeState, Learner, TrainData};

use common::{dataset, normal};

fn random_gaussian(rng: &mut ChaCha8Rng, n: usize) -> GaussianDist {
    let mean = DVector::from_fn(n, |_, _| normal(rng));
    let a = Matrix::from_fn(n, n, |_, _| normal(rng));
    GaussianDist::new(mean, &a * a.transpose() + Matrix::identity(n, n) * 0.1)
}

fn spec(d_x: usize, d_y: usize, num_inducing: usize, flow: Vec<FlowLayerConfig>) -> ModelSpec {
    ModelSpec { d_x, d_y, d_c: 0, num_inducing, gp: GpInit::default(), flow, q_init: 0.1, r_init: 0.1, emission: None }
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
    Matrix::from_fn(n, d, |_, _| rng.gen_range(-2.0..2.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_is_non_negative_and_zero_on_self(seed in any::<u64>(), n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_gaussian(&mut rng, n);
        let p = random_gaussian(&mut rng, n);
        prop_assert!(kl_gaussian(&q, &p).unwrap() >= -1e-10);
        prop_assert!(kl_gaussian(&q, &q).unwrap().abs() < 1e-8);
    }

    #[test]
    fn conditioning_never_increases_variance(seed in any::<u64>(), n in 1usize..8, d in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kernel = Kernel::se(&vec![rng.gen_range(0.3..2.0); d], rng.gen_range(0.5..2.0));
        let train = random_points(&mut rng, n, d);
        let test = random_points(&mut rng, 4, d);
        let f = DVector::from_fn(n, |_, _| normal(&mut rng));
        let post = gp_conditional(&kernel, &train, &f, rng.gen_range(0.0..0.1), &test).unwrap();
        let prior = kernel_matrix(&kernel, &test, &test);
        for i in 0..4 {
            prop_assert!(post.cov[(i, i)] <= prior[(i, i)] + 1e-10);
            prop_assert!(post.cov[(i, i)] >= -1e-8);
        }
    }

    #[test]
    fn sparse_marginal_variance_is_non_negative(seed in any::<u64>()) {
        let mut learner = Learner::new(&spec(2, 2, 6, Vec::new()), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in learner.store.values_mut() {
            v.apply(|e| *e += 0.5 * rng.gen_range(-1.0..1.0));
        }
        let values = learner.model.values(&learner.store);
        let x = random_points(&mut rng, 10, 2);
        let (_, var) = values.gp.marginal_batch(&x).unwrap();
        prop_assert!(var.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn flow_round_trip(seed in any::<u64>(), f in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let stack = FlowStack::new(&mut store, "flow", 1, &default_flow(), &mut rng).unwrap();
        for v in store.values_mut() {
            v.apply(|e| *e += 0.3 * rng.gen_range(-1.0..1.0));
        }
        let flow = stack.values(&store);
        let y = flow.forward(&[f]).unwrap();
        let back = flow.inverse(&y).unwrap();
        prop_assert!((back[0] - f).abs() < 1e-8 * (1.0 + f.abs()));
    }

    #[test]
    fn moving_average_unrolls_to_geometric_weights(alpha in 0.0f64..1.0, r in prop::collection::vec(-10.0f64..10.0, 1..20)) {
        let mut est = r[0];
        for v in &r[1..] {
            est = moving_average(est, *v, alpha);
        }
        let n = r.len();
        let mut direct = alpha.powi(n as i32 - 1) * r[0];
        for (k, v) in r.iter().enumerate().skip(1) {
            direct += (1.0 - alpha) * alpha.powi((n - 1 - k) as i32) * v;
        }
        prop_assert!((est - direct).abs() < 1e-9);
    }

    #[test]
    fn beta_moves_against_the_constraint_gap(beta in 0.01f64..100.0, r_hat in -5.0f64..5.0, r0 in -5.0f64..5.0) {
        let next = update_beta(LagrangeState::new(beta), r_hat, r0, 0.001);
        prop_assert!(next.beta > 0.0);
        if r_hat > r0 {
            prop_assert!(next.beta < beta);
        } else if r_hat < r0 {
            prop_assert!(next.beta > beta);
        }
        prop_assert!((next.beta.ln() - (beta.ln() - 0.001 * (r_hat - r0))).abs() < 1e-12);
    }

    #[test]
    fn standardize_round_trip(seed in any::<u64>(), d in 1usize..4, steps in 3usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = Matrix::from_fn(steps, d, |_, _| 5.0 + 3.0 * normal(&mut rng));
        let ds = dataset(vec![Sequence { y: y.clone(), u: None, x: None }]);
        let (train, _, stats) = standardize(&ds, None).unwrap();
        let scaled = &train.sequences[0].y;
        let fitted = ChannelStats::fit(&[scaled]).unwrap();
        for j in 0..d {
            prop_assert!(fitted.mean[j].abs() < 1e-10);
            prop_assert!((fitted.std[j] - 1.0).abs() < 1e-10);
        }
        let back = stats.y.invert(scaled);
        prop_assert!((back - y).amax() < 1e-10);
    }

    #[test]
    fn csv_round_trip_is_exact(seed in any::<u64>(), d_y in 1usize..3, d_c in 0usize..2, n_seq in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sequences: Vec<Sequence> = (0..n_seq)
            .map(|_| {
                let steps = rng.gen_range(1..8);
                Sequence {
                    y: Matrix::from_fn(steps, d_y, |_, _| normal(&mut rng) * 1e3),
                    u: (d_c > 0).then(|| Matrix::from_fn(steps, d_c, |_, _| normal(&mut rng))),
                    x: None,
                }
            })
            .collect();
        let mut buf = Vec::new();
        write_observations_csv(&sequences, &mut buf).unwrap();
        let ds = ingest_csv_reader(buf.as_slice(), &CsvSchema::standard(d_y, d_c), "rt").unwrap();
        prop_assert_eq!(ds.sequences.len(), n_seq);
        for (a, b) in ds.sequences.iter().zip(&sequences) {
            prop_assert_eq!(&a.y, &b.y);
            prop_assert_eq!(&a.u, &b.u);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// With identity flow layers the TGPSSM ELBO is the GPSSM ELBO.
    #[test]
    fn identity_flow_elbo_equals_plain_elbo(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = spec(1, 1, 5, Vec::new());
        let flowed = spec(1, 1, 5, vec![LayerSpec::identity_sal().into(), LayerSpec::Linear { a: 0.0, b: 1.0 }.into()]);
        let plain = Learner::new(&base, seed).unwrap();
        let mut with_flow = Learner::new(&flowed, seed).unwrap();
        for (_, p) in plain.store.iter() {
            let id = with_flow.store.id(&p.name).expect("shared parameter");
            *with_flow.store.get_mut(id) = p.value.clone();
        }
        let y = Matrix::from_fn(6, 1, |_, _| normal(&mut rng));
        let data = TrainData::new(&dataset(vec![Sequence { y, u: None, x: None }])).unwrap();
        let a = plain.evaluate_elbo(&data, 1, seed).unwrap().total;
        let b = with_flow.evaluate_elbo(&data, 1, seed).unwrap().total;
        prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()), "{a} vs {b}");
    }

    /// The joint trajectory density equals its sequential Markov factorization
    /// with each `f_t` conditioned on all earlier function values.
    #[test]
    fn joint_density_matches_sequential_factorization(seed in any::<u64>(), steps in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut learner = Learner::new(&spec(2, 1, 4, default_flow()), seed).unwrap();
        for v in learner.store.values_mut() {
            v.apply(|e| *e += 0.2 * rng.gen_range(-1.0..1.0));
        }
        let model = learner.model.values(&learner.store);
        let traj = model.sample_prior_exact(steps, seed).unwrap();
        let joint = model.joint_log_density(&traj).unwrap();

        let ftil = traj.f_tilde.as_ref().unwrap();
        let mut seq = GaussianDist::standard(2).log_pdf(&traj.x.row(0).transpose()).unwrap();
        let mut f = Matrix::zeros(steps, 2);
        for t in 0..steps {
            let row: Vec<f64> = ftil.row(t).iter().copied().collect();
            let ft = model.flow.inverse(&row).unwrap();
            seq -= model.flow.log_det_jacobian(&ft).unwrap();
            f[(t, 0)] = ft[0];
            f[(t, 1)] = ft[1];
        }
        for t in 0..steps {
            let train_x = traj.x.rows(0, t).into_owned();
            let test = traj.x.rows(t, 1).into_owned();
            for (d, k) in model.gp.kernels.iter().enumerate() {
                let prev = f.view((0, d), (t, 1)).column(0).into_owned();
                let post = gp_conditional(k, &train_x, &prev, 0.0, &test).unwrap();
                seq += log_normal(f[(t, d)], post.mean[0], post.cov[(0, 0)] + JITTER);
            }
            for d in 0..2 {
                seq += log_normal(traj.x[(t + 1, d)], ftil[(t, d)], model.q[d]);
            }
            seq += log_normal(traj.y[(t, 0)], traj.x[(t + 1, 0)], model.r[0]);
        }
        prop_assert!((joint - seq).abs() < 1e-6 * (1.0 + joint.abs()), "{joint} vs {seq}");
    }
}
