//! End-to-end checks of configuration, data, training, checkpointing and evaluation.

mod common;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tgpssm::autodiff::Matrix;
use tgpssm::config::{preset_names, RunConfig};
use tgpssm::data::{gen_kink, gen_kink_step, gen_lorenz, Sequence};
use tgpssm::eval::{kalman_filter, kalman_forecast, LinearGaussian};
use tgpssm::experiment::{evaluate, prepare_data, train};
use tgpssm::training::{Checkpoint, Learner, TrainConfig, TrainData};
use tgpssm::Error;

use common::{dataset, linear_instance, normal};

#[test]
fn every_preset_parses_validates_and_round_trips() {
    for name in preset_names() {
        let cfg = RunConfig::preset(name).unwrap();
        assert_eq!(cfg.name, name);
        let again = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again, "{name}");
    }
}

#[test]
fn invalid_configuration_is_a_config_error() {
    let mut text = RunConfig::preset("kink_co_tgpssm").unwrap().to_toml().unwrap();
    text = text.replace("num_inducing = 15", "num_inducing = 0");
    assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config(_))));
    assert!(matches!(RunConfig::from_toml("name = \"x\"\nunknown_key = 1\n"), Err(Error::Config(_))));
    assert!(matches!(RunConfig::load("no_such_preset_or_file"), Err(Error::Config(_))));
}

#[test]
fn generators_are_deterministic_per_seed() {
    assert_eq!(gen_kink(3, 20, 7).unwrap().sequences, gen_kink(3, 20, 7).unwrap().sequences);
    assert_eq!(gen_kink_step(3, 20, 7).unwrap().sequences, gen_kink_step(3, 20, 7).unwrap().sequences);
    assert_eq!(gen_lorenz(50, 0.02, 7).unwrap().sequences, gen_lorenz(50, 0.02, 7).unwrap().sequences);
    assert_ne!(gen_kink(3, 20, 7).unwrap().sequences, gen_kink(3, 20, 8).unwrap().sequences);
}

#[test]
fn lorenz_rollout_stays_on_the_attractor() {
    let ds = gen_lorenz(1000, 0.02, 0).unwrap();
    let x = ds.sequences[0].x.as_ref().unwrap();
    assert_eq!(x.nrows(), 1001);
    for t in 0..x.nrows() {
        assert!(x.row(t).norm() < 60.0, "step {t}: {}", x.row(t).norm());
    }
}

/// Resuming from a checkpoint continues bit-for-bit where the run left off.
#[test]
fn checkpoint_resume_matches_uninterrupted_training() {
    let cfg = RunConfig::preset("kink_co_tgpssm").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let y = Matrix::from_fn(12, 1, |_, _| normal(&mut rng));
    let data = TrainData::new(&dataset(vec![Sequence { y, u: None, x: None }])).unwrap();
    let tc = TrainConfig { epochs: 3, ..cfg.train.clone() };

    let mut straight = Learner::new(&cfg.model, 5).unwrap();
    straight.train(&data, &TrainConfig { epochs: 6, ..tc.clone() }, |_| Ok(())).unwrap();

    let mut first = Learner::new(&cfg.model, 5).unwrap();
    first.train(&data, &tc, |_| Ok(())).unwrap();
    let json = serde_json::to_string(&first.checkpoint(&tc)).unwrap();
    let ck: Checkpoint = serde_json::from_str(&json).unwrap();
    let mut resumed = Learner::restore(&ck).unwrap();
    resumed.train(&data, &tc, |_| Ok(())).unwrap();

    assert_eq!(resumed.epoch, 6);
    assert_eq!(resumed.store.values(), straight.store.values());
    assert_eq!(resumed.lagrange, straight.lagrange);
}

/// Mean forecasts agree with the closed form `A^k m_T + Σ_{j<k} A^j b`.
#[test]
fn kalman_forecast_matches_closed_form() {
    for seed in 0..10 {
        let inst = linear_instance(seed);
        let lg: &LinearGaussian = &inst.lg;
        let filtered = kalman_filter(lg, &inst.y).unwrap();
        let m_t = filtered.means.last().unwrap().clone();
        let k = 5;
        let forecast = kalman_forecast(lg, &inst.y, k).unwrap();
        let d = lg.a.nrows();
        let mut a_pow = DMatrix::<f64>::identity(d, d);
        let mut drift = DVector::<f64>::zeros(d);
        for j in 0..k {
            drift += &a_pow * &lg.b;
            a_pow = &lg.a * a_pow;
            let expected = &lg.c * (&a_pow * &m_t + &drift);
            for i in 0..expected.len() {
                assert!((forecast[(j, i)] - expected[i]).abs() < 1e-12, "seed {seed} step {j}");
            }
        }
    }
}

/// A short run through the experiment layer improves the kink transition
/// estimate over the untrained model and reports finite metrics.
#[test]
fn short_kink_run_improves_transition_estimate() {
    let mut cfg = RunConfig::preset("kink_co_tgpssm").unwrap();
    cfg.train.epochs = 300;
    let split = prepare_data(&cfg).unwrap();
    let untrained = Learner::new(&cfg.model, cfg.seed).unwrap();
    let before = evaluate(&cfg, &untrained, &split).unwrap();
    let mut epochs = 0;
    let (learner, log) = train(&cfg, &split, |_| {
        epochs += 1;
        Ok(())
    })
    .unwrap();
    let after = evaluate(&cfg, &learner, &split).unwrap();
    assert_eq!(log.len(), 300);
    assert_eq!(epochs, 300);
    assert!(log.iter().all(|r| r.total.is_finite() && r.beta > 0.0));
    let (b, a) = (before.transition_mse.unwrap(), after.transition_mse.unwrap());
    assert!(a < b, "untrained {b}, trained {a}");
    assert!(after.elbo.total.is_finite());
}
