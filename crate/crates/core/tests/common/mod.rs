//! Shared builders for integration tests and the acceptance suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use tgpssm::autodiff::{Matrix, Tape};
use tgpssm::data::{Dataset, DatasetMeta, Sequence};
use tgpssm::eval::LinearGaussian;
use tgpssm::flows::{FlowLayerConfig, LayerSpec};
use tgpssm::gp::{raw_from_chol, GpInit, InducingInit, KernelKind, MeanInit};
use tgpssm::inference::{elbo_terms, NoiseBank, SeqBatch};
use tgpssm::model::ModelSpec;
use tgpssm::training::{Learner, TrainData};

use nalgebra::{DMatrix, DVector};

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn dataset(sequences: Vec<Sequence>) -> Dataset {
    Dataset { sequences, standardization: None, meta: DatasetMeta { name: "test".into(), seed: None, params: serde_json::Value::Null } }
}

/// A linear-Gaussian system together with a GPSSM whose transition is the
/// same affine map: linear kernel over `[x, 1]`, inducing inputs at the unit
/// vectors and an almost collapsed `q(U)` centred on `[A b]`.
pub struct LinearInstance {
    pub learner: Learner,
    pub data: TrainData,
    pub lg: LinearGaussian,
    pub y: Matrix,
}

pub fn linear_instance(seed: u64) -> LinearInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_x = rng.gen_range(1..=2);
    let d_y = rng.gen_range(1..=d_x);
    let steps = rng.gen_range(2..=10);
    let mut a = DMatrix::from_fn(d_x, d_x, |_, _| rng.gen_range(-0.9..0.9));
    let norm = a.norm();
    if norm > 0.9 {
        a *= 0.9 / norm;
    }
    let b = DVector::from_fn(d_x, |_, _| rng.gen_range(-0.5..0.5));
    let q: Vec<f64> = (0..d_x).map(|_| rng.gen_range(0.05..0.5)).collect();
    let r: Vec<f64> = (0..d_y).map(|_| rng.gen_range(0.05..0.5)).collect();
    let c = DMatrix::from_fn(d_y, d_x, |i, j| if i == j { 1.0 } else { 0.0 });

    let mut x = DVector::from_fn(d_x, |_, _| normal(&mut rng));
    let mut y = Matrix::zeros(steps, d_y);
    for t in 0..steps {
        x = &a * &x + &b + DVector::from_fn(d_x, |i, _| q[i].sqrt() * normal(&mut rng));
        let cx = &c * &x;
        for i in 0..d_y {
            y[(t, i)] = cx[i] + r[i].sqrt() * normal(&mut rng);
        }
    }

    let d_in = d_x + 1;
    let mut points = vec![0.0; d_in * d_in];
    for i in 0..d_in {
        points[i * d_in + i] = 1.0;
    }
    let spec = ModelSpec {
        d_x,
        d_y,
        d_c: 1,
        num_inducing: d_in,
        gp: GpInit {
            kernel: KernelKind::Linear,
            length_scale: 1.0,
            variance: 1.0,
            inducing: InducingInit::Given { points },
            mean: MeanInit::Zero,
            chol_scale: 1e-3,
            train_inducing: false,
        },
        flow: Vec::new(),
        q_init: 0.1,
        r_init: 0.1,
        emission: None,
    };
    let mut learner = Learner::new(&spec, seed).expect("valid instance");
    let w = Matrix::from_fn(d_in, d_x, |i, d| if i < d_x { a[(d, i)] } else { b[d] });
    *learner.store.get_mut(learner.model.gp.mean) = w;
    for id in &learner.model.gp.chol {
        *learner.store.get_mut(*id) = raw_from_chol(&(Matrix::identity(d_in, d_in) * 1e-3));
    }
    *learner.store.get_mut(learner.model.log_q) = Matrix::from_fn(1, d_x, |_, j| q[j].ln());
    *learner.store.get_mut(learner.model.log_r) = Matrix::from_fn(1, d_y, |_, j| r[j].ln());

    let u = Matrix::from_element(steps, 1, 1.0);
    let ds = dataset(vec![Sequence { y: y.clone(), u: Some(u), x: None }]);
    let data = TrainData::new(&ds).expect("one sequence");
    let lg = LinearGaussian {
        a,
        b,
        q: DMatrix::from_diagonal(&DVector::from_vec(q)),
        c,
        r: DMatrix::from_diagonal(&DVector::from_vec(r)),
        m0: DVector::zeros(d_x),
        p0: DMatrix::identity(d_x, d_x),
    };
    LinearInstance { learner, data, lg, y }
}

/// ELBO averaged over `paths` independent reparametrized trajectories.
pub fn mean_elbo(learner: &Learner, data: &TrainData, paths: usize, seed: u64) -> f64 {
    (0..paths).map(|k| learner.evaluate_elbo(data, 1, seed.wrapping_add(k as u64)).expect("finite ELBO").total).sum::<f64>() / paths as f64
}

/// A small TGPSSM with every parameter group perturbed away from its
/// initialization, one control channel and a two-dimensional state.
pub struct GradientInstance {
    pub learner: Learner,
    pub batch: SeqBatch,
    pub noise: NoiseBank,
}

pub fn gradient_instance(seed: u64) -> GradientInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flow: Vec<FlowLayerConfig> = vec![
        LayerSpec::Sal { a: 0.1, b: 1.1, c: -0.1, d: 0.9 }.into(),
        LayerSpec::Coupling { split: 1, flip: false, hidden: 4 }.into(),
        LayerSpec::Tanh { a: 3.0, b: 0.4, c: 0.1, d: 0.0 }.into(),
    ];
    let spec = ModelSpec {
        d_x: 2,
        d_y: 2,
        d_c: 1,
        num_inducing: 4,
        gp: GpInit { inducing: InducingInit::Uniform { lo: -1.5, hi: 1.5 }, ..Default::default() },
        flow,
        q_init: 0.1,
        r_init: 0.2,
        emission: None,
    };
    let mut learner = Learner::new(&spec, seed).expect("valid spec");
    for v in learner.store.values_mut() {
        v.apply(|e| *e += 0.1 * rng.gen_range(-1.0..1.0));
    }
    let steps = 4;
    let n_seq = 2;
    let ys: Vec<Matrix> = (0..n_seq).map(|_| Matrix::from_fn(steps, 2, |_, _| rng.gen_range(-1.0..1.0))).collect();
    let us: Vec<Matrix> = (0..n_seq).map(|_| Matrix::from_fn(steps, 1, |_, _| rng.gen_range(-1.0..1.0))).collect();
    let yr: Vec<&Matrix> = ys.iter().collect();
    let ur: Vec<&Matrix> = us.iter().collect();
    let batch = SeqBatch::from_sequences(&yr, Some(&ur)).expect("aligned batch");
    let noise = NoiseBank::seeded(seed.wrapping_add(17), n_seq, steps, 2, 2);
    GradientInstance { learner, batch, noise }
}

impl GradientInstance {
    /// Full ELBO (unit KL weights) at `values`, with the instance's fixed noise.
    pub fn elbo_at(&self, values: &[Matrix]) -> f64 {
        let tape = Tape::new();
        let b = self.learner.store.bind_with(&tape, values);
        let ssm = self.learner.model.prepare(&b);
        let post = self.learner.vs.prepare(&b, &self.batch);
        elbo_terms(&ssm, &post, &self.batch, &self.noise).total(1.0, 1.0).scalar()
    }

    /// Reverse-mode gradients of [`Self::elbo_at`] at the current values.
    pub fn gradients(&self) -> Vec<Matrix> {
        let tape = Tape::new();
        let b = self.learner.store.bind(&tape);
        let ssm = self.learner.model.prepare(&b);
        let post = self.learner.vs.prepare(&b, &self.batch);
        let out = elbo_terms(&ssm, &post, &self.batch, &self.noise).total(1.0, 1.0);
        let g = tape.gradients(out);
        b.vars().iter().map(|v| g.wrt(*v)).collect()
    }
}
