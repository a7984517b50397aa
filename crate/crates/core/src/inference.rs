//! Mean-field variational family, the inference network and the five-term ELBO.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::flows::Mlp;
use crate::gp::{chol_from_raw, raw_from_chol, SparseGpValues};
use crate::model::{diag_gaussian_log_pdf, log_normal, ModelValues, SsmOnTape, LN_2PI};
use crate::params::{Bound, ParamGroup, ParamId, ParamStore};

/// Equal-length sequences stacked as rows, stored time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqBatch {
    /// `T` arrays of shape `B × d_y`.
    pub y: Vec<Matrix>,
    /// `T` arrays of shape `B × d_c`, aligned with `y`.
    pub u: Option<Vec<Matrix>>,
}

impl SeqBatch {
    /// Stacks `T × d_y` sequences (and optional `T × d_c` controls).
    pub fn from_sequences(ys: &[&Matrix], us: Option<&[&Matrix]>) -> Result<Self> {
        let first = ys.first().ok_or(Error::EmptyDataset)?;
        let (steps, dy) = first.shape();
        if steps == 0 {
            return Err(Error::EmptyDataset);
        }
        if ys.iter().any(|y| y.shape() != (steps, dy)) {
            return Err(Error::Shape("sequences in a batch must share length and width".into()));
        }
        let stack = |seqs: &[&Matrix], t: usize| Matrix::from_fn(seqs.len(), seqs[0].ncols(), |i, j| seqs[i][(t, j)]);
        let y = (0..steps).map(|t| stack(ys, t)).collect();
        let u = match us {
            Some(us) => {
                if us.len() != ys.len() || us.iter().any(|u| u.nrows() != steps || u.ncols() != us[0].ncols()) {
                    return Err(Error::Shape("controls must align with observations".into()));
                }
                Some((0..steps).map(|t| stack(us, t)).collect())
            }
            None => None,
        };
        Ok(Self { y, u })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.y[0].nrows()
    }

    pub fn d_y(&self) -> usize {
        self.y[0].ncols()
    }

    pub fn d_c(&self) -> usize {
        self.u.as_ref().map_or(0, |u| u[0].ncols())
    }

    pub fn num_observations(&self) -> usize {
        self.len() * self.batch_size() * self.d_y()
    }
}

/// Standard-normal draws for one ELBO evaluation, drawn off the tape so
/// repeated evaluations can share them.
#[derive(Debug, Clone)]
pub struct NoiseBank {
    /// `B × d_x`
    pub x0: Matrix,
    /// `T` arrays of `B × d_x`.
    pub x: Vec<Matrix>,
    /// `T × n` arrays of `B × d_x` for the transition samples.
    pub f: Vec<Vec<Matrix>>,
}

impl NoiseBank {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, batch: usize, steps: usize, d_x: usize, n: usize) -> Self {
        let mut normal = |_: usize, _: usize| rng.sample::<f64, _>(StandardNormal);
        let x0 = Matrix::from_fn(batch, d_x, &mut normal);
        let mut x = Vec::with_capacity(steps);
        let mut f = Vec::with_capacity(steps);
        for _ in 0..steps {
            x.push(Matrix::from_fn(batch, d_x, &mut normal));
            f.push((0..n).map(|_| Matrix::from_fn(batch, d_x, &mut normal)).collect());
        }
        Self { x0, x, f }
    }

    pub fn seeded(seed: u64, batch: usize, steps: usize, d_x: usize, n: usize) -> Self {
        Self::draw(&mut ChaCha8Rng::seed_from_u64(seed), batch, steps, d_x, n)
    }

    /// All-zero draws: the state path follows the posterior means.
    pub fn zeros(batch: usize, steps: usize, d_x: usize, n: usize) -> Self {
        Self {
            x0: Matrix::zeros(batch, d_x),
            x: vec![Matrix::zeros(batch, d_x); steps],
            f: vec![vec![Matrix::zeros(batch, d_x); n]; steps],
        }
    }
}

/// Diagonal Gaussian `q(x_t | x_{t−1})` for each row, as tape nodes.
pub struct StepDist<'t> {
    pub mean: Var<'t>,
    pub var: Var<'t>,
    pub log_var: Var<'t>,
}

/// Markov variational posterior `q(x₀) Π_t q(x_t | x_{t−1})` on a tape.
pub trait PosteriorOnTape<'t> {
    /// `m₀` (`1 × d_x`) and lower-triangular `L₀` (`d_x × d_x`).
    fn initial(&self) -> (Var<'t>, Var<'t>);
    /// Conditional at step `t ∈ 1..=T` given sampled `x_{t−1}` (`B × d_x`).
    fn step(&self, t: usize, x_prev: Var<'t>) -> StepDist<'t>;
}

/// Backward tanh RNN over `[y_t, u_t]` followed by a dense head on `[x_{t−1}, h_t]`.
#[derive(Debug, Clone)]
pub struct InferenceNet {
    pub d_x: usize,
    pub hidden: usize,
    pub w_in: ParamId,
    pub w_h: ParamId,
    pub b_h: ParamId,
    pub head: Mlp,
}

impl InferenceNet {
    pub const ENCODER_HIDDEN: usize = 32;
    pub const HEAD_HIDDEN: usize = 32;

    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d_x: usize, d_in: usize, rng: &mut R) -> Self {
        let h = Self::ENCODER_HIDDEN;
        let glorot = |rng: &mut R, r: usize, c: usize| {
            let lim = (6.0 / (r + c) as f64).sqrt();
            Matrix::from_fn(r, c, |_, _| rng.gen_range(-lim..lim))
        };
        let w_in = store.add("phi.encoder.w_in", ParamGroup::Phi, glorot(rng, d_in, h));
        let w_h = store.add("phi.encoder.w_h", ParamGroup::Phi, glorot(rng, h, h) * 0.5);
        let b_h = store.add("phi.encoder.b", ParamGroup::Phi, Matrix::zeros(1, h));
        let head = Mlp::new(store, "phi.head", ParamGroup::Phi, &[d_x + h, Self::HEAD_HIDDEN, Self::HEAD_HIDDEN, 2 * d_x], rng);
        Self { d_x, hidden: h, w_in, w_h, b_h, head }
    }

    /// Contexts `h_1..h_T`; `h_t` depends on inputs at steps `t..T` only.
    pub fn encode<'t>(&self, b: &Bound<'t>, batch: &SeqBatch) -> Vec<Var<'t>> {
        let tape = b.tape;
        let steps = batch.len();
        let mut h = tape.leaf(Matrix::zeros(batch.batch_size(), self.hidden));
        let mut out = vec![h; steps];
        for t in (0..steps).rev() {
            let input = match &batch.u {
                Some(u) => tape.leaf(hstack(&batch.y[t], &u[t])),
                None => tape.leaf(batch.y[t].clone()),
            };
            h = (input.matmul(b.var(self.w_in)) + h.matmul(b.var(self.w_h)) + b.var(self.b_h)).tanh();
            out[t] = h;
        }
        out
    }

    /// Head output for `[x_{t−1}, h_t]`.
    pub fn head<'t>(&self, b: &Bound<'t>, x_prev: Var<'t>, h: Var<'t>) -> StepDist<'t> {
        let out = self.head.forward_on_tape(b, b.tape.hcat(&[x_prev, h]));
        let mean = out.cols(0, self.d_x);
        let sd = out.cols(self.d_x, self.d_x).softplus();
        StepDist { mean, var: sd.square(), log_var: sd.ln().scale(2.0) }
    }
}

pub(crate) fn hstack(a: &Matrix, b: &Matrix) -> Matrix {
    let mut m = Matrix::zeros(a.nrows(), a.ncols() + b.ncols());
    m.view_mut((0, 0), a.shape()).copy_from(a);
    m.view_mut((0, a.ncols()), b.shape()).copy_from(b);
    m
}

/// `q(x₀) = N(m₀, L₀L₀ᵀ)` plus the inference network.
#[derive(Debug, Clone)]
pub struct VariationalState {
    /// `1 × d_x`
    pub m0: ParamId,
    /// Unconstrained `L₀` (softplus diagonal).
    pub l0: ParamId,
    pub net: InferenceNet,
}

impl VariationalState {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d_x: usize, d_y: usize, d_c: usize, rng: &mut R) -> Self {
        let m0 = store.add("q0.mean", ParamGroup::M0, Matrix::zeros(1, d_x));
        let l0 = store.add("q0.chol", ParamGroup::L0, raw_from_chol(&Matrix::identity(d_x, d_x)));
        let net = InferenceNet::new(store, d_x, d_y + d_c, rng);
        Self { m0, l0, net }
    }

    pub fn prepare<'t, 'a>(&'a self, b: &'a Bound<'t>, batch: &SeqBatch) -> VariationalOnTape<'t, 'a> {
        VariationalOnTape { vs: self, bound: b, contexts: self.net.encode(b, batch) }
    }

    pub fn m0_value(&self, store: &ParamStore) -> Vec<f64> {
        store.get(self.m0).iter().copied().collect()
    }

    pub fn l0_value(&self, store: &ParamStore) -> Matrix {
        let raw = store.get(self.l0);
        Matrix::from_fn(raw.nrows(), raw.ncols(), |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => raw[(i, j)],
            std::cmp::Ordering::Equal => crate::autodiff::softplus(raw[(i, j)]),
            std::cmp::Ordering::Less => 0.0,
        })
    }

    /// Runs `q` along one reparametrised path per sequence; returns the states
    /// `x_{0:T}` and per-step means and variances, each time-major `B × d_x`.
    pub fn sample_q_trajectory(&self, store: &ParamStore, batch: &SeqBatch, noise: &NoiseBank) -> QPath {
        let tape = Tape::new();
        let b = store.bind(&tape);
        let post = self.prepare(&b, batch);
        let (x, steps) = sample_path(&post, noise);
        QPath {
            x: x.iter().map(|v| v.value()).collect(),
            mean: steps.iter().map(|s| s.mean.value()).collect(),
            var: steps.iter().map(|s| s.var.value()).collect(),
        }
    }
}

/// A sampled state path and the conditionals that produced it.
#[derive(Debug, Clone)]
pub struct QPath {
    /// `x_0..x_T`
    pub x: Vec<Matrix>,
    /// `ω_1..ω_T`
    pub mean: Vec<Matrix>,
    /// `Σ_1..Σ_T` (diagonals)
    pub var: Vec<Matrix>,
}

pub struct VariationalOnTape<'t, 'a> {
    vs: &'a VariationalState,
    bound: &'a Bound<'t>,
    contexts: Vec<Var<'t>>,
}

impl<'t, 'a> VariationalOnTape<'t, 'a> {
    pub fn context(&self, t: usize) -> Var<'t> {
        self.contexts[t - 1]
    }
}

impl<'t, 'a> PosteriorOnTape<'t> for VariationalOnTape<'t, 'a> {
    fn initial(&self) -> (Var<'t>, Var<'t>) {
        (self.bound.var(self.vs.m0), chol_from_raw(self.bound.var(self.vs.l0)))
    }

    fn step(&self, t: usize, x_prev: Var<'t>) -> StepDist<'t> {
        self.vs.net.head(self.bound, x_prev, self.contexts[t - 1])
    }
}

/// Samples `x_{0:T}` from `q` with the given draws.
pub fn sample_path<'t>(post: &dyn PosteriorOnTape<'t>, noise: &NoiseBank) -> (Vec<Var<'t>>, Vec<StepDist<'t>>) {
    let (m0, l0) = post.initial();
    let tape = m0.tape();
    let x0 = m0 + tape.leaf(noise.x0.clone()).matmul(l0.t());
    let mut xs = vec![x0];
    let mut steps = Vec::with_capacity(noise.x.len());
    for (t, eps) in noise.x.iter().enumerate() {
        let d = post.step(t + 1, xs[t]);
        let x = d.mean + d.var.sqrt() * tape.leaf(eps.clone());
        xs.push(x);
        steps.push(d);
    }
    (xs, steps)
}

/// The five ELBO terms as tape nodes.
pub struct ElboTerms<'t> {
    pub kl_x0: Var<'t>,
    pub kl_u: Option<Var<'t>>,
    pub entropy: Var<'t>,
    pub state_recon: Var<'t>,
    pub data_recon: Var<'t>,
}

impl<'t> ElboTerms<'t> {
    /// `−w·(kl_x0 + s·kl_u) + entropy + state_recon + data_recon`, where `w`
    /// weights the KL terms and `s` rescales `KL(q(U)‖p(U))` for mini-batches.
    pub fn total(&self, kl_weight: f64, kl_u_scale: f64) -> Var<'t> {
        let mut kl = self.kl_x0;
        if let Some(k) = self.kl_u {
            kl = kl + k.scale(kl_u_scale);
        }
        self.entropy + self.state_recon + self.data_recon - kl.scale(kl_weight)
    }

    pub fn breakdown(&self, kl_u_scale: f64) -> ElboBreakdown {
        ElboBreakdown::new(
            self.kl_x0.scalar(),
            self.kl_u.map_or(0.0, |k| k.scalar() * kl_u_scale),
            self.entropy.scalar(),
            self.state_recon.scalar(),
            self.data_recon.scalar(),
        )
    }
}

/// Individually inspectable ELBO terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub kl_x0: f64,
    pub kl_u: f64,
    pub entropy: f64,
    pub state_recon: f64,
    pub data_recon: f64,
    pub total: f64,
}

impl ElboBreakdown {
    pub fn new(kl_x0: f64, kl_u: f64, entropy: f64, state_recon: f64, data_recon: f64) -> Self {
        let total = -kl_x0 - kl_u + entropy + state_recon + data_recon;
        Self { kl_x0, kl_u, entropy, state_recon, data_recon, total }
    }
}

fn gp_input<'t>(x_prev: Var<'t>, batch: &SeqBatch, t: usize) -> Var<'t> {
    match &batch.u {
        Some(u) => x_prev.tape().hcat(&[x_prev, x_prev.tape().leaf(u[t - 1].clone())]),
        None => x_prev,
    }
}

/// Records the five ELBO terms for a batch, summed over its sequences.
///
/// One reparametrised state path per sequence; `noise.f[t]` carries the
/// `n` transition samples.
pub fn elbo_terms<'t>(ssm: &dyn SsmOnTape<'t>, post: &dyn PosteriorOnTape<'t>, batch: &SeqBatch, noise: &NoiseBank) -> ElboTerms<'t> {
    let bsz = batch.batch_size() as f64;
    let (m0, l0) = post.initial();
    let tape = m0.tape();
    let d_x = ssm.d_x() as f64;
    tape.set_context(Some("kl_x0"));
    let kl_x0 = (m0.square().sum() + l0.square().sum() - l0.diag().ln().sum().scale(2.0)).shift(-d_x).scale(0.5 * bsz);
    tape.set_context(Some("kl_u"));
    let kl_u = ssm.kl_u();
    tape.set_context(None);

    let (xs, steps) = sample_path(post, noise);
    let c = ssm.emission();
    let ct = tape.leaf(c.transpose());
    let c2t = tape.leaf(c.map(|v| v * v).transpose());
    let log_r = ssm.log_r();
    let inv_r = (-log_r).exp();

    let mut entropy: Option<Var<'t>> = None;
    let mut state: Option<Var<'t>> = None;
    let mut data: Option<Var<'t>> = None;
    let acc = |slot: &mut Option<Var<'t>>, v: Var<'t>| {
        *slot = Some(match *slot {
            Some(s) => s + v,
            None => v,
        });
    };
    for (k, d) in steps.iter().enumerate() {
        let t = k + 1;
        let n = d.log_var.shape();
        let ent = d.log_var.sum().shift((n.0 * n.1) as f64 * (LN_2PI + 1.0)).scale(0.5);
        acc(&mut entropy, ent);
        let input = gp_input(xs[t - 1], batch, t);
        acc(&mut state, ssm.state_log_lik(input, xs[t], &noise.f[k]));
        let y = tape.leaf(batch.y[k].clone());
        let fit = diag_gaussian_log_pdf(y, d.mean.matmul(ct), log_r);
        let spread = (d.var.matmul(c2t) * inv_r).sum().scale(0.5);
        acc(&mut data, fit - spread);
    }
    ElboTerms {
        kl_x0,
        kl_u,
        entropy: entropy.expect("T ≥ 1"),
        state_recon: state.expect("T ≥ 1"),
        data_recon: data.expect("T ≥ 1"),
    }
}

/// `½[m₀ᵀm₀ + tr(L₀L₀ᵀ) − 2 log|L₀| − d_x]`.
pub fn term_kl_x0(m0: &[f64], l0: &Matrix) -> f64 {
    let d = m0.len() as f64;
    let logdet: f64 = l0.diagonal().iter().map(|v| v.abs().ln()).sum();
    0.5 * (m0.iter().map(|v| v * v).sum::<f64>() + l0.norm_squared() - 2.0 * logdet - d)
}

/// `Σ_d KL(q(u_d) ‖ p(u_d))`.
pub fn term_kl_u(gp: &SparseGpValues) -> Result<f64> {
    gp.kl()
}

/// `Σ_t [d/2·log 2π + ½ log|Σ_t| + d/2]` for diagonal `Σ_t` (one row per step).
pub fn term_entropy(var: &[Vec<f64>]) -> f64 {
    var.iter().map(|v| v.iter().map(|s| 0.5 * (LN_2PI + s.ln() + 1.0)).sum::<f64>()).sum()
}

/// `Σ_t [log N(y_t | C ω_t, R) − ½ tr(R⁻¹ C Σ_t Cᵀ)]` for one path.
pub fn term_data_reconstruction(c: &Matrix, r: &[f64], mean: &[Vec<f64>], var: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for t in 0..y.len() {
        for i in 0..r.len() {
            let cw: f64 = (0..c.ncols()).map(|j| c[(i, j)] * mean[t][j]).sum();
            let spread: f64 = (0..c.ncols()).map(|j| c[(i, j)] * c[(i, j)] * var[t][j]).sum();
            total += log_normal(y[t][i], cw, r[i]) - 0.5 * spread / r[i];
        }
    }
    total
}

/// `Σ_t (1/n) Σ_i log N(x_t | G(f_t^(i)), Q)` with `f_t^(i) ~ q(f_t)` at `x_{t−1}`.
pub fn term_state_reconstruction(model: &ModelValues, x: &Matrix, n: usize, seed: u64) -> Result<f64> {
    assert!(n >= 1, "at least one sample is required");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dx = model.d_x();
    let mut total = 0.0;
    for t in 1..x.nrows() {
        let prev: Vec<f64> = x.row(t - 1).iter().copied().collect();
        let q = model.gp.marginal_q_ft(&prev)?;
        let mut acc = 0.0;
        for _ in 0..n {
            let f: Vec<f64> = (0..dx).map(|d| q.mean[d] + q.cov[(d, d)].sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
            let ft = model.flow.forward(&f)?;
            acc += (0..dx).map(|d| log_normal(x[(t, d)], ft[d], model.q[d])).sum::<f64>();
        }
        total += acc / n as f64;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::softplus;
    use crate::model::{ModelSpec, TgpssmModel};

    fn setup(seed: u64) -> (ParamStore, TgpssmModel, VariationalState, SeqBatch) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let spec = ModelSpec {
            d_x: 1,
            d_y: 1,
            d_c: 0,
            num_inducing: 4,
            gp: Default::default(),
            flow: crate::flows::default_flow(),
            q_init: 0.05,
            r_init: 0.1,
            emission: None,
        };
        let model = TgpssmModel::new(&mut store, &spec, &mut rng).unwrap();
        let vs = VariationalState::new(&mut store, 1, 1, 0, &mut rng);
        let ys: Vec<Matrix> = (0..3).map(|_| Matrix::from_fn(6, 1, |_, _| rng.gen_range(-1.0..1.0))).collect();
        let refs: Vec<&Matrix> = ys.iter().collect();
        (store, model, vs, SeqBatch::from_sequences(&refs, None).unwrap())
    }

    #[test]
    fn zero_head_gives_constant_variance() {
        let (store, _, vs, batch) = setup(0);
        let path = vs.sample_q_trajectory(&store, &batch, &NoiseBank::seeded(1, 3, 6, 1, 1));
        let expected = softplus(0.0).powi(2);
        for v in &path.var {
            assert!(v.iter().all(|s| (s - expected).abs() < 1e-15));
        }
    }

    #[test]
    fn encoder_reaches_first_step() {
        let (store, _, vs, batch) = setup(1);
        let tape = Tape::new();
        let b = store.bind(&tape);
        let h1 = vs.net.encode(&b, &batch)[0].value();
        let mut changed = batch.clone();
        changed.y[5][(0, 0)] += 0.5;
        let h1b = vs.net.encode(&b, &changed)[0].value();
        assert!((h1 - h1b).norm() > 1e-8);
    }

    #[test]
    fn total_is_signed_sum_and_matches_plain_terms() {
        let (store, model, vs, batch) = setup(2);
        let noise = NoiseBank::seeded(3, 3, 6, 1, 1);
        let tape = Tape::new();
        let b = store.bind(&tape);
        let ssm = model.prepare(&b);
        let post = vs.prepare(&b, &batch);
        let terms = elbo_terms(&ssm, &post, &batch, &noise);
        let br = terms.breakdown(1.0);
        assert!((terms.total(1.0, 1.0).scalar() - br.total).abs() < 1e-12);
        let signed = -br.kl_x0 - br.kl_u + br.entropy + br.state_recon + br.data_recon;
        assert!((br.total - signed).abs() < 1e-12);

        let values = model.values(&store);
        assert!((br.kl_u - term_kl_u(&values.gp).unwrap()).abs() < 1e-8);
        assert!((br.kl_x0 - 3.0 * term_kl_x0(&vs.m0_value(&store), &vs.l0_value(&store))).abs() < 1e-12);

        let path = vs.sample_q_trajectory(&store, &batch, &noise);
        let row = |ms: &[Matrix], i: usize| -> Vec<Vec<f64>> { ms.iter().map(|m| m.row(i).iter().copied().collect()).collect() };
        let mut data = 0.0;
        let mut ent = 0.0;
        for i in 0..3 {
            let y: Vec<Vec<f64>> = batch.y.iter().map(|m| vec![m[(i, 0)]]).collect();
            data += term_data_reconstruction(&values.c, &values.r, &row(&path.mean, i), &row(&path.var, i), &y);
            ent += term_entropy(&row(&path.var, i));
        }
        assert!((br.data_recon - data).abs() < 1e-10);
        assert!((br.entropy - ent).abs() < 1e-10);
    }

    #[test]
    fn closed_form_examples() {
        assert!(term_kl_x0(&[0.0], &Matrix::identity(1, 1)).abs() < 1e-15);
        assert!((term_entropy(&[vec![1.0]]) - 1.418_938_533_204_672_7).abs() < 1e-12);
        assert!((term_entropy(&[vec![(2.0f64).exp()]]) - 2.418_938_533_204_672_7).abs() < 1e-12);
        let one = Matrix::identity(1, 1);
        let v = term_data_reconstruction(&one, &[1.0], &[vec![0.0]], &[vec![1.0]], &[vec![0.0]]);
        assert!((v - (-0.5 * LN_2PI - 0.5)).abs() < 1e-12);
    }
}
