//! Metrics (transition MSE, forecast RMSE, state MSE), Kalman and extended
//! Kalman filters, and report/plot serialization.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::data::Sequence;
use crate::error::{Error, Result};
use crate::inference::{hstack, NoiseBank, SeqBatch, VariationalState};
use crate::model::{fmt17, ModelValues, LN_2PI};
use crate::params::ParamStore;

/// `n` evenly spaced points on `[lo, hi]`.
pub fn eval_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

pub const GRID_POINTS: usize = 200;

pub fn kink_grid() -> Vec<f64> {
    eval_grid(-3.2, 1.2, GRID_POINTS)
}

pub fn kink_step_grid() -> Vec<f64> {
    eval_grid(-0.5, 6.5, GRID_POINTS)
}

/// Posterior-mean transition and a ±2σ band of `q(f)` pushed through the flow.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionCurve {
    pub grid: Vec<f64>,
    pub truth: Vec<f64>,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl TransitionCurve {
    pub fn compute(model: &ModelValues, truth: impl Fn(f64) -> f64, grid: &[f64]) -> Result<Self> {
        if model.d_x() != 1 || model.d_c != 0 {
            return Err(Error::Config("transition curves need a one-dimensional autonomous model".into()));
        }
        let input = Matrix::from_column_slice(grid.len(), 1, grid);
        let (mean_f, var_f) = model.gp.marginal_batch(&input)?;
        let sd = var_f.map(f64::sqrt);
        let mean = model.flow.forward_batch(&mean_f)?;
        let lower = model.flow.forward_batch(&(&mean_f - &sd * 2.0))?;
        let upper = model.flow.forward_batch(&(&mean_f + &sd * 2.0))?;
        Ok(Self {
            grid: grid.to_vec(),
            truth: grid.iter().map(|&x| truth(x)).collect(),
            mean: mean.iter().copied().collect(),
            lower: lower.iter().copied().collect(),
            upper: upper.iter().copied().collect(),
        })
    }

    pub fn mse(&self) -> f64 {
        mean_sq_diff(&self.mean, &self.truth)
    }

    /// Columns `x, true_f, posterior_mean, lower, upper`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["x", "true_f", "posterior_mean", "lower", "upper"]).map_err(crate::model::csv_err)?;
        for i in 0..self.grid.len() {
            let rec = [self.grid[i], self.truth[i], self.mean[i], self.lower[i], self.upper[i]].map(fmt17);
            out.write_record(&rec).map_err(crate::model::csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn mean_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Grid average of `(G(E[q(f)]) − f_true)²`.
pub fn transition_mse(model: &ModelValues, truth: impl Fn(f64) -> f64, grid: &[f64]) -> Result<f64> {
    Ok(TransitionCurve::compute(model, truth, grid)?.mse())
}

/// Mean path of `q` (all draws zero): `(T+1) × d_x` states.
pub fn posterior_mean_states(store: &ParamStore, vs: &VariationalState, seq: &Sequence) -> Result<Matrix> {
    let us = seq.u.as_ref().map(|u| vec![u]);
    let batch = SeqBatch::from_sequences(&[&seq.y], us.as_deref())?;
    let d_x = store.get(vs.m0).ncols();
    let path = vs.sample_q_trajectory(store, &batch, &NoiseBank::zeros(1, seq.len(), d_x, 1));
    Ok(Matrix::from_fn(path.x.len(), d_x, |t, d| path.x[t][(0, d)]))
}

/// Rolls the posterior-mean dynamics `k` steps from `x_T` of the mean path.
pub fn mean_rollout(model: &ModelValues, start: &[f64], controls: Option<&Matrix>, k: usize) -> Result<Matrix> {
    let d_x = model.d_x();
    let mut out = Matrix::zeros(k, d_x);
    let mut x = Matrix::from_row_slice(1, d_x, start);
    for j in 0..k {
        let input = match controls {
            Some(u) => hstack(&x, &u.rows(j, 1).into_owned()),
            None => x.clone(),
        };
        x = model.mean_transition(&input)?.0;
        out.row_mut(j).copy_from(&x.row(0));
    }
    Ok(out)
}

/// RMSE of `C x` from a mean rollout against the first `k` held-out observations.
pub fn forecast_rmse(model: &ModelValues, store: &ParamStore, vs: &VariationalState, train: &Sequence, test: &Sequence, k: usize) -> Result<f64> {
    if k == 0 {
        return Ok(0.0);
    }
    if k > test.len() {
        return Err(Error::Config(format!("horizon {k} exceeds the {} held-out steps", test.len())));
    }
    let states = posterior_mean_states(store, vs, train)?;
    let last: Vec<f64> = states.row(states.nrows() - 1).iter().copied().collect();
    let xs = mean_rollout(model, &last, test.u.as_ref(), k)?;
    let pred = &xs * model.c.transpose();
    let err = (pred - test.y.rows(0, k)).norm_squared() / (k * test.y.ncols()) as f64;
    Ok(err.sqrt())
}

/// Mean squared elementwise difference between equally shaped arrays.
pub fn state_mse(estimate: &Matrix, truth: &Matrix) -> Result<f64> {
    if estimate.shape() != truth.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", estimate.shape(), truth.shape())));
    }
    Ok((estimate - truth).norm_squared() / estimate.len().max(1) as f64)
}

/// `x_t = A x_{t−1} + b + v`, `y_t = C x_t + e`, `x₀ ~ N(m₀, P₀)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussian {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub q: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub m0: DVector<f64>,
    pub p0: DMatrix<f64>,
}

/// Filtered moments of `x_1..x_T` and the log evidence `log p(y_{1:T})`.
#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    pub log_evidence: f64,
}

impl FilterOutput {
    /// `T × d_x` filtered means.
    pub fn mean_matrix(&self) -> Matrix {
        let d = self.means.first().map_or(0, |m| m.len());
        Matrix::from_fn(self.means.len(), d, |t, j| self.means[t][j])
    }
}

fn update(
    t: usize,
    m_pred: DVector<f64>,
    p_pred: DMatrix<f64>,
    c: &DMatrix<f64>,
    r: &DMatrix<f64>,
    y: DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>, f64)> {
    let s = c * &p_pred * c.transpose() + r;
    let s = (&s + s.transpose()) * 0.5;
    let chol = s.clone().cholesky().ok_or(Error::FilterDivergence(t))?;
    let innov = y - c * &m_pred;
    let alpha = chol.solve(&innov);
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let ll = -0.5 * (innov.len() as f64 * LN_2PI + logdet + innov.dot(&alpha));
    let gain = chol.solve(&(c * &p_pred)).transpose();
    let m = m_pred + &gain * innov;
    let ikc = DMatrix::identity(p_pred.nrows(), p_pred.ncols()) - &gain * c;
    let p = &ikc * p_pred * ikc.transpose() + &gain * r * gain.transpose();
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::FilterDivergence(t));
    }
    Ok((m, (&p + p.transpose()) * 0.5, ll))
}

/// Exact filter for a linear-Gaussian system; `y` is `T × d_y`.
pub fn kalman_filter(lg: &LinearGaussian, y: &Matrix) -> Result<FilterOutput> {
    let mut m = lg.m0.clone();
    let mut p = lg.p0.clone();
    let mut out = FilterOutput { means: Vec::new(), covs: Vec::new(), log_evidence: 0.0 };
    for t in 0..y.nrows() {
        let m_pred = &lg.a * &m + &lg.b;
        let p_pred = &lg.a * &p * lg.a.transpose() + &lg.q;
        let (mn, pn, ll) = update(t + 1, m_pred, p_pred, &lg.c, &lg.r, y.row(t).transpose())?;
        m = mn;
        p = pn;
        out.log_evidence += ll;
        out.means.push(m.clone());
        out.covs.push(p.clone());
    }
    Ok(out)
}

/// Mean predictions of `y_{T+1..T+k}` after filtering `y`.
pub fn kalman_forecast(lg: &LinearGaussian, y: &Matrix, k: usize) -> Result<Matrix> {
    let f = kalman_filter(lg, y)?;
    let mut m = f.means.last().cloned().unwrap_or_else(|| lg.m0.clone());
    let mut out = Matrix::zeros(k, lg.c.nrows());
    for j in 0..k {
        m = &lg.a * m + &lg.b;
        out.row_mut(j).copy_from(&(&lg.c * &m).transpose());
    }
    Ok(out)
}

/// Transition value and Jacobian at a point.
pub trait Dynamics {
    fn eval(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)>;
}

/// Dynamics recorded on a tape; the Jacobian comes from reverse passes.
pub struct TapeDynamics<F>(pub F);

impl<F> Dynamics for TapeDynamics<F>
where
    F: for<'t> Fn(Var<'t>) -> Var<'t>,
{
    fn eval(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        tape_jacobian(&self.0, x)
    }
}

/// Value and Jacobian of a row-vector map `1×n → 1×m`.
pub fn tape_jacobian<F>(f: &F, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)>
where
    F: for<'t> Fn(Var<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let xv = tape.row(x.as_slice());
    let out = f(xv);
    tape.check()?;
    let val = out.value();
    let m = val.ncols();
    let mut jac = DMatrix::zeros(m, x.len());
    for i in 0..m {
        let g = tape.gradients(out.entry(0, i)).wrt(xv);
        jac.row_mut(i).copy_from(&g.row(0));
    }
    Ok((DVector::from_iterator(m, val.iter().copied()), jac))
}

/// Extended Kalman filter with the linearization supplied by `dynamics`.
pub fn ekf(
    dynamics: &dyn Dynamics,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    c: &DMatrix<f64>,
    m0: &DVector<f64>,
    p0: &DMatrix<f64>,
    y: &Matrix,
) -> Result<FilterOutput> {
    let mut m = m0.clone();
    let mut p = p0.clone();
    let mut out = FilterOutput { means: Vec::new(), covs: Vec::new(), log_evidence: 0.0 };
    for t in 0..y.nrows() {
        let (m_pred, jac) = dynamics.eval(&m)?;
        let p_pred = &jac * &p * jac.transpose() + q;
        let (mn, pn, ll) = update(t + 1, m_pred, p_pred, c, r, y.row(t).transpose())?;
        m = mn;
        p = pn;
        out.log_evidence += ll;
        out.means.push(m.clone());
        out.covs.push(p.clone());
    }
    Ok(out)
}

/// `F(x)·x` for the discretized Lorenz system, on a tape (`x` is `1 × 3`).
pub fn lorenz_on_tape<'t>(x: Var<'t>, dt: f64) -> Var<'t> {
    let tape = x.tape();
    let x1 = x.col(0);
    let apply = |v: Var<'t>| {
        let (v1, v2, v3) = (v.col(0), v.col(1), v.col(2));
        let d1 = (v2 - v1).scale(10.0);
        let d2 = v1.scale(28.0) - v2 - x1 * v3;
        let d3 = x1 * v2 - v3.scale(8.0 / 3.0);
        tape.hcat(&[d1, d2, d3]).scale(dt)
    };
    let mut term = x;
    let mut sum = x;
    for j in 1..=5 {
        term = apply(term).scale(1.0 / j as f64);
        sum = sum + term;
    }
    sum
}

/// True Lorenz transition with its tape Jacobian.
pub struct LorenzDynamics {
    pub dt: f64,
}

impl Dynamics for LorenzDynamics {
    fn eval(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let tape = Tape::new();
        let xv = tape.row(x.as_slice());
        let out = lorenz_on_tape(xv, self.dt);
        let mut jac = DMatrix::zeros(3, x.len());
        for i in 0..3 {
            let g = tape.gradients(out.entry(0, i)).wrt(xv);
            jac.row_mut(i).copy_from(&g.row(0));
        }
        Ok((DVector::from_iterator(3, out.value().iter().copied()), jac))
    }
}

/// Aggregate of one metric over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    /// Mean over seeds.
    pub value: f64,
    pub per_seed: Vec<f64>,
    pub seeds: Vec<u64>,
    pub mean: f64,
    /// Sample standard deviation (zero for a single seed).
    pub std: f64,
    pub fingerprint: String,
}

impl MetricReport {
    pub fn new(metric: &str, seeds: &[u64], per_seed: &[f64], fingerprint: &str) -> Self {
        let n = per_seed.len() as f64;
        let mean = if per_seed.is_empty() { f64::NAN } else { per_seed.iter().sum::<f64>() / n };
        let std = if per_seed.len() < 2 { 0.0 } else { (per_seed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() };
        Self { metric: metric.into(), value: mean, per_seed: per_seed.to_vec(), seeds: seeds.to_vec(), mean, std, fingerprint: fingerprint.into() }
    }
}

/// 64-bit FNV-1a digest of a resolved configuration, as hex.
pub fn fingerprint(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}
