//! The transformed GP state-space model: parameters, prior samplers, the
//! joint density and trajectory serialization.

use std::io::{Read, Write};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Var};
use crate::error::{Error, Result};
use crate::flows::{FlowLayerConfig, FlowStack, FlowValues};
use crate::gp::{gp_conditional, kernel_matrix, GaussianDist, GpInit, Kernel, GpOnTape, SparseGp, SparseGpValues, JITTER};
use crate::params::{Bound, ParamGroup, ParamId, ParamStore};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn default_q() -> f64 {
    0.05
}

fn default_r() -> f64 {
    0.1
}

/// Structural description of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub d_x: usize,
    pub d_y: usize,
    /// Number of control channels appended to the GP input.
    #[serde(default)]
    pub d_c: usize,
    pub num_inducing: usize,
    #[serde(default)]
    pub gp: GpInit,
    /// Empty for a plain GPSSM.
    #[serde(default)]
    pub flow: Vec<FlowLayerConfig>,
    /// Initial process-noise variance (every dimension).
    #[serde(default = "default_q")]
    pub q_init: f64,
    /// Initial observation-noise variance (every channel).
    #[serde(default = "default_r")]
    pub r_init: f64,
    /// Emission matrix `d_y × d_x`, row-major; defaults to `[I 0]`.
    #[serde(default)]
    pub emission: Option<Vec<f64>>,
}

impl ModelSpec {
    pub fn emission_matrix(&self) -> Result<Matrix> {
        match &self.emission {
            Some(v) => {
                if v.len() != self.d_y * self.d_x {
                    return Err(Error::Config(format!("emission needs {} entries, got {}", self.d_y * self.d_x, v.len())));
                }
                Ok(Matrix::from_row_slice(self.d_y, self.d_x, v))
            }
            None => {
                if self.d_y > self.d_x {
                    return Err(Error::Config("d_y > d_x requires an explicit emission matrix".into()));
                }
                Ok(Matrix::from_fn(self.d_y, self.d_x, |i, j| if i == j { 1.0 } else { 0.0 }))
            }
        }
    }
}

/// Parameter handles of a TGPSSM. The emission matrix `C` is fixed.
#[derive(Debug, Clone)]
pub struct TgpssmModel {
    pub d_x: usize,
    pub d_y: usize,
    pub d_c: usize,
    pub gp: SparseGp,
    pub flow: FlowStack,
    /// `1 × d_x` log process-noise variances.
    pub log_q: ParamId,
    /// `1 × d_y` log observation-noise variances.
    pub log_r: ParamId,
    pub c: Matrix,
}

impl TgpssmModel {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        if spec.d_x == 0 || spec.d_y == 0 {
            return Err(Error::Config("state and observation dimensions must be positive".into()));
        }
        if spec.q_init <= 0.0 || spec.r_init <= 0.0 {
            return Err(Error::Config("noise variances must be positive".into()));
        }
        let c = spec.emission_matrix()?;
        let gp = SparseGp::new(store, "gp", spec.d_x + spec.d_c, spec.d_x, spec.num_inducing, &spec.gp, rng)?;
        let flow = FlowStack::new(store, "flow", spec.d_x, &spec.flow, rng)?;
        let log_q = store.add("noise.log_q", ParamGroup::Q, Matrix::from_element(1, spec.d_x, spec.q_init.ln()));
        let log_r = store.add("noise.log_r", ParamGroup::R, Matrix::from_element(1, spec.d_y, spec.r_init.ln()));
        Ok(Self { d_x: spec.d_x, d_y: spec.d_y, d_c: spec.d_c, gp, flow, log_q, log_r, c })
    }

    pub fn values(&self, store: &ParamStore) -> ModelValues {
        ModelValues {
            gp: self.gp.values(store),
            flow: self.flow.values(store),
            q: store.get(self.log_q).iter().map(|v| v.exp()).collect(),
            r: store.get(self.log_r).iter().map(|v| v.exp()).collect(),
            c: self.c.clone(),
            d_c: self.d_c,
        }
    }

    pub fn prepare<'t, 'a>(&'a self, b: &'a Bound<'t>) -> TgpssmOnTape<'t, 'a> {
        TgpssmOnTape { gp: self.gp.prepare(b), model: self, bound: b }
    }
}

/// Generative-model quantities the ELBO needs, recorded on a tape.
pub trait SsmOnTape<'t> {
    fn d_x(&self) -> usize;
    fn emission(&self) -> &Matrix;
    /// `1 × d_x`
    fn log_q(&self) -> Var<'t>;
    /// `1 × d_y`
    fn log_r(&self) -> Var<'t>;
    /// `KL(q(U) ‖ p(U))`, absent for fixed transitions.
    fn kl_u(&self) -> Option<Var<'t>>;
    /// `Σ_rows (1/n) Σ_i log N(x_t | G(f_t^(i)), Q)` with `f_t^(i)` reparametrised
    /// from `q(f_t)` at `input` using the standard-normal draws `eps` (one per sample).
    fn state_log_lik(&self, input: Var<'t>, x_t: Var<'t>, eps: &[Matrix]) -> Var<'t>;
}

/// Sum over rows and columns of `log N(x | mu, diag(exp(log_var)))`.
pub fn diag_gaussian_log_pdf<'t>(x: Var<'t>, mu: Var<'t>, log_var: Var<'t>) -> Var<'t> {
    let rows = x.shape().0 as f64;
    let cols = x.shape().1 as f64;
    let quad = ((x - mu).square() * (-log_var).exp()).sum();
    let logdet = log_var.sum().scale(rows);
    (quad + logdet).shift(rows * cols * LN_2PI).scale(-0.5)
}

pub struct TgpssmOnTape<'t, 'a> {
    gp: GpOnTape<'t>,
    model: &'a TgpssmModel,
    bound: &'a Bound<'t>,
}

impl<'t, 'a> TgpssmOnTape<'t, 'a> {
    /// Posterior-mean transition `G(E[f_t])` for each input row.
    pub fn mean_transition(&self, input: Var<'t>) -> Var<'t> {
        let (mean, _) = self.gp.marginal(input);
        self.model.flow.forward_on_tape(self.bound, mean)
    }

    pub fn gp(&self) -> &GpOnTape<'t> {
        &self.gp
    }
}

impl<'t, 'a> SsmOnTape<'t> for TgpssmOnTape<'t, 'a> {
    fn d_x(&self) -> usize {
        self.model.d_x
    }

    fn emission(&self) -> &Matrix {
        &self.model.c
    }

    fn log_q(&self) -> Var<'t> {
        self.bound.var(self.model.log_q)
    }

    fn log_r(&self) -> Var<'t> {
        self.bound.var(self.model.log_r)
    }

    fn kl_u(&self) -> Option<Var<'t>> {
        Some(self.gp.kl())
    }

    fn state_log_lik(&self, input: Var<'t>, x_t: Var<'t>, eps: &[Matrix]) -> Var<'t> {
        assert!(!eps.is_empty(), "at least one Monte-Carlo sample is required");
        let (mean, var) = self.gp.marginal(input);
        let sd = var.sqrt();
        let log_q = self.log_q();
        let mut total: Option<Var<'t>> = None;
        for e in eps {
            let f = mean + sd * self.bound.tape.leaf(e.clone());
            let ft = self.model.flow.forward_on_tape(self.bound, f);
            let ll = diag_gaussian_log_pdf(x_t, ft, log_q);
            total = Some(match total {
                Some(t) => t + ll,
                None => ll,
            });
        }
        total.expect("nonempty").scale(1.0 / eps.len() as f64)
    }
}

/// Plain-value model parameters, used by samplers and evaluation.
#[derive(Debug, Clone)]
pub struct ModelValues {
    pub gp: SparseGpValues,
    pub flow: FlowValues,
    /// Process-noise variances.
    pub q: Vec<f64>,
    /// Observation-noise variances.
    pub r: Vec<f64>,
    pub c: Matrix,
    pub d_c: usize,
}

impl ModelValues {
    pub fn d_x(&self) -> usize {
        self.q.len()
    }

    pub fn d_y(&self) -> usize {
        self.r.len()
    }

    /// Same model with the flow removed.
    pub fn without_flow(&self) -> Self {
        Self { flow: FlowValues::identity(self.d_x()), ..self.clone() }
    }

    /// `G(E[q(f_t)])` and the marginal variance of `f_t` for each row of `input`.
    pub fn mean_transition(&self, input: &Matrix) -> Result<(Matrix, Matrix)> {
        let (mean, var) = self.gp.marginal_batch(input)?;
        Ok((self.flow.forward_batch(&mean)?, var))
    }

    fn gp_input(&self, x: &[f64], u: Option<&[f64]>) -> Vec<f64> {
        let mut v = x.to_vec();
        if let Some(u) = u {
            v.extend_from_slice(u);
        }
        v
    }

    fn require_no_controls(&self) -> Result<()> {
        if self.d_c > 0 {
            return Err(Error::Config("prior sampling is defined for models without control inputs".into()));
        }
        Ok(())
    }

    fn emit<R: Rng>(&self, rng: &mut R, y: &mut [f64], xt: &mut [f64], ft: &[f64]) {
        for (d, v) in xt.iter_mut().enumerate() {
            let e: f64 = rng.sample(StandardNormal);
            *v = ft[d] + self.q[d].sqrt() * e;
        }
        let cx = &self.c * DVector::from_column_slice(xt);
        for (i, yi) in y.iter_mut().enumerate() {
            let e: f64 = rng.sample(StandardNormal);
            *yi = cx[i] + self.r[i].sqrt() * e;
        }
    }

    /// Sequential sampling that conditions each `f_t` on every earlier `(x, f)` pair.
    pub fn sample_prior_exact(&self, steps: usize, seed: u64) -> Result<Trajectory> {
        self.require_no_controls()?;
        if steps == 0 {
            return Err(Error::Config("trajectory length must be at least 1".into()));
        }
        let (dx, dy) = (self.d_x(), self.d_y());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut traj = Trajectory::zeros(steps, dx, dy);
        for d in 0..dx {
            traj.x[(0, d)] = rng.sample(StandardNormal);
        }
        let mut f = Matrix::zeros(steps, dx);
        for t in 1..=steps {
            let prev: Vec<f64> = traj.x.row(t - 1).iter().copied().collect();
            let input = self.gp_input(&prev, None);
            let test = Matrix::from_row_slice(1, input.len(), &input);
            let train_x = traj.x.rows(0, t - 1).into_owned();
            let mut ft = vec![0.0; dx];
            for (d, k) in self.gp.kernels.iter().enumerate() {
                let train_f = f.view((0, d), (t - 1, 1)).column(0).into_owned();
                let post = gp_conditional(k, &train_x, &train_f, 0.0, &test)?;
                let sd = post.cov[(0, 0)].max(0.0).sqrt();
                let e: f64 = rng.sample(StandardNormal);
                ft[d] = post.mean[0] + sd * e;
                f[(t - 1, d)] = ft[d];
            }
            let ftil = self.flow.forward(&ft)?;
            let mut xt = vec![0.0; dx];
            let mut yt = vec![0.0; dy];
            self.emit(&mut rng, &mut yt, &mut xt, &ftil);
            traj.set_step(t, &xt, &yt, &ft, &ftil);
        }
        Ok(traj)
    }

    /// Sampling through one draw of the inducing outputs `U ~ N(0, K_ZZ)`.
    pub fn sample_prior_sparse(&self, steps: usize, seed: u64) -> Result<Trajectory> {
        self.require_no_controls()?;
        if steps == 0 {
            return Err(Error::Config("trajectory length must be at least 1".into()));
        }
        let (dx, dy) = (self.d_x(), self.d_y());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut traj = Trajectory::zeros(steps, dx, dy);
        for d in 0..dx {
            traj.x[(0, d)] = rng.sample(StandardNormal);
        }
        let us: Vec<DVector<f64>> = (0..dx).map(|d| self.gp.prior_u(d).sample(&mut rng)).collect::<Result<_>>()?;
        for t in 1..=steps {
            let prev: Vec<f64> = traj.x.row(t - 1).iter().copied().collect();
            let test = Matrix::from_row_slice(1, dx, &prev);
            let mut ft = vec![0.0; dx];
            for (d, k) in self.gp.kernels.iter().enumerate() {
                let post = gp_conditional(k, &self.gp.z, &us[d], 0.0, &test)?;
                let sd = post.cov[(0, 0)].max(0.0).sqrt();
                let e: f64 = rng.sample(StandardNormal);
                ft[d] = post.mean[0] + sd * e;
            }
            let ftil = self.flow.forward(&ft)?;
            let mut xt = vec![0.0; dx];
            let mut yt = vec![0.0; dy];
            self.emit(&mut rng, &mut yt, &mut xt, &ftil);
            traj.set_step(t, &xt, &yt, &ft, &ftil);
        }
        Ok(traj)
    }

    /// `log p(x₀) + log p(F̃) + Σ_t [log N(x_t | f̃_t, Q) + log N(y_t | C x_t, R)]`.
    ///
    /// `log p(F̃)` applies the change of variables to the GP density of
    /// `F = G⁻¹(F̃)` at inputs `x_{0:T−1}`; kernel matrices carry the usual jitter.
    pub fn joint_log_density(&self, traj: &Trajectory) -> Result<f64> {
        let steps = traj.len();
        let (dx, dy) = (self.d_x(), self.d_y());
        let ftil = traj.f_tilde.as_ref().ok_or_else(|| Error::Shape("trajectory lacks f̃ values".into()))?;
        if traj.x.shape() != (steps + 1, dx) || traj.y.shape() != (steps, dy) || ftil.shape() != (steps, dx) {
            return Err(Error::Shape("trajectory dimensions disagree with the model".into()));
        }
        let mut total = GaussianDist::standard(dx).log_pdf(&traj.x.row(0).transpose())?;
        let inputs = match &traj.u {
            Some(u) => {
                let mut m = Matrix::zeros(steps, dx + u.ncols());
                m.view_mut((0, 0), (steps, dx)).copy_from(&traj.x.rows(0, steps));
                m.view_mut((0, dx), (steps, u.ncols())).copy_from(u);
                m
            }
            None => traj.x.rows(0, steps).into_owned(),
        };
        let mut f = Matrix::zeros(steps, dx);
        for t in 0..steps {
            let row: Vec<f64> = ftil.row(t).iter().copied().collect();
            let ft = self.flow.inverse(&row)?;
            total -= self.flow.log_det_jacobian(&ft)?;
            for d in 0..dx {
                f[(t, d)] = ft[d];
            }
        }
        for (d, k) in self.gp.kernels.iter().enumerate() {
            let kxx = kernel_matrix(k, &inputs, &inputs) + Matrix::identity(steps, steps) * JITTER;
            total += GaussianDist::new(DVector::zeros(steps), kxx).log_pdf(&f.column(d).into_owned())?;
        }
        for t in 1..=steps {
            for d in 0..dx {
                total += log_normal(traj.x[(t, d)], ftil[(t - 1, d)], self.q[d]);
            }
            let cx = &self.c * traj.x.row(t).transpose();
            for i in 0..dy {
                total += log_normal(traj.y[(t - 1, i)], cx[i], self.r[i]);
            }
        }
        Ok(total)
    }
}

pub fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln() + (x - mean).powi(2) / var)
}

/// States `x_{0:T}`, observations `y_{1:T}` and optional latent function values.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `(T+1) × d_x`
    pub x: Matrix,
    /// `T × d_y`
    pub y: Matrix,
    /// `T × d_x`, GP values before the flow.
    pub f: Option<Matrix>,
    /// `T × d_x`, transformed values.
    pub f_tilde: Option<Matrix>,
    /// `T × d_c` control inputs aligned with `y`.
    pub u: Option<Matrix>,
}

impl Trajectory {
    pub fn zeros(steps: usize, dx: usize, dy: usize) -> Self {
        Self {
            x: Matrix::zeros(steps + 1, dx),
            y: Matrix::zeros(steps, dy),
            f: Some(Matrix::zeros(steps, dx)),
            f_tilde: Some(Matrix::zeros(steps, dx)),
            u: None,
        }
    }

    pub fn len(&self) -> usize {
        self.y.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.y.nrows() == 0
    }

    fn set_step(&mut self, t: usize, x: &[f64], y: &[f64], f: &[f64], ftil: &[f64]) {
        for (d, v) in x.iter().enumerate() {
            self.x[(t, d)] = *v;
        }
        for (i, v) in y.iter().enumerate() {
            self.y[(t - 1, i)] = *v;
        }
        if let Some(fm) = self.f.as_mut() {
            for (d, v) in f.iter().enumerate() {
                fm[(t - 1, d)] = *v;
            }
        }
        if let Some(fm) = self.f_tilde.as_mut() {
            for (d, v) in ftil.iter().enumerate() {
                fm[(t - 1, d)] = *v;
            }
        }
    }

    /// CSV with columns `t, x_1.., y_1..`; the `t = 0` row leaves `y` empty.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let dx = self.x.ncols();
        let dy = self.y.ncols();
        let mut header = vec!["t".to_string()];
        header.extend((1..=dx).map(|i| format!("x_{i}")));
        header.extend((1..=dy).map(|i| format!("y_{i}")));
        wr.write_record(&header).map_err(csv_err)?;
        for t in 0..self.x.nrows() {
            let mut rec = vec![t.to_string()];
            rec.extend(self.x.row(t).iter().map(|v| fmt17(*v)));
            if t == 0 {
                rec.extend((0..dy).map(|_| String::new()));
            } else {
                rec.extend(self.y.row(t - 1).iter().map(|v| fmt17(*v)));
            }
            wr.write_record(&rec).map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers().map_err(csv_err)?.clone();
        let dx = header.iter().filter(|h| h.starts_with("x_")).count();
        let dy = header.iter().filter(|h| h.starts_with("y_")).count();
        if header.get(0) != Some("t") || header.len() != 1 + dx + dy {
            return Err(Error::Parse { line: 1, message: "expected columns t, x_1.., y_1..".into() });
        }
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Parse { line, message: e.to_string() })?;
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| Error::Parse { line, message: format!("non-numeric cell `{s}`") });
            for k in 1..=dx {
                xs.push(num(&rec[k])?);
            }
            if i > 0 {
                for k in 0..dy {
                    ys.push(num(&rec[1 + dx + k])?);
                }
            }
        }
        let steps = ys.len() / dy.max(1);
        Ok(Self {
            x: Matrix::from_row_slice(steps + 1, dx, &xs),
            y: Matrix::from_row_slice(steps, dy, &ys),
            f: None,
            f_tilde: None,
            u: None,
        })
    }
}

/// Shortest-exact 17-significant-digit rendering.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Parse { line, message: e.to_string() }
}

/// Preimages under a scalar marginal flow and the summed `ln G'` at them.
fn preimage(flow: &FlowValues, values: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    assert_eq!(flow.d, 1, "marginal flow must act on scalar process values");
    let mut pre = DVector::zeros(values.len());
    let mut ld = 0.0;
    for (i, v) in values.iter().enumerate() {
        let f = flow.inverse(&[*v])?[0];
        ld += flow.log_det_jacobian(&[f])?;
        pre[i] = f;
    }
    Ok((pre, ld))
}

/// `ln p(F̃, Ũ)` for transformed values at inputs `x` and `z`, assembled as
/// `p(F | U) J_f · p(U) J_u` with a noiseless GP conditional.
pub fn augmented_prior_log_density(kernel: &Kernel, flow: &FlowValues, x: &Matrix, z: &Matrix, f_t: &DVector<f64>, u_t: &DVector<f64>) -> Result<f64> {
    let (f, ld_f) = preimage(flow, f_t)?;
    let (u, ld_u) = preimage(flow, u_t)?;
    let cond = gp_conditional(kernel, z, &u, 0.0, x)?;
    let prior_u = GaussianDist::new(DVector::zeros(u.len()), kernel_matrix(kernel, z, z) + Matrix::identity(u.len(), u.len()) * JITTER);
    Ok(cond.log_pdf(&f)? - ld_f + prior_u.log_pdf(&u)? - ld_u)
}

/// The same density by change of variables on the joint Gaussian over `(F, U)`.
/// `K_ZZ` carries the model jitter, as in the conditional route.
pub fn augmented_prior_log_density_joint(kernel: &Kernel, flow: &FlowValues, x: &Matrix, z: &Matrix, f_t: &DVector<f64>, u_t: &DVector<f64>) -> Result<f64> {
    let (f, ld_f) = preimage(flow, f_t)?;
    let (u, ld_u) = preimage(flow, u_t)?;
    let inputs = Matrix::from_fn(x.nrows() + z.nrows(), x.ncols(), |i, j| if i < x.nrows() { x[(i, j)] } else { z[(i - x.nrows(), j)] });
    let values = DVector::from_iterator(f.len() + u.len(), f.iter().chain(u.iter()).copied());
    let mut cov = kernel_matrix(kernel, &inputs, &inputs);
    for i in x.nrows()..inputs.nrows() {
        cov[(i, i)] += JITTER;
    }
    let joint = GaussianDist::new(DVector::zeros(values.len()), cov);
    Ok(joint.log_pdf(&values)? - ld_f - ld_u)
}
