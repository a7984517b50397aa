//! Kernels, exact GP conditionals and sparse variational GP quantities.
//!
//! Every quantity exists twice: a plain `f64` version used by samplers,
//! evaluation and as a cross-check, and a tape version used for training.

use nalgebra::{Cholesky, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, softplus_inv, Matrix, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamGroup, ParamId, ParamStore};

/// Diagonal jitter added to kernel matrices before factorisation.
pub const JITTER: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// `σ² exp(−Σ_k (a_k − b_k)² / 2ℓ_k²)`
    Se,
    /// `σ² Σ_k a_k b_k / ℓ_k²`
    Linear,
}

/// Kernel with unconstrained log hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub kind: KernelKind,
    pub log_length_scale: Vec<f64>,
    pub log_variance: f64,
}

impl Kernel {
    pub fn se(length_scale: &[f64], variance: f64) -> Self {
        Self {
            kind: KernelKind::Se,
            log_length_scale: length_scale.iter().map(|l| l.ln()).collect(),
            log_variance: variance.ln(),
        }
    }

    pub fn linear(length_scale: &[f64], variance: f64) -> Self {
        Self { kind: KernelKind::Linear, ..Self::se(length_scale, variance) }
    }

    pub fn variance(&self) -> f64 {
        self.log_variance.exp()
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let s2 = self.variance();
        match self.kind {
            KernelKind::Se => {
                let q: f64 = a
                    .iter()
                    .zip(b)
                    .zip(&self.log_length_scale)
                    .map(|((x, y), ll)| ((x - y) / ll.exp()).powi(2))
                    .sum();
                s2 * (-0.5 * q).exp()
            }
            KernelKind::Linear => {
                let q: f64 = a.iter().zip(b).zip(&self.log_length_scale).map(|((x, y), ll)| x * y / (2.0 * ll).exp()).sum();
                s2 * q
            }
        }
    }
}

/// `K(A, B)` for row-wise inputs.
pub fn kernel_matrix(kernel: &Kernel, a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.ncols(), b.ncols(), "kernel inputs differ in dimension");
    assert_eq!(a.ncols(), kernel.log_length_scale.len(), "kernel dimension mismatch");
    let ra: Vec<Vec<f64>> = a.row_iter().map(|r| r.iter().copied().collect()).collect();
    let rb: Vec<Vec<f64>> = b.row_iter().map(|r| r.iter().copied().collect()).collect();
    Matrix::from_fn(a.nrows(), b.nrows(), |i, j| kernel.eval(&ra[i], &rb[j]))
}

/// Cholesky factor of `m + JITTER·I`.
pub fn jittered_cholesky(m: &Matrix, what: &str) -> Result<Cholesky<f64, Dyn>> {
    let n = m.nrows();
    let sym = (m + m.transpose()) * 0.5 + Matrix::identity(n, n) * JITTER;
    Cholesky::new(sym).ok_or_else(|| Error::Conditioning(format!("{what} is not positive definite after jitter")))
}

/// Multivariate Gaussian with dense covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDist {
    pub mean: DVector<f64>,
    pub cov: Matrix,
}

impl GaussianDist {
    pub fn new(mean: DVector<f64>, cov: Matrix) -> Self {
        assert_eq!(cov.shape(), (mean.len(), mean.len()), "covariance shape mismatch");
        Self { mean, cov }
    }

    pub fn diagonal(mean: DVector<f64>, var: DVector<f64>) -> Self {
        let cov = Matrix::from_diagonal(&var);
        Self { mean, cov }
    }

    pub fn standard(n: usize) -> Self {
        Self { mean: DVector::zeros(n), cov: Matrix::identity(n, n) }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variance(&self) -> DVector<f64> {
        self.cov.diagonal()
    }

    pub fn log_pdf(&self, x: &DVector<f64>) -> Result<f64> {
        let ch = Cholesky::new(self.cov.clone()).ok_or_else(|| Error::Conditioning("covariance is singular".into()))?;
        let r = x - &self.mean;
        let z = ch.l().solve_lower_triangular(&r).expect("triangular factor is invertible");
        let logdet: f64 = ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
        let n = self.dim() as f64;
        Ok(-0.5 * (n * (2.0 * std::f64::consts::PI).ln() + logdet + z.norm_squared()))
    }

    /// Draws one sample; the covariance is factorised with jitter.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        let ch = jittered_cholesky(&self.cov, "sampling covariance")?;
        let eps = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        Ok(&self.mean + ch.l() * eps)
    }
}

/// Exact GP posterior at `test_x` given noisy (or noiseless) observations.
pub fn gp_conditional(
    kernel: &Kernel,
    train_x: &Matrix,
    train_f: &DVector<f64>,
    noise_var: f64,
    test_x: &Matrix,
) -> Result<GaussianDist> {
    assert_eq!(train_x.nrows(), train_f.len(), "training inputs and outputs differ in length");
    assert!(noise_var >= 0.0, "noise variance must be non-negative");
    let kss = kernel_matrix(kernel, test_x, test_x);
    if train_x.nrows() == 0 {
        return Ok(GaussianDist::new(DVector::zeros(test_x.nrows()), kss));
    }
    let n = train_x.nrows();
    let kxx = kernel_matrix(kernel, train_x, train_x) + Matrix::identity(n, n) * noise_var;
    let ch = jittered_cholesky(&kxx, "training kernel matrix")?;
    let ksx = kernel_matrix(kernel, test_x, train_x);
    let alpha = ch.solve(train_f);
    let mean = &ksx * alpha;
    let v = ch.l().solve_lower_triangular(&ksx.transpose()).expect("triangular factor is invertible");
    let cov = kss - v.transpose() * v;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianDist::new(mean, cov))
}

/// Plain Cholesky, falling back to the jittered factor for semidefinite input.
fn factor(m: &Matrix, what: &str) -> Result<Cholesky<f64, Dyn>> {
    match Cholesky::new((m + m.transpose()) * 0.5) {
        Some(c) => Ok(c),
        None => jittered_cholesky(m, what),
    }
}

/// `KL(q ‖ p)` between two multivariate Gaussians.
pub fn kl_gaussian(q: &GaussianDist, p: &GaussianDist) -> Result<f64> {
    assert_eq!(q.dim(), p.dim(), "KL between Gaussians of different dimension");
    let n = q.dim();
    let lp = factor(&p.cov, "KL reference covariance")?;
    let lq = factor(&q.cov, "KL source covariance")?;
    let diff = &p.mean - &q.mean;
    let maha = lp.l().solve_lower_triangular(&diff).expect("invertible").norm_squared();
    let m = lp.l().solve_lower_triangular(&lq.l()).expect("invertible");
    let trace = m.norm_squared();
    let logdet = |c: &Cholesky<f64, Dyn>| 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(0.5 * (maha + trace - (logdet(&lq) - logdet(&lp)) - n as f64))
}

/// Kernel on the tape from a `1 × d` log-length-scale row and a `1 × 1` log variance.
pub fn kernel_on_tape<'t>(kind: KernelKind, log_ls: Var<'t>, log_var: Var<'t>, a: Var<'t>, b: Var<'t>) -> Var<'t> {
    match kind {
        KernelKind::Se => {
            let inv = (-log_ls).exp();
            let sa = a * inv;
            let sb = b * inv;
            let na = sa.square().sum_cols();
            let nb = sb.square().sum_cols().t();
            let cross = sa.matmul(sb.t());
            let sq = (na + nb - cross.scale(2.0)).clamp_min(0.0);
            sq.scale(-0.5).exp() * log_var.exp()
        }
        KernelKind::Linear => {
            let inv = (-log_ls).exp();
            (a * inv).matmul((b * inv).t()) * log_var.exp()
        }
    }
}

/// Lower-triangular factor from its unconstrained form (softplus diagonal).
pub fn chol_from_raw<'t>(raw: Var<'t>) -> Var<'t> {
    raw.tril_strict() + raw.diag().softplus().diag_embed()
}

/// Unconstrained form of a lower-triangular factor with positive diagonal.
pub fn raw_from_chol(l: &Matrix) -> Matrix {
    let mut raw = l.clone();
    for j in 0..l.ncols() {
        for i in 0..j {
            raw[(i, j)] = 0.0;
        }
        raw[(j, j)] = softplus_inv(l[(j, j)].max(1e-12));
    }
    raw
}

fn chol_from_raw_plain(raw: &Matrix) -> Matrix {
    let mut l = raw.clone();
    for j in 0..l.ncols() {
        for i in 0..j {
            l[(i, j)] = 0.0;
        }
        l[(j, j)] = softplus(raw[(j, j)]);
    }
    l
}

/// Placement of inducing inputs at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InducingInit {
    /// Evenly spaced on `[lo, hi]` per input dimension (a lattice when `d_in > 1`,
    /// filled row-major and truncated to `M` points), with a small seeded
    /// perturbation to break exact lattice symmetry.
    Grid { lo: f64, hi: f64 },
    /// Uniform draws on `[lo, hi]^d_in`.
    Uniform { lo: f64, hi: f64 },
    /// Given locations (`M × d_in`, row-major).
    Given { points: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanInit {
    Zero,
    /// `m_d = Z[:, d]`, so the initial posterior mean approximates the identity map.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpInit {
    pub kernel: KernelKind,
    pub length_scale: f64,
    pub variance: f64,
    pub inducing: InducingInit,
    pub mean: MeanInit,
    /// `L_d = s·chol(K_ZZ)` initially.
    pub chol_scale: f64,
    pub train_inducing: bool,
}

impl Default for GpInit {
    fn default() -> Self {
        Self {
            kernel: KernelKind::Se,
            length_scale: 1.0,
            variance: 1.0,
            inducing: InducingInit::Grid { lo: -2.0, hi: 2.0 },
            mean: MeanInit::Zero,
            chol_scale: 0.1,
            train_inducing: true,
        }
    }
}

/// Parameter handles of a sparse variational GP with `d_out` independent
/// outputs sharing inducing inputs `Z`.
#[derive(Debug, Clone)]
pub struct SparseGp {
    pub kind: KernelKind,
    pub d_in: usize,
    pub d_out: usize,
    pub m: usize,
    /// `d_out × d_in`
    pub log_ls: ParamId,
    /// `d_out × 1`
    pub log_var: ParamId,
    /// `M × d_in`
    pub z: ParamId,
    /// `M × d_out`, column `d` is `m_d`.
    pub mean: ParamId,
    /// Unconstrained `L_d`, one `M × M` array per output.
    pub chol: Vec<ParamId>,
}

impl SparseGp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        m: usize,
        init: &GpInit,
        rng: &mut R,
    ) -> Result<Self> {
        if m == 0 || d_in == 0 || d_out == 0 {
            return Err(Error::Config("GP needs M ≥ 1 and positive dimensions".into()));
        }
        if init.length_scale <= 0.0 || init.variance <= 0.0 {
            return Err(Error::Config("kernel hyperparameters must be positive".into()));
        }
        let z = match &init.inducing {
            InducingInit::Grid { lo, hi } => grid_points(m, d_in, *lo, *hi, rng),
            InducingInit::Uniform { lo, hi } => Matrix::from_fn(m, d_in, |_, _| rng.gen_range(*lo..*hi)),
            InducingInit::Given { points } => {
                if points.len() != m * d_in {
                    return Err(Error::Config(format!("expected {} inducing coordinates, got {}", m * d_in, points.len())));
                }
                Matrix::from_row_slice(m, d_in, points)
            }
        };
        let kernel = Kernel {
            kind: init.kernel,
            log_length_scale: vec![init.length_scale.ln(); d_in],
            log_variance: init.variance.ln(),
        };
        let kzz = kernel_matrix(&kernel, &z, &z);
        let lk = jittered_cholesky(&kzz, "initial K_ZZ")?.l();
        let mean = match init.mean {
            MeanInit::Zero => Matrix::zeros(m, d_out),
            MeanInit::Identity => Matrix::from_fn(m, d_out, |i, d| if d < d_in { z[(i, d)] } else { 0.0 }),
        };
        let log_ls = store.add(format!("{prefix}.log_length_scale"), ParamGroup::Gp, Matrix::from_element(d_out, d_in, init.length_scale.ln()));
        let log_var = store.add(format!("{prefix}.log_variance"), ParamGroup::Gp, Matrix::from_element(d_out, 1, init.variance.ln()));
        let zid = store.add(format!("{prefix}.inducing_inputs"), ParamGroup::Z, z);
        store.set_trainable(zid, init.train_inducing);
        let mid = store.add(format!("{prefix}.inducing_mean"), ParamGroup::M, mean);
        let chol = (0..d_out)
            .map(|d| store.add(format!("{prefix}.inducing_chol_{d}"), ParamGroup::S, raw_from_chol(&(&lk * init.chol_scale))))
            .collect();
        Ok(Self { kind: init.kernel, d_in, d_out, m, log_ls, log_var, z: zid, mean: mid, chol })
    }

    /// Plain-value copy of the current parameters.
    pub fn values(&self, store: &ParamStore) -> SparseGpValues {
        let log_ls = store.get(self.log_ls);
        let log_var = store.get(self.log_var);
        let kernels = (0..self.d_out)
            .map(|d| Kernel {
                kind: self.kind,
                log_length_scale: log_ls.row(d).iter().copied().collect(),
                log_variance: log_var[(d, 0)],
            })
            .collect();
        let mean = store.get(self.mean);
        SparseGpValues {
            kernels,
            z: store.get(self.z).clone(),
            means: (0..self.d_out).map(|d| mean.column(d).into_owned()).collect(),
            chols: self.chol.iter().map(|id| chol_from_raw_plain(store.get(*id))).collect(),
        }
    }

    /// Records per-output factorisations shared by every query on this tape.
    pub fn prepare<'t>(&self, b: &Bound<'t>) -> GpOnTape<'t> {
        let tape = b.tape;
        let z = b.var(self.z);
        let eye = tape.leaf(Matrix::identity(self.m, self.m) * JITTER);
        let dims = (0..self.d_out)
            .map(|d| {
                let log_ls = b.var(self.log_ls).row_at(d);
                let log_var = b.var(self.log_var).row_at(d);
                let kzz = kernel_on_tape(self.kind, log_ls, log_var, z, z) + eye;
                tape.set_context(Some("K_ZZ"));
                let lk = kzz.cholesky();
                tape.set_context(None);
                DimOnTape { log_ls, log_var, lk, m: b.var(self.mean).col(d), l: chol_from_raw(b.var(self.chol[d])) }
            })
            .collect();
        GpOnTape { kind: self.kind, z, dims, m: self.m }
    }
}

fn grid_points<R: Rng + ?Sized>(m: usize, d_in: usize, lo: f64, hi: f64, rng: &mut R) -> Matrix {
    if d_in == 1 {
        let step = if m > 1 { (hi - lo) / (m - 1) as f64 } else { 0.0 };
        return Matrix::from_fn(m, 1, |i, _| if m > 1 { lo + step * i as f64 } else { 0.5 * (lo + hi) });
    }
    let per = (m as f64).powf(1.0 / d_in as f64).ceil().max(2.0) as usize;
    let step = (hi - lo) / (per - 1) as f64;
    let jitter = 0.05 * step;
    Matrix::from_fn(m, d_in, |i, k| {
        let idx = (i / per.pow(k as u32)) % per;
        lo + step * idx as f64 + rng.gen_range(-jitter..jitter)
    })
}

struct DimOnTape<'t> {
    log_ls: Var<'t>,
    log_var: Var<'t>,
    lk: Var<'t>,
    m: Var<'t>,
    l: Var<'t>,
}

/// Sparse GP quantities recorded on a tape.
pub struct GpOnTape<'t> {
    kind: KernelKind,
    z: Var<'t>,
    dims: Vec<DimOnTape<'t>>,
    m: usize,
}

impl<'t> GpOnTape<'t> {
    /// Mean and variance of `q(f_t)` for each row of `x` (`B × d_in`), as two `B × d_out` nodes.
    pub fn marginal(&self, x: Var<'t>) -> (Var<'t>, Var<'t>) {
        let tape = x.tape();
        let mut means = Vec::with_capacity(self.dims.len());
        let mut vars = Vec::with_capacity(self.dims.len());
        for d in &self.dims {
            let kzx = kernel_on_tape(self.kind, d.log_ls, d.log_var, self.z, x);
            let w = d.lk.solve_lower(kzx);
            let a = d.lk.solve_lower_t(w);
            means.push(a.t().matmul(d.m));
            let prior = match self.kind {
                KernelKind::Se => d.log_var.exp(),
                KernelKind::Linear => {
                    let inv = (-d.log_ls).exp();
                    (x * inv).square().sum_cols() * d.log_var.exp()
                }
            };
            let explained = w.square().sum_rows().t();
            let retained = d.l.t().matmul(a).square().sum_rows().t();
            vars.push((prior - explained + retained).clamp_min(1e-12));
        }
        (tape.hcat(&means), tape.hcat(&vars))
    }

    /// `Σ_d KL(q(u_d) ‖ p(u_d))`.
    pub fn kl(&self) -> Var<'t> {
        let mut total: Option<Var<'t>> = None;
        for d in &self.dims {
            let alpha = d.lk.solve_lower(d.m);
            let beta = d.lk.solve_lower(d.l);
            let logdet_s = d.l.diag().ln().sum().scale(2.0);
            let logdet_k = d.lk.chol_logdet();
            let kl = (alpha.square().sum() + beta.square().sum() - logdet_s + logdet_k).shift(-(self.m as f64)).scale(0.5);
            total = Some(match total {
                Some(t) => t + kl,
                None => kl,
            });
        }
        total.expect("at least one output dimension")
    }
}

/// Plain-value sparse GP parameters.
#[derive(Debug, Clone)]
pub struct SparseGpValues {
    pub kernels: Vec<Kernel>,
    pub z: Matrix,
    pub means: Vec<DVector<f64>>,
    /// Lower-triangular `L_d` with `S_d = L_d L_dᵀ`.
    pub chols: Vec<Matrix>,
}

impl SparseGpValues {
    pub fn d_out(&self) -> usize {
        self.kernels.len()
    }

    pub fn num_inducing(&self) -> usize {
        self.z.nrows()
    }

    pub fn s(&self, d: usize) -> Matrix {
        &self.chols[d] * self.chols[d].transpose()
    }

    /// Marginal `q(f_t)` at one input, diagonal across outputs.
    pub fn marginal_q_ft(&self, x_prev: &[f64]) -> Result<GaussianDist> {
        let x = Matrix::from_row_slice(1, x_prev.len(), x_prev);
        let (mean, var) = self.marginal_batch(&x)?;
        Ok(GaussianDist::diagonal(mean.row(0).transpose(), var.row(0).transpose()))
    }

    /// Marginal means and variances for each row of `x`, as `B × d_out` arrays.
    pub fn marginal_batch(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let b = x.nrows();
        let mut mean = Matrix::zeros(b, self.d_out());
        let mut var = Matrix::zeros(b, self.d_out());
        for (d, k) in self.kernels.iter().enumerate() {
            let kzz = kernel_matrix(k, &self.z, &self.z);
            let ch = jittered_cholesky(&kzz, "K_ZZ")?;
            let kzx = kernel_matrix(k, &self.z, x);
            let w = ch.l().solve_lower_triangular(&kzx).expect("invertible");
            let a = ch.l().tr_solve_lower_triangular(&w).expect("invertible");
            let mu = a.transpose() * &self.means[d];
            let retained = self.chols[d].transpose() * &a;
            for i in 0..b {
                let xi: Vec<f64> = x.row(i).iter().copied().collect();
                let prior = k.eval(&xi, &xi);
                let v = prior - w.column(i).norm_squared() + retained.column(i).norm_squared();
                mean[(i, d)] = mu[i];
                var[(i, d)] = v.max(1e-12);
            }
        }
        Ok((mean, var))
    }

    /// `Σ_d KL(q(u_d) ‖ p(u_d))` through [`kl_gaussian`].
    pub fn kl(&self) -> Result<f64> {
        let mut total = 0.0;
        for d in 0..self.d_out() {
            let p = self.prior_u(d);
            let q = GaussianDist::new(self.means[d].clone(), self.s(d));
            total += kl_gaussian(&q, &p)?;
        }
        Ok(total)
    }

    /// Prior `N(0, K_ZZ + JITTER·I)` over the inducing outputs of dimension `d`.
    pub fn prior_u(&self, d: usize) -> GaussianDist {
        let m = self.num_inducing();
        let kzz = kernel_matrix(&self.kernels[d], &self.z, &self.z) + Matrix::identity(m, m) * JITTER;
        GaussianDist::new(DVector::zeros(self.num_inducing()), kzz)
    }
}
