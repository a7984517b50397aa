//! Invertible marginal flows, RealNVP coupling layers and their stacks.
//!
//! Element-wise layers hold one parameter row per scalar parameter and one
//! column per state dimension, so every dimension has its own warping.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, softplus_inv, Matrix, Real, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamGroup, ParamId, ParamStore};

const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_ITER: usize = 100;
/// Bound on the coupling log-scale, `s = S_MAX·tanh(z / S_MAX)`.
pub const S_MAX: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowKind {
    Arcsinh,
    Log,
    Exp,
    Linear,
    SinhArcsinh,
    BoxCox,
    Tanh,
    Sal,
    SumOfTanh,
    SumOfLogExp,
}

impl FlowKind {
    pub const ALL: [FlowKind; 10] = [
        FlowKind::Arcsinh,
        FlowKind::Log,
        FlowKind::Exp,
        FlowKind::Linear,
        FlowKind::SinhArcsinh,
        FlowKind::BoxCox,
        FlowKind::Tanh,
        FlowKind::Sal,
        FlowKind::SumOfTanh,
        FlowKind::SumOfLogExp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FlowKind::Arcsinh => "arcsinh",
            FlowKind::Log => "log",
            FlowKind::Exp => "exp",
            FlowKind::Linear => "linear",
            FlowKind::SinhArcsinh => "sinh_arcsinh",
            FlowKind::BoxCox => "box_cox",
            FlowKind::Tanh => "tanh",
            FlowKind::Sal => "sal",
            FlowKind::SumOfTanh => "sum_of_tanh",
            FlowKind::SumOfLogExp => "sum_of_log_exp",
        }
    }

    /// Number of scalar parameters per state dimension.
    pub fn num_params(self, terms: usize) -> usize {
        match self {
            FlowKind::Log | FlowKind::Exp => 0,
            FlowKind::Linear | FlowKind::SinhArcsinh => 2,
            FlowKind::BoxCox => 1,
            FlowKind::Arcsinh | FlowKind::Tanh | FlowKind::Sal => 4,
            FlowKind::SumOfTanh | FlowKind::SumOfLogExp => 3 * terms,
        }
    }

    /// Whether parameter `k` is kept positive through softplus.
    pub fn is_positive(self, k: usize, terms: usize) -> bool {
        match self {
            // a + b·asinh(d(f − c)): b, d
            FlowKind::Arcsinh => k == 1 || k == 3,
            FlowKind::Log | FlowKind::Exp => false,
            // a + b·f: b
            FlowKind::Linear => k == 1,
            // sinh(b·asinh f − a): b
            FlowKind::SinhArcsinh => k == 1,
            FlowKind::BoxCox => true,
            // a·tanh(b(f + c)) + d: a, b
            FlowKind::Tanh => k == 0 || k == 1,
            // d·sinh(b·asinh f − a) + c: b, d
            FlowKind::Sal => k == 1 || k == 3,
            // a_j, b_j ≥ 0; c_j free
            FlowKind::SumOfTanh | FlowKind::SumOfLogExp => k < 2 * terms,
        }
    }
}

/// `ln cosh z`, stable for large `|z|`.
fn ln_cosh<T: Real>(z: T) -> T {
    let a = z.abs();
    a + (a * -2.0).softplus() - std::f64::consts::LN_2
}

/// Forward map of an element-wise flow with constrained parameters `p`.
pub fn elementary_forward<T: Real>(kind: FlowKind, terms: usize, p: &[T], f: T) -> T {
    match kind {
        FlowKind::Arcsinh => p[0] + p[1] * (p[3] * (f - p[2])).asinh(),
        FlowKind::Log => f.ln(),
        FlowKind::Exp => f.exp(),
        FlowKind::Linear => p[0] + p[1] * f,
        FlowKind::SinhArcsinh => (p[1] * f.asinh() - p[0]).sinh(),
        FlowKind::BoxCox => {
            let lam = p[0];
            let mag = (lam * f.abs().ln()).exp();
            (f.sign() * mag - 1.0) / lam
        }
        FlowKind::Tanh => p[0] * (p[1] * (f + p[2])).tanh() + p[3],
        FlowKind::Sal => p[3] * (p[1] * f.asinh() - p[0]).sinh() + p[2],
        FlowKind::SumOfTanh => {
            let mut out = f;
            for j in 0..terms {
                out = out + p[j] * (p[terms + j] * (f + p[2 * terms + j])).tanh();
            }
            out
        }
        FlowKind::SumOfLogExp => {
            let mut out = f.lift(0.0);
            for j in 0..terms {
                out = out + p[j] * (p[terms + j] * (f + p[2 * terms + j])).softplus();
            }
            out
        }
    }
}

/// `ln dG/df` of an element-wise flow.
pub fn elementary_log_deriv<T: Real>(kind: FlowKind, terms: usize, p: &[T], f: T) -> T {
    match kind {
        FlowKind::Arcsinh => {
            let u = p[3] * (f - p[2]);
            p[1].ln() + p[3].ln() - (u.square() + 1.0).ln() * 0.5
        }
        FlowKind::Log => -f.ln(),
        FlowKind::Exp => f,
        FlowKind::Linear => p[1].ln(),
        FlowKind::SinhArcsinh => ln_cosh(p[1] * f.asinh() - p[0]) + p[1].ln() - (f.square() + 1.0).ln() * 0.5,
        FlowKind::BoxCox => (p[0] - 1.0) * f.abs().ln(),
        FlowKind::Tanh => p[0].ln() + p[1].ln() - ln_cosh(p[1] * (f + p[2])) * 2.0,
        FlowKind::Sal => p[3].ln() + p[1].ln() + ln_cosh(p[1] * f.asinh() - p[0]) - (f.square() + 1.0).ln() * 0.5,
        FlowKind::SumOfTanh => {
            let mut d = f.lift(1.0);
            for j in 0..terms {
                let th = (p[terms + j] * (f + p[2 * terms + j])).tanh();
                d = d + p[j] * p[terms + j] * (th.square() * -1.0 + 1.0);
            }
            d.ln()
        }
        FlowKind::SumOfLogExp => {
            let mut d = f.lift(0.0);
            for j in 0..terms {
                d = d + p[j] * p[terms + j] * (p[terms + j] * (f + p[2 * terms + j])).sigmoid();
            }
            d.ln()
        }
    }
}

fn in_domain(kind: FlowKind, f: f64) -> bool {
    match kind {
        FlowKind::Log => f > 0.0,
        FlowKind::BoxCox => f != 0.0,
        _ => f.is_finite(),
    }
}

/// Inverse of an element-wise flow; `layer` labels errors.
pub fn elementary_inverse(kind: FlowKind, terms: usize, p: &[f64], y: f64, layer: usize) -> Result<f64> {
    let domain = || Error::Domain { layer, kind: kind.name(), value: y };
    let out = match kind {
        FlowKind::Arcsinh => p[2] + ((y - p[0]) / p[1]).sinh() / p[3],
        FlowKind::Log => y.exp(),
        FlowKind::Exp => {
            if y <= 0.0 {
                return Err(domain());
            }
            y.ln()
        }
        FlowKind::Linear => (y - p[0]) / p[1],
        FlowKind::SinhArcsinh => ((y.asinh() + p[0]) / p[1]).sinh(),
        FlowKind::BoxCox => {
            let z = p[0] * y + 1.0;
            z.signum() * z.abs().powf(1.0 / p[0])
        }
        FlowKind::Tanh => {
            let u = (y - p[3]) / p[0];
            if u.abs() >= 1.0 {
                return Err(domain());
            }
            u.atanh() / p[1] - p[2]
        }
        FlowKind::Sal => ((((y - p[2]) / p[3]).asinh() + p[0]) / p[1]).sinh(),
        FlowKind::SumOfTanh => {
            let total: f64 = p[..terms].iter().sum();
            newton_bisect(kind, terms, p, y, y - total - 1e-12, y + total + 1e-12, layer)?
        }
        FlowKind::SumOfLogExp => {
            if y <= 0.0 {
                return Err(domain());
            }
            let g = |f: f64| elementary_forward(kind, terms, p, f) - y;
            let (mut lo, mut hi) = (-1.0, 1.0);
            let mut guard = 0;
            while g(lo) > 0.0 {
                lo *= 2.0;
                guard += 1;
                if guard > 2000 || !lo.is_finite() {
                    return Err(domain());
                }
            }
            while g(hi) < 0.0 {
                hi *= 2.0;
                guard += 1;
                if guard > 2000 || !hi.is_finite() {
                    return Err(domain());
                }
            }
            newton_bisect(kind, terms, p, y, lo, hi, layer)?
        }
    };
    if !out.is_finite() {
        return Err(domain());
    }
    Ok(out)
}

/// Safeguarded Newton iteration on a monotone increasing scalar map,
/// falling back to bisection whenever a step leaves the bracket.
fn newton_bisect(kind: FlowKind, terms: usize, p: &[f64], y: f64, mut lo: f64, mut hi: f64, layer: usize) -> Result<f64> {
    let g = |f: f64| elementary_forward(kind, terms, p, f) - y;
    let mut x = 0.5 * (lo + hi);
    let mut resid = g(x);
    let mut prev_step = hi - lo;
    for _ in 0..NEWTON_MAX_ITER {
        if resid.abs() < NEWTON_TOL {
            // One more Newton step takes the root to working precision.
            let polished = x - resid / elementary_log_deriv(kind, terms, p, x).exp();
            return Ok(if polished.is_finite() && g(polished).abs() <= resid.abs() { polished } else { x });
        }
        if resid > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let slope = elementary_log_deriv(kind, terms, p, x).exp();
        let newton = x - resid / slope;
        // Bisect when Newton leaves the bracket or fails to halve the last step.
        let next = if newton > lo && newton < hi && newton.is_finite() && (newton - x).abs() < 0.5 * prev_step {
            newton
        } else {
            0.5 * (lo + hi)
        };
        prev_step = (next - x).abs();
        x = next;
        resid = g(x);
    }
    if resid.abs() < NEWTON_TOL {
        Ok(x)
    } else {
        Err(Error::Inversion { layer, kind: kind.name(), residual: resid.abs() })
    }
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

fn hidden_default() -> usize {
    16
}

/// Declarative description of one flow layer (constrained initial values).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Arcsinh {
        #[serde(default)]
        a: f64,
        #[serde(default = "one")]
        b: f64,
        #[serde(default)]
        c: f64,
        #[serde(default = "one")]
        d: f64,
    },
    Log,
    Exp,
    Linear {
        #[serde(default)]
        a: f64,
        #[serde(default = "one")]
        b: f64,
    },
    SinhArcsinh {
        #[serde(default)]
        a: f64,
        #[serde(default = "one")]
        b: f64,
    },
    BoxCox {
        #[serde(default = "one")]
        lambda: f64,
    },
    Tanh {
        #[serde(default = "one")]
        a: f64,
        #[serde(default = "one")]
        b: f64,
        #[serde(default)]
        c: f64,
        #[serde(default)]
        d: f64,
    },
    Sal {
        #[serde(default)]
        a: f64,
        #[serde(default = "one")]
        b: f64,
        #[serde(default)]
        c: f64,
        #[serde(default = "one")]
        d: f64,
    },
    SumOfTanh {
        a: Vec<f64>,
        b: Vec<f64>,
        c: Vec<f64>,
    },
    SumOfLogExp {
        a: Vec<f64>,
        b: Vec<f64>,
        c: Vec<f64>,
    },
    Coupling {
        /// Size of the first block.
        split: usize,
        /// When set, the second block passes through and the first is transformed.
        #[serde(default)]
        flip: bool,
        #[serde(default = "hidden_default")]
        hidden: usize,
    },
}

impl LayerSpec {
    /// Kind and constrained values for element-wise layers.
    fn elementary(&self) -> Option<(FlowKind, usize, Vec<f64>)> {
        let sum = |kind: FlowKind, a: &[f64], b: &[f64], c: &[f64]| {
            let mut v = a.to_vec();
            v.extend_from_slice(b);
            v.extend_from_slice(c);
            (kind, a.len(), v)
        };
        Some(match self {
            LayerSpec::Arcsinh { a, b, c, d } => (FlowKind::Arcsinh, 0, vec![*a, *b, *c, *d]),
            LayerSpec::Log => (FlowKind::Log, 0, vec![]),
            LayerSpec::Exp => (FlowKind::Exp, 0, vec![]),
            LayerSpec::Linear { a, b } => (FlowKind::Linear, 0, vec![*a, *b]),
            LayerSpec::SinhArcsinh { a, b } => (FlowKind::SinhArcsinh, 0, vec![*a, *b]),
            LayerSpec::BoxCox { lambda } => (FlowKind::BoxCox, 0, vec![*lambda]),
            LayerSpec::Tanh { a, b, c, d } => (FlowKind::Tanh, 0, vec![*a, *b, *c, *d]),
            LayerSpec::Sal { a, b, c, d } => (FlowKind::Sal, 0, vec![*a, *b, *c, *d]),
            LayerSpec::SumOfTanh { a, b, c } => sum(FlowKind::SumOfTanh, a, b, c),
            LayerSpec::SumOfLogExp { a, b, c } => sum(FlowKind::SumOfLogExp, a, b, c),
            LayerSpec::Coupling { .. } => return None,
        })
    }

    /// Identity-valued SAL layer.
    pub fn identity_sal() -> Self {
        LayerSpec::Sal { a: 0.0, b: 1.0, c: 0.0, d: 1.0 }
    }
}

/// Layer description plus trainability flag, as read from configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowLayerConfig {
    #[serde(flatten)]
    pub spec: LayerSpec,
    #[serde(default = "yes")]
    pub trainable: bool,
}

impl From<LayerSpec> for FlowLayerConfig {
    fn from(spec: LayerSpec) -> Self {
        Self { spec, trainable: true }
    }
}

/// Three identity-initialised SAL layers followed by a near-identity Tanh layer.
pub fn default_flow() -> Vec<FlowLayerConfig> {
    let mut layers: Vec<FlowLayerConfig> = (0..3).map(|_| LayerSpec::identity_sal().into()).collect();
    layers.push(LayerSpec::Tanh { a: 10.0, b: 0.1, c: 0.0, d: 0.0 }.into());
    layers
}

/// Dense network with tanh hidden layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub weights: Vec<ParamId>,
    pub biases: Vec<ParamId>,
}

impl Mlp {
    /// Glorot-uniform hidden layers; the output layer starts at zero.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, group: ParamGroup, sizes: &[usize], rng: &mut R) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (k, w) in sizes.windows(2).enumerate() {
            let last = k + 2 == sizes.len();
            let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
            let wm = if last { Matrix::zeros(w[0], w[1]) } else { Matrix::from_fn(w[0], w[1], |_, _| rng.gen_range(-limit..limit)) };
            weights.push(store.add(format!("{prefix}.w{k}"), group, wm));
            biases.push(store.add(format!("{prefix}.b{k}"), group, Matrix::zeros(1, w[1])));
        }
        Self { weights, biases }
    }

    pub fn forward_on_tape<'t>(&self, b: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        let mut h = x;
        let n = self.weights.len();
        for k in 0..n {
            h = h.matmul(b.var(self.weights[k])) + b.var(self.biases[k]);
            if k + 1 < n {
                h = h.tanh();
            }
        }
        h
    }

    pub fn values(&self, store: &ParamStore) -> MlpValues {
        MlpValues {
            weights: self.weights.iter().map(|id| store.get(*id).clone()).collect(),
            biases: self.biases.iter().map(|id| store.get(*id).clone()).collect(),
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.weights.iter().chain(&self.biases).copied()
    }
}

#[derive(Debug, Clone)]
pub struct MlpValues {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Matrix>,
}

impl MlpValues {
    /// Row-wise forward pass.
    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut h = x.clone();
        let n = self.weights.len();
        for k in 0..n {
            h = &h * &self.weights[k];
            for mut row in h.row_iter_mut() {
                row += &self.biases[k];
            }
            if k + 1 < n {
                h.apply(|v| *v = v.tanh());
            }
        }
        h
    }
}

/// Affine coupling: `x_change ← x_change ⊙ exp(s(x_pass)) + r(x_pass)`.
#[derive(Debug, Clone)]
pub struct CouplingLayer {
    pub pass: Vec<usize>,
    pub change: Vec<usize>,
    pub s_net: Mlp,
    pub r_net: Mlp,
}

impl CouplingLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        split: usize,
        flip: bool,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if d < 2 {
            return Err(Error::Config("coupling layers need at least two state dimensions".into()));
        }
        if split == 0 || split >= d {
            return Err(Error::Config(format!("coupling split {split} must lie in 1..{d}")));
        }
        let first: Vec<usize> = (0..split).collect();
        let second: Vec<usize> = (split..d).collect();
        let (pass, change) = if flip { (second, first) } else { (first, second) };
        let sizes = [pass.len(), hidden, hidden, change.len()];
        let s_net = Mlp::new(store, &format!("{prefix}.s"), ParamGroup::Flow, &sizes, rng);
        let r_net = Mlp::new(store, &format!("{prefix}.r"), ParamGroup::Flow, &sizes, rng);
        Ok(Self { pass, change, s_net, r_net })
    }

    fn columns<'t>(x: Var<'t>, idx: &[usize]) -> Var<'t> {
        let cols: Vec<Var<'t>> = idx.iter().map(|&j| x.col(j)).collect();
        x.tape().hcat(&cols)
    }

    /// Output and per-row log-determinant (`B × 1`).
    pub fn forward_on_tape<'t>(&self, b: &Bound<'t>, x: Var<'t>) -> (Var<'t>, Var<'t>) {
        let xp = Self::columns(x, &self.pass);
        let xc = Self::columns(x, &self.change);
        let s = self.s_net.forward_on_tape(b, xp).scale(1.0 / S_MAX).tanh().scale(S_MAX);
        let r = self.r_net.forward_on_tape(b, xp);
        let yc = xc * s.exp() + r;
        let d = self.pass.len() + self.change.len();
        let mut cols: Vec<Option<Var<'t>>> = vec![None; d];
        for &j in &self.pass {
            cols[j] = Some(x.col(j));
        }
        for (k, &j) in self.change.iter().enumerate() {
            cols[j] = Some(yc.col(k));
        }
        let cols: Vec<Var<'t>> = cols.into_iter().map(|c| c.expect("every column assigned")).collect();
        (x.tape().hcat(&cols), s.sum_cols())
    }
}

#[derive(Debug, Clone)]
pub enum FlowLayer {
    Elementary { kind: FlowKind, terms: usize, raw: ParamId },
    Coupling(CouplingLayer),
}

/// Ordered composition `G = G_{J−1} ∘ … ∘ G_0` acting on `d`-dimensional values.
#[derive(Debug, Clone)]
pub struct FlowStack {
    pub d: usize,
    pub layers: Vec<FlowLayer>,
}

impl FlowStack {
    pub fn identity(d: usize) -> Self {
        Self { d, layers: Vec::new() }
    }

    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, configs: &[FlowLayerConfig], rng: &mut R) -> Result<Self> {
        let mut layers = Vec::with_capacity(configs.len());
        for (i, cfg) in configs.iter().enumerate() {
            let name = format!("{prefix}.{i}");
            let layer = match (&cfg.spec, cfg.spec.elementary()) {
                (_, Some((kind, terms, values))) => {
                    if matches!(kind, FlowKind::SumOfTanh | FlowKind::SumOfLogExp) && (terms == 0 || values.len() != 3 * terms) {
                        return Err(Error::Config(format!("flow layer {i}: a, b, c must have equal nonzero length")));
                    }
                    let mut raw = Matrix::zeros(kind.num_params(terms), d);
                    for (k, v) in values.iter().enumerate() {
                        let r = if kind.is_positive(k, terms) {
                            if *v < 0.0 || (*v == 0.0 && !matches!(kind, FlowKind::SumOfTanh | FlowKind::SumOfLogExp)) {
                                return Err(Error::Config(format!("flow layer {i} ({}): parameter {k} must be positive", kind.name())));
                            }
                            softplus_inv(*v)
                        } else {
                            *v
                        };
                        raw.row_mut(k).fill(r);
                    }
                    let id = store.add(format!("{name}.{}", kind.name()), ParamGroup::Flow, raw);
                    store.set_trainable(id, cfg.trainable);
                    FlowLayer::Elementary { kind, terms, raw: id }
                }
                (LayerSpec::Coupling { split, flip, hidden }, None) => {
                    let c = CouplingLayer::new(store, &format!("{name}.coupling"), d, *split, *flip, *hidden, rng)?;
                    for id in c.s_net.ids().chain(c.r_net.ids()).collect::<Vec<_>>() {
                        store.set_trainable(id, cfg.trainable);
                    }
                    FlowLayer::Coupling(c)
                }
                _ => unreachable!("non-elementary layers are couplings"),
            };
            layers.push(layer);
        }
        Ok(Self { d, layers })
    }

    pub fn is_identity(&self) -> bool {
        self.layers.is_empty()
    }

    /// Ids of every flow parameter array.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in &self.layers {
            match l {
                FlowLayer::Elementary { raw, .. } => ids.push(*raw),
                FlowLayer::Coupling(c) => ids.extend(c.s_net.ids().chain(c.r_net.ids())),
            }
        }
        ids
    }

    fn constrained_rows<'t>(b: &Bound<'t>, kind: FlowKind, terms: usize, raw: ParamId) -> Vec<Var<'t>> {
        let raw = b.var(raw);
        (0..kind.num_params(terms))
            .map(|k| {
                let row = raw.row_at(k);
                if kind.is_positive(k, terms) {
                    row.softplus()
                } else {
                    row
                }
            })
            .collect()
    }

    /// Applies the stack to each row of `f` (`B × d`).
    pub fn forward_on_tape<'t>(&self, b: &Bound<'t>, f: Var<'t>) -> Var<'t> {
        let mut x = f;
        for l in &self.layers {
            x = match l {
                FlowLayer::Elementary { kind, terms, raw } => {
                    let p = Self::constrained_rows(b, *kind, *terms, *raw);
                    elementary_forward(*kind, *terms, &p, x)
                }
                FlowLayer::Coupling(c) => c.forward_on_tape(b, x).0,
            };
        }
        x
    }

    /// Output and per-row log-determinant (`B × 1`).
    pub fn forward_with_log_det_on_tape<'t>(&self, b: &Bound<'t>, f: Var<'t>) -> (Var<'t>, Var<'t>) {
        let (rows, _) = f.shape();
        let mut x = f;
        let mut ld = f.tape().leaf(Matrix::zeros(rows, 1));
        for l in &self.layers {
            match l {
                FlowLayer::Elementary { kind, terms, raw } => {
                    let p = Self::constrained_rows(b, *kind, *terms, *raw);
                    ld = ld + elementary_log_deriv(*kind, *terms, &p, x).sum_cols();
                    x = elementary_forward(*kind, *terms, &p, x);
                }
                FlowLayer::Coupling(c) => {
                    let (y, l) = c.forward_on_tape(b, x);
                    ld = ld + l;
                    x = y;
                }
            }
        }
        (x, ld)
    }

    pub fn values(&self, store: &ParamStore) -> FlowValues {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                FlowLayer::Elementary { kind, terms, raw } => {
                    let mut p = store.get(*raw).clone();
                    for k in 0..p.nrows() {
                        if kind.is_positive(k, *terms) {
                            p.row_mut(k).apply(|v| *v = softplus(*v));
                        }
                    }
                    LayerValues::Elementary { kind: *kind, terms: *terms, p }
                }
                FlowLayer::Coupling(c) => LayerValues::Coupling {
                    pass: c.pass.clone(),
                    change: c.change.clone(),
                    s: c.s_net.values(store),
                    r: c.r_net.values(store),
                },
            })
            .collect();
        FlowValues { d: self.d, layers }
    }
}

#[derive(Debug, Clone)]
pub enum LayerValues {
    /// `p` is `num_params × d` with constrained values.
    Elementary { kind: FlowKind, terms: usize, p: Matrix },
    Coupling { pass: Vec<usize>, change: Vec<usize>, s: MlpValues, r: MlpValues },
}

/// Plain-value flow stack.
#[derive(Debug, Clone)]
pub struct FlowValues {
    pub d: usize,
    pub layers: Vec<LayerValues>,
}

fn coupling_sr(pass: &[usize], s: &MlpValues, r: &MlpValues, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let xp = Matrix::from_row_slice(1, pass.len(), &pass.iter().map(|&j| x[j]).collect::<Vec<_>>());
    let sv: Vec<f64> = s.forward(&xp).iter().map(|v| S_MAX * (v / S_MAX).tanh()).collect();
    let rv: Vec<f64> = r.forward(&xp).iter().copied().collect();
    (sv, rv)
}

impl FlowValues {
    pub fn identity(d: usize) -> Self {
        Self { d, layers: Vec::new() }
    }

    fn check_len(&self, f: &[f64]) {
        assert_eq!(f.len(), self.d, "flow input has wrong dimension");
    }

    /// `G(f)` for one point.
    pub fn forward(&self, f: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_with_log_det(f)?.0)
    }

    /// `G(f)` and `ln|det ∂G/∂f|`.
    pub fn forward_with_log_det(&self, f: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_len(f);
        let mut x = f.to_vec();
        let mut ld = 0.0;
        for (li, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerValues::Elementary { kind, terms, p } => {
                    for (j, xj) in x.iter_mut().enumerate() {
                        if !in_domain(*kind, *xj) {
                            return Err(Error::Domain { layer: li, kind: kind.name(), value: *xj });
                        }
                        let pj: Vec<f64> = p.column(j).iter().copied().collect();
                        ld += elementary_log_deriv(*kind, *terms, &pj, *xj);
                        *xj = elementary_forward(*kind, *terms, &pj, *xj);
                    }
                }
                LayerValues::Coupling { pass, change, s, r } => {
                    let (sv, rv) = coupling_sr(pass, s, r, &x);
                    for (k, &j) in change.iter().enumerate() {
                        x[j] = x[j] * sv[k].exp() + rv[k];
                        ld += sv[k];
                    }
                }
            }
        }
        Ok((x, ld))
    }

    pub fn log_det_jacobian(&self, f: &[f64]) -> Result<f64> {
        Ok(self.forward_with_log_det(f)?.1)
    }

    /// `G⁻¹(y)`, layer by layer in reverse order.
    pub fn inverse(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check_len(y);
        let mut x = y.to_vec();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            match layer {
                LayerValues::Elementary { kind, terms, p } => {
                    for (j, xj) in x.iter_mut().enumerate() {
                        let pj: Vec<f64> = p.column(j).iter().copied().collect();
                        *xj = elementary_inverse(*kind, *terms, &pj, *xj, li)?;
                    }
                }
                LayerValues::Coupling { pass, change, s, r } => {
                    let (sv, rv) = coupling_sr(pass, s, r, &x);
                    for (k, &j) in change.iter().enumerate() {
                        x[j] = (x[j] - rv[k]) * (-sv[k]).exp();
                    }
                }
            }
        }
        Ok(x)
    }

    /// Row-wise forward map.
    pub fn forward_batch(&self, f: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(f.nrows(), f.ncols());
        for i in 0..f.nrows() {
            let row: Vec<f64> = f.row(i).iter().copied().collect();
            let y = self.forward(&row)?;
            for (j, v) in y.into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        Ok(out)
    }
}
