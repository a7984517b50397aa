//! Joint optimization of the ELBO and the constrained variant with a
//! Lagrange multiplier on the data-reconstruction term.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Matrix, Tape, Var};
use crate::data::{Dataset, Sequence};
use crate::error::{Error, Result};
use crate::inference::{elbo_terms, ElboBreakdown, NoiseBank, SeqBatch, VariationalState};
use crate::model::{ModelSpec, TgpssmModel, LN_2PI};
use crate::params::{ArrayRecord, ParamGroup, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Ascend the (optionally KL-weighted) ELBO.
    Joint,
    /// Min-max on the Lagrangian enforcing a reconstruction level.
    Constrained,
}

fn default_lr() -> f64 {
    0.01
}
fn default_alpha() -> f64 {
    0.5
}
fn default_eta() -> f64 {
    0.001
}
fn default_beta0() -> f64 {
    1.0
}
fn default_mc() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Per-group overrides keyed by group name (`gp`, `flow`, `q`, `r`, `m`, `s`, `m0`, `l0`, `phi`, `z`).
    #[serde(default)]
    pub group_learning_rates: BTreeMap<String, f64>,
    /// Weight on both KL terms.
    #[serde(default)]
    pub kl_weight: Option<f64>,
    /// Target data reconstruction per scalar observation (constrained mode);
    /// defaults to the diagonal-Gaussian fit of the training observations.
    #[serde(default)]
    pub r0: Option<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_beta0")]
    pub beta0: f64,
    #[serde(default)]
    pub seed: u64,
    /// Monte-Carlo samples of `f_t` per step.
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
    /// Sequences per optimizer step; all of them when unset.
    #[serde(default)]
    pub batch_size: Option<usize>,
}

impl TrainConfig {
    pub fn joint(epochs: usize) -> Self {
        Self {
            mode: TrainMode::Joint,
            epochs,
            learning_rate: default_lr(),
            group_learning_rates: BTreeMap::new(),
            kl_weight: None,
            r0: None,
            alpha: default_alpha(),
            eta: default_eta(),
            beta0: default_beta0(),
            seed: 0,
            mc_samples: 1,
            batch_size: None,
        }
    }

    pub fn constrained(epochs: usize) -> Self {
        Self { mode: TrainMode::Constrained, ..Self::joint(epochs) }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        for (name, lr) in &self.group_learning_rates {
            parse_group(name)?;
            if !(*lr >= 0.0 && lr.is_finite()) {
                return bad("group learning rates must be non-negative");
            }
        }
        if let Some(w) = self.kl_weight {
            if !(w > 0.0 && w.is_finite()) {
                return bad("kl_weight must be positive");
            }
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1)");
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta must be positive");
        }
        if !(self.beta0 > 0.0 && self.beta0.is_finite()) {
            return bad("beta0 must be positive");
        }
        if self.mc_samples == 0 {
            return bad("mc_samples must be at least 1");
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be positive");
        }
        if self.mode == TrainMode::Joint && self.r0.is_some() {
            return bad("r0 only applies in constrained mode");
        }
        if matches!(self.r0, Some(r) if r.is_nan() || r == f64::INFINITY) {
            return bad("r0 must be finite or -inf");
        }
        Ok(())
    }

    fn lr_for(&self, group: ParamGroup) -> f64 {
        self.group_learning_rates.iter().find(|(k, _)| parse_group(k).ok() == Some(group)).map_or(self.learning_rate, |(_, v)| *v)
    }
}

pub fn parse_group(name: &str) -> Result<ParamGroup> {
    serde_json::from_value(serde_json::Value::String(name.to_string())).map_err(|_| Error::Config(format!("unknown parameter group `{name}`")))
}

/// Multiplier state of the constrained optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagrangeState {
    pub beta: f64,
    /// Moving-average reconstruction estimate; unset before the first batch.
    pub r_hat: Option<f64>,
    pub iteration: u64,
}

impl LagrangeState {
    pub fn new(beta0: f64) -> Self {
        Self { beta: beta0, r_hat: None, iteration: 0 }
    }
}

/// `β ← β·exp(−η(R̂ − R₀))`.
pub fn update_beta(state: LagrangeState, r_hat: f64, r0: f64, eta: f64) -> LagrangeState {
    LagrangeState { beta: state.beta * (-eta * (r_hat - r0)).exp(), r_hat: Some(r_hat), iteration: state.iteration + 1 }
}

/// `(1 − α)·R̂_batch + α·R̂_prev`.
pub fn moving_average(prev: f64, batch: f64, alpha: f64) -> f64 {
    (1.0 - alpha) * batch + alpha * prev
}

/// Data term per scalar observation of an independent Gaussian fit per channel.
pub fn default_r0(sequences: &[Sequence]) -> Result<f64> {
    let blocks: Vec<&Matrix> = sequences.iter().map(|s| &s.y).collect();
    let stats = crate::data::ChannelStats::fit(&blocks)?;
    let d = stats.std.len() as f64;
    let mean_log_var = stats.std.iter().map(|s| 2.0 * s.ln()).sum::<f64>() / d;
    Ok(-0.5 * (LN_2PI + 1.0 + mean_log_var))
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub kl_x0: f64,
    pub kl_u: f64,
    pub entropy: f64,
    pub state_recon: f64,
    pub data_recon: f64,
    pub beta: f64,
}

/// Sequences grouped into equal-length stacks.
pub struct TrainData {
    pub sequences: Vec<Sequence>,
    full: Vec<(Vec<usize>, SeqBatch)>,
}

impl TrainData {
    pub fn new(ds: &Dataset) -> Result<Self> {
        if ds.is_empty() || ds.sequences.iter().any(Sequence::is_empty) {
            return Err(Error::EmptyDataset);
        }
        let sequences = ds.sequences.clone();
        let all: Vec<usize> = (0..sequences.len()).collect();
        let full = group_batches(&sequences, &all)?;
        Ok(Self { sequences, full })
    }

    pub fn num_observations(&self) -> usize {
        self.sequences.iter().map(|s| s.y.len()).sum()
    }
}

fn group_batches(seqs: &[Sequence], idx: &[usize]) -> Result<Vec<(Vec<usize>, SeqBatch)>> {
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in idx {
        by_len.entry(seqs[i].len()).or_default().push(i);
    }
    by_len
        .into_values()
        .map(|members| {
            let ys: Vec<&Matrix> = members.iter().map(|&i| &seqs[i].y).collect();
            let us: Option<Vec<&Matrix>> = members.iter().map(|&i| seqs[i].u.as_ref()).collect();
            let batch = SeqBatch::from_sequences(&ys, us.as_deref())?;
            Ok((members, batch))
        })
        .collect()
}

/// Model, variational state and optimizer state.
#[derive(Debug, Clone)]
pub struct Learner {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub model: TgpssmModel,
    pub vs: VariationalState,
    pub adam: AdamState,
    pub lagrange: LagrangeState,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub epoch: usize,
    pub params: Vec<ArrayRecord>,
    pub adam: AdamState,
    pub lagrange: LagrangeState,
    pub rng: ChaCha8Rng,
}

impl Learner {
    /// Builds the model and variational state; initialization draws from `seed`.
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let model = TgpssmModel::new(&mut store, spec, &mut rng)?;
        let vs = VariationalState::new(&mut store, spec.d_x, spec.d_y, spec.d_c, &mut rng);
        let values = store.values();
        let adam = AdamState::new(&values.iter().collect::<Vec<_>>());
        Ok(Self { spec: spec.clone(), store, model, vs, adam, lagrange: LagrangeState::new(1.0), rng, epoch: 0 })
    }

    pub fn checkpoint(&self, train: &TrainConfig) -> Checkpoint {
        Checkpoint {
            model: self.spec.clone(),
            train: train.clone(),
            epoch: self.epoch,
            params: self.store.to_records(),
            adam: self.adam.clone(),
            lagrange: self.lagrange,
            rng: self.rng.clone(),
        }
    }

    pub fn restore(ck: &Checkpoint) -> Result<Self> {
        let mut l = Self::new(&ck.model, ck.train.seed)?;
        l.store.load_records(&ck.params)?;
        if ck.adam.len() != l.store.len() {
            return Err(Error::Config("optimizer state does not match the parameter list".into()));
        }
        l.adam = ck.adam.clone();
        l.lagrange = ck.lagrange;
        l.rng = ck.rng.clone();
        l.epoch = ck.epoch;
        Ok(l)
    }

    /// ELBO breakdown on the whole dataset with fresh draws from `seed`.
    pub fn evaluate_elbo(&self, data: &TrainData, mc_samples: usize, seed: u64) -> Result<ElboBreakdown> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::new();
        let b = self.store.bind(&tape);
        let ssm = self.model.prepare(&b);
        let mut acc = [0.0; 5];
        for (k, (_, batch)) in data.full.iter().enumerate() {
            let noise = NoiseBank::draw(&mut rng, batch.batch_size(), batch.len(), self.spec.d_x, mc_samples);
            let post = self.vs.prepare(&b, batch);
            let terms = elbo_terms(&ssm, &post, batch, &noise);
            let br = terms.breakdown(1.0);
            acc[0] += br.kl_x0;
            if k == 0 {
                acc[1] += br.kl_u;
            }
            acc[2] += br.entropy;
            acc[3] += br.state_recon;
            acc[4] += br.data_recon;
        }
        tape.check()?;
        Ok(ElboBreakdown::new(acc[0], acc[1], acc[2], acc[3], acc[4]))
    }

    /// Runs `cfg.epochs` epochs, reporting each one to `on_epoch`.
    pub fn train(&mut self, data: &TrainData, cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>) -> Result<Vec<EpochRecord>> {
        cfg.validate()?;
        if self.epoch == 0 && self.lagrange.iteration == 0 {
            self.lagrange = LagrangeState::new(cfg.beta0);
        }
        let r0 = match (cfg.mode, cfg.r0) {
            (TrainMode::Constrained, Some(r)) => r,
            (TrainMode::Constrained, None) => default_r0(&data.sequences)?,
            (TrainMode::Joint, _) => 0.0,
        };
        let lrs: Vec<f64> = self.store.iter().map(|(_, p)| if p.trainable { cfg.lr_for(p.group) } else { 0.0 }).collect();
        let mut log = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            let rec = self.epoch_step(data, cfg, r0, &lrs)?;
            on_epoch(&rec)?;
            log.push(rec);
        }
        Ok(log)
    }

    fn epoch_step(&mut self, data: &TrainData, cfg: &TrainConfig, r0: f64, lrs: &[f64]) -> Result<EpochRecord> {
        let epoch = self.epoch + 1;
        let n_total = data.sequences.len();
        let minibatches: Vec<Vec<(Vec<usize>, SeqBatch)>> = match cfg.batch_size {
            Some(bs) if bs < n_total => {
                let mut idx: Vec<usize> = (0..n_total).collect();
                idx.shuffle(&mut self.rng);
                idx.chunks(bs).map(|c| group_batches(&data.sequences, c)).collect::<Result<_>>()?
            }
            _ => vec![data.full.iter().map(|(i, b)| (i.clone(), b.clone())).collect()],
        };
        let mut acc = [0.0; 5];
        for groups in &minibatches {
            let br = self.minibatch_step(groups, n_total, cfg, r0, lrs, epoch)?;
            acc[0] += br.kl_x0;
            acc[1] += br.kl_u;
            acc[2] += br.entropy;
            acc[3] += br.state_recon;
            acc[4] += br.data_recon;
        }
        self.epoch = epoch;
        let br = ElboBreakdown::new(acc[0], acc[1], acc[2], acc[3], acc[4]);
        Ok(EpochRecord {
            epoch,
            total: br.total,
            kl_x0: br.kl_x0,
            kl_u: br.kl_u,
            entropy: br.entropy,
            state_recon: br.state_recon,
            data_recon: br.data_recon,
            beta: self.lagrange.beta,
        })
    }

    fn minibatch_step(
        &mut self,
        groups: &[(Vec<usize>, SeqBatch)],
        n_total: usize,
        cfg: &TrainConfig,
        r0: f64,
        lrs: &[f64],
        epoch: usize,
    ) -> Result<ElboBreakdown> {
        let d_x = self.spec.d_x;
        let n_seq: usize = groups.iter().map(|(i, _)| i.len()).sum();
        let n_obs: usize = groups.iter().map(|(_, b)| b.num_observations()).sum();
        let kl_u_scale = n_seq as f64 / n_total as f64;
        let kl_weight = cfg.kl_weight.unwrap_or(1.0);
        let noises: Vec<NoiseBank> =
            groups.iter().map(|(_, b)| NoiseBank::draw(&mut self.rng, b.batch_size(), b.len(), d_x, cfg.mc_samples)).collect();

        let tape = Tape::new();
        let b = self.store.bind(&tape);
        let ssm = self.model.prepare(&b);
        let mut kl_x0: Option<Var> = None;
        let mut kl_u: Option<Var> = None;
        let mut rest: Option<Var> = None;
        let mut data_term: Option<Var> = None;
        let mut parts = [0.0; 5];
        for (k, ((_, batch), noise)) in groups.iter().zip(&noises).enumerate() {
            let post = self.vs.prepare(&b, batch);
            let terms = elbo_terms(&ssm, &post, batch, noise);
            if k == 0 {
                kl_u = terms.kl_u;
            }
            kl_x0 = Some(sum_opt(kl_x0, terms.kl_x0));
            rest = Some(sum_opt(rest, terms.entropy + terms.state_recon + terms.data_recon));
            data_term = Some(sum_opt(data_term, terms.data_recon));
            parts[0] += terms.kl_x0.scalar();
            parts[2] += terms.entropy.scalar();
            parts[3] += terms.state_recon.scalar();
            parts[4] += terms.data_recon.scalar();
            for (name, v) in [("kl_x0", terms.kl_x0), ("entropy", terms.entropy), ("state_recon", terms.state_recon), ("data_recon", terms.data_recon)] {
                check_term(&tape, epoch, name, v)?;
            }
        }
        if let Some(k) = kl_u {
            check_term(&tape, epoch, "kl_u", k)?;
            parts[1] = k.scalar() * kl_u_scale;
        }
        let kl_x0 = kl_x0.expect("at least one group");
        let mut kl = kl_x0;
        if let Some(k) = kl_u {
            kl = kl + k.scale(kl_u_scale);
        }
        let elbo = rest.expect("at least one group") - kl.scale(kl_weight);
        let loss = match cfg.mode {
            TrainMode::Joint => -elbo,
            TrainMode::Constrained => {
                let r_batch = parts[4] / n_obs as f64;
                let r_hat = match self.lagrange.r_hat {
                    Some(prev) => moving_average(prev, r_batch, cfg.alpha),
                    None => r_batch,
                };
                self.lagrange = update_beta(self.lagrange, r_hat, r0, cfg.eta);
                -elbo - data_term.expect("at least one group").scale(self.lagrange.beta)
            }
        };
        let grads = tape.gradients(loss);
        let g: Vec<Matrix> = b.vars().iter().map(|v| grads.wrt(*v)).collect();
        if let Some((k, _)) = g.iter().enumerate().find(|(_, m)| m.iter().any(|v| !v.is_finite())) {
            let name = self.store.iter().nth(k).map_or_else(String::new, |(_, p)| p.name.clone());
            return Err(Error::Training { epoch, term: "gradient".into(), source: Box::new(Error::NonFinite(name)) });
        }
        let mut values = self.store.values_mut();
        self.adam.step(&mut values, &g, lrs);
        Ok(ElboBreakdown::new(parts[0], parts[1], parts[2], parts[3], parts[4]))
    }
}

fn sum_opt<'t>(acc: Option<Var<'t>>, v: Var<'t>) -> Var<'t> {
    match acc {
        Some(a) => a + v,
        None => v,
    }
}

fn check_term(tape: &Tape, epoch: usize, term: &str, v: Var<'_>) -> Result<()> {
    let wrap = |e: Error| Error::Training { epoch, term: term.to_string(), source: Box::new(e) };
    tape.check().map_err(|e| wrap(e.into()))?;
    if !v.scalar().is_finite() {
        return Err(wrap(Error::NonFinite(format!("{term} = {}", v.scalar()))));
    }
    Ok(())
}
