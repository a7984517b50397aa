//! Data preparation, training and evaluation of one configured run.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, RunConfig};
use crate::data::{self, Dataset, Standardization, LORENZ_OBS_VAR, LORENZ_PROCESS_VAR, LORENZ_X0};
use crate::error::{Error, Result};
use crate::eval::{self, FilterOutput, LorenzDynamics};
use crate::inference::ElboBreakdown;
use crate::training::{EpochRecord, Learner, TrainData};

/// Training split (possibly standardized), held-out tails and raw copies.
#[derive(Debug, Clone)]
pub struct DataSplit {
    pub train: Dataset,
    pub test: Option<Dataset>,
    pub raw_train: Dataset,
    pub raw_test: Option<Dataset>,
    pub stats: Option<Standardization>,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.dataset.source {
        DataSource::Kink { num_sequences, steps } => data::gen_kink(*num_sequences, *steps, cfg.seed),
        DataSource::KinkStep { num_sequences, steps } => data::gen_kink_step(*num_sequences, *steps, cfg.seed),
        DataSource::Lorenz { steps, dt } => data::gen_lorenz(*steps, *dt, cfg.seed),
        DataSource::Csv { path, schema } => data::ingest_csv(path, schema),
    }
}

pub fn prepare_data(cfg: &RunConfig) -> Result<DataSplit> {
    let raw = load_dataset(cfg)?;
    let (raw_train, raw_test) = if cfg.dataset.holdout > 0 {
        let mut train = raw.clone();
        let mut test = raw.clone();
        train.sequences.clear();
        test.sequences.clear();
        for s in &raw.sequences {
            let (a, b) = s.split_tail(cfg.dataset.holdout)?;
            train.sequences.push(a);
            test.sequences.push(b);
        }
        (train, Some(test))
    } else {
        (raw, None)
    };
    if cfg.dataset.standardize {
        let (train, test, stats) = data::standardize(&raw_train, raw_test.as_ref())?;
        Ok(DataSplit { train, test, raw_train, raw_test, stats: Some(stats) })
    } else {
        Ok(DataSplit { train: raw_train.clone(), test: raw_test.clone(), raw_train, raw_test, stats: None })
    }
}

/// Builds a learner for `cfg` and runs its training schedule.
pub fn train(cfg: &RunConfig, split: &DataSplit, on_epoch: impl FnMut(&EpochRecord) -> Result<()>) -> Result<(Learner, Vec<EpochRecord>)> {
    cfg.validate()?;
    let mut learner = Learner::new(&cfg.model, cfg.seed)?;
    let data = TrainData::new(&split.train)?;
    let log = learner.train(&data, &cfg.train, on_epoch)?;
    Ok((learner, log))
}

/// Metrics that apply to the configured dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub transition_mse: Option<f64>,
    /// Posterior-mean states against ground truth, in original units.
    pub state_mse: Option<f64>,
    /// Raw observations against ground-truth states.
    pub observation_mse: Option<f64>,
    pub forecast_rmse: Option<f64>,
    pub elbo: ElboBreakdown,
}

/// Reference transition and evaluation grid for one-dimensional generators.
pub fn reference_transition(source: &DataSource) -> Option<(fn(f64) -> f64, Vec<f64>)> {
    match source {
        DataSource::Kink { .. } => Some((data::kink_fn, eval::kink_grid())),
        DataSource::KinkStep { .. } => Some((data::kink_step_fn, eval::kink_step_grid())),
        _ => None,
    }
}

fn identity_emission(learner: &Learner) -> bool {
    let c = &learner.model.c;
    c.nrows() == c.ncols() && *c == DMatrix::identity(c.nrows(), c.ncols())
}

pub fn evaluate(cfg: &RunConfig, learner: &Learner, split: &DataSplit) -> Result<Metrics> {
    let values = learner.model.values(&learner.store);
    let transition_mse = match reference_transition(&cfg.dataset.source) {
        Some((f, grid)) => Some(eval::transition_mse(&values, f, &grid)?),
        None => None,
    };

    let mut state_mse = None;
    let mut observation_mse = None;
    let has_truth = split.raw_train.sequences.iter().all(|s| s.x.is_some());
    if has_truth && identity_emission(learner) {
        let (mut se, mut oe, mut n) = (0.0, 0.0, 0usize);
        for (s, raw) in split.train.sequences.iter().zip(&split.raw_train.sequences) {
            let t = s.len();
            let states = eval::posterior_mean_states(&learner.store, &learner.vs, s)?.rows(1, t).into_owned();
            let states = match &split.stats {
                Some(st) => data::destandardize(&states, &st.y),
                None => states,
            };
            let truth = raw.x.as_ref().expect("checked above").rows(1, t).into_owned();
            se += eval::state_mse(&states, &truth)? * truth.len() as f64;
            oe += eval::state_mse(&raw.y, &truth)? * truth.len() as f64;
            n += truth.len();
        }
        state_mse = Some(se / n as f64);
        observation_mse = Some(oe / n as f64);
    }

    let forecast_rmse = match &split.test {
        Some(test) => {
            let mut acc = 0.0;
            for (tr, te) in split.train.sequences.iter().zip(&test.sequences) {
                let r = eval::forecast_rmse(&values, &learner.store, &learner.vs, tr, te, te.len())?;
                acc += r * r;
            }
            Some((acc / test.len() as f64).sqrt())
        }
        None => None,
    };

    let data = TrainData::new(&split.train)?;
    let elbo = learner.evaluate_elbo(&data, cfg.train.mc_samples, cfg.seed.wrapping_add(1))?;
    Ok(Metrics { transition_mse, state_mse, observation_mse, forecast_rmse, elbo })
}

/// Filtered-state and raw-observation MSE of the EKF run with the true Lorenz model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EkfReport {
    pub state_mse: f64,
    pub observation_mse: f64,
    pub log_evidence: f64,
}

/// EKF summary and the filter output for the first sequence of `raw`.
pub fn lorenz_ekf(raw: &Dataset, dt: f64) -> Result<(EkfReport, FilterOutput)> {
    let seq = raw.sequences.first().ok_or(Error::EmptyDataset)?;
    let truth = seq.x.as_ref().ok_or_else(|| Error::Config("EKF evaluation needs ground-truth states".into()))?;
    let t = seq.len();
    let q = DMatrix::identity(3, 3) * LORENZ_PROCESS_VAR;
    let r = DMatrix::identity(3, 3) * LORENZ_OBS_VAR;
    let out = eval::ekf(&LorenzDynamics { dt }, &q, &r, &DMatrix::identity(3, 3), &DVector::from_column_slice(&LORENZ_X0), &q, &seq.y)?;
    let truth = truth.rows(1, t).into_owned();
    let report = EkfReport {
        state_mse: eval::state_mse(&out.mean_matrix(), &truth)?,
        observation_mse: eval::state_mse(&seq.y, &truth)?,
        log_evidence: out.log_evidence,
    };
    Ok((report, out))
}
