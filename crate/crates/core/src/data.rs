//! Synthetic generators (kink, kink-step, Lorenz), standardization and CSV
//! ingestion of external series.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::model::{fmt17, Trajectory};

/// One observed series with optional controls and ground-truth states.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    /// `T × d_y`
    pub y: Matrix,
    /// `T × d_c`, row `t` is the control entering the transition into `x_t`.
    pub u: Option<Matrix>,
    /// `(T+1) × d_x` ground truth, when known.
    pub x: Option<Matrix>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.y.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.y.nrows() == 0
    }

    /// Splits off the last `k` steps as a held-out continuation.
    pub fn split_tail(&self, k: usize) -> Result<(Sequence, Sequence)> {
        let n = self.len();
        if k >= n {
            return Err(Error::Config(format!("cannot hold out {k} of {n} steps")));
        }
        let head = n - k;
        let train = Sequence {
            y: self.y.rows(0, head).into_owned(),
            u: self.u.as_ref().map(|u| u.rows(0, head).into_owned()),
            x: self.x.as_ref().map(|x| x.rows(0, head + 1).into_owned()),
        };
        let test = Sequence {
            y: self.y.rows(head, k).into_owned(),
            u: self.u.as_ref().map(|u| u.rows(head, k).into_owned()),
            x: self.x.as_ref().map(|x| x.rows(head, k + 1).into_owned()),
        };
        Ok((train, test))
    }

    pub fn to_trajectory(&self) -> Option<Trajectory> {
        let x = self.x.clone()?;
        Some(Trajectory { x, y: self.y.clone(), f: None, f_tilde: None, u: self.u.clone() })
    }
}

/// Per-channel affine scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Pooled mean and (population) standard deviation over all rows.
    pub fn fit(blocks: &[&Matrix]) -> Result<Self> {
        let d = blocks.first().ok_or(Error::EmptyDataset)?.ncols();
        let n: usize = blocks.iter().map(|b| b.nrows()).sum();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut mean = vec![0.0; d];
        for b in blocks {
            for (j, m) in mean.iter_mut().enumerate() {
                *m += b.column(j).sum();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for b in blocks {
            for j in 0..d {
                var[j] += b.column(j).iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>();
            }
        }
        let mut std = Vec::with_capacity(d);
        for (j, v) in var.iter().enumerate() {
            let s = (v / n as f64).sqrt();
            if !(s > 1e-12 * mean[j].abs().max(1.0)) {
                return Err(Error::DegenerateChannel(j));
            }
            std.push(s);
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, m: &Matrix) -> Matrix {
        Matrix::from_fn(m.nrows(), m.ncols(), |i, j| (m[(i, j)] - self.mean[j]) / self.std[j])
    }

    pub fn invert(&self, m: &Matrix) -> Matrix {
        Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * self.std[j] + self.mean[j])
    }
}

/// Scaling applied to observations and controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub y: ChannelStats,
    pub u: Option<ChannelStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub seed: Option<u64>,
    #[serde(default)]
    pub params: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<Sequence>,
    pub standardization: Option<Standardization>,
    pub meta: DatasetMeta,
}

/// Sidecar description written next to exported CSVs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    pub meta: DatasetMeta,
    pub d_y: usize,
    pub d_c: usize,
    pub lengths: Vec<usize>,
    pub standardization: Option<Standardization>,
}

impl Dataset {
    pub fn d_y(&self) -> usize {
        self.sequences.first().map_or(0, |s| s.y.ncols())
    }

    pub fn d_c(&self) -> usize {
        self.sequences.first().and_then(|s| s.u.as_ref()).map_or(0, |u| u.ncols())
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn sidecar(&self) -> Sidecar {
        Sidecar {
            meta: self.meta.clone(),
            d_y: self.d_y(),
            d_c: self.d_c(),
            lengths: self.sequences.iter().map(Sequence::len).collect(),
            standardization: self.standardization.clone(),
        }
    }

    /// Writes `seq_NNN.csv` per sequence (trajectory format when states are
    /// known, observation format otherwise) and `dataset.json`.
    pub fn export_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (k, s) in self.sequences.iter().enumerate() {
            let file = std::fs::File::create(dir.join(format!("seq_{k:03}.csv")))?;
            match s.to_trajectory() {
                Some(traj) => traj.write_csv(file)?,
                None => write_observations_csv(std::slice::from_ref(s), file)?,
            }
        }
        let meta = std::fs::File::create(dir.join("dataset.json"))?;
        serde_json::to_writer_pretty(meta, &self.sidecar())?;
        Ok(())
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// `0.8 + (x + 0.2)(1 − 5/(1 + e^{−2x}))`
pub fn kink_fn(x: f64) -> f64 {
    0.8 + (x + 0.2) * (1.0 - 5.0 / (1.0 + (-2.0 * x).exp()))
}

/// Piecewise map with a step at 3 and a drop beyond 5.
pub fn kink_step_fn(x: f64) -> f64 {
    if x < 3.0 || (4.0..5.0).contains(&x) {
        x + 1.0
    } else if x < 4.0 {
        0.0
    } else {
        16.0 - 2.0 * x
    }
}

pub const KINK_PROCESS_VAR: f64 = 0.01;
pub const KINK_OBS_VAR: f64 = 0.1;

fn scalar_dataset(name: &str, f: fn(f64) -> f64, x0: (f64, f64), num_seq: usize, steps: usize, seed: u64) -> Result<Dataset> {
    if num_seq == 0 || steps == 0 {
        return Err(Error::Config("need at least one sequence of at least one step".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sequences = Vec::with_capacity(num_seq);
    for _ in 0..num_seq {
        let mut x = Matrix::zeros(steps + 1, 1);
        let mut y = Matrix::zeros(steps, 1);
        x[(0, 0)] = rng.gen_range(x0.0..x0.1);
        for t in 1..=steps {
            x[(t, 0)] = f(x[(t - 1, 0)]) + KINK_PROCESS_VAR.sqrt() * normal(&mut rng);
            y[(t - 1, 0)] = x[(t, 0)] + KINK_OBS_VAR.sqrt() * normal(&mut rng);
        }
        sequences.push(Sequence { y, u: None, x: Some(x) });
    }
    let params = serde_json::json!({
        "num_seq": num_seq,
        "steps": steps,
        "x0_low": x0.0,
        "x0_high": x0.1,
        "process_var": KINK_PROCESS_VAR,
        "obs_var": KINK_OBS_VAR,
    });
    Ok(Dataset { sequences, standardization: None, meta: DatasetMeta { name: name.into(), seed: Some(seed), params } })
}

/// Kink dynamics with `x₀ ~ U[−3, 1]`.
pub fn gen_kink(num_seq: usize, steps: usize, seed: u64) -> Result<Dataset> {
    scalar_dataset("kink", kink_fn, (-3.0, 1.0), num_seq, steps, seed)
}

/// Kink-step dynamics with `x₀ ~ U[0, 6]`.
pub fn gen_kink_step(num_seq: usize, steps: usize, seed: u64) -> Result<Dataset> {
    scalar_dataset("kink_step", kink_step_fn, (0.0, 6.0), num_seq, steps, seed)
}

pub const LORENZ_DT: f64 = 0.02;
pub const LORENZ_PROCESS_VAR: f64 = 0.0015;
pub const LORENZ_OBS_VAR: f64 = 0.1;
pub const LORENZ_X0: [f64; 3] = [1.0, 1.0, 1.0];
const SIGMA: f64 = 10.0;
const RHO: f64 = 28.0;
const BETA: f64 = 8.0 / 3.0;

/// `A(x)` with `ẋ = A(x) x` for Lorenz-63.
pub fn lorenz_generator(x: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(-SIGMA, SIGMA, 0.0, RHO, -1.0, -x[0], 0.0, x[0], -BETA)
}

/// `F(x) = Σ_{j=0}^{5} (A(x)Δt)^j / j!`
pub fn lorenz_step_matrix(x: &Vector3<f64>, dt: f64) -> Matrix3<f64> {
    let a = lorenz_generator(x) * dt;
    let mut term = Matrix3::identity();
    let mut sum = Matrix3::identity();
    for j in 1..=5 {
        term = term * a / j as f64;
        sum += term;
    }
    sum
}

/// Deterministic part of the discretized Lorenz transition.
pub fn lorenz_transition(x: &Vector3<f64>, dt: f64) -> Vector3<f64> {
    lorenz_step_matrix(x, dt) * x
}

/// One Lorenz sequence from `x₀ = (1, 1, 1)`.
pub fn gen_lorenz(steps: usize, dt: f64, seed: u64) -> Result<Dataset> {
    gen_lorenz_with_noise(steps, dt, LORENZ_PROCESS_VAR, LORENZ_OBS_VAR, seed)
}

pub fn gen_lorenz_with_noise(steps: usize, dt: f64, process_var: f64, obs_var: f64, seed: u64) -> Result<Dataset> {
    if steps == 0 || dt <= 0.0 || !dt.is_finite() {
        return Err(Error::Config("Lorenz generation needs T ≥ 1 and Δt > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Matrix::zeros(steps + 1, 3);
    let mut y = Matrix::zeros(steps, 3);
    let mut state = Vector3::from(LORENZ_X0);
    for d in 0..3 {
        x[(0, d)] = state[d];
    }
    for t in 1..=steps {
        let mean = lorenz_transition(&state, dt);
        for d in 0..3 {
            state[d] = mean[d] + process_var.sqrt() * normal(&mut rng);
            x[(t, d)] = state[d];
        }
        for d in 0..3 {
            y[(t - 1, d)] = state[d] + obs_var.sqrt() * normal(&mut rng);
        }
    }
    let params = serde_json::json!({
        "steps": steps,
        "dt": dt,
        "process_var": process_var,
        "obs_var": obs_var,
        "x0": LORENZ_X0,
        "taylor_order": 5,
    });
    Ok(Dataset {
        sequences: vec![Sequence { y, u: None, x: Some(x) }],
        standardization: None,
        meta: DatasetMeta { name: "lorenz".into(), seed: Some(seed), params },
    })
}

/// Statistics from `train` applied to both splits.
pub fn standardize(train: &Dataset, test: Option<&Dataset>) -> Result<(Dataset, Option<Dataset>, Standardization)> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let ys: Vec<&Matrix> = train.sequences.iter().map(|s| &s.y).collect();
    let y = ChannelStats::fit(&ys)?;
    let u = if train.d_c() > 0 {
        let us: Vec<&Matrix> = train.sequences.iter().filter_map(|s| s.u.as_ref()).collect();
        Some(ChannelStats::fit(&us)?)
    } else {
        None
    };
    let stats = Standardization { y, u };
    let scale = |ds: &Dataset| Dataset {
        sequences: ds
            .sequences
            .iter()
            .map(|s| Sequence {
                y: stats.y.apply(&s.y),
                u: match (&s.u, &stats.u) {
                    (Some(u), Some(st)) => Some(st.apply(u)),
                    (u, _) => u.clone(),
                },
                x: s.x.clone(),
            })
            .collect(),
        standardization: Some(stats.clone()),
        meta: ds.meta.clone(),
    };
    Ok((scale(train), test.map(scale), stats))
}

/// Maps standardized observations back to original units.
pub fn destandardize(values: &Matrix, stats: &ChannelStats) -> Matrix {
    stats.invert(values)
}

/// Column roles for ingesting an external CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Column splitting rows into sequences; rows must be grouped by it.
    #[serde(default)]
    pub sequence: Option<String>,
    #[serde(default)]
    pub time: Option<String>,
    #[serde(default)]
    pub controls: Vec<String>,
    pub observations: Vec<String>,
}

impl CsvSchema {
    /// Layout produced by [`write_observations_csv`].
    pub fn standard(d_y: usize, d_c: usize) -> Self {
        Self {
            sequence: Some("seq".into()),
            time: Some("t".into()),
            controls: (1..=d_c).map(|i| format!("u_{i}")).collect(),
            observations: (1..=d_y).map(|i| format!("y_{i}")).collect(),
        }
    }
}

/// Writes `seq, t, u_*, y_*` rows with 17 significant digits.
pub fn write_observations_csv<W: Write>(sequences: &[Sequence], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let dy = sequences.first().map_or(0, |s| s.y.ncols());
    let dc = sequences.first().and_then(|s| s.u.as_ref()).map_or(0, |u| u.ncols());
    let mut header = vec!["seq".to_string(), "t".to_string()];
    header.extend((1..=dc).map(|i| format!("u_{i}")));
    header.extend((1..=dy).map(|i| format!("y_{i}")));
    out.write_record(&header).map_err(crate::model::csv_err)?;
    for (k, s) in sequences.iter().enumerate() {
        for t in 0..s.len() {
            let mut rec = vec![k.to_string(), (t + 1).to_string()];
            if let Some(u) = &s.u {
                rec.extend(u.row(t).iter().map(|v| fmt17(*v)));
            }
            rec.extend(s.y.row(t).iter().map(|v| fmt17(*v)));
            out.write_record(&rec).map_err(crate::model::csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Parses a CSV whose columns are located by name through `schema`.
pub fn ingest_csv_reader<R: Read>(r: R, schema: &CsvSchema, name: &str) -> Result<Dataset> {
    if schema.observations.is_empty() {
        return Err(Error::Config("schema declares no observation columns".into()));
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(r);
    let header = reader.headers().map_err(|e| Error::Parse { line: 1, message: e.to_string() })?.clone();
    let find = |col: &str| {
        header.iter().position(|h| h.trim() == col).ok_or_else(|| Error::Parse { line: 1, message: format!("missing column `{col}`") })
    };
    let seq_col = schema.sequence.as_deref().map(find).transpose()?;
    let time_col = schema.time.as_deref().map(find).transpose()?;
    let u_cols: Vec<usize> = schema.controls.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let y_cols: Vec<usize> = schema.observations.iter().map(|c| find(c)).collect::<Result<_>>()?;

    let mut groups: Vec<(String, Vec<Vec<f64>>, Vec<Vec<f64>>)> = Vec::new();
    let mut last_time: Option<f64> = None;
    for (k, rec) in reader.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        let cell = |c: usize| -> Result<f64> {
            let raw = rec.get(c).unwrap_or("").trim();
            raw.parse::<f64>().map_err(|_| Error::Parse { line, message: format!("non-numeric cell `{raw}` in column `{}`", &header[c]) })
        };
        let key = seq_col.map(|c| rec.get(c).unwrap_or("").trim().to_string()).unwrap_or_default();
        let time = time_col.map(cell).transpose()?;
        let new_group = groups.last().is_none_or(|g| g.0 != key);
        if new_group {
            if groups.iter().any(|g| g.0 == key) {
                return Err(Error::Parse { line, message: format!("rows of sequence `{key}` are not contiguous") });
            }
            groups.push((key, Vec::new(), Vec::new()));
            last_time = None;
        }
        if let (Some(t), Some(prev)) = (time, last_time) {
            if t <= prev {
                return Err(Error::Parse { line, message: "time column must increase within a sequence".into() });
            }
        }
        last_time = time.or(last_time);
        let g = groups.last_mut().expect("group pushed above");
        g.1.push(y_cols.iter().map(|&c| cell(c)).collect::<Result<_>>()?);
        g.2.push(u_cols.iter().map(|&c| cell(c)).collect::<Result<_>>()?);
    }
    if groups.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let to_matrix = |rows: &[Vec<f64>], d: usize| Matrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
    let sequences = groups
        .iter()
        .map(|(_, ys, us)| Sequence {
            y: to_matrix(ys, y_cols.len()),
            u: (!u_cols.is_empty()).then(|| to_matrix(us, u_cols.len())),
            x: None,
        })
        .collect();
    Ok(Dataset {
        sequences,
        standardization: None,
        meta: DatasetMeta { name: name.into(), seed: None, params: serde_json::to_value(schema)? },
    })
}

pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let name = path.file_stem().map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
    ingest_csv_reader(std::fs::File::open(path)?, schema, &name)
}
