//! Named, grouped parameter arrays and their binding to a tape.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::error::{Error, Result};

/// Parameter groups, used for per-group learning rates and gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Kernel hyperparameters.
    Gp,
    Flow,
    Q,
    R,
    /// Inducing-output means.
    M,
    /// Inducing-output covariance factors.
    S,
    M0,
    L0,
    /// Inference network.
    Phi,
    /// Inducing locations.
    Z,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 10] = [
        ParamGroup::Gp,
        ParamGroup::Flow,
        ParamGroup::Q,
        ParamGroup::R,
        ParamGroup::M,
        ParamGroup::S,
        ParamGroup::M0,
        ParamGroup::L0,
        ParamGroup::Phi,
        ParamGroup::Z,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Matrix,
    pub trainable: bool,
}

/// Serialized form of one parameter array (row-major data).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrayRecord {
    pub name: String,
    pub group: ParamGroup,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new array. Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, group, value, trainable: true });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Freezes or unfreezes every array of a group.
    pub fn set_group_trainable(&mut self, group: ParamGroup, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.trainable = trainable;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn values(&self) -> Vec<Matrix> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn set_values(&mut self, values: &[Matrix]) {
        assert_eq!(values.len(), self.params.len(), "parameter count mismatch");
        for (p, v) in self.params.iter_mut().zip(values) {
            assert_eq!(p.value.shape(), v.shape(), "shape mismatch for `{}`", p.name);
            p.value.copy_from(v);
        }
    }

    pub fn values_mut(&mut self) -> Vec<&mut Matrix> {
        self.params.iter_mut().map(|p| &mut p.value).collect()
    }

    /// Records every array as a leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound { tape, vars: self.params.iter().map(|p| tape.leaf(p.value.clone())).collect() }
    }

    /// Same as [`ParamStore::bind`] with some arrays replaced.
    pub fn bind_with<'t>(&self, tape: &'t Tape, values: &[Matrix]) -> Bound<'t> {
        assert_eq!(values.len(), self.params.len());
        Bound { tape, vars: values.iter().map(|v| tape.leaf(v.clone())).collect() }
    }

    pub fn to_records(&self) -> Vec<ArrayRecord> {
        self.params
            .iter()
            .map(|p| ArrayRecord {
                name: p.name.clone(),
                group: p.group,
                shape: [p.value.nrows(), p.value.ncols()],
                data: p.value.transpose().iter().copied().collect(),
                trainable: p.trainable,
            })
            .collect()
    }

    /// Overwrites values from records; every stored array must be present with the same shape.
    pub fn load_records(&mut self, records: &[ArrayRecord]) -> Result<()> {
        let by_name: HashMap<&str, &ArrayRecord> = records.iter().map(|r| (r.name.as_str(), r)).collect();
        for p in &mut self.params {
            let r = by_name.get(p.name.as_str()).ok_or_else(|| Error::Config(format!("checkpoint lacks `{}`", p.name)))?;
            if r.shape != [p.value.nrows(), p.value.ncols()] || r.data.len() != r.shape[0] * r.shape[1] {
                return Err(Error::Shape(format!("`{}`: expected {:?}, found {:?}", p.name, p.value.shape(), r.shape)));
            }
            p.value = Matrix::from_row_slice(r.shape[0], r.shape[1], &r.data);
            p.trainable = r.trainable;
        }
        Ok(())
    }
}

/// Parameter leaves recorded on one tape.
pub struct Bound<'t> {
    pub tape: &'t Tape,
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_round_trip() {
        let mut store = ParamStore::new();
        let a = store.add("a", ParamGroup::Gp, Matrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        store.add("b", ParamGroup::Q, Matrix::from_element(1, 1, -0.5));
        let rec = store.to_records();
        assert_eq!(rec[0].data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut other = store.clone();
        other.get_mut(a).fill(0.0);
        other.load_records(&rec).unwrap();
        assert_eq!(other.get(a), store.get(a));
    }

    #[test]
    fn missing_record_is_an_error() {
        let mut store = ParamStore::new();
        store.add("a", ParamGroup::Gp, Matrix::zeros(1, 1));
        assert!(store.load_records(&[]).is_err());
    }
}
