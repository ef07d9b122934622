use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::matrix::Matrix;
use crate::error::{CdapError, Result};
use crate::scalar::Scalar;

/// Handle to a parameter inside a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Optimizer group. Each group has its own peak learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    /// Parameters that stand in for the pretrained encoder.
    Encoder,
    /// Projections, cross-attention block and everything else.
    Head,
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Matrix<T>,
    pub grad: Matrix<T>,
    pub(crate) first_moment: Matrix<T>,
    pub(crate) second_moment: Matrix<T>,
}

/// All trainable tensors with their gradient slots and AdamW state.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore<T> {
    params: Vec<Parameter<T>>,
    pub(crate) step: u64,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            step: 0,
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn insert(&mut self, name: &str, group: ParamGroup, value: Matrix<T>) -> Result<ParamId> {
        if self.id(name).is_some() {
            return Err(CdapError::contract(format!("duplicate parameter `{name}`")));
        }
        let (r, c) = value.shape();
        self.params.push(Parameter {
            name: name.to_owned(),
            group,
            grad: Matrix::zeros(r, c),
            first_moment: Matrix::zeros(r, c),
            second_moment: Matrix::zeros(r, c),
            value,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Matrix<T> {
        &self.params[id.0].grad
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of optimizer steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    /// Adds `scale · ∂loss/∂p` into every parameter's gradient slot.
    pub fn accumulate(&mut self, grads: &Gradients<T>, scale: T) {
        for (id, grad) in grads.params() {
            let slot = &mut self.params[id.0].grad;
            for (s, &g) in slot.as_mut_slice().iter_mut().zip(grad.as_slice()) {
                *s += scale * g;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Writes the versioned JSON checkpoint. `meta` is stored verbatim.
    pub fn save<W: Write>(&self, writer: W, meta: serde_json::Value) -> Result<()> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_owned(),
            version: CHECKPOINT_VERSION,
            meta,
            params: self
                .params
                .iter()
                .map(|p| CheckpointEntry {
                    name: p.name.clone(),
                    group: p.group,
                    rows: p.value.rows(),
                    cols: p.value.cols(),
                    values: p.value.to_f64_vec(),
                })
                .collect(),
        };
        serde_json::to_writer(writer, &file).map_err(|e| CdapError::Io(e.into()))
    }

    /// Reads a checkpoint written by [`ParameterStore::save`]; returns the store and its metadata.
    pub fn load<R: Read>(reader: R) -> Result<(Self, serde_json::Value)> {
        let file: CheckpointFile = serde_json::from_reader(reader).map_err(|e| CdapError::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(CdapError::validation(format!(
                "unsupported checkpoint `{}` version {}",
                file.format, file.version
            )));
        }
        let mut store = Self::new();
        for entry in file.params {
            let values = entry.values.into_iter().map(T::from_f64_lossy).collect();
            let value = Matrix::from_vec(entry.rows, entry.cols, values)?;
            store.insert(&entry.name, entry.group, value)?;
        }
        Ok((store, file.meta))
    }
}

const CHECKPOINT_FORMAT: &str = "cdap-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    meta: serde_json::Value,
    params: Vec<CheckpointEntry>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    group: ParamGroup,
    rows: usize,
    cols: usize,
    /// Row-major.
    values: Vec<f64>,
}
