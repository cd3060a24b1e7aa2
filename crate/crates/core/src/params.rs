//! Trainable parameters and quantizer scales owned by a model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::ScaleFactor;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    /// A weight matrix laid out `[in, out]`; one output unit per column.
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, kind: ParamKind, tensor: Tensor) -> Self {
        let grad = Tensor::zeros(tensor.shape());
        Self {
            name: name.into(),
            kind,
            tensor,
            grad,
            trainable: true,
        }
    }
}

/// Parameters, scales and their gradient accumulators.
///
/// `version` increments on every mutation of parameter values so that
/// gradients computed against an older state can be detected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Parameter>,
    scales: Vec<ScaleFactor>,
    scale_grads: Vec<f64>,
    version: u64,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            scales: Vec::new(),
            scale_grads: Vec::new(),
            version: 0,
        }
    }

    pub fn add_param(&mut self, p: Parameter) -> usize {
        self.params.push(p);
        self.params.len() - 1
    }

    pub fn add_scale(&mut self, s: ScaleFactor) -> usize {
        self.scales.push(s);
        self.scale_grads.push(0.0);
        self.scales.len() - 1
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn param(&self, i: usize) -> Result<&Parameter> {
        self.params.get(i).ok_or(Error::UnknownIndex(i))
    }

    pub fn param_mut(&mut self, i: usize) -> Result<&mut Parameter> {
        self.version += 1;
        self.params.get_mut(i).ok_or(Error::UnknownIndex(i))
    }

    pub fn scales(&self) -> &[ScaleFactor] {
        &self.scales
    }

    pub fn scales_mut(&mut self) -> &mut [ScaleFactor] {
        &mut self.scales
    }

    pub fn scale(&self, i: usize) -> Result<&ScaleFactor> {
        self.scales.get(i).ok_or(Error::UnknownIndex(i))
    }

    pub fn scale_grads(&self) -> &[f64] {
        &self.scale_grads
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Indices of trainable parameters.
    pub fn trainable(&self) -> impl Iterator<Item = usize> + '_ {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.trainable)
            .map(|(i, _)| i)
    }

    /// Snapshot of every parameter value, in store order.
    pub fn values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.tensor.clone()).collect()
    }

    /// Snapshot of every parameter gradient, in store order.
    pub fn grads(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.grad.clone()).collect()
    }

    /// Overwrites every parameter value. Shapes must match.
    pub fn set_values(&mut self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, v) in self.params.iter().zip(values) {
            if p.tensor.shape() != v.shape() {
                return Err(Error::ShapeMismatch {
                    node: p.name.clone(),
                    detail: format!("{:?} vs {:?}", p.tensor.shape(), v.shape()),
                });
            }
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            p.tensor = v.clone();
        }
        self.version += 1;
        Ok(())
    }

    /// Restores values captured by [`ParamStore::values`] together with the
    /// version they were captured at, leaving the store bit-identical.
    pub(crate) fn restore(&mut self, values: Vec<Tensor>, version: u64) {
        for (p, v) in self.params.iter_mut().zip(values) {
            p.tensor = v;
        }
        self.version = version;
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    pub(crate) fn params_mut_unversioned(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub(crate) fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
        self.scale_grads.iter_mut().for_each(|g| *g = 0.0);
    }

    pub(crate) fn scale_grads_mut(&mut self) -> &mut [f64] {
        &mut self.scale_grads
    }

    /// Number of scalar entries across all parameters.
    pub fn n_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }
}
