//! Loss-surface probes around the current parameters.
//!
//! Scale factors are never perturbed. Every probe leaves the model
//! bit-identical, parameter version included.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::data::stream_rng;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamKind;
use crate::tensor::{global_norm, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Grid points per axis; odd so the centre is the unperturbed point.
    pub n_points: usize,
    pub radius: f64,
    pub n_directions: usize,
    pub rho_probe: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            n_points: 21,
            radius: 1.0,
            n_directions: 20,
            rho_probe: 0.05,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_points < 3 || self.n_points.is_multiple_of(2) {
            return Err(Error::config(
                "probe.n_points",
                format!("{} must be odd and >= 3", self.n_points),
            ));
        }
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return Err(Error::config("probe.radius", format!("{} must be > 0", self.radius)));
        }
        if self.n_directions == 0 {
            return Err(Error::config("probe.n_directions", "must be > 0"));
        }
        if !(self.rho_probe.is_finite() && self.rho_probe > 0.0) {
            return Err(Error::config(
                "probe.rho_probe",
                format!("{} must be > 0", self.rho_probe),
            ));
        }
        Ok(())
    }

    /// Symmetric axis coordinates; the middle one is exactly zero.
    pub fn coords(&self) -> Vec<f64> {
        let m = (self.n_points - 1) as f64;
        (0..self.n_points)
            .map(|i| self.radius * (2.0 * i as f64 / m - 1.0))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrid {
    pub dims: usize,
    pub coords: Vec<f64>,
    /// Row-major over `(c1, c2)`; a single row of `n_points` for one axis.
    pub losses: Vec<f64>,
    pub base_loss: f64,
    /// Weight columns whose norm was zero; their direction entries are zero.
    pub flagged: Vec<String>,
}

impl LossGrid {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.losses[i * self.coords.len() + j]
    }

    pub fn center(&self) -> f64 {
        let m = self.coords.len() / 2;
        if self.dims == 1 {
            self.losses[m]
        } else {
            self.at(m, m)
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("c1,c2,loss\n");
        if self.dims == 1 {
            for (c, l) in self.coords.iter().zip(&self.losses) {
                writeln!(out, "{c:?},0.0,{l:?}").unwrap();
            }
        } else {
            for (i, c1) in self.coords.iter().enumerate() {
                for (j, c2) in self.coords.iter().enumerate() {
                    writeln!(out, "{c1:?},{c2:?},{:?}", self.at(i, j)).unwrap();
                }
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Random direction rescaled per output unit to that unit's weight norm.
///
/// Weights are stored `[in, out]`, so one output unit is one column. Bias
/// entries stay zero. Returns the direction (indexed like the store) and
/// the names of zero-norm columns.
pub fn filter_normalized_direction<R: Rng>(model: &Model, rng: &mut R) -> (Vec<Tensor>, Vec<String>) {
    let mut flagged = Vec::new();
    let trainable: Vec<usize> = model.store.trainable().collect();
    let dirs = model
        .store
        .params()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d = Tensor::zeros(p.tensor.shape());
            if p.kind != ParamKind::Weight || !trainable.contains(&i) {
                return d;
            }
            let (rows, cols) = match p.tensor.shape() {
                [r, c] => (*r, *c),
                [n] => (*n, 1),
                _ => (p.tensor.len(), 1),
            };
            let theta = p.tensor.data();
            let out = d.data_mut();
            for v in out.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            for j in 0..cols {
                let col = |buf: &[f64]| (0..rows).map(|r| buf[r * cols + j].powi(2)).sum::<f64>().sqrt();
                let t_norm = col(theta);
                let d_norm = col(out);
                let factor = if t_norm == 0.0 || d_norm == 0.0 {
                    flagged.push(format!("{}[:,{j}]", p.name));
                    0.0
                } else {
                    t_norm / d_norm
                };
                for r in 0..rows {
                    out[r * cols + j] *= factor;
                }
            }
            d
        })
        .collect();
    (dirs, flagged)
}

fn offset(theta: &[Tensor], dirs: &[(f64, &[Tensor])]) -> Vec<Tensor> {
    theta
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut out = t.clone();
            for (c, d) in dirs {
                for (o, x) in out.data_mut().iter_mut().zip(d[i].data()) {
                    *o += c * x;
                }
            }
            out
        })
        .collect()
}

/// Runs `f` with the model free to mutate, then restores parameters and version.
fn with_restore<T>(model: &mut Model, f: impl FnOnce(&mut Model) -> Result<T>) -> Result<T> {
    let theta = model.store.values();
    let version = model.store.version();
    let out = f(model);
    model.store.restore(theta, version);
    out
}

/// Losses over a symmetric 1-D or 2-D grid of filter-normalized directions.
pub fn loss_slice(model: &mut Model, batch: &Batch, config: &ProbeConfig, dims: usize, seed: u64) -> Result<LossGrid> {
    config.validate()?;
    if dims != 1 && dims != 2 {
        return Err(Error::InvalidArgument(format!("slice dims must be 1 or 2, got {dims}")));
    }
    let mut rng = stream_rng(seed, 20);
    let mut flagged = Vec::new();
    let mut directions = Vec::new();
    for _ in 0..dims {
        let (d, f) = filter_normalized_direction(model, &mut rng);
        flagged.extend(f);
        directions.push(d);
    }
    flagged.dedup();
    let coords = config.coords();
    with_restore(model, |m| {
        let base_loss = m.eval_loss(batch)?;
        let theta = m.store.values();
        let mut losses = Vec::with_capacity(coords.len().pow(dims as u32));
        if dims == 1 {
            for &c in &coords {
                m.store.set_values(&offset(&theta, &[(c, &directions[0])]))?;
                losses.push(m.eval_loss(batch)?);
            }
        } else {
            for &c1 in &coords {
                for &c2 in &coords {
                    m.store
                        .set_values(&offset(&theta, &[(c1, &directions[0]), (c2, &directions[1])]))?;
                    losses.push(m.eval_loss(batch)?);
                }
            }
        }
        Ok(LossGrid {
            dims,
            coords: coords.clone(),
            losses,
            base_loss,
            flagged: flagged.clone(),
        })
    })
}

/// Largest loss increase over random perturbations of norm `rho_probe`.
///
/// This is a scalar stand-in for a flatness statistic, not a published one.
/// It can be negative away from a minimum.
pub fn sharpness_proxy(model: &mut Model, batch: &Batch, config: &ProbeConfig, seed: u64) -> Result<f64> {
    config.validate()?;
    let mut rng = stream_rng(seed, 21);
    let trainable: Vec<usize> = model.store.trainable().collect();
    with_restore(model, |m| {
        let base = m.eval_loss(batch)?;
        let theta = m.store.values();
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..config.n_directions {
            let mut dir: Vec<Tensor> = theta.iter().map(|t| Tensor::zeros(t.shape())).collect();
            for &i in &trainable {
                for v in dir[i].data_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
            }
            let norm = global_norm(&dir);
            if norm == 0.0 {
                return Err(Error::InvalidArgument("no trainable parameters to perturb".into()));
            }
            let perturbed = offset(&theta, &[(config.rho_probe / norm, &dir)]);
            m.store.set_values(&perturbed)?;
            worst = worst.max(m.eval_loss(batch)? - base);
        }
        Ok(worst)
    })
}
