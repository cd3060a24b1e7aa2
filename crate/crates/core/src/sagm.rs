//! Dual-gradient updates over quantized parameters.
//!
//! One step evaluates two gradients on the same batch:
//!
//! 1. the vanilla QAT gradient at `Q(θ, s)`, giving `g_θ` and the per-scale
//!    `g_va`;
//! 2. the flatness-oriented gradient at `Q(θ', s)` with
//!    `θ' = θ + ρ g_θ / ‖g_θ‖ − α g_θ`, giving `g_θ'` and the per-scale `g_flat`.
//!
//! Scales are never perturbed. Weights descend along the mean of the two
//! weight gradients; the scale update belongs to the freeze controller.

use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{global_norm, Tensor};

/// How the two scale gradients are merged for an unfrozen scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleCombine {
    /// `g_va + g_flat`
    Sum,
    /// `(g_va + g_flat) / 2`
    Average,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SagmConfig {
    /// Perturbation radius.
    pub rho: f64,
    /// Surrogate-gap weight.
    pub alpha: f64,
    pub lr_theta: f64,
    pub lr_scale: f64,
    pub weight_decay: f64,
    pub scale_combine: ScaleCombine,
}

impl Default for SagmConfig {
    fn default() -> Self {
        Self {
            rho: 0.05,
            alpha: 0.001,
            lr_theta: 0.05,
            lr_scale: 1e-3,
            weight_decay: 1e-4,
            scale_combine: ScaleCombine::Sum,
        }
    }
}

impl SagmConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64, strictly: bool| {
            let ok = v.is_finite() && if strictly { v > 0.0 } else { v >= 0.0 };
            if ok {
                Ok(())
            } else {
                Err(Error::config(
                    format!("sagm.{name}"),
                    format!("{v} must be {}", if strictly { "> 0" } else { ">= 0" }),
                ))
            }
        };
        check("rho", self.rho, false)?;
        check("alpha", self.alpha, false)?;
        check("lr_theta", self.lr_theta, false)?;
        check("lr_scale", self.lr_scale, false)?;
        check("weight_decay", self.weight_decay, false)
    }
}

/// Gradients of one vanilla QAT pass.
#[derive(Debug, Clone, PartialEq)]
pub struct QatGradients {
    pub g_theta: Vec<Tensor>,
    pub g_va: Vec<f64>,
    pub loss: f64,
    pub batch_checksum: u64,
    pub version: u64,
}

/// Both gradient sets of one dual-gradient step, indexed like the store.
#[derive(Debug, Clone, PartialEq)]
pub struct DualGradients {
    pub g_theta: Vec<Tensor>,
    pub g_theta_flat: Vec<Tensor>,
    pub g_va: Vec<f64>,
    pub g_flat: Vec<f64>,
    pub loss_va: f64,
    pub loss_flat: f64,
    /// Normalized ascent step `ρ g_θ / ‖g_θ‖`.
    pub epsilon: Vec<Tensor>,
    /// Weights the second pass was evaluated at.
    pub theta_prime: Vec<Tensor>,
    /// `‖g_θ‖ = 0` with `ρ > 0`; the ascent step was taken as zero.
    pub zero_gradient: bool,
    /// Checksums of the batch as seen by the first and second pass.
    pub batch_checksums: (u64, u64),
    pub version: u64,
}

fn require_batch(batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        Err(Error::EmptyBatch)
    } else {
        Ok(())
    }
}

/// Single forward/backward through the quantized model.
pub fn compute_qat_gradients(model: &mut Model, batch: &Batch) -> Result<QatGradients> {
    require_batch(batch)?;
    let batch_checksum = batch.checksum();
    let loss = model.loss_and_grad(batch)?;
    Ok(QatGradients {
        g_theta: model.store.grads(),
        g_va: model.store.scale_grads().to_vec(),
        loss,
        batch_checksum,
        version: model.store.version(),
    })
}

/// `ρ g / ‖g‖` over every tensor, or zeros (flagged) when the norm vanishes.
pub fn ascent_step(grads: &[Tensor], rho: f64) -> (Vec<Tensor>, bool) {
    let norm = global_norm(grads);
    if rho == 0.0 || norm == 0.0 {
        let zeros = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        return (zeros, rho > 0.0 && norm == 0.0);
    }
    let k = rho / norm;
    (grads.iter().map(|g| g.map(|v| v * k)).collect(), false)
}

/// `θ + ε − α g`, leaving an entry untouched when its offset is exactly zero.
fn offset_params(theta: &[Tensor], epsilon: &[Tensor], grads: &[Tensor], alpha: f64) -> Vec<Tensor> {
    theta
        .iter()
        .zip(epsilon)
        .zip(grads)
        .map(|((t, e), g)| {
            let data = t
                .data()
                .iter()
                .zip(e.data())
                .zip(g.data())
                .map(|((&t, &e), &g)| {
                    let d = e - alpha * g;
                    if d == 0.0 {
                        t
                    } else {
                        t + d
                    }
                })
                .collect();
            Tensor::from_parts(t.shape().to_vec(), data)
        })
        .collect()
}

/// Runs both passes on the same batch and restores the parameters exactly.
pub fn compute_dual_gradients(model: &mut Model, batch: &Batch, config: &SagmConfig) -> Result<DualGradients> {
    if !model.is_quantized() {
        return Err(Error::NoQuantizers);
    }
    require_batch(batch)?;
    let theta = model.store.values();
    let version = model.store.version();

    let first = compute_qat_gradients(model, batch)?;
    let (epsilon, zero_gradient) = ascent_step(&first.g_theta, config.rho);
    let theta_prime = offset_params(&theta, &epsilon, &first.g_theta, config.alpha);

    let second = (|| {
        model.store.set_values(&theta_prime)?;
        let checksum = batch.checksum();
        let loss = model.loss_and_grad(batch)?;
        Ok::<_, Error>((loss, model.store.grads(), model.store.scale_grads().to_vec(), checksum))
    })();
    model.store.restore(theta, version);
    let (loss_flat, g_theta_flat, g_flat, flat_checksum) = second?;

    Ok(DualGradients {
        g_theta: first.g_theta,
        g_theta_flat,
        g_va: first.g_va,
        g_flat,
        loss_va: first.loss,
        loss_flat,
        epsilon,
        theta_prime,
        zero_gradient,
        batch_checksums: (first.batch_checksum, flat_checksum),
        version,
    })
}

fn descend(model: &mut Model, grad_of: impl Fn(usize, usize) -> f64, lr: f64, weight_decay: f64) {
    let trainable: Vec<usize> = model.store.trainable().collect();
    let params = model.store.params_mut_unversioned();
    for i in trainable {
        let p = &mut params[i];
        for (j, t) in p.tensor.data_mut().iter_mut().enumerate() {
            *t -= lr * (grad_of(i, j) + weight_decay * *t);
        }
    }
    model.store.bump_version();
}

fn check_version(model: &Model, computed: u64) -> Result<()> {
    let current = model.store.version();
    if computed != current {
        return Err(Error::StaleGradients { computed, current });
    }
    Ok(())
}

/// `θ <- θ − lr (½ (g_θ + g_θ') + wd θ)`.
pub fn apply_theta_update(model: &mut Model, duals: &DualGradients, config: &SagmConfig) -> Result<()> {
    check_version(model, duals.version)?;
    descend(
        model,
        |i, j| 0.5 * (duals.g_theta[i].data()[j] + duals.g_theta_flat[i].data()[j]),
        config.lr_theta,
        config.weight_decay,
    );
    Ok(())
}

/// `θ <- θ − lr (g_θ + wd θ)`, the vanilla QAT (and full-precision) step.
pub fn apply_qat_update(model: &mut Model, grads: &QatGradients, config: &SagmConfig) -> Result<()> {
    check_version(model, grads.version)?;
    descend(
        model,
        |i, j| grads.g_theta[i].data()[j],
        config.lr_theta,
        config.weight_decay,
    );
    Ok(())
}

/// `L(Q(θ + ε̂, s)) − L(Q(θ, s))`. Leaves the model bit-identical.
pub fn compute_surrogate_gap(model: &mut Model, batch: &Batch, config: &SagmConfig) -> Result<f64> {
    require_batch(batch)?;
    let saved = model.store.clone();
    let result = (|| {
        let base = model.loss_and_grad(batch)?;
        let (epsilon, _) = ascent_step(&model.store.grads(), config.rho);
        let theta = model.store.values();
        let perturbed = offset_params(&theta, &epsilon, &epsilon, 0.0);
        model.store.set_values(&perturbed)?;
        let p = model.eval_loss(batch)?;
        Ok(p - base)
    })();
    model.store = saved;
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Graph, Target};
    use crate::model::QuantSite;
    use crate::params::{ParamKind, ParamStore, Parameter};
    use crate::quantizer::{QuantKind, QuantSpec, ScaleFactor};

    /// `L = (Q(w; s) x − y)²` with a single weight and a single sample.
    pub(crate) fn quadratic_model(w: f64, s: f64) -> Model {
        let mut store = ParamStore::new();
        let wi = store.add_param(Parameter::new(
            "w",
            ParamKind::Weight,
            Tensor::matrix(1, 1, vec![w]).unwrap(),
        ));
        let spec = QuantSpec::new(4, QuantKind::Weight).unwrap();
        let si = store.add_scale(ScaleFactor::new("w.s", spec, s).unwrap());
        let mut g = Graph::new();
        let x = g.input();
        let wn = g.param("w", wi);
        let q = g.fake_quant("w.q", wn, si, false);
        let pred = g.matmul("pred", x, q);
        g.mean_squared_error(pred);
        Model::from_parts(
            store,
            g,
            vec![QuantSite {
                scale_index: si,
                input_node: wn,
                spec,
            }],
        )
    }

    fn quad_batch(x: f64, y: f64) -> Batch {
        Batch::untagged(
            Tensor::matrix(1, 1, vec![x]).unwrap(),
            Target::Values(Tensor::matrix(1, 1, vec![y]).unwrap()),
        )
    }

    fn cfg(rho: f64, alpha: f64) -> SagmConfig {
        SagmConfig {
            rho,
            alpha,
            lr_theta: 0.1,
            lr_scale: 0.0,
            weight_decay: 0.0,
            scale_combine: ScaleCombine::Sum,
        }
    }

    #[test]
    fn zero_radius_reduces_to_vanilla() {
        let mut m = quadratic_model(0.3, 0.1);
        let d = compute_dual_gradients(&mut m, &quad_batch(2.0, 1.0), &cfg(0.0, 0.0)).unwrap();
        assert_eq!(d.g_theta, d.g_theta_flat);
        assert_eq!(d.g_va, d.g_flat);
        assert!(!d.zero_gradient);
    }

    /// Oracle for the quadratic model: STE/LSQ derivatives written out by hand.
    fn quad_oracle(w: f64, s: f64, x: f64, y: f64) -> (f64, f64, f64) {
        let (l, u) = (-8.0, 7.0);
        let r = w / s;
        let q = r.clamp(l, u).round_ties_even();
        let pred = s * q * x;
        let dl_dq = 2.0 * (pred - y) * x;
        let inside = (l..=u).contains(&r);
        let gw = if inside { dl_dq } else { 0.0 };
        let gs = dl_dq * if inside { q - r } else { q };
        ((pred - y).powi(2), gw, gs)
    }

    #[test]
    fn quadratic_dual_gradients_follow_the_chain() {
        let (w, s, x, y) = (0.33, 0.1, 1.5, 2.0);
        let config = cfg(0.05, 0.001);
        let mut m = quadratic_model(w, s);
        let d = compute_dual_gradients(&mut m, &quad_batch(x, y), &config).unwrap();

        let (l0, gw, gs) = quad_oracle(w, s, x, y);
        assert!((d.loss_va - l0).abs() < 1e-12);
        assert!((d.g_theta[0].data()[0] - gw).abs() < 1e-12);
        assert!((d.g_va[0] - gs).abs() < 1e-12);

        let w_prime = w + config.rho * gw.signum() - config.alpha * gw;
        assert!((d.theta_prime[0].data()[0] - w_prime).abs() < 1e-14);
        let (l1, gw1, gs1) = quad_oracle(w_prime, s, x, y);
        assert!((d.loss_flat - l1).abs() < 1e-12);
        assert!((d.g_theta_flat[0].data()[0] - gw1).abs() < 1e-12);
        assert!((d.g_flat[0] - gs1).abs() < 1e-12);

        // restored
        assert_eq!(m.store.params()[0].tensor.data(), &[w]);
        assert_eq!(m.store.scales()[0].value(), s);
    }

    #[test]
    fn ascent_step_has_norm_rho() {
        let g = vec![Tensor::new(vec![3], vec![0.3, -1.2, 4.0]).unwrap(), Tensor::scalar(0.7)];
        let (e, flagged) = ascent_step(&g, 0.05);
        assert!(!flagged);
        assert!((global_norm(&e) - 0.05).abs() < 1e-12);
        let (z, flagged) = ascent_step(&[Tensor::zeros(&[2])], 0.05);
        assert!(flagged);
        assert_eq!(z[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn theta_update_examples() {
        let mut m = quadratic_model(0.5, 0.1);
        let base = m.store.version();
        let d = DualGradients {
            g_theta: vec![Tensor::matrix(1, 1, vec![2.0]).unwrap()],
            g_theta_flat: vec![Tensor::matrix(1, 1, vec![4.0]).unwrap()],
            g_va: vec![0.0],
            g_flat: vec![0.0],
            loss_va: 0.0,
            loss_flat: 0.0,
            epsilon: vec![],
            theta_prime: vec![],
            zero_gradient: false,
            batch_checksums: (0, 0),
            version: base,
        };
        apply_theta_update(&mut m, &d, &cfg(0.0, 0.0)).unwrap();
        // 0.5 - 0.1 * (0.5 * (2 + 4)) = 0.2
        assert!((m.store.params()[0].tensor.data()[0] - 0.2).abs() < 1e-15);
        // stale now
        assert!(matches!(
            apply_theta_update(&mut m, &d, &cfg(0.0, 0.0)),
            Err(Error::StaleGradients { .. })
        ));

        let mut m = quadratic_model(0.5, 0.1);
        let mut zero_lr = cfg(0.0, 0.0);
        zero_lr.lr_theta = 0.0;
        let d = DualGradients {
            version: m.store.version(),
            ..d
        };
        apply_theta_update(&mut m, &d, &zero_lr).unwrap();
        assert_eq!(m.store.params()[0].tensor.data(), &[0.5]);
    }

    #[test]
    fn surrogate_gap_examples() {
        let mut m = quadratic_model(0.33, 0.1);
        let b = quad_batch(1.5, 2.0);
        assert_eq!(compute_surrogate_gap(&mut m, &b, &cfg(0.0, 0.0)).unwrap(), 0.0);

        let gap = compute_surrogate_gap(&mut m, &b, &cfg(0.05, 0.0)).unwrap();
        let (l0, gw, _) = quad_oracle(0.33, 0.1, 1.5, 2.0);
        let (l1, _, _) = quad_oracle(0.33 + 0.05 * gw.signum(), 0.1, 1.5, 2.0);
        assert!((gap - (l1 - l0)).abs() < 1e-12);
        assert_eq!(m.store.params()[0].tensor.data(), &[0.33]);
    }

    #[test]
    fn unquantized_model_is_rejected() {
        let mut store = ParamStore::new();
        let wi = store.add_param(Parameter::new("w", ParamKind::Weight, Tensor::scalar(1.0)));
        let mut g = Graph::new();
        let wn = g.param("w", wi);
        g.sum_squares(wn);
        let mut m = Model::from_parts(store, g, vec![]);
        let b = Batch::untagged(Tensor::scalar(0.0), Target::None);
        assert!(matches!(
            compute_dual_gradients(&mut m, &b, &cfg(0.05, 0.0)),
            Err(Error::NoQuantizers)
        ));
    }
}
