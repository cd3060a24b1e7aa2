//! Symmetric uniform fake quantization with a learnable step size.
//!
//! A quantizer maps `v` to `s * round(clip(v / s, l, u))`, where the integer
//! bounds `(l, u)` depend on the bit width and on whether the quantizer guards
//! weights (signed lattice) or rectified activations (unsigned lattice).
//! Rounding resolves ties to the nearest even integer.
//!
//! Gradients follow the straight-through estimator for the input and the
//! learned-step-size rule for the scale.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower bound applied to every scale after an update.
pub const SCALE_FLOOR: f64 = 1e-8;

/// Number of candidates in the MSE scale search.
pub const MSE_GRID_POINTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantKind {
    Weight,
    Activation,
}

impl QuantKind {
    pub fn tag(self) -> &'static str {
        match self {
            QuantKind::Weight => "w",
            QuantKind::Activation => "a",
        }
    }
}

/// Bit width, kind and derived integer clip bounds of one quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    bits: u32,
    kind: QuantKind,
    lower: i64,
    upper: i64,
}

impl QuantSpec {
    pub fn new(bits: u32, kind: QuantKind) -> Result<Self> {
        let (lower, upper) = bounds(bits, kind)?;
        Ok(Self {
            bits,
            kind,
            lower,
            upper,
        })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn kind(&self) -> QuantKind {
        self.kind
    }

    pub fn lower(&self) -> i64 {
        self.lower
    }

    pub fn upper(&self) -> i64 {
        self.upper
    }

    fn lu(&self) -> (f64, f64) {
        (self.lower as f64, self.upper as f64)
    }
}

/// Integer clip bounds for a `bits`-wide quantizer.
pub fn bounds(bits: u32, kind: QuantKind) -> Result<(i64, i64)> {
    if !(2..=32).contains(&bits) {
        return Err(Error::InvalidBits(bits));
    }
    Ok(match kind {
        QuantKind::Activation => (0, (1i64 << bits) - 1),
        QuantKind::Weight => (-(1i64 << (bits - 1)), (1i64 << (bits - 1)) - 1),
    })
}

/// A learnable step size, tagged with the layer it quantizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleFactor {
    pub id: String,
    pub spec: QuantSpec,
    value: f64,
}

impl ScaleFactor {
    pub fn new(id: impl Into<String>, spec: QuantSpec, value: f64) -> Result<Self> {
        if !value.is_finite() || value <= 0.0 {
            return Err(Error::NonPositiveScale(value));
        }
        Ok(Self {
            id: id.into(),
            spec,
            value,
        })
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    /// Sets the scale, flooring it at [`SCALE_FLOOR`].
    pub fn set(&mut self, value: f64) {
        self.value = if value.is_nan() {
            SCALE_FLOOR
        } else {
            value.max(SCALE_FLOOR)
        };
    }

    /// `s <- max(s - step, SCALE_FLOOR)`.
    pub fn descend(&mut self, step: f64) {
        self.set(self.value - step);
    }
}

#[inline]
fn quantize_one(v: f64, s: f64, l: f64, u: f64) -> f64 {
    s * (v / s).clamp(l, u).round_ties_even()
}

#[inline]
fn in_range(x: f64, l: f64, u: f64) -> bool {
    l <= x && x <= u
}

/// Elementwise fake quantization of a raw slice.
pub fn fake_quantize_slice(values: &[f64], scale: f64, spec: &QuantSpec) -> Vec<f64> {
    let (l, u) = spec.lu();
    values.iter().map(|&v| quantize_one(v, scale, l, u)).collect()
}

pub fn fake_quantize(v: &Tensor, s: &ScaleFactor) -> Result<Tensor> {
    if !v.all_finite() {
        return Err(Error::NonFinite("fake_quantize input".into()));
    }
    if s.value.is_nan() || s.value <= 0.0 {
        return Err(Error::NonPositiveScale(s.value));
    }
    Ok(Tensor::from_parts(
        v.shape().to_vec(),
        fake_quantize_slice(v.data(), s.value, &s.spec),
    ))
}

/// Straight-through input gradient: upstream masked by `l <= v/s <= u`.
pub fn ste_input_grad(upstream: &Tensor, v: &Tensor, s: &ScaleFactor) -> Result<Tensor> {
    if upstream.shape() != v.shape() {
        return Err(Error::ShapeMismatch {
            node: s.id.clone(),
            detail: format!("upstream {:?} vs input {:?}", upstream.shape(), v.shape()),
        });
    }
    let (l, u) = s.spec.lu();
    let data = upstream
        .data()
        .iter()
        .zip(v.data())
        .map(|(&g, &x)| if in_range(x / s.value, l, u) { g } else { 0.0 })
        .collect();
    Ok(Tensor::from_parts(v.shape().to_vec(), data))
}

/// Per-element derivative of `Q(v; s)` with respect to `s`.
#[inline]
pub(crate) fn scale_partial(v: f64, s: f64, l: f64, u: f64) -> f64 {
    let x = v / s;
    let q = x.clamp(l, u).round_ties_even();
    if in_range(x, l, u) {
        q - x
    } else {
        q
    }
}

/// Raw accumulation `sum_i upstream_i * dQ(v_i)/ds` over slices.
pub(crate) fn scale_grad_slice(upstream: &[f64], values: &[f64], s: f64, spec: &QuantSpec) -> f64 {
    let (l, u) = spec.lu();
    upstream
        .iter()
        .zip(values)
        .map(|(&g, &v)| g * scale_partial(v, s, l, u))
        .sum()
}

/// Factor `1 / sqrt(N * u)` of the learned-step-size gradient normalization.
pub fn lsq_grad_factor(n_elements: usize, spec: &QuantSpec) -> f64 {
    1.0 / ((n_elements as f64) * spec.upper() as f64).sqrt()
}

/// Gradient of the loss with respect to the scale.
///
/// `normalize` applies the `1/sqrt(N*u)` factor; it is off in the default
/// training configuration.
pub fn scale_grad(upstream: &Tensor, v: &Tensor, s: &ScaleFactor, normalize: bool) -> Result<f64> {
    if upstream.shape() != v.shape() {
        return Err(Error::ShapeMismatch {
            node: s.id.clone(),
            detail: format!("upstream {:?} vs input {:?}", upstream.shape(), v.shape()),
        });
    }
    if s.value.is_nan() || s.value <= 0.0 {
        return Err(Error::NonPositiveScale(s.value));
    }
    let g = scale_grad_slice(upstream.data(), v.data(), s.value, &s.spec);
    Ok(if normalize {
        g * lsq_grad_factor(v.len(), &s.spec)
    } else {
        g
    })
}

/// Outcome of [`mse_init_scale`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleInit {
    pub scale: ScaleFactor,
    pub mse: f64,
    /// Set when every input value was zero and the scale fell back to the floor.
    pub degenerate: bool,
}

/// The `i`-th multiplier of the MSE search grid, evenly spaced over `[0.1, 1.2]`.
///
/// Written as `(99 + 11 i) / 990` so the grid hits 1.0 exactly.
pub fn mse_grid_multiplier(i: usize) -> f64 {
    (99 + 11 * i) as f64 / 990.0
}

pub fn quantization_mse(values: &[f64], scale: f64, spec: &QuantSpec) -> f64 {
    let (l, u) = spec.lu();
    values
        .iter()
        .map(|&v| {
            let e = v - quantize_one(v, scale, l, u);
            e * e
        })
        .sum::<f64>()
        / values.len() as f64
}

/// Picks the scale with the lowest quantization MSE on a fixed candidate grid
/// `c * max|v| / u`; ties go to the smaller scale.
pub fn mse_init_scale(values: &[f64], spec: QuantSpec, id: impl Into<String>) -> Result<ScaleInit> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("mse_init_scale needs values".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mse_init_scale input".into()));
    }
    let id = id.into();
    let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs == 0.0 {
        log::warn!("all-zero calibration values for `{id}`, scale set to floor");
        return Ok(ScaleInit {
            scale: ScaleFactor::new(id, spec, SCALE_FLOOR)?,
            mse: 0.0,
            degenerate: true,
        });
    }
    let u = spec.upper() as f64;
    let mut best: Option<(f64, f64)> = None;
    for i in 0..MSE_GRID_POINTS {
        let s = mse_grid_multiplier(i) * max_abs / u;
        let mse = quantization_mse(values, s, &spec);
        // Candidates increase with i, so strict `<` keeps the smaller scale on ties.
        if best.is_none_or(|(_, m)| mse < m) {
            best = Some((s, mse));
        }
    }
    let (s, mse) = best.expect("grid is non-empty");
    Ok(ScaleInit {
        scale: ScaleFactor::new(id, spec, s.max(SCALE_FLOOR))?,
        mse,
        degenerate: false,
    })
}
