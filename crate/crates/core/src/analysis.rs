//! Gradient gap, loss traces and the analytic capacity model
//! `L(N) = V/N + a·K·N/b`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Precision};
use crate::model::Model;
use crate::params::Binder;
use crate::tensor::Tensor;

/// `‖∇_z L(G(z))|_{z_e} − ∇_z L(G(z))|_{z_q}‖₂` for a task loss
/// `L = mse(G(z), x)`. With a straight-through estimator the gradient that
/// reaches the encoder is the decoder gradient evaluated at `z_q`, so this
/// is the error that estimator introduces.
pub fn gradient_gap_with<F>(precision: Precision, x: &Tensor, z_e: &Tensor, z_q: &Tensor, mut decoder: F) -> Result<f64>
where
    F: FnMut(&mut Graph, NodeId) -> Result<NodeId>,
{
    if z_e.shape() != z_q.shape() {
        return Err(Error::dim("gradient gap", &[z_e.shape(), z_q.shape()]));
    }
    let mut grad_at = |z: &Tensor| -> Result<Vec<f64>> {
        let mut g = Graph::with_precision(precision);
        let zi = g.leaf(z.clone(), true);
        let xi = g.constant(x.clone());
        let x_hat = decoder(&mut g, zi)?;
        let loss = g.mse(x_hat, xi)?;
        g.backward(loss)?;
        let grad = g.grad(zi).unwrap_or(&[]).to_vec();
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(String::from("non-finite decoder gradient in gradient gap")));
        }
        Ok(grad)
    };
    let g1 = grad_at(z_e)?;
    let g2 = grad_at(z_q)?;
    let sq: f64 = g1.iter().zip(&g2).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(libm::sqrt(sq))
}

/// Gradient gap and quantization loss of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapMeasurement {
    pub gap: f64,
    pub quant_loss: f64,
}

/// Gradient gap of `model` on batch `x`, measured at the decoder input:
/// `z_e` is the encoder output and `z_q` what the quantizer feeds the
/// decoder. Deterministic (temperature 1, no Gumbel noise).
pub fn gradient_gap(model: &Model, x: &Tensor) -> Result<GapMeasurement> {
    let fp = model.forward(x, 1.0, None, false)?;
    let z_e = fp.graph.value(fp.z_e).clone();
    let z_q = fp.graph.value(fp.z_hat).clone();
    let quant_loss = fp.parts().quant;
    let batch = x.shape()[0];
    let gap = gradient_gap_with(model.config().precision, x, &z_e, &z_q, |g, z| {
        let mut binder = Binder::new(model.params(), false);
        model.decode(g, &mut binder, z, batch)
    })?;
    Ok(GapMeasurement { gap, quant_loss })
}

/// Which quantizer a trace entry belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TraceSource {
    Codebook(usize),
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GapTrace {
    pub step: u64,
    pub gap: f64,
    pub quant_loss: f64,
    pub source: TraceSource,
}

impl GapTrace {
    pub fn new(step: u64, m: GapMeasurement, source: TraceSource) -> Result<Self> {
        if !m.gap.is_finite() || !(m.gap >= 0.0) {
            return Err(Error::Numeric(format!("gradient gap {} at step {step}", m.gap)));
        }
        Ok(GapTrace { step, gap: m.gap, quant_loss: m.quant_loss, source })
    }
}

/// Parameters of `L(N) = V/N + a·K·N/b`. The appendix constants `a` and
/// `b` are unrelated to the loss weights of the quantizer.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AnalyticModel {
    pub var_v: f64,
    pub complexity_k: f64,
    pub dim_const_a: f64,
    pub capacity_b: f64,
}

impl AnalyticModel {
    pub fn new(var_v: f64, complexity_k: f64, dim_const_a: f64, capacity_b: f64) -> Result<Self> {
        for (name, v) in [("V", var_v), ("K", complexity_k), ("a", dim_const_a), ("b", capacity_b)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Domain(format!("analytic model parameter {name} must be positive, got {v}")));
            }
        }
        Ok(AnalyticModel { var_v, complexity_k, dim_const_a, capacity_b })
    }
}

pub fn analytic_loss(n: f64, model: &AnalyticModel) -> Result<f64> {
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Domain(format!("codebook size must be positive, got {n}")));
    }
    Ok(model.var_v / n + model.dim_const_a * model.complexity_k * n / model.capacity_b)
}

/// Stationary point `sqrt(V·b / (a·K))` of [`analytic_loss`].
pub fn optimal_n(model: &AnalyticModel) -> f64 {
    libm::sqrt(model.var_v * model.capacity_b / (model.dim_const_a * model.complexity_k))
}

/// Least-squares fit of `L(n) = V/n + a·n` (with `K = b = 1`).
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AnalyticFit {
    pub var_v: f64,
    pub dim_const_a: f64,
    /// Root-mean-square residual.
    pub residual: f64,
    /// Residual divided by the root-mean-square loss.
    pub relative_residual: f64,
}

impl AnalyticFit {
    /// The fitted model; fails when a coefficient came out non-positive.
    pub fn model(&self) -> Result<AnalyticModel> {
        AnalyticModel::new(self.var_v, 1.0, self.dim_const_a, 1.0).map_err(|_| {
            Error::Fit(format!("fitted coefficients V={} a={} are not positive", self.var_v, self.dim_const_a))
        })
    }
}

pub fn fit_analytic(points: &[(f64, f64)]) -> Result<AnalyticFit> {
    if points.iter().any(|&(n, l)| !(n > 0.0) || !n.is_finite() || !l.is_finite()) {
        return Err(Error::Fit(String::from("sweep points need positive n and finite losses")));
    }
    let mut ns: Vec<f64> = points.iter().map(|p| p.0).collect();
    ns.sort_by(f64::total_cmp);
    ns.dedup();
    if ns.len() < 3 {
        return Err(Error::Fit(format!("need at least 3 distinct codebook sizes, got {}", ns.len())));
    }
    // Thin QR of the design [1/n, n] by modified Gram-Schmidt.
    let a1: Vec<f64> = points.iter().map(|p| 1.0 / p.0).collect();
    let a2: Vec<f64> = points.iter().map(|p| p.0).collect();
    let y: Vec<f64> = points.iter().map(|p| p.1).collect();
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    let r11 = libm::sqrt(dot(&a1, &a1));
    let q1: Vec<f64> = a1.iter().map(|v| v / r11).collect();
    let r12 = dot(&q1, &a2);
    let rest: Vec<f64> = a2.iter().zip(&q1).map(|(a, q)| a - r12 * q).collect();
    let r22 = libm::sqrt(dot(&rest, &rest));
    if !(r22 > 1e-12 * libm::sqrt(dot(&a2, &a2))) {
        return Err(Error::Fit(String::from("degenerate design")));
    }
    let q2: Vec<f64> = rest.iter().map(|v| v / r22).collect();
    let a = dot(&q2, &y) / r22;
    let v = (dot(&q1, &y) - r12 * a) / r11;
    let m = points.len() as f64;
    let sse: f64 = points.iter().map(|&(n, l)| (v / n + a * n - l) * (v / n + a * n - l)).sum();
    let residual = libm::sqrt(sse / m);
    let scale = libm::sqrt(dot(&y, &y) / m);
    let relative_residual = if scale > 0.0 { residual / scale } else { residual };
    Ok(AnalyticFit { var_v: v, dim_const_a: a, residual, relative_residual })
}
