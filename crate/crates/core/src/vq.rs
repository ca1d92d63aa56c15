//! Fixed-codebook vector quantization.
//!
//! A quantization layer projects hidden vectors into the codebook's
//! embedding space, snaps each row to its nearest codeword, and projects the
//! straight-through output back to the hidden width. Codewords learn either
//! from the codebook loss gradient or from exponential moving averages of
//! the vectors assigned to them.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{Binder, ParamStore};
use crate::rng::{normal_tensor, Rng};
use crate::tensor::Tensor;

pub const DEFAULT_LAPLACE_EPS: f64 = 1e-5;

/// Codebook structure `[N, D]`: `n` codewords of width `d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CodebookSpec {
    pub n: usize,
    pub d: usize,
}

impl CodebookSpec {
    pub fn new(n: usize, d: usize) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::Config(format!("codebook extents must be positive, got [{n}, {d}]")));
        }
        Ok(CodebookSpec { n, d })
    }

    pub fn capacity(&self) -> usize {
        self.n * self.d
    }
}

impl core::fmt::Display for CodebookSpec {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "[{},{}]", self.n, self.d)
    }
}

/// How [`Codebook::ema_update`] moves codewords.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum EmaForm {
    /// Decayed cluster sizes and sums with Laplace-smoothed normalization.
    #[default]
    Conventional,
    /// `c ← (1 − γ)·c + γ·z` applied once per assigned vector, in order.
    Direct,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    embeddings: Tensor,
    ema_cluster_size: Vec<f64>,
    ema_embed_sum: Vec<f64>,
    gamma: f64,
    laplace_eps: f64,
}

impl Codebook {
    /// Codewords drawn i.i.d. from `normal(0, 1/D)`.
    pub fn random(spec: CodebookSpec, gamma: f64, rng: &mut Rng) -> Result<Self> {
        let std = libm::sqrt(1.0 / spec.d as f64);
        Self::from_embeddings(normal_tensor(rng, &[spec.n, spec.d], std), gamma)
    }

    /// The EMA state starts as if each codeword had been seen once at its
    /// current position, so running means equal the initial codewords.
    pub fn from_embeddings(embeddings: Tensor, gamma: f64) -> Result<Self> {
        if embeddings.rank() != 2 {
            return Err(Error::dim("codebook", &[embeddings.shape()]));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Config(format!("EMA decay must lie in (0, 1), got {gamma}")));
        }
        if !embeddings.is_finite() {
            return Err(Error::Numeric(String::from("codebook initialization")));
        }
        let n = embeddings.rows();
        Ok(Codebook {
            ema_cluster_size: vec![1.0; n],
            ema_embed_sum: embeddings.data().to_vec(),
            embeddings,
            gamma,
            laplace_eps: DEFAULT_LAPLACE_EPS,
        })
    }

    /// Restores a codebook with explicit EMA state (checkpoint loading).
    pub fn from_parts(
        embeddings: Tensor,
        ema_cluster_size: Vec<f64>,
        ema_embed_sum: Vec<f64>,
        gamma: f64,
        laplace_eps: f64,
    ) -> Result<Self> {
        let mut cb = Self::from_embeddings(embeddings, gamma)?;
        if ema_cluster_size.len() != cb.ema_cluster_size.len() || ema_embed_sum.len() != cb.ema_embed_sum.len() {
            return Err(Error::dim(
                "codebook",
                &[cb.embeddings.shape(), &[ema_cluster_size.len()], &[ema_embed_sum.len()]],
            ));
        }
        if ema_cluster_size.iter().any(|&c| !(c >= 0.0)) || !(laplace_eps > 0.0) {
            return Err(Error::Contract(String::from("EMA cluster sizes must be non-negative")));
        }
        cb.ema_cluster_size = ema_cluster_size;
        cb.ema_embed_sum = ema_embed_sum;
        cb.laplace_eps = laplace_eps;
        Ok(cb)
    }

    pub fn with_laplace_eps(mut self, eps: f64) -> Self {
        self.laplace_eps = eps;
        self
    }

    pub fn spec(&self) -> CodebookSpec {
        CodebookSpec { n: self.embeddings.rows(), d: self.embeddings.cols() }
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn embeddings_mut(&mut self) -> &mut Tensor {
        &mut self.embeddings
    }

    pub fn ema_cluster_size(&self) -> &[f64] {
        &self.ema_cluster_size
    }

    pub fn ema_embed_sum(&self) -> &[f64] {
        &self.ema_embed_sum
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn laplace_eps(&self) -> f64 {
        self.laplace_eps
    }

    /// Moves codewords toward the vectors assigned to them.
    pub fn ema_update(&mut self, z_rows: &Tensor, indices: &[usize], form: EmaForm) -> Result<()> {
        let CodebookSpec { n, d } = self.spec();
        if z_rows.rank() != 2 || z_rows.cols() != d || z_rows.rows() != indices.len() {
            return Err(Error::dim("ema_update", &[z_rows.shape(), &[indices.len()], &[n, d]]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Contract(format!("assignment index {bad} out of range for {n} codewords")));
        }
        let gamma = self.gamma;
        match form {
            EmaForm::Direct => {
                for (t, &j) in indices.iter().enumerate() {
                    let z = z_rows.row(t);
                    for (c, &zv) in self.embeddings.row_mut(j).iter_mut().zip(z) {
                        *c = (1.0 - gamma) * *c + gamma * zv;
                    }
                }
            }
            EmaForm::Conventional => {
                let mut counts = vec![0.0; n];
                let mut sums = vec![0.0; n * d];
                for (t, &j) in indices.iter().enumerate() {
                    counts[j] += 1.0;
                    sums[j * d..(j + 1) * d].iter_mut().zip(z_rows.row(t)).for_each(|(s, z)| *s += z);
                }
                for (size, count) in self.ema_cluster_size.iter_mut().zip(&counts) {
                    *size = gamma * *size + (1.0 - gamma) * count;
                }
                for (acc, s) in self.ema_embed_sum.iter_mut().zip(&sums) {
                    *acc = gamma * *acc + (1.0 - gamma) * s;
                }
                let total: f64 = self.ema_cluster_size.iter().sum();
                let eps = self.laplace_eps;
                for j in 0..n {
                    let smoothed = (self.ema_cluster_size[j] + eps) / (total + n as f64 * eps) * total;
                    let sum = &self.ema_embed_sum[j * d..(j + 1) * d];
                    for (c, s) in self.embeddings.row_mut(j).iter_mut().zip(sum) {
                        *c = s / smoothed;
                    }
                }
            }
        }
        if !self.embeddings.is_finite() {
            return Err(Error::Numeric(String::from("ema_update")));
        }
        Ok(())
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest codeword for every row; ties go to the lowest index.
pub fn nearest_indices(z_rows: &Tensor, codebook: &Codebook) -> Result<Vec<usize>> {
    nearest_in(z_rows, codebook.embeddings())
}

pub(crate) fn nearest_in(z_rows: &Tensor, embeddings: &Tensor) -> Result<Vec<usize>> {
    let d = embeddings.cols();
    if z_rows.rank() != 2 || z_rows.cols() != d {
        return Err(Error::dim("nearest_indices", &[z_rows.shape(), embeddings.shape()]));
    }
    let out = (0..z_rows.rows())
        .map(|t| {
            let z = z_rows.row(t);
            let mut best = (0, f64::INFINITY);
            for (j, c) in embeddings.data().chunks(d).enumerate() {
                let dist = squared_distance(z, c);
                if dist < best.1 {
                    best = (j, dist);
                }
            }
            best.0
        })
        .collect();
    Ok(out)
}

/// Nodes produced by [`quantize`].
#[derive(Debug, Clone)]
pub struct QuantizeOutput {
    /// Gathered codewords, `T×D`.
    pub z_q: NodeId,
    /// Straight-through output: value of `z_q`, gradient to `z_e`.
    pub output: NodeId,
    pub indices: Vec<usize>,
    /// Mean of `‖sg[z_e] − z_q‖²` over elements.
    pub codebook_loss: NodeId,
    /// Mean of `‖z_e − sg[z_q]‖²` over elements.
    pub commitment_loss: NodeId,
    /// `β·(codebook_loss + α·commitment_loss)`.
    pub vq_loss: NodeId,
}

/// Quantizes the rows of `z_e` against the codebook node `table` (`N×D`).
pub fn quantize(g: &mut Graph, z_e: NodeId, table: NodeId, alpha: f64, beta: f64) -> Result<QuantizeOutput> {
    if !(alpha >= 0.0) || !(beta >= 0.0) {
        return Err(Error::Config(format!("alpha and beta must be non-negative, got {alpha}, {beta}")));
    }
    if g.shape(z_e).len() != 2 || g.shape(z_e)[0] == 0 {
        return Err(Error::Contract(format!("quantize expects a non-empty T×D batch, got {:?}", g.shape(z_e))));
    }
    let indices = nearest_in(g.value(z_e), g.value(table))?;
    let z_q = g.gather_rows(table, &indices)?;
    let output = straight_through(g, z_e, z_q)?;
    let ze_detached = g.detach(z_e)?;
    let zq_detached = g.detach(z_q)?;
    let codebook_loss = g.mse(ze_detached, z_q)?;
    let commitment_loss = g.mse(z_e, zq_detached)?;
    let weighted = g.mul_scalar(commitment_loss, alpha)?;
    let inner = g.add(codebook_loss, weighted)?;
    let vq_loss = g.mul_scalar(inner, beta)?;
    Ok(QuantizeOutput { z_q, output, indices, codebook_loss, commitment_loss, vq_loss })
}

/// Forward value `z_q`, backward gradient copied to `z_e`.
pub fn straight_through(g: &mut Graph, z_e: NodeId, z_q: NodeId) -> Result<NodeId> {
    g.straight_through(z_e, z_q)
}

/// How a quantization layer's projection maps are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionInit {
    /// Weights `normal(0, 1/fan_in)`, zero bias.
    Random,
    /// Identity weights, zero bias; requires `hidden == d`.
    Identity,
}

/// One quantizer: projections `H → D` and `D → H` around a codebook.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantLayer {
    pub spec: CodebookSpec,
    pub hidden: usize,
    prefix: String,
}

/// Nodes produced by [`QuantLayer::forward`].
#[derive(Debug, Clone)]
pub struct LayerOutput {
    /// Quantizer input in embedding space, `T×D`.
    pub projected: NodeId,
    pub quant: QuantizeOutput,
    /// Straight-through output projected back to `T×H`.
    pub output: NodeId,
}

impl QuantLayer {
    pub fn new(prefix: impl Into<String>, spec: CodebookSpec, hidden: usize) -> Self {
        QuantLayer { spec, hidden, prefix: prefix.into() }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init_params(&self, store: &mut ParamStore, init: ProjectionInit, rng: &mut Rng) -> Result<()> {
        let (h, d) = (self.hidden, self.spec.d);
        let (w_in, w_out) = match init {
            ProjectionInit::Identity => {
                if h != d {
                    return Err(Error::Config(format!("identity projections need H == D, got {h} and {d}")));
                }
                (Tensor::eye(h), Tensor::eye(d))
            }
            ProjectionInit::Random => (
                normal_tensor(rng, &[h, d], libm::sqrt(1.0 / h as f64)),
                normal_tensor(rng, &[d, h], libm::sqrt(1.0 / d as f64)),
            ),
        };
        store.insert(self.name("in.w"), w_in);
        store.insert(self.name("in.b"), Tensor::zeros(&[d]));
        store.insert(self.name("out.w"), w_out);
        store.insert(self.name("out.b"), Tensor::zeros(&[h]));
        Ok(())
    }

    /// Affine map `T×H → T×D`.
    pub fn project_in(&self, g: &mut Graph, binder: &mut Binder, hidden: NodeId) -> Result<NodeId> {
        let w = binder.get(g, &self.name("in.w"))?;
        let b = binder.get(g, &self.name("in.b"))?;
        g.affine(hidden, w, Some(b))
    }

    /// Affine map `T×D → T×H`.
    pub fn project_out(&self, g: &mut Graph, binder: &mut Binder, quantized: NodeId) -> Result<NodeId> {
        let w = binder.get(g, &self.name("out.w"))?;
        let b = binder.get(g, &self.name("out.b"))?;
        g.affine(quantized, w, Some(b))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        hidden: NodeId,
        table: NodeId,
        alpha: f64,
        beta: f64,
    ) -> Result<LayerOutput> {
        let projected = self.project_in(g, binder, hidden)?;
        let quant = quantize(g, projected, table, alpha, beta)?;
        let output = self.project_out(g, binder, quant.output)?;
        Ok(LayerOutput { projected, quant, output })
    }
}
