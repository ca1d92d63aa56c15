//! Adaptive selection among a pool of quantizers that share one capacity.
//!
//! Every quantizer in the pool sees every position. Attention of the
//! flattened encoder output against per-codebook keys yields one logit per
//! codebook, a hard Gumbel-Softmax turns those into a one-hot choice, and a
//! batched matrix product picks the chosen candidate for each position.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Gumbel};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{Binder, ParamStore};
use crate::rng::{normal_tensor, Rng};
use crate::tensor::Tensor;
use crate::vq::{CodebookSpec, LayerOutput, ProjectionInit, QuantLayer};

/// All power-of-two factorizations `[N, D]` of `w` with `N > D`, ascending in `N`.
pub fn enumerate_structures(w: usize) -> Result<Vec<CodebookSpec>> {
    if w < 2 || !w.is_power_of_two() {
        return Err(Error::Config(format!("capacity must be a power of two greater than 1, got {w}")));
    }
    let mut specs: Vec<CodebookSpec> = (0..=w.trailing_zeros())
        .map(|p| 1usize << p)
        .map(|d| CodebookSpec { n: w / d, d })
        .filter(|s| s.n > s.d)
        .collect();
    specs.sort_by_key(|s| s.n);
    Ok(specs)
}

/// How per-head attention turns into one logit per codebook.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreMode {
    /// Per-head attention outputs over the values, mapped to `m` logits by
    /// a learned affine.
    #[default]
    AttentionValues,
    /// Scaled `Q·Kᵀ` per head, averaged across heads; values unused.
    QueryKeyOnly,
}

/// How selection scores weight the candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Selection {
    /// One-hot forward values with soft gradients.
    #[default]
    Hard,
    /// The relaxed distribution itself; the loss is then differentiable in
    /// the attention parameters.
    Soft,
}

/// Initialization of the attention projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionInit {
    Random,
    /// Identity `Q`, `K`, `V` head maps (single head only).
    Identity,
}

/// A pool of `m` independent quantization layers plus attention parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodebookPool {
    layers: Vec<QuantLayer>,
    hidden: usize,
    num_heads: usize,
    mode: ScoreMode,
    selection: Selection,
}

const KEYS: &str = "pool.keys";
const VALUES: &str = "pool.values";

impl CodebookPool {
    pub fn new(specs: &[CodebookSpec], hidden: usize, num_heads: usize, mode: ScoreMode) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Config(String::from("codebook pool is empty")));
        }
        if num_heads == 0 || !hidden.is_multiple_of(num_heads) {
            return Err(Error::Config(format!("{num_heads} heads do not divide hidden width {hidden}")));
        }
        let w = specs[0].capacity();
        if let Some(s) = specs.iter().find(|s| s.capacity() != w) {
            return Err(Error::Config(format!("pool structures must share capacity {w}, found {s}")));
        }
        let layers =
            specs.iter().enumerate().map(|(i, &spec)| QuantLayer::new(format!("q{i}"), spec, hidden)).collect();
        Ok(CodebookPool { layers, hidden, num_heads, mode, selection: Selection::Hard })
    }

    pub fn with_selection(mut self, selection: Selection) -> Self {
        self.selection = selection;
        self
    }

    pub fn selection(&self) -> Selection {
        self.selection
    }

    pub fn layers(&self) -> &[QuantLayer] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn score_mode(&self) -> ScoreMode {
        self.mode
    }

    fn head_width(&self) -> usize {
        self.hidden / self.num_heads
    }

    pub fn init_params(
        &self,
        store: &mut ParamStore,
        projections: ProjectionInit,
        attention: AttentionInit,
        rng: &mut Rng,
    ) -> Result<()> {
        let (m, h, dh) = (self.len(), self.hidden, self.head_width());
        for layer in &self.layers {
            layer.init_params(store, projections, rng)?;
        }
        let key_std = libm::sqrt(1.0 / h as f64);
        store.insert(KEYS, normal_tensor(rng, &[m, h], key_std));
        store.insert(VALUES, normal_tensor(rng, &[m, h], key_std));
        if attention == AttentionInit::Identity && self.num_heads != 1 {
            return Err(Error::Config(String::from("identity attention maps need a single head")));
        }
        for head in 0..self.num_heads {
            for part in ["q", "k", "v"] {
                let t = match attention {
                    AttentionInit::Identity => Tensor::eye(h),
                    AttentionInit::Random => normal_tensor(rng, &[h, dh], key_std),
                };
                store.insert(format!("pool.head{head}.{part}"), t);
            }
        }
        store.insert("pool.out.w", normal_tensor(rng, &[h, m], key_std));
        store.insert("pool.out.b", Tensor::zeros(&[m]));
        Ok(())
    }

    /// One logit per codebook for every row of `q` (`T×H → T×m`).
    pub fn attention_logits(&self, g: &mut Graph, binder: &mut Binder, q: NodeId) -> Result<NodeId> {
        let qs = g.shape(q).to_vec();
        if qs.len() != 2 || qs[1] != self.hidden {
            return Err(Error::dim("attention_logits", &[&qs, &[self.len(), self.hidden]]));
        }
        let keys = binder.get(g, KEYS)?;
        let scale = 1.0 / libm::sqrt(self.head_width() as f64);
        let mut head_scores = Vec::with_capacity(self.num_heads);
        let mut head_outputs = Vec::with_capacity(self.num_heads);
        for head in 0..self.num_heads {
            let wq = binder.get(g, &format!("pool.head{head}.q"))?;
            let wk = binder.get(g, &format!("pool.head{head}.k"))?;
            let qh = g.affine(q, wq, None)?;
            let kh = g.affine(keys, wk, None)?;
            let kt = g.transpose(kh)?;
            let raw = g.matmul(qh, kt)?;
            let scores = g.mul_scalar(raw, scale)?;
            match self.mode {
                ScoreMode::QueryKeyOnly => head_scores.push(scores),
                ScoreMode::AttentionValues => {
                    let values = binder.get(g, VALUES)?;
                    let wv = binder.get(g, &format!("pool.head{head}.v"))?;
                    let vh = g.affine(values, wv, None)?;
                    let weights = g.softmax(scores)?;
                    head_outputs.push(g.matmul(weights, vh)?);
                }
            }
        }
        match self.mode {
            ScoreMode::QueryKeyOnly => {
                let mut total = head_scores[0];
                for &s in &head_scores[1..] {
                    total = g.add(total, s)?;
                }
                g.mul_scalar(total, 1.0 / self.num_heads as f64)
            }
            ScoreMode::AttentionValues => {
                let joined = g.concat(&head_outputs, 1)?;
                let w = binder.get(g, "pool.out.w")?;
                let b = binder.get(g, "pool.out.b")?;
                g.affine(joined, w, Some(b))
            }
        }
    }
}

/// Output of [`gumbel_softmax`].
#[derive(Debug, Clone)]
pub struct GumbelOutput {
    /// Selection weights: one-hot rows in hard mode, soft rows otherwise.
    pub scores: NodeId,
    /// The relaxed distribution `softmax((logits + g)/τ)`.
    pub soft: NodeId,
    /// Per-row argmax of the perturbed logits, lowest index on ties.
    pub selections: Vec<usize>,
}

/// Gumbel-Softmax over the rows of `logits`. Passing `None` for `noise`
/// disables the Gumbel perturbation.
pub fn gumbel_softmax(
    g: &mut Graph,
    logits: NodeId,
    tau: f64,
    hard: bool,
    noise: Option<&mut Rng>,
) -> Result<GumbelOutput> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 {
        return Err(Error::dim("gumbel_softmax", &[&shape]));
    }
    let perturbed = match noise {
        Some(rng) => {
            let dist = Gumbel::new(0.0, 1.0).expect("standard Gumbel");
            let draws = (0..shape[0] * shape[1]).map(|_| dist.sample(rng)).collect();
            let n = g.constant(Tensor::new(&shape, draws)?);
            g.add(logits, n)?
        }
        None => logits,
    };
    let scaled = g.mul_scalar(perturbed, 1.0 / tau)?;
    let soft = g.softmax(scaled)?;
    let m = shape[1];
    let selections: Vec<usize> = g
        .value(perturbed)
        .data()
        .chunks(m)
        .map(|row| row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best }))
        .collect();
    let scores = if hard {
        let mut one_hot = vec![0.0; shape[0] * m];
        for (t, &k) in selections.iter().enumerate() {
            one_hot[t * m + k] = 1.0;
        }
        let hard_node = g.constant(Tensor::new(&shape, one_hot)?);
        g.straight_through(soft, hard_node)?
    } else {
        soft
    };
    Ok(GumbelOutput { scores, soft, selections })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Phase {
    Training,
    Validation,
}

/// A scheduled temperature. `clamped` is set when the batch index ran past
/// the iteration budget and the floor of 1 was applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature {
    pub value: f64,
    pub clamped: bool,
}

/// Linear annealing `(iterations − batch_index) + 1` during training, fixed
/// at 1 for validation.
pub fn temperature(iterations: u64, batch_index: u64, phase: Phase) -> Temperature {
    match phase {
        Phase::Validation => Temperature { value: 1.0, clamped: false },
        Phase::Training if batch_index > iterations => {
            log::warn!("batch index {batch_index} exceeds {iterations} iterations; temperature clamped to 1");
            Temperature { value: 1.0, clamped: true }
        }
        Phase::Training => Temperature { value: (iterations - batch_index) as f64 + 1.0, clamped: false },
    }
}

/// Per-step count of hard selections per codebook.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SelectionRecord {
    pub step: u64,
    pub counts: Vec<u64>,
    pub temperature: f64,
}

impl SelectionRecord {
    pub fn from_selections(step: u64, selections: &[usize], m: usize, temperature: f64) -> Self {
        let mut counts = vec![0; m];
        for &s in selections {
            counts[s] += 1;
        }
        SelectionRecord { step, counts, temperature }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Nodes produced by [`adaptive_quantize`].
#[derive(Debug, Clone)]
pub struct AdaptiveOutput {
    /// Selected candidate per position, `T×H`.
    pub z_q: NodeId,
    /// `(1/m)·Σᵢ vq_lossᵢ` over every quantizer in the pool.
    pub extra_loss: NodeId,
    pub layers: Vec<LayerOutput>,
    pub gumbel: GumbelOutput,
    pub logits: NodeId,
}

impl AdaptiveOutput {
    pub fn record(&self, step: u64, temperature: f64) -> SelectionRecord {
        SelectionRecord::from_selections(step, &self.gumbel.selections, self.layers.len(), temperature)
    }
}

/// Runs every quantizer of the pool on `z_e` (`T×H`) and combines the
/// candidates with Gumbel-Softmax selection scores (hard by default).
#[allow(clippy::too_many_arguments)]
pub fn adaptive_quantize(
    g: &mut Graph,
    binder: &mut Binder,
    pool: &CodebookPool,
    z_e: NodeId,
    tables: &[NodeId],
    tau: f64,
    alpha: f64,
    beta: f64,
    noise: Option<&mut Rng>,
) -> Result<AdaptiveOutput> {
    if pool.is_empty() {
        return Err(Error::Config(String::from("codebook pool is empty")));
    }
    if tables.len() != pool.len() {
        return Err(Error::Contract(format!("{} codebooks for a pool of {}", tables.len(), pool.len())));
    }
    let zs = g.shape(z_e).to_vec();
    if zs.len() != 2 || zs[1] != pool.hidden() {
        return Err(Error::dim("adaptive_quantize", &[&zs, &[pool.hidden()]]));
    }
    let (t, h, m) = (zs[0], zs[1], pool.len());

    let mut layers = Vec::with_capacity(m);
    let mut stacked = Vec::with_capacity(m);
    for (layer, &table) in pool.layers().iter().zip(tables) {
        let out = layer.forward(g, binder, z_e, table, alpha, beta)?;
        stacked.push(g.reshape(out.output, &[t, 1, h])?);
        layers.push(out);
    }
    let candidates = g.concat(&stacked, 1)?;

    let logits = pool.attention_logits(g, binder, z_e)?;
    let gumbel = gumbel_softmax(g, logits, tau, pool.selection == Selection::Hard, noise)?;
    let weights = g.reshape(gumbel.scores, &[t, 1, m])?;
    let picked = g.bmm(weights, candidates)?;
    let z_q = g.reshape(picked, &[t, h])?;

    let mut total = layers[0].quant.vq_loss;
    for layer in &layers[1..] {
        total = g.add(total, layer.quant.vq_loss)?;
    }
    let extra_loss = g.mul_scalar(total, 1.0 / m as f64)?;
    Ok(AdaptiveOutput { z_q, extra_loss, layers, gumbel, logits })
}

/// Selection frequencies over consecutive windows of `window` records.
pub fn usage_histogram(records: &[SelectionRecord], window: usize) -> Result<Vec<Vec<f64>>> {
    if window == 0 {
        return Err(Error::Config(String::from("usage window must be at least 1")));
    }
    let mut out = Vec::new();
    for chunk in records.chunks(window) {
        let m = chunk.iter().map(|r| r.counts.len()).max().unwrap_or(0);
        let mut totals = vec![0u64; m];
        for r in chunk {
            totals.iter_mut().zip(&r.counts).for_each(|(a, c)| *a += c);
        }
        let sum: u64 = totals.iter().sum();
        if sum == 0 {
            return Err(Error::Contract(String::from("selection window with no quantized positions")));
        }
        out.push(totals.iter().map(|&c| c as f64 / sum as f64).collect());
    }
    Ok(out)
}
