//! Desk-scale VQ autoencoder: encoder, quantizer (none, fixed or adaptive),
//! decoder, total loss and Adam training.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Precision};
use crate::params::{Binder, ParamStore};
use crate::pool::{adaptive_quantize, enumerate_structures, AttentionInit, CodebookPool, ScoreMode, SelectionRecord};
use crate::rng::{indexed_stream, normal_tensor, stream, Rng, Stream};
use crate::tensor::Tensor;
use crate::vq::{Codebook, CodebookSpec, EmaForm, ProjectionInit, QuantLayer, DEFAULT_LAPLACE_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum EncoderArch {
    /// `M → H → H` with one ReLU; one latent position per sample.
    #[default]
    Dense,
    /// Two stride-2 3×3 convolutions; one latent position per grid cell.
    SmallConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum QuantizerConfig {
    /// No quantizer: a plain autoencoder.
    None,
    Fixed {
        n: usize,
        d: usize,
    },
    /// Pool of every `[N, D]` structure with `N·D = capacity` and `N > D`.
    Adaptive {
        capacity: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ModelConfig {
    pub encoder_arch: EncoderArch,
    /// Per-sample input extents: `[M]` for dense, `[C, H, W]` for conv.
    pub input_shape: Vec<usize>,
    /// Width `H` of each latent position.
    pub num_hiddens: usize,
    /// Intermediate channel count of the conv encoder and decoder.
    pub conv_channels: usize,
    pub quantizer: QuantizerConfig,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub use_ema: bool,
    pub ema_form: EmaForm,
    pub learning_rate: f64,
    pub seed: u64,
    pub num_heads: usize,
    pub scores_qk_only: bool,
    pub laplace_eps: f64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_arch: EncoderArch::Dense,
            input_shape: vec![16],
            num_hiddens: 32,
            conv_channels: 16,
            quantizer: QuantizerConfig::Adaptive { capacity: 64 },
            alpha: 0.25,
            beta: 1.0,
            gamma: 0.99,
            use_ema: true,
            ema_form: EmaForm::Conventional,
            learning_rate: 1e-4,
            seed: 0,
            num_heads: 2,
            scores_qk_only: false,
            laplace_eps: DEFAULT_LAPLACE_EPS,
            precision: Precision::Double,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return bad(format!("alpha and beta must be non-negative, got {} and {}", self.alpha, self.beta));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning rate must be non-negative, got {}", self.learning_rate));
        }
        if !(self.laplace_eps > 0.0) {
            return bad(format!("laplace_eps must be positive, got {}", self.laplace_eps));
        }
        if self.num_hiddens == 0 || self.input_shape.contains(&0) {
            return bad(String::from("extents must be positive"));
        }
        match self.encoder_arch {
            EncoderArch::Dense if self.input_shape.len() != 1 => {
                return bad(format!("dense encoder expects a flat input shape, got {:?}", self.input_shape));
            }
            EncoderArch::SmallConv => {
                let s = &self.input_shape;
                if s.len() != 3 || !s[1].is_multiple_of(4) || !s[2].is_multiple_of(4) || self.conv_channels == 0 {
                    return bad(format!("conv encoder expects [C, H, W] with H, W multiples of 4, got {s:?}"));
                }
            }
            _ => {}
        }
        match self.quantizer {
            QuantizerConfig::Fixed { n, d } => {
                CodebookSpec::new(n, d)?;
            }
            QuantizerConfig::Adaptive { capacity } => {
                enumerate_structures(capacity)?;
                if self.num_heads == 0 || !self.num_hiddens.is_multiple_of(self.num_heads) {
                    return bad(format!("{} heads do not divide {} hiddens", self.num_heads, self.num_hiddens));
                }
            }
            QuantizerConfig::None => {}
        }
        Ok(())
    }

    /// Latent positions per sample.
    pub fn positions_per_sample(&self) -> usize {
        match self.encoder_arch {
            EncoderArch::Dense => 1,
            EncoderArch::SmallConv => (self.input_shape[1] / 4) * (self.input_shape[2] / 4),
        }
    }
}

/// Parameter initialization overrides, mainly for tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelInit {
    pub projections: ProjectionInit,
    pub attention: AttentionInit,
}

impl Default for ModelInit {
    fn default() -> Self {
        ModelInit { projections: ProjectionInit::Random, attention: AttentionInit::Random }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Quantizer {
    None,
    Fixed(QuantLayer),
    Adaptive(CodebookPool),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    codebooks: Vec<Codebook>,
    quantizer: Quantizer,
}

/// Codebook input rows and their assignments from one forward pass.
#[derive(Debug, Clone)]
pub struct Assignment {
    pub rows: Tensor,
    pub indices: Vec<usize>,
}

/// Scalar loss components of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub recon: f64,
    /// `vq_loss` for a fixed quantizer, the pool average for an adaptive
    /// one, zero without a quantizer.
    pub quant: f64,
}

/// Everything recorded by [`Model::forward`].
#[derive(Debug)]
pub struct ForwardPass {
    pub graph: Graph,
    pub loss: NodeId,
    pub recon: NodeId,
    pub quant: Option<NodeId>,
    /// Encoder output rows, `T×H`.
    pub z_e: NodeId,
    /// Quantizer output rows fed to the decoder, `T×H`.
    pub z_hat: NodeId,
    pub x_hat: NodeId,
    pub assignments: Vec<Assignment>,
    pub selections: Option<Vec<usize>>,
    pub bound: BTreeMap<String, NodeId>,
}

impl ForwardPass {
    pub fn parts(&self) -> LossParts {
        LossParts {
            total: self.graph.scalar(self.loss),
            recon: self.graph.scalar(self.recon),
            quant: self.quant.map_or(0.0, |q| self.graph.scalar(q)),
        }
    }
}

fn codebook_name(i: usize) -> String {
    format!("codebook.{i}")
}

fn linear_init(rng: &mut Rng, fan_in: usize, shape: &[usize]) -> Tensor {
    normal_tensor(rng, shape, libm::sqrt(1.0 / fan_in as f64))
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        Self::with_init(config, ModelInit::default())
    }

    pub fn with_init(config: ModelConfig, init: ModelInit) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.seed, Stream::Init);
        let mut params = ParamStore::new();
        let h = config.num_hiddens;
        match config.encoder_arch {
            EncoderArch::Dense => {
                let m = config.input_shape[0];
                for (name, i, o) in [("enc.0", m, h), ("enc.1", h, h), ("dec.0", h, h), ("dec.1", h, m)] {
                    params.insert(format!("{name}.w"), linear_init(&mut rng, i, &[i, o]));
                    params.insert(format!("{name}.b"), Tensor::zeros(&[o]));
                }
            }
            EncoderArch::SmallConv => {
                let c = config.input_shape[0];
                let k = config.conv_channels;
                for (name, i, o) in [("enc.0", c, k), ("enc.1", k, h), ("dec.0", h, k), ("dec.1", k, c)] {
                    params.insert(format!("{name}.w"), linear_init(&mut rng, i * 9, &[o, i, 3, 3]));
                    params.insert(format!("{name}.b"), Tensor::zeros(&[o]));
                }
            }
        }
        let (quantizer, specs) = match config.quantizer {
            QuantizerConfig::None => (Quantizer::None, Vec::new()),
            QuantizerConfig::Fixed { n, d } => {
                let spec = CodebookSpec::new(n, d)?;
                let layer = QuantLayer::new("q0", spec, h);
                layer.init_params(&mut params, init.projections, &mut rng)?;
                (Quantizer::Fixed(layer), vec![spec])
            }
            QuantizerConfig::Adaptive { capacity } => {
                let specs = enumerate_structures(capacity)?;
                let mode = if config.scores_qk_only { ScoreMode::QueryKeyOnly } else { ScoreMode::AttentionValues };
                let pool = CodebookPool::new(&specs, h, config.num_heads, mode)?;
                pool.init_params(&mut params, init.projections, init.attention, &mut rng)?;
                (Quantizer::Adaptive(pool), specs)
            }
        };
        // Codebooks draw from their own stream so that a one-codebook pool
        // starts from exactly the fixed model's codebook.
        let mut cb_rng = indexed_stream(config.seed, Stream::Init, 1);
        let codebooks = specs
            .iter()
            .map(|&s| Codebook::random(s, config.gamma, &mut cb_rng).map(|c| c.with_laplace_eps(config.laplace_eps)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Model { config, params, codebooks, quantizer })
    }

    /// Reassembles a model from stored parts (checkpoint loading).
    pub fn from_parts(config: ModelConfig, params: ParamStore, codebooks: Vec<Codebook>) -> Result<Self> {
        let template = Self::new(config.clone())?;
        for (name, t) in template.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::dim("model parameter", &[t.shape(), got.shape()]));
            }
        }
        if params.len() != template.params.len() || codebooks.len() != template.codebooks.len() {
            return Err(Error::Contract(String::from("stored parts do not match the configuration")));
        }
        for (a, b) in codebooks.iter().zip(&template.codebooks) {
            if a.spec() != b.spec() {
                return Err(Error::Contract(format!("codebook {} where {} expected", a.spec(), b.spec())));
            }
        }
        Ok(Model { config, params, codebooks, quantizer: template.quantizer })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn codebooks(&self) -> &[Codebook] {
        &self.codebooks
    }

    pub fn codebooks_mut(&mut self) -> &mut [Codebook] {
        &mut self.codebooks
    }

    /// Number of candidate codebooks (1 for fixed, 0 without a quantizer).
    pub fn num_codebooks(&self) -> usize {
        self.codebooks.len()
    }

    pub fn new_graph(&self) -> Graph {
        Graph::with_precision(self.config.precision)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != self.config.input_shape.len() + 1 || x.shape()[1..] != self.config.input_shape[..] {
            return Err(Error::dim("model input", &[x.shape(), &self.config.input_shape]));
        }
        Ok(())
    }

    /// Encoder output as `T×H` rows.
    pub fn encode(&self, g: &mut Graph, binder: &mut Binder, x: NodeId) -> Result<NodeId> {
        match self.config.encoder_arch {
            EncoderArch::Dense => {
                let h0 = self.dense(g, binder, "enc.0", x)?;
                let a0 = g.relu(h0)?;
                self.dense(g, binder, "enc.1", a0)
            }
            EncoderArch::SmallConv => {
                let h0 = self.conv(g, binder, "enc.0", x, 2)?;
                let a0 = g.relu(h0)?;
                let h1 = self.conv(g, binder, "enc.1", a0, 2)?;
                g.to_rows(h1)
            }
        }
    }

    /// Decoder from `T×H` rows back to a batch of `batch` inputs.
    pub fn decode(&self, g: &mut Graph, binder: &mut Binder, rows: NodeId, batch: usize) -> Result<NodeId> {
        match self.config.encoder_arch {
            EncoderArch::Dense => {
                let h0 = self.dense(g, binder, "dec.0", rows)?;
                let a0 = g.relu(h0)?;
                self.dense(g, binder, "dec.1", a0)
            }
            EncoderArch::SmallConv => {
                let (gh, gw) = (self.config.input_shape[1] / 4, self.config.input_shape[2] / 4);
                let grid = g.from_rows(rows, batch, gh, gw)?;
                let u0 = g.upsample2(grid)?;
                let h0 = self.conv(g, binder, "dec.0", u0, 1)?;
                let a0 = g.relu(h0)?;
                let u1 = g.upsample2(a0)?;
                self.conv(g, binder, "dec.1", u1, 1)
            }
        }
    }

    fn dense(&self, g: &mut Graph, binder: &mut Binder, name: &str, x: NodeId) -> Result<NodeId> {
        let w = binder.get(g, &format!("{name}.w"))?;
        let b = binder.get(g, &format!("{name}.b"))?;
        g.affine(x, w, Some(b))
    }

    fn conv(&self, g: &mut Graph, binder: &mut Binder, name: &str, x: NodeId, stride: usize) -> Result<NodeId> {
        let w = binder.get(g, &format!("{name}.w"))?;
        let b = binder.get(g, &format!("{name}.b"))?;
        g.conv2d_3x3(x, w, Some(b), stride)
    }

    /// Full forward pass and loss. `trainable` marks parameters (and
    /// codebooks, unless EMA owns them) as requiring gradients. `noise`
    /// enables Gumbel perturbation of the adaptive selection.
    pub fn forward(&self, x: &Tensor, tau: f64, noise: Option<&mut Rng>, trainable: bool) -> Result<ForwardPass> {
        self.check_input(x)?;
        let cfg = &self.config;
        let batch = x.shape()[0];
        let mut g = self.new_graph();
        let mut binder = Binder::new(&self.params, trainable);
        let xi = g.constant(x.clone());
        let z_e = self.encode(&mut g, &mut binder, xi)?;

        let codebook_grad = trainable && !cfg.use_ema;
        let mut tables = Vec::with_capacity(self.codebooks.len());
        for (i, cb) in self.codebooks.iter().enumerate() {
            let id = g.leaf(cb.embeddings().clone(), codebook_grad);
            binder.register(&codebook_name(i), id);
            tables.push(id);
        }

        let (z_hat, quant, assignments, selections) = match &self.quantizer {
            Quantizer::None => (z_e, None, Vec::new(), None),
            Quantizer::Fixed(layer) => {
                let out = layer.forward(&mut g, &mut binder, z_e, tables[0], cfg.alpha, cfg.beta)?;
                let a = Assignment { rows: g.value(out.projected).clone(), indices: out.quant.indices.clone() };
                (out.output, Some(out.quant.vq_loss), vec![a], None)
            }
            Quantizer::Adaptive(pool) => {
                let out = adaptive_quantize(&mut g, &mut binder, pool, z_e, &tables, tau, cfg.alpha, cfg.beta, noise)?;
                let a = out
                    .layers
                    .iter()
                    .map(|l| Assignment { rows: g.value(l.projected).clone(), indices: l.quant.indices.clone() })
                    .collect();
                (out.z_q, Some(out.extra_loss), a, Some(out.gumbel.selections))
            }
        };

        let x_hat = self.decode(&mut g, &mut binder, z_hat, batch)?;
        let recon = g.mse(x_hat, xi)?;
        let loss = match quant {
            Some(q) => g.add(recon, q)?,
            None => recon,
        };
        Ok(ForwardPass {
            graph: g,
            loss,
            recon,
            quant,
            z_e,
            z_hat,
            x_hat,
            assignments,
            selections,
            bound: binder.into_bound(),
        })
    }

    /// Scalar loss parts without building gradients.
    pub fn forward_loss(&self, x: &Tensor, tau: f64, noise: Option<&mut Rng>) -> Result<LossParts> {
        Ok(self.forward(x, tau, noise, false)?.parts())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, moments: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> &BTreeMap<String, (Vec<f64>, Vec<f64>)> {
        &self.moments
    }

    pub fn restore(&mut self, t: u64, moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>) {
        self.t = t;
        self.moments = moments;
    }

    /// Advances the shared step counter; call once per optimizer step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut [f64], grad: &[f64]) {
        let (m, v) =
            self.moments.entry(name.to_string()).or_insert_with(|| (vec![0.0; param.len()], vec![0.0; param.len()]));
        let t = self.t.max(1) as f64;
        let c1 = 1.0 - libm::pow(self.beta1, t);
        let c2 = 1.0 - libm::pow(self.beta2, t);
        for i in 0..param.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            param[i] -= self.learning_rate * m_hat / (libm::sqrt(v_hat) + self.eps);
        }
    }
}

/// Model plus optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    pub step: u64,
}

/// Metrics of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub parts: LossParts,
    pub temperature: f64,
    pub record: Option<SelectionRecord>,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let adam = Adam::new(model.config().learning_rate);
        TrainState { model, adam, step: 0 }
    }

    /// Forward, backward, Adam on every bound parameter (codebooks too
    /// unless EMA owns them), then EMA codebook updates.
    pub fn train_step(&mut self, x: &Tensor, tau: f64, noise: Option<&mut Rng>) -> Result<StepMetrics> {
        let step = self.step;
        let tag = |e: Error| match e {
            Error::Numeric(msg) => Error::Numeric(format!("{msg} at step {step}")),
            other => other,
        };
        let mut fp = self.model.forward(x, tau, noise, true).map_err(tag)?;
        fp.graph.backward(fp.loss).map_err(tag)?;
        let use_ema = self.model.config.use_ema;
        self.adam.begin_step();
        for (name, &id) in &fp.bound {
            let Some(grad) = fp.graph.grad(id) else { continue };
            if let Some(idx) = name.strip_prefix("codebook.") {
                if use_ema {
                    continue;
                }
                let i: usize = idx.parse().map_err(|_| Error::Contract(format!("bad codebook name {name}")))?;
                let table = self.model.codebooks[i].embeddings_mut();
                self.adam.update(name, table.data_mut(), grad);
            } else {
                let p = self.model.params.get_mut(name)?;
                self.adam.update(name, p.data_mut(), grad);
            }
        }
        if use_ema {
            let form = self.model.config.ema_form;
            for (cb, a) in self.model.codebooks.iter_mut().zip(&fp.assignments) {
                cb.ema_update(&a.rows, &a.indices, form).map_err(tag)?;
            }
        }
        if self.model.params.iter().any(|(_, t)| !t.is_finite()) {
            return Err(Error::Numeric(format!("parameters after update at step {step}")));
        }
        self.step += 1;
        let m = self.model.num_codebooks();
        let record = fp.selections.as_ref().map(|s| SelectionRecord::from_selections(step, s, m, tau));
        Ok(StepMetrics { step, parts: fp.parts(), temperature: tau, record })
    }
}

/// Aggregate validation metrics.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Evaluation {
    /// Sum over validation batches of each batch's mean reconstruction loss.
    pub recon_loss_sum: f64,
    /// Mean reconstruction loss per sample over the whole split.
    pub recon_loss_mean: f64,
    pub quant_loss_sum: f64,
    pub quant_loss_mean: f64,
    pub batches: usize,
    pub samples: usize,
    /// Selections per codebook over the split (adaptive quantizers only).
    pub usage: Vec<u64>,
}

/// Deterministic pass over `data` in order: temperature 1, no Gumbel noise,
/// no mutation.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<Evaluation> {
    if data.is_empty() || batch_size == 0 {
        return Err(Error::Config(String::from("evaluation needs samples and a positive batch size")));
    }
    let n = data.len();
    let mut out = Evaluation {
        recon_loss_sum: 0.0,
        recon_loss_mean: 0.0,
        quant_loss_sum: 0.0,
        quant_loss_mean: 0.0,
        batches: 0,
        samples: n,
        usage: vec![0; if model.config.quantizer_is_adaptive() { model.num_codebooks() } else { 0 }],
    };
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(batch_size) {
        let x = data.batch(chunk)?;
        let fp = model.forward(&x, 1.0, None, false)?;
        let parts = fp.parts();
        out.recon_loss_sum += parts.recon;
        out.quant_loss_sum += parts.quant;
        out.recon_loss_mean += parts.recon * chunk.len() as f64;
        out.quant_loss_mean += parts.quant * chunk.len() as f64;
        out.batches += 1;
        if let Some(sel) = &fp.selections {
            for &s in sel {
                out.usage[s] += 1;
            }
        }
    }
    out.recon_loss_mean /= n as f64;
    out.quant_loss_mean /= n as f64;
    Ok(out)
}

impl ModelConfig {
    pub fn quantizer_is_adaptive(&self) -> bool {
        matches!(self.quantizer, QuantizerConfig::Adaptive { .. })
    }
}
