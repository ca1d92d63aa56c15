//! Training runs, fixed-structure sweeps, adaptive runs and ablations.

use std::time::Instant;

use aqvq_core::analysis::{gradient_gap, GapTrace, TraceSource};
use aqvq_core::data::{Dataset, EpochSampler};
use aqvq_core::model::{evaluate, Evaluation, Model, QuantizerConfig, TrainState};
use aqvq_core::pool::{enumerate_structures, temperature, Phase, SelectionRecord};
use aqvq_core::rng::{indexed_stream, Stream};
use aqvq_core::vq::CodebookSpec;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{AppError, AppResult};
use crate::report::{RunReport, StepRecord, Summary};

/// Final state and records of one training run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: TrainState,
    pub report: RunReport,
    pub evaluation: Evaluation,
    pub gap_trace: Vec<GapTrace>,
    pub selections: Vec<SelectionRecord>,
}

impl RunOutcome {
    pub fn final_recon(&self) -> f64 {
        self.evaluation.recon_loss_mean
    }
}

/// Trains `cfg.model` (already resolved) for `cfg.training.steps` steps, or
/// continues `resume` up to that count, then evaluates on `val`.
///
/// Batches come from a sampler seeded by `cfg.seed`; the Gumbel noise of
/// each step has its own stream, so a resumed run matches an uninterrupted
/// one exactly.
pub fn train_run(cfg: &RunConfig, train: &Dataset, val: &Dataset, resume: Option<TrainState>) -> AppResult<RunOutcome> {
    train_run_until(cfg, train, val, resume, cfg.training.steps)
}

/// [`train_run`] stopped after step `until` (capped at the configured
/// steps). The temperature schedule still spans all configured steps, so
/// resuming the result continues the same run.
pub fn train_run_until(
    cfg: &RunConfig,
    train: &Dataset,
    val: &Dataset,
    resume: Option<TrainState>,
    until: u64,
) -> AppResult<RunOutcome> {
    let start = Instant::now();
    let t = &cfg.training;
    let until = until.min(t.steps);
    let mut state = match resume {
        Some(s) => s,
        None => TrainState::new(Model::new(cfg.model.clone())?),
    };
    let mut sampler = EpochSampler::new(train.len(), t.batch_size, cfg.seed)?;
    for _ in 0..state.step {
        sampler.next_batch();
    }
    let adaptive = cfg.model.quantizer_is_adaptive();
    let quantized = !matches!(cfg.model.quantizer, QuantizerConfig::None);
    let source = if adaptive { TraceSource::Adaptive } else { TraceSource::Codebook(0) };
    let m = state.model.num_codebooks();
    let positions = cfg.model.positions_per_sample();

    let mut records = Vec::new();
    let mut gap_trace = Vec::new();
    let mut selections = Vec::new();
    while state.step < until {
        let step = state.step;
        let x = train.batch(&sampler.next_batch())?;
        let tau = if adaptive { temperature(t.steps, step + 1, Phase::Training).value } else { 1.0 };
        let gap = if quantized && t.gap_every > 0 && step % t.gap_every == 0 {
            let g = gradient_gap(&state.model, &x)?;
            gap_trace.push(GapTrace::new(step, g, source)?);
            Some(g.gap)
        } else {
            None
        };
        let mut noise = (adaptive && t.gumbel_noise).then(|| indexed_stream(cfg.seed, Stream::Gumbel, step));
        let metrics = state.train_step(&x, tau, noise.as_mut())?;
        let usage = match &metrics.record {
            Some(r) => {
                selections.push(r.clone());
                r.counts.clone()
            }
            None if m == 1 => vec![(x.shape()[0] * positions) as u64],
            None => Vec::new(),
        };
        records.push(StepRecord {
            step,
            recon: metrics.parts.recon,
            vq: metrics.parts.quant,
            gap,
            temperature: tau,
            usage,
        });
    }
    let evaluation = evaluate(&state.model, val, t.eval_batch_size)?;
    let report = RunReport {
        num_codebooks: m,
        records,
        summary: Summary {
            final_val_recon_sum: evaluation.recon_loss_sum,
            final_val_recon_mean: evaluation.recon_loss_mean,
            final_val_quant_mean: evaluation.quant_loss_mean,
            val_batches: evaluation.batches,
            val_samples: evaluation.samples,
            val_usage: evaluation.usage.clone(),
            steps: state.step,
            wall_time_s: start.elapsed().as_secs_f64(),
            config_hash: cfg.hash(),
        },
    };
    Ok(RunOutcome { state, report, evaluation, gap_trace, selections })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantPoint {
    pub step: u64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub spec: CodebookSpec,
    pub final_val_recon_sum: f64,
    pub final_val_recon_mean: f64,
    pub gap_trace: Vec<GapTrace>,
    pub quant_loss_trace: Vec<QuantPoint>,
    pub config_hash: String,
    /// Set when the trial failed; the metrics are then NaN.
    pub error: Option<String>,
}

/// The resolved config of one fixed-structure trial.
pub fn fixed_config(base: &RunConfig, spec: CodebookSpec) -> RunConfig {
    let mut cfg = base.clone();
    cfg.model.quantizer = QuantizerConfig::Fixed { n: spec.n, d: spec.d };
    cfg
}

/// One fixed-codebook model per structure of capacity `w`, all with the
/// same seed and therefore the same batch order. Failed trials are
/// recorded and the sweep continues.
pub fn run_fixed_sweep(base: &RunConfig, train: &Dataset, val: &Dataset, w: usize) -> AppResult<Vec<SweepResult>> {
    let specs = enumerate_structures(w)?;
    Ok(specs
        .par_iter()
        .map(|&spec| {
            let cfg = fixed_config(base, spec);
            let config_hash = cfg.hash();
            match train_run(&cfg, train, val, None) {
                Ok(out) => SweepResult {
                    spec,
                    final_val_recon_sum: out.evaluation.recon_loss_sum,
                    final_val_recon_mean: out.evaluation.recon_loss_mean,
                    gap_trace: out.gap_trace,
                    quant_loss_trace: out
                        .report
                        .records
                        .iter()
                        .map(|r| QuantPoint { step: r.step, loss: r.vq })
                        .collect(),
                    config_hash,
                    error: None,
                },
                Err(e) => {
                    log::warn!("trial {spec} failed: {e}");
                    SweepResult {
                        spec,
                        final_val_recon_sum: f64::NAN,
                        final_val_recon_mean: f64::NAN,
                        gap_trace: Vec::new(),
                        quant_loss_trace: Vec::new(),
                        config_hash,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect())
}

pub fn sweep_csv(results: &[SweepResult]) -> AppResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["n", "d", "final_val_recon_sum", "final_val_recon_mean", "config_hash", "error"])
        .map_err(csv_err)?;
    for r in results {
        w.write_record([
            r.spec.n.to_string(),
            r.spec.d.to_string(),
            num(r.final_val_recon_sum),
            num(r.final_val_recon_mean),
            r.config_hash.clone(),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    finish_csv(w)
}

/// Long-format trace table: one row per (trial, measured step).
pub fn sweep_traces_csv(results: &[SweepResult]) -> AppResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["n", "d", "step", "gap", "quant_loss"]).map_err(csv_err)?;
    for r in results {
        for t in &r.gap_trace {
            w.write_record([
                r.spec.n.to_string(),
                r.spec.d.to_string(),
                t.step.to_string(),
                num(t.gap),
                num(t.quant_loss),
            ])
            .map_err(csv_err)?;
        }
    }
    finish_csv(w)
}

/// The adaptive model over the pool of every structure of capacity `w`.
pub fn adaptive_config(base: &RunConfig, w: usize) -> RunConfig {
    let mut cfg = base.clone();
    cfg.model.quantizer = QuantizerConfig::Adaptive { capacity: w };
    cfg
}

pub fn run_adaptive(base: &RunConfig, train: &Dataset, val: &Dataset, w: usize) -> AppResult<RunOutcome> {
    train_run(&adaptive_config(base, w), train, val, None)
}

/// Selection frequencies over windows of `window` steps, one column per
/// codebook.
pub fn usage_csv(selections: &[SelectionRecord], window: usize, specs: &[CodebookSpec]) -> AppResult<String> {
    let hist = aqvq_core::pool::usage_histogram(selections, window)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["window_start".to_string()];
    header.extend(specs.iter().map(|s| format!("n{}_d{}", s.n, s.d)));
    w.write_record(&header).map_err(csv_err)?;
    for (i, row) in hist.iter().enumerate() {
        let start = selections[i * window].step;
        let mut rec = vec![start.to_string()];
        rec.extend(row.iter().map(|&v| num(v)));
        w.write_record(&rec).map_err(csv_err)?;
    }
    finish_csv(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridMode {
    /// The base cell plus one cell per listed value of each axis, others
    /// held at the base values.
    #[default]
    OneAtATime,
    /// Every combination of the listed values.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    /// Base run; its quantizer must be adaptive and gives the base capacity.
    pub base: RunConfig,
    pub capacities: Vec<usize>,
    pub use_ema: Vec<bool>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub mode: GridMode,
    /// Seeds per cell; empty means the base seed only.
    pub seeds: Vec<u64>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            base: RunConfig::default(),
            capacities: vec![4096, 8192, 16384, 32768, 65536],
            use_ema: vec![true, false],
            alpha: vec![0.25, 0.5, 0.75, 1.0, 5.0, 10.0],
            beta: vec![0.01, 0.2, 1.0, 5.0],
            mode: GridMode::OneAtATime,
            seeds: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub label: String,
    pub capacity: usize,
    pub use_ema: bool,
    pub alpha: f64,
    pub beta: f64,
}

impl AblationGrid {
    pub fn read(path: &std::path::Path) -> AppResult<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|source| AppError::MissingInput { path: path.into(), source })?;
        serde_json::from_str(&text)
            .map_err(|e| AppError::Config(format!("{}: line {}, column {}: {e}", path.display(), e.line(), e.column())))
    }

    fn base_cell(&self) -> AppResult<AblationCell> {
        let QuantizerConfig::Adaptive { capacity } = self.base.model.quantizer else {
            return Err(AppError::Config("ablation base must use an adaptive quantizer".into()));
        };
        let m = &self.base.model;
        Ok(AblationCell { label: "base".into(), capacity, use_ema: m.use_ema, alpha: m.alpha, beta: m.beta })
    }

    pub fn cells(&self) -> AppResult<Vec<AblationCell>> {
        let base = self.base_cell()?;
        let mut cells = Vec::new();
        match self.mode {
            GridMode::OneAtATime => {
                cells.push(base.clone());
                for &c in &self.capacities {
                    cells.push(AblationCell { label: format!("W={c}"), capacity: c, ..base.clone() });
                }
                for &e in &self.use_ema {
                    cells.push(AblationCell { label: format!("use_ema={e}"), use_ema: e, ..base.clone() });
                }
                for &a in &self.alpha {
                    cells.push(AblationCell { label: format!("alpha={a}"), alpha: a, ..base.clone() });
                }
                for &b in &self.beta {
                    cells.push(AblationCell { label: format!("beta={b}"), beta: b, ..base.clone() });
                }
            }
            GridMode::Full => {
                let or_base = |v: &[f64], b: f64| if v.is_empty() { vec![b] } else { v.to_vec() };
                let caps = if self.capacities.is_empty() { vec![base.capacity] } else { self.capacities.clone() };
                let emas = if self.use_ema.is_empty() { vec![base.use_ema] } else { self.use_ema.clone() };
                for &capacity in &caps {
                    for &use_ema in &emas {
                        for &alpha in &or_base(&self.alpha, base.alpha) {
                            for &beta in &or_base(&self.beta, base.beta) {
                                cells.push(AblationCell {
                                    label: format!("W={capacity},use_ema={use_ema},alpha={alpha},beta={beta}"),
                                    capacity,
                                    use_ema,
                                    alpha,
                                    beta,
                                });
                            }
                        }
                    }
                }
            }
        }
        if cells.is_empty() {
            return Err(AppError::Config("ablation grid is empty".into()));
        }
        Ok(cells)
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.base.seed]
        } else {
            self.seeds.clone()
        }
    }
}

/// `base` (resolved) with the cell's settings and `seed`.
pub fn cell_config(base: &RunConfig, cell: &AblationCell, seed: u64) -> RunConfig {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.model.seed = seed;
    cfg.model.quantizer = QuantizerConfig::Adaptive { capacity: cell.capacity };
    cfg.model.use_ema = cell.use_ema;
    cfg.model.alpha = cell.alpha;
    cfg.model.beta = cell.beta;
    cfg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub seed: u64,
    pub num_codebooks: usize,
    pub final_val_recon_sum: f64,
    pub final_val_recon_mean: f64,
    pub config_hash: String,
    pub error: Option<String>,
}

/// Runs every (cell, seed) pair on the base config's data. Failed cells
/// are recorded and the grid continues.
pub fn run_ablation(grid: &AblationGrid) -> AppResult<Vec<AblationRow>> {
    let cells = grid.cells()?;
    let (base, train, val) = grid.base.clone().resolve()?;
    let jobs: Vec<(AblationCell, u64)> =
        cells.iter().flat_map(|c| grid.seeds().into_iter().map(move |s| (c.clone(), s))).collect();
    Ok(jobs
        .into_par_iter()
        .map(|(cell, seed)| {
            let cfg = cell_config(&base, &cell, seed);
            let config_hash = cfg.hash();
            let num_codebooks = enumerate_structures(cell.capacity).map(|s| s.len()).unwrap_or(0);
            let result = cfg.model.validate().map_err(AppError::from).and_then(|_| train_run(&cfg, &train, &val, None));
            match result {
                Ok(out) => AblationRow {
                    cell,
                    seed,
                    num_codebooks,
                    final_val_recon_sum: out.evaluation.recon_loss_sum,
                    final_val_recon_mean: out.evaluation.recon_loss_mean,
                    config_hash,
                    error: None,
                },
                Err(e) => {
                    log::warn!("ablation cell {} (seed {seed}) failed: {e}", cell.label);
                    AblationRow {
                        cell,
                        seed,
                        num_codebooks,
                        final_val_recon_sum: f64::NAN,
                        final_val_recon_mean: f64::NAN,
                        config_hash,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect())
}

pub fn ablation_csv(rows: &[AblationRow]) -> AppResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "cell",
        "capacity",
        "use_ema",
        "alpha",
        "beta",
        "seed",
        "num_codebooks",
        "final_val_recon_sum",
        "final_val_recon_mean",
        "config_hash",
        "error",
    ])
    .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.cell.label.clone(),
            r.cell.capacity.to_string(),
            r.cell.use_ema.to_string(),
            num(r.cell.alpha),
            num(r.cell.beta),
            r.seed.to_string(),
            r.num_codebooks.to_string(),
            num(r.final_val_recon_sum),
            num(r.final_val_recon_mean),
            r.config_hash.clone(),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    finish_csv(w)
}

/// Median of the finite values, `None` if there are none.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len();
    Some(if k % 2 == 1 { v[k / 2] } else { 0.5 * (v[k / 2 - 1] + v[k / 2]) })
}

fn num(v: f64) -> String {
    if v.is_finite() {
        serde_json::to_string(&v).expect("float serializes")
    } else {
        "NaN".into()
    }
}

fn csv_err(e: csv::Error) -> AppError {
    AppError::format("csv output", e.to_string())
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> AppResult<String> {
    let bytes = w.into_inner().map_err(|e| AppError::format("csv output", e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}
