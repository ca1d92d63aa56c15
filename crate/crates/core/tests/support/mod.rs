//! Shared finite-difference oracles.
//!
//! Ops are checked directly. For the full losses the oracle is a surrogate
//! written from scratch: every stop-gradient and straight-through value is
//! frozen as a constant at the evaluation point, which makes the surrogate
//! an ordinary smooth function whose true gradient is what `backward` must
//! produce.
#![allow(dead_code)]

use aqvq_core::gradcheck::{finite_difference_grad, max_relative_error};
use aqvq_core::model::{Model, ModelConfig, QuantizerConfig};
use aqvq_core::params::Binder;
use aqvq_core::pool::{enumerate_structures, CodebookPool, ScoreMode};
use aqvq_core::rng::{normal_tensor, stream, Stream};
use aqvq_core::vq::{CodebookSpec, QuantLayer};
use aqvq_core::{Graph, NodeId, Result, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    normal_tensor(&mut stream(seed, Stream::Data), shape, 1.0)
}

/// Largest relative error over all inputs of `build`'s scalar output.
pub fn op_error<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &ids).unwrap();
    g.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = g.grad(ids[i]).unwrap().to_vec();
        let fd = finite_difference_grad(
            |p| {
                let mut h = Graph::new();
                let ids: Vec<NodeId> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| h.leaf(if j == i { p.clone() } else { t.clone() }, false))
                    .collect();
                let l = build(&mut h, &ids)?;
                Ok(h.scalar(l))
            },
            t,
            STEP,
        )
        .unwrap();
        worst = worst.max(max_relative_error(&analytic, fd.data()));
    }
    worst
}

/// `mse(out, fixed random target)` so every output element matters.
pub fn to_loss(g: &mut Graph, out: NodeId, seed: u64) -> Result<NodeId> {
    let target = g.constant(randn(g.shape(out), seed));
    g.mse(out, target)
}

/// Every differentiable op, each reduced to a scalar loss.
pub fn all_op_errors() -> Vec<(&'static str, f64)> {
    let a = randn(&[3, 4], 1);
    let b = randn(&[3, 4], 2);
    let s = randn(&[1], 3);
    let x = randn(&[3, 4], 11);
    let w = randn(&[4, 5], 12);
    let bias = randn(&[5], 13);
    let ba = randn(&[3, 2, 4], 14);
    let bb = randn(&[3, 4, 5], 15);
    let c3 = randn(&[2, 3, 2], 21);
    let c1 = randn(&[2, 1, 2], 22);
    let c3b = randn(&[2, 3, 2], 23);
    let table = randn(&[5, 3], 24);
    let img = randn(&[2, 3, 2, 4], 25);
    let rows = randn(&[16, 3], 26);
    let cx = randn(&[2, 2, 5, 4], 31);
    let cw = randn(&[3, 2, 3, 3], 32);
    let cb = randn(&[3], 33);
    vec![
        (
            "relu",
            op_error(std::slice::from_ref(&a), |g, x| {
                let y = g.relu(x[0])?;
                to_loss(g, y, 9)
            }),
        ),
        (
            "add",
            op_error(&[a.clone(), b.clone()], |g, x| {
                let y = g.add(x[0], x[1])?;
                to_loss(g, y, 9)
            }),
        ),
        (
            "add scalar",
            op_error(&[a.clone(), s.clone()], |g, x| {
                let y = g.add(x[0], x[1])?;
                to_loss(g, y, 9)
            }),
        ),
        (
            "sub",
            op_error(&[a.clone(), b.clone()], |g, x| {
                let y = g.sub(x[0], x[1])?;
                to_loss(g, y, 9)
            }),
        ),
        (
            "sub scalar",
            op_error(&[a.clone(), s.clone()], |g, x| {
                let y = g.sub(x[0], x[1])?;
                to_loss(g, y, 9)
            }),
        ),
        (
            "mul_scalar",
            op_error(std::slice::from_ref(&a), |g, x| {
                let y = g.mul_scalar(x[0], -1.7)?;
                to_loss(g, y, 9)
            }),
        ),
        ("mse", op_error(&[a.clone(), b.clone()], |g, x| g.mse(x[0], x[1]))),
        (
            "sum",
            op_error(std::slice::from_ref(&a), |g, x| {
                let y = g.mul_scalar(x[0], 0.3)?;
                let r = g.relu(y)?;
                g.sum(r)
            }),
        ),
        (
            "softmax",
            op_error(std::slice::from_ref(&a), |g, x| {
                let y = g.softmax(x[0])?;
                to_loss(g, y, 9)
            }),
        ),
        (
            "transpose",
            op_error(std::slice::from_ref(&a), |g, x| {
                let y = g.transpose(x[0])?;
                to_loss(g, y, 9)
            }),
        ),
        (
            "reshape",
            op_error(std::slice::from_ref(&a), |g, x| {
                let y = g.reshape(x[0], &[2, 6])?;
                to_loss(g, y, 9)
            }),
        ),
        (
            "affine",
            op_error(&[x.clone(), w.clone(), bias], |g, v| {
                let y = g.affine(v[0], v[1], Some(v[2]))?;
                to_loss(g, y, 9)
            }),
        ),
        (
            "affine no bias",
            op_error(&[x.clone(), w.clone()], |g, v| {
                let y = g.affine(v[0], v[1], None)?;
                to_loss(g, y, 9)
            }),
        ),
        (
            "matmul",
            op_error(&[x, w], |g, v| {
                let y = g.matmul(v[0], v[1])?;
                to_loss(g, y, 9)
            }),
        ),
        (
            "bmm",
            op_error(&[ba, bb], |g, v| {
                let y = g.bmm(v[0], v[1])?;
                to_loss(g, y, 9)
            }),
        ),
        (
            "concat axis 1",
            op_error(&[c3.clone(), c1], |g, v| {
                let y = g.concat(&[v[0], v[1]], 1)?;
                to_loss(g, y, 9)
            }),
        ),
        (
            "concat axis 0",
            op_error(&[c3.clone(), c3b.clone()], |g, v| {
                let y = g.concat(&[v[0], v[1]], 0)?;
                to_loss(g, y, 9)
            }),
        ),
        (
            "concat axis 2",
            op_error(&[c3, c3b], |g, v| {
                let y = g.concat(&[v[0], v[1]], 2)?;
                to_loss(g, y, 9)
            }),
        ),
        (
            "gather_rows",
            op_error(&[table], |g, v| {
                let y = g.gather_rows(v[0], &[4, 0, 4, 2])?;
                to_loss(g, y, 9)
            }),
        ),
        (
            "to_rows",
            op_error(std::slice::from_ref(&img), |g, v| {
                let y = g.to_rows(v[0])?;
                to_loss(g, y, 9)
            }),
        ),
        (
            "upsample2",
            op_error(&[img], |g, v| {
                let y = g.upsample2(v[0])?;
                to_loss(g, y, 9)
            }),
        ),
        (
            "from_rows",
            op_error(&[rows], |g, v| {
                let y = g.from_rows(v[0], 2, 2, 4)?;
                to_loss(g, y, 9)
            }),
        ),
        (
            "conv2d stride 1",
            op_error(&[cx.clone(), cw.clone(), cb.clone()], |g, v| {
                let y = g.conv2d_3x3(v[0], v[1], Some(v[2]), 1)?;
                to_loss(g, y, 9)
            }),
        ),
        (
            "conv2d stride 2",
            op_error(&[cx, cw, cb], |g, v| {
                let y = g.conv2d_3x3(v[0], v[1], Some(v[2]), 2)?;
                to_loss(g, y, 9)
            }),
        ),
    ]
}

pub fn toy(quantizer: QuantizerConfig) -> ModelConfig {
    ModelConfig { input_shape: vec![3], num_hiddens: 4, quantizer, use_ema: false, seed: 5, ..ModelConfig::default() }
}

pub fn toy_batch(cfg: &ModelConfig, seed: u64) -> Tensor {
    let mut shape = vec![6];
    shape.extend_from_slice(&cfg.input_shape);
    randn(&shape, seed)
}

/// Values held fixed by stop-gradients, straight-through estimators and
/// the discrete choices, captured at the evaluation point.
pub struct Frozen {
    indices: Vec<Vec<usize>>,
    projected: Vec<Tensor>,
    selected: Vec<Tensor>,
    one_hot: Option<Tensor>,
    soft: Option<Tensor>,
}

enum Quant {
    Fixed(QuantLayer),
    Pool(CodebookPool),
}

fn quant_of(model: &Model) -> Quant {
    let cfg = model.config();
    match cfg.quantizer {
        QuantizerConfig::Fixed { n, d } => Quant::Fixed(QuantLayer::new("q0", CodebookSpec { n, d }, cfg.num_hiddens)),
        QuantizerConfig::Adaptive { capacity } => {
            let specs = enumerate_structures(capacity).unwrap();
            let mode = if cfg.scores_qk_only { ScoreMode::QueryKeyOnly } else { ScoreMode::AttentionValues };
            Quant::Pool(CodebookPool::new(&specs, cfg.num_hiddens, cfg.num_heads, mode).unwrap())
        }
        QuantizerConfig::None => unreachable!(),
    }
}

/// The total loss with frozen values; returns it with the relaxed
/// selection distribution (adaptive only).
pub fn surrogate(model: &Model, x: &Tensor, fr: &Frozen, soft_selection: bool) -> Result<(f64, Option<Tensor>)> {
    let cfg = model.config();
    let mut g = Graph::new();
    let mut binder = Binder::new(model.params(), false);
    let xi = g.constant(x.clone());
    let z = model.encode(&mut g, &mut binder, xi)?;
    let layers: Vec<QuantLayer> = match quant_of(model) {
        Quant::Fixed(l) => vec![l],
        Quant::Pool(ref p) => p.layers().to_vec(),
    };
    let mut outs = Vec::new();
    let mut vqs = Vec::new();
    for (k, layer) in layers.iter().enumerate() {
        let p = layer.project_in(&mut g, &mut binder, z)?;
        let table = g.constant(model.codebooks()[k].embeddings().clone());
        let e = g.gather_rows(table, &fr.indices[k])?;
        let p0 = g.constant(fr.projected[k].clone());
        let e0 = g.constant(fr.selected[k].clone());
        let codebook = g.mse(e, p0)?;
        let commitment = g.mse(p, e0)?;
        let c = g.mul_scalar(commitment, cfg.alpha)?;
        let inner = g.add(codebook, c)?;
        vqs.push(g.mul_scalar(inner, cfg.beta)?);
        let mut shift = fr.selected[k].clone();
        shift.data_mut().iter_mut().zip(fr.projected[k].data()).for_each(|(s, p)| *s -= p);
        let shift = g.constant(shift);
        let p_hat = g.add(p, shift)?;
        outs.push(layer.project_out(&mut g, &mut binder, p_hat)?);
    }
    let (z_hat, quant, soft_value) = match quant_of(model) {
        Quant::Fixed(_) => (outs[0], vqs[0], None),
        Quant::Pool(pool) => {
            let t = g.shape(z)[0];
            let h = cfg.num_hiddens;
            let m = layers.len();
            let logits = pool.attention_logits(&mut g, &mut binder, z)?;
            let soft = g.softmax(logits)?; // temperature 1, no noise
            let soft_value = g.value(soft).clone();
            let weights = if soft_selection {
                soft
            } else {
                let mut shift = fr.one_hot.clone().unwrap();
                let base = fr.soft.clone().unwrap_or_else(|| soft_value.clone());
                shift.data_mut().iter_mut().zip(base.data()).for_each(|(s, b)| *s -= b);
                let shift = g.constant(shift);
                g.add(soft, shift)?
            };
            let stacked: Vec<NodeId> = outs.iter().map(|&o| g.reshape(o, &[t, 1, h])).collect::<Result<_>>()?;
            let cand = g.concat(&stacked, 1)?;
            let w = g.reshape(weights, &[t, 1, m])?;
            let picked = g.bmm(w, cand)?;
            let z_hat = g.reshape(picked, &[t, h])?;
            let mut total = vqs[0];
            for &v in &vqs[1..] {
                total = g.add(total, v)?;
            }
            (z_hat, g.mul_scalar(total, 1.0 / m as f64)?, Some(soft_value))
        }
    };
    let x_hat = model.decode(&mut g, &mut binder, z_hat, x.shape()[0])?;
    let recon = g.mse(x_hat, xi)?;
    let loss = g.add(recon, quant)?;
    Ok((g.scalar(loss), soft_value))
}

pub fn trainable_count(model: &Model) -> usize {
    model.params().numel() + model.codebooks().iter().map(|c| c.embeddings().len()).sum::<usize>()
}

/// Max relative error of every model gradient against the surrogate, and
/// the model's loss minus the surrogate's at the base point.
pub fn model_gradient_error(model: &Model, x: &Tensor, soft_selection: bool) -> (f64, f64) {
    let mut fp = model.forward(x, 1.0, None, true).unwrap();
    let base_loss = fp.graph.scalar(fp.loss);
    fp.graph.backward(fp.loss).unwrap();

    let m = model.num_codebooks();
    let mut fr = Frozen {
        indices: fp.assignments.iter().map(|a| a.indices.clone()).collect(),
        projected: fp.assignments.iter().map(|a| a.rows.clone()).collect(),
        selected: Vec::new(),
        one_hot: None,
        soft: None,
    };
    for (k, a) in fp.assignments.iter().enumerate() {
        let emb = model.codebooks()[k].embeddings();
        let rows: Vec<f64> = a.indices.iter().flat_map(|&i| emb.row(i).to_vec()).collect();
        fr.selected.push(Tensor::new(a.rows.shape(), rows).unwrap());
    }
    if let Some(sel) = &fp.selections {
        let mut oh = vec![0.0; sel.len() * m];
        for (t, &s) in sel.iter().enumerate() {
            oh[t * m + s] = 1.0;
        }
        fr.one_hot = Some(Tensor::new(&[sel.len(), m], oh).unwrap());
    }
    let (sur_loss, soft) = surrogate(model, x, &fr, soft_selection).unwrap();
    fr.soft = soft;

    let mut worst = 0.0f64;
    for (name, t) in model.params().iter() {
        let Some(&id) = fp.bound.get(name) else { continue };
        let analytic = fp.graph.grad(id).unwrap();
        let fd = finite_difference_grad(
            |p| {
                let mut probe = model.clone();
                *probe.params_mut().get_mut(name)? = p.clone();
                Ok(surrogate(&probe, x, &fr, soft_selection)?.0)
            },
            t,
            STEP,
        )
        .unwrap();
        let err = max_relative_error(analytic, fd.data());
        worst = worst.max(err);
    }
    for k in 0..m {
        let analytic = fp.graph.grad(fp.bound[&format!("codebook.{k}")]).unwrap();
        let fd = finite_difference_grad(
            |p| {
                let mut probe = model.clone();
                *probe.codebooks_mut()[k].embeddings_mut() = p.clone();
                Ok(surrogate(&probe, x, &fr, soft_selection)?.0)
            },
            model.codebooks()[k].embeddings(),
            STEP,
        )
        .unwrap();
        let err = max_relative_error(analytic, fd.data());
        worst = worst.max(err);
    }
    (worst, base_loss - sur_loss)
}
