//! Checkpoints: JSON documents whose floats are stored as hexadecimal IEEE
//! 754 bit patterns (`"0x3ff0000000000000"` is 1.0), so that loading
//! reproduces every value bit for bit. Tensors are nested arrays following
//! their shape. `format_version` is always the first field.

use std::collections::BTreeMap;
use std::path::Path;

use aqvq_core::model::{Adam, Model, TrainState};
use aqvq_core::params::ParamStore;
use aqvq_core::vq::Codebook;
use aqvq_core::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::RunConfig;
use crate::error::{AppError, AppResult};

pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HexF64(pub f64);

impl Serialize for HexF64 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&encode(self.0))
    }
}

impl<'de> Deserialize<'de> for HexF64 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        decode(&s).map(HexF64).map_err(serde::de::Error::custom)
    }
}

fn encode(v: f64) -> String {
    format!("0x{:016x}", v.to_bits())
}

fn decode(s: &str) -> Result<f64, String> {
    let digits = s.strip_prefix("0x").ok_or_else(|| format!("hex float {s:?} lacks the 0x prefix"))?;
    if digits.len() != 16 {
        return Err(format!("hex float {s:?} needs 16 digits"));
    }
    u64::from_str_radix(digits, 16).map(f64::from_bits).map_err(|e| format!("hex float {s:?}: {e}"))
}

/// A tensor as `{"shape": [...], "data": nested arrays of hex floats}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HexTensor {
    pub shape: Vec<usize>,
    pub data: Value,
}

impl HexTensor {
    pub fn from_slice(shape: &[usize], data: &[f64]) -> Self {
        fn nest(shape: &[usize], data: &[f64]) -> Value {
            match shape {
                [] | [_] => Value::Array(data.iter().map(|&v| Value::String(encode(v))).collect()),
                [n, rest @ ..] => {
                    let stride = data.len() / n;
                    Value::Array(data.chunks(stride.max(1)).map(|c| nest(rest, c)).collect())
                }
            }
        }
        let shape = if shape.is_empty() { vec![1] } else { shape.to_vec() };
        HexTensor { data: nest(&shape, data), shape }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self::from_slice(t.shape(), t.data())
    }

    pub fn values(&self) -> AppResult<Vec<f64>> {
        fn flatten(v: &Value, shape: &[usize], out: &mut Vec<f64>) -> Result<(), String> {
            let items = v.as_array().ok_or("expected an array")?;
            let Some((&n, rest)) = shape.split_first() else {
                return Err("array nesting deeper than the shape".into());
            };
            if items.len() != n {
                return Err(format!("expected {n} entries, found {}", items.len()));
            }
            for item in items {
                if rest.is_empty() {
                    out.push(decode(item.as_str().ok_or("expected a hex float string")?)?);
                } else {
                    flatten(item, rest, out)?;
                }
            }
            Ok(())
        }
        let mut out = Vec::with_capacity(self.shape.iter().product());
        flatten(&self.data, &self.shape, &mut out).map_err(|m| AppError::format("checkpoint tensor", m))?;
        Ok(out)
    }

    pub fn to_tensor(&self) -> AppResult<Tensor> {
        Ok(Tensor::new(&self.shape, self.values()?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookState {
    pub embeddings: HexTensor,
    pub ema_cluster_size: HexTensor,
    pub ema_embed_sum: HexTensor,
    pub gamma: HexF64,
    pub laplace_eps: HexF64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: HexTensor,
    pub v: HexTensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub learning_rate: HexF64,
    pub beta1: HexF64,
    pub beta2: HexF64,
    pub eps: HexF64,
    pub t: u64,
    pub moments: BTreeMap<String, Moments>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u64,
    pub config: RunConfig,
    pub step: u64,
    pub params: BTreeMap<String, HexTensor>,
    pub codebooks: Vec<CodebookState>,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    pub fn capture(config: &RunConfig, state: &TrainState) -> Self {
        let model = &state.model;
        let params = model.params().iter().map(|(k, t)| (k.to_string(), HexTensor::from_tensor(t))).collect();
        let codebooks = model
            .codebooks()
            .iter()
            .map(|c| CodebookState {
                embeddings: HexTensor::from_tensor(c.embeddings()),
                ema_cluster_size: HexTensor::from_slice(&[c.ema_cluster_size().len()], c.ema_cluster_size()),
                ema_embed_sum: HexTensor::from_slice(c.embeddings().shape(), c.ema_embed_sum()),
                gamma: HexF64(c.gamma()),
                laplace_eps: HexF64(c.laplace_eps()),
            })
            .collect();
        let adam = &state.adam;
        let moments = adam
            .moments()
            .iter()
            .map(|(k, (m, v))| {
                (
                    k.clone(),
                    Moments { m: HexTensor::from_slice(&[m.len()], m), v: HexTensor::from_slice(&[v.len()], v) },
                )
            })
            .collect();
        Checkpoint {
            format_version: FORMAT_VERSION,
            config: config.clone(),
            step: state.step,
            params,
            codebooks,
            optimizer: OptimizerState {
                learning_rate: HexF64(adam.learning_rate),
                beta1: HexF64(adam.beta1),
                beta2: HexF64(adam.beta2),
                eps: HexF64(adam.eps),
                t: adam.steps(),
                moments,
            },
        }
    }

    pub fn restore(&self) -> AppResult<TrainState> {
        let mut params = ParamStore::new();
        for (k, t) in &self.params {
            params.insert(k.clone(), t.to_tensor()?);
        }
        let codebooks = self
            .codebooks
            .iter()
            .map(|c| {
                Ok(Codebook::from_parts(
                    c.embeddings.to_tensor()?,
                    c.ema_cluster_size.values()?,
                    c.ema_embed_sum.values()?,
                    c.gamma.0,
                    c.laplace_eps.0,
                )?)
            })
            .collect::<AppResult<Vec<_>>>()?;
        let model = Model::from_parts(self.config.model.clone(), params, codebooks)?;
        let o = &self.optimizer;
        let mut adam = Adam::new(o.learning_rate.0);
        adam.beta1 = o.beta1.0;
        adam.beta2 = o.beta2.0;
        adam.eps = o.eps.0;
        let moments = o
            .moments
            .iter()
            .map(|(k, mv)| Ok((k.clone(), (mv.m.values()?, mv.v.values()?))))
            .collect::<AppResult<BTreeMap<_, _>>>()?;
        adam.restore(o.t, moments);
        Ok(TrainState { model, adam, step: self.step })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes") + "\n"
    }

    /// Parses a document, checking the format version before anything else.
    pub fn from_json(text: &str, context: &str) -> AppResult<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| AppError::parse(context, &e))?;
        let found = value.get("format_version").and_then(Value::as_u64).unwrap_or(0);
        if found != FORMAT_VERSION {
            return Err(AppError::Version { found, expected: FORMAT_VERSION });
        }
        serde_json::from_value(value).map_err(|e| AppError::format(context, e.to_string()))
    }
}

pub fn save_checkpoint(config: &RunConfig, state: &TrainState, path: &Path) -> AppResult<()> {
    std::fs::write(path, Checkpoint::capture(config, state).to_json()).map_err(|e| AppError::io(path, e))
}

/// Returns the stored run config with the restored state.
pub fn load_checkpoint(path: &Path) -> AppResult<(RunConfig, TrainState)> {
    let text = std::fs::read_to_string(path).map_err(|source| AppError::MissingInput { path: path.into(), source })?;
    let ck = Checkpoint::from_json(&text, &path.display().to_string())?;
    let state = ck.restore()?;
    Ok((ck.config, state))
}
