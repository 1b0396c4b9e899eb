//! Bit-exact checkpoint container and the stage-2 warm start.
//!
//! Binary layout, little-endian throughout: an 8-byte magic, a u32 format
//! version, a length-prefixed key=value header (config, stage, step, data
//! hash, optimizer hyperparameters), the named parameter tensors, and the
//! optional optimizer moments in parameter order. Serializing the same
//! checkpoint twice yields identical bytes.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::model::config::ModelConfig;
use crate::model::net::UnifiedTransformer;
use crate::numerics::{AdamHyper, OptimizerState, RngStream, TensorValue};

const MAGIC: &[u8; 8] = b"PARLEYCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageTag {
    Stage1,
    Stage2Gen,
    Stage2Eval,
}

impl StageTag {
    pub fn as_str(self) -> &'static str {
        match self {
            StageTag::Stage1 => "stage1",
            StageTag::Stage2Gen => "stage2-gen",
            StageTag::Stage2Eval => "stage2-eval",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stage1" => Ok(StageTag::Stage1),
            "stage2-gen" => Ok(StageTag::Stage2Gen),
            "stage2-eval" => Ok(StageTag::Stage2Eval),
            _ => Err(CoreError::format(alloc::format!("unknown stage '{s}'"))),
        }
    }
}

/// Optimizer moments snapshot, aligned with the model's canonical tensor
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot {
    pub hyper: AdamHyper,
    pub step: u64,
    pub m: Vec<TensorValue<f32>>,
    pub v: Vec<TensorValue<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub stage: StageTag,
    pub step: u64,
    /// Hash of the training data the run consumed; consumers can verify
    /// they evaluate on the corpus the model was trained on.
    pub data_hash: u64,
    pub tensors: Vec<(String, TensorValue<f32>)>,
    pub optimizer: Option<OptimizerSnapshot>,
}

impl Checkpoint {
    pub fn from_model(
        model: &UnifiedTransformer<f32>,
        stage: StageTag,
        step: u64,
        data_hash: u64,
        optimizer: Option<&OptimizerState<f32>>,
    ) -> Self {
        Self {
            config: model.config.clone(),
            stage,
            step,
            data_hash,
            tensors: model
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
            optimizer: optimizer.map(|o| OptimizerSnapshot {
                hyper: o.hyper.clone(),
                step: o.step,
                m: o.m.clone(),
                v: o.v.clone(),
            }),
        }
    }

    /// Rebuilds the network; every named tensor must match the shape the
    /// config implies.
    pub fn to_model(&self) -> Result<UnifiedTransformer<f32>> {
        let mut rng = RngStream::new(0);
        let mut model = UnifiedTransformer::<f32>::new(self.config.clone(), &mut rng)?;
        {
            let mut named = model.named_tensors_mut();
            if named.len() != self.tensors.len() {
                return Err(CoreError::format("tensor count mismatch"));
            }
            for ((name, dst), (stored_name, stored)) in named.iter_mut().zip(&self.tensors) {
                if name != stored_name {
                    return Err(CoreError::format(alloc::format!(
                        "tensor order mismatch: {name} vs {stored_name}"
                    )));
                }
                if dst.shape() != stored.shape() {
                    return Err(CoreError::format(alloc::format!(
                        "tensor {name} has shape {:?}, config implies {:?}",
                        stored.shape(),
                        dst.shape()
                    )));
                }
                **dst = stored.clone();
            }
        }
        Ok(model)
    }

    pub fn optimizer_state(&self) -> Option<OptimizerState<f32>> {
        self.optimizer.as_ref().map(|o| OptimizerState {
            hyper: o.hyper.clone(),
            step: o.step,
            m: o.m.clone(),
            v: o.v.clone(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());

        let mut header = String::new();
        let c = &self.config;
        header.push_str(&alloc::format!("layers={}\n", c.layers));
        header.push_str(&alloc::format!("heads={}\n", c.heads));
        header.push_str(&alloc::format!("dim={}\n", c.dim));
        header.push_str(&alloc::format!("latent_k={}\n", c.latent_k));
        header.push_str(&alloc::format!("vocab_size={}\n", c.vocab_size));
        header.push_str(&alloc::format!("max_context={}\n", c.max_context));
        header.push_str(&alloc::format!("max_response={}\n", c.max_response));
        header.push_str(&alloc::format!("temperature={:?}\n", c.temperature));
        header.push_str(&alloc::format!("decode={}\n", c.decode_str()));
        header.push_str(&alloc::format!("stage={}\n", self.stage.as_str()));
        header.push_str(&alloc::format!("step={}\n", self.step));
        header.push_str(&alloc::format!("data_hash={}\n", self.data_hash));
        match &self.optimizer {
            Some(o) => {
                header.push_str("optimizer=adam\n");
                header.push_str(&alloc::format!("adam_step={}\n", o.step));
                header.push_str(&alloc::format!("adam_beta1={:?}\n", o.hyper.beta1));
                header.push_str(&alloc::format!("adam_beta2={:?}\n", o.hyper.beta2));
                header.push_str(&alloc::format!("adam_epsilon={:?}\n", o.hyper.epsilon));
                header.push_str(&alloc::format!("adam_peak_lr={:?}\n", o.hyper.peak_lr));
                header.push_str(&alloc::format!("adam_warmup={}\n", o.hyper.warmup_steps));
            }
            None => header.push_str("optimizer=none\n"),
        }
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());

        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            write_tensor(&mut out, name, t);
        }
        if let Some(o) = &self.optimizer {
            for t in o.m.iter().chain(&o.v) {
                for &x in t.data() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, at: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(CoreError::format("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CoreError::format(alloc::format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let header_len = r.u64()? as usize;
        let header = core::str::from_utf8(r.take(header_len)?)
            .map_err(|_| CoreError::format("header is not utf8"))?;
        let mut kv = alloc::collections::BTreeMap::new();
        for line in header.lines() {
            if let Some((k, v)) = line.split_once('=') {
                kv.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| -> Result<&String> {
            kv.get(k)
                .ok_or_else(|| CoreError::format(alloc::format!("header missing {k}")))
        };
        let parse_usize = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| CoreError::format(alloc::format!("bad {k}")))
        };
        let parse_f64 = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| CoreError::format(alloc::format!("bad {k}")))
        };
        let config = ModelConfig {
            layers: parse_usize("layers")?,
            heads: parse_usize("heads")?,
            dim: parse_usize("dim")?,
            latent_k: parse_usize("latent_k")?,
            vocab_size: parse_usize("vocab_size")?,
            max_context: parse_usize("max_context")?,
            max_response: parse_usize("max_response")?,
            temperature: parse_f64("temperature")?,
            decode: ModelConfig::parse_decode(get("decode")?)?,
        };
        let stage = StageTag::parse(get("stage")?)?;
        let step = get("step")?
            .parse()
            .map_err(|_| CoreError::format("bad step"))?;
        let data_hash = get("data_hash")?
            .parse()
            .map_err(|_| CoreError::format("bad data_hash"))?;

        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            tensors.push(read_tensor(&mut r)?);
        }
        let optimizer = match get("optimizer")?.as_str() {
            "none" => None,
            "adam" => {
                let hyper = AdamHyper {
                    beta1: parse_f64("adam_beta1")?,
                    beta2: parse_f64("adam_beta2")?,
                    epsilon: parse_f64("adam_epsilon")?,
                    peak_lr: parse_f64("adam_peak_lr")?,
                    warmup_steps: get("adam_warmup")?
                        .parse()
                        .map_err(|_| CoreError::format("bad adam_warmup"))?,
                };
                let step = get("adam_step")?
                    .parse()
                    .map_err(|_| CoreError::format("bad adam_step"))?;
                let mut read_moments = |r: &mut Reader| -> Result<Vec<TensorValue<f32>>> {
                    tensors
                        .iter()
                        .map(|(_, t)| {
                            let mut data = Vec::with_capacity(t.len());
                            for _ in 0..t.len() {
                                data.push(r.f32()?);
                            }
                            Ok(TensorValue::new(t.shape().to_vec(), data))
                        })
                        .collect()
                };
                let m = read_moments(&mut r)?;
                let v = read_moments(&mut r)?;
                Some(OptimizerSnapshot { hyper, step, m, v })
            }
            other => {
                return Err(CoreError::format(alloc::format!(
                    "unknown optimizer '{other}'"
                )))
            }
        };
        if r.at != bytes.len() {
            return Err(CoreError::format("trailing bytes after checkpoint"));
        }
        Ok(Checkpoint {
            config,
            stage,
            step,
            data_hash,
            tensors,
            optimizer,
        })
    }
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &TensorValue<f32>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn read_tensor(r: &mut Reader) -> Result<(String, TensorValue<f32>)> {
    let name_len = r.u16()? as usize;
    let name = core::str::from_utf8(r.take(name_len)?)
        .map_err(|_| CoreError::format("tensor name is not utf8"))?
        .to_string();
    let ndim = r.take(1)?[0] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u64()? as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.f32()?);
    }
    Ok((name, TensorValue::new(shape, data)))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(CoreError::format("truncated checkpoint"));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Initializes a stage-2 model from a stage-1 checkpoint: backbone and
/// (tied) LM head copied bit-exactly, latent table and the recognition /
/// bag-of-words / coherence heads freshly drawn from `seed`.
pub fn warm_start(
    stage1: &Checkpoint,
    target: ModelConfig,
    seed: u64,
) -> Result<UnifiedTransformer<f32>> {
    target.validate()?;
    let s = &stage1.config;
    let compatible = s.layers == target.layers
        && s.heads == target.heads
        && s.dim == target.dim
        && s.vocab_size == target.vocab_size
        && s.max_context == target.max_context
        && s.max_response == target.max_response;
    if !compatible {
        return Err(CoreError::contract(
            "warm start requires an identical backbone shape",
        ));
    }
    let source = stage1.to_model()?;
    let mut rng = RngStream::new(seed);
    let mut model = UnifiedTransformer::<f32>::new(target, &mut rng)?;
    let backbone: alloc::collections::BTreeSet<String> =
        super::net::backbone_names(s.layers).into_iter().collect();
    {
        let src: alloc::collections::BTreeMap<String, TensorValue<f32>> = source
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        for (name, dst) in model.named_tensors_mut() {
            if backbone.contains(&name) {
                *dst = src[&name].clone();
            }
        }
    }
    model.reinit_heads(&mut rng);
    Ok(model)
}
