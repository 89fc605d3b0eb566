//! Checkpoint serialization.
//!
//! Layout: magic `PNMT`, u32 LE format version, length-prefixed UTF-8 JSON
//! header (model config, step count, optimizer settings, RNG state, tensor
//! count), then named tensors as (u32 name length, name, u32 rank, u64
//! extents, little-endian f64 values). Parameters are stored under their own
//! names; Adam moments under `adam.m/` and `adam.v/` prefixes.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::trainer::{Adam, AdamConfig};

pub const MAGIC: &[u8; 4] = b"PNMT";
pub const FORMAT_VERSION: u32 = 1;

/// Seed plus stream position of the training RNG (the epoch cursor for the
/// per-epoch shuffle derivation), enough to reproduce the remaining draw
/// sequence on resume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub position: u128,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    optimizer: Option<AdamConfig>,
    rng: Option<RngState>,
    tensor_count: usize,
}

/// A deserialized training snapshot.
pub struct TrainState<F: Scalar> {
    pub model: Model<F>,
    pub optimizer: Option<Adam<F>>,
    pub rng: Option<RngState>,
    pub step: u64,
}

impl<F: Scalar> TrainState<F> {
    /// Reject resuming under a different model configuration (e.g. loading
    /// a gate checkpoint as the softmax variant).
    pub fn ensure_config(&self, expected: &ModelConfig) -> Result<()> {
        if &self.model.config != expected {
            return Err(Error::Consistency(format!(
                "checkpoint was written for variant '{}' with dims ({}, {}), requested '{}' with dims ({}, {})",
                self.model.config.variant.as_str(),
                self.model.config.d_embed,
                self.model.config.d_hidden,
                expected.variant.as_str(),
                expected.d_embed,
                expected.d_hidden,
            )));
        }
        Ok(())
    }
}

fn write_tensor<F: Scalar, W: Write>(w: &mut W, name: &str, tensor: &Tensor<F>) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
    for &e in tensor.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    for &x in tensor.data() {
        w.write_all(&x.to_double().to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    model: &Model<F>,
    optimizer: Option<&Adam<F>>,
    rng: Option<RngState>,
    step: u64,
) -> Result<()> {
    let mut tensors: Vec<(String, &Tensor<F>)> =
        model.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
    if let Some(opt) = optimizer {
        let (m, v) = opt.moments();
        for ((name, _), t) in model.params.iter().zip(m) {
            tensors.push((format!("adam.m/{name}"), t));
        }
        for ((name, _), t) in model.params.iter().zip(v) {
            tensors.push((format!("adam.v/{name}"), t));
        }
    }
    let header = Header {
        config: model.config.clone(),
        step,
        optimizer: optimizer.map(|o| o.cfg),
        rng,
        tensor_count: tensors.len(),
    };
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (name, tensor) in tensors {
        write_tensor(&mut w, &name, tensor)?;
    }
    w.flush()?;
    Ok(())
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn tensor<F: Scalar>(&mut self) -> Result<(String, Tensor<F>)> {
        let name_len = self.u32()? as usize;
        if name_len > 4096 {
            return Err(Error::Format(format!("implausible tensor name length {name_len}")));
        }
        let name = String::from_utf8(self.bytes(name_len)?)
            .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?;
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!("implausible tensor rank {rank} for {name}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = self.bytes(numel * 8)?;
        let data: Vec<F> = raw
            .chunks_exact(8)
            .map(|c| F::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Ok((name, Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?))
    }
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<TrainState<F>> {
    let file = std::fs::File::open(path)?;
    let mut r = Reader { inner: BufReader::new(file) };
    let magic = r.bytes(4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("format version {version} not supported (expected {FORMAT_VERSION})")));
    }
    let json_len = r.u64()? as usize;
    if json_len > 1 << 20 {
        return Err(Error::Format(format!("implausible header length {json_len}")));
    }
    let header: Header = serde_json::from_slice(&r.bytes(json_len)?)
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;

    let mut model: Model<F> = Model::new(header.config.clone(), 0)?;
    let mut optimizer = header.optimizer.map(|cfg| {
        let mut adam = Adam::new(&model, cfg);
        adam.step = header.step;
        adam
    });
    let mut adam_m: Vec<Option<Tensor<F>>> = vec![None; model.params.len()];
    let mut adam_v: Vec<Option<Tensor<F>>> = vec![None; model.params.len()];
    let mut seen = vec![false; model.params.len()];

    for _ in 0..header.tensor_count {
        let (name, tensor) = r.tensor::<F>()?;
        let (target, slot): (&str, Option<&mut Vec<Option<Tensor<F>>>>) =
            if let Some(rest) = name.strip_prefix("adam.m/") {
                (rest, Some(&mut adam_m))
            } else if let Some(rest) = name.strip_prefix("adam.v/") {
                (rest, Some(&mut adam_v))
            } else {
                (name.as_str(), None)
            };
        let id = model
            .params
            .id_of(target)
            .ok_or_else(|| Error::Consistency(format!("tensor '{name}' does not belong to this configuration")))?;
        let expected_shape = model.params.by_id(id).shape().to_vec();
        if tensor.shape() != expected_shape.as_slice() {
            return Err(Error::Consistency(format!(
                "tensor '{name}' has shape {:?}, configuration requires {:?}",
                tensor.shape(),
                expected_shape
            )));
        }
        match slot {
            None => {
                seen[model.params.id_of(target).unwrap().0] = true;
                *model.params.by_id_mut(id) = tensor;
            }
            Some(bucket) => bucket[id.0] = Some(tensor),
        }
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        let name: String = model.params.names().nth(missing).unwrap().to_string();
        return Err(Error::Consistency(format!("parameter '{name}' missing from checkpoint")));
    }
    if let Some(opt) = optimizer.as_mut() {
        if adam_m.iter().any(Option::is_none) || adam_v.iter().any(Option::is_none) {
            return Err(Error::Consistency("optimizer moments incomplete in checkpoint".into()));
        }
        opt.restore_moments(
            adam_m.into_iter().map(Option::unwrap).collect(),
            adam_v.into_iter().map(Option::unwrap).collect(),
        );
    }
    Ok(TrainState { model, optimizer, rng: header.rng, step: header.step })
}
