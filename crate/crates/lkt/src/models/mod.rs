//! Model definitions: the masked-response transformer encoder, the
//! recurrent baseline, parameter initialization, and checkpoint IO.

pub mod dkt;
pub mod lkt;

pub use dkt::{dkt_loss, DktConfig, DktForward, DktModel};
pub use lkt::{
    build_mlm_example, lkt_loss, mlm_forward_loss, predict_masked_correctness, ForwardOutput,
    HeadType, LktConfig, LktModel, MaskedPrediction, MlmExample,
};

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
const CHECKPOINT_MAGIC: &str = "LKTCKPT v1";

/// Uniform access to named parameters, in a fixed deterministic order.
pub trait ParamModel<S: Scalar> {
    fn named_parameters(&self) -> Vec<(String, &Tensor<S>)>;
    fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor<S>)>;

    fn num_parameters(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Truncated normal(0, std) with resampling outside ±2 std.
pub(crate) fn trunc_normal<S: Scalar>(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    while data.len() < numel {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            data.push(S::from_f64(z * std));
        }
    }
    let mut t = Tensor::new(shape, data).expect("consistent shape");
    t.set_requires_grad(true);
    t
}

pub(crate) fn init_weight<S: Scalar>(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<S> {
    trunc_normal(shape, INIT_STD, rng)
}

pub(crate) fn init_zeros<S: Scalar>(shape: Vec<usize>) -> Tensor<S> {
    let mut t = Tensor::zeros(shape);
    t.set_requires_grad(true);
    t
}

pub(crate) fn init_ones<S: Scalar>(shape: Vec<usize>) -> Tensor<S> {
    let numel: usize = shape.iter().product();
    let mut t = Tensor::new(shape, vec![S::one(); numel]).expect("consistent shape");
    t.set_requires_grad(true);
    t
}

// ── checkpoint format ───────────────────────────────────────────────
//
// Text manifest followed by raw little-endian blobs:
//
//   LKTCKPT v1
//   config {json}
//   tensor <name> <dtype> <dim> <dim> ...
//   ...
//   end
//   <blobs concatenated in manifest order>

pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    meta: &serde_json::Value,
    tensors: &[(String, &Tensor<S>)],
) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{CHECKPOINT_MAGIC}")?;
    writeln!(out, "config {}", serde_json::to_string(meta)?)?;
    for (name, t) in tensors {
        let dims: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
        writeln!(out, "tensor {name} {} {}", S::DTYPE, dims.join(" "))?;
    }
    writeln!(out, "end")?;
    for (_, t) in tensors {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read only the config block of a checkpoint (to dispatch on kind and
/// precision before a typed load).
pub fn peek_checkpoint_meta(path: &Path) -> Result<serde_json::Value> {
    let (meta, _, _) = read_manifest(path)?;
    Ok(meta)
}

/// (name, dtype, dims) triples from the manifest.
type ManifestEntries = Vec<(String, String, Vec<usize>)>;
/// Named tensors restored from a checkpoint.
pub type NamedTensors<S> = Vec<(String, Tensor<S>)>;

fn read_manifest(path: &Path) -> Result<(serde_json::Value, ManifestEntries, Vec<u8>)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let marker = b"\nend\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| Error::CheckpointFormat("missing manifest terminator".into()))?;
    let text = std::str::from_utf8(&bytes[..end])
        .map_err(|_| Error::CheckpointFormat("manifest is not UTF-8".into()))?;
    let blob = bytes[end + marker.len()..].to_vec();

    let mut lines = text.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(Error::CheckpointFormat(format!(
            "bad magic in {}",
            path.display()
        )));
    }
    let config_line = lines
        .next()
        .ok_or_else(|| Error::CheckpointFormat("missing config line".into()))?;
    let meta: serde_json::Value = serde_json::from_str(
        config_line
            .strip_prefix("config ")
            .ok_or_else(|| Error::CheckpointFormat("missing config prefix".into()))?,
    )?;

    let mut entries = Vec::new();
    for line in lines {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("tensor") => {
                let name = parts
                    .next()
                    .ok_or_else(|| Error::CheckpointFormat("tensor line missing name".into()))?
                    .to_string();
                let dtype = parts
                    .next()
                    .ok_or_else(|| Error::CheckpointFormat("tensor line missing dtype".into()))?
                    .to_string();
                let dims: Vec<usize> = parts
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::CheckpointFormat("bad tensor dims".into()))?;
                entries.push((name, dtype, dims));
            }
            Some(other) => {
                return Err(Error::CheckpointFormat(format!(
                    "unexpected manifest line: {other}"
                )))
            }
            None => {}
        }
    }
    Ok((meta, entries, blob))
}

pub fn load_checkpoint<S: Scalar>(
    path: &Path,
) -> Result<(serde_json::Value, NamedTensors<S>)> {
    let (meta, entries, blob) = read_manifest(path)?;
    let mut expected_bytes = 0usize;
    for (name, dtype, dims) in &entries {
        if dtype != S::DTYPE {
            return Err(Error::CheckpointFormat(format!(
                "tensor {name} has dtype {dtype}, expected {}",
                S::DTYPE
            )));
        }
        expected_bytes += dims.iter().product::<usize>() * S::BYTES;
    }
    if blob.len() != expected_bytes {
        return Err(Error::CheckpointFormat(format!(
            "blob length {} does not match manifest total {expected_bytes}",
            blob.len()
        )));
    }
    let mut tensors = Vec::with_capacity(entries.len());
    let mut offset = 0;
    for (name, _, dims) in entries {
        let numel: usize = dims.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(S::read_le(&blob[offset..offset + S::BYTES]));
            offset += S::BYTES;
        }
        let mut t = Tensor::new(dims, data)?;
        t.set_requires_grad(true);
        tensors.push((name, t));
    }
    Ok((meta, tensors))
}

/// Restore a model's parameters from named checkpoint tensors, checking
/// names and shapes against the freshly initialized layout.
pub(crate) fn assign_parameters<S: Scalar, M: ParamModel<S>>(
    model: &mut M,
    tensors: Vec<(String, Tensor<S>)>,
) -> Result<()> {
    let mut params = model.named_parameters_mut();
    if params.len() != tensors.len() {
        return Err(Error::CheckpointFormat(format!(
            "checkpoint has {} tensors, model expects {}",
            tensors.len(),
            params.len()
        )));
    }
    for ((expect_name, slot), (name, tensor)) in params.iter_mut().zip(tensors) {
        if *expect_name != name {
            return Err(Error::CheckpointFormat(format!(
                "checkpoint tensor {name} where {expect_name} was expected"
            )));
        }
        if slot.shape() != tensor.shape() {
            return Err(Error::CheckpointFormat(format!(
                "tensor {name}: checkpoint shape {:?} vs model shape {:?}",
                tensor.shape(),
                slot.shape()
            )));
        }
        **slot = tensor;
        slot.set_requires_grad(true);
    }
    Ok(())
}
