//! `LSFC` checkpoint container: magic, `u32` version, `u32` metadata length,
//! UTF-8 JSON metadata, then tensors (`u32` name length, name bytes, `u32`
//! rank, `u32` dims, raw f32 data) until end of file. All little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde_json::{json, Value};

use super::{Architecture, Mlp, NetParams, NetSpec};
use crate::codec::{Reader, Writer};
use crate::error::{DecodeError, Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LSFC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named networks plus free-form JSON metadata (seeds, hashes, configs).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: Value,
    pub components: BTreeMap<String, Mlp>,
}

struct Tensor {
    name: String,
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Checkpoint {
    pub fn new(metadata: Value) -> Self {
        Self {
            metadata,
            components: BTreeMap::new(),
        }
    }

    pub fn with(mut self, name: &str, net: Mlp) -> Self {
        self.components.insert(name.to_string(), net);
        self
    }

    pub fn get(&self, name: &str) -> Result<&Mlp> {
        self.components
            .get(name)
            .ok_or_else(|| Error::Shape(format!("checkpoint has no component `{name}`")))
    }

    /// Component `name`, rejected unless its topology equals `expected`.
    pub fn get_expecting(&self, name: &str, expected: &Architecture) -> Result<&Mlp> {
        let net = self.get(name)?;
        if &net.spec.arch != expected {
            return Err(Error::Shape(format!(
                "component `{name}` has architecture {:?}, expected {:?}",
                net.spec.arch, expected
            )));
        }
        Ok(net)
    }

    fn tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for (name, net) in &self.components {
            let d = net.input_dim();
            out.push(Tensor {
                name: format!("{name}/input_mean"),
                dims: vec![d],
                data: net.spec.input_mean.clone(),
            });
            out.push(Tensor {
                name: format!("{name}/input_std"),
                dims: vec![d],
                data: net.spec.input_std.clone(),
            });
            for (i, (w, b)) in net.params.weights.iter().zip(&net.params.biases).enumerate() {
                out.push(Tensor {
                    name: format!("{name}/w{i}"),
                    dims: w.shape().to_vec(),
                    data: w.as_slice().expect("standard layout").to_vec(),
                });
                out.push(Tensor {
                    name: format!("{name}/b{i}"),
                    dims: vec![b.len()],
                    data: b.to_vec(),
                });
            }
        }
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let tensors = self.tensors();
        let archs: BTreeMap<&String, &Architecture> = self.components.iter().map(|(k, v)| (k, &v.spec.arch)).collect();
        let header = json!({
            "components": archs,
            "metadata": self.metadata,
            "tensor_count": tensors.len(),
        });
        let header = serde_json::to_vec(&header).expect("metadata serializes");
        let mut w = Writer::default();
        w.bytes(&CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u32(header.len() as u32);
        w.bytes(&header);
        for t in tensors {
            w.u32(t.name.len() as u32);
            w.bytes(t.name.as_bytes());
            w.u32(t.dims.len() as u32);
            for d in &t.dims {
                w.u32(*d as u32);
            }
            w.f32_slice(&t.data);
        }
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let len = r.u32("metadata length")? as usize;
        let header: Value = serde_json::from_slice(r.take(len, "metadata")?)
            .map_err(|e| DecodeError::Invalid(format!("metadata json: {e}")))?;
        let archs: BTreeMap<String, Architecture> = serde_json::from_value(header["components"].clone())
            .map_err(|e| DecodeError::Invalid(format!("component table: {e}")))?;
        let expected_count = header["tensor_count"]
            .as_u64()
            .ok_or_else(|| DecodeError::Invalid("missing tensor_count".into()))? as usize;

        let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
        while !r.is_at_end() {
            let n = r.u32("tensor name length")? as usize;
            let name = String::from_utf8(r.take(n, "tensor name")?.to_vec())
                .map_err(|_| DecodeError::Invalid("tensor name is not utf-8".into()))?;
            let rank = r.u32("tensor rank")? as usize;
            if rank > 4 {
                return Err(DecodeError::Invalid(format!("tensor `{name}` has rank {rank}")));
            }
            let dims = (0..rank)
                .map(|_| r.u32("tensor dims").map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let count = dims.iter().product();
            let data = r.f32_vec(count, "tensor data")?;
            tensors.insert(name.clone(), Tensor { name, dims, data });
        }
        if tensors.len() != expected_count {
            return Err(DecodeError::Invalid(format!(
                "found {} tensors, metadata declares {expected_count}",
                tensors.len()
            )));
        }

        let mut take = |name: String, dims: Vec<usize>| -> Result<Vec<f32>, DecodeError> {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| DecodeError::Invalid(format!("missing tensor `{name}`")))?;
            if t.dims != dims {
                return Err(DecodeError::Invalid(format!(
                    "tensor `{}` has dims {:?}, expected {dims:?}",
                    t.name, t.dims
                )));
            }
            Ok(t.data)
        };
        let mut components = BTreeMap::new();
        for (name, arch) in archs {
            let d = arch.input_dim;
            let mean = take(format!("{name}/input_mean"), vec![d])?;
            let std = take(format!("{name}/input_std"), vec![d])?;
            let mut weights = Vec::new();
            let mut biases = Vec::new();
            let mut fan_in = d;
            for (i, l) in arch.layers.iter().enumerate() {
                let w = take(format!("{name}/w{i}"), vec![fan_in, l.width])?;
                let b = take(format!("{name}/b{i}"), vec![l.width])?;
                weights.push(Array2::from_shape_vec((fan_in, l.width), w).expect("dims checked"));
                biases.push(Array1::from(b));
                fan_in = l.width;
            }
            let spec = NetSpec::with_normalization(arch, mean, std).map_err(|e| DecodeError::Invalid(e.to_string()))?;
            let net = Mlp::from_parts(spec, NetParams { weights, biases }).map_err(|e| DecodeError::Invalid(e.to_string()))?;
            components.insert(name, net);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(DecodeError::Invalid(format!("unexpected tensor `{extra}`")));
        }
        Ok(Self {
            metadata: header["metadata"].clone(),
            components,
        })
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ck.encode())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    Checkpoint::decode(&bytes).map_err(|e| Error::decode(path.display().to_string(), e))
}
