//! Checkpoint file: magic `MILB`, `u32` version, `u64` metadata length, JSON
//! metadata, then every parameter as little-endian `f64` in declaration order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MilModel, ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"MILB";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub rng: Option<Rng>,
    pub epoch: usize,
    pub tensors: Vec<TensorMeta>,
    /// Free-form provenance written by callers (tool version, config hash, ...).
    #[serde(default)]
    pub info: BTreeMap<String, String>,
}

impl CheckpointMeta {
    pub fn for_model<F: Scalar>(model: &MilModel<F>) -> Self {
        Self {
            model: model.config.clone(),
            train: None,
            rng: None,
            epoch: 0,
            tensors: model
                .params
                .iter()
                .map(|(name, t)| TensorMeta {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            info: BTreeMap::new(),
        }
    }
}

/// Writes `model` with `meta`; the tensor list in `meta` is rebuilt from the model.
pub fn write_checkpoint<F: Scalar>(mut out: impl Write, model: &MilModel<F>, meta: &CheckpointMeta) -> Result<()> {
    let mut meta = meta.clone();
    meta.model = model.config.clone();
    meta.tensors = CheckpointMeta::for_model(model).tensors;
    let json = serde_json::to_vec(&meta)?;
    out.write_all(MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    let mut buf = Vec::with_capacity(8 * model.params.num_scalars());
    for t in model.params.values() {
        for &x in t.data() {
            buf.extend_from_slice(&x.as_f64().to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

fn read_exact(input: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    input
        .read_exact(buf)
        .map_err(|e| Error::Format(format!("checkpoint truncated in {what}: {e}")))
}

pub fn read_checkpoint<F: Scalar>(mut input: impl Read) -> Result<(MilModel<F>, CheckpointMeta)> {
    let mut magic = [0u8; 4];
    read_exact(&mut input, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "not a checkpoint: expected magic {:?}, found {:?}",
            String::from_utf8_lossy(MAGIC),
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut word = [0u8; 4];
    read_exact(&mut input, &mut word, "version")?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut len = [0u8; 8];
    read_exact(&mut input, &mut len, "metadata length")?;
    let len = usize::try_from(u64::from_le_bytes(len))
        .map_err(|_| Error::Format("metadata length overflows".into()))?;
    let mut json = vec![0u8; len];
    read_exact(&mut input, &mut json, "metadata")?;
    let meta: CheckpointMeta =
        serde_json::from_slice(&json).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;

    let mut model = MilModel::<F>::new(meta.model.clone(), 0)?;
    let expected = CheckpointMeta::for_model(&model).tensors;
    if expected != meta.tensors {
        return Err(Error::Format(
            "checkpoint tensor list does not match the architecture in its metadata".into(),
        ));
    }
    let mut bytes = vec![0u8; 8 * model.params.num_scalars()];
    read_exact(&mut input, &mut bytes, "tensor data")?;
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after tensor data".into()));
    }
    let mut chunks = bytes.chunks_exact(8);
    for t in model.params.values_mut() {
        let data: Vec<F> = (0..t.len())
            .map(|_| {
                let c = chunks.next().expect("length checked");
                F::lit(f64::from_le_bytes(c.try_into().expect("8 bytes")))
            })
            .collect();
        *t = Tensor::new(t.shape(), data)?;
    }
    Ok((model, meta))
}

pub fn save_checkpoint<F: Scalar>(path: &Path, model: &MilModel<F>, meta: &CheckpointMeta) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(file, model, meta)
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<(MilModel<F>, CheckpointMeta)> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(file)
}
