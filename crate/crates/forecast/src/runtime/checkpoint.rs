//! Binary checkpoint format.
//!
//! Layout: magic "FCKP", u32 version, u64 manifest length, manifest JSON,
//! raw little-endian parameter payload. The manifest carries per-parameter
//! (name, shape, dtype, offset, len, trainable), the train config snapshot,
//! the rng state, and a sha256 of the payload. A checksum or manifest
//! failure aborts the load before any value is applied.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ndgrad::{Array, Scalar};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::WorldModel;

const MAGIC: &[u8; 4] = b"FCKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_stream: u64,
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    len: usize,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    params: Vec<ParamRecord>,
    config: TrainConfig,
    rng: RngState,
    payload_sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save<T: Scalar>(model: &WorldModel<T>, rng: &RngState, path: &Path) -> Result<()> {
    let mut payload = Vec::new();
    let mut params = Vec::new();
    for (_, entry) in model.store.iter() {
        let offset = payload.len();
        for &v in entry.value.data() {
            v.write_le(&mut payload);
        }
        params.push(ParamRecord {
            name: entry.name.clone(),
            shape: entry.value.shape().to_vec(),
            dtype: T::DTYPE.name().to_string(),
            offset,
            len: payload.len() - offset,
            trainable: entry.trainable,
        });
    }
    let manifest = Manifest {
        version: VERSION,
        params,
        config: model.cfg.clone(),
        rng: rng.clone(),
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let manifest_json =
        serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    let mut out = Vec::with_capacity(16 + manifest_json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    out.extend_from_slice(&payload);
    std::fs::write(path, out).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Rebuild the model from the stored config, then overwrite every parameter
/// from the verified payload. Forward outputs reproduce bit-for-bit on the
/// same platform.
pub fn load<T: Scalar>(path: &Path) -> Result<(WorldModel<T>, RngState)> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "version mismatch: file {version}, supported {VERSION}"
        )));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if 16 + mlen > bytes.len() {
        return Err(Error::Checkpoint("truncated manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + mlen])
        .map_err(|e| Error::Checkpoint(format!("manifest parse: {e}")))?;
    let payload = &bytes[16 + mlen..];

    if hex(&Sha256::digest(payload)) != manifest.payload_sha256 {
        return Err(Error::Checkpoint("payload checksum mismatch".into()));
    }

    // offsets must tile the payload without overlap
    let mut spans: Vec<(usize, usize)> = manifest.params.iter().map(|p| (p.offset, p.len)).collect();
    spans.sort_unstable();
    let mut cursor = 0usize;
    for (off, len) in &spans {
        if *off < cursor || off + len > payload.len() {
            return Err(Error::Checkpoint("overlapping or out-of-range param spans".into()));
        }
        cursor = off + len;
    }

    let model = WorldModel::<T>::new(&manifest.config)?;
    let elem = T::DTYPE.size_of();
    let mut model = model;
    for rec in &manifest.params {
        if rec.dtype != T::DTYPE.name() {
            return Err(Error::Checkpoint(format!(
                "param {} has dtype {}, expected {}",
                rec.name,
                rec.dtype,
                T::DTYPE.name()
            )));
        }
        let id = model
            .store
            .id_of(&rec.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter '{}'", rec.name)))?;
        if model.store.is_trainable(id) != rec.trainable {
            return Err(Error::Checkpoint(format!(
                "parameter '{}' trainable flag mismatch",
                rec.name
            )));
        }
        let n: usize = rec.shape.iter().product();
        if n * elem != rec.len {
            return Err(Error::Checkpoint(format!(
                "parameter '{}' length mismatch",
                rec.name
            )));
        }
        let chunk = &payload[rec.offset..rec.offset + rec.len];
        let data: Vec<T> = (0..n).map(|i| T::read_le(&chunk[i * elem..])).collect();
        let arr = Array::from_vec(rec.shape.clone(), data)
            .map_err(|e| Error::Checkpoint(format!("param {}: {e}", rec.name)))?;
        model
            .store
            .set_value(id, arr)
            .map_err(|e| Error::Checkpoint(format!("param {}: {e}", rec.name)))?;
    }
    if manifest.params.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} params, model expects {}",
            manifest.params.len(),
            model.store.len()
        )));
    }
    Ok((model, manifest.rng))
}
