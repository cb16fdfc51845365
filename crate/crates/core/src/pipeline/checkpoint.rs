//! Versioned container: magic, version, manifest length, JSON manifest,
//! then little-endian `f64` payloads in manifest order.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::Normaliser;
use super::model::{GenCast, ModelState, LLM_TABLE};
use super::{PipelineError, TrainConfig};
use crate::diffcore::Tensor;
use crate::external_signals::WeatherStats;
use crate::losses::PhysicsConfig;
use crate::params::ParamStore;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"GENCAST\0";
const HEADER: usize = 8 + 4 + 8;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    offset: usize,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: TrainConfig,
    physics: PhysicsConfig,
    norm: Normaliser,
    weather_stats: Option<WeatherStats>,
    node_ids: Vec<String>,
    geohashes: Vec<String>,
    rng_seed: Vec<u8>,
    /// Decimal string; JSON numbers cannot carry 128 bits.
    rng_word_pos: String,
    payload_bytes: usize,
    tensors: Vec<TensorEntry>,
}

fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io(format!("{}: {e}", path.display()))
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<(), PipelineError> {
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(state.store.len());
    for e in state.store.entries() {
        let offset = payload.len();
        let bytes: Vec<u8> = e.value.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        tensors.push(TensorEntry {
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
            trainable: e.trainable,
            offset,
            sha256: digest(&bytes),
        });
        payload.extend_from_slice(&bytes);
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        config: state.config.clone(),
        physics: state.physics.clone(),
        norm: state.norm,
        weather_stats: state.weather_stats,
        node_ids: state.node_ids.clone(),
        geohashes: state.geohashes.clone(),
        rng_seed: state.rng_seed.to_vec(),
        rng_word_pos: state.rng_word_pos.to_string(),
        payload_bytes: payload.len(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| PipelineError::Io(e.to_string()))?;
    let mut out = Vec::with_capacity(HEADER + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState, PipelineError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let corrupt = |m: &str| PipelineError::CorruptFile(format!("{}: {m}", path.display()));
    if bytes.len() < HEADER || &bytes[..8] != MAGIC {
        return Err(corrupt("missing header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(PipelineError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let json_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let json_end = HEADER.checked_add(json_len).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("truncated manifest"))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[HEADER..json_end]).map_err(|e| corrupt(&format!("manifest: {e}")))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(PipelineError::VersionMismatch {
            found: manifest.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let payload = &bytes[json_end..];
    if payload.len() != manifest.payload_bytes {
        return Err(corrupt("payload length does not match the manifest"));
    }

    let mut loaded = ParamStore::new();
    for t in &manifest.tensors {
        let len: usize = t.shape.iter().product();
        let end = t.offset + 8 * len;
        let chunk = payload.get(t.offset..end).ok_or_else(|| corrupt(&format!("tensor {} out of range", t.name)))?;
        if digest(chunk) != t.sha256 {
            return Err(corrupt(&format!("checksum mismatch for {}", t.name)));
        }
        let data = chunk
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let value = Tensor::new(t.shape.clone(), data).map_err(|e| corrupt(&e.to_string()))?;
        loaded.add(t.name.clone(), value, t.trainable);
    }

    let table = loaded.find(LLM_TABLE).map(|id| loaded.get(id).clone());
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = GenCast::new(&mut store, &mut rng, &manifest.config.model, manifest.geohashes.clone(), table)?;
    if store.len() != loaded.len() {
        return Err(corrupt("tensor list does not match the model layout"));
    }
    for (fresh, saved) in store.entries().iter().zip(loaded.entries()) {
        if fresh.name != saved.name || fresh.value.shape() != saved.value.shape() {
            return Err(corrupt(&format!("unexpected tensor {}", saved.name)));
        }
    }
    net.sync(&loaded);
    let rng_seed: [u8; 32] = manifest
        .rng_seed
        .as_slice()
        .try_into()
        .map_err(|_| corrupt("rng seed"))?;
    let rng_word_pos = manifest.rng_word_pos.parse().map_err(|_| corrupt("rng position"))?;
    Ok(ModelState {
        config: manifest.config,
        net,
        store: loaded,
        physics: manifest.physics,
        norm: manifest.norm,
        weather_stats: manifest.weather_stats,
        node_ids: manifest.node_ids,
        geohashes: manifest.geohashes,
        rng_seed,
        rng_word_pos,
    })
}

impl ModelState {
    /// Generator positioned where training left it.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::from_seed(self.rng_seed);
        r.set_word_pos(self.rng_word_pos);
        r
    }
}
