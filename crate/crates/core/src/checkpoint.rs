//! Model checkpoint container.
//!
//! ```text
//! magic    8 bytes   "MAUTHCKP"
//! version  u32 LE    format version (currently 1)
//! hlen     u64 LE    header length in bytes
//! header   hlen      UTF-8 JSON: kind, dtype, config, manifest, params[{name, shape, trainable}]
//! data               parameter values, row-major, little-endian f32, in header order
//! ```

use std::fs;
use std::path::Path;

use motionauth_nn::{ParamEntry, ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::authenticator::{AuthModel, Classifier, ClassifierConfig};
use crate::data::FeatureScaler;
use crate::error::{CoreError, Result};
use crate::forecaster::Forecaster;

pub const MAGIC: &[u8; 8] = b"MAUTHCKP";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f32";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub dtype: String,
    pub config: Value,
    /// Training manifest: seed, spec, epochs and anything else the caller records.
    pub manifest: Value,
    pub params: Vec<ParamInfo>,
}

pub fn encode(kind: &str, config: Value, manifest: Value, store: &ParamStore<f32>) -> Vec<u8> {
    let header = Header {
        kind: kind.to_string(),
        dtype: DTYPE.to_string(),
        config,
        manifest,
        params: store
            .entries()
            .iter()
            .map(|e| ParamInfo { name: e.name.clone(), shape: e.value.shape().to_vec(), trainable: e.trainable })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out =
        Vec::with_capacity(20 + json.len() + 4 * store.entries().iter().map(|e| e.value.len()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for e in store.entries() {
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(Header, ParamStore<f32>)> {
    let bad = |m: &str| CoreError::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CoreError::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| CoreError::Checkpoint(format!("header: {e}")))?;
    if header.dtype != DTYPE {
        return Err(CoreError::Checkpoint(format!("unsupported dtype {}", header.dtype)));
    }
    let mut data = &bytes[20 + hlen..];
    let mut entries = Vec::with_capacity(header.params.len());
    for p in &header.params {
        let n: usize = p.shape.iter().product();
        let raw = data.get(..4 * n).ok_or_else(|| CoreError::Checkpoint(format!("truncated data for {}", p.name)))?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        data = &data[4 * n..];
        let value = Tensor::new(&p.shape, values).map_err(|e| CoreError::Checkpoint(format!("{}: {e}", p.name)))?;
        entries.push(ParamEntry { name: p.name.clone(), value, trainable: p.trainable });
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes after parameter data"));
    }
    Ok((header, ParamStore::from_entries(entries)))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CoreError::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct ForecasterHeader {
    model: motionauth_nn::ModelConfig,
    session_len: usize,
}

pub fn save_forecaster(path: &Path, model: &Forecaster<f32>, manifest: Value) -> Result<()> {
    let config = serde_json::to_value(ForecasterHeader { model: model.config, session_len: model.session_len })
        .expect("config serializes");
    write(path, &encode("forecaster", config, manifest, &model.store))
}

pub fn load_forecaster(path: &Path) -> Result<(Forecaster<f32>, Value)> {
    let (header, store) = decode(&read(path)?)?;
    if header.kind != "forecaster" {
        return Err(CoreError::Checkpoint(format!("{} holds a {}, not a forecaster", path.display(), header.kind)));
    }
    let cfg: ForecasterHeader =
        serde_json::from_value(header.config).map_err(|e| CoreError::Checkpoint(format!("config: {e}")))?;
    let mut model = Forecaster::new(cfg.model, 0)?;
    model.session_len = cfg.session_len;
    model.store.load_from(&store).map_err(|e| CoreError::Checkpoint(e.to_string()))?;
    Ok((model, header.manifest))
}

#[derive(Serialize, Deserialize)]
struct ClassifierHeader {
    user_id: String,
    classifier: ClassifierConfig,
    scaler: Option<FeatureScaler>,
    metadata: Option<crate::authenticator::TrainingMetadata>,
}

pub fn save_auth_model(path: &Path, model: &AuthModel, manifest: Value) -> Result<()> {
    let config = serde_json::to_value(ClassifierHeader {
        user_id: model.user_id.clone(),
        classifier: model.classifier.config,
        scaler: model.scaler.clone(),
        metadata: model.metadata.clone(),
    })
    .expect("config serializes");
    let kind = format!("classifier/{}", model.classifier.config.variant);
    write(path, &encode(&kind, config, manifest, &model.classifier.store))
}

pub fn load_auth_model(path: &Path) -> Result<(AuthModel, Value)> {
    let (header, store) = decode(&read(path)?)?;
    if !header.kind.starts_with("classifier/") {
        return Err(CoreError::Checkpoint(format!("{} holds a {}, not a classifier", path.display(), header.kind)));
    }
    let cfg: ClassifierHeader =
        serde_json::from_value(header.config).map_err(|e| CoreError::Checkpoint(format!("config: {e}")))?;
    let mut classifier = Classifier::new(cfg.classifier, 0)?;
    classifier.store.load_from(&store).map_err(|e| CoreError::Checkpoint(e.to_string()))?;
    Ok((AuthModel { user_id: cfg.user_id, classifier, scaler: cfg.scaler, metadata: cfg.metadata }, header.manifest))
}
