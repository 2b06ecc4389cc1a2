//! Checkpoint persistence.
//!
//! Layout: 4-byte magic `DLO1`, 4-byte version (u32 LE), 8-byte header
//! length (u64 LE), a JSON manifest of that length, then the raw
//! little-endian scalar payload. Offsets in the manifest are relative to
//! the payload start. Files are written to `<path>.tmp` and renamed so a
//! crash never leaves a corrupt final file.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DloError, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::router::RouterParams;
use crate::tensor::{Dtype, Scalar, Tensor};
use crate::trainer::{AdamWConfig, OptimState, SparsitySchedule};

pub const MAGIC: &[u8; 4] = b"DLO1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub offset: u64,
    pub len_bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RouterMeta {
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    /// Human-readable record of the expansion spec applied, if any.
    pub expansion: Option<String>,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimMeta {
    pub step: u64,
    pub adamw: AdamWConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub dtype: Dtype,
    pub model: ModelConfig,
    pub router: RouterMeta,
    pub schedule: SparsitySchedule,
    pub entries: Vec<TensorEntry>,
    pub provenance: Provenance,
    pub optim: Option<OptimMeta>,
}

pub struct Checkpoint<E: Scalar> {
    pub model: ModelParams<E>,
    pub routers: Option<RouterParams<E>>,
    pub schedule: SparsitySchedule,
    pub optim: Option<OptimState<E>>,
    pub provenance: Provenance,
}

fn collect_tensors<E: Scalar>(ckpt: &Checkpoint<E>) -> Vec<(String, Tensor<E>)> {
    let mut named = ckpt.model.named_tensors();
    if let Some(routers) = &ckpt.routers {
        for (i, w) in routers.weights.iter().enumerate() {
            named.push((format!("router.{i}.w"), w.clone()));
        }
    }
    named
}

pub fn save<E: Scalar>(ckpt: &Checkpoint<E>, path: &Path) -> Result<()> {
    let named = collect_tensors(ckpt);
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let elem = E::DTYPE.size_bytes() as u64;
    let mut push_entry = |name: String, shape: Vec<usize>, data: &[E], payload: &mut Vec<u8>| {
        let offset = payload.len() as u64;
        for &v in data {
            v.write_le(payload);
        }
        entries.push(TensorEntry {
            name,
            shape,
            dtype: E::DTYPE,
            offset,
            len_bytes: data.len() as u64 * elem,
        });
    };
    for (name, t) in &named {
        push_entry(name.clone(), t.shape().to_vec(), &t.data(), &mut payload);
    }
    if let Some(optim) = &ckpt.optim {
        for (name, _) in &named {
            if let Some(m) = optim.m.get(name) {
                push_entry(format!("optim.m.{name}"), vec![m.len()], m, &mut payload);
            }
            if let Some(v) = optim.v.get(name) {
                push_entry(format!("optim.v.{name}"), vec![v.len()], v, &mut payload);
            }
        }
    }

    let (beta, gamma) = match &ckpt.routers {
        Some(r) => (r.beta, r.gamma),
        None => (crate::router::DEFAULT_BETA, crate::router::DEFAULT_GAMMA),
    };
    let manifest = Manifest {
        version: VERSION,
        dtype: E::DTYPE,
        model: ckpt.model.config.clone(),
        router: RouterMeta { beta, gamma },
        schedule: ckpt.schedule.clone(),
        entries,
        provenance: ckpt.provenance.clone(),
        optim: ckpt.optim.as_ref().map(|o| OptimMeta {
            step: o.step,
            adamw: o.config.clone(),
        }),
    };
    let header = serde_json::to_vec(&manifest)
        .map_err(|e| DloError::Format(format!("manifest encode failed: {e}")))?;

    let tmp = path.with_extension("tmp");
    let io_err = |e| DloError::io(tmp.display().to_string(), e);
    {
        let mut f = fs::File::create(&tmp).map_err(io_err)?;
        f.write_all(MAGIC).map_err(io_err)?;
        f.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
        f.write_all(&(header.len() as u64).to_le_bytes()).map_err(io_err)?;
        f.write_all(&header).map_err(io_err)?;
        f.write_all(&payload).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
    }
    fs::rename(&tmp, path).map_err(|e| DloError::io(path.display().to_string(), e))
}

/// Parse only the manifest, e.g. to learn the payload dtype before
/// choosing a scalar type for `load`.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = fs::read(path).map_err(|e| DloError::io(path.display().to_string(), e))?;
    parse_manifest(&bytes).map(|(m, _)| m)
}

/// Decode the framing and manifest of an in-memory checkpoint image.
/// Returns the manifest and the payload start offset.
pub fn parse_manifest(bytes: &[u8]) -> Result<(Manifest, usize)> {
    if bytes.len() < 16 {
        return Err(DloError::Format("not a DLO checkpoint (file too short)".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(DloError::Format("not a DLO checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(DloError::Format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let payload_start = usize::try_from(header_len)
        .ok()
        .and_then(|h| h.checked_add(16))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| DloError::Format("truncated header".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| DloError::Format(format!("manifest decode failed: {e}")))?;
    Ok((manifest, payload_start))
}

fn read_entry<E: Scalar>(entry: &TensorEntry, payload: &[u8]) -> Result<Vec<E>> {
    let elem = entry.dtype.size_bytes();
    let span = entry.offset.checked_add(entry.len_bytes);
    let (start, end) = match span {
        Some(e) if e <= payload.len() as u64 => (entry.offset as usize, e as usize),
        _ => {
            return Err(DloError::Format(format!(
                "truncated payload: entry '{}' exceeds the {}-byte payload",
                entry.name,
                payload.len()
            )))
        }
    };
    let count = (end - start) / elem;
    let expected = entry
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d));
    if expected != Some(count) {
        return Err(DloError::Format(format!(
            "integrity error: entry '{}' shape {:?} disagrees with byte length {}",
            entry.name, entry.shape, entry.len_bytes
        )));
    }
    Ok((0..count)
        .map(|i| E::read_le(&payload[start + i * elem..]))
        .collect())
}

pub fn load<E: Scalar>(path: &Path) -> Result<Checkpoint<E>> {
    let bytes = fs::read(path).map_err(|e| DloError::io(path.display().to_string(), e))?;
    load_bytes(&bytes)
}

/// Decode a full checkpoint from an in-memory image. All manifest claims
/// (shapes, offsets, byte lengths) are validated against the payload before
/// any tensor is materialized.
pub fn load_bytes<E: Scalar>(bytes: &[u8]) -> Result<Checkpoint<E>> {
    let (manifest, payload_start) = parse_manifest(bytes)?;
    if manifest.dtype != E::DTYPE {
        return Err(DloError::Format(format!(
            "checkpoint dtype is {}, loader expects {}",
            manifest.dtype,
            E::DTYPE
        )));
    }
    let payload = &bytes[payload_start..];

    // offsets must be non-overlapping and in-bounds
    let mut spans: Vec<(u64, u64, &str)> = manifest
        .entries
        .iter()
        .map(|e| (e.offset, e.offset.saturating_add(e.len_bytes), e.name.as_str()))
        .collect();
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[0].1 > w[1].0 {
            return Err(DloError::Format(format!(
                "integrity error: entries '{}' and '{}' overlap",
                w[0].2, w[1].2
            )));
        }
    }

    let by_name: HashMap<&str, &TensorEntry> = manifest
        .entries
        .iter()
        .map(|e| (e.name.as_str(), e))
        .collect();
    let get = |name: &str| -> Result<&TensorEntry> {
        by_name
            .get(name)
            .copied()
            .ok_or_else(|| DloError::Format(format!("missing tensor entry '{name}'")))
    };
    let load_param = |name: &str, shape: &[usize]| -> Result<Tensor<E>> {
        let entry = get(name)?;
        if entry.dtype != manifest.dtype {
            return Err(DloError::Format(format!("entry '{name}' dtype mismatch")));
        }
        if entry.shape != shape {
            return Err(DloError::Format(format!(
                "entry '{name}' shape {:?} disagrees with config {shape:?}",
                entry.shape
            )));
        }
        Ok(Tensor::param(shape, read_entry(entry, payload)?))
    };

    let cfg = manifest.model.clone();
    cfg.validate()?;
    let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab);
    // No preallocation: n_layers is attacker-controlled until the first
    // missing-entry error fires.
    let mut layers = Vec::new();
    for i in 0..cfg.n_layers {
        let p = |s: &str| format!("layers.{i}.{s}");
        layers.push(crate::model::LayerParams {
            attn: crate::model::AttnParams {
                wq: load_param(&p("attn.wq"), &[d, d])?,
                wk: load_param(&p("attn.wk"), &[d, d])?,
                wv: load_param(&p("attn.wv"), &[d, d])?,
                w_out: load_param(&p("attn.w_out"), &[d, d])?,
            },
            mlp: crate::model::MlpParams {
                w_gate: load_param(&p("mlp.w_gate"), &[d, f])?,
                w_up: load_param(&p("mlp.w_up"), &[d, f])?,
                w_down: load_param(&p("mlp.w_down"), &[f, d])?,
            },
            norm1: load_param(&p("norm1"), &[d])?,
            norm2: load_param(&p("norm2"), &[d])?,
        });
    }
    let model = ModelParams {
        embed: load_param("embed", &[v, d])?,
        final_norm: load_param("final_norm", &[d])?,
        head: load_param("head", &[d, v])?,
        layers,
        config: cfg.clone(),
    };

    let routers = if by_name.contains_key("router.0.w") {
        let mut r = RouterParams::zeros(cfg.n_layers, d, manifest.router.beta, manifest.router.gamma)?;
        for i in 0..cfg.n_layers {
            r.weights[i] = load_param(&format!("router.{i}.w"), &[d, 1])?;
        }
        Some(r)
    } else {
        None
    };

    let optim = match &manifest.optim {
        Some(meta) => {
            let mut m = HashMap::new();
            let mut vv = HashMap::new();
            for entry in &manifest.entries {
                if let Some(name) = entry.name.strip_prefix("optim.m.") {
                    m.insert(name.to_string(), read_entry::<E>(entry, payload)?);
                } else if let Some(name) = entry.name.strip_prefix("optim.v.") {
                    vv.insert(name.to_string(), read_entry::<E>(entry, payload)?);
                }
            }
            Some(OptimState {
                config: meta.adamw.clone(),
                step: meta.step,
                m,
                v: vv,
            })
        }
        None => None,
    };

    Ok(Checkpoint {
        model,
        routers,
        schedule: manifest.schedule.clone(),
        optim,
        provenance: manifest.provenance.clone(),
    })
}
