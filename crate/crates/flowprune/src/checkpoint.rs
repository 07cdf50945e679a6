//! Shared checkpoint format: a JSON manifest (format_version, spec, keyed
//! entry table) next to a little-endian float32 blob at `<path>.blob`.
//! All writes go through write-then-rename so no partial checkpoint is ever
//! visible.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cond::Condition;
use crate::error::{Error, Result};
use crate::flownet::params::{build_model, Parameters};
use crate::flownet::spec::ModelSpec;
use crate::maskengine::{MaskSet, MaskValues};
use crate::memoria::{Dataset, ExemplarRegistry};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    kind: String,
    spec: serde_json::Value,
    entries: BTreeMap<String, EntryMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryMeta {
    dtype: String,
    shape: Vec<usize>,
    byte_offset: usize,
}

pub fn blob_path(manifest_path: &Path) -> PathBuf {
    let mut os = manifest_path.as_os_str().to_os_string();
    os.push(".blob");
    PathBuf::from(os)
}

/// Write bytes to `path` via a temporary file and rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp~");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct BlobWriter {
    entries: BTreeMap<String, EntryMeta>,
    data: Vec<u8>,
}

impl BlobWriter {
    fn new() -> Self {
        BlobWriter {
            entries: BTreeMap::new(),
            data: Vec::new(),
        }
    }

    fn push(&mut self, key: &str, values: &[f64]) {
        let offset = self.data.len();
        for &v in values {
            self.data.extend_from_slice(&(v as f32).to_le_bytes());
        }
        self.entries.insert(
            key.to_string(),
            EntryMeta {
                dtype: "f32".into(),
                shape: vec![values.len()],
                byte_offset: offset,
            },
        );
    }

    fn finish(self, kind: &str, spec: serde_json::Value, path: &Path) -> Result<()> {
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            spec,
            entries: self.entries,
        };
        atomic_write(&blob_path(path), &self.data)?;
        atomic_write(path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        Ok(())
    }
}

struct BlobReader {
    manifest: Manifest,
    data: Vec<u8>,
}

impl BlobReader {
    fn open(path: &Path, expected_kind: &str) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::config(format!(
                "checkpoint {}: unknown format_version {} (expected {FORMAT_VERSION})",
                path.display(),
                manifest.format_version
            )));
        }
        if manifest.kind != expected_kind {
            return Err(Error::config(format!(
                "checkpoint {}: kind '{}' where '{expected_kind}' expected",
                path.display(),
                manifest.kind
            )));
        }
        let data = fs::read(blob_path(path))?;
        Ok(BlobReader { manifest, data })
    }

    fn read(&self, key: &str) -> Result<Vec<f64>> {
        let meta = self
            .manifest
            .entries
            .get(key)
            .ok_or_else(|| Error::config(format!("checkpoint missing entry '{key}'")))?;
        if meta.dtype != "f32" {
            return Err(Error::config(format!(
                "entry '{key}': unsupported dtype {}",
                meta.dtype
            )));
        }
        let count: usize = meta.shape.iter().product();
        let end = meta.byte_offset + 4 * count;
        if end > self.data.len() {
            return Err(Error::config(format!("entry '{key}': blob truncated")));
        }
        Ok(self.data[meta.byte_offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect())
    }
}

pub fn save_model(path: &Path, params: &Parameters) -> Result<()> {
    let mut w = BlobWriter::new();
    params.visit(|key, arr| w.push(key, arr));
    w.finish("model", serde_json::to_value(params.spec)?, path)
}

pub fn load_model(path: &Path) -> Result<Parameters> {
    let r = BlobReader::open(path, "model")?;
    let spec: ModelSpec = serde_json::from_value(r.manifest.spec.clone())?;
    let mut params = build_model(&spec, 0)?;
    let mut err = None;
    params.visit_mut(|key, arr| {
        if err.is_some() {
            return;
        }
        match r.read(key) {
            Ok(values) if values.len() == arr.len() => *arr = values,
            Ok(_) => err = Some(Error::config(format!("entry '{key}': shape mismatch"))),
            Err(e) => err = Some(e),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(params),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskSpec {
    dims: crate::maskengine::MaskDims,
    gamma: f64,
    delta: f64,
    kinds: Vec<crate::maskengine::MaskKind>,
}

pub fn save_masks(path: &Path, masks: &MaskSet) -> Result<()> {
    let mut w = BlobWriter::new();
    if let Some(arr) = &masks.logits.ffn {
        w.push("mask.ffn", arr);
    }
    if let Some(arr) = &masks.logits.attn {
        w.push("mask.attn", arr);
    }
    if let Some(arr) = &masks.logits.norm {
        w.push("mask.norm", arr);
    }
    let spec = MaskSpec {
        dims: masks.logits.dims,
        gamma: masks.gamma,
        delta: masks.delta,
        kinds: masks.logits.enabled_kinds(),
    };
    w.finish("masks", serde_json::to_value(spec)?, path)
}

pub fn load_masks(path: &Path) -> Result<MaskSet> {
    use crate::maskengine::MaskKind;
    let r = BlobReader::open(path, "masks")?;
    let spec: MaskSpec = serde_json::from_value(r.manifest.spec.clone())?;
    let read_kind = |kind: MaskKind, key: &str| -> Result<Option<Vec<f64>>> {
        if spec.kinds.contains(&kind) {
            let values = r.read(key)?;
            if values.len() != spec.dims.kind_len(kind) {
                return Err(Error::config(format!("entry '{key}': shape mismatch")));
            }
            Ok(Some(values))
        } else {
            Ok(None)
        }
    };
    Ok(MaskSet {
        logits: MaskValues {
            dims: spec.dims,
            ffn: read_kind(MaskKind::Ffn, "mask.ffn")?,
            attn: read_kind(MaskKind::Attn, "mask.attn")?,
            norm: read_kind(MaskKind::Norm, "mask.norm")?,
        },
        gamma: spec.gamma,
        delta: spec.delta,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusSpec {
    latent_dim: usize,
    neutral: Vec<Condition>,
    triggers: Vec<Condition>,
}

pub fn save_corpus(path: &Path, dataset: &Dataset) -> Result<()> {
    let d = dataset.samples.first().map(|(x, _)| x.len()).unwrap_or(0);
    let mut w = BlobWriter::new();
    let mut data = Vec::with_capacity(dataset.samples.len() * d);
    let mut ids = Vec::with_capacity(dataset.samples.len());
    for (x, c) in &dataset.samples {
        data.extend_from_slice(x);
        ids.push(c.id as f64);
    }
    w.push("data", &data);
    w.push("cond_ids", &ids);
    let spec = CorpusSpec {
        latent_dim: d,
        neutral: dataset.neutral.clone(),
        triggers: dataset.triggers.clone(),
    };
    w.finish("corpus", serde_json::to_value(spec)?, path)
}

pub fn load_corpus(path: &Path) -> Result<Dataset> {
    let r = BlobReader::open(path, "corpus")?;
    let spec: CorpusSpec = serde_json::from_value(r.manifest.spec.clone())?;
    let data = r.read("data")?;
    let ids = r.read("cond_ids")?;
    let d = spec.latent_dim;
    if d == 0 || data.len() != ids.len() * d {
        return Err(Error::config(
            "corpus checkpoint: inconsistent data/cond_ids shapes",
        ));
    }
    let lookup = |id: u32| -> Result<Condition> {
        spec.neutral
            .iter()
            .chain(spec.triggers.iter())
            .find(|c| c.id == id)
            .copied()
            .ok_or_else(|| Error::config(format!("corpus checkpoint: unknown condition id {id}")))
    };
    let mut samples = Vec::with_capacity(ids.len());
    for (i, &id) in ids.iter().enumerate() {
        samples.push((data[i * d..(i + 1) * d].to_vec(), lookup(id as u32)?));
    }
    Ok(Dataset {
        samples,
        neutral: spec.neutral,
        triggers: spec.triggers,
    })
}

/// Registry sidecar: plain JSON with a leading format_version.
#[derive(Debug, Serialize, Deserialize)]
struct RegistryFile {
    format_version: u32,
    rms_norm: f64,
    entries: Vec<(Condition, Vec<f64>)>,
}

pub fn save_registry(path: &Path, registry: &ExemplarRegistry) -> Result<()> {
    let file = RegistryFile {
        format_version: FORMAT_VERSION,
        rms_norm: registry.rms_norm,
        entries: registry.entries.clone(),
    };
    atomic_write(path, serde_json::to_string_pretty(&file)?.as_bytes())
}

pub fn load_registry(path: &Path) -> Result<ExemplarRegistry> {
    let file: RegistryFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    if file.format_version != FORMAT_VERSION {
        return Err(Error::config(format!(
            "registry {}: unknown format_version {}",
            path.display(),
            file.format_version
        )));
    }
    Ok(ExemplarRegistry {
        entries: file.entries,
        rms_norm: file.rms_norm,
    })
}
