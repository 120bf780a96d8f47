//! Named parameter sets on disk: one tensor record file per parameter and a
//! `manifest` of `key=value` lines with SHA-256 checksums.
//!
//! Writes go to a sibling staging directory that replaces the target only
//! once every file is complete, so a failed save leaves the previous
//! checkpoint intact.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::kv::{format_shape, parse_shape, KeyValues};
use crate::nn::ParamSet;
use crate::tensor::Tensor;
use crate::tensor_io::{decode_record, encode_record, read_file, sha256_hex, write_file};

pub const FORMAT_TAG: &str = "coherence-lab-checkpoint";
pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub sets: IndexMap<String, ParamSet<f32>>,
    /// Free-form metadata (step counters, optimizer settings, ...).
    pub meta: KeyValues,
}

impl Checkpoint {
    pub fn insert(&mut self, name: &str, params: &ParamSet<f32>) {
        self.sets.insert(name.to_string(), params.clone());
    }

    pub fn set(&self, name: &str) -> Result<&ParamSet<f32>> {
        self.sets.get(name).ok_or_else(|| Error::Missing(format!("checkpoint has no parameter set {name:?}")))
    }
}

fn file_name(set: &str, param: &str) -> String {
    format!("{set}__{param}.bin")
}

fn staging_path(dir: &Path, suffix: &str) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    dir.with_file_name(name)
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    let staging = staging_path(dir, ".partial");
    if staging.exists() {
        std::fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    std::fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    let mut kv = KeyValues::new();
    kv.set("format", FORMAT_TAG);
    kv.set("version", FORMAT_VERSION);
    kv.set("sets", ckpt.sets.keys().cloned().collect::<Vec<_>>().join(","));
    for (set, params) in &ckpt.sets {
        kv.set(format!("set.{set}.names"), params.names().collect::<Vec<_>>().join(","));
        for (name, t) in params.iter() {
            let mut bytes = Vec::new();
            encode_record(t.shape(), t.data(), &mut bytes)?;
            let file = file_name(set, name);
            write_file(&staging.join(&file), &bytes)?;
            kv.set(format!("param.{set}.{name}.shape"), format_shape(t.shape()));
            kv.set(format!("param.{set}.{name}.sha256"), sha256_hex(&bytes));
        }
    }
    for (k, v) in ckpt.meta.iter() {
        kv.set(format!("meta.{k}"), v);
    }
    write_file(&staging.join(MANIFEST), kv.render().as_bytes())?;
    let old = staging_path(dir, ".old");
    if dir.exists() {
        if old.exists() {
            std::fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        }
        std::fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))?;
    if old.exists() {
        std::fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.exists() {
        return Err(Error::Missing(format!("no checkpoint manifest at {}", manifest_path.display())));
    }
    let text = String::from_utf8(read_file(&manifest_path)?)
        .map_err(|_| Error::Format { path: manifest_path.clone(), reason: "manifest is not UTF-8".into() })?;
    let fmt = |reason: String| Error::Format { path: manifest_path.clone(), reason };
    let kv = KeyValues::parse(&text).map_err(|e| fmt(e.to_string()))?;
    if kv.get("format") != Some(FORMAT_TAG) {
        return Err(fmt(format!("unknown format tag {:?}", kv.get("format"))));
    }
    let version: u32 = kv.parse_value("version").map_err(|e| fmt(e.to_string()))?;
    if version != FORMAT_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let mut ckpt = Checkpoint::default();
    let sets = kv.require("sets").map_err(|e| fmt(e.to_string()))?;
    for set in sets.split(',').filter(|s| !s.is_empty()) {
        let names = kv.require(&format!("set.{set}.names")).map_err(|e| fmt(e.to_string()))?;
        let mut params = ParamSet::new();
        for name in names.split(',').filter(|s| !s.is_empty()) {
            let path = dir.join(file_name(set, name));
            let bytes = read_file(&path)?;
            let expected = kv.require(&format!("param.{set}.{name}.sha256")).map_err(|e| fmt(e.to_string()))?;
            if sha256_hex(&bytes) != expected {
                return Err(Error::Corruption { path, reason: "parameter checksum mismatch".into() });
            }
            let shape = parse_shape(kv.require(&format!("param.{set}.{name}.shape")).map_err(|e| fmt(e.to_string()))?)?;
            let (rec, end) = decode_record(&bytes, 0, &path)?;
            if end != bytes.len() || rec.dims != shape {
                return Err(Error::Corruption { path, reason: format!("record shape {:?} vs manifest {shape:?}", rec.dims) });
            }
            params.insert(name, Tensor::new(&rec.dims, rec.data)?);
        }
        ckpt.sets.insert(set.to_string(), params);
    }
    for (k, v) in kv.iter() {
        if let Some(meta) = k.strip_prefix("meta.") {
            ckpt.meta.set(meta, v);
        }
    }
    Ok(ckpt)
}
