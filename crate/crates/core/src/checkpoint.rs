//! Checkpoint directories: `manifest.json` lists every parameter's name,
//! shape and byte offset into `params.bin` (little-endian `f32`);
//! `config.json` holds the run configuration plus seed, precision and
//! thread count.
//!
//! Saving writes a sibling temporary directory and renames it into place,
//! so an interrupted save never leaves a partial checkpoint at the target.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `params.bin`.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub params: Vec<ManifestEntry>,
    pub total_bytes: usize,
}

/// Contents of `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub run: RunConfig,
    pub seed: u64,
    pub precision: String,
    pub threads: usize,
    /// Optimizer steps taken.
    pub step: usize,
}

pub struct Checkpoint {
    pub params: ParamStore<f32>,
    pub config: CheckpointConfig,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("checkpoint metadata serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn temp_sibling(dir: &Path, tag: &str) -> PathBuf {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "checkpoint".into());
    dir.with_file_name(format!(".{name}.{tag}-{}", std::process::id()))
}

pub fn save(dir: &Path, params: &ParamStore<f32>, config: &CheckpointConfig) -> Result<()> {
    let mut entries = Vec::with_capacity(params.len());
    let mut blob = Vec::with_capacity(params.num_values() * 4);
    for (name, t) in params.iter() {
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        params: entries,
        total_bytes: blob.len(),
    };

    if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = temp_sibling(dir, "tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let bin = tmp.join(PARAMS_FILE);
    fs::write(&bin, &blob).map_err(|e| Error::io(&bin, e))?;
    write_json(&tmp.join(MANIFEST_FILE), &manifest)?;
    write_json(&tmp.join(CONFIG_FILE), config)?;

    // A directory cannot be renamed over a non-empty one, so an existing
    // checkpoint is moved aside first and removed once the new one is in.
    let old = temp_sibling(dir, "old");
    let replaced = dir.exists();
    if replaced {
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    if replaced {
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    let config: CheckpointConfig = read_json(&dir.join(CONFIG_FILE))?;
    let bin = dir.join(PARAMS_FILE);
    let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if blob.len() != manifest.total_bytes {
        return Err(Error::io(
            &bin,
            std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                format!("expected {} bytes, found {}", manifest.total_bytes, blob.len()),
            ),
        ));
    }
    let mut params = ParamStore::new();
    for e in &manifest.params {
        let n: usize = e.shape.iter().product();
        let bytes = blob
            .get(e.offset..e.offset + 4 * n)
            .ok_or_else(|| Error::Data(format!("parameter {} lies outside {}", e.name, bin.display())))?;
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)?;
    }
    Ok(Checkpoint { params, config })
}

/// Reads only the parameter names and shapes.
pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    read_json(&dir.join(MANIFEST_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imfa::init_params;

    fn sample() -> (ParamStore<f32>, CheckpointConfig) {
        let run = RunConfig::default();
        let params = init_params::<f32>(&run.model, 1).unwrap();
        let config = CheckpointConfig {
            run,
            seed: 1,
            precision: "f32".into(),
            threads: 1,
            step: 0,
        };
        (params, config)
    }

    #[test]
    fn round_trip_preserves_every_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let (params, config) = sample();
        save(&path, &params, &config).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.params.names(), params.names());
        for (a, b) in back.params.tensors().iter().zip(params.tensors()) {
            assert_eq!(a.shape(), b.shape());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.config, config);
    }

    #[test]
    fn manifest_offsets_are_contiguous() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let (params, config) = sample();
        save(&path, &params, &config).unwrap();
        let m = load_manifest(&path).unwrap();
        let mut next = 0;
        for e in &m.params {
            assert_eq!(e.offset, next);
            next += 4 * e.shape.iter().product::<usize>();
        }
        assert_eq!(next, m.total_bytes);
        assert_eq!(fs::metadata(path.join(PARAMS_FILE)).unwrap().len() as usize, next);
    }

    #[test]
    fn saves_are_byte_identical_and_replace_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let (params, config) = sample();
        save(&a, &params, &config).unwrap();
        save(&b, &params, &config).unwrap();
        save(&b, &params, &config).unwrap();
        for f in [MANIFEST_FILE, PARAMS_FILE, CONFIG_FILE] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
        }
        // No temporary directories are left behind.
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 2, "{names:?}");
    }

    #[test]
    fn truncated_params_are_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let (params, config) = sample();
        save(&path, &params, &config).unwrap();
        let bin = path.join(PARAMS_FILE);
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load(&path), Err(Error::Io { .. })));
        assert!(matches!(load(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
