//! Binary tensor containers, content hashing and run manifests.
//!
//! Layout of a container: an 8-byte little-endian header length, the JSON
//! header, then each tensor's values as little-endian `f64`, concatenated in
//! header order. Offsets in the header are in bytes from the start of the
//! payload. Serializing a loaded container reproduces the input bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ConfounderDictionary, DictionarySet, Modality, ModelBundle, ModelConfig, ParamGroup, ParamStore};
use crate::numkit::Tensor;

pub const CONTAINER_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContainerMeta {
    Checkpoint {
        config: ModelConfig,
        vocab_category_offset: usize,
    },
    Dictionary {
        modality: Modality,
        sample_counts: Vec<u64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub format_version: u32,
    pub meta: ContainerMeta,
    pub tensors: Vec<TensorRecord>,
}

fn encode(meta: ContainerMeta, tensors: &[(&str, ParamGroup, &Tensor)]) -> Result<Vec<u8>> {
    let mut records = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, group, t) in tensors {
        records.push(TensorRecord {
            name: (*name).to_string(),
            group: *group,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 8 * t.len() as u64;
    }
    let header = ContainerHeader {
        format_version: CONTAINER_FORMAT_VERSION,
        meta,
        tensors: records,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<(ContainerHeader, Vec<Tensor>)> {
    if bytes.len() < 8 {
        return Err(Error::Format("container shorter than its length prefix".into()));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(8..8 + hlen)
        .ok_or_else(|| Error::Format("header length exceeds file size".into()))?;
    let header: ContainerHeader = serde_json::from_slice(body)?;
    if header.format_version != CONTAINER_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {}",
            header.format_version
        )));
    }
    let payload = &bytes[8 + hlen..];
    let mut expected = 0u64;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for r in &header.tensors {
        if r.offset != expected {
            return Err(Error::Format(format!("tensor {} not contiguous", r.name)));
        }
        let n: usize = r.shape.iter().product();
        let start = r.offset as usize;
        let raw = payload
            .get(start..start + 8 * n)
            .ok_or_else(|| Error::Format(format!("tensor {} truncated", r.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor::new(r.shape.clone(), data)?);
        expected += 8 * n as u64;
    }
    if expected as usize != payload.len() {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Ok((header, tensors))
}

pub fn checkpoint_bytes(bundle: &ModelBundle) -> Result<Vec<u8>> {
    let tensors: Vec<_> = bundle
        .params()
        .entries()
        .iter()
        .map(|e| (e.name.as_str(), e.group, &e.tensor))
        .collect();
    encode(
        ContainerMeta::Checkpoint {
            config: bundle.config().clone(),
            vocab_category_offset: bundle.vocab_category_offset(),
        },
        &tensors,
    )
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelBundle> {
    let (header, tensors) = decode(bytes)?;
    let ContainerMeta::Checkpoint {
        config,
        vocab_category_offset,
    } = header.meta
    else {
        return Err(Error::Format("container is not a checkpoint".into()));
    };
    let mut store = ParamStore::default();
    for (r, t) in header.tensors.into_iter().zip(tensors) {
        store.push(r.name, r.group, t);
    }
    ModelBundle::from_store(config, store, vocab_category_offset)
}

pub fn save_checkpoint(path: &Path, bundle: &ModelBundle) -> Result<()> {
    write_bytes(path, &checkpoint_bytes(bundle)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    checkpoint_from_bytes(&fs::read(path)?)
}

pub fn dictionary_bytes(d: &ConfounderDictionary) -> Result<Vec<u8>> {
    encode(
        ContainerMeta::Dictionary {
            modality: d.modality,
            sample_counts: d.sample_counts.clone(),
        },
        &[("entries", ParamGroup::Dictionary, &d.entries)],
    )
}

pub fn dictionary_from_bytes(bytes: &[u8]) -> Result<ConfounderDictionary> {
    let (header, mut tensors) = decode(bytes)?;
    let ContainerMeta::Dictionary {
        modality,
        sample_counts,
    } = header.meta
    else {
        return Err(Error::Format("container is not a dictionary".into()));
    };
    if tensors.len() != 1 || tensors[0].shape().len() != 2 || tensors[0].rows() != sample_counts.len() {
        return Err(Error::Format("dictionary container must hold one K×σ tensor".into()));
    }
    Ok(ConfounderDictionary {
        modality,
        entries: tensors.remove(0),
        sample_counts,
    })
}

pub fn save_dictionary(path: &Path, d: &ConfounderDictionary) -> Result<()> {
    write_bytes(path, &dictionary_bytes(d)?)
}

pub fn load_dictionary(path: &Path) -> Result<ConfounderDictionary> {
    dictionary_from_bytes(&fs::read(path)?)
}

/// File names of a dictionary set inside its directory.
pub const DICTIONARY_FILES: [&str; 3] = ["projector_visual.dict", "final_visual.dict", "final_textual.dict"];

fn set_slots(set: &DictionarySet) -> [&Option<ConfounderDictionary>; 3] {
    [&set.projector_visual, &set.final_visual, &set.final_textual]
}

/// Writes every present dictionary of `set` into `dir`; returns the paths.
pub fn save_dictionary_set(dir: &Path, set: &DictionarySet) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (name, slot) in DICTIONARY_FILES.iter().zip(set_slots(set)) {
        if let Some(d) = slot {
            let path = dir.join(name);
            save_dictionary(&path, d)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Reads the dictionaries found in `dir`; absent files leave their slot
/// empty.
pub fn load_dictionary_set(dir: &Path) -> Result<DictionarySet> {
    let load = |name: &str| -> Result<Option<ConfounderDictionary>> {
        let path = dir.join(name);
        if path.exists() {
            load_dictionary(&path).map(Some)
        } else {
            Ok(None)
        }
    };
    Ok(DictionarySet {
        projector_visual: load(DICTIONARY_FILES[0])?,
        final_visual: load(DICTIONARY_FILES[1])?,
        final_textual: load(DICTIONARY_FILES[2])?,
    })
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_vec_pretty(value)?;
    s.push(b'\n');
    write_bytes(path, &s)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Hash of a value's compact JSON encoding.
pub fn config_hash<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value)?))
}

/// Provenance record written next to every set of artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    /// Input path → sha256.
    pub inputs: BTreeMap<String, String>,
    /// Output path (relative to the manifest's directory) → sha256.
    pub outputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, config: serde_json::Value) -> Result<Self> {
        let config_hash = config_hash(&config)?;
        Ok(Self {
            command: command.to_string(),
            config,
            config_hash,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            notes: BTreeMap::new(),
        })
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let h = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), h);
        Ok(())
    }

    /// Hashes every regular file under `dir` (recursively) except the
    /// manifest itself.
    pub fn record_outputs(&mut self, dir: &Path) -> Result<()> {
        let mut stack: Vec<PathBuf> = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            let mut entries: Vec<_> = fs::read_dir(&d)?.collect::<std::io::Result<_>>()?;
            entries.sort_by_key(|e| e.path());
            for e in entries {
                let p = e.path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(dir).unwrap_or(&p).to_string_lossy().replace('\\', "/");
                    if rel == MANIFEST_FILE {
                        continue;
                    }
                    self.outputs.insert(rel, sha256_file(&p)?);
                }
            }
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let p = dir.join(MANIFEST_FILE);
        write_json(&p, self)?;
        Ok(p)
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dictionary_round_trip_is_byte_exact() {
        let d = ConfounderDictionary {
            modality: Modality::Textual,
            entries: Tensor::new(vec![2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5, 1e300, -2.25]).unwrap(),
            sample_counts: vec![4, 9],
        };
        let b = dictionary_bytes(&d).unwrap();
        let back = dictionary_from_bytes(&b).unwrap();
        assert_eq!(dictionary_bytes(&back).unwrap(), b);
        assert_eq!(back.sample_counts, d.sample_counts);
        assert_eq!(back.entries.data()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn truncated_or_padded_containers_are_rejected() {
        let d = ConfounderDictionary {
            modality: Modality::Visual,
            entries: Tensor::zeros(&[1, 2]),
            sample_counts: vec![1],
        };
        let b = dictionary_bytes(&d).unwrap();
        assert!(matches!(dictionary_from_bytes(&b[..b.len() - 1]), Err(Error::Format(_))));
        let mut extra = b.clone();
        extra.push(0);
        assert!(matches!(dictionary_from_bytes(&extra), Err(Error::Format(_))));
        assert!(matches!(dictionary_from_bytes(&b[..4]), Err(Error::Format(_))));
    }

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
