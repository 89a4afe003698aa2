//! Parameter blobs with a JSON sidecar.
//!
//! Blob layout (little endian): magic `PDRCKPT1`, `u32` tensor count, then per
//! tensor `u32` name length, UTF-8 name, `u32` rank, `u64` dims, `f32` data.
//! The sidecar sits next to the blob with extension `.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PanoError, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::nn::{ParamBuilder, ParamStore};
use crate::structure::{StructureNet, StructureNetConfig};
use crate::supervision::{Discriminator, DiscriminatorConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PDRCKPT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Structure,
    Generator,
    Discriminator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub kind: ModelKind,
    pub config: serde_json::Value,
    pub step: usize,
    #[serde(default)]
    pub metrics: Vec<serde_json::Value>,
    pub param_count: usize,
    /// SHA-256 of the blob.
    pub fingerprint: String,
}

pub fn sidecar_path(blob: &Path) -> PathBuf {
    blob.with_extension("json")
}

fn encode(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * store.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.names().iter().zip(store.tensors()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode(path: &Path, bytes: &[u8]) -> Result<ParamStore<f32>> {
    let bad = |reason: &str| PanoError::Checkpoint { path: path.to_path_buf(), reason: reason.to_string() };
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated blob"))?;
        pos += n;
        Ok(s)
    };
    if take(8)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize;
    let count = u32_at(take(4)?);
    let (mut names, mut tensors) = (Vec::with_capacity(count), Vec::with_capacity(count));
    for _ in 0..count {
        let len = u32_at(take(4)?);
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("non UTF-8 name"))?;
        let rank = u32_at(take(4)?);
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize);
        }
        let n: usize = shape.iter().product();
        let data = take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        names.push(name);
        tensors.push(Tensor::new(&shape, data));
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(ParamStore::from_parts(names, tensors))
}

pub fn save(path: &Path, store: &ParamStore<f32>, kind: ModelKind, config: serde_json::Value, step: usize, metrics: Vec<serde_json::Value>) -> Result<Sidecar> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let blob = encode(store);
    let sidecar = Sidecar { kind, config, step, metrics, param_count: store.numel(), fingerprint: hex::encode(Sha256::digest(&blob)) };
    fs::write(path, &blob)?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(sidecar)
}

/// Reads a blob and its sidecar, verifying the fingerprint.
pub fn load(path: &Path) -> Result<(ParamStore<f32>, Sidecar)> {
    let bytes = fs::read(path)?;
    let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    if hex::encode(Sha256::digest(&bytes)) != sidecar.fingerprint {
        return Err(PanoError::Checkpoint { path: path.to_path_buf(), reason: "fingerprint mismatch".into() });
    }
    Ok((decode(path, &bytes)?, sidecar))
}

/// Checks that `store` has exactly the names and shapes `pb` would create.
pub fn check_layout(path: &Path, store: &ParamStore<f32>, pb: &ParamBuilder) -> Result<()> {
    let fresh = pb.init::<f32>(0);
    let mismatch = store.len() != fresh.len()
        || store.names() != fresh.names()
        || store.tensors().iter().zip(fresh.tensors()).any(|(a, b)| a.shape() != b.shape());
    if mismatch {
        return Err(PanoError::Checkpoint { path: path.to_path_buf(), reason: "parameters do not match the configured architecture".into() });
    }
    Ok(())
}

fn expect_kind(path: &Path, sc: &Sidecar, kind: ModelKind) -> Result<()> {
    if sc.kind != kind {
        return Err(PanoError::Checkpoint { path: path.to_path_buf(), reason: format!("expected a {kind:?} checkpoint, found {:?}", sc.kind) });
    }
    Ok(())
}

fn parse_config<C: serde::de::DeserializeOwned>(path: &Path, v: &serde_json::Value) -> Result<C> {
    serde_json::from_value(v.clone()).map_err(|e| PanoError::Checkpoint { path: path.to_path_buf(), reason: format!("config: {e}") })
}

pub fn load_structure(path: &Path) -> Result<(StructureNet, ParamStore<f32>, Sidecar)> {
    let (store, sc) = load(path)?;
    expect_kind(path, &sc, ModelKind::Structure)?;
    let cfg: StructureNetConfig = parse_config(path, &sc.config)?;
    let (net, pb) = StructureNet::new(cfg)?;
    check_layout(path, &store, &pb)?;
    Ok((net, store, sc))
}

/// Generator sidecar config: architecture plus whether layout guidance is used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMeta {
    pub generator: GeneratorConfig,
    pub disable_structure_guidance: bool,
}

pub fn load_generator(path: &Path) -> Result<(Generator, ParamStore<f32>, GeneratorMeta, Sidecar)> {
    let (store, sc) = load(path)?;
    expect_kind(path, &sc, ModelKind::Generator)?;
    let meta: GeneratorMeta = parse_config(path, &sc.config)?;
    let (gen, pb) = Generator::new(meta.generator.clone())?;
    check_layout(path, &store, &pb)?;
    Ok((gen, store, meta, sc))
}

pub fn load_discriminator(path: &Path) -> Result<(Discriminator, ParamStore<f32>, Sidecar)> {
    let (store, sc) = load(path)?;
    expect_kind(path, &sc, ModelKind::Discriminator)?;
    let cfg: DiscriminatorConfig = parse_config(path, &sc.config)?;
    let (d, pb) = Discriminator::new(cfg)?;
    check_layout(path, &store, &pb)?;
    Ok((d, store, sc))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_round_trip_is_bitwise() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = StructureNetConfig { base_channels: 4, depth: 2 };
        let (_, pb) = StructureNet::new(cfg.clone()).unwrap();
        let store = pb.init::<f32>(7);
        let path = tmp.path().join("s.bin");
        save(&path, &store, ModelKind::Structure, serde_json::to_value(&cfg).unwrap(), 3, vec![]).unwrap();
        let (_, back, sc) = load_structure(&path).unwrap();
        assert_eq!(sc.step, 3);
        for (a, b) in store.tensors().iter().zip(back.tensors()) {
            assert_eq!(a.shape(), b.shape());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert!(load_generator(&path).is_err());
        let mut bytes = fs::read(&path).unwrap();
        bytes[20] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load(&path), Err(PanoError::Checkpoint { .. })));
    }

    #[test]
    fn incompatible_config_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let (_, pb) = StructureNet::new(StructureNetConfig { base_channels: 4, depth: 2 }).unwrap();
        let path = tmp.path().join("s.bin");
        let wrong = StructureNetConfig { base_channels: 8, depth: 2 };
        save(&path, &pb.init(0), ModelKind::Structure, serde_json::to_value(&wrong).unwrap(), 0, vec![]).unwrap();
        assert!(load_structure(&path).is_err());
    }
}
