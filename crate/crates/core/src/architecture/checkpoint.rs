//! Checkpoint files: a tab-separated manifest (`name`, `shape`, byte
//! `offset`) and a blob of little-endian `f64` values.
//!
//! ```text
//! name	shape	offset
//! embed.proj.weight	49x16	0
//! embed.proj.bias	16	6272
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::params::ParamStore;

pub const MANIFEST_HEADER: &str = "name\tshape\toffset";

/// Paths of the two checkpoint files inside `dir`.
pub fn checkpoint_paths(dir: impl AsRef<Path>) -> (PathBuf, PathBuf) {
    let dir = dir.as_ref();
    (dir.join("checkpoint.manifest"), dir.join("checkpoint.bin"))
}

pub fn encode<T: Scalar>(store: &ParamStore<T>) -> (String, Vec<u8>) {
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    let mut blob = Vec::with_capacity(store.scalar_count() * 8);
    for (name, param) in store.iter() {
        let shape: Vec<String> = param.value.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("{name}\t{}\t{}\n", shape.join("x"), blob.len()));
        for v in param.value.data() {
            blob.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    (manifest, blob)
}

pub fn decode<T: Scalar>(manifest: &str, blob: &[u8]) -> Result<ParamStore<T>> {
    let mut lines = manifest.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::Parse("checkpoint manifest header missing".into()));
    }
    let mut store = ParamStore::new();
    for (lineno, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let bad = |what: &str| Error::Parse(format!("manifest line {}: {what}", lineno + 2));
        let fields: Vec<&str> = line.split('\t').collect();
        let &[name, shape, offset] = fields.as_slice() else {
            return Err(bad("expected three tab-separated fields"));
        };
        let shape = shape
            .split('x')
            .map(|s| s.parse::<usize>().map_err(|_| bad("bad shape")))
            .collect::<Result<Vec<_>>>()?;
        let offset: usize = offset.parse().map_err(|_| bad("bad offset"))?;
        let numel: usize = shape.iter().product();
        let bytes = blob.get(offset..offset + numel * 8).ok_or_else(|| bad("offset past end of blob"))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| T::c(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        store.add(name, Tensor::new(shape, data)?)?;
    }
    Ok(store)
}

pub fn save<T: Scalar>(store: &ParamStore<T>, dir: impl AsRef<Path>) -> Result<()> {
    let (manifest_path, blob_path) = checkpoint_paths(dir);
    let (manifest, blob) = encode(store);
    fs::write(manifest_path, manifest)?;
    fs::write(blob_path, blob)?;
    Ok(())
}

pub fn load<T: Scalar>(dir: impl AsRef<Path>) -> Result<ParamStore<T>> {
    let (manifest_path, blob_path) = checkpoint_paths(dir);
    decode(&fs::read_to_string(manifest_path)?, &fs::read(blob_path)?)
}

/// Copies checkpoint values into `store`, requiring identical names and shapes.
pub fn restore_into<T: Scalar>(store: &mut ParamStore<T>, saved: &ParamStore<T>) -> Result<()> {
    if store.len() != saved.len() {
        return Err(Error::Parse(format!("checkpoint has {} tensors, model has {}", saved.len(), store.len())));
    }
    for (name, param) in store.iter_mut() {
        let src = saved.by_name(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if src.value.shape() != param.value.shape() {
            return Err(Error::dim("checkpoint", format!("{name}: {:?} vs {:?}", src.value.shape(), param.value.shape())));
        }
        param.value = src.value.clone();
    }
    Ok(())
}
