//! Checkpoint files: a text manifest plus one raw little-endian f32 blob.
//!
//! The manifest (`<stem>.vpck`) starts with the magic `VPCK` and a version
//! integer, then the optimizer step, free-form `meta` lines, and one
//! `tensor <name> <dims> f32 <byte-offset>` line per tensor. Tensor bytes
//! live in `<stem>.vpck.blob` in manifest order. Adam moments are stored
//! alongside parameters so training can resume exactly.

use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

const MAGIC: &str = "VPCK";
const VERSION: u32 = 1;

pub fn manifest_path(stem: &Path) -> PathBuf {
    stem.with_extension("vpck")
}

pub fn blob_path(stem: &Path) -> PathBuf {
    stem.with_extension("vpck.blob")
}

/// Write `store` (with moments) and metadata under `<stem>.vpck[.blob]`.
pub fn save(stem: &Path, store: &ParamStore, meta: &BTreeMap<String, String>) -> Result<()> {
    if let Some(dir) = stem.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut manifest = String::new();
    manifest.push_str(&format!("{MAGIC} {VERSION}\n"));
    manifest.push_str(&format!("step {}\n", store.step()));
    for (k, v) in meta {
        assert!(!k.contains(' ') && !v.contains('\n'), "meta keys/values must be simple");
        manifest.push_str(&format!("meta {k} {v}\n"));
    }
    let mut blob: Vec<u8> = Vec::new();
    let (ms, vs) = store.moments();
    let mut names: Vec<String> = Vec::new();
    let mut tensors: Vec<&Tensor> = Vec::new();
    for (i, (name, t)) in store.iter().enumerate() {
        names.push(name.to_string());
        tensors.push(t);
        names.push(format!("adam_m.{name}"));
        tensors.push(&ms[i]);
        names.push(format!("adam_v.{name}"));
        tensors.push(&vs[i]);
    }
    for (name, t) in names.iter().zip(&tensors) {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("tensor {name} {} f32 {}\n", dims.join("x"), blob.len()));
        for &x in t.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::write(manifest_path(stem), manifest)?;
    let mut f = std::fs::File::create(blob_path(stem))?;
    f.write_all(&blob)?;
    Ok(())
}

/// Load a checkpoint written by [`save`].
pub fn load(stem: &Path) -> Result<(ParamStore, BTreeMap<String, String>)> {
    let manifest = std::fs::read_to_string(manifest_path(stem))?;
    let mut blob = Vec::new();
    std::fs::File::open(blob_path(stem))?.read_to_end(&mut blob)?;

    let mut lines = manifest.lines();
    let header = lines.next().ok_or_else(|| Error::config("empty checkpoint manifest"))?;
    let mut hp = header.split_whitespace();
    if hp.next() != Some(MAGIC) {
        return Err(Error::config("bad checkpoint magic"));
    }
    let version: u32 = hp
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::config("bad checkpoint version"))?;
    if version != VERSION {
        return Err(Error::config(format!("unsupported checkpoint version {version}")));
    }

    let mut step = 0u64;
    let mut meta = BTreeMap::new();
    let mut raw: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    for line in lines {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("step") => {
                step = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::config("bad step line"))?;
            }
            Some("meta") => {
                let k = parts.next().ok_or_else(|| Error::config("bad meta line"))?;
                let v: Vec<&str> = parts.collect();
                meta.insert(k.to_string(), v.join(" "));
            }
            Some("tensor") => {
                let name = parts.next().ok_or_else(|| Error::config("bad tensor line"))?;
                let dims_s = parts.next().ok_or_else(|| Error::config("bad tensor dims"))?;
                let dtype = parts.next().ok_or_else(|| Error::config("bad tensor dtype"))?;
                if dtype != "f32" {
                    return Err(Error::config(format!("unsupported dtype {dtype}")));
                }
                let offset: usize = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::config("bad tensor offset"))?;
                let dims: Vec<usize> = dims_s
                    .split('x')
                    .map(|d| d.parse().map_err(|_| Error::config("bad dim")))
                    .collect::<Result<_>>()?;
                let n: usize = dims.iter().product();
                let end = offset + 4 * n;
                if end > blob.len() {
                    return Err(Error::config("tensor extends past blob"));
                }
                let data: Vec<f32> = blob[offset..end]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                raw.push((name.to_string(), dims, data));
            }
            Some(other) => return Err(Error::config(format!("unknown manifest line {other}"))),
            None => {}
        }
    }

    let mut store = ParamStore::new();
    let mut mtens: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut vtens: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, dims, data) in raw {
        let t = Tensor::new(dims, data);
        if let Some(rest) = name.strip_prefix("adam_m.") {
            mtens.insert(rest.to_string(), t);
        } else if let Some(rest) = name.strip_prefix("adam_v.") {
            vtens.insert(rest.to_string(), t);
        } else {
            store.insert(&name, t);
        }
    }
    {
        let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
        let (ms, vs) = store.moments_mut();
        for (i, name) in names.iter().enumerate() {
            if let Some(t) = mtens.remove(name) {
                ms[i] = t;
            }
            if let Some(t) = vtens.remove(name) {
                vs[i] = t;
            }
        }
    }
    store.set_step(step);
    Ok((store, meta))
}
