//! Parameter checkpoint format: a text manifest (one `name shape offset`
//! line per tensor, offsets counted in floats), a blank line, then the
//! flat little-endian f32 dump in manifest order.
//!
//! Iteration is name-sorted, so identical parameter values always produce
//! byte-identical files.

use std::io::{Read, Write};
use std::path::Path;

use fusetrack_tensor::{ParamStore, Tensor};

use crate::{Result, TrackError};

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let mut manifest = String::new();
    let mut blob: Vec<u8> = Vec::with_capacity(store.num_values() * 4);
    let mut offset = 0usize;
    for (name, p) in store.iter() {
        let shape: Vec<String> = p.tensor.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{name} {} {offset}\n", shape.join("x")));
        for &v in p.tensor.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        offset += p.tensor.len();
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(manifest.as_bytes())?;
    f.write_all(b"\n")?;
    f.write_all(&blob)?;
    Ok(())
}

/// Load a checkpoint; every parameter comes back trainable (the freezing
/// schedule is runtime state, not checkpoint state).
pub fn load(path: &Path) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let split = find_blank_line(&bytes)
        .ok_or_else(|| TrackError::Checkpoint("missing blank line after manifest".into()))?;
    let manifest = std::str::from_utf8(&bytes[..split])
        .map_err(|_| TrackError::Checkpoint("manifest is not UTF-8".into()))?;
    let blob = &bytes[split + 1..];
    if blob.len() % 4 != 0 {
        return Err(TrackError::Checkpoint(format!(
            "data section length {} is not a multiple of 4",
            blob.len()
        )));
    }
    let floats: Vec<f64> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();

    let mut store = ParamStore::new();
    for line in manifest.lines() {
        let mut parts = line.split_whitespace();
        let (Some(name), Some(shape_s), Some(offset_s), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(TrackError::Checkpoint(format!("malformed manifest line {line:?}")));
        };
        let shape: Vec<usize> = shape_s
            .split('x')
            .map(|d| {
                d.parse()
                    .map_err(|_| TrackError::Checkpoint(format!("bad shape {shape_s:?} for {name}")))
            })
            .collect::<Result<_>>()?;
        let offset: usize = offset_s
            .parse()
            .map_err(|_| TrackError::Checkpoint(format!("bad offset {offset_s:?} for {name}")))?;
        let len: usize = shape.iter().product();
        if offset + len > floats.len() {
            return Err(TrackError::Checkpoint(format!(
                "{name} spans {offset}..{} but the file holds {} floats",
                offset + len,
                floats.len()
            )));
        }
        store.insert(name, Tensor::new(&shape, floats[offset..offset + len].to_vec()));
    }
    Ok(store)
}

fn find_blank_line(bytes: &[u8]) -> Option<usize> {
    bytes.windows(2).position(|w| w == b"\n\n").map(|i| i + 1)
}
