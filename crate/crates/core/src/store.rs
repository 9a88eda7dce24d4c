//! Named-tensor container used for checkpoints and feature dumps.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "PRSTENS\0" | u32 version | u64 header_len | header JSON
//! u32 count
//! count × { u32 name_len | name | u32 rank | rank × u64 extent
//!           | u64 blob_len | blob_len bytes of f32 }
//! ```

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PRSTENS\0";
pub const FORMAT_VERSION: u32 = 1;

// sanity bounds for lengths read from disk
const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 16;
const MAX_HEADER: u64 = 1 << 30;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub header: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn write_to<W: Write>(
    mut w: W,
    header: &serde_json::Value,
    tensors: &[(&str, &Tensor)],
) -> Result<()> {
    let head = serde_json::to_vec(header)?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(head.len() as u64).to_le_bytes())?;
    w.write_all(&head)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    let mut seen = HashSet::new();
    for (name, t) in tensors {
        if !seen.insert(*name) {
            return Err(Error::Format(format!("duplicate tensor name {name}")));
        }
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        w.write_all(&((t.numel() * 4) as u64).to_le_bytes())?;
        let mut blob = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&blob)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write(
    path: impl AsRef<Path>,
    header: &serde_json::Value,
    tensors: &[(&str, &Tensor)],
) -> Result<()> {
    let f = File::create(path)?;
    write_to(BufWriter::new(f), header, tensors)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => {
            Error::Format(format!("truncated file while reading {what}"))
        }
        _ => Error::Io(e),
    })
}

fn u32_of<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn u64_of<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_from<R: Read>(mut r: R) -> Result<TensorFile> {
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format("not a tensor file (bad magic)".into()));
    }
    let version = u32_of(&mut r, "version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let hlen = u64_of(&mut r, "header length")?;
    if hlen > MAX_HEADER {
        return Err(Error::Format(format!(
            "header length {hlen} is implausible"
        )));
    }
    let mut head = vec![0u8; hlen as usize];
    read_exact(&mut r, &mut head, "header")?;
    let header = serde_json::from_slice(&head)?;
    let count = u32_of(&mut r, "tensor count")?;
    let mut tensors = Vec::with_capacity(count.min(1 << 16) as usize);
    let mut seen = HashSet::new();
    for i in 0..count {
        let nlen = u32_of(&mut r, "name length")? as usize;
        if nlen > MAX_NAME {
            return Err(Error::Format(format!(
                "tensor #{i}: name length {nlen} is implausible"
            )));
        }
        let mut name = vec![0u8; nlen];
        read_exact(&mut r, &mut name, "tensor name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format(format!("tensor #{i}: name is not UTF-8")))?;
        let rank = u32_of(&mut r, &format!("rank of {name}"))? as usize;
        if rank > MAX_RANK {
            return Err(Error::Format(format!(
                "tensor {name}: rank {rank} is implausible"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64_of(&mut r, &format!("extents of {name}"))? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| Error::Format(format!("tensor {name}: extents {shape:?} overflow")))?;
        let blob_len = u64_of(&mut r, &format!("blob length of {name}"))?;
        if blob_len != (numel as u64) * 4 {
            return Err(Error::Format(format!(
                "tensor {name}: blob length {blob_len} does not match extents {shape:?} ({} bytes)",
                numel * 4
            )));
        }
        let mut blob = vec![0u8; blob_len as usize];
        read_exact(&mut r, &mut blob, &format!("data of {name}"))?;
        let data = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate tensor name {name}")));
        }
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok(TensorFile { header, tensors })
}

pub fn read(path: impl AsRef<Path>) -> Result<TensorFile> {
    let f = File::open(path)?;
    read_from(BufReader::new(f))
}
