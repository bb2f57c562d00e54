//! Flat binary checkpoint format.
//!
//! ```text
//! DUALSHOT-CKPT v1\n
//! name\tshape-csv\t<row-major little-endian f64 bytes>\n   (one record per parameter)
//! ```

use std::fs;
use std::path::Path;

use super::{NumError, ParamStore, Tensor};

pub const CHECKPOINT_HEADER: &str = "DUALSHOT-CKPT v1";

pub fn to_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(store.num_values() * 8 + 64);
    out.extend_from_slice(CHECKPOINT_HEADER.as_bytes());
    out.push(b'\n');
    for p in store.iter() {
        out.extend_from_slice(p.name.as_bytes());
        out.push(b'\t');
        let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        out.extend_from_slice(dims.join(",").as_bytes());
        out.push(b'\t');
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(b'\n');
    }
    out
}

fn corrupt(msg: impl Into<String>) -> NumError {
    NumError::Checkpoint(msg.into())
}

fn take_until(bytes: &[u8], pos: &mut usize, delim: u8) -> Result<String, NumError> {
    let start = *pos;
    let end = bytes[start..]
        .iter()
        .position(|&b| b == delim)
        .ok_or_else(|| corrupt("unterminated field"))?;
    *pos = start + end + 1;
    String::from_utf8(bytes[start..start + end].to_vec()).map_err(|_| corrupt("field is not UTF-8"))
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParamStore, NumError> {
    let mut pos = 0;
    let header = take_until(bytes, &mut pos, b'\n')?;
    if header != CHECKPOINT_HEADER {
        return Err(corrupt(format!("bad header {header:?}")));
    }
    let mut store = ParamStore::new();
    while pos < bytes.len() {
        let name = take_until(bytes, &mut pos, b'\t')?;
        let shape_csv = take_until(bytes, &mut pos, b'\t')?;
        let shape: Vec<usize> = shape_csv
            .split(',')
            .map(|d| d.parse().map_err(|_| corrupt(format!("bad shape {shape_csv:?} for {name}"))))
            .collect::<Result<_, _>>()?;
        let n: usize = shape.iter().product();
        let end = pos + n * 8;
        if end + 1 > bytes.len() || bytes[end] != b'\n' {
            return Err(corrupt(format!("truncated values for {name}")));
        }
        let data = bytes[pos..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos = end + 1;
        store.add(name, Tensor::new(shape, data)?)?;
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<(), NumError> {
    fs::write(path, to_bytes(store)).map_err(|e| corrupt(format!("{}: {e}", path.display())))
}

pub fn load(path: &Path) -> Result<ParamStore, NumError> {
    let bytes = fs::read(path).map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
    from_bytes(&bytes)
}
