//! Binary checkpoint files: a JSON header followed by raw f32 parameter
//! blocks in `export_state` order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CXRCKPT1";

fn corrupt(path: &Path, why: &str) -> Error {
    Error::Checkpoint(format!("{}: {why}", path.display()))
}

/// Writes a checkpoint: magic, a `kind` tag naming the model family, a JSON
/// header (config and training metadata), then the parameter blocks.
pub fn write_checkpoint(
    path: &Path,
    kind: &str,
    header: &serde_json::Value,
    state: &[Vec<f32>],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let kind_bytes = kind.as_bytes();
    w.write_all(&(kind_bytes.len() as u32).to_le_bytes())?;
    w.write_all(kind_bytes)?;
    let header_bytes = serde_json::to_vec(header)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    w.write_all(&(state.len() as u64).to_le_bytes())?;
    for block in state {
        w.write_all(&(block.len() as u64).to_le_bytes())?;
        for v in block {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`write_checkpoint`], verifying the magic
/// and the `kind` tag.
pub fn read_checkpoint(path: &Path, expected_kind: &str) -> Result<(serde_json::Value, Vec<Vec<f32>>)> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| corrupt(path, "file too short for header"))?;
    if &magic != MAGIC {
        return Err(corrupt(path, "not a model checkpoint (bad magic)"));
    }

    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4)
        .map_err(|_| corrupt(path, "truncated kind tag"))?;
    let kind_len = u32::from_le_bytes(len4) as usize;
    if kind_len > 256 {
        return Err(corrupt(path, "implausible kind tag length"));
    }
    let mut kind = vec![0u8; kind_len];
    r.read_exact(&mut kind)
        .map_err(|_| corrupt(path, "truncated kind tag"))?;
    let kind = String::from_utf8(kind).map_err(|_| corrupt(path, "kind tag is not UTF-8"))?;
    if kind != expected_kind {
        return Err(corrupt(
            path,
            &format!("checkpoint kind is {kind:?}, expected {expected_kind:?}"),
        ));
    }

    let mut len8 = [0u8; 8];
    r.read_exact(&mut len8)
        .map_err(|_| corrupt(path, "truncated header"))?;
    let header_len = u64::from_le_bytes(len8) as usize;
    if header_len > 16 << 20 {
        return Err(corrupt(path, "implausible header length"));
    }
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|_| corrupt(path, "truncated header"))?;
    let header: serde_json::Value = serde_json::from_slice(&header_bytes)
        .map_err(|e| corrupt(path, &format!("header is not valid JSON: {e}")))?;

    r.read_exact(&mut len8)
        .map_err(|_| corrupt(path, "truncated block count"))?;
    let block_count = u64::from_le_bytes(len8) as usize;
    if block_count > 1 << 20 {
        return Err(corrupt(path, "implausible block count"));
    }
    let mut state = Vec::with_capacity(block_count);
    for i in 0..block_count {
        r.read_exact(&mut len8)
            .map_err(|_| corrupt(path, &format!("truncated length of block {i}")))?;
        let n = u64::from_le_bytes(len8) as usize;
        if n > 1 << 28 {
            return Err(corrupt(path, &format!("implausible size for block {i}")));
        }
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| corrupt(path, &format!("truncated data in block {i}")))?;
        state.push(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        );
    }
    Ok((header, state))
}
