use std::io::{Read, Write};

use super::{AutodiffError, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Little-endian layout: magic, version, then per parameter in name order
/// `u32 name_len, name bytes, u32 rank, rank × u32 dims, f32 payload`.
pub fn write_checkpoint(
    params: &ParamStore<f32>,
    mut out: impl Write,
) -> Result<(), AutodiffError> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (name, tensor) in params.iter() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(tensor.numel() * 4);
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8], AutodiffError> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| AutodiffError::Checkpoint(format!("truncated at byte {}", *pos)))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

fn take_u32(bytes: &[u8], pos: &mut usize) -> Result<u32, AutodiffError> {
    let s = take(bytes, pos, 4)?;
    Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
}

pub fn read_checkpoint(mut input: impl Read) -> Result<ParamStore<f32>, AutodiffError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut pos = 0;
    if take(&bytes, &mut pos, 4)? != CHECKPOINT_MAGIC {
        return Err(AutodiffError::Checkpoint("bad magic".into()));
    }
    let version = take_u32(&bytes, &mut pos)?;
    if version != CHECKPOINT_VERSION {
        return Err(AutodiffError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let mut params = ParamStore::new();
    while pos < bytes.len() {
        let name_len = take_u32(&bytes, &mut pos)? as usize;
        let name = std::str::from_utf8(take(&bytes, &mut pos, name_len)?)
            .map_err(|e| AutodiffError::Checkpoint(format!("parameter name: {e}")))?
            .to_string();
        let rank = take_u32(&bytes, &mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(take_u32(&bytes, &mut pos)? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| AutodiffError::Checkpoint(format!("{name}: shape overflow")))?;
        let payload = take(&bytes, &mut pos, count.saturating_mul(4))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok(params)
}
