//! `LTS1` tensor files.
//!
//! Layout: the four magic bytes `LTS1`, then five little-endian `u32`
//! (`F`, `C`, `H`, `W`, `flags`), then `F*C*H*W` little-endian `f32` values in
//! frame, channel, row, column order. `flags` bit 0 marks a mask payload, which
//! must have `C = 1` and values exactly `0.0` or `1.0`.

use std::path::Path;

use super::frame::{LatentFrame, LatentSequence};
use crate::error::{Error, Result};
use crate::tracking::Mask;

pub const MAGIC: &[u8; 4] = b"LTS1";
pub const FLAG_MASK: u32 = 1;
const HEADER_LEN: usize = 4 + 5 * 4;

/// Decoded file contents before interpretation as latents or masks.
#[derive(Debug, Clone, PartialEq)]
pub struct LtsTensor {
    pub frames: LatentSequence,
    pub flags: u32,
}

impl LtsTensor {
    pub fn is_mask(&self) -> bool {
        self.flags & FLAG_MASK != 0
    }
}

fn dim(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::param(format!("{what} = {v} does not fit in u32")))
}

pub fn encode(frames: &LatentSequence, flags: u32) -> Result<Vec<u8>> {
    let (c, h, w) = frames.shape();
    let n = frames.len() * c * h * w;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * n);
    out.extend_from_slice(MAGIC);
    for (v, what) in [(frames.len(), "F"), (c, "C"), (h, "H"), (w, "W")] {
        out.extend_from_slice(&dim(v, what)?.to_le_bytes());
    }
    out.extend_from_slice(&flags.to_le_bytes());
    for f in frames {
        for &v in f.data() {
            let v32 = v as f32;
            if !v32.is_finite() {
                return Err(Error::NonFinite("LTS payload".into()));
            }
            out.extend_from_slice(&v32.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn encode_latents(frames: &LatentSequence) -> Result<Vec<u8>> {
    encode(frames, 0)
}

pub fn encode_masks(masks: &[Mask]) -> Result<Vec<u8>> {
    let frames = masks.iter().map(Mask::to_latent).collect();
    encode(&LatentSequence::new(frames)?, FLAG_MASK)
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<LtsTensor> {
    let bad = |message: String| Error::Format {
        path: origin.to_path_buf(),
        message,
    };
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(bad("missing LTS1 header".into()));
    }
    let word = |i: usize| {
        let o = 4 + 4 * i;
        u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
    };
    let (f, c, h, w) = (word(0), word(1), word(2), word(3));
    let flags = word(4) as u32;
    if f == 0 || c == 0 || h == 0 || w == 0 {
        return Err(bad(format!("zero dimension in header F={f} C={c} H={h} W={w}")));
    }
    let per_frame = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| bad("header dimensions overflow".into()))?;
    let expected = f
        .checked_mul(per_frame)
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(HEADER_LEN))
        .ok_or_else(|| bad("header dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(bad(format!(
            "payload length {} does not match header ({expected} expected)",
            bytes.len()
        )));
    }
    let mask = flags & FLAG_MASK != 0;
    if mask && c != 1 {
        return Err(bad(format!("mask payload must have C=1, got C={c}")));
    }
    let mut values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64);
    let mut frames = Vec::with_capacity(f);
    for _ in 0..f {
        let data: Vec<f64> = values.by_ref().take(per_frame).collect();
        if mask && data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(bad("mask payload contains values other than 0 and 1".into()));
        }
        let frame = LatentFrame::from_vec((c, h, w), data).map_err(|e| bad(e.to_string()))?;
        frames.push(frame);
    }
    Ok(LtsTensor {
        frames: LatentSequence::new(frames)?,
        flags,
    })
}

pub fn decode_masks(bytes: &[u8], origin: &Path) -> Result<Vec<Mask>> {
    let t = decode(bytes, origin)?;
    if !t.is_mask() {
        return Err(Error::Format {
            path: origin.to_path_buf(),
            message: "expected a mask payload (flags bit 0)".into(),
        });
    }
    Ok(t.frames.iter().map(Mask::from_latent_unchecked).collect())
}

pub fn read(path: &Path) -> Result<LtsTensor> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes, path)
}

pub fn read_latents(path: &Path) -> Result<LatentSequence> {
    Ok(read(path)?.frames)
}

pub fn read_masks(path: &Path) -> Result<Vec<Mask>> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_masks(&bytes, path)
}
