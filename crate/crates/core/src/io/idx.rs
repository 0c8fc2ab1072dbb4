//! IDX image files (big-endian), optionally gzip-compressed.

use super::fs::{read_bytes, write_atomic};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use flate2::read::GzDecoder;
use std::io::Read;
use std::path::Path;

const UBYTE_IMAGES: u32 = 0x0000_0803;
const F64_IMAGES: u32 = 0x0000_0E03;

/// Images `[B, 1, rows, cols]` scaled to [0, 1], with where they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub images: Tensor,
    pub source: String,
    pub offset: usize,
    /// Number of images the file holds in total.
    pub file_count: usize,
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(b[at..at + 4].try_into().unwrap())
}

/// Parses IDX bytes (raw or gzip). Unsigned-byte files are divided by 255;
/// `f64` files must already lie in [0, 1].
pub fn read_idx_images(raw: &[u8], limit: Option<usize>, offset: usize) -> Result<(Tensor, usize)> {
    let owned;
    let bytes = if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw)
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("bad gzip stream: {e}")))?;
        owned = out;
        &owned[..]
    } else {
        raw
    };
    if bytes.len() < 16 {
        return Err(Error::Format(format!(
            "IDX header needs 16 bytes, file has {}",
            bytes.len()
        )));
    }
    let magic = be_u32(bytes, 0);
    let width = match magic {
        UBYTE_IMAGES => 1,
        F64_IMAGES => 8,
        _ => {
            return Err(Error::Format(format!(
                "IDX magic {magic:#010x} is not a ubyte or f64 image file"
            )))
        }
    };
    let (count, rows, cols) = (
        be_u32(bytes, 4) as usize,
        be_u32(bytes, 8) as usize,
        be_u32(bytes, 12) as usize,
    );
    if rows == 0 || cols == 0 {
        return Err(Error::Format(format!("IDX images of {rows}x{cols} pixels")));
    }
    let per = rows * cols;
    let have = (bytes.len() - 16) / (per * width);
    if have < count {
        return Err(Error::Format(format!(
            "IDX header promises {count} images, payload holds {have}"
        )));
    }
    if offset >= count {
        return Err(Error::Format(format!("offset {offset} beyond {count} images")));
    }
    let take = limit.unwrap_or(count - offset).min(count - offset);
    if take == 0 {
        return Err(Error::Format("requested zero images".into()));
    }
    let start = 16 + offset * per * width;
    let payload = &bytes[start..start + take * per * width];
    let data: Vec<f64> = match width {
        1 => payload.iter().map(|&b| b as f64 / 255.0).collect(),
        _ => payload
            .chunks_exact(8)
            .map(|c| f64::from_be_bytes(c.try_into().unwrap()))
            .collect(),
    };
    if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Format("IDX f64 pixels must lie in [0, 1]".into()));
    }
    Ok((Tensor::from_vec(&[take, 1, rows, cols], data)?, count))
}

/// Loads up to `limit` images starting at image `offset`.
pub fn load_idx_images(path: impl AsRef<Path>, limit: Option<usize>, offset: usize) -> Result<ImageBatch> {
    let path = path.as_ref();
    let (images, file_count) = read_idx_images(&read_bytes(path)?, limit, offset)?;
    Ok(ImageBatch {
        images,
        source: path.display().to_string(),
        offset,
        file_count,
    })
}

/// Encodes `[B, 1, rows, cols]` (or `[B, rows, cols]`) images losslessly as
/// IDX `f64`.
pub fn encode_idx_f64(images: &Tensor) -> Result<Vec<u8>> {
    let d = images.dims();
    let (b, rows, cols) = match d {
        [b, 1, r, c] | [b, r, c] => (*b, *r, *c),
        _ => return Err(Error::dim(format!("cannot store {} as IDX images", images.shape()))),
    };
    let mut out = Vec::with_capacity(16 + 8 * images.numel());
    for v in [F64_IMAGES, b as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for v in images.data() {
        out.extend_from_slice(&v.to_be_bytes());
    }
    Ok(out)
}

pub fn write_idx_f64(images: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_idx_f64(images)?)
}
