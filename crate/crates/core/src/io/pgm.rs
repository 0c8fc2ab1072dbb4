//! Binary PGM (P5) image grids.

use super::fs::{read_bytes, write_atomic};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

/// White border between grid cells, in pixels.
pub const GUTTER: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Pgm {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Pgm> {
        // Header: magic, width, height, maxval, then one whitespace byte.
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("PGM header ends early".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P5" {
            return Err(Error::Format(format!("not a binary PGM: magic {:?}", fields[0])));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad PGM header field {s:?}")))
        };
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Format(format!("PGM maxval {maxval} is not 255")));
        }
        let pixels = bytes
            .get(pos + 1..)
            .filter(|p| p.len() == width * height)
            .ok_or_else(|| Error::Format("PGM payload size does not match its header".into()))?;
        Ok(Pgm {
            width,
            height,
            pixels: pixels.to_vec(),
        })
    }
}

fn to_byte(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// Lays out equally sized images row-major, `columns` per row, separated by
/// white gutters. Each image is `[1, m, n]` or `[m, n]`.
pub fn image_grid(images: &[Tensor], columns: usize) -> Result<Pgm> {
    let first = images
        .first()
        .ok_or_else(|| Error::Config("image grid needs at least one image".into()))?;
    if columns == 0 {
        return Err(Error::Config("image grid needs at least one column".into()));
    }
    let (h, w) = match first.dims() {
        [1, h, w] | [h, w] => (*h, *w),
        _ => return Err(Error::dim(format!("grid images must be 1xHxW, got {}", first.shape()))),
    };
    let cols = columns.min(images.len());
    let rows = images.len().div_ceil(cols);
    let width = cols * w + (cols - 1) * GUTTER;
    let height = rows * h + (rows - 1) * GUTTER;
    let mut pixels = vec![255u8; width * height];
    for (k, img) in images.iter().enumerate() {
        if img.numel() != h * w || img.dims().last() != Some(&w) {
            return Err(Error::dim(format!(
                "grid image {k} is {}, expected {h}x{w}",
                img.shape()
            )));
        }
        if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain(format!("grid image {k} has pixels outside [0, 1]")));
        }
        let (r, c) = (k / cols, k % cols);
        let (y0, x0) = (r * (h + GUTTER), c * (w + GUTTER));
        for y in 0..h {
            for x in 0..w {
                pixels[(y0 + y) * width + x0 + x] = to_byte(img.data()[y * w + x]);
            }
        }
    }
    Ok(Pgm { width, height, pixels })
}

pub fn write_image_grid(images: &[Tensor], columns: usize, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &image_grid(images, columns)?.encode())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Pgm> {
    Pgm::decode(&read_bytes(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_tensor;

    fn img(seed: u64) -> Tensor {
        random_tensor(&[1, 28, 28], seed).map(|v| (v + 1.0) / 2.0).unwrap()
    }

    #[test]
    fn two_images_side_by_side() {
        let g = image_grid(&[img(1), img(2)], 2).unwrap();
        assert_eq!((g.width, g.height), (58, 28));
        assert!(g.pixels[28] == 255 && g.pixels[29] == 255);
    }

    #[test]
    fn extreme_pixels() {
        let t = Tensor::from_vec(&[1, 1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(image_grid(&[t], 1).unwrap().pixels, vec![255, 0]);
    }

    #[test]
    fn write_then_parse_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.pgm");
        let imgs: Vec<Tensor> = (0..5).map(img).collect();
        write_image_grid(&imgs, 3, &p).unwrap();
        let g = read_pgm(&p).unwrap();
        assert_eq!((g.width, g.height), (3 * 28 + 4, 2 * 28 + 2));
        for (k, im) in imgs.iter().enumerate() {
            let (y0, x0) = ((k / 3) * 30, (k % 3) * 30);
            for y in 0..28 {
                for x in 0..28 {
                    let want = (255.0 * im.data()[y * 28 + x]).round() as u8;
                    assert_eq!(g.pixels[(y0 + y) * g.width + x0 + x], want);
                }
            }
        }
        // Unused cell stays white.
        assert_eq!(g.pixels[30 * g.width + 2 * 30 + 5], 255);
        let again = image_grid(&imgs, 3).unwrap().encode();
        assert_eq!(std::fs::read(&p).unwrap(), again);
    }

    #[test]
    fn mismatched_sizes_are_rejected() {
        let small = Tensor::zeros(&[1, 5, 5]).unwrap();
        assert!(image_grid(&[img(1), small], 2).is_err());
        assert!(image_grid(&[], 2).is_err());
    }
}
