//! Binary weight files.
//!
//! Layout, all integers little-endian: the magic `GINV`, a `u32` version,
//! then one record per layer until end of file. A record is a `u32` name
//! length, the UTF-8 name `<index>.<kind>`, a `u32` tensor count and, per
//! tensor, a `u32` rank, `rank` extents as `u64` and the data as `f64`.
//! Batch-norm records carry gain, shift, running mean and running variance.

use super::fs::{read_bytes, write_atomic};
use super::ArchConfig;
use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Network};
use crate::tensor::Tensor;
use std::path::Path;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"GINV";
pub const WEIGHTS_VERSION: u32 = 1;

fn record_name(i: usize, layer: &LayerSpec) -> String {
    format!("{i}.{}", layer.kind())
}

/// Tensors stored for layer `i`, in file order.
fn layer_tensors(net: &Network, i: usize) -> Vec<&Tensor> {
    let mut ts: Vec<&Tensor> = net.params()[i].iter().collect();
    if let Some(r) = &net.running()[i] {
        ts.push(&r.mean);
        ts.push(&r.var);
    }
    ts
}

pub fn encode_weights(net: &Network) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * net.parameter_count());
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    for (i, layer) in net.layers().iter().enumerate() {
        let name = record_name(i, layer);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let ts = layer_tensors(net, i);
        out.extend_from_slice(&(ts.len() as u32).to_le_bytes());
        for t in ts {
            out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
            for &d in t.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &dyn Fn() -> String) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated { context: context() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, context: &dyn Fn() -> String) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }

    fn u64(&mut self, context: &dyn Fn() -> String) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, context)?.try_into().unwrap()))
    }

    fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Decodes `bytes` into a copy of `template`, checking every record against
/// its layers. Nothing is returned unless the whole file is valid.
pub fn decode_weights(bytes: &[u8], template: &Network) -> Result<Network> {
    if bytes.len() < 4 || &bytes[..4] != WEIGHTS_MAGIC {
        let found = &bytes[..bytes.len().min(4)];
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(WEIGHTS_MAGIC).into_owned(),
            found: String::from_utf8_lossy(found).into_owned(),
        });
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u32(&|| "format version".into())?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Version {
            expected: WEIGHTS_VERSION,
            found: version,
        });
    }
    let mut net = template.clone();
    for (i, layer) in template.layers().iter().enumerate() {
        let expected_name = record_name(i, layer);
        if r.at_end() {
            return Err(Error::Truncated {
                context: format!("layer {expected_name} (record missing)"),
            });
        }
        let ctx_name = || format!("layer {expected_name} name");
        let len = r.u32(&ctx_name)? as usize;
        let name = String::from_utf8_lossy(r.take(len, &ctx_name)?).into_owned();
        if name != expected_name {
            return Err(Error::Format(format!(
                "record {i} is {name:?}, architecture expects {expected_name:?}"
            )));
        }
        let expected: Vec<Vec<usize>> = layer_tensors(template, i).iter().map(|t| t.dims().to_vec()).collect();
        let count = r.u32(&|| format!("layer {name} tensor count"))? as usize;
        if count != expected.len() {
            return Err(Error::Format(format!(
                "layer {name} stores {count} tensors, architecture expects {}",
                expected.len()
            )));
        }
        let mut loaded = Vec::with_capacity(count);
        for (k, want) in expected.iter().enumerate() {
            let ctx = || format!("layer {name} tensor {k}");
            let rank = r.u32(&ctx)? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                dims.push(r.u64(&ctx)? as usize);
            }
            if &dims != want {
                return Err(Error::ExtentMismatch {
                    context: format!("layer {name} tensor {k}"),
                    expected: want.clone(),
                    found: dims,
                });
            }
            let n: usize = dims.iter().product();
            let raw = r.take(8 * n, &ctx)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            loaded.push(
                Tensor::from_vec(&dims, data).map_err(|e| Error::Format(format!("layer {name} tensor {k}: {e}")))?,
            );
        }
        let mut loaded = loaded.into_iter();
        for p in net.params_mut()[i].iter_mut() {
            *p = loaded.next().unwrap();
        }
        if let Some(rs) = net.running_mut()[i].as_mut() {
            rs.mean = loaded.next().unwrap();
            rs.var = loaded.next().unwrap();
        }
    }
    if !r.at_end() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last layer record",
            bytes.len() - r.pos
        )));
    }
    Ok(net)
}

pub fn save_weights(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_weights(net))
}

pub fn load_weights(path: impl AsRef<Path>, arch: &ArchConfig) -> Result<Network> {
    let bytes = read_bytes(path.as_ref())?;
    decode_weights(&bytes, &arch.build()?)
}
