//! Binary checkpoint format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        4 bytes  "PSEG"
//! version      u32      currently 1
//! config       u32 levels, base_channels, max_channels, ds_heads,
//!              in_channels, out_channels; f64 leaky_slope, norm_eps
//! epoch        u32      selected epoch (0-based)
//! val_loss     f64
//! tensors      u32      manifest length
//! manifest     per tensor: u32 name length, UTF-8 name, u32 rank,
//!              u32 extent per axis, u64 element offset into the blob
//! blob_len     u64      element count
//! blob         f32 * blob_len
//! ```

use std::path::Path;

use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::network::{Network, NetworkConfig, NetworkError};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"PSEG";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {0} is not supported (expected {VERSION})")]
    Version(u32),
    #[error("truncated or corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint manifest does not match the architecture: {0}")]
    Manifest(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// Trained parameters plus the metadata needed to rebuild the network.
#[derive(Clone, Debug)]
pub struct ModelCheckpoint {
    pub network: Network<f32>,
    pub epoch: u32,
    pub val_loss: f64,
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| {
            CheckpointError::Corrupt(format!("need {n} bytes at offset {}", self.at))
        })?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
}

impl ModelCheckpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = self.network.config();
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [
            c.levels,
            c.base_channels,
            c.max_channels,
            c.ds_heads,
            c.in_channels,
            c.out_channels,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&c.leaky_slope.to_le_bytes());
        out.extend_from_slice(&c.norm_eps.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.val_loss.to_le_bytes());
        let params = self.network.params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += t.numel() as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for (_, t) in params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, at: 0 };
        if r.take(4).ok() != Some(&MAGIC[..]) {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let config = NetworkConfig {
            levels: r.usize()?,
            base_channels: r.usize()?,
            max_channels: r.usize()?,
            ds_heads: r.usize()?,
            in_channels: r.usize()?,
            out_channels: r.usize()?,
            leaky_slope: r.f64()?,
            norm_eps: r.f64()?,
        };
        let epoch = r.u32()?;
        let val_loss = r.f64()?;
        let count = r.usize()?;
        let mut manifest = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.usize()?;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| CheckpointError::Corrupt(format!("parameter name: {e}")))?
                .to_string();
            let rank = r.usize()?;
            let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            manifest.push((name, shape, offset));
        }
        let blob_len = r.u64()? as usize;
        let blob = r.take(
            blob_len
                .checked_mul(4)
                .ok_or_else(|| CheckpointError::Corrupt("blob length".into()))?,
        )?;
        if r.at != buf.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes",
                buf.len() - r.at
            )));
        }

        let mut network = Network::<f32>::build(config, 0)?;
        let expected = network.params();
        if expected.len() != manifest.len() {
            return Err(CheckpointError::Manifest(format!(
                "{} tensors stored, architecture has {}",
                manifest.len(),
                expected.len()
            )));
        }
        let mut values = Vec::with_capacity(manifest.len());
        for ((name, shape, offset), (want_name, want)) in manifest.iter().zip(expected.iter()) {
            if name != want_name || shape.as_slice() != want.shape() {
                return Err(CheckpointError::Manifest(format!(
                    "stored {name} {shape:?}, expected {want_name} {:?}",
                    want.shape()
                )));
            }
            let n = want.numel();
            if offset + n > blob_len {
                return Err(CheckpointError::Corrupt(format!(
                    "{name} extends past the blob"
                )));
            }
            let data = blob[4 * offset..4 * (offset + n)]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            values.push(Tensor::new(shape.clone(), data).expect("manifest shape"));
        }
        network.set_params(values)?;
        Ok(Self {
            network,
            epoch,
            val_loss,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_atomic(path, &self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
