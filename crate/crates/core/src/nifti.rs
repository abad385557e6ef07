//! Single-file NIfTI-1 reader and writer (`.nii`, `.nii.gz`).

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::volume::{Volume, VolumeError};

pub const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag.
pub const VOX_OFFSET: usize = 352;

const MAGIC_SINGLE: [u8; 4] = *b"n+1\0";
const MAGIC_PAIR: [u8; 4] = *b"ni1\0";
const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];
const OBLIQUE_TOL: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a single-file NIfTI-1 image: {0}")]
    Format(String),
    #[error("unsupported NIfTI feature: {0}")]
    Unsupported(String),
    #[error("unsupported orientation: {0}")]
    UnsupportedOrientation(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T> = std::result::Result<T, NiftiError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

/// Element types the reader accepts, keyed by NIfTI datatype code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataType {
    U8 = 2,
    I16 = 4,
    I32 = 8,
    F32 = 16,
    F64 = 64,
}

impl DataType {
    pub fn from_code(code: i16) -> Option<Self> {
        Some(match code {
            2 => Self::U8,
            4 => Self::I16,
            8 => Self::I32,
            16 => Self::F32,
            64 => Self::F64,
            _ => return None,
        })
    }

    pub fn code(self) -> i16 {
        self as i16
    }

    pub fn bytes(self) -> usize {
        match self {
            Self::U8 => 1,
            Self::I16 => 2,
            Self::I32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

/// The subset of the 348-byte NIfTI-1 header the pipeline uses.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub xyzt_units: u8,
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
    pub magic: [u8; 4],
}

struct Cursor<'a> {
    buf: &'a [u8],
    endian: Endian,
}

impl Cursor<'_> {
    fn bytes<const N: usize>(&self, at: usize) -> [u8; N] {
        self.buf[at..at + N].try_into().expect("in bounds")
    }

    fn i16(&self, at: usize) -> i16 {
        match self.endian {
            Endian::Little => i16::from_le_bytes(self.bytes(at)),
            Endian::Big => i16::from_be_bytes(self.bytes(at)),
        }
    }

    fn i32(&self, at: usize) -> i32 {
        match self.endian {
            Endian::Little => i32::from_le_bytes(self.bytes(at)),
            Endian::Big => i32::from_be_bytes(self.bytes(at)),
        }
    }

    fn f32(&self, at: usize) -> f32 {
        match self.endian {
            Endian::Little => f32::from_le_bytes(self.bytes(at)),
            Endian::Big => f32::from_be_bytes(self.bytes(at)),
        }
    }

    fn f64(&self, at: usize) -> f64 {
        match self.endian {
            Endian::Little => f64::from_le_bytes(self.bytes(at)),
            Endian::Big => f64::from_be_bytes(self.bytes(at)),
        }
    }
}

impl NiftiHeader {
    /// Parses a header, detecting byte order from `sizeof_hdr`.
    pub fn parse(buf: &[u8]) -> Result<(Self, Endian)> {
        if buf.len() < HEADER_SIZE {
            return Err(NiftiError::Format(format!(
                "file has {} bytes, header needs 348",
                buf.len()
            )));
        }
        let endian = if i32::from_le_bytes(buf[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
            Endian::Little
        } else if i32::from_be_bytes(buf[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
            Endian::Big
        } else {
            return Err(NiftiError::Format("sizeof_hdr is not 348".into()));
        };
        let c = Cursor { buf, endian };
        let magic: [u8; 4] = c.bytes(344);
        if magic == MAGIC_PAIR {
            return Err(NiftiError::Format(
                "detached header (magic \"ni1\") is not supported".into(),
            ));
        }
        if magic != MAGIC_SINGLE {
            return Err(NiftiError::Format(format!("bad magic {magic:?}")));
        }
        let header = Self {
            dim: std::array::from_fn(|i| c.i16(40 + 2 * i)),
            datatype: c.i16(70),
            bitpix: c.i16(72),
            pixdim: std::array::from_fn(|i| c.f32(76 + 4 * i)),
            vox_offset: c.f32(108),
            scl_slope: c.f32(112),
            scl_inter: c.f32(116),
            xyzt_units: buf[123],
            qform_code: c.i16(252),
            sform_code: c.i16(254),
            quatern: std::array::from_fn(|i| c.f32(256 + 4 * i)),
            qoffset: std::array::from_fn(|i| c.f32(268 + 4 * i)),
            srow: std::array::from_fn(|r| std::array::from_fn(|k| c.f32(280 + 16 * r + 4 * k))),
            magic,
        };
        Ok((header, endian))
    }

    /// Little-endian 348-byte encoding.
    pub fn to_bytes(&self) -> [u8; HEADER_SIZE] {
        let mut b = [0u8; HEADER_SIZE];
        let mut put = |at: usize, bytes: &[u8]| b[at..at + bytes.len()].copy_from_slice(bytes);
        put(0, &(HEADER_SIZE as i32).to_le_bytes());
        for (i, d) in self.dim.iter().enumerate() {
            put(40 + 2 * i, &d.to_le_bytes());
        }
        put(70, &self.datatype.to_le_bytes());
        put(72, &self.bitpix.to_le_bytes());
        for (i, p) in self.pixdim.iter().enumerate() {
            put(76 + 4 * i, &p.to_le_bytes());
        }
        put(108, &self.vox_offset.to_le_bytes());
        put(112, &self.scl_slope.to_le_bytes());
        put(116, &self.scl_inter.to_le_bytes());
        put(123, &[self.xyzt_units]);
        put(252, &self.qform_code.to_le_bytes());
        put(254, &self.sform_code.to_le_bytes());
        for i in 0..3 {
            put(256 + 4 * i, &self.quatern[i].to_le_bytes());
            put(268 + 4 * i, &self.qoffset[i].to_le_bytes());
        }
        for (r, row) in self.srow.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                put(280 + 16 * r + 4 * k, &v.to_le_bytes());
            }
        }
        put(344, &self.magic);
        b
    }

    pub fn dims(&self) -> Result<[usize; 3]> {
        let rank = self.dim[0];
        if !(rank == 3 || rank == 4) {
            return Err(NiftiError::Unsupported(format!(
                "dim[0] = {rank}, expected 3 or 4"
            )));
        }
        if rank == 4 && self.dim[4] != 1 {
            return Err(NiftiError::Unsupported(format!(
                "4D image with {} frames",
                self.dim[4]
            )));
        }
        let dims: [i16; 3] = [self.dim[1], self.dim[2], self.dim[3]];
        if dims.iter().any(|&d| d < 1) {
            return Err(NiftiError::Format(format!("non-positive dims {dims:?}")));
        }
        Ok(dims.map(|d| d as usize))
    }

    /// The 3x4 voxel-to-world affine: sform, else qform, else pixdim scaling.
    pub fn affine(&self) -> [[f64; 4]; 3] {
        if self.sform_code > 0 {
            return self.srow.map(|r| r.map(|v| v as f64));
        }
        let zooms = [self.pixdim[1], self.pixdim[2], self.pixdim[3]].map(|v| v as f64);
        if self.qform_code > 0 {
            let [b, c, d] = self.quatern.map(|v| v as f64);
            let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
            let rot = [
                [
                    a * a + b * b - c * c - d * d,
                    2.0 * (b * c - a * d),
                    2.0 * (b * d + a * c),
                ],
                [
                    2.0 * (b * c + a * d),
                    a * a + c * c - b * b - d * d,
                    2.0 * (c * d - a * b),
                ],
                [
                    2.0 * (b * d - a * c),
                    2.0 * (c * d + a * b),
                    a * a + d * d - c * c - b * b,
                ],
            ];
            let qfac = if self.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
            let scale = [zooms[0], zooms[1], zooms[2] * qfac];
            return std::array::from_fn(|r| {
                [
                    rot[r][0] * scale[0],
                    rot[r][1] * scale[1],
                    rot[r][2] * scale[2],
                    self.qoffset[r] as f64,
                ]
            });
        }
        let mut m = [[0.0; 4]; 3];
        for (a, row) in m.iter_mut().enumerate() {
            row[a] = zooms[a];
        }
        m
    }
}

/// Splits an affine into axis-aligned origin, spacing and direction signs.
fn geometry(header: &NiftiHeader) -> Result<([f64; 3], [f64; 3], [f64; 3])> {
    let m = header.affine();
    let mut spacing = [0.0; 3];
    let mut direction = [1.0; 3];
    for col in 0..3 {
        let norm = (0..3).map(|r| m[r][col] * m[r][col]).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(NiftiError::UnsupportedOrientation(format!(
                "degenerate affine column {col}"
            )));
        }
        for row in 0..3 {
            let cosine = m[row][col] / norm;
            if row != col && cosine.abs() > OBLIQUE_TOL {
                return Err(NiftiError::UnsupportedOrientation(format!(
                    "direction cosine [{row}][{col}] = {cosine:.4} (only axis-aligned images are supported)"
                )));
            }
        }
        direction[col] = if m[col][col] < 0.0 { -1.0 } else { 1.0 };
        let pix = header.pixdim[col + 1].abs() as f64;
        spacing[col] = if pix > 0.0 { pix } else { norm };
    }
    let origin = [m[0][3], m[1][3], m[2][3]];
    Ok((origin, spacing, direction))
}

fn decompress_if_gzip(bytes: Vec<u8>) -> std::io::Result<Vec<u8>> {
    if bytes.starts_with(&GZIP_MAGIC) {
        let mut out = Vec::new();
        MultiGzDecoder::new(&bytes[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

/// Decodes an uncompressed single-file NIfTI-1 image.
pub fn decode(buf: &[u8]) -> Result<Volume> {
    let (h, endian) = NiftiHeader::parse(buf)?;
    let dims = h.dims()?;
    let dtype = DataType::from_code(h.datatype)
        .ok_or_else(|| NiftiError::Unsupported(format!("datatype code {}", h.datatype)))?;
    let (origin, spacing, direction) = geometry(&h)?;

    let n: usize = dims.iter().product();
    let offset = h.vox_offset as usize;
    if !(h.vox_offset >= HEADER_SIZE as f32) || h.vox_offset.fract() != 0.0 {
        return Err(NiftiError::Format(format!(
            "vox_offset {} is invalid",
            h.vox_offset
        )));
    }
    let need = offset + n * dtype.bytes();
    if buf.len() < need {
        return Err(NiftiError::Format(format!(
            "image data truncated: need {need} bytes, have {}",
            buf.len()
        )));
    }
    let c = Cursor { buf, endian };
    let raw = |i: usize| -> f64 {
        let at = offset + i * dtype.bytes();
        match dtype {
            DataType::U8 => buf[at] as f64,
            DataType::I16 => c.i16(at) as f64,
            DataType::I32 => c.i32(at) as f64,
            DataType::F32 => c.f32(at) as f64,
            DataType::F64 => c.f64(at),
        }
    };
    let (slope, inter) = (h.scl_slope as f64, h.scl_inter as f64);
    let scaled = slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0);
    let data: Vec<f32> = if scaled {
        let inter = if inter.is_finite() { inter } else { 0.0 };
        (0..n).map(|i| (raw(i) * slope + inter) as f32).collect()
    } else if dtype == DataType::F32 {
        (0..n).map(|i| c.f32(offset + 4 * i)).collect()
    } else {
        (0..n).map(|i| raw(i) as f32).collect()
    };
    Ok(Volume::with_direction(
        dims, spacing, origin, direction, data,
    )?)
}

/// Encodes a volume as uncompressed float32 NIfTI-1 with an axis-aligned sform.
pub fn encode(v: &Volume) -> Result<Vec<u8>> {
    let dims = v.dims();
    if dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(NiftiError::Unsupported(format!(
            "dims {dims:?} exceed the NIfTI-1 limit"
        )));
    }
    let (sp, origin, dir) = (v.spacing(), v.origin(), v.direction());
    let mut dim = [1i16; 8];
    dim[0] = 3;
    for a in 0..3 {
        dim[a + 1] = dims[a] as i16;
    }
    let mut pixdim = [1.0f32; 8];
    for a in 0..3 {
        pixdim[a + 1] = sp[a] as f32;
    }
    let mut srow = [[0.0f32; 4]; 3];
    for a in 0..3 {
        srow[a][a] = (dir[a] * sp[a]) as f32;
        srow[a][3] = origin[a] as f32;
    }
    let header = NiftiHeader {
        dim,
        datatype: DataType::F32.code(),
        bitpix: 32,
        pixdim,
        vox_offset: VOX_OFFSET as f32,
        scl_slope: 1.0,
        scl_inter: 0.0,
        xyzt_units: 2, // millimetres
        qform_code: 0,
        sform_code: 1,
        quatern: [0.0; 3],
        qoffset: [0.0; 3],
        srow,
        magic: MAGIC_SINGLE,
    };
    let mut out = Vec::with_capacity(VOX_OFFSET + 4 * v.len());
    out.extend_from_slice(&header.to_bytes());
    out.extend_from_slice(&[0u8; 4]);
    for x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> NiftiError + '_ {
    move |source| NiftiError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let bytes = decompress_if_gzip(bytes).map_err(io_err(path))?;
    decode(&bytes)
}

/// Reads only the header of a (possibly gzipped) file.
pub fn read_header(path: impl AsRef<Path>) -> Result<NiftiHeader> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let bytes = decompress_if_gzip(bytes).map_err(io_err(path))?;
    Ok(NiftiHeader::parse(&bytes)?.0)
}

/// Writes `v` atomically; gzip-compressed when the path ends in `.gz`.
pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw = encode(v)?;
    let gz = path.extension().is_some_and(|e| e == "gz");
    let bytes = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
        enc.write_all(&raw).map_err(io_err(path))?;
        enc.finish().map_err(io_err(path))?
    } else {
        raw
    };
    write_atomic(path, &bytes).map_err(io_err(path))
}
