//! SCV1 volume files, brain masks and per-volume standardization.
//!
//! File layout (little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `SCV1`                            |
//! | 4      | 1    | version, currently 1                    |
//! | 5      | 1    | dtype: 1 = f32, 2 = u8                  |
//! | 6      | 16   | dims `T, D, H, W` as u32                |
//! | 22     | ...  | payload, time-major then row-major      |
//!
//! Masks are u8 files with `T = 1` holding only 0 and 1. Files declaring more
//! than [`MAX_VOXELS`] voxels are rejected before anything is allocated.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"SCV1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 22;
/// Upper bound on `T·D·H·W` accepted by the reader (1 GiB of f32).
pub const MAX_VOXELS: u64 = 1 << 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    U8 = 2,
}

impl DType {
    fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::U8),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Error)]
pub enum VolioError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found:?} at offset {offset}, expected \"SCV1\"")]
    BadMagic { path: PathBuf, offset: usize, found: Vec<u8> },
    #[error("{path}: unsupported version {version} at offset 4")]
    UnsupportedVersion { path: PathBuf, version: u8 },
    #[error("{path}: unknown dtype code {code} at offset 5")]
    UnknownDType { path: PathBuf, code: u8 },
    #[error("{path}: expected {expected:?} data, file holds {found:?}")]
    WrongDType { path: PathBuf, expected: DType, found: DType },
    #[error("{path}: header is {found} bytes, need {HEADER_LEN}")]
    TruncatedHeader { path: PathBuf, found: usize },
    #[error("{path}: dims {dims:?} contain a zero extent")]
    ZeroDim { path: PathBuf, dims: [usize; 4] },
    #[error("{path}: dims {dims:?} declare {voxels} voxels, limit is {MAX_VOXELS}")]
    TooLarge { path: PathBuf, dims: [usize; 4], voxels: u64 },
    #[error("{path}: payload is {found} bytes, dims {dims:?} require {expected}")]
    PayloadLength { path: PathBuf, dims: [usize; 4], expected: usize, found: usize },
    #[error("{path}: mask must have T = 1, got dims {dims:?}")]
    MaskTime { path: PathBuf, dims: [usize; 4] },
    #[error("{path}: mask value {value} at offset {offset} is not 0 or 1")]
    MaskValue { path: PathBuf, offset: usize, value: u8 },
    #[error("mask dims {mask:?} do not match volume dims {volume:?}")]
    MaskDims { mask: [usize; 3], volume: [usize; 3] },
    #[error("voxel count {found} does not match dims {dims:?}")]
    VoxelCount { dims: [usize; 4], found: usize },
    #[error("mask selects no voxels")]
    EmptyMask,
}

type Result<T> = std::result::Result<T, VolioError>;

/// Binary in-brain map over `(D, H, W)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    dims: [usize; 3],
    data: Vec<bool>,
}

impl Mask {
    pub fn new(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(VolioError::VoxelCount { dims: [1, dims[0], dims[1], dims[2]], found: data.len() });
        }
        Ok(Self { dims, data })
    }

    pub fn full(dims: [usize; 3]) -> Self {
        Self { dims, data: vec![true; dims.iter().product()] }
    }

    pub fn from_fn(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    data.push(f(z, y, x));
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of in-mask voxels.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }
}

/// A masked series of 3-D volumes, `(T, D, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume4D {
    dims: [usize; 4],
    voxels: Vec<f32>,
    mask: Mask,
    pub subject_id: String,
    /// Repetition time in seconds; informational only.
    pub tr_seconds: f32,
}

impl Volume4D {
    /// Zeroes every out-of-mask voxel.
    pub fn new(dims: [usize; 4], mut voxels: Vec<f32>, mask: Mask) -> Result<Self> {
        if voxels.len() != dims.iter().product::<usize>() {
            return Err(VolioError::VoxelCount { dims, found: voxels.len() });
        }
        let spatial = [dims[1], dims[2], dims[3]];
        if mask.dims != spatial {
            return Err(VolioError::MaskDims { mask: mask.dims, volume: spatial });
        }
        for frame in voxels.chunks_mut(mask.len()) {
            for (v, &m) in frame.iter_mut().zip(&mask.data) {
                if !m {
                    *v = 0.0;
                }
            }
        }
        Ok(Self { dims, voxels, mask, subject_id: String::new(), tr_seconds: 2.0 })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn spatial_dims(&self) -> [usize; 3] {
        [self.dims[1], self.dims[2], self.dims[3]]
    }

    pub fn time_steps(&self) -> usize {
        self.dims[0]
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.mask.len();
        &self.voxels[t * n..(t + 1) * n]
    }

    /// Replaces the mask, zeroing voxels outside it.
    pub fn with_mask(self, mask: Mask) -> Result<Self> {
        let Volume4D { dims, voxels, subject_id, tr_seconds, .. } = self;
        let mut v = Volume4D::new(dims, voxels, mask)?;
        v.subject_id = subject_id;
        v.tr_seconds = tr_seconds;
        Ok(v)
    }
}

/// Per time step, shifts and scales in-mask voxels to mean 0 and variance 1.
/// Constant volumes map to zeros.
pub fn standardize(vol: &Volume4D) -> Result<Volume4D> {
    let mask = &vol.mask.data;
    let n = vol.mask.count();
    if n == 0 {
        return Err(VolioError::EmptyMask);
    }
    let mut out = vol.clone();
    for frame in out.voxels.chunks_mut(mask.len()) {
        let inside = || frame.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v as f64);
        let mean = inside().sum::<f64>() / n as f64;
        let var = inside().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        for (v, &m) in frame.iter_mut().zip(mask) {
            *v = if m && std > 0.0 { ((*v as f64 - mean) / std) as f32 } else { 0.0 };
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl Payload {
    pub fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::U8(_) => DType::U8,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }
}

pub fn write_scv(path: &Path, dims: [usize; 4], payload: &Payload) -> Result<()> {
    if payload.len() != dims.iter().product::<usize>() {
        return Err(VolioError::VoxelCount { dims, found: payload.len() });
    }
    let io = |source| VolioError::Io { path: path.to_path_buf(), source };
    let mut bytes = Vec::with_capacity(HEADER_LEN + payload.len() * payload.dtype().width());
    bytes.extend_from_slice(MAGIC);
    bytes.push(VERSION);
    bytes.push(payload.dtype() as u8);
    for d in dims {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match payload {
        Payload::F32(v) => v.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
        Payload::U8(v) => bytes.extend_from_slice(v),
    }
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(&bytes).and_then(|_| w.flush()).map_err(io)
}

pub fn read_scv(path: &Path) -> Result<([usize; 4], Payload)> {
    let io = |source| VolioError::Io { path: path.to_path_buf(), source };
    let mut file = File::open(path).map_err(io)?;
    let mut header = Vec::with_capacity(HEADER_LEN);
    (&mut file).take(HEADER_LEN as u64).read_to_end(&mut header).map_err(io)?;
    let (dims, dtype) = parse_header(path, &header)?;

    let expected = dims.iter().product::<usize>() * dtype.width();
    let mut raw = Vec::with_capacity(expected);
    // One byte of slack detects trailing data without reading it all.
    file.take(expected as u64 + 1).read_to_end(&mut raw).map_err(io)?;
    if raw.len() != expected {
        let found = if raw.len() > expected {
            let rest = std::fs::metadata(path).map_err(io)?.len() as usize;
            rest - HEADER_LEN
        } else {
            raw.len()
        };
        return Err(VolioError::PayloadLength { path: path.to_path_buf(), dims, expected, found });
    }
    let payload = match dtype {
        DType::F32 => Payload::F32(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect()),
        DType::U8 => Payload::U8(raw),
    };
    Ok((dims, payload))
}

fn parse_header(path: &Path, h: &[u8]) -> Result<([usize; 4], DType)> {
    let path = path.to_path_buf();
    if h.len() < 4 || &h[..4] != MAGIC {
        let offset = h.iter().zip(MAGIC).position(|(a, b)| a != b).unwrap_or(h.len().min(4));
        return Err(VolioError::BadMagic { path, offset, found: h[..h.len().min(4)].to_vec() });
    }
    if h.len() < HEADER_LEN {
        return Err(VolioError::TruncatedHeader { path, found: h.len() });
    }
    if h[4] != VERSION {
        return Err(VolioError::UnsupportedVersion { path, version: h[4] });
    }
    let dtype = DType::from_code(h[5]).ok_or(VolioError::UnknownDType { path: path.clone(), code: h[5] })?;
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let at = 6 + 4 * i;
        *d = u32::from_le_bytes(h[at..at + 4].try_into().unwrap()) as usize;
    }
    if dims.contains(&0) {
        return Err(VolioError::ZeroDim { path, dims });
    }
    let voxels = dims.iter().fold(1u64, |acc, &d| acc.saturating_mul(d as u64));
    if voxels > MAX_VOXELS {
        return Err(VolioError::TooLarge { path, dims, voxels });
    }
    Ok((dims, dtype))
}

/// Reads an f32 series with a full mask; combine with [`Volume4D::with_mask`].
/// The subject id is taken from the file stem.
pub fn read_volume(path: &Path) -> Result<Volume4D> {
    let (dims, payload) = read_scv(path)?;
    let Payload::F32(voxels) = payload else {
        return Err(VolioError::WrongDType { path: path.to_path_buf(), expected: DType::F32, found: payload.dtype() });
    };
    let mut v = Volume4D::new(dims, voxels, Mask::full([dims[1], dims[2], dims[3]]))?;
    v.subject_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(v)
}

pub fn write_volume(vol: &Volume4D, path: &Path) -> Result<()> {
    write_scv(path, vol.dims, &Payload::F32(vol.voxels.clone()))
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let (dims, payload) = read_scv(path)?;
    let Payload::U8(raw) = payload else {
        return Err(VolioError::WrongDType { path: path.to_path_buf(), expected: DType::U8, found: payload.dtype() });
    };
    if dims[0] != 1 {
        return Err(VolioError::MaskTime { path: path.to_path_buf(), dims });
    }
    if let Some(i) = raw.iter().position(|&v| v > 1) {
        return Err(VolioError::MaskValue { path: path.to_path_buf(), offset: HEADER_LEN + i, value: raw[i] });
    }
    Mask::new([dims[1], dims[2], dims[3]], raw.into_iter().map(|v| v == 1).collect())
}

pub fn write_mask(mask: &Mask, path: &Path) -> Result<()> {
    let [d, h, w] = mask.dims;
    write_scv(path, [1, d, h, w], &Payload::U8(mask.data.iter().map(|&m| m as u8).collect()))
}

/// Loads a series and applies a mask stored alongside it.
pub fn read_masked_volume(volume: &Path, mask: &Path) -> Result<Volume4D> {
    read_volume(volume)?.with_mask(read_mask(mask)?)
}
